#include "escape/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace escape {

namespace {

std::atomic<bool> g_finite_checks{true};

thread_local bool t_grad_enabled = true;

thread_local BilinearProbe t_bilinear_probe;

std::shared_ptr<TensorNode> make_node(Shape shape) {
    auto node = std::make_shared<TensorNode>();
    int64_t n = shape_numel(shape);
    node->shape = std::move(shape);
    node->data.assign(static_cast<size_t>(n), 0.0);
    return node;
}

void finalize(const std::shared_ptr<TensorNode>& node, const char* op) {
    if (!g_finite_checks.load(std::memory_order_relaxed)) return;
    for (double v : node->data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

// Marks the result as grad-requiring iff any parent requires grad, and wires
// parents only in that case so inference graphs stay flat.
Tensor wrap(std::shared_ptr<TensorNode> node, std::vector<Tensor> parents,
            std::function<void(TensorNode&)> backprop, const char* op) {
    bool needs = false;
    if (t_grad_enabled)
        for (const Tensor& p : parents) needs = needs || p.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents) node->parents.push_back(p.node());
        node->backprop = std::move(backprop);
    }
    finalize(node, op);
    return Tensor(std::move(node));
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e < 0) throw std::invalid_argument("negative shape extent");
        n *= e;
    }
    return n;
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

void bilinear_probe_begin() {
    t_bilinear_probe.active = true;
    t_bilinear_probe.min_margin = std::numeric_limits<double>::infinity();
}

double bilinear_probe_end() {
    t_bilinear_probe.active = false;
    return t_bilinear_probe.min_margin;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = make_node(std::move(shape));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto node = make_node(std::move(shape));
    std::fill(node->data.begin(), node->data.end(), value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw std::invalid_argument("from_data: shape does not match data length");
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not a scalar");
    return node_->data[0];
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<TensorNode>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
}

void Tensor::backward() const {
    if (numel() != 1) throw std::invalid_argument("backward(): loss must be a scalar");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS for the topological order.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* parent = node->parents[next++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backprop) {
            for (auto& p : node->parents) {
                if (p->requires_grad) p->ensure_grad();
            }
            node->backprop(*node);
        }
    }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "add: shape mismatch");
    auto node = make_node(a.shape());
    const auto& da = a.data();
    const auto& db = b.data();
    for (int64_t i = 0; i < node->numel(); ++i) node->data[i] = da[i] + db[i];
    return wrap(node, {a, b},
                [an = a.node(), bn = b.node()](TensorNode& out) {
                    if (an->requires_grad)
                        for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
                    if (bn->requires_grad)
                        for (size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] += out.grad[i];
                },
                "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "sub: shape mismatch");
    auto node = make_node(a.shape());
    const auto& da = a.data();
    const auto& db = b.data();
    for (int64_t i = 0; i < node->numel(); ++i) node->data[i] = da[i] - db[i];
    return wrap(node, {a, b},
                [an = a.node(), bn = b.node()](TensorNode& out) {
                    if (an->requires_grad)
                        for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
                    if (bn->requires_grad)
                        for (size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] -= out.grad[i];
                },
                "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "mul: shape mismatch");
    auto node = make_node(a.shape());
    const auto& da = a.data();
    const auto& db = b.data();
    for (int64_t i = 0; i < node->numel(); ++i) node->data[i] = da[i] * db[i];
    return wrap(node, {a, b},
                [an = a.node(), bn = b.node()](TensorNode& out) {
                    if (an->requires_grad)
                        for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i] * bn->data[i];
                    if (bn->requires_grad)
                        for (size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] += out.grad[i] * an->data[i];
                },
                "mul");
}

Tensor scale(const Tensor& a, double s) {
    auto node = make_node(a.shape());
    const auto& da = a.data();
    for (int64_t i = 0; i < node->numel(); ++i) node->data[i] = da[i] * s;
    return wrap(node, {a},
                [an = a.node(), s](TensorNode& out) {
                    for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i] * s;
                },
                "scale");
}

Tensor add_scalar(const Tensor& a, double s) {
    auto node = make_node(a.shape());
    const auto& da = a.data();
    for (int64_t i = 0; i < node->numel(); ++i) node->data[i] = da[i] + s;
    return wrap(node, {a},
                [an = a.node()](TensorNode& out) {
                    for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
                },
                "add_scalar");
}

Tensor sigmoid(const Tensor& a) {
    auto node = make_node(a.shape());
    const auto& da = a.data();
    for (int64_t i = 0; i < node->numel(); ++i) node->data[i] = 1.0 / (1.0 + std::exp(-da[i]));
    return wrap(node, {a},
                [an = a.node()](TensorNode& out) {
                    for (size_t i = 0; i < out.grad.size(); ++i) {
                        double y = out.data[i];
                        an->grad[i] += out.grad[i] * y * (1.0 - y);
                    }
                },
                "sigmoid");
}

Tensor silu(const Tensor& a) {
    auto node = make_node(a.shape());
    const auto& da = a.data();
    for (int64_t i = 0; i < node->numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-da[i]));
        node->data[i] = da[i] * s;
    }
    return wrap(node, {a},
                [an = a.node()](TensorNode& out) {
                    for (size_t i = 0; i < out.grad.size(); ++i) {
                        double x = an->data[i];
                        double s = 1.0 / (1.0 + std::exp(-x));
                        an->grad[i] += out.grad[i] * (s + x * s * (1.0 - s));
                    }
                },
                "silu");
}

// ------------------------------------------------------------------ reduction

Tensor sum(const Tensor& a) {
    auto node = make_node(Shape{1});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    node->data[0] = acc;
    return wrap(node, {a},
                [an = a.node()](TensorNode& out) {
                    double g = out.grad[0];
                    for (double& gv : an->grad) gv += g;
                },
                "sum");
}

Tensor mean(const Tensor& a) {
    require(a.numel() > 0, "mean: empty tensor");
    auto node = make_node(Shape{1});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    double inv = 1.0 / static_cast<double>(a.numel());
    node->data[0] = acc * inv;
    return wrap(node, {a},
                [an = a.node(), inv](TensorNode& out) {
                    double g = out.grad[0] * inv;
                    for (double& gv : an->grad) gv += g;
                },
                "mean");
}

Tensor reshape(const Tensor& a, Shape shape) {
    require(shape_numel(shape) == a.numel(), "reshape: element count mismatch");
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::vector<double>(a.data().begin(), a.data().end());
    return wrap(node, {a},
                [an = a.node()](TensorNode& out) {
                    for (size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
                },
                "reshape");
}

Tensor mean_axis0(const Tensor& a) {
    require(a.rank() == 2 && a.extent(0) > 0, "mean_axis0: need non-empty [n,c]");
    int64_t n = a.extent(0), c = a.extent(1);
    auto node = make_node(Shape{1, c});
    const auto& da = a.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) node->data[j] += da[i * c + j];
    double inv = 1.0 / static_cast<double>(n);
    for (int64_t j = 0; j < c; ++j) node->data[j] *= inv;
    return wrap(node, {a},
                [an = a.node(), n, c, inv](TensorNode& out) {
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < c; ++j) an->grad[i * c + j] += out.grad[j] * inv;
                },
                "mean_axis0");
}

// -------------------------------------------------------------------- dense 2D

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(0), "matmul: shape mismatch");
    int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    auto node = make_node(Shape{m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = node->data.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
            double av = pa[i * k + kk];
            const double* pbr = pb + kk * n;
            double* por = po + i * n;
            for (int64_t j = 0; j < n; ++j) por[j] += av * pbr[j];
        }
    }
    return wrap(node, {a, b},
                [an = a.node(), bn = b.node(), m, k, n](TensorNode& out) {
                    if (an->requires_grad) {
                        for (int64_t i = 0; i < m; ++i)
                            for (int64_t j = 0; j < n; ++j) {
                                double g = out.grad[i * n + j];
                                for (int64_t kk = 0; kk < k; ++kk)
                                    an->grad[i * k + kk] += g * bn->data[kk * n + j];
                            }
                    }
                    if (bn->requires_grad) {
                        for (int64_t i = 0; i < m; ++i)
                            for (int64_t kk = 0; kk < k; ++kk) {
                                double av = an->data[i * k + kk];
                                for (int64_t j = 0; j < n; ++j)
                                    bn->grad[kk * n + j] += av * out.grad[i * n + j];
                            }
                    }
                },
                "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(1), "matmul_nt: shape mismatch");
    int64_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
    auto node = make_node(Shape{m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = node->data.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            const double* par = pa + i * k;
            const double* pbr = pb + j * k;
            for (int64_t kk = 0; kk < k; ++kk) acc += par[kk] * pbr[kk];
            po[i * n + j] = acc;
        }
    }
    return wrap(node, {a, b},
                [an = a.node(), bn = b.node(), m, k, n](TensorNode& out) {
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) {
                            double g = out.grad[i * n + j];
                            if (g == 0.0) continue;
                            if (an->requires_grad)
                                for (int64_t kk = 0; kk < k; ++kk)
                                    an->grad[i * k + kk] += g * bn->data[j * k + kk];
                            if (bn->requires_grad)
                                for (int64_t kk = 0; kk < k; ++kk)
                                    bn->grad[j * k + kk] += g * an->data[i * k + kk];
                        }
                },
                "matmul_nt");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "linear: bad ranks");
    require(x.extent(1) == w.extent(0) && w.extent(1) == b.extent(0), "linear: shape mismatch");
    int64_t n = x.extent(0), din = x.extent(1), dout = w.extent(1);
    auto node = make_node(Shape{n, dout});
    const double* px = x.data().data();
    const double* pw = w.data().data();
    const double* pbias = b.data().data();
    double* po = node->data.data();
    for (int64_t i = 0; i < n; ++i) {
        double* row = po + i * dout;
        for (int64_t j = 0; j < dout; ++j) row[j] = pbias[j];
        const double* xr = px + i * din;
        for (int64_t k = 0; k < din; ++k) {
            double xv = xr[k];
            if (xv == 0.0) continue;
            const double* wr = pw + k * dout;
            for (int64_t j = 0; j < dout; ++j) row[j] += xv * wr[j];
        }
    }
    return wrap(node, {x, w, b},
                [xn = x.node(), wn = w.node(), bn = b.node(), n, din, dout](TensorNode& out) {
                    if (bn->requires_grad) {
                        for (int64_t i = 0; i < n; ++i)
                            for (int64_t j = 0; j < dout; ++j) bn->grad[j] += out.grad[i * dout + j];
                    }
                    if (wn->requires_grad) {
                        for (int64_t i = 0; i < n; ++i) {
                            const double* xr = xn->data.data() + i * din;
                            const double* gr = out.grad.data() + i * dout;
                            for (int64_t k = 0; k < din; ++k) {
                                double xv = xr[k];
                                if (xv == 0.0) continue;
                                double* wg = wn->grad.data() + k * dout;
                                for (int64_t j = 0; j < dout; ++j) wg[j] += xv * gr[j];
                            }
                        }
                    }
                    if (xn->requires_grad) {
                        for (int64_t i = 0; i < n; ++i) {
                            const double* gr = out.grad.data() + i * dout;
                            double* xg = xn->grad.data() + i * din;
                            for (int64_t k = 0; k < din; ++k) {
                                const double* wr = wn->data.data() + k * dout;
                                double acc = 0.0;
                                for (int64_t j = 0; j < dout; ++j) acc += wr[j] * gr[j];
                                xg[k] += acc;
                            }
                        }
                    }
                },
                "linear");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require(x.rank() == 2, "layer_norm: need [n,c]");
    int64_t n = x.extent(0), c = x.extent(1);
    require(gain.rank() == 1 && gain.extent(0) == c && bias.rank() == 1 && bias.extent(0) == c,
            "layer_norm: gain/bias mismatch");
    auto node = make_node(Shape{n, c});
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    auto means = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    const double* px = x.data().data();
    const double* pg = gain.data().data();
    const double* pb = bias.data().data();
    for (int64_t i = 0; i < n; ++i) {
        const double* row = px + i * c;
        double m = 0.0;
        for (int64_t j = 0; j < c; ++j) m += row[j];
        m /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double d = row[j] - m;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double is = 1.0 / std::sqrt(var + eps);
        (*means)[i] = m;
        (*inv_std)[i] = is;
        double* orow = node->data.data() + i * c;
        for (int64_t j = 0; j < c; ++j) orow[j] = (row[j] - m) * is * pg[j] + pb[j];
    }
    return wrap(node, {x, gain, bias},
                [xn = x.node(), gn = gain.node(), bn = bias.node(), n, c, means, inv_std](TensorNode& out) {
                    for (int64_t i = 0; i < n; ++i) {
                        const double* row = xn->data.data() + i * c;
                        const double* gr = out.grad.data() + i * c;
                        double m = (*means)[i];
                        double is = (*inv_std)[i];
                        if (bn->requires_grad)
                            for (int64_t j = 0; j < c; ++j) bn->grad[j] += gr[j];
                        if (gn->requires_grad)
                            for (int64_t j = 0; j < c; ++j) gn->grad[j] += gr[j] * (row[j] - m) * is;
                        if (xn->requires_grad) {
                            // dL/dx = is * g⊙gain - mean terms (standard LN backward)
                            double sum_gg = 0.0, sum_ggx = 0.0;
                            for (int64_t j = 0; j < c; ++j) {
                                double gg = gr[j] * gn->data[j];
                                sum_gg += gg;
                                sum_ggx += gg * (row[j] - m) * is;
                            }
                            double invc = 1.0 / static_cast<double>(c);
                            double* xg = xn->grad.data() + i * c;
                            for (int64_t j = 0; j < c; ++j) {
                                double gg = gr[j] * gn->data[j];
                                double xhat = (row[j] - m) * is;
                                xg[j] += is * (gg - invc * sum_gg - xhat * invc * sum_ggx);
                            }
                        }
                    }
                },
                "layer_norm");
}

Tensor softmax_groups(const Tensor& x, int64_t group) {
    require(x.rank() == 2 && group > 0 && x.extent(1) % group == 0, "softmax_groups: bad group size");
    int64_t n = x.extent(0), m = x.extent(1);
    int64_t n_groups = m / group;
    auto node = make_node(Shape{n, m});
    const double* px = x.data().data();
    double* po = node->data.data();
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t g = 0; g < n_groups; ++g) {
            const double* src = px + i * m + g * group;
            double* dst = po + i * m + g * group;
            double mx = src[0];
            for (int64_t j = 1; j < group; ++j) mx = std::max(mx, src[j]);
            double z = 0.0;
            for (int64_t j = 0; j < group; ++j) {
                dst[j] = std::exp(src[j] - mx);
                z += dst[j];
            }
            double iz = 1.0 / z;
            for (int64_t j = 0; j < group; ++j) dst[j] *= iz;
        }
    }
    return wrap(node, {x},
                [xn = x.node(), n, m, group, n_groups](TensorNode& out) {
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t g = 0; g < n_groups; ++g) {
                            const double* y = out.data.data() + i * m + g * group;
                            const double* gy = out.grad.data() + i * m + g * group;
                            double dot = 0.0;
                            for (int64_t j = 0; j < group; ++j) dot += y[j] * gy[j];
                            double* xg = xn->grad.data() + i * m + g * group;
                            for (int64_t j = 0; j < group; ++j) xg[j] += y[j] * (gy[j] - dot);
                        }
                },
                "softmax_groups");
}

// ------------------------------------------------------------- row plumbing

Tensor concat_cols(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "concat_cols: empty input");
    int64_t n = xs[0].extent(0);
    int64_t total = 0;
    for (const Tensor& t : xs) {
        require(t.rank() == 2 && t.extent(0) == n, "concat_cols: row mismatch");
        total += t.extent(1);
    }
    auto node = make_node(Shape{n, total});
    int64_t off = 0;
    for (const Tensor& t : xs) {
        int64_t c = t.extent(1);
        const double* src = t.data().data();
        for (int64_t i = 0; i < n; ++i)
            std::copy(src + i * c, src + (i + 1) * c, node->data.data() + i * total + off);
        off += c;
    }
    std::vector<std::shared_ptr<TensorNode>> pn;
    for (const Tensor& t : xs) pn.push_back(t.node());
    return wrap(node, xs,
                [pn, n, total](TensorNode& out) {
                    int64_t off = 0;
                    for (auto& p : pn) {
                        int64_t c = p->shape[1];
                        if (p->requires_grad) {
                            for (int64_t i = 0; i < n; ++i)
                                for (int64_t j = 0; j < c; ++j)
                                    p->grad[i * c + j] += out.grad[i * total + off + j];
                        }
                        off += c;
                    }
                },
                "concat_cols");
}

Tensor slice_cols(const Tensor& x, int64_t start, int64_t count) {
    require(x.rank() == 2 && start >= 0 && count > 0 && start + count <= x.extent(1),
            "slice_cols: out of range");
    int64_t n = x.extent(0), m = x.extent(1);
    auto node = make_node(Shape{n, count});
    const double* px = x.data().data();
    for (int64_t i = 0; i < n; ++i)
        std::copy(px + i * m + start, px + i * m + start + count, node->data.data() + i * count);
    return wrap(node, {x},
                [xn = x.node(), n, m, start, count](TensorNode& out) {
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < count; ++j)
                            xn->grad[i * m + start + j] += out.grad[i * count + j];
                },
                "slice_cols");
}

Tensor gather_rows(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> rows) {
    require(x.rank() == 2, "gather_rows: need [n,c]");
    int64_t c = x.extent(1);
    int64_t n_src = x.extent(0);
    int64_t m = static_cast<int64_t>(rows->size());
    auto node = make_node(Shape{m, c});
    const double* px = x.data().data();
    for (int64_t i = 0; i < m; ++i) {
        int64_t r = (*rows)[static_cast<size_t>(i)];
        require(r >= 0 && r < n_src, "gather_rows: index out of range");
        std::copy(px + r * c, px + (r + 1) * c, node->data.data() + i * c);
    }
    return wrap(node, {x},
                [xn = x.node(), rows, m, c](TensorNode& out) {
                    for (int64_t i = 0; i < m; ++i) {
                        int64_t r = (*rows)[static_cast<size_t>(i)];
                        for (int64_t j = 0; j < c; ++j) xn->grad[r * c + j] += out.grad[i * c + j];
                    }
                },
                "gather_rows");
}

Tensor scatter_sum_rows(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> dst, int64_t n_rows) {
    require(x.rank() == 2 && static_cast<int64_t>(dst->size()) == x.extent(0),
            "scatter_sum_rows: index count mismatch");
    int64_t m = x.extent(0), c = x.extent(1);
    auto node = make_node(Shape{n_rows, c});
    const double* px = x.data().data();
    for (int64_t i = 0; i < m; ++i) {
        int64_t r = (*dst)[static_cast<size_t>(i)];
        require(r >= 0 && r < n_rows, "scatter_sum_rows: index out of range");
        double* orow = node->data.data() + r * c;
        const double* xr = px + i * c;
        for (int64_t j = 0; j < c; ++j) orow[j] += xr[j];
    }
    return wrap(node, {x},
                [xn = x.node(), dst, m, c](TensorNode& out) {
                    for (int64_t i = 0; i < m; ++i) {
                        int64_t r = (*dst)[static_cast<size_t>(i)];
                        for (int64_t j = 0; j < c; ++j) xn->grad[i * c + j] += out.grad[r * c + j];
                    }
                },
                "scatter_sum_rows");
}

Tensor select_rows_where(const Tensor& on, const Tensor& off,
                         std::shared_ptr<const std::vector<uint8_t>> mask) {
    require(same_shape(on, off) && on.rank() == 2, "select_rows_where: shape mismatch");
    int64_t n = on.extent(0), c = on.extent(1);
    require(static_cast<int64_t>(mask->size()) == n, "select_rows_where: mask length mismatch");
    auto node = make_node(Shape{n, c});
    const double* pon = on.data().data();
    const double* poff = off.data().data();
    for (int64_t i = 0; i < n; ++i) {
        const double* src = (*mask)[static_cast<size_t>(i)] ? pon + i * c : poff + i * c;
        std::copy(src, src + c, node->data.data() + i * c);
    }
    return wrap(node, {on, off},
                [on_n = on.node(), off_n = off.node(), mask, n, c](TensorNode& out) {
                    for (int64_t i = 0; i < n; ++i) {
                        TensorNode* target = (*mask)[static_cast<size_t>(i)] ? on_n.get() : off_n.get();
                        if (!target->requires_grad) continue;
                        for (int64_t j = 0; j < c; ++j) target->grad[i * c + j] += out.grad[i * c + j];
                    }
                },
                "select_rows_where");
}

Tensor concat_group_rows(const std::vector<Tensor>& parts, int64_t n,
                         const std::vector<int64_t>& group_sizes) {
    require(!parts.empty() && parts.size() == group_sizes.size(), "concat_group_rows: arity mismatch");
    int64_t d = parts[0].extent(1);
    int64_t total_g = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
        require(parts[p].rank() == 2 && parts[p].extent(1) == d, "concat_group_rows: width mismatch");
        require(parts[p].extent(0) == n * group_sizes[p], "concat_group_rows: row count mismatch");
        total_g += group_sizes[p];
    }
    auto node = make_node(Shape{n * total_g, d});
    auto sizes = std::make_shared<std::vector<int64_t>>(group_sizes);
    for (int64_t i = 0; i < n; ++i) {
        int64_t out_g = 0;
        for (size_t p = 0; p < parts.size(); ++p) {
            int64_t g = group_sizes[p];
            const double* src = parts[p].data().data() + i * g * d;
            std::copy(src, src + g * d, node->data.data() + (i * total_g + out_g) * d);
            out_g += g;
        }
    }
    std::vector<std::shared_ptr<TensorNode>> pn;
    for (const Tensor& t : parts) pn.push_back(t.node());
    return wrap(node, parts,
                [pn, sizes, n, d, total_g](TensorNode& out) {
                    for (int64_t i = 0; i < n; ++i) {
                        int64_t out_g = 0;
                        for (size_t p = 0; p < pn.size(); ++p) {
                            int64_t g = (*sizes)[p];
                            if (pn[p]->requires_grad) {
                                const double* src = out.grad.data() + (i * total_g + out_g) * d;
                                double* dst = pn[p]->grad.data() + i * g * d;
                                for (int64_t j = 0; j < g * d; ++j) dst[j] += src[j];
                            }
                            out_g += g;
                        }
                    }
                },
                "concat_group_rows");
}

Tensor weighted_sum_groups(const Tensor& samples, const Tensor& weights) {
    require(samples.rank() == 2 && weights.rank() == 2, "weighted_sum_groups: bad ranks");
    int64_t n = weights.extent(0), g = weights.extent(1), d = samples.extent(1);
    require(samples.extent(0) == n * g, "weighted_sum_groups: sample count mismatch");
    auto node = make_node(Shape{n, d});
    const double* ps = samples.data().data();
    const double* pw = weights.data().data();
    for (int64_t i = 0; i < n; ++i) {
        double* orow = node->data.data() + i * d;
        for (int64_t j = 0; j < g; ++j) {
            double w = pw[i * g + j];
            const double* srow = ps + (i * g + j) * d;
            for (int64_t k = 0; k < d; ++k) orow[k] += w * srow[k];
        }
    }
    return wrap(node, {samples, weights},
                [sn = samples.node(), wn = weights.node(), n, g, d](TensorNode& out) {
                    for (int64_t i = 0; i < n; ++i) {
                        const double* gr = out.grad.data() + i * d;
                        for (int64_t j = 0; j < g; ++j) {
                            const double* srow = sn->data.data() + (i * g + j) * d;
                            double w = wn->data[i * g + j];
                            if (wn->requires_grad) {
                                double acc = 0.0;
                                for (int64_t k = 0; k < d; ++k) acc += gr[k] * srow[k];
                                wn->grad[i * g + j] += acc;
                            }
                            if (sn->requires_grad) {
                                double* sg = sn->grad.data() + (i * g + j) * d;
                                for (int64_t k = 0; k < d; ++k) sg[k] += w * gr[k];
                            }
                        }
                    }
                },
                "weighted_sum_groups");
}

// ------------------------------------------------------------------- spatial

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    require(x.rank() == 3 && w.rank() == 4 && b.rank() == 1, "conv2d: bad ranks");
    int64_t h = x.extent(0), wd = x.extent(1), cin = x.extent(2);
    int64_t kh = w.extent(0), kw = w.extent(1);
    require(w.extent(2) == cin && w.extent(3) == b.extent(0), "conv2d: channel mismatch");
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    int64_t cout = w.extent(3);
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    require(oh > 0 && ow > 0, "conv2d: output collapses to zero extent");
    auto node = make_node(Shape{oh, ow, cout});
    const double* px = x.data().data();
    const double* pw = w.data().data();
    const double* pb = b.data().data();
    for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
            double* orow = node->data.data() + (oy * ow + ox) * cout;
            for (int64_t co = 0; co < cout; ++co) orow[co] = pb[co];
            for (int64_t ky = 0; ky < kh; ++ky) {
                int64_t iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    int64_t ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= wd) continue;
                    const double* xr = px + (iy * wd + ix) * cin;
                    const double* wr = pw + ((ky * kw + kx) * cin) * cout;
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        double xv = xr[ci];
                        if (xv == 0.0) continue;
                        const double* wc = wr + ci * cout;
                        for (int64_t co = 0; co < cout; ++co) orow[co] += xv * wc[co];
                    }
                }
            }
        }
    }
    return wrap(node, {x, w, b},
                [xn = x.node(), wn = w.node(), bn = b.node(), h, wd, cin, kh, kw, cout, oh, ow,
                 stride, pad](TensorNode& out) {
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            const double* gr = out.grad.data() + (oy * ow + ox) * cout;
                            if (bn->requires_grad)
                                for (int64_t co = 0; co < cout; ++co) bn->grad[co] += gr[co];
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                int64_t iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) continue;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    int64_t ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= wd) continue;
                                    const double* xr = xn->data.data() + (iy * wd + ix) * cin;
                                    for (int64_t ci = 0; ci < cin; ++ci) {
                                        const double* wc = wn->data.data() + ((ky * kw + kx) * cin + ci) * cout;
                                        if (wn->requires_grad) {
                                            double xv = xr[ci];
                                            if (xv != 0.0) {
                                                double* wg = wn->grad.data() + ((ky * kw + kx) * cin + ci) * cout;
                                                for (int64_t co = 0; co < cout; ++co) wg[co] += xv * gr[co];
                                            }
                                        }
                                        if (xn->requires_grad) {
                                            double acc = 0.0;
                                            for (int64_t co = 0; co < cout; ++co) acc += wc[co] * gr[co];
                                            xn->grad[(iy * wd + ix) * cin + ci] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                },
                "conv2d");
}

namespace {

inline double lattice_margin(double u, double lo, double hi, bool inside) {
    double m = std::min(std::abs(u - lo), std::abs(u - hi));
    if (inside) {
        double f = u - std::floor(u);
        m = std::min(m, std::min(f, 1.0 - f));
    }
    return m;
}

}  // namespace

Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
    require(map.rank() == 3, "bilinear_sample: map must be rank 3");
    require(points.rank() == 2 && points.extent(1) == 2, "bilinear_sample: points must be [P,2]");
    int64_t h = map.extent(0), w = map.extent(1), c = map.extent(2);
    int64_t np = points.extent(0);
    auto node = make_node(Shape{np, c});
    const double* pm = map.data().data();
    const double* pp = points.data().data();
    double umax = static_cast<double>(w - 1);
    double vmax = static_cast<double>(h - 1);
    for (int64_t i = 0; i < np; ++i) {
        double u = pp[i * 2 + 0];
        double v = pp[i * 2 + 1];
        bool inside = u >= 0.0 && u <= umax && v >= 0.0 && v <= vmax;
        if (t_bilinear_probe.active) {
            double m = std::min(lattice_margin(u, 0.0, umax, inside), lattice_margin(v, 0.0, vmax, inside));
            t_bilinear_probe.min_margin = std::min(t_bilinear_probe.min_margin, m);
        }
        if (!inside) continue;  // out-of-bounds gate: zero vector
        int64_t u0 = std::min(static_cast<int64_t>(u), w - 2);
        int64_t v0 = std::min(static_cast<int64_t>(v), h - 2);
        if (w == 1) u0 = 0;
        if (h == 1) v0 = 0;
        double fu = (w == 1) ? 0.0 : u - static_cast<double>(u0);
        double fv = (h == 1) ? 0.0 : v - static_cast<double>(v0);
        int64_t u1 = (w == 1) ? u0 : u0 + 1;
        int64_t v1 = (h == 1) ? v0 : v0 + 1;
        double w00 = (1 - fu) * (1 - fv), w10 = fu * (1 - fv);
        double w01 = (1 - fu) * fv, w11 = fu * fv;
        const double* m00 = pm + (v0 * w + u0) * c;
        const double* m10 = pm + (v0 * w + u1) * c;
        const double* m01 = pm + (v1 * w + u0) * c;
        const double* m11 = pm + (v1 * w + u1) * c;
        double* orow = node->data.data() + i * c;
        for (int64_t k = 0; k < c; ++k)
            orow[k] = w00 * m00[k] + w10 * m10[k] + w01 * m01[k] + w11 * m11[k];
    }
    return wrap(node, {map, points},
                [mn = map.node(), ptn = points.node(), h, w, c, np, umax, vmax](TensorNode& out) {
                    const double* pm = mn->data.data();
                    const double* pp = ptn->data.data();
                    for (int64_t i = 0; i < np; ++i) {
                        double u = pp[i * 2 + 0];
                        double v = pp[i * 2 + 1];
                        if (!(u >= 0.0 && u <= umax && v >= 0.0 && v <= vmax)) continue;
                        int64_t u0 = std::min(static_cast<int64_t>(u), w - 2);
                        int64_t v0 = std::min(static_cast<int64_t>(v), h - 2);
                        if (w == 1) u0 = 0;
                        if (h == 1) v0 = 0;
                        double fu = (w == 1) ? 0.0 : u - static_cast<double>(u0);
                        double fv = (h == 1) ? 0.0 : v - static_cast<double>(v0);
                        int64_t u1 = (w == 1) ? u0 : u0 + 1;
                        int64_t v1 = (h == 1) ? v0 : v0 + 1;
                        double w00 = (1 - fu) * (1 - fv), w10 = fu * (1 - fv);
                        double w01 = (1 - fu) * fv, w11 = fu * fv;
                        const double* gr = out.grad.data() + i * c;
                        if (mn->requires_grad) {
                            double* g00 = mn->grad.data() + (v0 * w + u0) * c;
                            double* g10 = mn->grad.data() + (v0 * w + u1) * c;
                            double* g01 = mn->grad.data() + (v1 * w + u0) * c;
                            double* g11 = mn->grad.data() + (v1 * w + u1) * c;
                            for (int64_t k = 0; k < c; ++k) {
                                double g = gr[k];
                                g00[k] += w00 * g;
                                g10[k] += w10 * g;
                                g01[k] += w01 * g;
                                g11[k] += w11 * g;
                            }
                        }
                        if (ptn->requires_grad) {
                            const double* m00 = pm + (v0 * w + u0) * c;
                            const double* m10 = pm + (v0 * w + u1) * c;
                            const double* m01 = pm + (v1 * w + u0) * c;
                            const double* m11 = pm + (v1 * w + u1) * c;
                            double du = 0.0, dv = 0.0;
                            for (int64_t k = 0; k < c; ++k) {
                                double g = gr[k];
                                du += g * ((1 - fv) * (m10[k] - m00[k]) + fv * (m11[k] - m01[k]));
                                dv += g * ((1 - fu) * (m01[k] - m00[k]) + fu * (m11[k] - m10[k]));
                            }
                            ptn->grad[i * 2 + 0] += du;
                            ptn->grad[i * 2 + 1] += dv;
                        }
                    }
                },
                "bilinear_sample");
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
    require(x.rank() == 2 && factor >= 1, "upsample_bilinear: need [h,w] and factor >= 1");
    int64_t h = x.extent(0), w = x.extent(1);
    int64_t oh = h * factor, ow = w * factor;
    auto node = make_node(Shape{oh, ow});
    // Precompute the (index, weight) mapping once; it is shared with backward.
    struct Axis {
        std::vector<int64_t> i0, i1;
        std::vector<double> f;
    };
    auto make_axis = [factor](int64_t in, int64_t out) {
        Axis a;
        a.i0.resize(static_cast<size_t>(out));
        a.i1.resize(static_cast<size_t>(out));
        a.f.resize(static_cast<size_t>(out));
        for (int64_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            int64_t i0 = std::min(static_cast<int64_t>(src), in - 2);
            if (in == 1) i0 = 0;
            a.i0[o] = i0;
            a.i1[o] = (in == 1) ? i0 : i0 + 1;
            a.f[o] = (in == 1) ? 0.0 : src - static_cast<double>(i0);
        }
        return a;
    };
    auto ay = std::make_shared<Axis>(make_axis(h, oh));
    auto ax = std::make_shared<Axis>(make_axis(w, ow));
    const double* px = x.data().data();
    for (int64_t oy = 0; oy < oh; ++oy) {
        double fy = ay->f[oy];
        const double* r0 = px + ay->i0[oy] * w;
        const double* r1 = px + ay->i1[oy] * w;
        double* orow = node->data.data() + oy * ow;
        for (int64_t ox = 0; ox < ow; ++ox) {
            double fx = ax->f[ox];
            double top = (1 - fx) * r0[ax->i0[ox]] + fx * r0[ax->i1[ox]];
            double bot = (1 - fx) * r1[ax->i0[ox]] + fx * r1[ax->i1[ox]];
            orow[ox] = (1 - fy) * top + fy * bot;
        }
    }
    return wrap(node, {x},
                [xn = x.node(), ay, ax, w, oh, ow](TensorNode& out) {
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        double fy = ay->f[oy];
                        double* g0 = xn->grad.data() + ay->i0[oy] * w;
                        double* g1 = xn->grad.data() + ay->i1[oy] * w;
                        const double* gr = out.grad.data() + oy * ow;
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            double fx = ax->f[ox];
                            double g = gr[ox];
                            g0[ax->i0[ox]] += (1 - fx) * (1 - fy) * g;
                            g0[ax->i1[ox]] += fx * (1 - fy) * g;
                            g1[ax->i0[ox]] += (1 - fx) * fy * g;
                            g1[ax->i1[ox]] += fx * fy * g;
                        }
                    }
                },
                "upsample_bilinear");
}

Tensor avg_pool(const Tensor& x, int factor) {
    require(x.rank() == 3 && factor >= 1, "avg_pool: need [h,w,c]");
    int64_t h = x.extent(0), w = x.extent(1), ch = x.extent(2);
    require(h % factor == 0 && w % factor == 0, "avg_pool: extent not divisible by factor");
    int64_t oh = h / factor, ow = w / factor;
    auto node = make_node(Shape{oh, ow, ch});
    const double* px = x.data().data();
    double inv = 1.0 / static_cast<double>(factor * factor);
    for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
            double* orow = node->data.data() + (oy * ow + ox) * ch;
            for (int64_t ky = 0; ky < factor; ++ky)
                for (int64_t kx = 0; kx < factor; ++kx) {
                    const double* xr = px + ((oy * factor + ky) * w + ox * factor + kx) * ch;
                    for (int64_t cc = 0; cc < ch; ++cc) orow[cc] += xr[cc];
                }
            for (int64_t cc = 0; cc < ch; ++cc) orow[cc] *= inv;
        }
    return wrap(node, {x},
                [xn = x.node(), w, ch, oh, ow, factor, inv](TensorNode& out) {
                    for (int64_t oy = 0; oy < oh; ++oy)
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            const double* gr = out.grad.data() + (oy * ow + ox) * ch;
                            for (int64_t ky = 0; ky < factor; ++ky)
                                for (int64_t kx = 0; kx < factor; ++kx) {
                                    double* xg = xn->grad.data() +
                                                 ((oy * factor + ky) * w + ox * factor + kx) * ch;
                                    for (int64_t cc = 0; cc < ch; ++cc) xg[cc] += gr[cc] * inv;
                                }
                        }
                },
                "avg_pool");
}

// -------------------------------------------------------------------- losses

double bce(double prob, double label) {
    double p = std::clamp(prob, kBceEps, 1.0 - kBceEps);
    return -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
}

Tensor bce_mean(const Tensor& probs, const Tensor& labels) {
    require(same_shape(probs, labels), "bce_mean: shape mismatch");
    require(probs.numel() > 0, "bce_mean: empty input");
    for (double y : labels.data())
        require(y == 0.0 || y == 1.0, "bce_mean: labels must be 0 or 1");
    auto node = make_node(Shape{1});
    const auto& dp = probs.data();
    const auto& dl = labels.data();
    double acc = 0.0;
    for (int64_t i = 0; i < probs.numel(); ++i) acc += bce(dp[i], dl[i]);
    double inv = 1.0 / static_cast<double>(probs.numel());
    node->data[0] = acc * inv;
    return wrap(node, {probs, labels},
                [pn = probs.node(), ln = labels.node(), inv](TensorNode& out) {
                    if (!pn->requires_grad) return;
                    double g = out.grad[0] * inv;
                    for (size_t i = 0; i < pn->data.size(); ++i) {
                        double p = pn->data[i];
                        if (p <= kBceEps || p >= 1.0 - kBceEps) continue;  // clamped: zero slope
                        double y = ln->data[i];
                        pn->grad[i] += g * ((1.0 - y) / (1.0 - p) - y / p);
                    }
                },
                "bce_mean");
}

}  // namespace escape
