#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace escape {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);

// One node of the dynamically recorded compute graph. Forward ops allocate a
// node, fill `data`, remember their parents, and install a `backprop` closure
// that routes the node's cotangent into the parents' grad buffers.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same extent as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Value handle over a graph node. Copies are shallow; tensors are immutable
// once produced by an op, except for explicit leaf edits (init, optimizer).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t numel() const { return node_->numel(); }
    int64_t extent(int64_t dim) const { return node_->shape[static_cast<size_t>(dim)]; }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    std::span<const double> grad() const { return node_->grad; }

    // Scalar extraction; requires numel() == 1.
    double item() const;

    // Fresh leaf holding a copy of the data, disconnected from the graph.
    Tensor detach() const;

    void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

    // Reverse-mode sweep from a scalar. Grads accumulate until zero_grad().
    void backward() const;

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// When enabled (default), every op output is scanned and a non-finite value
// raises std::runtime_error naming the op.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// Thread-local guard that stops ops from recording parents/backprop closures;
// used for inference rollouts where no backward pass will run.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

// --- elementwise ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);

// --- reductions / shape ---
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor mean_axis0(const Tensor& a);  // [n,c] -> [1,c]

// --- dense 2-D ---
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T -> [m,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // [n,din]·[din,dout]+[dout]
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Softmax within consecutive column blocks of `group` entries, per row.
Tensor softmax_groups(const Tensor& x, int64_t group);

// --- row / column plumbing ---
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor slice_cols(const Tensor& x, int64_t start, int64_t count);
Tensor gather_rows(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> rows);
Tensor scatter_sum_rows(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> dst, int64_t n_rows);
// Rows with mask=1 taken from `on`, rows with mask=0 copied bit-exactly from `off`.
Tensor select_rows_where(const Tensor& on, const Tensor& off,
                         std::shared_ptr<const std::vector<uint8_t>> mask);
// parts[i] is [n*g_i, d] grouped per logical row; result interleaves groups
// per row: [n*(sum g_i), d].
Tensor concat_group_rows(const std::vector<Tensor>& parts, int64_t n,
                         const std::vector<int64_t>& group_sizes);
// samples [(n*g), d], weights [n, g] -> out[i] = sum_j w(i,j) * s(i*g+j).
Tensor weighted_sum_groups(const Tensor& samples, const Tensor& weights);

// --- spatial ---
// x [H,W,Cin] (channel-last), w [kh,kw,Cin,Cout], b [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// map [h,w,C], points [P,2] as (u=col, v=row) pixel coordinates. Points
// outside [0,w-1]x[0,h-1] yield the zero vector and propagate no gradient.
Tensor bilinear_sample(const Tensor& map, const Tensor& points);
// [h,w] -> [h*factor, w*factor]; half-pixel centers, clamp-to-edge.
Tensor upsample_bilinear(const Tensor& x, int factor);
// [h,w,c] -> [h/f, w/f, c], mean over non-overlapping f x f blocks.
Tensor avg_pool(const Tensor& x, int factor);

// --- losses ---
// Elementwise binary cross-entropy with probs clamped to [eps, 1-eps].
inline constexpr double kBceEps = 1e-7;
double bce(double prob, double label);
// Mean BCE over all elements; labels participate as constants.
Tensor bce_mean(const Tensor& probs, const Tensor& labels);

// Instrumentation used by gradient-check harnesses: tracks how close any
// bilinear sampling point came to a lattice line or the in-bounds boundary
// (the kink set of the sampler). Thread-local.
struct BilinearProbe {
    bool active = false;
    double min_margin = 0.0;
};
void bilinear_probe_begin();
double bilinear_probe_end();  // returns the min margin seen (inf if none)

}  // namespace escape
