#include "escape/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace escape {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "ESCKPT1";
constexpr size_t kMagicLen = 7;

void write_u64(std::ostream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

Parameter& ParamStore::add(const std::string& name, Tensor tensor, bool trainable) {
    if (find(name)) throw std::invalid_argument("ParamStore: duplicate parameter name '" + name + "'");
    params_.push_back(Parameter{name, std::move(tensor), trainable});
    return params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

std::vector<Parameter*> ParamStore::trainable() {
    std::vector<Parameter*> out;
    for (auto& p : params_)
        if (p.trainable) out.push_back(&p);
    return out;
}

std::vector<Parameter*> ParamStore::trainable_with_prefix(const std::string& prefix) {
    std::vector<Parameter*> out;
    for (auto& p : params_)
        if (p.trainable && p.name.rfind(prefix, 0) == 0) out.push_back(&p);
    return out;
}

int64_t ParamStore::total_values() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& p : params_)
        if (p.trainable) p.tensor.zero_grad();
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path.string() + "' for writing");
    out.write(kMagic, kMagicLen);
    write_u64(out, store.all().size());
    for (const auto& p : store.all()) {
        write_u64(out, p.name.size());
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_u64(out, p.tensor.shape().size());
        for (int64_t e : p.tensor.shape()) write_u64(out, static_cast<uint64_t>(e));
        for (double v : p.tensor.data()) {
            float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), sizeof(f));
        }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path.string() + "'");
}

void load_checkpoint(ParamStore& store, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path.string() + "'");
    char magic[kMagicLen];
    in.read(magic, kMagicLen);
    if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path.string() + "'");
    uint64_t count = read_u64(in);
    for (uint64_t i = 0; i < count; ++i) {
        uint64_t name_len = read_u64(in);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        uint64_t rank = read_u64(in);
        Shape shape(rank);
        for (uint64_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(read_u64(in));
        int64_t n = shape_numel(shape);
        Parameter* p = store.find(name);
        if (!p) throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
        if (p->tensor.shape() != shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        auto dst = p->tensor.mutable_data();
        for (int64_t k = 0; k < n; ++k) {
            float f = 0.0f;
            in.read(reinterpret_cast<char*>(&f), sizeof(f));
            dst[static_cast<size_t>(k)] = static_cast<double>(f);
        }
        if (!in) throw std::runtime_error("checkpoint: truncated values for '" + name + "'");
    }
}

}  // namespace escape
