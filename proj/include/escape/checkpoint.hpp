#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "escape/tensor.hpp"

namespace escape {

struct Parameter {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

// Named parameter registry for one model. Names are unique; insertion order
// is the serialization order, which keeps checkpoints byte-stable.
class ParamStore {
public:
    Parameter& add(const std::string& name, Tensor tensor, bool trainable = true);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }
    std::vector<Parameter*> trainable();
    std::vector<Parameter*> trainable_with_prefix(const std::string& prefix);
    int64_t total_values() const;
    void zero_grads();

private:
    std::vector<Parameter> params_;
};

// Checkpoint file layout: magic "ESCKPT1", then u64 parameter count, then per
// parameter {u64 name length, name bytes, u64 rank, u64 extents..., float32
// values}. All integers and floats little-endian. Values are stored as 32-bit
// floats, so load-then-save reproduces the file byte for byte.
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
// Loads by name into an existing store; every stored parameter must exist
// with a matching shape.
void load_checkpoint(ParamStore& store, const std::filesystem::path& path);

}  // namespace escape
