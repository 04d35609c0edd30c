#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mbgmn/tape.hpp"
#include "mbgmn/tensor.hpp"

namespace mbgmn {

// Named trainable parameters plus their Adam moment buffers.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor m;  // Adam first moment
        Tensor v;  // Adam second moment
    };

    // Registers a parameter initialized from N(0, stddev) with the given rng.
    Tensor& add(const std::string& name, std::vector<std::size_t> shape,
                std::uint64_t seed, double stddev = 0.1);
    Tensor& add_zeros(const std::string& name, std::vector<std::size_t> shape);

    bool has(const std::string& name) const;
    Entry& entry(const std::string& name);
    const Entry& entry(const std::string& name) const;
    Tensor& value(const std::string& name) { return entry(name).value; }
    const Tensor& value(const std::string& name) const { return entry(name).value; }

    std::size_t count() const { return entries_.size(); }
    std::size_t coordinate_count() const;
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    // Registers every parameter on the tape as a trainable leaf.
    std::map<std::string, ad::Var> register_on(ad::Tape& tape) const;

    // Flatten/unflatten all coordinates in registration order (for gradient checks).
    Tensor flatten() const;
    void unflatten(const Tensor& flat);

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// One Adam update over all parameters; grads keyed by parameter name.
void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
               double lr, std::uint64_t step, const AdamConfig& cfg = {});

// Checkpoint container: versioned binary with a trailing checksum.
struct CheckpointState {
    ParamStore params;
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    double learning_rate = 0.0;
};

void save_checkpoint(const CheckpointState& state, const std::string& path);
CheckpointState load_checkpoint(const std::string& path);

}  // namespace mbgmn
