#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rangediff/tensor.hpp"

namespace rangediff {

/// Ordered collection of named learnable buffers.
///
/// Modules keep Tensor handles obtained from the store, so the optimizer and
/// the checkpoint code see exactly the storage the forward pass reads.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
    };

    /// Weight of a layer with `fan_in` inputs, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Tensor add_fan_in(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng);
    Tensor add_constant(const std::string& name, Shape shape, Real value);

    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t total_size() const;
    void zero_grad();

private:
    Tensor add(const std::string& name, Tensor tensor);
    std::vector<Entry> entries_;
};

struct AdamWOptions {
    Real learning_rate = 1e-4;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real epsilon = 1e-8;
    Real weight_decay = 0.01;
};

/// First/second moments congruent with the parameters they belong to.
struct OptimizerState {
    AdamWOptions options;
    std::uint64_t step = 0;
    std::vector<std::vector<Real>> first_moment;
    std::vector<std::vector<Real>> second_moment;
};

/// Decoupled-weight-decay Adam.
///
/// Each update first shrinks every parameter by (1 - lr * wd), then applies the
/// bias-corrected Adam step. Throws TrainingError naming the parameter when a
/// gradient is not finite; parameters are left untouched in that case.
class AdamW {
public:
    AdamW(ParamStore& params, AdamWOptions options);

    void step();
    void zero_grad() { params_.zero_grad(); }

    const OptimizerState& state() const { return state_; }
    OptimizerState& state() { return state_; }
    ParamStore& params() { return params_; }

private:
    ParamStore& params_;
    OptimizerState state_;
};

/// Rescales gradients so their global L2 norm does not exceed max_norm. Returns the pre-clip norm.
Real clip_grad_norm(ParamStore& params, Real max_norm);

}  // namespace rangediff
