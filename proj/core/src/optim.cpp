#include "rangediff/optim.hpp"

#include <algorithm>
#include <cmath>

#include "rangediff/errors.hpp"

namespace rangediff {

Tensor ParamStore::add(const std::string& name, Tensor tensor) {
    if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    entries_.push_back({name, tensor});
    return tensor;
}

Tensor ParamStore::add_fan_in(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const Real bound = 1.0 / std::sqrt(static_cast<Real>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<Real> dist(-bound, bound);
    std::vector<Real> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return add(name, Tensor::from(std::move(shape), std::move(values), true));
}

Tensor ParamStore::add_constant(const std::string& name, Shape shape, Real value) {
    return add(name, Tensor::full(std::move(shape), value, true));
}

const Tensor& ParamStore::get(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.tensor;
    throw ArgumentError("unknown parameter '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

std::size_t ParamStore::total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

AdamW::AdamW(ParamStore& params, AdamWOptions options) : params_(params) {
    state_.options = options;
    for (const auto& e : params_.entries()) {
        state_.first_moment.emplace_back(e.tensor.numel(), 0.0);
        state_.second_moment.emplace_back(e.tensor.numel(), 0.0);
    }
}

void AdamW::step() {
    auto& entries = params_.entries();
    if (entries.size() != state_.first_moment.size())
        throw DimensionError("optimizer state does not match the parameter list");
    for (std::size_t k = 0; k < entries.size(); ++k) {
        if (state_.first_moment[k].size() != entries[k].tensor.numel())
            throw DimensionError("optimizer moments for '" + entries[k].name + "' are not shape-congruent");
        for (Real g : entries[k].tensor.grad())
            if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + entries[k].name + "'");
    }

    const auto& o = state_.options;
    ++state_.step;
    const Real t = static_cast<Real>(state_.step);
    const Real c1 = 1.0 - std::pow(o.beta1, t);
    const Real c2 = 1.0 - std::pow(o.beta2, t);
    const Real decay = 1.0 - o.learning_rate * o.weight_decay;
    for (std::size_t k = 0; k < entries.size(); ++k) {
        auto p = entries[k].tensor.mutable_data();
        const auto g = entries[k].tensor.grad();
        auto& m = state_.first_moment[k];
        auto& v = state_.second_moment[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] *= decay;
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
            p[i] -= o.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.epsilon);
        }
    }
}

Real clip_grad_norm(ParamStore& params, Real max_norm) {
    Real total = 0.0;
    for (const auto& e : params.entries())
        for (Real g : e.tensor.grad()) total += g * g;
    const Real norm = std::sqrt(total);
    if (max_norm > 0.0 && norm > max_norm) {
        const Real k = max_norm / norm;
        for (auto& e : params.entries())
            for (auto& g : e.tensor.mutable_grad()) g *= k;
    }
    return norm;
}

}  // namespace rangediff
