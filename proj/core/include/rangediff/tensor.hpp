#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rangediff {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward;

    std::vector<Real>& ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode differentiation.
///
/// A Tensor is a cheap shared handle. Values produced by operations are never
/// mutated afterwards; leaf tensors (parameters) may be updated in place by the
/// optimizer between graph constructions.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Real value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false);
    static Tensor scalar(Real value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const Real> data() const;
    /// Mutable view for leaves only (parameters, optimizer updates, test perturbation).
    std::span<Real> mutable_data();
    Real item() const;
    Real at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    /// Gradient view; all zeros when no gradient has been accumulated.
    std::span<const Real> grad() const;
    std::span<Real> mutable_grad();
    void zero_grad();

    /// Back-propagates from a single-element tensor.
    void backward() const;

    /// Same values, no history.
    Tensor detach() const;
    /// Identity of the underlying storage; two handles alias iff their ids agree.
    const void* id() const { return node_.get(); }

    // Used by operation implementations.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled();

namespace detail {

using BackwardFn = std::function<void(Node&)>;

/// Creates an operation result. History is recorded only when grad mode is on
/// and at least one input requires a gradient.
Tensor make_result(Shape shape, std::vector<Real> data, std::vector<Tensor> inputs,
                   BackwardFn backward);

}  // namespace detail

}  // namespace rangediff
