#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gridnet {

/// Dense NCHW extent.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
               static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

/// Reference-counted dense 4-D array with an optional gradient slot.
///
/// Copies share storage; use clone() for a deep copy. Values are only
/// mutated between forward/backward passes (optimizer updates, test setup).
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

    static Tensor zeros(Shape shape) { return Tensor(shape); }
    static Tensor full(Shape shape, T value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->values.size(); }

    std::span<T> values() { return impl_->values; }
    std::span<const T> values() const { return impl_->values; }
    T* data() { return impl_->values.data(); }
    const T* data() const { return impl_->values.data(); }

    T& at(int n, int c, int h, int w);
    T at(int n, int c, int h, int w) const;

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    /// Gradient slot, allocated zero-filled on first access.
    std::span<T> grad();
    /// Gradient slot; empty span when never allocated.
    std::span<const T> grad() const { return impl_->grad; }
    void zero_grad();
    void clear_grad() { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }

    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    struct Impl {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

/// Records differentiable operations in execution order and replays
/// their adjoints in reverse.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void()>;

    /// Appends a node. `output` is the tensor the node produced.
    void record(std::string_view op, const Tensor<T>& output, BackwardFn fn);

    /// Seeds d(loss)/d(loss) = 1 and runs every node's adjoint in reverse
    /// recording order. Throws if called twice without reset().
    void backward(const Tensor<T>& loss);

    void reset();
    std::size_t size() const { return nodes_.size(); }
    std::string_view op_at(std::size_t i) const { return nodes_[i].op; }

    /// When enabled, activation kinks (relu masks) are folded into a hash so
    /// that finite-difference probes can detect a crossed kink.
    void track_kinks(bool on) { track_kinks_ = on; }
    bool tracking_kinks() const { return track_kinks_; }
    void fold_kink(std::uint64_t h);
    std::uint64_t kink_signature() const { return kink_signature_; }

private:
    struct Node {
        std::string op;
        Tensor<T> output;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
    bool track_kinks_ = false;
    std::uint64_t kink_signature_ = 0;
};

/// Whether an op producing from `inputs` should be recorded on `tape`.
template <typename T>
bool needs_grad(const Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (tape == nullptr) {
        return false;
    }
    for (const auto* t : inputs) {
        if (t != nullptr && t->defined() && t->requires_grad()) {
            return true;
        }
    }
    return false;
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace gridnet
