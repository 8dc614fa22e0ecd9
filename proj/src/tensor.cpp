#include "gridnet/tensor.hpp"

#include <algorithm>
#include <stdexcept>

namespace gridnet {

std::string Shape::str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Impl>()) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
        throw std::invalid_argument("negative tensor extent " + shape.str());
    }
    impl_->shape = shape;
    impl_->values.assign(shape.numel(), T(0));
    impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) : Tensor(shape, requires_grad) {
    if (values.size() != shape.numel()) {
        throw std::invalid_argument("value count " + std::to_string(values.size()) + " does not match shape " +
                                    shape.str());
    }
    impl_->values = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    Tensor t(shape);
    std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
    return t;
}

template <typename T>
T& Tensor<T>::at(int n, int c, int h, int w) {
    const Shape& s = impl_->shape;
    return impl_->values[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T Tensor<T>::at(int n, int c, int h, int w) const {
    const Shape& s = impl_->shape;
    return impl_->values[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
std::span<T> Tensor<T>::grad() {
    if (impl_->grad.empty() && !impl_->values.empty()) {
        impl_->grad.assign(impl_->values.size(), T(0));
    }
    return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (!impl_->grad.empty()) {
        std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    Tensor out(impl_->shape, impl_->values, impl_->requires_grad);
    return out;
}

template <typename T>
void Tape<T>::record(std::string_view op, const Tensor<T>& output, BackwardFn fn) {
    if (consumed_) {
        throw std::logic_error("tape already consumed by backward; reset() before recording");
    }
    nodes_.push_back(Node{std::string(op), output, std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (consumed_) {
        throw std::logic_error("backward called twice on the same tape without reset()");
    }
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument("backward expects a scalar loss");
    }
    if (nodes_.empty() || !nodes_.back().output.same_storage(loss)) {
        throw std::invalid_argument("loss must be the last tensor recorded on the tape");
    }
    consumed_ = true;
    Tensor<T> seed = loss;
    seed.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output.has_grad()) {
            it->fn();
        }
    }
}

template <typename T>
void Tape<T>::reset() {
    nodes_.clear();
    consumed_ = false;
    kink_signature_ = 0;
}

template <typename T>
void Tape<T>::fold_kink(std::uint64_t h) {
    // boost::hash_combine style mixing
    kink_signature_ ^= h + 0x9e3779b97f4a7c15ULL + (kink_signature_ << 6) + (kink_signature_ >> 2);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace gridnet
