#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "afi/errors.hpp"
#include "afi/rng.hpp"

namespace afi {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor with an optional gradient buffer. Produced values
// are treated as immutable once an op has consumed them; a tensor and the
// tape that created it belong to a single thread.
template <class S>
struct TensorObj {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    S* grad_ptr() {
        if (grad.empty()) grad.assign(data.size(), S(0));
        return grad.data();
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }
};

template <class S>
using Tensor = std::shared_ptr<TensorObj<S>>;

template <class S>
Tensor<S> make_tensor(Shape shape, bool requires_grad = false) {
    for (int64_t d : shape)
        check_config(d > 0, "tensor extents must be positive, got " + shape_str(shape));
    auto t = std::make_shared<TensorObj<S>>();
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(shape_numel(t->shape)), S(0));
    t->requires_grad = requires_grad;
    return t;
}

template <class S>
Tensor<S> full_tensor(Shape shape, S value, bool requires_grad = false) {
    auto t = make_tensor<S>(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

template <class S>
Tensor<S> tensor_from(Shape shape, std::vector<S> values, bool requires_grad = false) {
    auto t = make_tensor<S>(std::move(shape), requires_grad);
    check_config(static_cast<int64_t>(values.size()) == t->numel(),
                 "tensor_from: value count does not match shape " + shape_str(t->shape));
    t->data = std::move(values);
    return t;
}

template <class S>
Tensor<S> randn_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    auto t = make_tensor<S>(std::move(shape), requires_grad);
    for (auto& v : t->data) v = static_cast<S>(rng.normal(0.0, stddev));
    return t;
}

// Forward outputs are scanned for NaN/Inf so failures surface at the op that
// produced them, with enough context to act on.
inline bool& finite_checks_enabled() {
    static bool enabled = true;
    return enabled;
}

template <class S>
void check_finite(const Tensor<S>& t, const char* op_name) {
    if (!finite_checks_enabled()) return;
    for (const S& v : t->data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by ") + op_name);
    }
}

// Reverse-mode tape: ops append a node after producing their output, so the
// record is topologically ordered by construction and one reverse sweep
// visits every node exactly once.
template <class S>
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        if (recording_) nodes_.push_back(std::move(backward_fn));
    }

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
};

template <class S>
struct NoGradGuard {
    explicit NoGradGuard(Tape<S>& tape) : tape_(tape), prev_(tape.recording()) {
        tape_.set_recording(false);
    }
    ~NoGradGuard() { tape_.set_recording(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape<S>& tape_;
    bool prev_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Tensors whose
// requires_grad is set but which never fed the loss keep zero gradients.
template <class S>
void backward(Tape<S>& tape, const Tensor<S>& loss) {
    check_config(loss->numel() == 1,
                 "backward: loss must be scalar, got shape " + shape_str(loss->shape));
    loss->grad_ptr()[0] += S(1);
    tape.run_backward();
}

}  // namespace afi
