#pragma once

#include <utility>
#include <vector>

#include "afi/ops.hpp"
#include "afi/rng.hpp"
#include "afi/tensor.hpp"

namespace afi {

// Shared scoring weights of one attention module. The two maps form a
// bias-free bottleneck: w1 is (Cb x C), w2 is (C x Cb), Cb = max(1, C/r).
template <class S>
struct AfiParams {
    Tensor<S> w1;
    Tensor<S> w2;
    int reduction = 4;

    static int bottleneck_width(int channels, int reduction) {
        return std::max(1, channels / reduction);
    }

    static AfiParams init(int channels, int reduction, Rng& rng) {
        check_config(channels >= 1, "AfiParams: channels must be positive");
        check_config(reduction >= 1, "AfiParams: reduction ratio must be positive");
        const int cb = bottleneck_width(channels, reduction);
        AfiParams p;
        p.reduction = reduction;
        p.w1 = randn_tensor<S>({cb, channels}, rng, std::sqrt(2.0 / channels), true);
        p.w2 = randn_tensor<S>({channels, cb}, rng, std::sqrt(2.0 / cb), true);
        return p;
    }

    int channels() const { return static_cast<int>(w1->shape[1]); }
    int bottleneck() const { return static_cast<int>(w1->shape[0]); }
    int64_t param_count() const { return w1->numel() + w2->numel(); }
};

// Ordered same-shape features competing inside one attention module.
template <class S>
using FeatureStack = std::vector<Tensor<S>>;

// Intermediate attention quantities, each shaped N x B x C.
template <class S>
struct AttentionState {
    Tensor<S> squeezed;
    Tensor<S> scores;
    Tensor<S> weights;
};

template <class S>
struct AfiOutput {
    Tensor<S> feature;  // B x C x H x W convex combination of the inputs
};

// Global average pooling of each feature map to its channel descriptor.
template <class S>
Tensor<S> squeeze(Tape<S>& tape, const Tensor<S>& x) {
    return ops::global_avg_pool(tape, x);
}

// score(z) = w2 * relu(w1 * z), applied to each sample's descriptor.
template <class S>
Tensor<S> score(Tape<S>& tape, const Tensor<S>& z, const AfiParams<S>& params) {
    check_config(z->shape.size() == 2 && z->shape[1] == params.channels(),
                 "score: descriptor " + shape_str(z->shape) + " does not match scoring width " +
                     std::to_string(params.channels()));
    auto hidden = ops::relu(tape, ops::linear<S>(tape, z, params.w1));
    return ops::linear<S>(tape, hidden, params.w2);
}

// Squeezes every feature, scores the descriptors with the shared map,
// normalizes across the feature axis per channel, and mixes the inputs with
// the resulting weights. A single-feature stack short-circuits to the input
// itself; the scoring weights are bypassed entirely (a one-way softmax is
// constant 1, so this matches the full math including gradients).
template <class S>
std::pair<AfiOutput<S>, AttentionState<S>> afi_forward(Tape<S>& tape,
                                                       const FeatureStack<S>& stack,
                                                       const AfiParams<S>* params) {
    check_config(!stack.empty(), "afi_forward: empty feature stack");
    const auto& shape = stack[0]->shape;
    check_config(shape.size() == 4, "afi_forward: features must be BxCxHxW");
    for (const auto& f : stack)
        check_config(f->shape == shape, "afi_forward: feature shapes differ, " + shape_str(shape) +
                                            " vs " + shape_str(f->shape));
    const int64_t n = static_cast<int64_t>(stack.size());
    const int64_t batch = shape[0], channels = shape[1];

    AttentionState<S> state;
    std::vector<Tensor<S>> descriptors;
    descriptors.reserve(size_t(n));
    for (const auto& f : stack) descriptors.push_back(squeeze(tape, f));
    state.squeezed = ops::stack_rows(tape, descriptors);

    if (n == 1) {
        state.scores = make_tensor<S>({1, batch, channels});
        state.weights = full_tensor<S>({1, batch, channels}, S(1));
        return {AfiOutput<S>{stack[0]}, std::move(state)};
    }

    check_config(params != nullptr, "afi_forward: multi-feature stack needs scoring parameters");
    check_config(params->channels() == channels,
                 "afi_forward: scoring width " + std::to_string(params->channels()) +
                     " does not match feature channels " + std::to_string(channels));

    std::vector<Tensor<S>> scored;
    scored.reserve(size_t(n));
    for (const auto& z : descriptors) scored.push_back(score(tape, z, *params));
    state.scores = ops::stack_rows(tape, scored);
    state.weights = ops::softmax_over_features(tape, state.scores);

    Tensor<S> mixed;
    for (int64_t i = 0; i < n; ++i) {
        auto w_i = ops::slice_row(tape, state.weights, i);  // B x C
        auto term = ops::mul_channels(tape, stack[size_t(i)], w_i);
        mixed = mixed ? ops::add(tape, mixed, term) : term;
    }
    return {AfiOutput<S>{mixed}, std::move(state)};
}

}  // namespace afi
