#pragma once

#include <optional>
#include <utility>

#include "afi/afi_module.hpp"
#include "afi/layers.hpp"

namespace afi {

template <class S>
using HookFn = std::function<void(const std::string& tag, const Tensor<S>&)>;

template <class S>
struct ProjectionShortcut {
    Conv2dLayer<S> conv;  // 1x1, strided
    BatchNorm2dLayer<S> bn;

    static ProjectionShortcut init(int cin, int cout, int stride, Rng& rng) {
        ProjectionShortcut p;
        p.conv = Conv2dLayer<S>::init(cin, cout, 1, stride, 0, rng);
        p.bn = BatchNorm2dLayer<S>::init(cout);
        return p;
    }

    Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, Mode mode) {
        return bn.forward(tape, conv.forward(tape, x), mode);
    }

    void collect(const std::string& prefix, std::vector<Param<S>>& out) const {
        conv.collect(prefix + ".conv", out);
        bn.collect(prefix + ".bn", out);
    }
};

// Two full-width 3x3 convolutions around an identity (or projected) skip:
// out = relu(x' + bn2(conv2(relu(bn1(conv1(x)))))).
template <class S>
struct BasicBlock {
    Conv2dLayer<S> conv1;
    BatchNorm2dLayer<S> bn1;
    Conv2dLayer<S> conv2;
    BatchNorm2dLayer<S> bn2;
    std::optional<ProjectionShortcut<S>> shortcut;
    std::string tag;

    static BasicBlock init(int cin, int cout, int stride, Rng& rng) {
        BasicBlock b;
        b.conv1 = Conv2dLayer<S>::init(cin, cout, 3, stride, 1, rng);
        b.bn1 = BatchNorm2dLayer<S>::init(cout);
        b.conv2 = Conv2dLayer<S>::init(cout, cout, 3, 1, 1, rng);
        b.bn2 = BatchNorm2dLayer<S>::init(cout);
        if (stride != 1 || cin != cout)
            b.shortcut = ProjectionShortcut<S>::init(cin, cout, stride, rng);
        return b;
    }

    Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, Mode mode,
                      const HookFn<S>* hook = nullptr) {
        auto feat = ops::relu(tape, bn1.forward(tape, conv1.forward(tape, x), mode));
        if (hook && *hook) (*hook)(tag + ".x", feat);
        auto branch = bn2.forward(tape, conv2.forward(tape, feat), mode);
        auto skip = shortcut ? shortcut->forward(tape, x, mode) : x;
        auto out = ops::relu(tape, ops::add(tape, skip, branch));
        if (hook && *hook) (*hook)(tag + ".out", out);
        return out;
    }

    void collect(const std::string& prefix, std::vector<Param<S>>& out) const {
        conv1.collect(prefix + ".conv1", out);
        bn1.collect(prefix + ".bn1", out);
        conv2.collect(prefix + ".conv2", out);
        bn2.collect(prefix + ".bn2", out);
        if (shortcut) shortcut->collect(prefix + ".proj", out);
    }
};

// Residual block with a shrinking first kernel: the half-width feature X is
// concatenated with the attention output R before the second convolution.
// The attention input set comes from the stage's running feature stack; with
// `include_self` the freshly computed X joins it, otherwise only strictly
// earlier features are attended (an empty stack falls back to X so the
// concatenation is always well-formed).
template <class S>
struct AfiBasicBlock {
    Conv2dLayer<S> conv1;  // cin -> floor(C/2)
    BatchNorm2dLayer<S> bn1;
    Conv2dLayer<S> conv2;  // 2*floor(C/2) -> C
    BatchNorm2dLayer<S> bn2;
    std::optional<ProjectionShortcut<S>> shortcut;
    std::optional<AfiParams<S>> afi;
    bool include_self = true;
    std::string tag;

    static AfiBasicBlock init(int cin, int cout, int stride, bool with_afi, int reduction,
                              bool include_self, Rng& rng) {
        AfiBasicBlock b;
        const int half = cout / 2;
        b.conv1 = Conv2dLayer<S>::init(cin, half, 3, stride, 1, rng);
        b.bn1 = BatchNorm2dLayer<S>::init(half);
        b.conv2 = Conv2dLayer<S>::init(2 * half, cout, 3, 1, 1, rng);
        b.bn2 = BatchNorm2dLayer<S>::init(cout);
        if (stride != 1 || cin != cout)
            b.shortcut = ProjectionShortcut<S>::init(cin, cout, stride, rng);
        if (with_afi) b.afi = AfiParams<S>::init(half, reduction, rng);
        b.include_self = include_self;
        return b;
    }

    Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, FeatureStack<S>& stack, Mode mode,
                      const HookFn<S>* hook = nullptr, AttentionState<S>* state_out = nullptr) {
        auto feat = ops::relu(tape, bn1.forward(tape, conv1.forward(tape, x), mode));
        if (hook && *hook) (*hook)(tag + ".x", feat);

        FeatureStack<S> inputs;
        if (stack.empty()) {
            inputs.push_back(feat);
        } else {
            inputs = stack;
            if (include_self) inputs.push_back(feat);
        }
        auto [afi_out, state] = afi_forward<S>(tape, inputs, afi ? &*afi : nullptr);
        if (hook && *hook) (*hook)(tag + ".afi", afi_out.feature);
        if (state_out) *state_out = std::move(state);

        auto cat = ops::concat_channels(tape, feat, afi_out.feature);
        auto branch = bn2.forward(tape, conv2.forward(tape, cat), mode);
        auto skip = shortcut ? shortcut->forward(tape, x, mode) : x;
        auto out = ops::relu(tape, ops::add(tape, skip, branch));
        if (hook && *hook) (*hook)(tag + ".out", out);

        stack.push_back(feat);
        return out;
    }

    void collect(const std::string& prefix, std::vector<Param<S>>& out) const {
        conv1.collect(prefix + ".conv1", out);
        bn1.collect(prefix + ".bn1", out);
        conv2.collect(prefix + ".conv2", out);
        bn2.collect(prefix + ".bn2", out);
        if (shortcut) shortcut->collect(prefix + ".proj", out);
        if (afi) {
            out.push_back({prefix + ".afi.w1", afi->w1, true, true});
            out.push_back({prefix + ".afi.w2", afi->w2, true, true});
        }
    }
};

// Inverted-residual block with attention: a halved 1x1 expansion produces X,
// the attention output is concatenated to restore the full expansion width,
// then depthwise 3x3 and 1x1 projection follow. The skip is added only for
// stride 1 with matching channel counts.
template <class S>
struct AfiMobileNetV2Block {
    Conv2dLayer<S> expand;  // 1x1, cin -> expanded/2
    BatchNorm2dLayer<S> bn_expand;
    Conv2dLayer<S> depthwise;  // 3x3, groups = expanded
    BatchNorm2dLayer<S> bn_depthwise;
    Conv2dLayer<S> project;  // 1x1, expanded -> cout
    BatchNorm2dLayer<S> bn_project;
    std::optional<AfiParams<S>> afi;
    bool include_self = true;
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    std::string tag;

    static AfiMobileNetV2Block init(int cin, int cout, int expanded, int stride, bool with_afi,
                                    int reduction, bool include_self, Rng& rng) {
        check_config(expanded % 2 == 0, "AfiMobileNetV2Block: expansion width must be even");
        AfiMobileNetV2Block b;
        const int half = expanded / 2;
        b.expand = Conv2dLayer<S>::init(cin, half, 1, 1, 0, rng);
        b.bn_expand = BatchNorm2dLayer<S>::init(half);
        b.depthwise = Conv2dLayer<S>::init(expanded, expanded, 3, stride, 1, rng, expanded);
        b.bn_depthwise = BatchNorm2dLayer<S>::init(expanded);
        b.project = Conv2dLayer<S>::init(expanded, cout, 1, 1, 0, rng);
        b.bn_project = BatchNorm2dLayer<S>::init(cout);
        if (with_afi) b.afi = AfiParams<S>::init(half, reduction, rng);
        b.include_self = include_self;
        b.in_channels = cin;
        b.out_channels = cout;
        b.stride = stride;
        return b;
    }

    Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, FeatureStack<S>& stack, Mode mode,
                      const HookFn<S>* hook = nullptr) {
        auto feat = ops::relu(tape, bn_expand.forward(tape, expand.forward(tape, x), mode));
        if (hook && *hook) (*hook)(tag + ".x", feat);

        FeatureStack<S> inputs;
        if (stack.empty()) {
            inputs.push_back(feat);
        } else {
            inputs = stack;
            if (include_self) inputs.push_back(feat);
        }
        auto [afi_out, state] = afi_forward<S>(tape, inputs, afi ? &*afi : nullptr);
        if (hook && *hook) (*hook)(tag + ".afi", afi_out.feature);

        auto cat = ops::concat_channels(tape, feat, afi_out.feature);
        auto dw = ops::relu(tape, bn_depthwise.forward(tape, depthwise.forward(tape, cat), mode));
        auto proj = bn_project.forward(tape, project.forward(tape, dw), mode);
        auto out = (stride == 1 && in_channels == out_channels) ? ops::add(tape, x, proj) : proj;
        if (hook && *hook) (*hook)(tag + ".out", out);

        stack.push_back(feat);
        return out;
    }

    void collect(const std::string& prefix, std::vector<Param<S>>& out) const {
        expand.collect(prefix + ".expand", out);
        bn_expand.collect(prefix + ".bn_expand", out);
        depthwise.collect(prefix + ".dw", out);
        bn_depthwise.collect(prefix + ".bn_dw", out);
        project.collect(prefix + ".project", out);
        bn_project.collect(prefix + ".bn_project", out);
        if (afi) {
            out.push_back({prefix + ".afi.w1", afi->w1, true, true});
            out.push_back({prefix + ".afi.w2", afi->w2, true, true});
        }
    }
};

}  // namespace afi
