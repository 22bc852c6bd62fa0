#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "afi/ops.hpp"
#include "afi/rng.hpp"

namespace afi {

enum class Mode { Train, Eval };

// Named handle onto a tensor owned by a layer. `decay` marks tensors that
// take weight decay (conv/linear/scoring weights); `trainable` is false for
// batch-norm running statistics, which are checkpointed but never stepped.
template <class S>
struct Param {
    std::string name;
    Tensor<S> tensor;
    bool decay = false;
    bool trainable = true;
};

template <class S>
struct Conv2dLayer {
    Tensor<S> weight;  // Cout x (Cin/groups) x k x k
    int stride = 1;
    int pad = 0;
    int groups = 1;

    static Conv2dLayer init(int cin, int cout, int k, int stride, int pad, Rng& rng,
                            int groups = 1) {
        Conv2dLayer layer;
        const int cin_g = cin / groups;
        const double stddev = std::sqrt(2.0 / (double(cin_g) * k * k));
        layer.weight = randn_tensor<S>({cout, cin_g, k, k}, rng, stddev, true);
        layer.stride = stride;
        layer.pad = pad;
        layer.groups = groups;
        return layer;
    }

    Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) const {
        return ops::conv2d(tape, x, weight, stride, pad, groups);
    }

    void collect(const std::string& prefix, std::vector<Param<S>>& out) const {
        out.push_back({prefix + ".w", weight, true, true});
    }
};

template <class S>
struct BatchNorm2dLayer {
    Tensor<S> gamma, beta;
    Tensor<S> running_mean, running_var;
    double eps = 1e-5;
    double momentum = 0.1;

    static BatchNorm2dLayer init(int channels) {
        BatchNorm2dLayer layer;
        layer.gamma = full_tensor<S>({channels}, S(1), true);
        layer.beta = make_tensor<S>({channels}, true);
        layer.running_mean = make_tensor<S>({channels});
        layer.running_var = full_tensor<S>({channels}, S(1));
        return layer;
    }

    Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, Mode mode) {
        return ops::batch_norm(tape, x, gamma, beta, running_mean, running_var,
                               mode == Mode::Train, eps, momentum);
    }

    void collect(const std::string& prefix, std::vector<Param<S>>& out) const {
        out.push_back({prefix + ".gamma", gamma, false, true});
        out.push_back({prefix + ".beta", beta, false, true});
        out.push_back({prefix + ".rmean", running_mean, false, false});
        out.push_back({prefix + ".rvar", running_var, false, false});
    }
};

template <class S>
struct LinearLayer {
    Tensor<S> weight;          // Cout x Cin
    Tensor<S> bias;            // empty when bias-free

    static LinearLayer init(int cin, int cout, bool with_bias, Rng& rng) {
        LinearLayer layer;
        layer.weight = randn_tensor<S>({cout, cin}, rng, std::sqrt(2.0 / cin), true);
        if (with_bias) layer.bias = make_tensor<S>({cout}, true);
        return layer;
    }

    Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) const {
        return ops::linear(tape, x, weight, bias);
    }

    void collect(const std::string& prefix, std::vector<Param<S>>& out) const {
        out.push_back({prefix + ".w", weight, true, true});
        if (bias) out.push_back({prefix + ".b", bias, false, true});
    }
};

}  // namespace afi
