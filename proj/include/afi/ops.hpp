#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>
#include <vector>

#include "afi/tensor.hpp"

namespace afi::ops {

// Intra-op worker count. Results are bitwise identical for any value because
// parallel sections only ever write disjoint per-sample regions.
inline int& num_threads() {
    static int n = 1;
    return n;
}

inline void parallel_for(int64_t count, const std::function<void(int64_t, int64_t)>& body) {
    const int threads = std::max(1, num_threads());
    if (threads == 1 || count <= 1) {
        body(0, count);
        return;
    }
    const int workers = static_cast<int>(std::min<int64_t>(threads, count));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    const int64_t chunk = (count + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        const int64_t begin = t * chunk;
        const int64_t end = std::min(count, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&body, begin, end] { body(begin, end); });
    }
    for (auto& th : pool) th.join();
}

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<MatRM<S>>;
template <class S>
using MapCM = Eigen::Map<const MatRM<S>>;

namespace detail {

// Lowers one sample's input patch grid to a (Cg*k*k) x (Hout*Wout) matrix.
// Row order is channel-major then kernel row/col, matching the row-major
// kernel layout so the GEMM consumes both without reshuffling.
template <class S>
void im2col(const S* x, int64_t channels, int64_t h, int64_t w, int64_t k, int64_t stride,
            int64_t pad, int64_t hout, int64_t wout, S* col) {
    const int64_t plane = h * w;
    const int64_t out_plane = hout * wout;
    for (int64_t c = 0; c < channels; ++c) {
        const S* src = x + c * plane;
        for (int64_t kh = 0; kh < k; ++kh) {
            for (int64_t kw = 0; kw < k; ++kw) {
                S* dst = col + ((c * k + kh) * k + kw) * out_plane;
                for (int64_t oh = 0; oh < hout; ++oh) {
                    const int64_t ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= h) {
                        std::fill(dst, dst + wout, S(0));
                        dst += wout;
                        continue;
                    }
                    for (int64_t ow = 0; ow < wout; ++ow) {
                        const int64_t iw = ow * stride - pad + kw;
                        *dst++ = (iw >= 0 && iw < w) ? src[ih * w + iw] : S(0);
                    }
                }
            }
        }
    }
}

template <class S>
void col2im_add(const S* col, int64_t channels, int64_t h, int64_t w, int64_t k, int64_t stride,
                int64_t pad, int64_t hout, int64_t wout, S* x_grad) {
    const int64_t plane = h * w;
    const int64_t out_plane = hout * wout;
    for (int64_t c = 0; c < channels; ++c) {
        S* dst = x_grad + c * plane;
        for (int64_t kh = 0; kh < k; ++kh) {
            for (int64_t kw = 0; kw < k; ++kw) {
                const S* src = col + ((c * k + kh) * k + kw) * out_plane;
                for (int64_t oh = 0; oh < hout; ++oh) {
                    const int64_t ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= h) {
                        src += wout;
                        continue;
                    }
                    for (int64_t ow = 0; ow < wout; ++ow) {
                        const int64_t iw = ow * stride - pad + kw;
                        if (iw >= 0 && iw < w) dst[ih * w + iw] += src[ow];
                    }
                    src += wout;
                }
            }
        }
    }
}

}  // namespace detail

// 2-D cross-correlation, zero padding, no bias. Kernel layout is
// Cout x (Cin/groups) x k x k; output channels are grouped contiguously.
template <class S>
Tensor<S> conv2d(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& kernel, int stride, int pad,
                 int groups = 1) {
    check_config(x->shape.size() == 4, "conv2d: input must be BxCxHxW, got " + shape_str(x->shape));
    check_config(kernel->shape.size() == 4,
                 "conv2d: kernel must be CoutxCinGxkxk, got " + shape_str(kernel->shape));
    check_config(stride >= 1, "conv2d: stride must be positive");
    check_config(pad >= 0, "conv2d: pad must be non-negative");
    check_config(groups >= 1, "conv2d: groups must be positive");
    const int64_t batch = x->shape[0], cin = x->shape[1], h = x->shape[2], w = x->shape[3];
    const int64_t cout = kernel->shape[0], cin_g = kernel->shape[1], k = kernel->shape[2];
    check_config(kernel->shape[3] == k, "conv2d: kernel must be square, got " + shape_str(kernel->shape));
    check_config(k % 2 == 1, "conv2d: kernel size must be odd");
    check_config(cin % groups == 0 && cout % groups == 0,
                 "conv2d: groups=" + std::to_string(groups) + " must divide Cin=" +
                     std::to_string(cin) + " and Cout=" + std::to_string(cout));
    check_config(cin_g == cin / groups,
                 "conv2d: kernel expects Cin/groups=" + std::to_string(cin / groups) + " input channels, got " +
                     std::to_string(cin_g));
    const int64_t hout = (h + 2 * pad - k) / stride + 1;
    const int64_t wout = (w + 2 * pad - k) / stride + 1;
    check_config(hout >= 1 && wout >= 1,
                 "conv2d: kernel " + std::to_string(k) + " does not fit input " + shape_str(x->shape) +
                     " with pad " + std::to_string(pad));

    auto out = make_tensor<S>({batch, cout, hout, wout});
    const int64_t cout_g = cout / groups;
    const int64_t patch = cin_g * k * k;
    const int64_t out_plane = hout * wout;

    parallel_for(batch, [&](int64_t b0, int64_t b1) {
        std::vector<S> col(static_cast<size_t>(patch * out_plane));
        for (int64_t b = b0; b < b1; ++b) {
            for (int64_t g = 0; g < groups; ++g) {
                detail::im2col(x->data.data() + (b * cin + g * cin_g) * h * w, cin_g, h, w, k,
                               stride, pad, hout, wout, col.data());
                MapCM<S> wmat(kernel->data.data() + g * cout_g * patch, cout_g, patch);
                MapCM<S> cmat(col.data(), patch, out_plane);
                MapM<S> omat(out->data.data() + (b * cout + g * cout_g) * out_plane, cout_g,
                             out_plane);
                omat.noalias() = wmat * cmat;
            }
        }
    });
    check_finite(out, "conv2d");

    out->requires_grad = x->requires_grad || kernel->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            std::vector<S> col(static_cast<size_t>(patch * out_plane));
            std::vector<S> col_grad(static_cast<size_t>(patch * out_plane));
            S* xg = x->requires_grad ? x->grad_ptr() : nullptr;
            S* kg = kernel->requires_grad ? kernel->grad_ptr() : nullptr;
            for (int64_t b = 0; b < batch; ++b) {
                for (int64_t g = 0; g < groups; ++g) {
                    MapCM<S> gout(out->grad.data() + (b * cout + g * cout_g) * out_plane, cout_g,
                                  out_plane);
                    detail::im2col(x->data.data() + (b * cin + g * cin_g) * h * w, cin_g, h, w, k,
                                   stride, pad, hout, wout, col.data());
                    if (kg) {
                        MapCM<S> cmat(col.data(), patch, out_plane);
                        MapM<S> gw(kg + g * cout_g * patch, cout_g, patch);
                        gw.noalias() += gout * cmat.transpose();
                    }
                    if (xg) {
                        MapCM<S> wmat(kernel->data.data() + g * cout_g * patch, cout_g, patch);
                        MapM<S> gcol(col_grad.data(), patch, out_plane);
                        gcol.noalias() = wmat.transpose() * gout;
                        detail::col2im_add(col_grad.data(), cin_g, h, w, k, stride, pad, hout, wout,
                                           xg + (b * cin + g * cin_g) * h * w);
                    }
                }
            }
        });
    return out;
}

// Batch normalization over the (B,H,W) extent of each channel. Train mode
// normalizes by batch statistics and folds them into the running buffers
// with an exponential moving average; eval mode reads the running buffers.
template <class S>
Tensor<S> batch_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, Tensor<S>& running_mean, Tensor<S>& running_var,
                     bool training, double eps = 1e-5, double momentum = 0.1) {
    check_config(x->shape.size() == 4, "batch_norm: input must be BxCxHxW, got " + shape_str(x->shape));
    const int64_t batch = x->shape[0], channels = x->shape[1], h = x->shape[2], w = x->shape[3];
    check_config(gamma->numel() == channels && beta->numel() == channels &&
                     running_mean->numel() == channels && running_var->numel() == channels,
                 "batch_norm: parameter length must equal channel count " + std::to_string(channels));
    const int64_t plane = h * w;
    const int64_t m = batch * plane;
    check_config(!training || m >= 2,
                 "batch_norm: train mode needs B*H*W >= 2, got " + std::to_string(m));

    auto out = make_tensor<S>(x->shape);
    auto mean = std::make_shared<std::vector<double>>(channels, 0.0);
    auto inv_std = std::make_shared<std::vector<double>>(channels, 0.0);

    for (int64_t c = 0; c < channels; ++c) {
        double mu, var;
        if (training) {
            double sum = 0.0, sq = 0.0;
            for (int64_t b = 0; b < batch; ++b) {
                const S* src = x->data.data() + (b * channels + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum += src[i];
                    sq += double(src[i]) * double(src[i]);
                }
            }
            mu = sum / double(m);
            var = std::max(0.0, sq / double(m) - mu * mu);
            const double unbiased = var * double(m) / double(m - 1);
            running_mean->data[c] = S((1.0 - momentum) * running_mean->data[c] + momentum * mu);
            running_var->data[c] = S((1.0 - momentum) * running_var->data[c] + momentum * unbiased);
        } else {
            mu = running_mean->data[c];
            var = running_var->data[c];
        }
        (*mean)[c] = mu;
        (*inv_std)[c] = 1.0 / std::sqrt(var + eps);
        const double scale_c = double(gamma->data[c]) * (*inv_std)[c];
        const double shift_c = double(beta->data[c]) - mu * scale_c;
        for (int64_t b = 0; b < batch; ++b) {
            const S* src = x->data.data() + (b * channels + c) * plane;
            S* dst = out->data.data() + (b * channels + c) * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] = S(src[i] * scale_c + shift_c);
        }
    }
    check_finite(out, "batch_norm");

    out->requires_grad = x->requires_grad || gamma->requires_grad || beta->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            S* xg = x->requires_grad ? x->grad_ptr() : nullptr;
            S* gg = gamma->requires_grad ? gamma->grad_ptr() : nullptr;
            S* bg = beta->requires_grad ? beta->grad_ptr() : nullptr;
            for (int64_t c = 0; c < channels; ++c) {
                const double mu = (*mean)[c];
                const double istd = (*inv_std)[c];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int64_t b = 0; b < batch; ++b) {
                    const int64_t off = (b * channels + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        const double dy = out->grad[off + i];
                        sum_dy += dy;
                        sum_dy_xhat += dy * (double(x->data[off + i]) - mu) * istd;
                    }
                }
                if (gg) gg[c] += S(sum_dy_xhat);
                if (bg) bg[c] += S(sum_dy);
                if (!xg) continue;
                const double g = gamma->data[c];
                if (training) {
                    const double inv_m = 1.0 / double(m);
                    for (int64_t b = 0; b < batch; ++b) {
                        const int64_t off = (b * channels + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            const double dy = out->grad[off + i];
                            const double xhat = (double(x->data[off + i]) - mu) * istd;
                            xg[off + i] +=
                                S(g * istd * (dy - inv_m * (sum_dy + xhat * sum_dy_xhat)));
                        }
                    }
                } else {
                    for (int64_t b = 0; b < batch; ++b) {
                        const int64_t off = (b * channels + c) * plane;
                        for (int64_t i = 0; i < plane; ++i)
                            xg[off + i] += S(g * istd * double(out->grad[off + i]));
                    }
                }
            }
        });
    return out;
}

// Fully connected map: out = x * W^T (+ bias). Pass an empty Tensor for a
// bias-free layer.
template <class S>
Tensor<S> linear(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& weight,
                 const Tensor<S>& bias = {}) {
    check_config(x->shape.size() == 2, "linear: input must be BxCin, got " + shape_str(x->shape));
    check_config(weight->shape.size() == 2,
                 "linear: weight must be CoutxCin, got " + shape_str(weight->shape));
    const int64_t batch = x->shape[0], cin = x->shape[1], cout = weight->shape[0];
    check_config(weight->shape[1] == cin, "linear: weight " + shape_str(weight->shape) +
                                              " does not match input " + shape_str(x->shape));
    if (bias)
        check_config(bias->numel() == cout,
                     "linear: bias length must equal Cout=" + std::to_string(cout));

    auto out = make_tensor<S>({batch, cout});
    MapCM<S> xm(x->data.data(), batch, cin);
    MapCM<S> wm(weight->data.data(), cout, cin);
    MapM<S> om(out->data.data(), batch, cout);
    om.noalias() = xm * wm.transpose();
    if (bias)
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t j = 0; j < cout; ++j) out->data[b * cout + j] += bias->data[j];
    check_finite(out, "linear");

    out->requires_grad =
        x->requires_grad || weight->requires_grad || (bias && bias->requires_grad);
    if (out->requires_grad)
        tape.record([=]() {
            MapCM<S> go(out->grad.data(), batch, cout);
            if (x->requires_grad) {
                MapM<S> gx(x->grad_ptr(), batch, cin);
                MapCM<S> wm2(weight->data.data(), cout, cin);
                gx.noalias() += go * wm2;
            }
            if (weight->requires_grad) {
                MapM<S> gw(weight->grad_ptr(), cout, cin);
                MapCM<S> xm2(x->data.data(), batch, cin);
                gw.noalias() += go.transpose() * xm2;
            }
            if (bias && bias->requires_grad) {
                S* gb = bias->grad_ptr();
                for (int64_t b = 0; b < batch; ++b)
                    for (int64_t j = 0; j < cout; ++j) gb[j] += out->grad[b * cout + j];
            }
        });
    return out;
}

template <class S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& x) {
    auto out = make_tensor<S>(x->shape);
    for (int64_t i = 0; i < x->numel(); ++i) out->data[i] = x->data[i] > S(0) ? x->data[i] : S(0);
    out->requires_grad = x->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            S* xg = x->grad_ptr();
            for (int64_t i = 0; i < x->numel(); ++i)
                if (x->data[i] > S(0)) xg[i] += out->grad[i];
        });
    return out;
}

// Spatial mean per channel; the gradient spreads 1/(H*W) back to every cell.
template <class S>
Tensor<S> global_avg_pool(Tape<S>& tape, const Tensor<S>& x) {
    check_config(x->shape.size() == 4,
                 "global_avg_pool: input must be BxCxHxW, got " + shape_str(x->shape));
    const int64_t batch = x->shape[0], channels = x->shape[1], plane = x->shape[2] * x->shape[3];
    auto out = make_tensor<S>({batch, channels});
    for (int64_t bc = 0; bc < batch * channels; ++bc) {
        double sum = 0.0;
        const S* src = x->data.data() + bc * plane;
        for (int64_t i = 0; i < plane; ++i) sum += src[i];
        out->data[bc] = S(sum / double(plane));
    }
    out->requires_grad = x->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            S* xg = x->grad_ptr();
            const S inv = S(1.0 / double(plane));
            for (int64_t bc = 0; bc < batch * channels; ++bc) {
                const S g = out->grad[bc] * inv;
                S* dst = xg + bc * plane;
                for (int64_t i = 0; i < plane; ++i) dst[i] += g;
            }
        });
    return out;
}

template <class S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    check_config(a->shape == b->shape, "add: operand shapes differ, " + shape_str(a->shape) +
                                           " vs " + shape_str(b->shape));
    auto out = make_tensor<S>(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(out, "add");
    out->requires_grad = a->requires_grad || b->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            if (a->requires_grad) {
                S* ag = a->grad_ptr();
                for (int64_t i = 0; i < a->numel(); ++i) ag[i] += out->grad[i];
            }
            if (b->requires_grad) {
                S* bg = b->grad_ptr();
                for (int64_t i = 0; i < b->numel(); ++i) bg[i] += out->grad[i];
            }
        });
    return out;
}

template <class S>
Tensor<S> concat_channels(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    check_config(a->shape.size() == 4 && b->shape.size() == 4,
                 "concat_channels: operands must be BxCxHxW");
    check_config(a->shape[0] == b->shape[0] && a->shape[2] == b->shape[2] &&
                     a->shape[3] == b->shape[3],
                 "concat_channels: non-channel extents differ, " + shape_str(a->shape) + " vs " +
                     shape_str(b->shape));
    const int64_t batch = a->shape[0], c1 = a->shape[1], c2 = b->shape[1],
                  plane = a->shape[2] * a->shape[3];
    auto out = make_tensor<S>({batch, c1 + c2, a->shape[2], a->shape[3]});
    for (int64_t bi = 0; bi < batch; ++bi) {
        std::memcpy(out->data.data() + bi * (c1 + c2) * plane, a->data.data() + bi * c1 * plane,
                    sizeof(S) * size_t(c1 * plane));
        std::memcpy(out->data.data() + (bi * (c1 + c2) + c1) * plane,
                    b->data.data() + bi * c2 * plane, sizeof(S) * size_t(c2 * plane));
    }
    out->requires_grad = a->requires_grad || b->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            for (int64_t bi = 0; bi < batch; ++bi) {
                if (a->requires_grad) {
                    S* ag = a->grad_ptr() + bi * c1 * plane;
                    const S* g = out->grad.data() + bi * (c1 + c2) * plane;
                    for (int64_t i = 0; i < c1 * plane; ++i) ag[i] += g[i];
                }
                if (b->requires_grad) {
                    S* bg = b->grad_ptr() + bi * c2 * plane;
                    const S* g = out->grad.data() + (bi * (c1 + c2) + c1) * plane;
                    for (int64_t i = 0; i < c2 * plane; ++i) bg[i] += g[i];
                }
            }
        });
    return out;
}

// Softmax along axis 0. Axis 0 indexes the competing features; every
// remaining element position forms an independent column. Columns are
// shifted by their max before exponentiation.
template <class S>
Tensor<S> softmax_over_features(Tape<S>& tape, const Tensor<S>& scores) {
    check_config(scores->shape.size() >= 2,
                 "softmax_over_features: need at least 2-D input, got " + shape_str(scores->shape));
    for (const S& v : scores->data)
        if (!std::isfinite(double(v)))
            throw NumericError("softmax_over_features: non-finite score");
    const int64_t n = scores->shape[0];
    const int64_t cols = scores->numel() / n;
    auto out = make_tensor<S>(scores->shape);
    for (int64_t j = 0; j < cols; ++j) {
        double mx = scores->data[j];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, double(scores->data[i * cols + j]));
        double denom = 0.0;
        for (int64_t i = 0; i < n; ++i) denom += std::exp(double(scores->data[i * cols + j]) - mx);
        for (int64_t i = 0; i < n; ++i)
            out->data[i * cols + j] = S(std::exp(double(scores->data[i * cols + j]) - mx) / denom);
    }
    out->requires_grad = scores->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            S* sg = scores->grad_ptr();
            for (int64_t j = 0; j < cols; ++j) {
                double dot = 0.0;
                for (int64_t i = 0; i < n; ++i)
                    dot += double(out->grad[i * cols + j]) * double(out->data[i * cols + j]);
                for (int64_t i = 0; i < n; ++i)
                    sg[i * cols + j] += S(double(out->data[i * cols + j]) *
                                          (double(out->grad[i * cols + j]) - dot));
            }
        });
    return out;
}

// Mean over the batch of -log softmax(logits)[label].
template <class S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& logits, const std::vector<int>& labels) {
    check_config(logits->shape.size() == 2,
                 "cross_entropy: logits must be BxK, got " + shape_str(logits->shape));
    const int64_t batch = logits->shape[0], k = logits->shape[1];
    check_config(static_cast<int64_t>(labels.size()) == batch,
                 "cross_entropy: label count does not match batch");
    for (int label : labels)
        check_data(label >= 0 && label < k,
                   "cross_entropy: label " + std::to_string(label) + " outside [0," +
                       std::to_string(k) + ")");

    auto probs = std::make_shared<std::vector<double>>(batch * k, 0.0);
    double loss = 0.0;
    for (int64_t b = 0; b < batch; ++b) {
        const S* row = logits->data.data() + b * k;
        double mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, double(row[j]));
        double denom = 0.0;
        for (int64_t j = 0; j < k; ++j) denom += std::exp(double(row[j]) - mx);
        for (int64_t j = 0; j < k; ++j) (*probs)[b * k + j] = std::exp(double(row[j]) - mx) / denom;
        loss -= double(row[labels[size_t(b)]]) - mx - std::log(denom);
    }
    auto out = tensor_from<S>({1}, {S(loss / double(batch))});
    check_finite(out, "cross_entropy");

    out->requires_grad = logits->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            const S g = out->grad[0];
            S* lg = logits->grad_ptr();
            const S inv_b = S(1.0 / double(batch));
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t j = 0; j < k; ++j) {
                    const double onehot = (labels[size_t(b)] == j) ? 1.0 : 0.0;
                    lg[b * k + j] += g * inv_b * S((*probs)[b * k + j] - onehot);
                }
        });
    return out;
}

// Multiplies each channel plane of x by its per-sample scalar weight.
template <class S>
Tensor<S> mul_channels(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& weights) {
    check_config(x->shape.size() == 4 && weights->shape.size() == 2 &&
                     weights->shape[0] == x->shape[0] && weights->shape[1] == x->shape[1],
                 "mul_channels: expected BxCxHxW and BxC, got " + shape_str(x->shape) + " and " +
                     shape_str(weights->shape));
    const int64_t bc = x->shape[0] * x->shape[1];
    const int64_t plane = x->shape[2] * x->shape[3];
    auto out = make_tensor<S>(x->shape);
    for (int64_t i = 0; i < bc; ++i) {
        const S wv = weights->data[i];
        const S* src = x->data.data() + i * plane;
        S* dst = out->data.data() + i * plane;
        for (int64_t j = 0; j < plane; ++j) dst[j] = src[j] * wv;
    }
    out->requires_grad = x->requires_grad || weights->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            if (x->requires_grad) {
                S* xg = x->grad_ptr();
                for (int64_t i = 0; i < bc; ++i) {
                    const S wv = weights->data[i];
                    for (int64_t j = 0; j < plane; ++j)
                        xg[i * plane + j] += out->grad[i * plane + j] * wv;
                }
            }
            if (weights->requires_grad) {
                S* wg = weights->grad_ptr();
                for (int64_t i = 0; i < bc; ++i) {
                    double sum = 0.0;
                    for (int64_t j = 0; j < plane; ++j)
                        sum += double(out->grad[i * plane + j]) * double(x->data[i * plane + j]);
                    wg[i] += S(sum);
                }
            }
        });
    return out;
}

// Stacks same-shape tensors along a new leading axis.
template <class S>
Tensor<S> stack_rows(Tape<S>& tape, const std::vector<Tensor<S>>& rows) {
    check_config(!rows.empty(), "stack_rows: need at least one tensor");
    const int64_t row_len = rows[0]->numel();
    Shape out_shape{static_cast<int64_t>(rows.size())};
    out_shape.insert(out_shape.end(), rows[0]->shape.begin(), rows[0]->shape.end());
    bool needs_grad = false;
    for (const auto& r : rows) {
        check_config(r->shape == rows[0]->shape, "stack_rows: member shapes differ");
        needs_grad = needs_grad || r->requires_grad;
    }
    auto out = make_tensor<S>(out_shape);
    for (size_t i = 0; i < rows.size(); ++i)
        std::memcpy(out->data.data() + int64_t(i) * row_len, rows[i]->data.data(),
                    sizeof(S) * size_t(row_len));
    out->requires_grad = needs_grad;
    if (needs_grad)
        tape.record([=]() {
            for (size_t i = 0; i < rows.size(); ++i) {
                if (!rows[i]->requires_grad) continue;
                S* rg = rows[i]->grad_ptr();
                const S* g = out->grad.data() + int64_t(i) * row_len;
                for (int64_t j = 0; j < row_len; ++j) rg[j] += g[j];
            }
        });
    return out;
}

// Extracts row i of a stacked tensor (inverse of stack_rows for one member).
template <class S>
Tensor<S> slice_row(Tape<S>& tape, const Tensor<S>& x, int64_t row) {
    check_config(x->shape.size() >= 2, "slice_row: need stacked input");
    check_config(row >= 0 && row < x->shape[0], "slice_row: row index out of range");
    Shape out_shape(x->shape.begin() + 1, x->shape.end());
    const int64_t row_len = shape_numel(out_shape);
    auto out = make_tensor<S>(out_shape);
    std::memcpy(out->data.data(), x->data.data() + row * row_len, sizeof(S) * size_t(row_len));
    out->requires_grad = x->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            S* xg = x->grad_ptr();
            for (int64_t j = 0; j < row_len; ++j) xg[row * row_len + j] += out->grad[j];
        });
    return out;
}

template <class S>
Tensor<S> pick(Tape<S>& tape, const Tensor<S>& x, int64_t flat_index) {
    check_config(flat_index >= 0 && flat_index < x->numel(), "pick: index out of range");
    auto out = tensor_from<S>({1}, {x->data[size_t(flat_index)]});
    out->requires_grad = x->requires_grad;
    if (out->requires_grad)
        tape.record([=]() { x->grad_ptr()[flat_index] += out->grad[0]; });
    return out;
}

template <class S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& x) {
    double total = 0.0;
    for (const S& v : x->data) total += v;
    auto out = tensor_from<S>({1}, {S(total)});
    check_finite(out, "sum");
    out->requires_grad = x->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            S* xg = x->grad_ptr();
            const S g = out->grad[0];
            for (int64_t i = 0; i < x->numel(); ++i) xg[i] += g;
        });
    return out;
}

template <class S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& x, double factor) {
    auto out = make_tensor<S>(x->shape);
    for (int64_t i = 0; i < x->numel(); ++i) out->data[i] = S(double(x->data[i]) * factor);
    check_finite(out, "scale");
    out->requires_grad = x->requires_grad;
    if (out->requires_grad)
        tape.record([=]() {
            S* xg = x->grad_ptr();
            for (int64_t i = 0; i < x->numel(); ++i) xg[i] += S(double(out->grad[i]) * factor);
        });
    return out;
}

}  // namespace afi::ops
