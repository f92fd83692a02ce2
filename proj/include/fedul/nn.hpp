#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedul/error.hpp"
#include "fedul/matrix.hpp"
#include "fedul/random.hpp"
#include "fedul/transition.hpp"

namespace fedul {

inline constexpr double kLogFloor = 1e-12;

enum class Activation { relu };

struct DenseLayer {
    Matrix weight;             // out x in
    std::vector<double> bias;  // out
    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Tensors shaped like a dense network: weights and biases per layer.
struct ParamSet {
    std::vector<DenseLayer> layers;

    template <class F>
    void for_each_tensor(F&& f) {
        for (auto& l : layers) {
            f(l.weight.values(), true);
            f(std::span<double>(l.bias), false);
        }
    }
    template <class F>
    void for_each_tensor(F&& f) const {
        for (const auto& l : layers) {
            f(l.weight.values(), true);
            f(std::span<const double>(l.bias), false);
        }
    }

    std::size_t num_scalars() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    bool same_shape(const ParamSet& other) const {
        if (layers.size() != other.layers.size()) return false;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].weight.rows() != other.layers[i].weight.rows() ||
                layers[i].weight.cols() != other.layers[i].weight.cols() ||
                layers[i].bias.size() != other.layers[i].bias.size())
                return false;
        }
        return true;
    }

    bool all_finite() const {
        bool ok = true;
        for_each_tensor([&ok](std::span<const double> t, bool) {
            for (double v : t) ok = ok && std::isfinite(v);
        });
        return ok;
    }

    friend bool operator==(const ParamSet&, const ParamSet&) = default;

protected:
    ParamSet() = default;
    explicit ParamSet(const ParamSet& shape, double fill) {
        layers.reserve(shape.layers.size());
        for (const auto& l : shape.layers)
            layers.push_back({Matrix(l.weight.rows(), l.weight.cols(), fill), std::vector<double>(l.bias.size(), fill)});
    }
};

// Applies f(dst_value, src_value) pairwise over two congruent parameter sets.
template <class F>
void zip_values(ParamSet& dst, const ParamSet& src, F&& f) {
    if (!dst.same_shape(src)) throw ShapeError("parameter sets are not shape-congruent");
    for (std::size_t i = 0; i < dst.layers.size(); ++i) {
        auto dw = dst.layers[i].weight.values();
        auto sw = src.layers[i].weight.values();
        for (std::size_t j = 0; j < dw.size(); ++j) f(dw[j], sw[j]);
        auto& db = dst.layers[i].bias;
        const auto& sb = src.layers[i].bias;
        for (std::size_t j = 0; j < db.size(); ++j) f(db[j], sb[j]);
    }
}

// Classifier f: dense layers with rectifier activations between them; the
// last layer emits one score per class.
struct ModelParams : ParamSet {
    Activation hidden_activation = Activation::relu;

    ModelParams() = default;

    std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
    std::size_t num_classes() const { return layers.empty() ? 0 : layers.back().weight.rows(); }

    void validate() const {
        if (layers.empty()) throw PreconditionError("model has no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.weight.rows() == 0 || l.weight.cols() == 0) throw PreconditionError("model layer with zero width");
            if (l.bias.size() != l.weight.rows()) throw ShapeError("bias length != layer width");
            if (i > 0 && layers[i - 1].weight.rows() != l.weight.cols())
                throw ShapeError("layer " + std::to_string(i) + " does not chain with its predecessor");
        }
        if (!all_finite()) throw NonFiniteError("model has non-finite parameters");
    }
};

struct GradientSet : ParamSet {
    GradientSet() = default;
    explicit GradientSet(const ParamSet& shape) : ParamSet(shape, 0.0) {}
};

// f_c - f, as sent from a client to the server.
struct ModelDelta : ParamSet {
    ModelDelta() = default;
    explicit ModelDelta(const ParamSet& shape) : ParamSet(shape, 0.0) {}
};

inline ModelDelta difference(const ModelParams& after, const ModelParams& before) {
    ModelDelta d(after);
    std::size_t li = 0;
    for (auto& l : d.layers) {
        auto w = l.weight.values();
        auto a = after.layers[li].weight.values();
        auto b = before.layers[li].weight.values();
        for (std::size_t j = 0; j < w.size(); ++j) w[j] = a[j] - b[j];
        for (std::size_t j = 0; j < l.bias.size(); ++j) l.bias[j] = after.layers[li].bias[j] - before.layers[li].bias[j];
        ++li;
    }
    return d;
}

// Widths are {input, hidden..., classes}. Weights uniform in
// +-sqrt(6 / (in + out)), biases zero.
inline ModelParams make_model(std::span<const std::size_t> widths, Rng& rng) {
    if (widths.size() < 2) throw PreconditionError("make_model: need at least input and output widths");
    if (std::any_of(widths.begin(), widths.end(), [](std::size_t w) { return w == 0; }))
        throw PreconditionError("make_model: zero-width layer");
    ModelParams p;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const std::size_t in = widths[i];
        const std::size_t out = widths[i + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        DenseLayer layer{Matrix(out, in), std::vector<double>(out, 0.0)};
        for (double& w : layer.weight.values()) w = uniform(rng, -bound, bound);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

struct ForwardCache {
    std::vector<Matrix> inputs;  // input to each layer (post-activation of the previous)
    std::vector<Matrix> pre;     // pre-activation output of each layer
    const Matrix& logits() const { return pre.back(); }
};

inline ForwardCache forward_cached(const ModelParams& params, const Matrix& inputs) {
    if (params.layers.empty()) throw PreconditionError("forward: model has no layers");
    if (inputs.cols() != params.input_dim())
        throw ShapeError("forward: input width " + std::to_string(inputs.cols()) + " != model input " +
                         std::to_string(params.input_dim()));
    ForwardCache cache;
    cache.inputs.reserve(params.layers.size());
    cache.pre.reserve(params.layers.size());
    Matrix current = inputs;
    const std::size_t n = inputs.rows();
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& layer = params.layers[li];
        const std::size_t out = layer.weight.rows();
        const std::size_t in = layer.weight.cols();
        Matrix z(n, out);
        for (std::size_t i = 0; i < n; ++i) {
            auto x = current.row(i);
            auto zr = z.row(i);
            for (std::size_t o = 0; o < out; ++o) {
                auto w = layer.weight.row(o);
                double acc = layer.bias[o];
                for (std::size_t j = 0; j < in; ++j) acc += w[j] * x[j];
                zr[o] = acc;
            }
        }
        cache.inputs.push_back(std::move(current));
        if (li + 1 < params.layers.size()) {
            current = z;
            for (double& v : current.values()) v = v > 0.0 ? v : 0.0;
        }
        cache.pre.push_back(std::move(z));
    }
    return cache;
}

inline Matrix forward(const ModelParams& params, const Matrix& inputs) {
    auto cache = forward_cached(params, inputs);
    return std::move(cache.pre.back());
}

inline void softmax_row(std::span<const double> logits, std::span<double> out) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double s = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) s += out[k] = std::exp(logits[k] - mx);
    for (double& v : out) v /= s;
}

inline Matrix softmax(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) softmax_row(logits.row(i), p.row(i));
    return p;
}

// Mean of -log(probs[i, labels[i]]), with probabilities floored at 1e-12.
inline double ce_loss(const Matrix& probs, std::span<const int> labels) {
    if (probs.rows() != labels.size()) throw ShapeError("ce_loss: label count mismatch");
    if (labels.empty()) throw PreconditionError("ce_loss: empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= probs.cols()) throw PreconditionError("ce_loss: label out of range");
        total += -std::log(std::max(probs(i, static_cast<std::size_t>(y)), kLogFloor));
    }
    return total / static_cast<double>(labels.size());
}

struct Batch {
    Matrix inputs;
    std::vector<int> labels;
    std::size_t num_labels = 0;  // K for class labels, M for set indices
};

struct Backprop {
    GradientSet grads;
    Matrix input_grad;  // filled only when requested
};

// Pushes dLoss/dlogits back through the network.
inline Backprop backprop(const ModelParams& params, const ForwardCache& cache, Matrix dlogits,
                         bool want_input_grad = false) {
    Backprop out{GradientSet(params), {}};
    Matrix delta = std::move(dlogits);
    const std::size_t n = delta.rows();
    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const auto& layer = params.layers[li];
        const Matrix& a = cache.inputs[li];
        auto& g = out.grads.layers[li];
        const std::size_t out_w = layer.weight.rows();
        const std::size_t in_w = layer.weight.cols();
        for (std::size_t i = 0; i < n; ++i) {
            auto d = delta.row(i);
            auto x = a.row(i);
            for (std::size_t o = 0; o < out_w; ++o) {
                const double dv = d[o];
                if (dv == 0.0) continue;
                auto gw = g.weight.row(o);
                for (std::size_t j = 0; j < in_w; ++j) gw[j] += dv * x[j];
                g.bias[o] += dv;
            }
        }
        if (li == 0 && !want_input_grad) break;
        Matrix prev(n, in_w);
        for (std::size_t i = 0; i < n; ++i) {
            auto d = delta.row(i);
            auto pr = prev.row(i);
            for (std::size_t o = 0; o < out_w; ++o) {
                const double dv = d[o];
                if (dv == 0.0) continue;
                auto w = layer.weight.row(o);
                for (std::size_t j = 0; j < in_w; ++j) pr[j] += dv * w[j];
            }
        }
        if (li > 0) {
            const Matrix& z = cache.pre[li - 1];
            auto pv = prev.values();
            auto zv = z.values();
            for (std::size_t j = 0; j < pv.size(); ++j)
                if (!(zv[j] > 0.0)) pv[j] = 0.0;
        } else {
            out.input_grad = std::move(prev);
            break;
        }
        delta = std::move(prev);
    }
    return out;
}

// Adds l1_weight * sum |w| over weights (not biases) to the gradient and
// returns the penalty value.
inline double add_l1_penalty(const ModelParams& params, double l1_weight, GradientSet& grads) {
    if (l1_weight == 0.0) return 0.0;
    double penalty = 0.0;
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        auto w = params.layers[li].weight.values();
        auto g = grads.layers[li].weight.values();
        for (std::size_t j = 0; j < w.size(); ++j) {
            penalty += std::abs(w[j]);
            g[j] += l1_weight * (w[j] > 0.0 ? 1.0 : (w[j] < 0.0 ? -1.0 : 0.0));
        }
    }
    return l1_weight * penalty;
}

struct LossAndGrad {
    double loss = 0.0;
    GradientSet grads;
};

// Loss and exact gradient of mean CE of (head o softmax o f) plus the L1
// penalty. Without a head this is plain softmax cross-entropy. With a head T
// the per-sample loss is -log(q_y / sum(q)), q = T softmax(f(x)).
inline LossAndGrad backward(const ModelParams& params, const Batch& batch, const TransitionMatrix* head,
                            double l1_weight) {
    const std::size_t n = batch.inputs.rows();
    if (n == 0 || batch.labels.size() != n) throw PreconditionError("backward: empty batch or label count mismatch");
    const std::size_t k = params.num_classes();
    const std::size_t label_range = head ? head->num_sets() : k;
    if (head && head->num_classes() != k) throw ShapeError("backward: head columns != model classes");

    const auto cache = forward_cached(params, batch.inputs);
    const Matrix& logits = cache.logits();
    Matrix dlogits(n, k);
    std::vector<double> p(k);
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;

    for (std::size_t i = 0; i < n; ++i) {
        const int y_raw = batch.labels[i];
        if (y_raw < 0 || static_cast<std::size_t>(y_raw) >= label_range)
            throw PreconditionError("backward: label " + std::to_string(y_raw) + " out of range");
        const auto y = static_cast<std::size_t>(y_raw);
        softmax_row(logits.row(i), p);
        auto d = dlogits.row(i);
        if (!head) {
            total += -std::log(std::max(p[y], kLogFloor));
            for (std::size_t c = 0; c < k; ++c) d[c] = p[c] * inv_n;
            d[y] -= inv_n;
            continue;
        }
        if (head->row_is_zero(y))
            throw InvariantError("backward: sample labelled with padded set index " + std::to_string(y));
        const auto t_y = head->matrix().row(y);
        const auto colsum = head->column_sums();
        double q_y = 0.0;
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            q_y += t_y[c] * p[c];
            s += colsum[c] * p[c];
        }
        total += -std::log(std::max(q_y / s, kLogFloor));
        // dL/dz_c = p_c * colsum_c / s - t_yc * p_c / q_y
        for (std::size_t c = 0; c < k; ++c) {
            const double own = q_y > 0.0 ? t_y[c] * p[c] / q_y : 0.0;
            d[c] = (p[c] * colsum[c] / s - own) * inv_n;
        }
    }

    LossAndGrad out{total * inv_n, backprop(params, cache, std::move(dlogits)).grads};
    out.loss += add_l1_penalty(params, l1_weight, out.grads);
    return out;
}

struct AdamState {
    GradientSet first_moment;
    GradientSet second_moment;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    AdamState() = default;
    explicit AdamState(const ParamSet& shape) : first_moment(shape), second_moment(shape) {}
};

// One bias-corrected Adam update in place.
inline void adam_step(ModelParams& params, const GradientSet& grads, AdamState& state, double lr) {
    if (!params.same_shape(grads) || !params.same_shape(state.first_moment) || !params.same_shape(state.second_moment))
        throw ShapeError("adam_step: shape mismatch");
    if (!grads.all_finite()) throw NonFiniteError("adam_step: non-finite gradient");
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        auto update = [&](std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v) {
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
                v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
                const double m_hat = m[j] / c1;
                const double v_hat = v[j] / c2;
                w[j] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
            }
        };
        auto& pl = params.layers[li];
        const auto& gl = grads.layers[li];
        auto& ml = state.first_moment.layers[li];
        auto& vl = state.second_moment.layers[li];
        update(pl.weight.values(), gl.weight.values(), ml.weight.values(), vl.weight.values());
        update(pl.bias, gl.bias, ml.bias, vl.bias);
    }
}

// Max relative error between `analytic` and central differences of `loss`
// over every parameter coordinate; denominator max(|a|, |b|, 1e-8).
inline double grad_check_fn(const ModelParams& params, const GradientSet& analytic,
                            const std::function<double(const ModelParams&)>& loss, double fd_eps) {
    if (!(fd_eps > 1e-7 && fd_eps < 1e-3)) throw PreconditionError("grad_check: fd_eps outside (1e-7, 1e-3)");
    if (params.layers.empty() || params.num_scalars() == 0) throw PreconditionError("grad_check: empty model");
    if (!params.same_shape(analytic)) throw ShapeError("grad_check: gradient shape mismatch");
    ModelParams probe = params;
    double worst = 0.0;
    auto check = [&](double& slot, double a) {
        const double original = slot;
        slot = original + fd_eps;
        const double up = loss(probe);
        slot = original - fd_eps;
        const double down = loss(probe);
        slot = original;
        const double numeric = (up - down) / (2.0 * fd_eps);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    };
    for (std::size_t li = 0; li < probe.layers.size(); ++li) {
        auto w = probe.layers[li].weight.values();
        auto gw = analytic.layers[li].weight.values();
        for (std::size_t j = 0; j < w.size(); ++j) check(w[j], gw[j]);
        auto& b = probe.layers[li].bias;
        for (std::size_t j = 0; j < b.size(); ++j) check(b[j], analytic.layers[li].bias[j]);
    }
    return worst;
}

inline double grad_check(const ModelParams& params, const Batch& batch, const TransitionMatrix* head, double l1_weight,
                         double fd_eps) {
    if (params.layers.empty()) throw PreconditionError("grad_check: empty model");
    const auto analytic = backward(params, batch, head, l1_weight);
    return grad_check_fn(
        params, analytic.grads, [&](const ModelParams& p) { return backward(p, batch, head, l1_weight).loss; }, fd_eps);
}

}  // namespace fedul
