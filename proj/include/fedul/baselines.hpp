#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "fedul/datagen.hpp"
#include "fedul/federation.hpp"
#include "fedul/log.hpp"
#include "fedul/nn.hpp"
#include "fedul/random.hpp"

namespace fedul {

inline void add_scaled(GradientSet& dst, const GradientSet& src, double scale) {
    zip_values(dst, src, [scale](double& a, double b) { a += scale * b; });
}

// ---------------------------------------------------------------------------
// FedPL: pseudo labels from the dominant class of each set, refined with
// mixup between confident and unconfident samples.

struct FedPLParams {
    double tau = 0.4;         // confidence threshold on max softmax probability
    double mixup_a = 0.75;    // Beta(a, a) for the mixing coefficient
    double mix_weight = 0.3;  // weight of the mix loss
};

struct PseudoLabeledBatch {
    Matrix confident_inputs;
    std::vector<int> confident_labels;
    Matrix unconfident_inputs;
    std::vector<int> unconfident_labels;
    double tau = 0.0;
};

// Pseudo label of a set: its largest class prior (lowest index on ties).
inline std::vector<int> pseudo_labels_from_priors(const ClassPriorMatrix& priors) {
    std::vector<int> out;
    for (std::size_t m = 0; m < priors.num_sets(); ++m) {
        auto r = priors.row(m);
        out.push_back(static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin()));
    }
    return out;
}

// Splits by the model's max softmax probability; order within each side is
// preserved.
inline PseudoLabeledBatch split_by_confidence(const ModelParams& params, const Matrix& inputs,
                                              std::span<const int> labels, double tau) {
    const auto probs = softmax(forward(params, inputs));
    PseudoLabeledBatch out;
    out.tau = tau;
    out.confident_inputs = Matrix(0, inputs.cols());
    out.unconfident_inputs = Matrix(0, inputs.cols());
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
        auto p = probs.row(i);
        const double conf = *std::max_element(p.begin(), p.end());
        if (conf >= tau) {
            out.confident_inputs.append_row(inputs.row(i));
            out.confident_labels.push_back(labels[i]);
        } else {
            out.unconfident_inputs.append_row(inputs.row(i));
            out.unconfident_labels.push_back(labels[i]);
        }
    }
    return out;
}

// L_fix + mix_weight * L_mix + L1 for a fixed mixing coefficient and fixed
// (confident, unconfident) pairs. An empty side contributes zero.
inline LossAndGrad fedpl_loss(const ModelParams& params, const PseudoLabeledBatch& batch,
                              std::span<const std::pair<std::size_t, std::size_t>> pairs, double lambda_mix,
                              double mix_weight, double l1_weight) {
    LossAndGrad out{0.0, GradientSet(params)};
    if (!batch.confident_labels.empty()) {
        Batch b{batch.confident_inputs, batch.confident_labels, params.num_classes()};
        out = backward(params, b, nullptr, 0.0);
    }
    if (mix_weight != 0.0 && !pairs.empty()) {
        const std::size_t d = params.input_dim();
        const std::size_t k = params.num_classes();
        Matrix mixed(pairs.size(), d);
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            auto a = batch.confident_inputs.row(pairs[i].first);
            auto b = batch.unconfident_inputs.row(pairs[i].second);
            auto r = mixed.row(i);
            for (std::size_t j = 0; j < d; ++j) r[j] = lambda_mix * a[j] + (1.0 - lambda_mix) * b[j];
        }
        const auto cache = forward_cached(params, mixed);
        Matrix dlogits(pairs.size(), k);
        std::vector<double> p(k);
        const double inv_n = 1.0 / static_cast<double>(pairs.size());
        double mix_loss = 0.0;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const auto y_pos = static_cast<std::size_t>(batch.confident_labels[pairs[i].first]);
            const auto y_neg = static_cast<std::size_t>(batch.unconfident_labels[pairs[i].second]);
            softmax_row(cache.logits().row(i), p);
            mix_loss += lambda_mix * -std::log(std::max(p[y_pos], kLogFloor)) +
                        (1.0 - lambda_mix) * -std::log(std::max(p[y_neg], kLogFloor));
            auto dz = dlogits.row(i);
            for (std::size_t c = 0; c < k; ++c) dz[c] = p[c];
            dz[y_pos] -= lambda_mix;
            dz[y_neg] -= 1.0 - lambda_mix;
            for (double& v : dz) v *= inv_n * mix_weight;
        }
        out.loss += mix_weight * mix_loss * inv_n;
        add_scaled(out.grads, backprop(params, cache, std::move(dlogits)).grads, 1.0);
    }
    out.loss += add_l1_penalty(params, l1_weight, out.grads);
    return out;
}

// Draws lambda_mix ~ Beta(a, a) and pairs shuffled confident and unconfident
// samples, truncating to the shorter side.
inline LossAndGrad fedpl_loss(const ModelParams& params, const PseudoLabeledBatch& batch, const FedPLParams& hp,
                              double l1_weight, Rng& rng) {
    const double lambda_mix = sample_beta(rng, hp.mixup_a, hp.mixup_a);
    std::vector<std::size_t> pos(batch.confident_labels.size());
    std::vector<std::size_t> neg(batch.unconfident_labels.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::iota(neg.begin(), neg.end(), std::size_t{0});
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < std::min(pos.size(), neg.size()); ++i) pairs.emplace_back(pos[i], neg[i]);
    return fedpl_loss(params, batch, pairs, lambda_mix, hp.mix_weight, l1_weight);
}

class FedPLObjective final : public LocalObjective {
public:
    FedPLObjective(const USetCollection& u, const ClassPriorMatrix& known_priors, FedPLParams hp)
        : hp_(hp), num_classes_(known_priors.num_classes()) {
        const auto set_labels = pseudo_labels_from_priors(known_priors);
        inputs_ = Matrix(0, u.sets().empty() ? 0 : u.sets().front().cols());
        for (std::size_t m = 0; m < u.num_sets(); ++m)
            for (std::size_t i = 0; i < u.sets()[m].rows(); ++i) {
                inputs_.append_row(u.sets()[m].row(i));
                labels_.push_back(set_labels[m]);
            }
    }

    std::string_view name() const override { return "fedpl"; }
    std::size_t num_examples() const override { return labels_.size(); }
    std::span<const int> pseudo_labels() const noexcept { return labels_; }

    LossAndGrad evaluate(const ModelParams& params, std::span<const std::size_t> batch, double l1_weight,
                         Rng& rng) const override {
        const auto x = inputs_.select_rows(batch);
        std::vector<int> y;
        y.reserve(batch.size());
        for (auto i : batch) y.push_back(labels_[i]);
        const auto split = split_by_confidence(params, x, y, hp_.tau);
        return fedpl_loss(params, split, hp_, l1_weight, rng);
    }

private:
    FedPLParams hp_;
    std::size_t num_classes_;
    Matrix inputs_;
    std::vector<int> labels_;
};

// ---------------------------------------------------------------------------
// FedLLP: match per-set predicted label proportions to the known ones.

// Sum over bags present in the batch of -sum_k pi_k log(pihat_k), where pihat
// is the mean softmax output over the bag's samples in the batch.
inline LossAndGrad fedllp_loss(const ModelParams& params, const Matrix& inputs, std::span<const std::size_t> bag_of,
                               const Matrix& bag_proportions, double l1_weight) {
    const std::size_t n = inputs.rows();
    const std::size_t k = params.num_classes();
    if (bag_of.size() != n) throw ShapeError("fedllp_loss: bag assignment length mismatch");
    if (n == 0) throw PreconditionError("fedllp_loss: empty batch");
    if (bag_proportions.cols() != k) throw ShapeError("fedllp_loss: proportion width != K");

    const auto cache = forward_cached(params, inputs);
    const auto probs = softmax(cache.logits());
    const std::size_t bags = bag_proportions.rows();
    Matrix mean_probs(bags, k);
    std::vector<std::size_t> counts(bags, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto b = bag_of[i];
        if (b >= bags) throw PreconditionError("fedllp_loss: bag index out of range");
        ++counts[b];
        for (std::size_t c = 0; c < k; ++c) mean_probs(b, c) += probs(i, c);
    }
    double loss = 0.0;
    Matrix dmean(bags, k);  // dL / dpihat
    for (std::size_t b = 0; b < bags; ++b) {
        if (counts[b] == 0) continue;
        for (std::size_t c = 0; c < k; ++c) {
            mean_probs(b, c) /= static_cast<double>(counts[b]);
            const double target = bag_proportions(b, c);
            const double est = mean_probs(b, c);
            loss += -target * std::log(std::max(est, kLogFloor));
            dmean(b, c) = est > kLogFloor ? -target / est : 0.0;
        }
    }
    Matrix dlogits(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        const auto b = bag_of[i];
        const double inv = 1.0 / static_cast<double>(counts[b]);
        auto p = probs.row(i);
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c) dot += p[c] * dmean(b, c) * inv;
        for (std::size_t c = 0; c < k; ++c) dlogits(i, c) = p[c] * (dmean(b, c) * inv - dot);
    }
    LossAndGrad out{loss, backprop(params, cache, std::move(dlogits)).grads};
    out.loss += add_l1_penalty(params, l1_weight, out.grads);
    return out;
}

// ---------------------------------------------------------------------------
// VAT consistency: KL between the prediction at x (held fixed) and at an
// adversarially perturbed x.

struct VATParams {
    double alpha = 5e-4;  // weight of the consistency loss
    double mu = 1e-2;     // perturbation radius
    double xi = 1e-6;     // finite-difference step for the power iteration
    std::size_t power_iters = 1;
};

// Mean KL(target || softmax(f(perturbed))) and its parameter gradient; the
// target is a constant.
inline LossAndGrad consistency_loss(const ModelParams& params, const Matrix& perturbed, const Matrix& target) {
    const std::size_t n = perturbed.rows();
    const std::size_t k = params.num_classes();
    const auto cache = forward_cached(params, perturbed);
    Matrix dlogits(n, k);
    std::vector<double> q(k);
    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        softmax_row(cache.logits().row(i), q);
        auto p = target.row(i);
        for (std::size_t c = 0; c < k; ++c) {
            if (p[c] > 0.0) loss += p[c] * (std::log(p[c]) - std::log(std::max(q[c], kLogFloor)));
            dlogits(i, c) = (q[c] - p[c]) * inv_n;
        }
    }
    return {loss * inv_n, backprop(params, cache, std::move(dlogits)).grads};
}

inline void normalize_rows_or_randomize(Matrix& d, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < d.rows(); ++i) {
        auto r = d.row(i);
        double norm = 0.0;
        for (double v : r) norm += v * v;
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            norm = 0.0;
            for (double& v : r) {
                v = normal(rng);
                norm += v * v;
            }
        }
        norm = std::sqrt(norm);
        for (double& v : r) v /= norm;
    }
}

// Unit adversarial directions per sample by power iteration on the KL
// curvature around x.
inline Matrix vat_direction(const ModelParams& params, const Matrix& inputs, const Matrix& target, double xi,
                            std::size_t power_iters, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix d(inputs.rows(), inputs.cols());
    for (double& v : d.values()) v = normal(rng);
    normalize_rows_or_randomize(d, rng);
    for (std::size_t it = 0; it < power_iters; ++it) {
        Matrix probe = inputs;
        auto pv = probe.values();
        auto dv = d.values();
        for (std::size_t j = 0; j < pv.size(); ++j) pv[j] += xi * dv[j];
        const auto cache = forward_cached(params, probe);
        const auto q = softmax(cache.logits());
        Matrix dlogits(q.rows(), q.cols());
        for (std::size_t j = 0; j < q.size(); ++j) dlogits.values()[j] = q.values()[j] - target.values()[j];
        d = backprop(params, cache, std::move(dlogits), true).input_grad;
        normalize_rows_or_randomize(d, rng);
    }
    return d;
}

inline LossAndGrad vat_consistency(const ModelParams& params, const Matrix& inputs, const VATParams& hp, Rng& rng) {
    const auto target = softmax(forward(params, inputs));
    const auto d = vat_direction(params, inputs, target, hp.xi, hp.power_iters, rng);
    Matrix perturbed = inputs;
    auto pv = perturbed.values();
    auto dv = d.values();
    for (std::size_t j = 0; j < pv.size(); ++j) pv[j] += hp.mu * dv[j];
    return consistency_loss(params, perturbed, target);
}

class FedLLPObjective final : public LocalObjective {
public:
    FedLLPObjective(const USetCollection& u, const ClassPriorMatrix& known_priors,
                    std::optional<VATParams> vat = std::nullopt)
        : proportions_(known_priors.entries()), vat_(vat) {
        inputs_ = Matrix(0, u.sets().empty() ? 0 : u.sets().front().cols());
        for (std::size_t m = 0; m < u.num_sets(); ++m)
            for (std::size_t i = 0; i < u.sets()[m].rows(); ++i) {
                inputs_.append_row(u.sets()[m].row(i));
                bag_of_.push_back(m);
            }
    }

    std::string_view name() const override { return vat_ ? "fedllp_vat" : "fedllp"; }
    std::size_t num_examples() const override { return bag_of_.size(); }

    LossAndGrad evaluate(const ModelParams& params, std::span<const std::size_t> batch, double l1_weight,
                         Rng& rng) const override {
        const auto x = inputs_.select_rows(batch);
        std::vector<std::size_t> bags;
        bags.reserve(batch.size());
        for (auto i : batch) bags.push_back(bag_of_[i]);
        auto out = fedllp_loss(params, x, bags, proportions_, l1_weight);
        if (vat_) {
            const auto cons = vat_consistency(params, x, *vat_, rng);
            out.loss += vat_->alpha * cons.loss;
            add_scaled(out.grads, cons.grads, vat_->alpha);
        }
        return out;
    }

private:
    Matrix inputs_;
    std::vector<std::size_t> bag_of_;
    Matrix proportions_;
    std::optional<VATParams> vat_;
};

// ---------------------------------------------------------------------------
// Supervised FedAvg on a labeled fraction rho of each client's data. Labels
// come through LabelGate; nothing else in the training path reads them.

inline std::unique_ptr<SupervisedObjective> supervised_fraction_objective(const USetCollection& u, double rho,
                                                                          Rng& rng, std::size_t num_classes) {
    if (!(rho > 0.0 && rho <= 1.0)) throw PreconditionError("supervised_fraction_objective: rho must be in (0, 1]");
    const auto& hidden = LabelGate::reveal(u, "supervised_fraction_objective");
    const std::size_t n = u.total_size();
    std::vector<std::size_t> keep(n);
    std::iota(keep.begin(), keep.end(), std::size_t{0});
    const auto count = static_cast<std::size_t>(std::floor(rho * static_cast<double>(n)));
    if (count < n) {
        std::shuffle(keep.begin(), keep.end(), rng);
        keep.resize(count);
        std::sort(keep.begin(), keep.end());
    }
    if (count == 0)
        logger().warn("client {}: labeled fraction {} leaves no labeled samples; client will be skipped",
                      u.client_id(), rho);

    const std::size_t d = u.sets().empty() ? 0 : u.sets().front().cols();
    Matrix x(0, d);
    std::vector<int> y;
    std::size_t flat = 0, next = 0;
    for (std::size_t m = 0; m < u.num_sets(); ++m)
        for (std::size_t i = 0; i < u.sets()[m].rows(); ++i, ++flat)
            if (next < keep.size() && keep[next] == flat) {
                x.append_row(u.sets()[m].row(i));
                y.push_back(hidden[m][i]);
                ++next;
            }
    return std::make_unique<SupervisedObjective>(std::move(x), std::move(y), num_classes);
}

}  // namespace fedul
