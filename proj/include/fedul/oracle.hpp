#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fedul/baselines.hpp"
#include "fedul/nn.hpp"
#include "fedul/priors.hpp"
#include "fedul/random.hpp"
#include "fedul/transition.hpp"

namespace fedul {

// Self-checks behind the `oracle` CLI subcommand. Each returns the worst
// discrepancy observed over randomly drawn instances.
struct OracleSummary {
    double bayes_max_abs = 0.0;        // surrogate posterior: brute force vs transition head
    double inverse_max_abs = 0.0;      // recover_eta round trip
    double grad_max_rel = 0.0;         // analytic vs central differences, FedUL/CE heads
    double baseline_grad_max_rel = 0.0;  // FedPL, FedLLP and consistency losses
    std::size_t instances = 0;
};

inline double oracle_bayes(Rng& rng, std::size_t trials) {
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 5)(rng);
        const std::size_t m = std::uniform_int_distribution<std::size_t>(k, 8)(rng);
        const std::size_t mc = std::uniform_int_distribution<std::size_t>(k, m)(rng);
        const std::size_t domain = std::uniform_int_distribution<std::size_t>(2, 10)(rng);
        const auto inst = random_discrete_instance(rng, domain, k, m, mc, t % 2 == 0);
        worst = std::max(worst, bayes_oracle_discrete(inst));
    }
    return worst;
}

inline std::vector<double> random_simplex_point(Rng& rng, std::size_t k, double floor = 0.01) {
    std::vector<double> v(k);
    double s = 0.0;
    for (auto& x : v) s += x = uniform(rng, floor, 1.0);
    for (auto& x : v) x /= s;
    return v;
}

inline double oracle_inverse(Rng& rng, std::size_t trials) {
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 5)(rng);
        const std::size_t mc = std::uniform_int_distribution<std::size_t>(k, 8)(rng);
        const std::size_t m = std::uniform_int_distribution<std::size_t>(mc, 8)(rng);
        const auto priors = sample_prior_matrix(k, mc, 0.1, 0.9, rng);
        auto pibar = random_simplex_point(rng, mc, 0.05);
        pibar.resize(m, 0.0);
        const auto head = build_transition_matrix(PriorVector{random_simplex_point(rng, k, 0.05), PriorRole::test},
                                                  PriorVector{pibar, PriorRole::surrogate}, priors, m);
        const auto eta = random_simplex_point(rng, k);
        const auto back = recover_eta(head, apply_transition(head, eta));
        for (std::size_t i = 0; i < k; ++i) worst = std::max(worst, std::abs(back[i] - eta[i]));
    }
    return worst;
}

// Random small network, batch and (every other trial) transition head.
struct GradCase {
    ModelParams params;
    Batch batch;
    std::optional<TransitionMatrix> head;
    double l1 = 0.0;
};

inline GradCase random_grad_case(Rng& rng, bool with_head) {
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
    const std::size_t hidden = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const std::vector<std::size_t> widths{d, hidden, k};
    GradCase gc;
    gc.params = make_model(widths, rng);
    for (auto& l : gc.params.layers)
        for (double& b : l.bias) b = uniform(rng, -0.5, 0.5);
    gc.l1 = uniform(rng, 0.0, 1e-2);
    std::size_t labels = k;
    if (with_head) {
        const std::size_t mc = std::uniform_int_distribution<std::size_t>(k, k + 3)(rng);
        const auto priors = sample_prior_matrix(k, mc, 0.1, 0.9, rng);
        auto pibar = random_simplex_point(rng, mc, 0.05);
        gc.head = build_transition_matrix(PriorVector{random_simplex_point(rng, k, 0.05), PriorRole::test},
                                          PriorVector{pibar, PriorRole::surrogate}, priors, mc);
        labels = mc;
    }
    gc.batch = Batch{Matrix(n, d), std::vector<int>(n), labels};
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& x : gc.batch.inputs.values()) x = normal(rng);
    for (int& y : gc.batch.labels) y = std::uniform_int_distribution<int>(0, static_cast<int>(labels) - 1)(rng);
    return gc;
}

inline double oracle_grad(Rng& rng, std::size_t trials) {
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        auto gc = random_grad_case(rng, t % 2 == 1);
        worst = std::max(worst, grad_check(gc.params, gc.batch, gc.head ? &*gc.head : nullptr, gc.l1, 1e-5));
    }
    return worst;
}

inline double oracle_baseline_grad(Rng& rng, std::size_t trials) {
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        auto gc = random_grad_case(rng, false);
        const auto& p = gc.params;
        const std::size_t k = p.num_classes();
        const std::size_t n = gc.batch.inputs.rows();
        switch (t % 3) {
            case 0: {
                PseudoLabeledBatch b;
                b.confident_inputs = gc.batch.inputs;
                b.confident_labels = gc.batch.labels;
                b.unconfident_inputs = Matrix(n, gc.batch.inputs.cols());
                for (double& x : b.unconfident_inputs.values()) x = uniform(rng, -1.0, 1.0);
                for (std::size_t i = 0; i < n; ++i)
                    b.unconfident_labels.push_back(std::uniform_int_distribution<int>(0, static_cast<int>(k) - 1)(rng));
                std::vector<std::pair<std::size_t, std::size_t>> pairs;
                for (std::size_t i = 0; i < n; ++i) pairs.emplace_back(i, n - 1 - i);
                const double lam = uniform(rng, 0.0, 1.0);
                auto f = [&](const ModelParams& q) { return fedpl_loss(q, b, pairs, lam, 0.3, gc.l1).loss; };
                worst = std::max(worst, grad_check_fn(p, fedpl_loss(p, b, pairs, lam, 0.3, gc.l1).grads, f, 1e-5));
                break;
            }
            case 1: {
                const std::size_t bags = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
                Matrix props(bags, k);
                for (std::size_t b = 0; b < bags; ++b) {
                    auto v = random_simplex_point(rng, k);
                    std::copy(v.begin(), v.end(), props.row(b).begin());
                }
                std::vector<std::size_t> bag_of(n);
                for (auto& b : bag_of) b = std::uniform_int_distribution<std::size_t>(0, bags - 1)(rng);
                auto f = [&](const ModelParams& q) { return fedllp_loss(q, gc.batch.inputs, bag_of, props, gc.l1).loss; };
                worst = std::max(worst,
                                 grad_check_fn(p, fedllp_loss(p, gc.batch.inputs, bag_of, props, gc.l1).grads, f, 1e-5));
                break;
            }
            default: {
                Matrix target(n, k);
                for (std::size_t i = 0; i < n; ++i) {
                    auto v = random_simplex_point(rng, k);
                    std::copy(v.begin(), v.end(), target.row(i).begin());
                }
                Matrix shifted = gc.batch.inputs;
                for (double& x : shifted.values()) x += uniform(rng, -0.1, 0.1);
                auto f = [&](const ModelParams& q) { return consistency_loss(q, shifted, target).loss; };
                worst = std::max(worst, grad_check_fn(p, consistency_loss(p, shifted, target).grads, f, 1e-5));
                break;
            }
        }
    }
    return worst;
}

inline OracleSummary run_oracles(std::uint64_t seed) {
    OracleSummary s;
    auto rng = make_stream(seed, {0x0a});
    s.bayes_max_abs = oracle_bayes(rng, 100);
    s.inverse_max_abs = oracle_inverse(rng, 1000);
    s.grad_max_rel = oracle_grad(rng, 50);
    s.baseline_grad_max_rel = oracle_baseline_grad(rng, 30);
    s.instances = 100 + 1000 + 50 + 30;
    return s;
}

}  // namespace fedul
