#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "fedul/error.hpp"
#include "fedul/linalg.hpp"
#include "fedul/matrix.hpp"
#include "fedul/priors.hpp"
#include "fedul/random.hpp"

namespace fedul {

// Fixed head mapping a class posterior to a set-membership posterior:
// q = T * eta, output q / sum(q), with T = diag(pibar) * Pi * diag(pi)^-1.
// Rows past the client's own set count are zero.
class TransitionMatrix {
public:
    const Matrix& matrix() const noexcept { return t_; }
    std::size_t num_sets() const noexcept { return t_.rows(); }
    std::size_t num_classes() const noexcept { return t_.cols(); }
    std::size_t active_sets() const noexcept { return active_sets_; }
    // Column sums of T; the head gradient needs them per sample.
    std::span<const double> column_sums() const noexcept { return column_sums_; }

    const PriorVector& test_prior() const noexcept { return test_prior_; }
    const PriorVector& surrogate_prior() const noexcept { return surrogate_prior_; }
    const ClassPriorMatrix& set_priors() const noexcept { return set_priors_; }

    bool row_is_zero(std::size_t m) const {
        auto r = t_.row(m);
        return std::all_of(r.begin(), r.end(), [](double v) { return v == 0.0; });
    }

private:
    friend TransitionMatrix build_transition_matrix(const PriorVector&, const PriorVector&, const ClassPriorMatrix&,
                                                    std::size_t);
    Matrix t_;
    std::size_t active_sets_ = 0;
    std::vector<double> column_sums_;
    PriorVector test_prior_;
    PriorVector surrogate_prior_;
    ClassPriorMatrix set_priors_;
};

inline TransitionMatrix build_transition_matrix(const PriorVector& test_prior, const PriorVector& surrogate_prior,
                                                const ClassPriorMatrix& set_priors, std::size_t total_sets) {
    const std::size_t k_classes = set_priors.num_classes();
    const std::size_t m_active = set_priors.num_sets();
    if (test_prior.size() != k_classes) throw ShapeError("build_transition_matrix: test prior length != K");
    if (surrogate_prior.size() != total_sets) throw ShapeError("build_transition_matrix: surrogate prior length != M");
    if (total_sets < m_active) throw PreconditionError("build_transition_matrix: M < M_c");
    for (std::size_t k = 0; k < k_classes; ++k)
        if (!(test_prior[k] > 0.0))
            throw SingularityError("build_transition_matrix: test prior of class " + std::to_string(k) + " is zero");
    for (std::size_t m = 0; m < total_sets; ++m) {
        const double v = surrogate_prior[m];
        if (m < m_active && !(v > 0.0))
            throw PreconditionError("build_transition_matrix: surrogate prior of active set " + std::to_string(m) +
                                    " is not positive");
        if (m >= m_active && v != 0.0)
            throw PreconditionError("build_transition_matrix: padded surrogate prior entry " + std::to_string(m) +
                                    " is nonzero");
    }
    require_valid(set_priors, "build_transition_matrix");

    TransitionMatrix out;
    out.t_ = Matrix(total_sets, k_classes);
    for (std::size_t m = 0; m < m_active; ++m)
        for (std::size_t k = 0; k < k_classes; ++k)
            out.t_(m, k) = surrogate_prior[m] * set_priors(m, k) / test_prior[k];
    out.active_sets_ = m_active;
    out.column_sums_.assign(k_classes, 0.0);
    for (std::size_t m = 0; m < total_sets; ++m)
        for (std::size_t k = 0; k < k_classes; ++k) out.column_sums_[k] += out.t_(m, k);
    out.test_prior_ = test_prior;
    out.surrogate_prior_ = surrogate_prior;
    out.set_priors_ = set_priors;
    return out;
}

// Surrogate posterior for a class posterior `eta`.
inline std::vector<double> apply_transition(const TransitionMatrix& t, std::span<const double> eta) {
    auto q = matvec(t.matrix(), eta);
    double s = 0.0;
    for (double v : q) s += v;
    if (!(s > 0.0)) throw InvariantError("apply_transition: unnormalizable surrogate posterior");
    for (double& v : q) v /= s;
    return q;
}

// Inverts apply_transition. Solves [T, -etabar; 1^T, 0] [eta; s] = [0; 1] in
// the least-squares sense and checks the round trip.
inline std::vector<double> recover_eta(const TransitionMatrix& t, std::span<const double> surrogate_posterior,
                                       double tolerance = 1e-8) {
    const std::size_t m = t.num_sets();
    const std::size_t k = t.num_classes();
    if (surrogate_posterior.size() != m) throw ShapeError("recover_eta: posterior length != M");
    Matrix system(m + 1, k + 1);
    std::vector<double> rhs(m + 1, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < k; ++c) system(r, c) = t.matrix()(r, c);
        system(r, k) = -surrogate_posterior[r];
    }
    for (std::size_t c = 0; c < k; ++c) system(m, c) = 1.0;
    rhs[m] = 1.0;

    std::vector<double> solution;
    try {
        solution = linalg::least_squares(std::move(system), std::move(rhs));
    } catch (const SingularityError&) {
        throw NotInImageError("recover_eta: degenerate system");
    }
    std::vector<double> eta(solution.begin(), solution.begin() + static_cast<std::ptrdiff_t>(k));

    auto q = matvec(t.matrix(), eta);
    double s = 0.0;
    for (double v : q) s += v;
    double residual = std::numeric_limits<double>::infinity();
    if (s > 0.0) {
        residual = 0.0;
        for (std::size_t r = 0; r < m; ++r) residual = std::max(residual, std::abs(q[r] / s - surrogate_posterior[r]));
    }
    if (!(residual < tolerance))
        throw NotInImageError("recover_eta: residual " + std::to_string(residual) + " exceeds tolerance");
    return eta;
}

// A fully specified discrete surrogate-task instance for the exhaustive Bayes
// check: K class-conditional pmfs over a finite domain plus the priors.
struct DiscreteInstance {
    Matrix class_conditionals;  // K x domain_size, rows are pmfs
    PriorVector test_prior;     // K
    ClassPriorMatrix set_priors;  // M_c x K
    PriorVector surrogate_prior;  // M, zero past M_c
};

// Random instance. When `mixture_consistent`, the surrogate prior is drawn
// first and the test prior is set to the induced class marginal Pi^T pibar;
// otherwise both are drawn independently.
inline DiscreteInstance random_discrete_instance(Rng& rng, std::size_t domain_size, std::size_t num_classes,
                                                 std::size_t total_sets, std::size_t active_sets,
                                                 bool mixture_consistent) {
    if (active_sets < num_classes || total_sets < active_sets)
        throw PreconditionError("random_discrete_instance: need K <= M_c <= M");
    DiscreteInstance inst;
    inst.class_conditionals = Matrix(num_classes, domain_size);
    for (std::size_t k = 0; k < num_classes; ++k) {
        double s = 0.0;
        for (std::size_t x = 0; x < domain_size; ++x) s += inst.class_conditionals(k, x) = uniform(rng, 0.01, 1.0);
        for (std::size_t x = 0; x < domain_size; ++x) inst.class_conditionals(k, x) /= s;
    }
    inst.set_priors = sample_prior_matrix(num_classes, active_sets, 0.1, 0.9, rng);

    auto draw_simplex = [&rng](std::size_t n) {
        std::vector<double> v(n);
        double s = 0.0;
        for (auto& x : v) s += x = uniform(rng, 0.05, 1.0);
        for (auto& x : v) x /= s;
        return v;
    };
    auto pibar = draw_simplex(active_sets);
    pibar.resize(total_sets, 0.0);
    inst.surrogate_prior = PriorVector{pibar, PriorRole::surrogate};
    if (mixture_consistent) {
        std::vector<double> pi(num_classes, 0.0);
        for (std::size_t m = 0; m < active_sets; ++m)
            for (std::size_t k = 0; k < num_classes; ++k) pi[k] += pibar[m] * inst.set_priors(m, k);
        inst.test_prior = PriorVector{pi, PriorRole::test};
    } else {
        inst.test_prior = PriorVector{draw_simplex(num_classes), PriorRole::test};
    }
    return inst;
}

// Exhaustive Bayes inversion over the domain: the surrogate posterior from the
// joint p(x, set) against apply_transition of the class posterior p(y | x).
// Returns the largest absolute discrepancy. Points with zero marginal are
// skipped.
inline double bayes_oracle_discrete(const DiscreteInstance& inst) {
    const std::size_t k_classes = inst.class_conditionals.rows();
    const std::size_t domain = inst.class_conditionals.cols();
    const std::size_t m_active = inst.set_priors.num_sets();
    const std::size_t m_total = inst.surrogate_prior.size();
    const auto head = build_transition_matrix(inst.test_prior, inst.surrogate_prior, inst.set_priors, m_total);

    double worst = 0.0;
    for (std::size_t x = 0; x < domain; ++x) {
        std::vector<double> class_joint(k_classes);
        double class_marginal = 0.0;
        for (std::size_t k = 0; k < k_classes; ++k)
            class_marginal += class_joint[k] = inst.test_prior[k] * inst.class_conditionals(k, x);

        std::vector<double> set_joint(m_total, 0.0);
        double set_marginal = 0.0;
        for (std::size_t m = 0; m < m_active; ++m) {
            double mixture = 0.0;
            for (std::size_t k = 0; k < k_classes; ++k) mixture += inst.set_priors(m, k) * inst.class_conditionals(k, x);
            set_marginal += set_joint[m] = inst.surrogate_prior[m] * mixture;
        }
        if (!(class_marginal > 0.0) || !(set_marginal > 0.0)) continue;

        std::vector<double> eta(k_classes);
        for (std::size_t k = 0; k < k_classes; ++k) eta[k] = class_joint[k] / class_marginal;
        const auto mapped = apply_transition(head, eta);
        for (std::size_t m = 0; m < m_total; ++m)
            worst = std::max(worst, std::abs(set_joint[m] / set_marginal - mapped[m]));
    }
    return worst;
}

}  // namespace fedul
