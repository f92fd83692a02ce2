#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fedul/error.hpp"
#include "fedul/log.hpp"
#include "fedul/matrix.hpp"
#include "fedul/priors.hpp"
#include "fedul/random.hpp"

namespace fedul {

struct GaussianClass {
    std::vector<double> mean;
    std::vector<double> variance;  // diagonal covariance
};

// Class-conditional generators shared by every client, plus the test prior.
class TaskSpec {
public:
    static TaskSpec gaussian(std::vector<GaussianClass> classes, PriorVector test_prior) {
        if (classes.size() < 2) throw PreconditionError("TaskSpec: need K >= 2");
        const std::size_t d = classes.front().mean.size();
        for (const auto& c : classes)
            if (c.mean.size() != d || c.variance.size() != d) throw ShapeError("TaskSpec: inconsistent dimensions");
        TaskSpec t;
        t.k_ = classes.size();
        t.d_ = d;
        t.generators_ = std::move(classes);
        t.set_prior(std::move(test_prior));
        return t;
    }

    // One pool of examples (rows) per class, e.g. loaded from IDX files.
    static TaskSpec pools(std::vector<Matrix> per_class, PriorVector test_prior) {
        if (per_class.size() < 2) throw PreconditionError("TaskSpec: need K >= 2");
        std::size_t d = 0;
        for (const auto& p : per_class) {
            if (p.rows() == 0) throw PreconditionError("TaskSpec: empty class pool");
            if (d == 0) d = p.cols();
            if (p.cols() != d) throw ShapeError("TaskSpec: inconsistent pool widths");
        }
        TaskSpec t;
        t.k_ = per_class.size();
        t.d_ = d;
        t.generators_ = std::move(per_class);
        t.set_prior(std::move(test_prior));
        return t;
    }

    std::size_t num_classes() const noexcept { return k_; }
    std::size_t input_dim() const noexcept { return d_; }
    const PriorVector& test_prior() const noexcept { return test_prior_; }
    bool is_gaussian() const noexcept { return std::holds_alternative<std::vector<GaussianClass>>(generators_); }
    const std::vector<GaussianClass>& gaussians() const { return std::get<std::vector<GaussianClass>>(generators_); }

    void sample_into(std::size_t k, Rng& rng, std::span<double> out) const {
        if (const auto* g = std::get_if<std::vector<GaussianClass>>(&generators_)) {
            const auto& c = (*g)[k];
            std::normal_distribution<double> normal(0.0, 1.0);
            for (std::size_t j = 0; j < d_; ++j) out[j] = c.mean[j] + std::sqrt(c.variance[j]) * normal(rng);
            return;
        }
        const auto& pool = std::get<std::vector<Matrix>>(generators_)[k];
        const auto idx = std::uniform_int_distribution<std::size_t>(0, pool.rows() - 1)(rng);
        auto src = pool.row(idx);
        std::copy(src.begin(), src.end(), out.begin());
    }

    // log p(x | y = k) for Gaussian tasks.
    double log_density(std::size_t k, std::span<const double> x) const {
        const auto& c = gaussians()[k];
        constexpr double kLog2Pi = 1.8378770664093454835606594728112;
        double acc = 0.0;
        for (std::size_t j = 0; j < d_; ++j) {
            const double diff = x[j] - c.mean[j];
            acc += diff * diff / c.variance[j] + std::log(c.variance[j]) + kLog2Pi;
        }
        return -0.5 * acc;
    }

    // Bayes posterior p(y | x) under `prior` (defaults to the test prior).
    std::vector<double> posterior(std::span<const double> x, const PriorVector* prior = nullptr) const {
        const auto& pi = prior ? *prior : test_prior_;
        std::vector<double> logp(k_);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < k_; ++k) {
            logp[k] = pi[k] > 0.0 ? std::log(pi[k]) + log_density(k, x) : -std::numeric_limits<double>::infinity();
            mx = std::max(mx, logp[k]);
        }
        double s = 0.0;
        for (auto& v : logp) s += v = std::exp(v - mx);
        for (auto& v : logp) v /= s;
        return logp;
    }

private:
    void set_prior(PriorVector prior) {
        if (prior.size() != k_) throw ShapeError("TaskSpec: test prior length != K");
        test_prior_ = std::move(prior);
    }

    std::size_t k_ = 0;
    std::size_t d_ = 0;
    std::variant<std::vector<GaussianClass>, std::vector<Matrix>> generators_;
    PriorVector test_prior_;
};

// Unit-variance Gaussian classes with pairwise mean distance `separation`:
// regular simplex vertices when K <= d + 1, otherwise random directions at
// radius separation / sqrt(2). Test prior is uniform.
inline TaskSpec gen_gaussian_task(std::size_t num_classes, std::size_t dim, double separation, Rng& rng) {
    if (num_classes < 2) throw PreconditionError("gen_gaussian_task: K >= 2 required");
    if (dim < 1) throw PreconditionError("gen_gaussian_task: d >= 1 required");
    if (!(separation > 0.0)) throw PreconditionError("gen_gaussian_task: separation must be positive");
    const std::size_t k = num_classes;
    std::vector<GaussianClass> classes(k, GaussianClass{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)});

    if (k <= dim + 1) {
        // Centered basis vectors of R^K span a (K-1)-dimensional simplex;
        // express them in an orthonormal basis of that span.
        std::vector<std::vector<double>> centered(k, std::vector<double>(k, -1.0 / static_cast<double>(k)));
        for (std::size_t i = 0; i < k; ++i) centered[i][i] += 1.0;
        std::vector<std::vector<double>> basis;
        for (std::size_t i = 0; i + 1 < k; ++i) {
            auto v = centered[i];
            for (const auto& b : basis) {
                double dot = 0.0;
                for (std::size_t j = 0; j < k; ++j) dot += v[j] * b[j];
                for (std::size_t j = 0; j < k; ++j) v[j] -= dot * b[j];
            }
            double norm = 0.0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(norm);
            for (double& x : v) x /= norm;
            basis.push_back(std::move(v));
        }
        const double scale = separation / std::sqrt(2.0);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t b = 0; b < basis.size(); ++b) {
                double dot = 0.0;
                for (std::size_t j = 0; j < k; ++j) dot += centered[i][j] * basis[b][j];
                classes[i].mean[b] = scale * dot;
            }
    } else {
        std::normal_distribution<double> normal(0.0, 1.0);
        const double radius = separation / std::sqrt(2.0);
        for (auto& c : classes) {
            double norm = 0.0;
            for (double& x : c.mean) {
                x = normal(rng);
                norm += x * x;
            }
            norm = std::sqrt(norm);
            for (double& x : c.mean) x *= radius / norm;
        }
    }
    return TaskSpec::gaussian(std::move(classes), uniform_prior(k));
}

// Bayes error 1 - integral of max_k pi_k p(x|k), by composite Simpson
// quadrature on a box covering +-10 standard deviations. d <= 2 only.
inline double bayes_error_quadrature(const TaskSpec& task, std::size_t nodes_per_dim = 801) {
    if (!task.is_gaussian()) throw PreconditionError("bayes_error_quadrature: Gaussian task required");
    const std::size_t d = task.input_dim();
    if (d > 2) throw PreconditionError("bayes_error_quadrature: d <= 2 only");
    if (nodes_per_dim % 2 == 0) ++nodes_per_dim;
    std::vector<double> lo(d), hi(d);
    for (std::size_t j = 0; j < d; ++j) {
        lo[j] = std::numeric_limits<double>::infinity();
        hi[j] = -lo[j];
        for (const auto& c : task.gaussians()) {
            const double sd = std::sqrt(c.variance[j]);
            lo[j] = std::min(lo[j], c.mean[j] - 10.0 * sd);
            hi[j] = std::max(hi[j], c.mean[j] + 10.0 * sd);
        }
    }
    auto weight = [nodes_per_dim](std::size_t i) {
        if (i == 0 || i + 1 == nodes_per_dim) return 1.0;
        return i % 2 == 1 ? 4.0 : 2.0;
    };
    const auto& pi = task.test_prior();
    auto integrand = [&](std::span<const double> x) {
        double best = 0.0;
        for (std::size_t k = 0; k < task.num_classes(); ++k)
            best = std::max(best, pi[k] * std::exp(task.log_density(k, x)));
        return best;
    };
    double total = 0.0;
    std::vector<double> h(d);
    for (std::size_t j = 0; j < d; ++j) h[j] = (hi[j] - lo[j]) / static_cast<double>(nodes_per_dim - 1);
    std::vector<double> x(d);
    if (d == 1) {
        for (std::size_t i = 0; i < nodes_per_dim; ++i) {
            x[0] = lo[0] + h[0] * static_cast<double>(i);
            total += weight(i) * integrand(x);
        }
        total *= h[0] / 3.0;
    } else {
        for (std::size_t i = 0; i < nodes_per_dim; ++i) {
            x[0] = lo[0] + h[0] * static_cast<double>(i);
            for (std::size_t j = 0; j < nodes_per_dim; ++j) {
                x[1] = lo[1] + h[1] * static_cast<double>(j);
                total += weight(i) * weight(j) * integrand(x);
            }
        }
        total *= h[0] * h[1] / 9.0;
    }
    return 1.0 - total;
}

// Monte Carlo estimate of E[1 - max_k eta_k(x)], x drawn under the test prior.
inline double bayes_error_monte_carlo(const TaskSpec& task, std::size_t samples, Rng& rng) {
    if (!task.is_gaussian()) throw PreconditionError("bayes_error_monte_carlo: Gaussian task required");
    std::discrete_distribution<std::size_t> pick(task.test_prior().values.begin(), task.test_prior().values.end());
    std::vector<double> x(task.input_dim());
    double acc = 0.0;
    for (std::size_t i = 0; i < samples; ++i) {
        task.sample_into(pick(rng), rng, x);
        const auto eta = task.posterior(x);
        acc += 1.0 - *std::max_element(eta.begin(), eta.end());
    }
    return acc / static_cast<double>(samples);
}

class LabelGate;

// One client's unlabeled sets. The latent class of every sample is kept
// behind LabelGate so training code cannot read it.
class USetCollection {
public:
    USetCollection(std::size_t client_id, std::vector<Matrix> sets, ClassPriorMatrix priors,
                   std::vector<std::vector<int>> hidden)
        : client_id_(client_id), sets_(std::move(sets)), priors_(std::move(priors)), hidden_(std::move(hidden)) {
        if (sets_.size() != priors_.num_sets()) throw ShapeError("USetCollection: set count != prior rows");
    }

    std::size_t client_id() const noexcept { return client_id_; }
    std::size_t num_sets() const noexcept { return sets_.size(); }
    const std::vector<Matrix>& sets() const noexcept { return sets_; }
    const ClassPriorMatrix& priors() const noexcept { return priors_; }

    std::vector<std::size_t> set_sizes() const {
        std::vector<std::size_t> out;
        for (const auto& s : sets_) out.push_back(s.rows());
        return out;
    }
    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& s : sets_) n += s.rows();
        return n;
    }

private:
    friend class LabelGate;
    std::size_t client_id_;
    std::vector<Matrix> sets_;
    ClassPriorMatrix priors_;
    std::vector<std::vector<int>> hidden_;
};

// The only access path to latent labels. Used by evaluation oracles and the
// labeled-fraction baseline; every reveal is logged.
class LabelGate {
public:
    static const std::vector<std::vector<int>>& reveal(const USetCollection& u, std::string_view purpose) {
        logger().debug("label gate: client {} labels revealed for {}", u.client_id_, purpose);
        return u.hidden_;
    }

    static void poison(USetCollection& u, int value) {
        for (auto& set : u.hidden_) std::fill(set.begin(), set.end(), value);
    }
};

// Each sample's latent class is drawn from row m of `priors`, then x from
// that class-conditional.
inline USetCollection sample_u_sets(const TaskSpec& task, const ClassPriorMatrix& priors,
                                    std::span<const std::size_t> sizes, Rng& rng, std::size_t client_id = 0) {
    if (sizes.size() != priors.num_sets()) throw ShapeError("sample_u_sets: sizes length != prior rows");
    if (priors.num_classes() != task.num_classes()) throw ShapeError("sample_u_sets: prior columns != K");
    if (std::any_of(sizes.begin(), sizes.end(), [](std::size_t n) { return n == 0; }))
        throw PreconditionError("sample_u_sets: set sizes must be positive");
    require_valid(priors, "sample_u_sets");

    std::vector<Matrix> sets;
    std::vector<std::vector<int>> hidden;
    for (std::size_t m = 0; m < sizes.size(); ++m) {
        auto row = priors.row(m);
        std::discrete_distribution<int> pick(row.begin(), row.end());
        Matrix x(sizes[m], task.input_dim());
        std::vector<int> y(sizes[m]);
        for (std::size_t i = 0; i < sizes[m]; ++i) {
            y[i] = pick(rng);
            task.sample_into(static_cast<std::size_t>(y[i]), rng, x.row(i));
        }
        sets.push_back(std::move(x));
        hidden.push_back(std::move(y));
    }
    return USetCollection(client_id, std::move(sets), priors, std::move(hidden));
}

// Pooled samples labelled by the index of the set they came from.
struct SurrogateDataset {
    Matrix inputs;
    std::vector<int> labels;
    std::vector<std::size_t> offsets;  // set m occupies [offsets[m], offsets[m+1])
    std::size_t num_sets = 0;          // M, including padded indices

    std::size_t size() const noexcept { return labels.size(); }
};

inline SurrogateDataset build_surrogate_dataset(const USetCollection& u, std::size_t total_sets) {
    if (total_sets < u.num_sets()) throw PreconditionError("build_surrogate_dataset: M < M_c");
    SurrogateDataset out;
    out.num_sets = total_sets;
    const std::size_t d = u.sets().empty() ? 0 : u.sets().front().cols();
    out.inputs = Matrix(u.total_size(), d);
    out.offsets.push_back(0);
    std::size_t row = 0;
    for (std::size_t m = 0; m < u.num_sets(); ++m) {
        const auto& s = u.sets()[m];
        for (std::size_t i = 0; i < s.rows(); ++i, ++row) {
            auto src = s.row(i);
            std::copy(src.begin(), src.end(), out.inputs.row(row).begin());
            out.labels.push_back(static_cast<int>(m));
        }
        out.offsets.push_back(row);
    }
    return out;
}

// Per-client class-fraction profiles for the class-prior-shifted setting.
// Client c's majority classes are (c * majority + j) mod K. Raw majority
// fractions are drawn from [0.15, 0.25], minority ones from [0, 0.08), then
// each profile is normalized.
inline std::vector<std::vector<double>> allocate_clients_noniid(std::size_t num_classes, std::size_t num_clients,
                                                                std::size_t majority_per_client, Rng& rng) {
    if (num_clients == 0) throw PreconditionError("allocate_clients_noniid: no clients");
    if (majority_per_client == 0) throw AllocationError("allocate_clients_noniid: need at least one majority class");
    if (num_classes < majority_per_client + 1)
        throw AllocationError("allocate_clients_noniid: need K >= majority_per_client + 1");
    std::vector<std::vector<double>> profiles;
    for (std::size_t c = 0; c < num_clients; ++c) {
        std::vector<bool> is_major(num_classes, false);
        for (std::size_t j = 0; j < majority_per_client; ++j)
            is_major[(c * majority_per_client + j) % num_classes] = true;
        std::vector<double> p(num_classes);
        double s = 0.0;
        for (std::size_t k = 0; k < num_classes; ++k)
            s += p[k] = is_major[k] ? uniform(rng, 0.15, 0.25) : uniform(rng, 0.0, 0.08);
        for (double& v : p) v /= s;
        profiles.push_back(std::move(p));
    }
    return profiles;
}

struct LabeledTestSet {
    Matrix inputs;
    std::vector<int> labels;
    std::size_t size() const noexcept { return labels.size(); }
};

inline LabeledTestSet sample_test_set(const TaskSpec& task, const PriorVector& prior, std::size_t n, Rng& rng) {
    if (n == 0) throw PreconditionError("sample_test_set: n must be positive");
    if (prior.size() != task.num_classes()) throw ShapeError("sample_test_set: prior length != K");
    std::discrete_distribution<int> pick(prior.values.begin(), prior.values.end());
    LabeledTestSet out{Matrix(n, task.input_dim()), std::vector<int>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        out.labels[i] = pick(rng);
        task.sample_into(static_cast<std::size_t>(out.labels[i]), rng, out.inputs.row(i));
    }
    return out;
}

}  // namespace fedul
