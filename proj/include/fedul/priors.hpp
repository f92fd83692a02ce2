#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedul/error.hpp"
#include "fedul/linalg.hpp"
#include "fedul/matrix.hpp"
#include "fedul/random.hpp"

namespace fedul {

inline constexpr double kRowSumTolerance = 1e-10;
inline constexpr double kRankTolerance = 1e-8;

// Per-set class priors of one client: entry (m, k) is the fraction of class k
// in unlabeled set m. Rows are sets, columns are classes.
class ClassPriorMatrix {
public:
    ClassPriorMatrix() = default;
    explicit ClassPriorMatrix(Matrix entries) : entries_(std::move(entries)) {}

    std::size_t num_sets() const noexcept { return entries_.rows(); }
    std::size_t num_classes() const noexcept { return entries_.cols(); }
    const Matrix& entries() const noexcept { return entries_; }
    double operator()(std::size_t m, std::size_t k) const noexcept { return entries_(m, k); }
    std::span<const double> row(std::size_t m) const noexcept { return entries_.row(m); }

    friend bool operator==(const ClassPriorMatrix&, const ClassPriorMatrix&) = default;

private:
    Matrix entries_;
};

enum class PriorRole { test, surrogate };

struct PriorVector {
    std::vector<double> values;
    PriorRole role = PriorRole::test;

    std::size_t size() const noexcept { return values.size(); }
    double operator[](std::size_t i) const noexcept { return values[i]; }
    friend bool operator==(const PriorVector&, const PriorVector&) = default;
};

inline PriorVector uniform_prior(std::size_t k) {
    return PriorVector{std::vector<double>(k, 1.0 / static_cast<double>(k)), PriorRole::test};
}

struct PriorViolation {
    std::string what;
};

// Every invariant a prior matrix violates; empty when valid.
inline std::vector<PriorViolation> validate_prior_matrix(const ClassPriorMatrix& priors) {
    std::vector<PriorViolation> out;
    const auto& e = priors.entries();
    const std::size_t rows = e.rows();
    const std::size_t cols = e.cols();
    if (rows == 0 || cols == 0) {
        out.push_back({"empty prior matrix"});
        return out;
    }
    bool finite = true;
    for (std::size_t m = 0; m < rows; ++m) {
        double sum = 0.0;
        for (std::size_t k = 0; k < cols; ++k) {
            const double v = e(m, k);
            if (!std::isfinite(v)) finite = false;
            if (!(v >= 0.0 && v <= 1.0))
                out.push_back({"entry (" + std::to_string(m) + "," + std::to_string(k) + ") outside [0,1]"});
            sum += v;
        }
        if (!(std::abs(sum - 1.0) <= kRowSumTolerance))
            out.push_back({"row " + std::to_string(m) + " sums to " + std::to_string(sum)});
    }
    if (rows < cols)
        out.push_back({"fewer sets (" + std::to_string(rows) + ") than classes (" + std::to_string(cols) + ")"});
    if (!finite) return out;

    Matrix normalized = e;
    for (std::size_t m = 0; m < rows; ++m) {
        double sum = 0.0;
        for (double v : normalized.row(m)) sum += v;
        if (sum > 0.0)
            for (double& v : normalized.row(m)) v /= sum;
    }
    const auto sv = linalg::singular_values(normalized);
    if (sv.back() <= kRankTolerance)
        out.push_back({"column rank below " + std::to_string(cols) + " (min singular value " + std::to_string(sv.back()) + ")"});

    if (cols >= 2 && rows >= 2) {
        bool all_same = true;
        for (std::size_t m = 1; m < rows && all_same; ++m)
            for (std::size_t k = 0; k < cols; ++k)
                if (e(m, k) != e(0, k)) {
                    all_same = false;
                    break;
                }
        if (all_same) out.push_back({"all rows identical"});
    }
    return out;
}

inline bool is_valid(const ClassPriorMatrix& priors) { return validate_prior_matrix(priors).empty(); }

inline void require_valid(const ClassPriorMatrix& priors, const char* context) {
    const auto v = validate_prior_matrix(priors);
    if (v.empty()) return;
    std::string msg = std::string(context) + ": invalid prior matrix:";
    for (const auto& x : v) msg += " " + x.what + ";";
    if (std::any_of(v.begin(), v.end(), [](const PriorViolation& p) { return p.what.starts_with("column rank"); }))
        throw RankError(msg);
    throw PreconditionError(msg);
}

// Draws every raw entry uniformly from [low, high], optionally multiplies
// column k by class_weights[k] (class-prior shift for non-IID clients), then
// normalizes each row. Redraws until the rank check passes.
inline ClassPriorMatrix sample_prior_matrix(std::size_t num_classes, std::size_t num_sets, double low, double high,
                                            Rng& rng, std::span<const double> class_weights = {},
                                            int max_retries = 100) {
    if (num_classes == 0) throw PreconditionError("sample_prior_matrix: K must be positive");
    if (num_sets < num_classes) throw PreconditionError("sample_prior_matrix: need M_c >= K");
    if (!(0.0 < low && low < high && high < 1.0))
        throw PreconditionError("sample_prior_matrix: need 0 < low < high < 1");
    if (!class_weights.empty() && class_weights.size() != num_classes)
        throw ShapeError("sample_prior_matrix: class weight length mismatch");

    for (int attempt = 0; attempt < max_retries; ++attempt) {
        Matrix raw(num_sets, num_classes);
        for (std::size_t m = 0; m < num_sets; ++m) {
            double sum = 0.0;
            for (std::size_t k = 0; k < num_classes; ++k) {
                double v = uniform(rng, low, high);
                if (!class_weights.empty()) v *= class_weights[k];
                raw(m, k) = v;
                sum += v;
            }
            for (std::size_t k = 0; k < num_classes; ++k) raw(m, k) /= sum;
        }
        ClassPriorMatrix candidate(std::move(raw));
        if (is_valid(candidate)) return candidate;
    }
    throw GenerationError("sample_prior_matrix: rank check failed after " + std::to_string(max_retries) +
                          " draws (K=" + std::to_string(num_classes) + ", M_c=" + std::to_string(num_sets) + ")");
}

// Surrogate prior n_m / sum(n), zero-padded to length `total_sets`.
inline PriorVector estimate_surrogate_prior(std::span<const std::size_t> set_sizes, std::size_t total_sets) {
    if (set_sizes.empty()) throw PreconditionError("estimate_surrogate_prior: no sets");
    if (total_sets < set_sizes.size()) throw PreconditionError("estimate_surrogate_prior: M < M_c");
    if (std::any_of(set_sizes.begin(), set_sizes.end(), [](std::size_t n) { return n == 0; }))
        throw PreconditionError("estimate_surrogate_prior: empty set");
    const std::size_t total = std::accumulate(set_sizes.begin(), set_sizes.end(), std::size_t{0});

    PriorVector out{std::vector<double>(total_sets, 0.0), PriorRole::surrogate};
    // The last set absorbs the rounding residue, which makes the in-order sum
    // exactly 1.0 in double arithmetic.
    double running = 0.0;
    const std::size_t last = set_sizes.size() - 1;
    for (std::size_t m = 0; m < last; ++m) {
        out.values[m] = static_cast<double>(set_sizes[m]) / static_cast<double>(total);
        running += out.values[m];
    }
    out.values[last] = 1.0 - running;
    return out;
}

// Noisy priors: each entry scaled by ((2*gamma - 1) * noise + 1) with gamma ~
// U[0,1], clipped to [low, high], rows renormalized and revalidated.
// noise == 0 returns the input unchanged.
inline ClassPriorMatrix perturb_priors(const ClassPriorMatrix& priors, double noise, Rng& rng, double low = 0.1,
                                       double high = 0.9) {
    if (!(noise >= 0.0)) throw PreconditionError("perturb_priors: noise must be >= 0");
    if (noise == 0.0) return priors;
    Matrix out = priors.entries();
    for (std::size_t m = 0; m < out.rows(); ++m) {
        double sum = 0.0;
        for (std::size_t k = 0; k < out.cols(); ++k) {
            const double gamma = uniform(rng, 0.0, 1.0);
            const double v = std::clamp(out(m, k) * ((2.0 * gamma - 1.0) * noise + 1.0), low, high);
            out(m, k) = v;
            sum += v;
        }
        for (std::size_t k = 0; k < out.cols(); ++k) out(m, k) /= sum;
    }
    ClassPriorMatrix noisy(std::move(out));
    require_valid(noisy, "perturb_priors");
    return noisy;
}

}  // namespace fedul
