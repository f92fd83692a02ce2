#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedul/config.hpp"
#include "fedul/log.hpp"
#include "fedul/training.hpp"

namespace fedul {

inline constexpr const char* kToolVersion = "fedul 0.3.0";

struct SeedOutcome {
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;  // failure annotation when !ok
    double final_error = 0.0;
    std::vector<RoundMetrics> curve;
    std::vector<TransitionMatrix> heads;
};

struct ExperimentReport {
    ExperimentEntry entry;
    std::vector<SeedOutcome> runs;
    double mean_error = std::numeric_limits<double>::quiet_NaN();
    double std_error = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = 0.0;

    bool any_failed() const {
        return std::any_of(runs.begin(), runs.end(), [](const SeedOutcome& r) { return !r.ok; });
    }
};

// Mean and sample (n - 1) standard deviation of the successful runs' final
// errors; std is 0 for a single run, both NaN when nothing succeeded.
inline void summarize(ExperimentReport& report) {
    std::vector<double> v;
    for (const auto& r : report.runs)
        if (r.ok) v.push_back(r.final_error);
    if (v.empty()) {
        report.mean_error = report.std_error = std::numeric_limits<double>::quiet_NaN();
        return;
    }
    double sum = 0.0;
    for (double x : v) sum += x;
    report.mean_error = sum / static_cast<double>(v.size());
    if (v.size() < 2) {
        report.std_error = 0.0;
        return;
    }
    double ss = 0.0;
    for (double x : v) ss += (x - report.mean_error) * (x - report.mean_error);
    report.std_error = std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (double v : m.row(r)) row.push_back(v);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline json round_to_json(const RoundMetrics& m, std::uint64_t seed, Method method) {
    json j{{"round", m.round},
           {"run_seed", seed},
           {"method", to_string(method)},
           {"test_error", number_or_null(m.test_error)},
           {"surrogate_loss", number_or_null(m.surrogate_loss)},
           {"wall_ms", m.wall_ms}};
    if (!m.client_errors.empty()) j["client_errors"] = m.client_errors;
    return j;
}

inline std::string csv_header() { return "round,run_seed,method,test_error,surrogate_loss,wall_ms\n"; }

inline std::string csv_row(const RoundMetrics& m, std::uint64_t seed, Method method) {
    return std::to_string(m.round) + "," + std::to_string(seed) + "," + to_string(method) + "," +
           format_double(m.test_error) + "," + format_double(m.surrogate_loss) + "," + format_double(m.wall_ms) + "\n";
}

inline json report_to_json(const ExperimentReport& r) {
    const auto& c = r.entry.config;
    json runs = json::array();
    for (const auto& s : r.runs) {
        json run{{"seed", s.seed}, {"ok", s.ok}};
        if (s.ok) {
            run["final_error"] = s.final_error;
            json curve = json::array();
            for (const auto& m : s.curve) curve.push_back(m.test_error);
            run["error_curve"] = std::move(curve);
            json clients = json::array();
            for (std::size_t i = 0; i < s.heads.size(); ++i) {
                const auto& h = s.heads[i];
                clients.push_back({{"client", i},
                                   {"transition", matrix_to_json(h.matrix())},
                                   {"surrogate_prior", h.surrogate_prior().values},
                                   {"set_priors", matrix_to_json(h.set_priors().entries())}});
            }
            if (!clients.empty()) run["clients"] = std::move(clients);
        } else {
            run["error"] = s.error;
        }
        runs.push_back(std::move(run));
    }
    return json{{"entry", r.entry.label},
                {"method", to_string(c.method)},
                {"M", c.sets},
                {"distribution", to_string(c.distribution)},
                {"noise", c.noise},
                {"rounds", c.rounds},
                {"mean_error", number_or_null(r.mean_error)},
                {"std_error", number_or_null(r.std_error)},
                {"failed_runs", std::count_if(r.runs.begin(), r.runs.end(), [](const SeedOutcome& s) { return !s.ok; })},
                {"runs", std::move(runs)},
                {"wall_ms", r.wall_ms}};
}

// Fixed-width table sorted by (method, M): method | M | mean_err% | std | rounds.
inline std::string format_table(std::vector<const ExperimentReport*> reports) {
    std::stable_sort(reports.begin(), reports.end(), [](const ExperimentReport* a, const ExperimentReport* b) {
        const std::string ma = to_string(a->entry.config.method), mb = to_string(b->entry.config.method);
        if (ma != mb) return ma < mb;
        return a->entry.config.sets < b->entry.config.sets;
    });
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-18s | %4s | %-7s | %6s | %9s | %6s | %s\n", "method", "M", "dist", "noise",
                  "mean_err%", "std", "rounds");
    out += buf;
    out += std::string(72, '-') + "\n";
    for (const auto* r : reports) {
        const auto& c = r->entry.config;
        std::string mean = "failed";
        if (std::isfinite(r->mean_error)) {
            std::snprintf(buf, sizeof buf, "%.2f", 100.0 * r->mean_error);
            mean = buf;
        }
        std::string sd = "-";
        if (std::isfinite(r->std_error)) {
            std::snprintf(buf, sizeof buf, "%.2f", 100.0 * r->std_error);
            sd = buf;
        }
        std::snprintf(buf, sizeof buf, "%-18s | %4zu | %-7s | %6.2f | %9s | %6s | %zu%s\n", to_string(c.method), c.sets,
                      to_string(c.distribution), c.noise, mean.c_str(), sd.c_str(), c.rounds,
                      r->any_failed() ? "  (some runs failed)" : "");
        out += buf;
    }
    return out;
}

struct RunOptions {
    std::string out_dir;
    std::size_t workers = 1;
    std::vector<OutputFormat> formats;
    // Applied to every entry before running (tests use it to poison labels).
    std::function<void(TrainingConfig&)> adjust;
};

inline bool wants(const RunOptions& o, OutputFormat f) {
    return std::find(o.formats.begin(), o.formats.end(), f) != o.formats.end();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out) throw IoError("write failed for " + p.string());
}

// Runs every seed of one entry, streaming per-round rows to the entry's
// directory as they are produced.
inline ExperimentReport run_entry(const ExperimentEntry& entry, const std::vector<std::uint64_t>& seeds,
                                  const RunOptions& opts) {
    namespace fs = std::filesystem;
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentReport report{entry, {}, 0, 0, 0};
    const fs::path dir = fs::path(opts.out_dir) / entry.label;
    fs::create_directories(dir);

    std::ofstream csv, jsonl;
    if (wants(opts, OutputFormat::csv)) {
        csv.open(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
        if (!csv) throw IoError("cannot write " + (dir / "metrics.csv").string());
        csv << csv_header();
    }
    if (wants(opts, OutputFormat::json)) {
        jsonl.open(dir / "rounds.jsonl", std::ios::binary | std::ios::trunc);
        if (!jsonl) throw IoError("cannot write " + (dir / "rounds.jsonl").string());
    }

    const auto method = entry.config.method;
    for (auto seed : seeds) {
        SeedOutcome outcome;
        outcome.seed = seed;
        TrainingHooks hooks;
        hooks.on_round = [&](const RoundMetrics& m) {
            if (csv.is_open()) csv << csv_row(m, seed, method) << std::flush;
            if (jsonl.is_open()) jsonl << round_to_json(m, seed, method).dump() << "\n" << std::flush;
        };
        try {
            auto result = run_training(entry.config, seed, hooks);
            outcome.ok = true;
            outcome.final_error = result.final_error();
            outcome.curve = std::move(result.rounds);
            outcome.heads = std::move(result.heads);
        } catch (const Error& e) {
            outcome.ok = false;
            outcome.error = std::string(e.kind()) + ": " + e.what();
            logger().error("{} seed {} failed: {}", entry.label, seed, outcome.error);
            if (jsonl.is_open())
                jsonl << json{{"run_seed", seed}, {"failed", true}, {"error", outcome.error}}.dump() << "\n"
                      << std::flush;
        }
        report.runs.push_back(std::move(outcome));
    }
    summarize(report);
    if (entry.config.record_timing)
        report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (wants(opts, OutputFormat::json)) write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
    return report;
}

struct ExperimentResult {
    std::vector<ExperimentReport> reports;
    double wall_ms = 0.0;

    bool any_failed() const {
        return std::any_of(reports.begin(), reports.end(), [](const ExperimentReport& r) { return r.any_failed(); });
    }
};

inline void emit_summary(const ExperimentConfig& cfg, const ExperimentResult& result, const RunOptions& opts) {
    namespace fs = std::filesystem;
    fs::create_directories(opts.out_dir);
    if (wants(opts, OutputFormat::json)) {
        json entries = json::array();
        for (const auto& r : result.reports) {
            auto j = report_to_json(r);
            j.erase("runs");
            json finals = json::array();
            for (const auto& s : r.runs) finals.push_back(s.ok ? json(s.final_error) : json(nullptr));
            j["final_errors"] = std::move(finals);
            entries.push_back(std::move(j));
        }
        json summary{{"name", cfg.name},
                     {"tool_version", kToolVersion},
                     {"seeds", cfg.seeds},
                     {"config", cfg.source},
                     {"entries", std::move(entries)},
                     {"wall_ms", result.wall_ms}};
        write_text(fs::path(opts.out_dir) / "summary.json", summary.dump(2) + "\n");
    }
    if (wants(opts, OutputFormat::table)) {
        std::vector<const ExperimentReport*> ptrs;
        for (const auto& r : result.reports) ptrs.push_back(&r);
        write_text(fs::path(opts.out_dir) / "summary.txt", format_table(ptrs));
    }
}

// Runs every sweep entry (optionally on several worker threads; each entry
// owns its output directory) and writes the merged summary.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, RunOptions opts) {
    if (opts.out_dir.empty()) opts.out_dir = cfg.output_dir;
    if (opts.formats.empty()) opts.formats = cfg.formats;
    if (opts.workers == 0) opts.workers = 1;
    const auto t0 = std::chrono::steady_clock::now();

    auto entries = expand_entries(cfg);
    if (opts.adjust)
        for (auto& e : entries) opts.adjust(e.config);

    ExperimentResult result;
    result.reports.resize(entries.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= entries.size()) return;
            try {
                result.reports[i] = run_entry(entries[i], cfg.seeds, opts);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::min(opts.workers, entries.size());
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);

    if (cfg.base.record_timing)
        result.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    emit_summary(cfg, result, opts);
    return result;
}

}  // namespace fedul
