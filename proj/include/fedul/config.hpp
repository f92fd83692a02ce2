#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedul/error.hpp"
#include "fedul/training.hpp"

namespace fedul {

using json = nlohmann::json;

enum class OutputFormat { csv, json, table };

// A declarative experiment: a base training description plus the swept axes
// (method, M, distribution, noise) and the seeds run for every combination.
struct ExperimentConfig {
    std::string name = "experiment";
    TrainingConfig base;
    std::vector<Method> methods{Method::fedul};
    std::vector<std::size_t> set_counts{10};
    std::vector<Distribution> distributions{Distribution::iid};
    std::vector<double> noises{0.0};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::string output_dir = "fedul_out";
    std::vector<OutputFormat> formats{OutputFormat::csv, OutputFormat::json, OutputFormat::table};
    json source;  // the file as parsed, echoed into reports
};

struct ExperimentEntry {
    std::size_t index = 0;
    TrainingConfig config;
    std::string label;
};

namespace config_detail {

inline std::string child(const std::string& ptr, const std::string& key) {
    std::string escaped;
    for (char ch : key) {
        if (ch == '~') escaped += "~0";
        else if (ch == '/') escaped += "~1";
        else escaped += ch;
    }
    return ptr + "/" + escaped;
}

inline std::string child(const std::string& ptr, std::size_t i) { return ptr + "/" + std::to_string(i); }

inline void reject_unknown(const json& obj, const std::string& ptr, std::initializer_list<const char*> allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        const bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return it.key() == a; });
        if (!ok) throw ConfigError(child(ptr, it.key()), "unknown key \"" + it.key() + "\"");
    }
}

inline std::size_t as_count(const json& v, const std::string& ptr, bool allow_zero = false) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(ptr, "expected an integer");
    const auto x = v.get<long long>();
    if (x < 0 || (!allow_zero && x == 0)) throw ConfigError(ptr, allow_zero ? "must be >= 0" : "must be positive");
    return static_cast<std::size_t>(x);
}

inline double as_number(const json& v, const std::string& ptr) {
    if (!v.is_number()) throw ConfigError(ptr, "expected a number");
    return v.get<double>();
}

inline bool as_bool(const json& v, const std::string& ptr) {
    if (!v.is_boolean()) throw ConfigError(ptr, "expected a boolean");
    return v.get<bool>();
}

inline std::string as_string(const json& v, const std::string& ptr) {
    if (!v.is_string()) throw ConfigError(ptr, "expected a string");
    return v.get<std::string>();
}

inline Method as_method(const json& v, const std::string& ptr) {
    const auto s = as_string(v, ptr);
    if (s == "fedul") return Method::fedul;
    if (s == "fedpl") return Method::fedpl;
    if (s == "fedllp") return Method::fedllp;
    if (s == "fedllp_vat") return Method::fedllp_vat;
    if (s == "fedavg_supervised") return Method::fedavg_supervised;
    throw ConfigError(ptr, "unknown method \"" + s + "\"");
}

inline Distribution as_distribution(const json& v, const std::string& ptr) {
    const auto s = as_string(v, ptr);
    if (s == "iid") return Distribution::iid;
    if (s == "noniid") return Distribution::noniid;
    throw ConfigError(ptr, "unknown distribution \"" + s + "\"");
}

// A scalar or a non-empty array of scalars.
template <class T, class F>
std::vector<T> one_or_many(const json& v, const std::string& ptr, F&& convert) {
    std::vector<T> out;
    if (v.is_array()) {
        if (v.empty()) throw ConfigError(ptr, "empty list");
        for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert(v[i], child(ptr, i)));
    } else {
        out.push_back(convert(v, ptr));
    }
    return out;
}

inline TaskConfig parse_task(const json& t, const std::string& ptr) {
    if (!t.is_object()) throw ConfigError(ptr, "task must be an object");
    reject_unknown(t, ptr, {"type", "K", "d", "separation", "images", "labels"});
    TaskConfig task;
    const auto type = t.contains("type") ? as_string(t["type"], child(ptr, "type")) : std::string("gaussian");
    if (type == "gaussian") {
        task.kind = TaskConfig::Kind::gaussian;
    } else if (type == "idx") {
        task.kind = TaskConfig::Kind::idx;
        if (!t.contains("images")) throw ConfigError(child(ptr, "images"), "images path required for idx task");
        if (!t.contains("labels")) throw ConfigError(child(ptr, "labels"), "labels path required for idx task");
        task.images_path = as_string(t["images"], child(ptr, "images"));
        task.labels_path = as_string(t["labels"], child(ptr, "labels"));
    } else {
        throw ConfigError(child(ptr, "type"), "unknown task type \"" + type + "\"");
    }
    if (t.contains("K")) task.num_classes = as_count(t["K"], child(ptr, "K"));
    if (task.num_classes < 2) throw ConfigError(child(ptr, "K"), "K must be at least 2");
    task.dim = t.contains("d") ? as_count(t["d"], child(ptr, "d")) : task.num_classes;
    if (t.contains("separation")) {
        task.separation = as_number(t["separation"], child(ptr, "separation"));
        if (!(task.separation > 0.0)) throw ConfigError(child(ptr, "separation"), "separation must be positive");
    }
    return task;
}

}  // namespace config_detail

inline ExperimentConfig parse_config_json(const json& root) {
    using namespace config_detail;
    if (!root.is_object()) throw ConfigError("", "config must be a JSON object");
    reject_unknown(root, "",
                   {"name", "task", "clients", "M", "sets_per_client", "set_size", "distribution",
                    "majority_per_client", "method", "supervised_fraction", "rounds", "epochs", "batch_size", "lr",
                    "global_lr", "l1_weight", "noise", "prior_range", "participation", "hidden", "test_size", "fedpl",
                    "vat", "seeds", "eval_per_client", "record_timing", "output"});
    ExperimentConfig cfg;
    cfg.source = root;
    auto& b = cfg.base;
    if (!root.contains("task")) throw ConfigError("/task", "task required");
    b.task = parse_task(root["task"], "/task");

    if (root.contains("name")) cfg.name = as_string(root["name"], "/name");
    if (root.contains("clients")) b.clients = as_count(root["clients"], "/clients");
    cfg.set_counts = root.contains("M") ? one_or_many<std::size_t>(root["M"], "/M",
                                                                   [](const json& v, const std::string& p) {
                                                                       return as_count(v, p);
                                                                   })
                                        : std::vector<std::size_t>{b.task.num_classes};
    if (root.contains("sets_per_client")) {
        const auto& v = root["sets_per_client"];
        if (!v.is_array() || v.size() != b.clients)
            throw ConfigError("/sets_per_client", "expected one set count per client");
        for (std::size_t i = 0; i < v.size(); ++i)
            b.sets_per_client.push_back(as_count(v[i], child("/sets_per_client", i)));
    }
    if (root.contains("set_size")) b.set_size = as_count(root["set_size"], "/set_size");
    if (root.contains("distribution"))
        cfg.distributions = one_or_many<Distribution>(root["distribution"], "/distribution", as_distribution);
    if (root.contains("majority_per_client"))
        b.majority_per_client = as_count(root["majority_per_client"], "/majority_per_client");
    if (root.contains("method")) cfg.methods = one_or_many<Method>(root["method"], "/method", as_method);
    if (root.contains("supervised_fraction")) {
        b.supervised_fraction = as_number(root["supervised_fraction"], "/supervised_fraction");
        if (!(b.supervised_fraction > 0.0 && b.supervised_fraction <= 1.0))
            throw ConfigError("/supervised_fraction", "must be in (0, 1]");
    }
    if (root.contains("rounds")) b.rounds = as_count(root["rounds"], "/rounds", true);
    if (root.contains("epochs")) b.epochs = as_count(root["epochs"], "/epochs");
    if (root.contains("batch_size")) {
        const auto& v = root["batch_size"];
        if (v.is_string() && v.get<std::string>() == "full")
            b.batch_size = std::numeric_limits<std::size_t>::max() / 2;
        else
            b.batch_size = as_count(v, "/batch_size");
    }
    auto positive = [&](const char* key, double& slot) {
        if (!root.contains(key)) return;
        const std::string ptr = std::string("/") + key;
        slot = as_number(root[key], ptr);
        if (!(slot > 0.0)) throw ConfigError(ptr, "must be positive");
    };
    positive("lr", b.lr);
    positive("global_lr", b.global_lr);
    positive("participation", b.participation);
    if (b.participation > 1.0) throw ConfigError("/participation", "must be in (0, 1]");
    if (root.contains("l1_weight")) {
        b.l1_weight = as_number(root["l1_weight"], "/l1_weight");
        if (!(b.l1_weight >= 0.0)) throw ConfigError("/l1_weight", "must be >= 0");
    }
    if (root.contains("noise"))
        cfg.noises = one_or_many<double>(root["noise"], "/noise", [](const json& v, const std::string& p) {
            const double x = as_number(v, p);
            if (!(x >= 0.0)) throw ConfigError(p, "noise must be >= 0");
            return x;
        });
    if (root.contains("prior_range")) {
        const auto& v = root["prior_range"];
        if (!v.is_array() || v.size() != 2) throw ConfigError("/prior_range", "expected [low, high]");
        b.prior_low = as_number(v[0], "/prior_range/0");
        b.prior_high = as_number(v[1], "/prior_range/1");
        if (!(0.0 < b.prior_low && b.prior_low < b.prior_high && b.prior_high < 1.0))
            throw ConfigError("/prior_range", "need 0 < low < high < 1");
    }
    if (root.contains("hidden")) {
        const auto& v = root["hidden"];
        if (!v.is_array()) throw ConfigError("/hidden", "expected a list of widths");
        b.hidden.clear();
        for (std::size_t i = 0; i < v.size(); ++i) b.hidden.push_back(as_count(v[i], child("/hidden", i)));
    }
    if (root.contains("test_size")) b.test_size = as_count(root["test_size"], "/test_size");
    if (root.contains("fedpl")) {
        const auto& v = root["fedpl"];
        if (!v.is_object()) throw ConfigError("/fedpl", "expected an object");
        reject_unknown(v, "/fedpl", {"tau", "mixup_a", "mix_weight"});
        if (v.contains("tau")) b.fedpl.tau = as_number(v["tau"], "/fedpl/tau");
        if (v.contains("mixup_a")) b.fedpl.mixup_a = as_number(v["mixup_a"], "/fedpl/mixup_a");
        if (v.contains("mix_weight")) b.fedpl.mix_weight = as_number(v["mix_weight"], "/fedpl/mix_weight");
        if (!(b.fedpl.mixup_a > 0.0)) throw ConfigError("/fedpl/mixup_a", "must be positive");
    }
    if (root.contains("vat")) {
        const auto& v = root["vat"];
        if (!v.is_object()) throw ConfigError("/vat", "expected an object");
        reject_unknown(v, "/vat", {"profile", "alpha", "mu", "xi", "power_iters"});
        if (v.contains("profile")) {
            const auto p = as_string(v["profile"], "/vat/profile");
            if (p == "mnist") {
                b.vat.alpha = 5e-4;
                b.vat.mu = 1e-2;
            } else if (p == "cifar") {
                b.vat.alpha = 0.05;
                b.vat.mu = 6.0;
            } else {
                throw ConfigError("/vat/profile", "unknown profile \"" + p + "\"");
            }
        }
        if (v.contains("alpha")) b.vat.alpha = as_number(v["alpha"], "/vat/alpha");
        if (v.contains("mu")) b.vat.mu = as_number(v["mu"], "/vat/mu");
        if (v.contains("xi")) b.vat.xi = as_number(v["xi"], "/vat/xi");
        if (v.contains("power_iters")) b.vat.power_iters = as_count(v["power_iters"], "/vat/power_iters", true);
    }
    if (root.contains("seeds")) {
        const auto& v = root["seeds"];
        if (!v.is_array() || v.empty()) throw ConfigError("/seeds", "expected a non-empty list of seeds");
        cfg.seeds.clear();
        std::set<std::uint64_t> seen;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const auto s = static_cast<std::uint64_t>(as_count(v[i], child("/seeds", i), true));
            if (!seen.insert(s).second) throw ConfigError(child("/seeds", i), "duplicate seed " + std::to_string(s));
            cfg.seeds.push_back(s);
        }
    }
    if (root.contains("eval_per_client")) b.eval_per_client = as_bool(root["eval_per_client"], "/eval_per_client");
    if (root.contains("record_timing")) b.record_timing = as_bool(root["record_timing"], "/record_timing");
    if (root.contains("output")) {
        const auto& v = root["output"];
        if (!v.is_object()) throw ConfigError("/output", "expected an object");
        reject_unknown(v, "/output", {"dir", "formats"});
        if (v.contains("dir")) cfg.output_dir = as_string(v["dir"], "/output/dir");
        if (v.contains("formats")) {
            cfg.formats = one_or_many<OutputFormat>(v["formats"], "/output/formats",
                                                    [](const json& x, const std::string& p) {
                                                        const auto s = as_string(x, p);
                                                        if (s == "csv") return OutputFormat::csv;
                                                        if (s == "json") return OutputFormat::json;
                                                        if (s == "table") return OutputFormat::table;
                                                        throw ConfigError(p, "unknown format \"" + s + "\"");
                                                    });
        }
    }

    // Every client needs at least K sets for a full-column-rank prior matrix.
    const std::size_t k = b.task.num_classes;
    for (std::size_t i = 0; i < cfg.set_counts.size(); ++i)
        if (cfg.set_counts[i] < k)
            throw ConfigError(root.contains("M") && root["M"].is_array() ? child("/M", i) : std::string("/M"),
                              "M_c >= K required (M=" + std::to_string(cfg.set_counts[i]) + ", K=" + std::to_string(k) +
                                  ")");
    for (std::size_t c = 0; c < b.sets_per_client.size(); ++c) {
        if (b.sets_per_client[c] < k)
            throw ConfigError(child("/sets_per_client", c), "M_c >= K required");
        for (std::size_t m : cfg.set_counts)
            if (b.sets_per_client[c] > m) throw ConfigError(child("/sets_per_client", c), "M_c exceeds M");
    }
    if (std::find(cfg.distributions.begin(), cfg.distributions.end(), Distribution::noniid) != cfg.distributions.end() &&
        (b.majority_per_client == 0 || b.majority_per_client + 1 > k))
        throw ConfigError("/majority_per_client", "need 1 <= majority_per_client <= K - 1");
    return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file " + path);
    json root;
    try {
        root = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("", std::string("malformed JSON: ") + e.what());
    }
    return parse_config_json(root);
}

// Cartesian product of the swept axes, in (method, M, distribution, noise)
// order.
inline std::vector<ExperimentEntry> expand_entries(const ExperimentConfig& cfg) {
    std::vector<ExperimentEntry> out;
    for (auto method : cfg.methods)
        for (auto m : cfg.set_counts)
            for (auto dist : cfg.distributions)
                for (auto noise : cfg.noises) {
                    ExperimentEntry e;
                    e.index = out.size();
                    e.config = cfg.base;
                    e.config.method = method;
                    e.config.sets = m;
                    e.config.distribution = dist;
                    e.config.noise = noise;
                    char buf[160];
                    std::snprintf(buf, sizeof buf, "%03zu_%s_M%zu_%s_eps%g", e.index, to_string(method), m,
                                  to_string(dist), noise);
                    e.label = buf;
                    out.push_back(std::move(e));
                }
    return out;
}

}  // namespace fedul
