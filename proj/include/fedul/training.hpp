#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedul/baselines.hpp"
#include "fedul/datagen.hpp"
#include "fedul/federation.hpp"
#include "fedul/idx.hpp"
#include "fedul/log.hpp"
#include "fedul/nn.hpp"
#include "fedul/priors.hpp"
#include "fedul/random.hpp"
#include "fedul/transition.hpp"

namespace fedul {

enum class Method { fedul, fedpl, fedllp, fedllp_vat, fedavg_supervised };
enum class Distribution { iid, noniid };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::fedul: return "fedul";
        case Method::fedpl: return "fedpl";
        case Method::fedllp: return "fedllp";
        case Method::fedllp_vat: return "fedllp_vat";
        case Method::fedavg_supervised: return "fedavg_supervised";
    }
    return "?";
}

inline const char* to_string(Distribution d) { return d == Distribution::iid ? "iid" : "noniid"; }

struct TaskConfig {
    enum class Kind { gaussian, idx } kind = Kind::gaussian;
    std::size_t num_classes = 10;
    std::size_t dim = 10;
    double separation = 3.0;
    std::string images_path;
    std::string labels_path;
};

// One fully resolved training run description (a single sweep entry).
struct TrainingConfig {
    TaskConfig task;
    std::size_t clients = 5;
    std::size_t sets = 10;                       // M
    std::vector<std::size_t> sets_per_client;    // M_c per client; empty means M for all
    std::size_t set_size = 200;
    Distribution distribution = Distribution::iid;
    std::size_t majority_per_client = 2;
    Method method = Method::fedul;
    double supervised_fraction = 0.1;
    std::size_t rounds = 100;
    std::size_t epochs = 1;
    std::size_t batch_size = 128;
    double lr = 1e-4;
    double global_lr = 1.0;
    double l1_weight = 2e-6;
    double noise = 0.0;
    double prior_low = 0.1;
    double prior_high = 0.9;
    double participation = 1.0;
    std::vector<std::size_t> hidden{64, 64};
    std::size_t test_size = 5000;
    FedPLParams fedpl;
    VATParams vat;
    bool eval_per_client = false;
    bool record_timing = false;
    // Overwrites every latent label with an out-of-range value before
    // training. Methods that never read labels must be unaffected.
    bool poison_hidden_labels = false;

    std::size_t sets_for_client(std::size_t c) const {
        return sets_per_client.empty() ? sets : sets_per_client.at(c);
    }
};

struct RoundMetrics {
    std::size_t round = 0;
    double test_error = 0.0;
    double surrogate_loss = 0.0;  // mean local objective over the round's steps
    double wall_ms = 0.0;
    std::vector<double> client_errors;  // per-client test sets, when enabled
};

struct AggregationEvent {
    std::size_t round = 0;
    std::vector<std::size_t> client_ids;
    std::size_t num_scalars = 0;
};

struct TrainingHooks {
    std::function<void(const AggregationEvent&)> on_aggregate;
    std::function<void(const RoundMetrics&)> on_round;
};

struct TrainingResult {
    std::vector<RoundMetrics> rounds;
    std::vector<TransitionMatrix> heads;  // FedUL only, one per client
    ModelParams final_model;

    double final_error() const { return rounds.back().test_error; }
};

// Everything generated for one seed before training starts.
struct FederatedData {
    TaskSpec task;
    std::vector<USetCollection> clients;
    std::vector<ClassPriorMatrix> known_priors;  // possibly noisy
    LabeledTestSet test;
    std::vector<LabeledTestSet> client_tests;
};

inline TaskSpec make_task(const TaskConfig& cfg, std::uint64_t seed) {
    if (cfg.kind == TaskConfig::Kind::gaussian) {
        auto rng = make_stream(seed, Stream::task);
        return gen_gaussian_task(cfg.num_classes, cfg.dim, cfg.separation, rng);
    }
    auto ds = load_idx_dataset(cfg.images_path, cfg.labels_path, cfg.num_classes);
    return TaskSpec::pools(std::move(ds.pools), uniform_prior(cfg.num_classes));
}

inline FederatedData generate_data(const TrainingConfig& cfg, std::uint64_t seed) {
    FederatedData data{make_task(cfg.task, seed), {}, {}, {}, {}};
    const std::size_t k = data.task.num_classes();

    std::vector<std::vector<double>> profiles;
    if (cfg.distribution == Distribution::noniid) {
        auto rng = make_stream(seed, Stream::allocation);
        profiles = allocate_clients_noniid(k, cfg.clients, cfg.majority_per_client, rng);
    }
    for (std::size_t c = 0; c < cfg.clients; ++c) {
        const std::size_t mc = cfg.sets_for_client(c);
        auto prior_rng = make_stream(seed, Stream::priors, c);
        std::span<const double> weights;
        if (!profiles.empty()) weights = profiles[c];
        auto priors = sample_prior_matrix(k, mc, cfg.prior_low, cfg.prior_high, prior_rng, weights);
        std::vector<std::size_t> sizes(mc, cfg.set_size);
        auto u_rng = make_stream(seed, Stream::usets, c);
        data.clients.push_back(sample_u_sets(data.task, priors, sizes, u_rng, c));
        auto noise_rng = make_stream(seed, Stream::noise, c);
        data.known_priors.push_back(perturb_priors(priors, cfg.noise, noise_rng, cfg.prior_low, cfg.prior_high));
        if (cfg.poison_hidden_labels) LabelGate::poison(data.clients.back(), -1);
    }
    auto test_rng = make_stream(seed, Stream::test_set);
    data.test = sample_test_set(data.task, data.task.test_prior(), cfg.test_size, test_rng);

    if (cfg.eval_per_client) {
        for (std::size_t c = 0; c < cfg.clients; ++c) {
            // The client's class marginal, sum_m pibar_m * Pi[m].
            const auto& u = data.clients[c];
            const auto pibar = estimate_surrogate_prior(u.set_sizes(), u.num_sets());
            PriorVector marginal{std::vector<double>(k, 0.0), PriorRole::test};
            for (std::size_t m = 0; m < u.num_sets(); ++m)
                for (std::size_t j = 0; j < k; ++j) marginal.values[j] += pibar[m] * u.priors()(m, j);
            auto rng = make_stream(seed, Stream::client_test, c);
            data.client_tests.push_back(sample_test_set(data.task, marginal, cfg.test_size, rng));
        }
    }
    return data;
}

inline std::unique_ptr<LocalObjective> make_objective(const TrainingConfig& cfg, const FederatedData& data,
                                                      std::size_t c, std::uint64_t seed) {
    const auto& u = data.clients[c];
    const auto& known = data.known_priors[c];
    const std::size_t k = data.task.num_classes();
    switch (cfg.method) {
        case Method::fedul: {
            auto surrogate = estimate_surrogate_prior(u.set_sizes(), cfg.sets);
            auto head = build_transition_matrix(data.task.test_prior(), surrogate, known, cfg.sets);
            return std::make_unique<FedULObjective>(build_surrogate_dataset(u, cfg.sets), std::move(head));
        }
        case Method::fedpl: return std::make_unique<FedPLObjective>(u, known, cfg.fedpl);
        case Method::fedllp: return std::make_unique<FedLLPObjective>(u, known);
        case Method::fedllp_vat: return std::make_unique<FedLLPObjective>(u, known, cfg.vat);
        case Method::fedavg_supervised: {
            auto rng = make_stream(seed, Stream::subsample, c);
            return supervised_fraction_objective(u, cfg.supervised_fraction, rng, k);
        }
    }
    throw PreconditionError("unknown method");
}

inline std::vector<std::size_t> model_widths(const TrainingConfig& cfg, std::size_t input_dim, std::size_t k) {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), cfg.hidden.begin(), cfg.hidden.end());
    w.push_back(k);
    return w;
}

// Runs R rounds of client updates and server aggregation for one seed. Round 0
// in the result is the untrained model.
inline TrainingResult run_training(const TrainingConfig& cfg, std::uint64_t seed, const TrainingHooks& hooks = {},
                                   const FederatedData* pregenerated = nullptr) {
    if (cfg.clients == 0) throw PreconditionError("run_training: need at least one client");
    std::optional<FederatedData> owned;
    if (!pregenerated) owned = generate_data(cfg, seed);
    const FederatedData& data = pregenerated ? *pregenerated : *owned;
    const std::size_t k = data.task.num_classes();

    auto init_rng = make_stream(seed, Stream::model_init);
    ServerState server{make_model(model_widths(cfg, data.task.input_dim(), k), init_rng), 0, cfg.global_lr, cfg.rounds};
    const LocalHyper hyper{cfg.epochs, cfg.batch_size, cfg.lr, cfg.l1_weight};

    TrainingResult result;
    std::vector<ClientState> clients;
    for (std::size_t c = 0; c < cfg.clients; ++c) {
        auto objective = make_objective(cfg, data, c, seed);
        if (const auto* head = objective->head()) result.heads.push_back(*head);
        clients.push_back(make_client(c, std::move(objective), server.global, hyper,
                                      make_stream(seed, Stream::batches, c), make_stream(seed, Stream::objective, c)));
    }

    auto evaluate = [&](RoundMetrics& m) {
        m.test_error = error_rate(server.global, data.test);
        m.client_errors.clear();
        for (const auto& t : data.client_tests) m.client_errors.push_back(error_rate(server.global, t));
    };

    {
        RoundMetrics m0;
        evaluate(m0);
        double loss = 0.0;
        std::size_t counted = 0;
        for (const auto& c : clients) {
            const std::size_t n = c.objective->num_examples();
            if (n == 0) continue;
            std::vector<std::size_t> all(n);
            std::iota(all.begin(), all.end(), std::size_t{0});
            Rng scratch = c.objective_rng;
            loss += c.objective->evaluate(server.global, all, cfg.l1_weight, scratch).loss;
            ++counted;
        }
        m0.surrogate_loss = counted ? loss / static_cast<double>(counted) : 0.0;
        if (hooks.on_round) hooks.on_round(m0);
        result.rounds.push_back(std::move(m0));
    }

    Rng participation_rng = make_stream(seed, Stream::participation);
    for (std::size_t r = 1; r <= cfg.rounds; ++r) {
        const auto start = std::chrono::steady_clock::now();
        std::vector<std::size_t> active(clients.size());
        std::iota(active.begin(), active.end(), std::size_t{0});
        if (cfg.participation < 1.0) {
            const auto take = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::ceil(cfg.participation * static_cast<double>(clients.size()))));
            std::shuffle(active.begin(), active.end(), participation_rng);
            active.resize(take);
            std::sort(active.begin(), active.end());
        }

        std::vector<ClientDelta> deltas;
        double loss_sum = 0.0;
        for (auto c : active) {
            auto& client = clients[c];
            const auto steps = client.steps_per_round();
            if (steps == 0) {
                logger().warn("round {}: client {} has no training data, skipped", r, client.id);
                continue;
            }
            auto update = client_update(client, server.global, steps, cfg.lr, r);
            loss_sum += update.mean_loss;
            deltas.push_back({client.id, std::move(update.delta)});
        }

        RoundMetrics m;
        m.round = r;
        m.surrogate_loss = deltas.empty() ? 0.0 : loss_sum / static_cast<double>(deltas.size());
        if (!deltas.empty()) {
            if (hooks.on_aggregate) {
                AggregationEvent ev{r, {}, server.global.num_scalars()};
                for (const auto& d : deltas) ev.client_ids.push_back(d.client_id);
                hooks.on_aggregate(ev);
            }
            server = server_execute(std::move(server), std::move(deltas));
        } else {
            logger().warn("round {}: no client produced an update", r);
            server.round += 1;
        }
        evaluate(m);
        if (cfg.record_timing)
            m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        if (hooks.on_round) hooks.on_round(m);
        result.rounds.push_back(std::move(m));
    }
    result.final_model = std::move(server.global);
    return result;
}

}  // namespace fedul
