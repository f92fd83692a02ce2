#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedul/datagen.hpp"
#include "fedul/error.hpp"
#include "fedul/nn.hpp"
#include "fedul/priors.hpp"
#include "fedul/random.hpp"
#include "fedul/transition.hpp"

namespace fedul {

// What a client minimizes locally. Swapping the objective is the only thing
// that distinguishes FedUL, supervised FedAvg and the baselines.
class LocalObjective {
public:
    virtual ~LocalObjective() = default;
    virtual std::string_view name() const = 0;
    virtual std::size_t num_examples() const = 0;
    // Loss (including the L1 term) and gradient on the given example indices.
    virtual LossAndGrad evaluate(const ModelParams& params, std::span<const std::size_t> batch, double l1_weight,
                                 Rng& rng) const = 0;
    virtual const TransitionMatrix* head() const { return nullptr; }
};

// Surrogate-set classification through the fixed transition head.
class FedULObjective final : public LocalObjective {
public:
    FedULObjective(SurrogateDataset data, TransitionMatrix head) : data_(std::move(data)), head_(std::move(head)) {
        if (head_.num_sets() != data_.num_sets) throw ShapeError("FedULObjective: head rows != M");
    }

    std::string_view name() const override { return "fedul"; }
    std::size_t num_examples() const override { return data_.size(); }
    const TransitionMatrix* head() const override { return &head_; }
    const SurrogateDataset& data() const noexcept { return data_; }

    LossAndGrad evaluate(const ModelParams& params, std::span<const std::size_t> batch, double l1_weight,
                         Rng&) const override {
        Batch b{data_.inputs.select_rows(batch), {}, data_.num_sets};
        b.labels.reserve(batch.size());
        for (auto i : batch) b.labels.push_back(data_.labels[i]);
        return backward(params, b, &head_, l1_weight);
    }

private:
    SurrogateDataset data_;
    TransitionMatrix head_;
};

// Plain softmax cross-entropy on labeled examples.
class SupervisedObjective final : public LocalObjective {
public:
    SupervisedObjective(Matrix inputs, std::vector<int> labels, std::size_t num_classes)
        : inputs_(std::move(inputs)), labels_(std::move(labels)), num_classes_(num_classes) {
        if (inputs_.rows() != labels_.size()) throw ShapeError("SupervisedObjective: label count mismatch");
        for (int y : labels_)
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes_)
                throw PreconditionError("SupervisedObjective: label " + std::to_string(y) + " out of range");
    }

    std::string_view name() const override { return "supervised"; }
    std::size_t num_examples() const override { return labels_.size(); }

    LossAndGrad evaluate(const ModelParams& params, std::span<const std::size_t> batch, double l1_weight,
                         Rng&) const override {
        Batch b{inputs_.select_rows(batch), {}, num_classes_};
        b.labels.reserve(batch.size());
        for (auto i : batch) b.labels.push_back(labels_[i]);
        return backward(params, b, nullptr, l1_weight);
    }

private:
    Matrix inputs_;
    std::vector<int> labels_;
    std::size_t num_classes_;
};

struct LocalHyper {
    std::size_t epochs = 1;
    std::size_t batch_size = 128;
    double lr = 1e-4;
    double l1_weight = 0.0;
};

// Epoch-ordered minibatch indices; reshuffles at every epoch boundary.
class BatchStream {
public:
    BatchStream() = default;
    BatchStream(std::size_t n, Rng rng) : order_(n), cursor_(n), rng_(std::move(rng)) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
    }

    std::span<const std::size_t> next(std::size_t batch_size) {
        if (order_.empty()) throw PreconditionError("BatchStream: no examples");
        if (cursor_ >= order_.size()) {
            std::shuffle(order_.begin(), order_.end(), rng_);
            cursor_ = 0;
        }
        const std::size_t take = std::min(batch_size, order_.size() - cursor_);
        std::span<const std::size_t> out(order_.data() + cursor_, take);
        cursor_ += take;
        return out;
    }

    friend bool operator==(const BatchStream&, const BatchStream&) = default;

private:
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    Rng rng_;
};

struct ClientState {
    std::size_t id = 0;
    std::unique_ptr<LocalObjective> objective;
    ModelParams local;
    AdamState adam;
    LocalHyper hyper;
    BatchStream batches;
    Rng objective_rng;

    // L = E * ceil(n / B)
    std::size_t steps_per_round() const {
        const std::size_t n = objective ? objective->num_examples() : 0;
        if (n == 0) return 0;
        return hyper.epochs * ((n + hyper.batch_size - 1) / hyper.batch_size);
    }
};

inline ClientState make_client(std::size_t id, std::unique_ptr<LocalObjective> objective, const ModelParams& shape,
                               const LocalHyper& hyper, Rng batch_rng, Rng objective_rng) {
    if (hyper.batch_size == 0) throw PreconditionError("make_client: batch size must be positive");
    ClientState c;
    c.id = id;
    const std::size_t n = objective->num_examples();
    c.objective = std::move(objective);
    c.local = shape;
    c.adam = AdamState(shape);
    c.hyper = hyper;
    c.batches = BatchStream(n, std::move(batch_rng));
    c.objective_rng = std::move(objective_rng);
    return c;
}

// FedUL client setup: surrogate dataset, surrogate prior from set sizes and
// the transition head. `known_priors` is what the client believes the set
// priors are (possibly noisy); it defaults to the sets' true priors.
inline ClientState client_init(const USetCollection& u, const PriorVector& test_prior, std::size_t total_sets,
                               const ModelParams& shape, const LocalHyper& hyper, Rng batch_rng, Rng objective_rng,
                               const ClassPriorMatrix* known_priors = nullptr) {
    const auto& priors = known_priors ? *known_priors : u.priors();
    auto data = build_surrogate_dataset(u, total_sets);
    const auto sizes = u.set_sizes();
    const auto surrogate = estimate_surrogate_prior(sizes, total_sets);
    auto head = build_transition_matrix(test_prior, surrogate, priors, total_sets);
    return make_client(u.client_id(), std::make_unique<FedULObjective>(std::move(data), std::move(head)), shape, hyper,
                       std::move(batch_rng), std::move(objective_rng));
}

struct ClientUpdate {
    ModelDelta delta;
    double mean_loss = 0.0;
};

// f_c <- f, then `steps` Adam minibatch steps on the local objective.
// Returns f_c - f; the global model is not modified.
inline ClientUpdate client_update(ClientState& state, const ModelParams& global, std::size_t steps, double lr,
                                  std::size_t round = 0) {
    if (steps == 0) throw PreconditionError("client_update: need at least one local step");
    if (!state.objective || state.objective->num_examples() == 0)
        throw PreconditionError("client_update: client has no training examples");
    if (!global.same_shape(state.local)) throw ShapeError("client_update: architecture mismatch");
    state.local = global;
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
        const auto batch = state.batches.next(state.hyper.batch_size);
        auto lg = state.objective->evaluate(state.local, batch, state.hyper.l1_weight, state.objective_rng);
        if (!std::isfinite(lg.loss) || !lg.grads.all_finite())
            throw DivergenceError("client " + std::to_string(state.id) + " produced a non-finite loss", round, step);
        adam_step(state.local, lg.grads, state.adam, lr);
        if (!state.local.all_finite())
            throw DivergenceError("client " + std::to_string(state.id) + " parameters became non-finite", round, step);
        loss_sum += lg.loss;
    }
    return {difference(state.local, global), loss_sum / static_cast<double>(steps)};
}

struct ServerState {
    ModelParams global;
    std::size_t round = 0;
    double global_lr = 1.0;
    std::size_t max_rounds = 0;
};

struct ClientDelta {
    std::size_t client_id = 0;
    ModelDelta delta;
};

// f <- f + (global_lr / C) * sum_c delta_c, summed in ascending client-id
// order so the result does not depend on arrival order.
inline ServerState server_execute(ServerState server, std::vector<ClientDelta> deltas) {
    if (deltas.empty()) throw PreconditionError("server_execute: no client updates");
    if (server.max_rounds != 0 && server.round >= server.max_rounds)
        throw PreconditionError("server_execute: round budget exhausted");
    std::stable_sort(deltas.begin(), deltas.end(),
                     [](const ClientDelta& a, const ClientDelta& b) { return a.client_id < b.client_id; });
    for (std::size_t i = 1; i < deltas.size(); ++i)
        if (deltas[i].client_id == deltas[i - 1].client_id)
            throw PreconditionError("server_execute: duplicate client " + std::to_string(deltas[i].client_id));
    ModelDelta sum(server.global);
    for (const auto& d : deltas) {
        if (!server.global.same_shape(d.delta)) throw ShapeError("server_execute: delta shape mismatch");
        zip_values(sum, d.delta, [](double& acc, double v) { acc += v; });
    }
    const double scale = server.global_lr / static_cast<double>(deltas.size());
    zip_values(server.global, sum, [scale](double& w, double v) { w += scale * v; });
    server.round += 1;
    return server;
}

// argmax over class scores, lowest index on ties.
inline std::vector<int> predict(const ModelParams& params, const Matrix& inputs) {
    const auto logits = forward(params, inputs);
    std::vector<int> out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto r = logits.row(i);
        out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
}

inline double error_rate(const ModelParams& params, const LabeledTestSet& test) {
    if (test.size() == 0) throw PreconditionError("error_rate: empty test set");
    const auto pred = predict(params, test.inputs);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != test.labels[i];
    return static_cast<double>(wrong) / static_cast<double>(test.size());
}

}  // namespace fedul
