#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "fedul/fedul.hpp"

using namespace fedul;

namespace {

ModelParams model(std::uint64_t seed, std::size_t d, std::size_t k, std::size_t hidden = 5) {
    auto rng = make_stream(seed, Stream::model_init);
    const std::vector<std::size_t> widths{d, hidden, k};
    return make_model(widths, rng);
}

// Single linear layer with zero weights and the given bias: a constant
// predictor with softmax(bias) as output.
ModelParams constant_model(std::size_t d, std::vector<double> bias) {
    ModelParams p;
    p.layers.push_back({Matrix(bias.size(), d), std::move(bias)});
    return p;
}

std::vector<double> logs_of(const std::vector<double>& p) {
    std::vector<double> out;
    for (double v : p) out.push_back(std::log(v));
    return out;
}

double max_param_diff(const ParamSet& a, const ParamSet& b) {
    double w = 0;
    for (std::size_t li = 0; li < a.layers.size(); ++li) {
        for (std::size_t j = 0; j < a.layers[li].weight.size(); ++j)
            w = std::max(w, std::abs(a.layers[li].weight.values()[j] - b.layers[li].weight.values()[j]));
        for (std::size_t j = 0; j < a.layers[li].bias.size(); ++j)
            w = std::max(w, std::abs(a.layers[li].bias[j] - b.layers[li].bias[j]));
    }
    return w;
}

}  // namespace

TEST(FedPL, PseudoLabelsAreDominantClass) {
    const ClassPriorMatrix p(Matrix::from_rows({{0.2, 0.5, 0.3}, {0.6, 0.2, 0.2}, {0.4, 0.2, 0.4}}));
    EXPECT_EQ(pseudo_labels_from_priors(p), (std::vector<int>{1, 0, 0}));
}

TEST(FedPL, ZeroMixWeightIsPseudoLabelCrossEntropy) {
    auto rng = make_stream(1, {1});
    const auto p = model(1, 3, 4);
    Matrix x(6, 3);
    for (double& v : x.values()) v = uniform(rng, -1, 1);
    const std::vector<int> y{0, 1, 2, 3, 1, 0};
    const auto split = split_by_confidence(p, x, y, 0.0);
    EXPECT_EQ(split.confident_labels.size(), 6u);
    FedPLParams hp;
    hp.mix_weight = 0.0;
    const auto got = fedpl_loss(p, split, hp, 1e-3, rng);
    const auto want = backward(p, Batch{x, y, 4}, nullptr, 1e-3);
    EXPECT_EQ(got.loss, want.loss);
    EXPECT_EQ(max_param_diff(got.grads, want.grads), 0.0);
}

TEST(FedPL, LambdaOneIsFixLossOnConfidentSide) {
    auto rng = make_stream(2, {2});
    const auto p = model(2, 2, 3);
    PseudoLabeledBatch b;
    b.confident_inputs = Matrix::from_rows({{0.5, -0.2}, {1.0, 0.3}});
    b.confident_labels = {2, 0};
    b.unconfident_inputs = Matrix::from_rows({{-1.0, 0.4}, {0.0, 0.0}});
    b.unconfident_labels = {1, 1};
    const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 0}, {1, 1}};
    const auto with_mix = fedpl_loss(p, b, pairs, 1.0, 0.3, 0.0);
    const auto fix = backward(p, Batch{b.confident_inputs, b.confident_labels, 3}, nullptr, 0.0);
    EXPECT_NEAR(with_mix.loss, 1.3 * fix.loss, 1e-14);
}

TEST(FedPL, SplitRespectsThreshold) {
    auto rng = make_stream(3, {3});
    const auto p = model(3, 2, 3);
    Matrix x(40, 2);
    for (double& v : x.values()) v = uniform(rng, -3, 3);
    const std::vector<int> y(40, 0);
    const auto probs = softmax(forward(p, x));
    const auto split = split_by_confidence(p, x, y, 0.5);
    std::size_t confident = 0;
    for (std::size_t i = 0; i < 40; ++i) {
        auto r = probs.row(i);
        confident += *std::max_element(r.begin(), r.end()) >= 0.5;
    }
    EXPECT_EQ(split.confident_labels.size(), confident);
    EXPECT_EQ(split.confident_labels.size() + split.unconfident_labels.size(), 40u);
}

TEST(FedPL, GradientMatchesFiniteDifferences) {
    auto rng = make_stream(4, {4});
    double worst = 0;
    for (int t = 0; t < 20; ++t) {
        const auto p = model(40 + t, 3, 3);
        PseudoLabeledBatch b;
        b.confident_inputs = Matrix(4, 3);
        b.unconfident_inputs = Matrix(3, 3);
        for (double& v : b.confident_inputs.values()) v = uniform(rng, -1, 1);
        for (double& v : b.unconfident_inputs.values()) v = uniform(rng, -1, 1);
        b.confident_labels = {0, 1, 2, 1};
        b.unconfident_labels = {2, 2, 0};
        const std::vector<std::pair<std::size_t, std::size_t>> pairs{{3, 0}, {1, 2}, {0, 1}};
        const double lam = uniform(rng, 0, 1);
        const auto lg = fedpl_loss(p, b, pairs, lam, 0.3, 1e-3);
        worst = std::max(worst, grad_check_fn(p, lg.grads,
                                              [&](const ModelParams& q) {
                                                  return fedpl_loss(q, b, pairs, lam, 0.3, 1e-3).loss;
                                              },
                                              1e-5));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(FedPL, PureSetsReproduceSupervisedTrajectory) {
    auto rng = make_stream(5, {5});
    const auto task = gen_gaussian_task(3, 2, 2.0, rng);
    const auto u = sample_u_sets(task, ClassPriorMatrix(Matrix::identity(3)), std::vector<std::size_t>(3, 30), rng);
    const auto& hidden = LabelGate::reveal(u, "test oracle");
    Matrix x(0, 2);
    std::vector<int> y;
    for (std::size_t m = 0; m < 3; ++m)
        for (std::size_t i = 0; i < 30; ++i) {
            x.append_row(u.sets()[m].row(i));
            y.push_back(hidden[m][i]);
        }
    FedPLParams hp;
    hp.tau = 0.0;
    hp.mix_weight = 0.0;
    auto pl = std::make_unique<FedPLObjective>(u, u.priors(), hp);
    EXPECT_EQ(std::vector<int>(pl->pseudo_labels().begin(), pl->pseudo_labels().end()), y);
    const auto f = model(5, 2, 3);
    const LocalHyper hyper{1, 16, 1e-2, 1e-4};
    auto a = make_client(0, std::move(pl), f, hyper, make_stream(5, Stream::batches), make_stream(5, Stream::objective));
    auto b = make_client(0, std::make_unique<SupervisedObjective>(x, y, 3), f, hyper, make_stream(5, Stream::batches),
                         make_stream(5, Stream::objective));
    ModelParams ga = f, gb = f;
    for (int r = 0; r < 5; ++r) {
        const auto da = client_update(a, ga, a.steps_per_round(), hyper.lr);
        const auto db = client_update(b, gb, b.steps_per_round(), hyper.lr);
        zip_values(ga, da.delta, [](double& w, double d) { w += d; });
        zip_values(gb, db.delta, [](double& w, double d) { w += d; });
        EXPECT_LT(max_param_diff(ga, gb), 1e-10);
    }
}

TEST(FedLLP, HandExample) {
    // K=2, target [1, 0], predicted proportions [0.75, 0.25].
    const auto p = constant_model(1, logs_of({0.75, 0.25}));
    const Matrix x(3, 1, 0.0);
    const std::vector<std::size_t> bags{0, 0, 0};
    const auto lg = fedllp_loss(p, x, bags, Matrix::from_rows({{1.0, 0.0}}), 0.0);
    EXPECT_NEAR(lg.loss, -std::log(0.75), 1e-14);
}

TEST(FedLLP, ConstantMatchingPredictorAttainsEntropy) {
    const std::vector<double> target{0.2, 0.5, 0.3};
    double entropy = 0;
    for (double v : target) entropy -= v * std::log(v);
    const Matrix x(4, 2, 1.0);
    const std::vector<std::size_t> bags(4, 0);
    Matrix props(1, 3);
    std::copy(target.begin(), target.end(), props.row(0).begin());
    EXPECT_NEAR(fedllp_loss(constant_model(2, logs_of(target)), x, bags, props, 0.0).loss, entropy, 1e-14);
    // Any other constant predictor does worse (Gibbs' inequality).
    auto rng = make_stream(6, {6});
    for (int t = 0; t < 200; ++t) {
        const auto other = random_simplex_point(rng, 3);
        EXPECT_GE(fedllp_loss(constant_model(2, logs_of(other)), x, bags, props, 0.0).loss, entropy - 1e-14);
    }
}

TEST(FedLLP, SumsOverBagsInBatch) {
    const auto p = constant_model(1, logs_of({0.5, 0.5}));
    const Matrix x(4, 1, 0.0);
    const auto props = Matrix::from_rows({{0.9, 0.1}, {0.3, 0.7}, {0.5, 0.5}});
    const std::vector<std::size_t> bags{0, 1, 1, 0};
    EXPECT_NEAR(fedllp_loss(p, x, bags, props, 0.0).loss, 2 * std::log(2.0), 1e-14);
}

TEST(FedLLP, GradientMatchesFiniteDifferences) {
    auto rng = make_stream(7, {7});
    double worst = 0;
    for (int t = 0; t < 20; ++t) {
        const auto p = model(70 + t, 3, 4);
        Matrix x(7, 3);
        for (double& v : x.values()) v = uniform(rng, -1, 1);
        std::vector<std::size_t> bags(7);
        for (auto& b : bags) b = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
        Matrix props(3, 4);
        for (std::size_t b = 0; b < 3; ++b) {
            const auto v = random_simplex_point(rng, 4);
            std::copy(v.begin(), v.end(), props.row(b).begin());
        }
        const auto lg = fedllp_loss(p, x, bags, props, 1e-3);
        worst = std::max(worst, grad_check_fn(p, lg.grads,
                                              [&](const ModelParams& q) {
                                                  return fedllp_loss(q, x, bags, props, 1e-3).loss;
                                              },
                                              1e-5));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(VAT, ZeroRadiusGivesZeroLoss) {
    auto rng = make_stream(8, {8});
    const auto p = model(8, 3, 3);
    Matrix x(5, 3);
    for (double& v : x.values()) v = uniform(rng, -1, 1);
    VATParams hp;
    hp.mu = 0.0;
    EXPECT_EQ(vat_consistency(p, x, hp, rng).loss, 0.0);
}

TEST(VAT, ConstantModelGivesZeroLoss) {
    auto rng = make_stream(9, {9});
    const auto p = constant_model(3, {0.3, -1.0, 2.0});
    Matrix x(5, 3);
    for (double& v : x.values()) v = uniform(rng, -1, 1);
    VATParams hp;
    hp.mu = 6.0;
    EXPECT_NEAR(vat_consistency(p, x, hp, rng).loss, 0.0, 1e-15);
}

TEST(VAT, LossIsNonNegative) {
    auto rng = make_stream(10, {10});
    for (int t = 0; t < 200; ++t) {
        const auto p = model(100 + t, 2, 3);
        Matrix x(4, 2);
        for (double& v : x.values()) v = uniform(rng, -2, 2);
        VATParams hp;
        hp.mu = uniform(rng, 0, 6);
        EXPECT_GE(vat_consistency(p, x, hp, rng).loss, 0.0);
    }
}

TEST(VAT, DirectionsAreUnitAndDegenerateRowsRandomized) {
    auto rng = make_stream(11, {11});
    Matrix d = Matrix::from_rows({{3, 4}, {0, 0}});
    normalize_rows_or_randomize(d, rng);
    EXPECT_NEAR(d(0, 0), 0.6, 1e-15);
    EXPECT_NEAR(d(0, 1), 0.8, 1e-15);
    EXPECT_NEAR(d(1, 0) * d(1, 0) + d(1, 1) * d(1, 1), 1.0, 1e-14);
}

TEST(VAT, AdversarialDirectionBeatsRandom) {
    // The power-iteration direction should increase the KL at least as much
    // as a typical random direction of the same length.
    auto rng = make_stream(12, {12});
    const auto p = model(12, 2, 3, 16);
    Matrix x(64, 2);
    for (double& v : x.values()) v = uniform(rng, -2, 2);
    const auto target = softmax(forward(p, x));
    const auto adv = vat_direction(p, x, target, 1e-6, 1, rng);
    Matrix rnd(64, 2);
    std::normal_distribution<double> normal(0, 1);
    for (double& v : rnd.values()) v = normal(rng);
    normalize_rows_or_randomize(rnd, rng);
    auto kl_at = [&](const Matrix& d) {
        Matrix xp = x;
        for (std::size_t j = 0; j < xp.size(); ++j) xp.values()[j] += 0.1 * d.values()[j];
        return consistency_loss(p, xp, target).loss;
    };
    EXPECT_GT(kl_at(adv), kl_at(rnd));
}

TEST(VAT, ConsistencyGradientMatchesFiniteDifferences) {
    auto rng = make_stream(13, {13});
    double worst = 0;
    for (int t = 0; t < 10; ++t) {
        const auto p = model(130 + t, 2, 3);
        Matrix x(4, 2), target(4, 3);
        for (double& v : x.values()) v = uniform(rng, -1, 1);
        for (std::size_t i = 0; i < 4; ++i) {
            const auto v = random_simplex_point(rng, 3);
            std::copy(v.begin(), v.end(), target.row(i).begin());
        }
        const auto lg = consistency_loss(p, x, target);
        worst = std::max(worst, grad_check_fn(p, lg.grads,
                                              [&](const ModelParams& q) { return consistency_loss(q, x, target).loss; },
                                              1e-5));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(SupervisedFraction, FullAndPartial) {
    auto rng = make_stream(14, {14});
    const auto task = gen_gaussian_task(3, 2, 3.0, rng);
    const auto u = sample_u_sets(task, sample_prior_matrix(3, 3, 0.1, 0.9, rng), std::vector<std::size_t>(3, 20), rng);
    auto all = supervised_fraction_objective(u, 1.0, rng, 3);
    EXPECT_EQ(all->num_examples(), 60u);
    auto tenth = supervised_fraction_objective(u, 0.1, rng, 3);
    EXPECT_EQ(tenth->num_examples(), 6u);
    auto none = supervised_fraction_objective(u, 0.01, rng, 3);
    EXPECT_EQ(none->num_examples(), 0u);
    EXPECT_THROW(supervised_fraction_objective(u, 0.0, rng, 3), PreconditionError);
    EXPECT_THROW(supervised_fraction_objective(u, 1.5, rng, 3), PreconditionError);
}

TEST(SupervisedFraction, ClientWithoutLabelsIsSkipped) {
    TrainingConfig c;
    c.task = {TaskConfig::Kind::gaussian, 3, 2, 3.0, "", ""};
    c.clients = 2;
    c.sets = 3;
    c.set_size = 10;
    c.rounds = 2;
    c.hidden = {4};
    c.test_size = 50;
    c.method = Method::fedavg_supervised;
    c.supervised_fraction = 0.02;
    const auto r = run_training(c, 1);
    EXPECT_EQ(r.rounds.size(), 3u);
    EXPECT_EQ(r.rounds[0].test_error, r.rounds[2].test_error);
}

TEST(SupervisedFraction, PoisonedLabelsAreRejected) {
    TrainingConfig c;
    c.task = {TaskConfig::Kind::gaussian, 3, 2, 3.0, "", ""};
    c.clients = 1;
    c.sets = 3;
    c.set_size = 10;
    c.rounds = 1;
    c.hidden = {4};
    c.test_size = 50;
    c.method = Method::fedavg_supervised;
    c.poison_hidden_labels = true;
    EXPECT_THROW(run_training(c, 1), PreconditionError);
}
