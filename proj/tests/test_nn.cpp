#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fedul/fedul.hpp"

using namespace fedul;

namespace {

ModelParams linear_model(const Matrix& w, std::vector<double> b) {
    ModelParams p;
    p.layers.push_back({w, std::move(b)});
    return p;
}

// Straight-line recomputation of a two-layer relu network, used as an
// independent check on forward().
Matrix hand_forward(const ModelParams& p, const Matrix& x) {
    const auto& l0 = p.layers[0];
    const auto& l1 = p.layers[1];
    Matrix out(x.rows(), l1.weight.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        std::vector<double> h(l0.weight.rows());
        for (std::size_t o = 0; o < h.size(); ++o) {
            double a = l0.bias[o];
            for (std::size_t j = 0; j < x.cols(); ++j) a += l0.weight(o, j) * x(i, j);
            h[o] = a > 0 ? a : 0;
        }
        for (std::size_t o = 0; o < out.cols(); ++o) {
            double a = l1.bias[o];
            for (std::size_t j = 0; j < h.size(); ++j) a += l1.weight(o, j) * h[j];
            out(i, o) = a;
        }
    }
    return out;
}

}  // namespace

TEST(Forward, ZeroNetGivesZeroLogits) {
    const auto p = linear_model(Matrix(3, 4), {0, 0, 0});
    const auto z = forward(p, Matrix::from_rows({{1, -2, 3, 4}, {5, 6, 7, 8}}));
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityLayer) {
    const auto p = linear_model(Matrix::identity(3), {0, 0, 0});
    const auto z = forward(p, Matrix::from_rows({{1, 0, 0}}));
    EXPECT_EQ(z, Matrix::from_rows({{1, 0, 0}}));
}

TEST(Forward, MatchesHandRolledTwoLayerNet) {
    auto rng = make_stream(7, {1});
    const std::vector<std::size_t> widths{3, 5, 4};
    auto p = make_model(widths, rng);
    for (auto& l : p.layers)
        for (double& b : l.bias) b = uniform(rng, -1, 1);
    const auto x = Matrix::from_rows({{0.3, -1.2, 2.0}, {-0.7, 0.1, 0.5}});
    const auto got = forward(p, x);
    const auto want = hand_forward(p, x);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.values()[i], want.values()[i], 1e-12);
}

TEST(Forward, ShapeMismatchThrows) {
    const auto p = linear_model(Matrix(2, 3), {0, 0});
    EXPECT_THROW(forward(p, Matrix(1, 4)), ShapeError);
}

TEST(Softmax, Examples) {
    auto p = softmax(Matrix::from_rows({{0, 0}, {1000, 0}, {std::log(1.0), std::log(3.0)}}));
    EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(p(0, 1), 0.5);
    EXPECT_DOUBLE_EQ(p(1, 0), 1.0);
    EXPECT_GE(p(1, 1), 0.0);
    EXPECT_LT(p(1, 1), 1e-300);
    EXPECT_NEAR(p(2, 0), 0.25, 1e-15);
    EXPECT_NEAR(p(2, 1), 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    auto rng = make_stream(3, {2});
    for (int t = 0; t < 200; ++t) {
        Matrix z(1, 5);
        for (double& v : z.values()) v = uniform(rng, -50, 50);
        Matrix shifted = z;
        const double c = uniform(rng, -100, 100);
        for (double& v : shifted.values()) v += c;
        const auto p = softmax(z);
        const auto q = softmax(shifted);
        double s = 0;
        for (std::size_t k = 0; k < 5; ++k) {
            s += p(0, k);
            EXPECT_NEAR(p(0, k), q(0, k), 1e-12);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(CrossEntropy, Examples) {
    const std::vector<int> y1{1};
    EXPECT_EQ(ce_loss(Matrix::from_rows({{0, 1, 0}}), y1), 0.0);
    const std::vector<int> y0{0, 3};
    EXPECT_NEAR(ce_loss(Matrix(2, 4, 0.25), y0), std::log(4.0), 1e-15);
    EXPECT_NEAR(ce_loss(Matrix::from_rows({{0.25, 0.75}}), y1), -std::log(0.75), 1e-15);
}

TEST(CrossEntropy, ZeroProbabilityIsFloored) {
    const std::vector<int> y{0};
    EXPECT_NEAR(ce_loss(Matrix::from_rows({{0.0, 1.0}}), y), -std::log(1e-12), 1e-9);
}

TEST(Backward, OneHotCorrectGivesZeroOutputGradient) {
    // Logits so large the softmax is exactly one-hot in double precision.
    const auto p = linear_model(Matrix::from_rows({{1000, 0}, {0, 0}}), {0, 0});
    const Batch b{Matrix::from_rows({{1, 0}}), {0}, 2};
    const auto lg = backward(p, b, nullptr, 0.0);
    EXPECT_EQ(lg.loss, 0.0);
    for (double g : lg.grads.layers.back().weight.values()) EXPECT_EQ(g, 0.0);
    for (double g : lg.grads.layers.back().bias) EXPECT_EQ(g, 0.0);
}

TEST(Backward, IdentityHeadMatchesHeadless) {
    auto rng = make_stream(11, {3});
    for (int t = 0; t < 20; ++t) {
        const std::size_t k = 2 + t % 4;
        const std::vector<std::size_t> widths{3, 6, k};
        const auto p = make_model(widths, rng);
        std::vector<double> pi(k);
        double s = 0;
        for (double& v : pi) s += v = uniform(rng, 0.1, 1);
        for (double& v : pi) v /= s;
        const auto head = build_transition_matrix(PriorVector{pi, PriorRole::test}, PriorVector{pi, PriorRole::surrogate},
                                                  ClassPriorMatrix(Matrix::identity(k)), k);
        Batch b{Matrix(5, 3), std::vector<int>(5), k};
        for (double& x : b.inputs.values()) x = uniform(rng, -2, 2);
        for (std::size_t i = 0; i < 5; ++i) b.labels[i] = static_cast<int>(i % k);
        const auto with = backward(p, b, &head, 1e-3);
        const auto without = backward(p, b, nullptr, 1e-3);
        EXPECT_NEAR(with.loss, without.loss, 1e-10);
        for (std::size_t li = 0; li < p.layers.size(); ++li) {
            for (std::size_t j = 0; j < with.grads.layers[li].weight.size(); ++j)
                EXPECT_NEAR(with.grads.layers[li].weight.values()[j], without.grads.layers[li].weight.values()[j], 1e-10);
            for (std::size_t j = 0; j < with.grads.layers[li].bias.size(); ++j)
                EXPECT_NEAR(with.grads.layers[li].bias[j], without.grads.layers[li].bias[j], 1e-10);
        }
    }
}

TEST(Backward, PaddedLabelIsInvariantViolation) {
    auto rng = make_stream(5, {4});
    const auto priors = ClassPriorMatrix(Matrix::from_rows({{0.8, 0.2}, {0.3, 0.7}}));
    const auto head = build_transition_matrix(uniform_prior(2), PriorVector{{0.5, 0.5, 0.0}, PriorRole::surrogate},
                                              priors, 3);
    const std::vector<std::size_t> widths{2, 3, 2};
    const auto p = make_model(widths, rng);
    const Batch b{Matrix(1, 2, 0.5), {2}, 3};
    EXPECT_THROW(backward(p, b, &head, 0.0), InvariantError);
}

TEST(GradCheck, RandomNetworksPassFiniteDifferences) {
    auto rng = make_stream(2024, {5});
    double worst = 0;
    for (int t = 0; t < 60; ++t) {
        auto gc = random_grad_case(rng, t % 2 == 0);
        worst = std::max(worst, grad_check(gc.params, gc.batch, gc.head ? &*gc.head : nullptr, gc.l1, 1e-5));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(GradCheck, LinearModelIsTight) {
    auto rng = make_stream(9, {6});
    const std::vector<std::size_t> widths{4, 3};
    const auto p = make_model(widths, rng);
    Batch b{Matrix(3, 4), {0, 1, 2}, 3};
    for (double& x : b.inputs.values()) x = uniform(rng, -1, 1);
    EXPECT_LT(grad_check(p, b, nullptr, 0.0, 1e-5), 1e-6);
}

TEST(GradCheck, RejectsBadStepAndEmptyModel) {
    auto rng = make_stream(9, {7});
    const std::vector<std::size_t> widths{2, 2};
    const auto p = make_model(widths, rng);
    const Batch b{Matrix(1, 2), {0}, 2};
    EXPECT_THROW(grad_check(p, b, nullptr, 0.0, 1e-2), PreconditionError);
    EXPECT_THROW(grad_check(ModelParams{}, b, nullptr, 0.0, 1e-5), PreconditionError);
    const std::vector<std::size_t> zero_hidden{2, 0, 2};
    EXPECT_THROW(make_model(zero_hidden, rng), PreconditionError);
}

TEST(Adam, FirstStepMovesEachCoordinateByLr) {
    // With bias correction, m_hat = g and v_hat = g^2 on step one, so every
    // coordinate moves by lr * g / (|g| + eps).
    auto p = linear_model(Matrix::from_rows({{1.0, -2.0}}), {0.5});
    GradientSet g(p);
    g.layers[0].weight(0, 0) = 3.0;
    g.layers[0].weight(0, 1) = -1e-3;
    g.layers[0].bias[0] = 0.0;
    AdamState st(p);
    adam_step(p, g, st, 0.1);
    EXPECT_NEAR(p.layers[0].weight(0, 0), 1.0 - 0.1 * 3.0 / (3.0 + 1e-8), 1e-15);
    EXPECT_NEAR(p.layers[0].weight(0, 1), -2.0 + 0.1 * 1e-3 / (1e-3 + 1e-8), 1e-15);
    EXPECT_EQ(p.layers[0].bias[0], 0.5);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, TwoStepRecurrence) {
    auto p = linear_model(Matrix::from_rows({{0.0}}), {0.0});
    AdamState st(p);
    const double g1 = 2.0, g2 = -0.5, lr = 0.01;
    GradientSet g(p);
    g.layers[0].weight(0, 0) = g1;
    adam_step(p, g, st, lr);
    g.layers[0].weight(0, 0) = g2;
    adam_step(p, g, st, lr);
    const double m1 = 0.1 * g1, v1 = 0.001 * g1 * g1;
    const double m2 = 0.9 * m1 + 0.1 * g2, v2 = 0.999 * v1 + 0.001 * g2 * g2;
    const double w1 = -lr * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
    const double w2 = w1 - lr * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
    EXPECT_NEAR(p.layers[0].weight(0, 0), w2, 1e-15);
}

TEST(Adam, ZeroGradientLeavesParamsAndDecaysMoments) {
    auto p = linear_model(Matrix::from_rows({{0.3, 0.4}}), {0.1});
    const auto before = p;
    AdamState st(p);
    st.first_moment.layers[0].weight(0, 0) = 1.0;
    st.second_moment.layers[0].weight(0, 0) = 0.0;
    st.step = 3;
    GradientSet zero(p);
    auto p2 = p;
    AdamState st2(p);
    adam_step(p2, zero, st2, 0.1);
    EXPECT_EQ(p2, before);
    adam_step(p, zero, st, 0.1);
    EXPECT_DOUBLE_EQ(st.first_moment.layers[0].weight(0, 0), 0.9);
}

TEST(Adam, NonFiniteGradientThrows) {
    auto p = linear_model(Matrix::from_rows({{0.3}}), {0.1});
    AdamState st(p);
    GradientSet g(p);
    g.layers[0].weight(0, 0) = std::nan("");
    EXPECT_THROW(adam_step(p, g, st, 0.1), NonFiniteError);
}

TEST(Adam, Deterministic) {
    auto rng = make_stream(1, {8});
    auto gc = random_grad_case(rng, true);
    const auto lg = backward(gc.params, gc.batch, &*gc.head, gc.l1);
    auto a = gc.params, b = gc.params;
    AdamState sa(a), sb(b);
    for (int i = 0; i < 3; ++i) {
        adam_step(a, lg.grads, sa, 1e-3);
        adam_step(b, lg.grads, sb, 1e-3);
    }
    EXPECT_EQ(a, b);
    EXPECT_EQ(sa.first_moment, sb.first_moment);
}

TEST(L1, PenalizesWeightsOnly) {
    auto p = linear_model(Matrix::from_rows({{0.5, -0.25}}), {3.0});
    GradientSet g(p);
    const double pen = add_l1_penalty(p, 0.1, g);
    EXPECT_DOUBLE_EQ(pen, 0.075);
    EXPECT_DOUBLE_EQ(g.layers[0].weight(0, 0), 0.1);
    EXPECT_DOUBLE_EQ(g.layers[0].weight(0, 1), -0.1);
    EXPECT_EQ(g.layers[0].bias[0], 0.0);
}

TEST(Init, GlorotBoundsAndZeroBias) {
    auto rng = make_stream(4, {9});
    const std::vector<std::size_t> widths{10, 30, 5};
    const auto p = make_model(widths, rng);
    p.validate();
    for (std::size_t li = 0; li < 2; ++li) {
        const double bound = std::sqrt(6.0 / static_cast<double>(widths[li] + widths[li + 1]));
        for (double w : p.layers[li].weight.values()) EXPECT_LE(std::abs(w), bound);
        for (double b : p.layers[li].bias) EXPECT_EQ(b, 0.0);
    }
}
