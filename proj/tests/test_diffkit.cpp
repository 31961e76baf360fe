#include <gtest/gtest.h>

#include <cmath>

#include "undercali/checkpoint.hpp"
#include "undercali/diffkit.hpp"
#include "undercali/gradcheck_suite.hpp"

using namespace undercali;

namespace {

// Straight-line MLP forward for a single row, written without Eigen
// expressions.
std::vector<double> naive_forward(const Mlp& mlp, std::vector<double> x) {
    const auto& layers = mlp.layers();
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& W = layers[k].weight.value;
        const auto& b = layers[k].bias.value;
        std::vector<double> y(static_cast<std::size_t>(W.rows()));
        for (Eigen::Index r = 0; r < W.rows(); ++r) {
            double acc = b(r, 0);
            for (Eigen::Index c = 0; c < W.cols(); ++c) acc += W(r, c) * x[static_cast<std::size_t>(c)];
            if (layers[k].act == Activation::tanh) acc = std::tanh(acc);
            if (layers[k].act == Activation::relu) acc = acc > 0.0 ? acc : 0.0;
            y[static_cast<std::size_t>(r)] = acc;
        }
        x = std::move(y);
    }
    return x;
}

}  // namespace

TEST(Mlp, ZeroWeightsGiveZeroOutput) {
    Rng rng(1);
    Mlp mlp({3, 5, 2}, Activation::tanh, rng);
    for (Param* p : mlp.params()) p->value.setZero();
    EXPECT_EQ(mlp.forward(random_matrix(4, 3, rng)), Matrix::Zero(4, 2));
}

TEST(Mlp, IdentityLinearLayer) {
    Rng rng(1);
    Mlp mlp({3, 3}, Activation::tanh, rng);
    mlp.params()[0]->value = Matrix::Identity(3, 3);
    const Matrix x = random_matrix(5, 3, rng);
    EXPECT_EQ(mlp.forward(x), x);
}

TEST(Mlp, MatchesNaiveOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Mlp mlp({4, 6, 3}, trial % 2 ? Activation::tanh : Activation::relu, rng);
        randomize(mlp.params(), rng, 0.7);
        const Matrix x = random_matrix(7, 4, rng);
        const Matrix y = mlp.forward(x);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            std::vector<double> row(x.cols());
            for (Eigen::Index c = 0; c < x.cols(); ++c) row[static_cast<std::size_t>(c)] = x(r, c);
            const auto ref = naive_forward(mlp, row);
            for (Eigen::Index c = 0; c < y.cols(); ++c) EXPECT_NEAR(y(r, c), ref[static_cast<std::size_t>(c)], 1e-12);
        }
    }
}

TEST(Mlp, GlorotInitRange) {
    Rng rng(3);
    Mlp mlp({10, 30, 5}, Activation::tanh, rng);
    const double lim0 = std::sqrt(6.0 / 40.0);
    EXPECT_LE(mlp.layers()[0].weight.value.cwiseAbs().maxCoeff(), lim0);
    EXPECT_EQ(mlp.layers()[0].bias.value, Matrix::Zero(30, 1));
    Rng again(3);
    Mlp twin({10, 30, 5}, Activation::tanh, again);
    EXPECT_EQ(checksum(mlp.params()), checksum(twin.params()));
}

TEST(Mlp, LinearLayerClosedFormGradient) {
    Rng rng(4);
    Mlp mlp({3, 2}, Activation::tanh, rng);
    const Matrix x = random_matrix(1, 3, rng);
    const Matrix g = random_matrix(1, 2, rng);
    MlpCache cache;
    mlp.forward(x, &cache);
    const Matrix dx = mlp.backward(cache, g);
    EXPECT_TRUE(mlp.layers()[0].weight.grad.isApprox(g.transpose() * x, 1e-14));
    EXPECT_TRUE(mlp.layers()[0].bias.grad.isApprox(g.transpose(), 1e-14));
    EXPECT_TRUE(dx.isApprox(g * mlp.layers()[0].weight.value, 1e-14));
}

TEST(Mlp, ZeroUpstreamAccumulatesNothing) {
    Rng rng(5);
    Mlp mlp({3, 4, 2}, Activation::tanh, rng);
    MlpCache cache;
    mlp.forward(random_matrix(3, 3, rng), &cache);
    mlp.backward(cache, Matrix::Zero(3, 2));
    for (const Param* p : mlp.params()) EXPECT_EQ(p->grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Mlp, BackwardWithoutCacheIsUsageError) {
    Rng rng(5);
    Mlp mlp({3, 2}, Activation::tanh, rng);
    EXPECT_THROW(mlp.backward(MlpCache{}, Matrix::Zero(1, 2)), UsageError);
}

TEST(Mlp, ForwardIsPureAndBackwardTouchesOnlyGrads) {
    Rng rng(6);
    Mlp mlp({4, 5, 2}, Activation::tanh, rng);
    const Matrix x = random_matrix(3, 4, rng);
    const auto before = checksum(mlp.params());
    const Matrix y1 = mlp.forward(x);
    MlpCache cache;
    const Matrix y2 = mlp.forward(x, &cache);
    mlp.backward(cache, Matrix::Ones(3, 2));
    EXPECT_EQ(y1, y2);
    EXPECT_EQ(checksum(mlp.params()), before);
}

TEST(Mlp, GradCheckAcrossActivations) {
    for (Activation act : {Activation::tanh, Activation::linear}) {
        Rng rng(8);
        auto mlp = std::make_shared<Mlp>(std::vector<Eigen::Index>{3, 5, 4, 2}, act, rng);
        const Matrix x = random_matrix(4, 3, rng);
        const Matrix w = random_matrix(4, 2, rng);
        const auto rep = grad_check([&] { return mlp->forward(x).cwiseProduct(w).sum(); },
                                    [&] {
                                        MlpCache c;
                                        mlp->forward(x, &c);
                                        mlp->backward(c, w);
                                    },
                                    mlp->params());
        EXPECT_LT(rep.max_rel_error, 1e-5) << rep.worst_param;
        EXPECT_EQ(rep.n_coords, 3u * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
    }
}

TEST(GradCheck, DetectsWrongGradient) {
    Param p("p", Matrix::Constant(2, 1, 0.5));
    ParamRefs ps{&p};
    const auto rep = grad_check([&] { return p.value.squaredNorm(); },
                                [&] { p.grad += 3.0 * p.value; }, ps);  // true factor is 2
    EXPECT_GT(rep.max_rel_error, 0.3);
    EXPECT_EQ(rep.worst_param, "p");
}

TEST(Adam, SingleStepFromZeroMoments) {
    // m = (1-b1) g, v = (1-b2) g^2; after bias correction m_hat = g,
    // v_hat = g^2, so the step is -lr * g / (|g| + eps).
    const AdamConfig cfg{.lr = 0.01};
    for (double g : {0.3, -2.0, 1e-3}) {
        Param p("p", Matrix::Constant(1, 1, 1.0));
        p.grad(0, 0) = g;
        adam_step({&p}, cfg);
        const double expected = 1.0 - cfg.lr * g / (std::abs(g) + cfg.eps);
        EXPECT_NEAR(p.value(0, 0), expected, 1e-15);
        EXPECT_NEAR(p.value(0, 0), 1.0 - cfg.lr * (g > 0 ? 1.0 : -1.0), 2.0 * cfg.lr * cfg.eps / std::abs(g));
        EXPECT_EQ(p.grad(0, 0), 0.0);
        EXPECT_EQ(p.step_count, 1);
    }
}

TEST(Adam, ZeroGradientLeavesValue) {
    Param p("p", Matrix::Constant(2, 2, 0.7));
    adam_step({&p}, AdamConfig{});
    EXPECT_EQ(p.value, Matrix::Constant(2, 2, 0.7));
    EXPECT_EQ(p.step_count, 1);
}

TEST(Adam, ConstantGradientStepTendsToLr) {
    Param p("p", Matrix::Constant(1, 1, 0.0));
    const AdamConfig cfg{.lr = 0.01};
    double last = 0.0;
    for (int i = 0; i < 500; ++i) {
        last = p.value(0, 0);
        p.grad(0, 0) = 2.5;
        adam_step({&p}, cfg);
    }
    EXPECT_NEAR(last - p.value(0, 0), cfg.lr, 1e-6);
}

TEST(Adam, NonFiniteGradientLeavesEverythingUntouched) {
    Param a("a", Matrix::Constant(1, 1, 1.0));
    Param b("b", Matrix::Constant(1, 1, 1.0));
    a.grad(0, 0) = 1.0;
    b.grad(0, 0) = std::nan("");
    try {
        adam_step({&a, &b}, AdamConfig{});
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
    }
    EXPECT_EQ(a.value(0, 0), 1.0);
    EXPECT_EQ(a.step_count, 0);
}

TEST(Snapshot, RestoresValuesAndOptimizerState) {
    Param p("p", Matrix::Constant(1, 1, 1.0));
    ParamSnapshot snap({&p});
    p.grad(0, 0) = 1.0;
    adam_step({&p}, AdamConfig{});
    snap.restore();
    EXPECT_EQ(p.value(0, 0), 1.0);
    EXPECT_EQ(p.step_count, 0);
    EXPECT_EQ(p.adam_m(0, 0), 0.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Rng rng(10);
    Mlp mlp({3, 4, 2}, Activation::tanh, rng);
    randomize(mlp.params(), rng, 1.0 / 3.0);
    Checkpoint ck;
    ck.header = {{"component", "test"}};
    ck.add(static_cast<const Mlp&>(mlp).params());
    const Checkpoint back = Checkpoint::from_json(ck.to_json());
    Rng other(99);
    Mlp twin({3, 4, 2}, Activation::tanh, other);
    back.restore(twin.params());
    EXPECT_EQ(checksum(twin.params()), checksum(mlp.params()));
}

TEST(Checkpoint, ShapeMismatchRejected) {
    Rng rng(11);
    Mlp mlp({3, 4, 2}, Activation::tanh, rng);
    Checkpoint ck;
    ck.add(static_cast<const Mlp&>(mlp).params());
    Mlp other({3, 5, 2}, Activation::tanh, rng);
    EXPECT_ANY_THROW(ck.restore(other.params()));
}
