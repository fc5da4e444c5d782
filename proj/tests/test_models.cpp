#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "memgauge/memgauge.hpp"
#include "oracles.hpp"

using namespace memgauge;

namespace {

ModelSpec mlp_spec(std::size_t features, std::size_t classes, std::vector<std::size_t> widths,
                   Activation act = Activation::relu) {
    return ModelSpec{Architecture::mlp, std::move(widths), act, features, classes};
}

ModelSpec linear_spec(std::size_t features, std::size_t classes) {
    return ModelSpec{Architecture::softmax_linear, {}, Activation::relu, features, classes};
}

Matrix<float> random_features(std::mt19937_64& rng, std::size_t n, std::size_t d) {
    std::normal_distribution<float> g(0.0f, 1.0f);
    Matrix<float> x(n, d);
    for (auto& v : x.flat())
        v = g(rng);
    return x;
}

std::vector<Label> random_labels(std::mt19937_64& rng, std::size_t n, std::size_t classes) {
    std::uniform_int_distribution<Label> u(0, static_cast<Label>(classes - 1));
    std::vector<Label> y(n);
    for (auto& v : y)
        v = u(rng);
    return y;
}

} // namespace

TEST(ModelSpec, ShapesAndValidation) {
    const auto spec = mlp_spec(5, 3, {8, 4});
    const auto shapes = spec.layer_shapes();
    ASSERT_EQ(shapes.size(), 3u);
    EXPECT_EQ(shapes[0], (std::pair<std::size_t, std::size_t>{8, 5}));
    EXPECT_EQ(shapes[2], (std::pair<std::size_t, std::size_t>{3, 4}));
    EXPECT_EQ(linear_spec(5, 3).layer_shapes().size(), 1u);
    EXPECT_THROW(mlp_spec(5, 3, {}).validate(), ConfigError);
    EXPECT_THROW(mlp_spec(5, 3, {0}).validate(), ConfigError);
    EXPECT_THROW(linear_spec(0, 3).validate(), ConfigError);
}

TEST(Params, InitIsDeterministicAndWithinGlorotBounds) {
    const auto spec = mlp_spec(10, 4, {6});
    const auto a = init_params(spec, 3), b = init_params(spec, 3), c = init_params(spec, 4);
    EXPECT_EQ(a.tensors[0].values, b.tensors[0].values);
    EXPECT_NE(a.tensors[0].values, c.tensors[0].values);
    const double limit = std::sqrt(6.0 / 16.0);
    for (float v : a.weight(0).values)
        EXPECT_LE(std::abs(v), limit);
    for (float v : a.bias(0).values)
        EXPECT_EQ(v, 0.0f);
    EXPECT_EQ(a.weight(0).name, "layer0.weight");
    EXPECT_EQ(a.bias(1).name, "layer1.bias");
    EXPECT_NO_THROW(validate_params(spec, a));
    EXPECT_THROW(validate_params(mlp_spec(10, 4, {7}), a), ShapeError);
}

TEST(Params, MgpmRoundTrip) {
    const auto spec = mlp_spec(3, 2, {4});
    const auto p = init_params(spec, 1);
    const auto back = decode_params(encode_params(p));
    ASSERT_EQ(back.tensors.size(), p.tensors.size());
    for (std::size_t t = 0; t < p.tensors.size(); ++t) {
        EXPECT_EQ(back.tensors[t].name, p.tensors[t].name);
        EXPECT_EQ(back.tensors[t].shape, p.tensors[t].shape);
        EXPECT_EQ(back.tensors[t].values, p.tensors[t].values);
    }
    auto bytes = encode_params(p);
    bytes.resize(bytes.size() - 1);
    EXPECT_THROW(decode_params(bytes), MalformedFileError);
}

TEST(Forward, LinearLogitsMatchHandComputation) {
    const auto spec = linear_spec(2, 2);
    auto p = zero_params<float>(spec);
    p.weight(0).values = {1, 2, -1, 0.5f};
    p.bias(0).values = {0.5f, -1};
    Matrix<float> x(1, 2);
    x(0, 0) = 2;
    x(0, 1) = -1;
    const auto z = logits(spec, p, x);
    EXPECT_FLOAT_EQ(z(0, 0), 1 * 2 + 2 * -1 + 0.5f);
    EXPECT_FLOAT_EQ(z(0, 1), -1 * 2 + 0.5f * -1 - 1);
    Matrix<float> wrong(1, 3);
    EXPECT_THROW(logits(spec, p, wrong), DimensionError);
}

TEST(Forward, ArgmaxTiesGoToLowestClass) {
    Matrix<float> s(2, 3);
    s(0, 0) = 1;
    s(0, 1) = 3;
    s(0, 2) = 3;
    const auto a = argmax_rows(s);
    EXPECT_EQ(a[0], 1u);
    EXPECT_EQ(a[1], 0u);
}

TEST(Loss, CrossEntropyOfUniformLogitsIsLogK) {
    Matrix<double> z(3, 4);
    const std::vector<Label> y{0, 1, 3};
    Matrix<double> dz;
    EXPECT_NEAR(softmax_cross_entropy(z, std::span<const Label>(y), &dz), std::log(4.0), 1e-12);
    // gradient rows sum to zero and carry the 1/batch factor
    for (std::size_t r = 0; r < 3; ++r) {
        double s = 0;
        for (double v : dz.row(r))
            s += v;
        EXPECT_NEAR(s, 0.0, 1e-15);
        EXPECT_NEAR(dz(r, y[r]), (0.25 - 1.0) / 3.0, 1e-15);
    }
}

TEST(Loss, CrossEntropyIsStableForHugeLogits) {
    Matrix<float> z(1, 2);
    z(0, 0) = 1e4f;
    z(0, 1) = -1e4f;
    const std::vector<Label> y{1};
    const double loss = softmax_cross_entropy(z, std::span<const Label>(y));
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_NEAR(loss, 2e4, 1.0);
}

TEST(Loss, SoftmaxTemperatureFlattens) {
    Matrix<double> z(1, 2);
    z(0, 0) = 2;
    const auto cold = softmax_rows(z, 1.0), hot = softmax_rows(z, 4.0);
    EXPECT_NEAR(cold(0, 0), 1 / (1 + std::exp(-2.0)), 1e-12);
    EXPECT_NEAR(hot(0, 0), 1 / (1 + std::exp(-0.5)), 1e-12);
}

class GradientCheck : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheck, AnalyticMatchesFiniteDifferences) {
    const int point = GetParam();
    std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(point));
    const auto x = random_features(rng, 6, 5);
    const auto y = random_labels(rng, 6, 3);
    for (const auto& spec : {linear_spec(5, 3), mlp_spec(5, 3, {7, 4}, Activation::relu),
                             mlp_spec(5, 3, {6}, Activation::tanh)}) {
        auto p = cast_params<double>(init_params(spec, static_cast<std::uint64_t>(point)));
        std::normal_distribution<double> g(0.0, 0.1);
        for (auto& b : p.tensors)
            if (b.is_bias())
                for (auto& v : b.values)
                    v = g(rng);
        EXPECT_LE(gradient_check(spec, p, x, y), 1e-4) << to_string(spec.architecture) << " point " << point;
    }
}

INSTANTIATE_TEST_SUITE_P(RandomPoints, GradientCheck, ::testing::Range(0, 10));

TEST(GradientCheckFixture, StationaryPointHasTinyGradients) {
    // Zero weights and a single class: every logit is equal, so the loss is log K and the
    // gradient w.r.t. each output bias is 1/K - [c == y], averaged to zero over a balanced batch.
    const auto spec = linear_spec(2, 2);
    auto p = zero_params<double>(spec);
    Matrix<float> x(2, 2);
    x(0, 0) = 1;
    x(1, 0) = 1;
    const std::vector<Label> y{0, 1};
    EXPECT_LE(gradient_check(spec, p, x, y), 1e-4);
    EXPECT_THROW(gradient_check(spec, p, Matrix<float>(0, 2), std::span<const Label>()), EmptyDataError);
}

TEST(Train, LearnsSeparableBlobs) {
    std::mt19937_64 rng(7);
    const auto train_set = oracle::blobs(rng, 120, 3, 0.15);
    const auto test_set = oracle::blobs(rng, 60, 3, 0.15);
    TrainConfig tc;
    tc.epochs = 40;
    tc.batch_size = 16;
    for (const auto& spec : {linear_spec(2, 3), mlp_spec(2, 3, {16})}) {
        const auto m = train(spec, train_set, test_set, tc);
        EXPECT_GE(accuracy(m, test_set), 0.95) << to_string(spec.architecture);
        EXPECT_EQ(m.train_log.size(), 40u);
        EXPECT_GE(m.checkpoint_epoch, 1u);
        EXPECT_EQ(m.checkpoint_eval_accuracy, accuracy(m, test_set));
    }
}

TEST(Train, DeterministicForSeed) {
    std::mt19937_64 rng(8);
    const auto d = oracle::blobs(rng, 64, 2, 0.5);
    TrainConfig tc;
    tc.epochs = 5;
    tc.seed = 42;
    const auto spec = mlp_spec(2, 2, {8});
    const auto a = train(spec, d, d, tc), b = train(spec, d, d, tc);
    EXPECT_EQ(encode_params(a.params), encode_params(b.params));
    tc.seed = 43;
    EXPECT_NE(encode_params(train(spec, d, d, tc).params), encode_params(a.params));
}

TEST(Train, CheckpointTrackerPrefersEarliestBest) {
    CheckpointTracker t(CheckpointSelection::best_eval_accuracy);
    Params p;
    t.offer(1, 0.5, p);
    t.offer(2, 0.8, p);
    t.offer(3, 0.8, p);
    t.offer(4, 0.7, p);
    EXPECT_EQ(t.epoch(), 2u);
    CheckpointTracker f(CheckpointSelection::final);
    f.offer(1, 0.9, p);
    f.offer(2, 0.1, p);
    EXPECT_EQ(f.epoch(), 2u);
}

TEST(Train, ErrorCases) {
    std::mt19937_64 rng(9);
    const auto d = oracle::blobs(rng, 10, 2, 0.5);
    const auto spec = linear_spec(2, 2);
    TrainConfig tc;
    tc.batch_size = 4;
    const std::vector<std::uint8_t> none(10, 0);
    EXPECT_THROW(train(spec, restrict(d, none), d, tc), EmptyTrainingSetError);
    EXPECT_THROW(train(linear_spec(3, 2), d, d, tc), DimensionError);
    tc.batch_size = 11;
    EXPECT_THROW(train(spec, d, d, tc), ConfigError);
    tc.batch_size = 4;
    EXPECT_THROW(train(spec, d, restrict(d, none), tc), ConfigError); // best checkpoint without eval data
    tc.checkpoint_selection = CheckpointSelection::final;
    EXPECT_NO_THROW(train(spec, d, restrict(d, none), tc));
}

TEST(Train, DivergenceIsReportedWithEpoch) {
    std::mt19937_64 rng(10);
    auto d = oracle::blobs(rng, 32, 2, 0.5);
    for (auto& v : d.features.flat())
        v *= 1e18f;
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.learning_rate = 1e6;
    tc.checkpoint_selection = CheckpointSelection::final;
    try {
        train(mlp_spec(2, 2, {8}), d, d, tc);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_GE(e.epoch(), 1u);
    }
}

TEST(Train, CorrectnessFlags) {
    const std::vector<Label> p{0, 1, 2}, y{0, 2, 2};
    EXPECT_EQ(correctness(p, y), (BoolVector{1, 0, 1}));
    EXPECT_NEAR(mean_of(correctness(p, y)), 2.0 / 3.0, 1e-15);
    const std::vector<Label> short_y{0};
    EXPECT_THROW(correctness(p, short_y), DimensionError);
}
