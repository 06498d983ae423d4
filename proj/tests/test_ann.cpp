#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "sadkit/ann.hpp"
#include "sadkit/io.hpp"
#include "sadkit/rng.hpp"

using namespace sadkit;
using namespace sadkit::ann;

namespace {

Dataset function_dataset(int n, double lo, double hi, double (*fn)(double), unsigned seed) {
    Dataset ds;
    ds.input_names = {"x"};
    ds.target_names = {"y"};
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        const double x = rng.uniform(lo, hi);
        ds.inputs.push_back({x});
        ds.targets.push_back({fn(x)});
    }
    ds.assign_splits(seed);
    return ds;
}

std::string temp_path(const char* name) { return std::string("/tmp/sadkit_test_") + name; }

}  // namespace

TEST_CASE("dataset splits are 70/15/15 and reproducible") {
    Dataset ds;
    ds.input_names = {"a"};
    ds.target_names = {"t"};
    for (int i = 0; i < 125; ++i) {
        ds.inputs.push_back({static_cast<double>(i)});
        ds.targets.push_back({2.0 * i});
    }
    ds.assign_splits(99);
    const auto c = ds.split_counts();
    CHECK(c[0] == 88);
    CHECK(c[1] == 19);
    CHECK(c[2] == 18);

    Dataset again = ds;
    again.assign_splits(99);
    CHECK(again.split == ds.split);

    Dataset other = ds;
    other.assign_splits(100);
    CHECK(other.split != ds.split);
}

TEST_CASE("dataset csv round trip") {
    Dataset ds;
    ds.input_names = {"x1", "x2"};
    ds.target_names = {"t"};
    Rng rng(3);
    for (int i = 0; i < 40; ++i) {
        ds.inputs.push_back({rng.uniform(-5, 5), rng.uniform(0, 1e4)});
        ds.targets.push_back({rng.uniform(-1e-3, 1e-3)});
    }
    ds.assign_splits(7);
    const std::string path = temp_path("ds.csv");
    save_dataset_csv(ds, path);
    const Dataset back = load_dataset_csv(path, 2);
    REQUIRE(back.size() == ds.size());
    CHECK(back.split == ds.split);
    CHECK(back.input_names == ds.input_names);
    for (std::size_t r = 0; r < ds.size(); ++r) {
        CHECK(back.inputs[r] == ds.inputs[r]);  // 17 digits round-trip exactly
        CHECK(back.targets[r] == ds.targets[r]);
    }
    std::remove(path.c_str());
}

TEST_CASE("training fits simple functions") {
    TrainOptions opts;

    SUBCASE("identity map") {
        const Dataset ds = function_dataset(200, -1.0, 1.0, [](double x) { return x; }, 21);
        const TrainResult r = train(ds, 10, opts, 5);
        REQUIRE(r.metrics.r2_test.size() == 1);
        CHECK(r.metrics.r2_test[0] > 0.999);

        const Prediction p = predict(r.model, std::vector<double>{0.3});
        CHECK(std::abs(p.values[0] - 0.3) < 0.01);
        CHECK_FALSE(p.extrapolated);

        const Prediction px = predict(r.model, std::vector<double>{10.0});
        CHECK(px.extrapolated);
    }

    SUBCASE("sine") {
        const Dataset ds = function_dataset(500, -3.141592653589793, 3.141592653589793,
                                            [](double x) { return std::sin(x); }, 33);
        const TrainResult r = train(ds, 10, opts, 11);
        CHECK(r.metrics.r2_test[0] > 0.99);
    }
}

TEST_CASE("training is deterministic and early stopping is sound") {
    const Dataset ds = function_dataset(150, -2.0, 2.0, [](double x) { return x * x; }, 4);
    TrainOptions opts;
    opts.max_epochs = 3000;
    const TrainResult a = train(ds, 6, opts, 17);
    const TrainResult b = train(ds, 6, opts, 17);
    CHECK(a.model.w1 == b.model.w1);
    CHECK(a.model.w2 == b.model.w2);
    CHECK(a.model.b1 == b.model.b1);
    CHECK(a.model.b2 == b.model.b2);
    CHECK(a.metrics.epochs == b.metrics.epochs);

    // Restored early-stop weights can never be worse than the final epoch.
    CHECK(a.metrics.val_mse <= a.metrics.val_mse_final + 1e-15);

    const TrainResult c = train(ds, 6, opts, 18);
    CHECK(a.model.w1 != c.model.w1);
}

TEST_CASE("prediction mechanics") {
    MlpModel m;
    m.n_in = 2;
    m.n_hidden = 3;
    m.n_out = 2;
    m.w1.assign(6, 0.0);
    m.b1.assign(3, 0.0);
    m.w2.assign(6, 0.0);
    m.b2.assign(2, 0.0);
    m.in_mean = {1.0, -2.0};
    m.in_scale = {2.0, 0.5};
    m.out_mean = {10.0, -3.0};
    m.out_scale = {4.0, 0.1};
    m.in_lo = {-1.0, -3.0};
    m.in_hi = {3.0, -1.0};

    // All-zero weights: the denormalized output is exactly the output mean.
    const Prediction p = predict(m, std::vector<double>{1.0, -2.0});
    CHECK(p.values[0] == 10.0);
    CHECK(p.values[1] == -3.0);
    CHECK_FALSE(p.extrapolated);

    CHECK_THROWS_AS(predict(m, std::vector<double>{1.0}), InvalidArgument);
}

TEST_CASE("analytic gradients match finite differences") {
    Rng rng(123);
    MlpModel m;
    m.n_in = 3;
    m.n_hidden = 5;
    m.n_out = 2;
    m.w1.resize(15);
    m.b1.resize(5);
    m.w2.resize(10);
    m.b2.resize(2);
    for (auto* blk : {&m.w1, &m.b1, &m.w2, &m.b2})
        for (double& w : *blk) w = rng.uniform(-0.8, 0.8);
    m.in_mean.assign(3, 0.0);
    m.in_scale.assign(3, 1.0);
    m.out_mean.assign(2, 0.0);
    m.out_scale.assign(2, 1.0);
    m.in_lo.assign(3, -1.0);
    m.in_hi.assign(3, 1.0);

    const std::vector<double> x{0.4, -0.7, 0.1};
    const std::vector<double> t{0.2, -0.5};
    CHECK(gradient_check(m, x, t) < 1e-6);

    SUBCASE("saturated hidden unit stays within tolerance") {
        MlpModel sat = m;
        sat.b1[0] = 8.0;  // sigmoid' ~ 3e-4, effectively flat but still smooth
        CHECK(gradient_check(sat, x, t) < 1e-6);
    }

    SUBCASE("step sensitivity stays near the noise floor") {
        const double d5 = gradient_check(m, x, t, 1e-5);
        const double d4 = gradient_check(m, x, t, 1e-4);
        CHECK(d5 < 1e-6);
        CHECK(d4 < 1e-6);
        const double ratio = std::max(d4, d5) / std::max(std::min(d4, d5), 1e-300);
        CHECK(ratio < 10.0);
    }
}

TEST_CASE("coefficient of determination") {
    const std::vector<std::vector<double>> t{{1.0}, {2.0}, {4.0}};

    CHECK(r_squared(t, t)[0] == 1.0);

    const double mean = 7.0 / 3.0;
    const std::vector<std::vector<double>> at_mean{{mean}, {mean}, {mean}};
    CHECK(std::abs(r_squared(at_mean, t)[0]) < 1e-15);

    // SS_res = 1, SS_tot = 14/3.
    const std::vector<std::vector<double>> p{{1.0}, {2.0}, {3.0}};
    CHECK(std::abs(r_squared(p, t)[0] - (1.0 - 3.0 / 14.0)) < 1e-12);

    const std::vector<std::vector<double>> flat{{2.0}, {2.0}, {2.0}};
    CHECK_THROWS_AS(r_squared(flat, flat), InvalidArgument);
}

TEST_CASE("model persistence round trip") {
    const Dataset ds = function_dataset(120, -1.0, 1.0, [](double x) { return 0.5 * x - 0.2; }, 8);
    TrainOptions opts;
    opts.max_epochs = 1500;
    const TrainResult r = train(ds, 4, opts, 3);

    const std::string path = temp_path("model.txt");
    save_model(r.model, path);
    const MlpModel back = load_model(path);

    CHECK(back.w1 == r.model.w1);
    CHECK(back.w2 == r.model.w2);
    CHECK(back.in_scale == r.model.in_scale);
    CHECK(back.seed == r.model.seed);

    const std::vector<double> x{0.37};
    const Prediction a = predict(r.model, x);
    const Prediction b = predict(back, x);
    CHECK(a.values[0] == b.values[0]);  // bit-identical

    SUBCASE("future format version is refused") {
        std::string text = sadkit::io::read_text(path);
        text.replace(text.find("v1"), 2, "v2");
        sadkit::io::atomic_write_text(path, text);
        CHECK_THROWS_WITH_AS(load_model(path),
                             doctest::Contains("unsupported model format version"), ParseError);
    }
    std::remove(path.c_str());
}
