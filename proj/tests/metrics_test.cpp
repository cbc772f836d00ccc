#include <doctest.h>

#include <cmath>
#include <numbers>

#include "tag/metrics.hpp"
#include "test_support.hpp"

using namespace tag;

namespace {

TrajectorySet constant_prediction_set(int T, int n, int predicted)
{
    TrajectorySet set;
    for (int t = T; t >= 0; --t) {
        set.times.push_back(t);
        set.states.push_back(Matrix::Zero(1, n));
        set.guidance.push_back(Matrix::Zero(1, n));
        set.predicted_times.emplace_back(static_cast<std::size_t>(n), predicted);
    }
    return set;
}

} // namespace

TEST_CASE("time_gap of perfect and constant predictors")
{
    auto set = constant_prediction_set(100, 3, 100);
    CHECK(time_gap(set) == doctest::Approx(49.5).epsilon(1e-14));
    for (std::size_t i = 0; i < set.times.size(); ++i) {
        std::fill(set.predicted_times[i].begin(), set.predicted_times[i].end(), set.times[i]);
    }
    CHECK(time_gap(set) == 0.0);
    TrajectorySet empty;
    CHECK_THROWS_AS(time_gap(empty), std::invalid_argument);
    set.predicted_times.clear();
    CHECK_THROWS_AS(time_gap(set), std::invalid_argument);
}

TEST_CASE("time_gap is invariant to trajectory order")
{
    const auto s = linear_beta_schedule(20, 1e-3, 0.3);
    const auto fam = std::make_shared<const Family>(testing::toy_mixture(), s);
    const auto tls = TimeSource::analytic(fam);
    SampleOptions o;
    o.sigma = 0.3;
    auto set = sample(ScoreSource::analytic(fam), o, 50, 1);
    const double before = time_gap(set, tls);
    for (auto& m : set.states) {
        m = m.rowwise().reverse().eval();
    }
    CHECK(time_gap(set, tls) == doctest::Approx(before).epsilon(1e-14));
}

TEST_CASE("forward samples: analytic Time-Gap small early, larger in the second half")
{
    const auto s = linear_beta_schedule(100, 1e-3, 0.2);
    const auto gm = testing::toy_mixture();
    const auto fam = std::make_shared<const Family>(gm, s);
    const auto tls = TimeSource::analytic(fam);
    Rng rng(2);
    // build a "trajectory set" from exact forward samples at every step
    TrajectorySet set;
    const Matrix x0 = sample(gm, 200, rng);
    for (int t = 100; t >= 0; --t) {
        set.times.push_back(t);
        Matrix xt = x0;
        if (t > 0) {
            for (Eigen::Index j = 0; j < xt.cols(); ++j) {
                xt.col(j) = forward_perturb(Vector(x0.col(j)), t, s, rng);
            }
        }
        set.states.push_back(xt);
        set.guidance.push_back(Matrix::Zero(2, 200));
    }
    const auto profile = time_gap_profile(set, tls);
    REQUIRE(profile.size() == 100);
    // profile[i] corresponds to t = 100 - i
    double early = 0.0, late = 0.0;
    for (int t = 1; t <= 50; ++t) {
        early += profile[static_cast<std::size_t>(100 - t)] / 50;
    }
    for (int t = 51; t <= 100; ++t) {
        late += profile[static_cast<std::size_t>(100 - t)] / 50;
    }
    CHECK(early < 5.0);
    CHECK(late > 2.0 * early);
}

TEST_CASE("w1_1d")
{
    CHECK(w1_1d({0.0, 0.0}, {3.0, 3.0}) == 3.0);
    CHECK(w1_1d({1.0, 2.0, 3.0}, {3.0, 1.0, 2.0}) == 0.0);
    // unequal sizes: {0, 1} against {0, 0.5, 1}; quantile functions differ by 1/2 on (1/3, 2/3]
    CHECK(w1_1d({0.0, 1.0}, {0.0, 0.5, 1.0}) == doctest::Approx(1.0 / 6.0).epsilon(1e-14));
    CHECK_THROWS_AS(w1_1d({}, {1.0}), std::invalid_argument);
}

TEST_CASE("sliced_w1 basic properties")
{
    Rng rng(3);
    const Matrix a = rng.normal_vector(200).reshaped(2, 100);
    CHECK(sliced_w1(a, a) == 0.0);
    // 1D translation by m
    const Matrix p = Matrix::Zero(1, 50);
    const Matrix q = Matrix::Constant(1, 50, 2.5);
    CHECK(sliced_w1(p, q) == doctest::Approx(2.5).epsilon(1e-14));
    CHECK_THROWS_AS(sliced_w1(a, Matrix::Zero(3, 4)), std::invalid_argument);
    CHECK_THROWS_AS(sliced_w1(a, Matrix::Zero(2, 0)), std::invalid_argument);
    CHECK(sliced_w1(a, a.array() + 1.0, 64, 7) == sliced_w1(a, a.array() + 1.0, 64, 7));
}

TEST_CASE("sliced_w1 is symmetric and satisfies the triangle inequality")
{
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        const Matrix a = rng.normal_vector(240).reshaped(3, 80);
        const Matrix b = (rng.normal_vector(240).reshaped(3, 80).array() * 2.0 + 1.0).matrix();
        const Matrix c = (rng.normal_vector(240).reshaped(3, 80).array() - 1.0).matrix();
        const double ab = sliced_w1(a, b, 64, 1);
        CHECK(ab == sliced_w1(b, a, 64, 1));
        CHECK(ab <= sliced_w1(a, c, 64, 1) + sliced_w1(c, b, 64, 1) + 1e-12);
    }
}

TEST_CASE("sliced_w1 self-distance of the toy mixture is small")
{
    Rng rng(5);
    const auto gm = testing::toy_mixture();
    CHECK(sliced_w1(sample(gm, 10000, rng), sample(gm, 10000, rng), 64, 2) < 0.5);
}

TEST_CASE("mixture_nll")
{
    const Mixture std1(Vector::Ones(1), Matrix::Zero(1, 1), Vector::Ones(1));
    CHECK(mixture_nll(std1, Matrix::Zero(1, 10)) == doctest::Approx(0.5 * std::log(2.0 * std::numbers::pi)));

    Rng rng(6);
    const auto gm = testing::toy_mixture();
    const double a = mixture_nll(gm, sample(gm, 20000, rng));
    const double b = mixture_nll(gm, sample(gm, 20000, rng));
    // entropy of the toy mixture: log(2 pi e) + log 2 for well separated halves
    CHECK(a == doctest::Approx(std::log(2.0 * std::numbers::pi * std::numbers::e) + std::log(2.0)).epsilon(0.02));
    CHECK(std::abs(a - b) < 0.05);
    CHECK(mixture_nll(gm, rng.normal_vector(2000).reshaped(2, 1000)) > a + 10.0);
    CHECK_THROWS_AS(mixture_nll(gm, Matrix(2, 0)), std::invalid_argument);
}

TEST_CASE("spearman")
{
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {9, 3, 2, 1}) == doctest::Approx(-1.0));
    // ties get average ranks: ranks of b are 1.5, 1.5, 3
    CHECK(spearman({1, 2, 3}, {5, 5, 7}) == doctest::Approx(std::sqrt(3.0) / 2.0));
    CHECK_THROWS_AS(spearman({1}, {1}), std::invalid_argument);
}

TEST_CASE("Mann-Whitney one-sided test")
{
    std::vector<double> small, large;
    for (int i = 0; i < 30; ++i) {
        small.push_back(i);
        large.push_back(i + 20);
    }
    const auto r = mann_whitney_less(small, large);
    CHECK(r.p_less < 1e-4);
    CHECK(mann_whitney_less(large, small).p_less > 0.999);
    // U counts pairs (a, b) with a > b plus half the ties
    double u = 0.0;
    for (double a : small) {
        for (double b : large) {
            u += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
        }
    }
    CHECK(r.u == doctest::Approx(u));
    const auto same = mann_whitney_less({1, 2, 3}, {1, 2, 3});
    CHECK(same.p_less > 0.4);
}

TEST_CASE("run summary and config hash")
{
    RunSummary r;
    r.run_id = "toy-omega-4";
    r.sliced_w1 = 1.25;
    r.seed = 9;
    const auto j = r.to_json();
    CHECK(j.at("projections") == kSlicedProjections);
    CHECK(j.at("subsample_cap") == kSlicedSubsample);
    CHECK(RunSummary::csv_header().find("sliced_w1") != std::string::npos);
    CHECK(r.csv_row().rfind("toy-omega-4,0,1.25,", 0) == 0);
    const nlohmann::json c1 = {{"a", 1}, {"b", 2}};
    const nlohmann::json c2 = {{"b", 2}, {"a", 1}};
    CHECK(config_hash(c1) == config_hash(c2));
    CHECK(config_hash(c1).size() == 16);
    CHECK(config_hash(c1) != config_hash({{"a", 2}, {"b", 2}}));
}
