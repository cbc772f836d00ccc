#include <doctest.h>

#include <cmath>

#include "tag/schedule.hpp"

using namespace tag;

TEST_CASE("linear_beta_schedule small cases")
{
    const auto one = linear_beta_schedule(1, 0.5, 0.5);
    CHECK(one.betas() == std::vector<double>{0.5});
    CHECK(one.alpha_bars() == std::vector<double>{0.5});

    const auto two = linear_beta_schedule(2, 0.5, 0.5);
    CHECK(two.alpha_bars() == std::vector<double>{0.5, 0.25});
    CHECK(two.alpha_bar(0) == 1.0);
    CHECK(two.beta(0) == 0.0);
}

TEST_CASE("linear_beta_schedule rejects bad input")
{
    CHECK_THROWS_AS(linear_beta_schedule(0, 0.1, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(linear_beta_schedule(10, 0.0, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(linear_beta_schedule(10, 0.1, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(linear_beta_schedule(10, 0.3, 0.2), std::invalid_argument);
    const auto s = linear_beta_schedule(4, 0.1, 0.2);
    CHECK_THROWS_AS(s.alpha_bar(5), std::out_of_range);
    CHECK_THROWS_AS(s.beta(-1), std::out_of_range);
}

TEST_CASE("alpha_bars strictly decrease and match the cumulative product")
{
    const auto s = linear_beta_schedule(100, 1e-3, 0.2);
    double prod = 1.0;
    for (int t = 1; t <= s.steps(); ++t) {
        prod *= 1.0 - s.beta(t);
        CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-14));
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.beta(t) > 0.0);
        CHECK(s.beta(t) < 1.0);
    }
}

// The continuous relation uses exp(-1/2 int beta); one discrete step of rate
// beta corresponds to a unit of continuous time at rate 2 beta.
TEST_CASE("discrete product agrees with the continuous formula for small beta")
{
    const int steps = 100;
    const auto s = linear_beta_schedule(steps, 1e-4, 0.02);
    const auto rate = [&](double u) { return 2.0 * (1e-4 + (0.02 - 1e-4) * u / steps); };
    const double continuous = alpha_bar_continuous(rate, steps);
    // closed form: 1/2 int_0^T 2 beta = T (beta_min + beta_max) / 2
    CHECK(continuous == doctest::Approx(std::exp(-steps * (1e-4 + 0.02) / 2)).epsilon(1e-12));
    CHECK(std::abs(s.alpha_bar(steps) - continuous) / continuous < 0.02);
}

TEST_CASE("discrete/continuous gap shrinks like sum of beta^2")
{
    double prev_gap = 1.0;
    for (double beta_max : {0.04, 0.02, 0.01, 0.005}) {
        const int steps = 100;
        const double beta_min = beta_max / 200;
        const auto s = linear_beta_schedule(steps, beta_min, beta_max);
        double sum_sq = 0.0;
        for (double b : s.betas()) {
            sum_sq += b * b;
        }
        const auto rate = [&](double u) { return 2.0 * (beta_min + (beta_max - beta_min) * u / steps); };
        const double gap = std::abs(std::log(s.alpha_bar(steps)) - std::log(alpha_bar_continuous(rate, steps)));
        // log prod(1 - b) = -sum b - sum b^2 / 2 - ...
        CHECK(gap / sum_sq == doctest::Approx(0.5).epsilon(0.05));
        CHECK(gap < prev_gap);
        prev_gap = gap;
    }
}

TEST_CASE("alpha_bar_continuous")
{
    CHECK(alpha_bar_continuous([](double) { return 0.0; }, 3.0) == 1.0);
    CHECK(alpha_bar_continuous([](double) { return 0.02; }, 10.0) == doctest::Approx(0.904837418).epsilon(1e-9));
    CHECK(alpha_bar_continuous([](double) { return 0.02; }, 0.0) == 1.0);
    CHECK_THROWS_AS(alpha_bar_continuous([](double) { return 0.02; }, -1.0), std::invalid_argument);
}

TEST_CASE("forward_perturb")
{
    const Vector x0 = Vector::Constant(2, 10.0);
    CHECK(forward_perturb_with_noise(x0, 1.0, Vector::Constant(2, 3.0)) == x0);
    const Vector eps = Vector::Constant(2, -0.7);
    CHECK(forward_perturb_with_noise(x0, 0.0, eps) == eps);
    const Vector v = forward_perturb_with_noise(x0, 0.25, Vector::Zero(2));
    CHECK(v(0) == doctest::Approx(5.0));
    CHECK(v(1) == doctest::Approx(5.0));

    const auto s = linear_beta_schedule(10, 0.01, 0.1);
    Rng a(7), b(7);
    CHECK(forward_perturb(x0, 3, s, a) == forward_perturb(x0, 3, s, b));
    CHECK_THROWS_AS(forward_perturb(x0, 0, s, a), std::out_of_range);
    CHECK_THROWS_AS(forward_perturb(x0, 11, s, a), std::out_of_range);
}

TEST_CASE("eps and score conversions")
{
    CHECK(eps_to_score(Vector::Zero(2), 0.3).isZero());
    Vector s(2);
    s << -1.0, 0.0;
    const Vector eps = score_to_eps(s, 0.75);
    CHECK(eps(0) == doctest::Approx(0.5));
    CHECK(eps(1) == 0.0);
    CHECK_THROWS_AS(eps_to_score(s, 1.0), std::invalid_argument);

    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const Vector e = rng.normal_vector(5);
        const double abar = rng.uniform() * 0.999;
        const Vector back = score_to_eps(eps_to_score(e, abar), abar);
        CHECK((back - e).cwiseAbs().maxCoeff() <= 1e-15 * (1.0 + e.cwiseAbs().maxCoeff()) * 4);
    }
}

TEST_CASE("omega_schedule")
{
    const auto s = NoiseSchedule::from_alpha_bars({0.75, 0.5, 0.0 + 1e-9});
    CHECK(omega_schedule(OmegaKind::SqrtOneMinusAlphaBar, 5.0, 0, s) == 0.0);
    CHECK(omega_schedule(OmegaKind::OneMinusAlphaBar, 5.0, 0, s) == 0.0);
    CHECK(omega_schedule(OmegaKind::SqrtOneMinusAlphaBar, 2.0, 1, s) == doctest::Approx(1.0));
    CHECK(omega_schedule(OmegaKind::OneMinusAlphaBar, 3.0, 3, s) == doctest::Approx(3.0));
    CHECK(omega_schedule(OmegaKind::Constant, 3.0, 2, s) == 3.0);
    CHECK_THROWS_AS(parse_omega_kind("cosine"), std::invalid_argument);
    CHECK(parse_omega_kind(to_string(OmegaKind::OneMinusAlphaBar)) == OmegaKind::OneMinusAlphaBar);
}

TEST_CASE("schedule JSON round trip is exact")
{
    const auto s = linear_beta_schedule(37, 1e-3, 0.2);
    const auto j = nlohmann::json::parse(s.to_json().dump());
    const auto back = NoiseSchedule::from_json(j);
    CHECK(back.betas() == s.betas());
    CHECK(back.alpha_bars() == s.alpha_bars());
    CHECK(j.at("T") == 37);
}
