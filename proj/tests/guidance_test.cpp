#include <doctest.h>

#include <cmath>

#include "tag/guidance.hpp"
#include "tag/metrics.hpp"
#include "test_support.hpp"

using namespace tag;

namespace {

std::shared_ptr<const Family> family_of(const Mixture& gm, const NoiseSchedule& s)
{
    return std::make_shared<const Family>(gm, s);
}

/// The analytic score of `fam` without the oracle attached, so callers take the
/// finite-difference path.
ScoreSource opaque(const std::shared_ptr<const Family>& fam)
{
    return ScoreSource::custom(
        [fam](const Matrix& x, int t) {
            Matrix out(x.rows(), x.cols());
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                out.col(j) = score(fam->at(t), x.col(j));
            }
            return out;
        },
        fam->schedule(), fam->dim());
}

double joint_rate(const Matrix& x, double target, double tol)
{
    int hits = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        hits += std::abs(x(0, j) - target) < tol && std::abs(x(1, j) - target) < tol ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(x.cols());
}

} // namespace

TEST_CASE("condition losses are nonnegative and vanish exactly on target")
{
    Rng rng(1);
    for (auto loss : {LossKind::Squared, LossKind::Absolute}) {
        const auto c = ConditionSpec::coordinate(3, 1, 2.5, loss);
        Vector x = rng.normal_vector(3);
        CHECK(c.loss_value(x) > 0.0);
        x(1) = 2.5;
        CHECK(c.loss_value(x) == 0.0);
        CHECK(c.loss_gradient(x).isZero());
        const Vector w = rng.normal_vector(3);
        const auto lin = ConditionSpec::linear(w, -1.0, loss);
        for (int i = 0; i < 20; ++i) {
            CHECK(lin.loss_value(3.0 * rng.normal_vector(3)) >= 0.0);
        }
    }
    CHECK_THROWS_AS(ConditionSpec::coordinate(2, 2, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(ConditionSpec::coordinate(2, 0, 0.0).loss_value(Vector::Zero(3)), std::invalid_argument);
}

TEST_CASE("condition JSON round trip")
{
    const auto c = ConditionSpec::coordinate(2, 1, 10.0, LossKind::Absolute);
    const auto back = ConditionSpec::from_json(nlohmann::json::parse(c.to_json().dump()), 2);
    CHECK(back.projection == c.projection);
    CHECK(back.target == c.target);
    CHECK(back.loss == LossKind::Absolute);
    Vector w(2);
    w << 0.5, -2.0;
    const auto lin = ConditionSpec::linear(w, 3.0);
    CHECK(ConditionSpec::from_json(lin.to_json(), 2).projection == lin.projection);
    CHECK_THROWS_AS(ConditionSpec::from_json({{"kind", "radial"}, {"target", 1.0}}, 2), std::invalid_argument);
    CHECK_THROWS_AS(ConditionSpec::from_json({{"kind", "linear"}, {"params", {{"weights", {1.0}}}}, {"target", 1.0}}, 2),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_loss_kind("huber"), std::invalid_argument);
}

TEST_CASE("tfg_gradient closed form on N(0, I) data")
{
    const auto s = NoiseSchedule::from_alpha_bars({0.25});
    const Mixture std2(Vector::Ones(1), Matrix::Zero(2, 1), Vector::Ones(1));
    const auto src = ScoreSource::analytic(family_of(std2, s));
    Vector x(2);
    x << 2.0, 0.0;
    const Vector g = tfg_gradient(src, ConditionSpec::identity(Vector::Zero(2)), x, 1);
    CHECK(g(0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(g(1) == 0.0);
    // loss already zero at x0_hat = c
    Vector c(2);
    c << 1.0, 0.0;
    CHECK(tfg_gradient(src, ConditionSpec::identity(c), x, 1).isZero());
}

TEST_CASE("tfg_gradient matches finite differences of the loss")
{
    Rng rng(2);
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const int d = 1 + rng.uniform_int(0, 2);
        const auto gm = testing::random_mixture(rng, d, 1 + rng.uniform_int(0, 3), 3.0);
        const auto s = testing::random_schedule(rng, 10);
        const auto src = ScoreSource::analytic(family_of(gm, s));
        const int t = rng.uniform_int(1, 10);
        const auto loss = i % 2 ? LossKind::Absolute : LossKind::Squared;
        const auto cond = i % 3 ? ConditionSpec::coordinate(d, rng.uniform_int(0, d - 1), rng.normal(), loss)
                                : ConditionSpec::linear(rng.normal_vector(d), rng.normal(), loss);
        const Vector x = forward_perturb(sample(gm, 1, rng).col(0), t, s, rng);
        const auto f = [&](const Vector& y) { return cond.loss_value(tweedie_x0hat(src, y, t)); };
        const Vector x0 = tweedie_x0hat(src, x, t);
        const Vector r = cond.property(x0) - cond.target;
        if (loss == LossKind::Absolute && r.cwiseAbs().minCoeff() < 1e-3) {
            continue; // too close to the kink for a central difference
        }
        const Vector fd = testing::fd_gradient(f, x, 1e-6);
        worst = std::max(worst, testing::rel_err(tfg_gradient(src, cond, x, t), fd, 1e-3));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("finite-difference Jacobian path agrees with the exact one")
{
    Rng rng(3);
    const auto gm = testing::random_mixture(rng, 2, 3);
    const auto s = linear_beta_schedule(20, 1e-3, 0.3);
    const auto fam = family_of(gm, s);
    const auto exact = ScoreSource::analytic(fam);
    const auto fd = opaque(fam);
    CHECK(fd.oracle() == nullptr);
    const auto cond = ConditionSpec::coordinate(2, 0, 1.0);
    for (int i = 0; i < 20; ++i) {
        const int t = rng.uniform_int(1, 20);
        const Vector x = forward_perturb(sample(gm, 1, rng).col(0), t, s, rng);
        CHECK(testing::rel_err(tfg_gradient(fd, cond, x, t), tfg_gradient(exact, cond, x, t), 1e-3) < 1e-6);
    }
}

TEST_CASE("conditional_tag_score reductions")
{
    const auto s = linear_beta_schedule(30, 1e-3, 0.3);
    const auto fam = family_of(testing::toy_mixture(), s);
    const auto src = ScoreSource::analytic(fam);
    const auto tls = TimeSource::analytic(fam);
    const auto cond = ConditionSpec::coordinate(2, 0, 10.0);
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        const Vector x = 5.0 * rng.normal_vector(2);
        const int t = rng.uniform_int(1, 30);
        CHECK(conditional_tag_score(src, cond, &tls, x, t, 0.0, 0.0) == src.score_one(x, t));
        const Vector time_term = conditional_tag_score(src, cond, &tls, x, t, 0.0, 2.5) - src.score_one(x, t);
        CHECK(testing::rel_err(time_term, 2.5 * tls_analytic(*fam, x, t), 1e-9) < 1e-12);
        const Vector cond_term = conditional_tag_score(src, cond, nullptr, x, t, 0.7, 0.0) - src.score_one(x, t);
        CHECK(testing::rel_err(cond_term, -0.7 * tfg_gradient(src, cond, x, t), 1e-9) < 1e-12);
    }
    CHECK_THROWS_AS(conditional_tag_score(src, cond, nullptr, Vector::Zero(2), 3, 0.0, 1.0), std::invalid_argument);
}

TEST_CASE("guided sampling concentrates on the targeted mode")
{
    const auto s = linear_beta_schedule(100, 1e-3, 0.2);
    const auto gm = testing::toy_mixture();
    const auto fam = family_of(gm, s);
    const auto base = ScoreSource::analytic(fam);
    const auto cond = ConditionSpec::coordinate(2, 0, 10.0);
    const auto guided = ScoreSource::custom(
        [&](const Matrix& x, int t) {
            Matrix out(x.rows(), x.cols());
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                out.col(j) = conditional_tag_score(base, cond, nullptr, x.col(j), t, 1.0, 0.0);
            }
            return out;
        },
        s, 2);
    const auto set = sample(guided, SampleOptions{}, 400, 5);
    int hits = 0;
    for (Eigen::Index j = 0; j < set.size(); ++j) {
        hits += responsibilities(gm, set.terminal().col(j))(0) > 0.5 ? 1 : 0;
    }
    CHECK(hits > 0.9 * 400);
    // without guidance the two modes are balanced
    const auto plain = sample(base, SampleOptions{}, 400, 5);
    int plain_hits = 0;
    for (Eigen::Index j = 0; j < plain.size(); ++j) {
        plain_hits += responsibilities(gm, plain.terminal().col(j))(0) > 0.5 ? 1 : 0;
    }
    CHECK(plain_hits < 0.65 * 400);
}

TEST_CASE("reparam_single")
{
    const auto s = linear_beta_schedule(10, 1e-3, 0.3);
    const auto fam = family_of(testing::toy_mixture(), s);
    const auto src = ScoreSource::analytic(fam);
    Vector x(2);
    x << 1.0, 1.0;
    const auto at_origin = ConditionSpec::identity(Vector::Zero(2));
    CHECK(reparam_single(x, at_origin, 0.0, src, 4) == x);
    // at t = 0 the clean estimate is the point itself
    const Vector shifted = reparam_single(x, at_origin, 0.5, src, 0);
    CHECK(shifted(0) == doctest::Approx(0.5));
    CHECK(shifted(1) == doctest::Approx(0.5));
    CHECK_THROWS_AS(reparam_single(x, at_origin, -1.0, src, 4), std::invalid_argument);

    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const int t = rng.uniform_int(1, 10);
        const Vector y = 4.0 * rng.normal_vector(2);
        const auto cond = ConditionSpec::linear(rng.normal_vector(2), 3.0 * rng.normal());
        const double before = cond.loss_value(tweedie_x0hat(src, y, t));
        const Vector moved = reparam_single(y, cond, 1e-3, src, t);
        CHECK(cond.loss_value(tweedie_x0hat(src, moved, t)) <= before + 1e-12);
    }
}

TEST_CASE("reparam_unconditional")
{
    const auto s = linear_beta_schedule(10, 1e-3, 0.3);
    const auto fam = family_of(testing::toy_mixture(), s);
    const auto src = ScoreSource::analytic(fam);
    const auto c1 = ConditionSpec::coordinate(2, 0, 10.0);
    const auto c2 = ConditionSpec::coordinate(2, 1, -4.0);
    Vector x(2);
    x << 1.5, -0.5;
    CHECK(reparam_unconditional(x, c1, c2, 0.0, 0.0, src, 5) == x);
    const auto flat = ConditionSpec::linear(Vector::Zero(2), 0.0);
    CHECK(reparam_unconditional(x, c1, flat, 0.3, 0.3, src, 5) == reparam_single(x, c1, 0.3, src, 5));
    const Vector ab = reparam_unconditional(x, c1, c2, 0.3, 0.3, src, 5);
    const Vector ba = reparam_unconditional(x, c2, c1, 0.3, 0.3, src, 5);
    MESSAGE("order sensitivity |x''(c1,c2) - x''(c2,c1)| = " << (ab - ba).norm());
    CHECK((ab - ba).norm() > 0.0);
}

TEST_CASE("multicondition sampler: zero strengths reduce to plain DDIM")
{
    const auto s = linear_beta_schedule(30, 1e-3, 0.3);
    const auto fam = family_of(testing::toy_mixture(), s);
    const auto src = ScoreSource::analytic(fam);
    const auto tls = TimeSource::analytic(fam);
    const auto c1 = ConditionSpec::coordinate(2, 0, 10.0);
    const auto c2 = ConditionSpec::coordinate(2, 1, 10.0);
    for (auto variant : {MulticondVariant::SinglePredictor, MulticondVariant::UncondPredictor}) {
        MulticondOptions o;
        o.variant = variant;
        o.times = ddim_time_grid(30, 10);
        SampleOptions plain;
        plain.kind = SamplerKind::Ddim;
        plain.ddim_times = o.times;
        const auto a = sample_multicond(src, &tls, c1, c2, o, 50, 3);
        const auto b = sample(src, plain, 50, 3);
        for (std::size_t i = 0; i < a.states.size(); ++i) {
            CHECK(a.states[i] == b.states[i]);
        }
    }
}

TEST_CASE("temporal alignment term is the analytic TLS at the shifted point")
{
    const auto s = linear_beta_schedule(30, 1e-3, 0.3);
    const auto fam = family_of(testing::toy_mixture(), s);
    const auto src = ScoreSource::analytic(fam);
    const auto tls = TimeSource::analytic(fam);
    const auto c1 = ConditionSpec::coordinate(2, 0, 10.0);
    const auto c2 = ConditionSpec::coordinate(2, 1, 10.0);
    const auto flat = ConditionSpec::linear(Vector::Zero(2), 0.0);
    Rng rng(6);
    double worst_single = 0.0, worst_equiv = 0.0;
    for (int i = 0; i < 100; ++i) {
        const int t = rng.uniform_int(1, 30);
        const Vector x = forward_perturb(sample(testing::toy_mixture(), 1, rng).col(0), t, s, rng);
        const double eta = 0.5 * rng.uniform();
        const Vector single = temporal_alignment(MulticondVariant::SinglePredictor, src, tls, c1, c2, x, t, eta, eta);
        const Vector oracle = tls_analytic(*fam, reparam_single(x, c1, eta, src, t), t);
        worst_single = std::max(worst_single, testing::rel_err(single, oracle, 1e-6));
        // the two algorithms coincide when the second stage has nothing to add
        const Vector uncond_flat =
            temporal_alignment(MulticondVariant::UncondPredictor, src, tls, c1, flat, x, t, eta, eta);
        const Vector uncond_zero =
            temporal_alignment(MulticondVariant::UncondPredictor, src, tls, c1, c2, x, t, eta, 0.0);
        worst_equiv = std::max({worst_equiv, testing::rel_err(uncond_flat, single, 1e-6),
                                testing::rel_err(uncond_zero, single, 1e-6)});
    }
    CHECK(worst_single < 1e-8);
    CHECK(worst_equiv < 1e-8);
}

TEST_CASE("TAG raises joint satisfaction over the naive guidance sum")
{
    const auto s = linear_beta_schedule(100, 1e-3, 0.2);
    const auto fam = family_of(testing::toy_mixture(), s);
    const auto src = ScoreSource::analytic(fam);
    const auto tls = TimeSource::analytic(fam);
    const auto c1 = ConditionSpec::coordinate(2, 0, 10.0);
    const auto c2 = ConditionSpec::coordinate(2, 1, 10.0);
    MulticondOptions naive;
    naive.rho = {OmegaKind::OneMinusAlphaBar, 0.2};
    const double base = joint_rate(sample_multicond(src, &tls, c1, c2, naive, 200, 7).terminal(), 10.0, 1.0);
    for (auto variant : {MulticondVariant::SinglePredictor, MulticondVariant::UncondPredictor}) {
        MulticondOptions with_tag = naive;
        with_tag.variant = variant;
        with_tag.omega = {OmegaKind::OneMinusAlphaBar, 1.0};
        const double rate = joint_rate(sample_multicond(src, &tls, c1, c2, with_tag, 200, 7).terminal(), 10.0, 1.0);
        MESSAGE(to_string(variant) << ": joint satisfaction " << rate << " vs naive " << base);
        CHECK(rate > base);
    }
}

TEST_CASE("summed conditional scores differ from the exact joint conditional")
{
    // isotropic Gaussian observations keep every conditional an exact mixture
    const auto s = linear_beta_schedule(100, 1e-3, 0.2);
    Matrix means(2, 3);
    means << -4.0, 0.0, 4.0, 0.0, 4.0, -2.0;
    const Mixture gm(Vector::Constant(3, 1.0 / 3.0), means, Vector::Constant(3, 1.5));
    Vector c1(2), c2(2);
    c1 << 2.0, 2.0;
    c2 << 3.0, -1.0;
    const auto p1 = observe(gm, c1, 4.0);
    const auto p2 = observe(gm, c2, 4.0);
    const auto joint = observe(p1, c2, 4.0);
    const auto naive = ScoreSource::sum(ScoreSource::analytic(family_of(p1, s)), ScoreSource::analytic(family_of(p2, s)));
    const auto exact = ScoreSource::analytic(family_of(joint, s));
    Rng rng(8);
    const Matrix reference = sample(joint, 4000, rng);
    const double self = sliced_w1(sample(exact, SampleOptions{}, 4000, 1).terminal(), reference);
    const double summed = sliced_w1(sample(naive, SampleOptions{}, 4000, 1).terminal(), reference);
    MESSAGE("exact-conditional self-distance " << self << ", summed-score distance " << summed);
    CHECK(summed > 3.0 * self);
}
