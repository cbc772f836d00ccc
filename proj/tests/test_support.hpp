#pragma once

// Shared generators and independent oracles for the test suites.

#include <cmath>
#include <functional>
#include <numbers>

#include "tag/mixture.hpp"
#include "tag/random.hpp"
#include "tag/schedule.hpp"

namespace tag::testing {

inline Mixture random_mixture(Rng& rng, int dim, int components, double spread = 4.0)
{
    Vector w(components);
    for (int i = 0; i < components; ++i) {
        w(i) = 0.2 + rng.uniform();
    }
    w /= w.sum();
    Matrix means(dim, components);
    for (int i = 0; i < components; ++i) {
        means.col(i) = spread * rng.normal_vector(dim);
    }
    Vector var(components);
    for (int i = 0; i < components; ++i) {
        var(i) = 0.2 + 1.5 * rng.uniform();
    }
    return Mixture(w, means, var);
}

inline NoiseSchedule random_schedule(Rng& rng, int steps)
{
    const double lo = 1e-3 + 0.05 * rng.uniform();
    const double hi = std::min(0.6, lo + 0.4 * rng.uniform());
    return linear_beta_schedule(steps, lo, hi);
}

/// Mixture log-density by direct summation of pdf values; independent of the
/// log-sum-exp path in the library.
inline double naive_log_pdf(const Mixture& gm, const Vector& x)
{
    double p = 0.0;
    const double d = static_cast<double>(gm.dim());
    for (Eigen::Index i = 0; i < gm.components(); ++i) {
        const double var = gm.variances()(i);
        const double sq = (x - gm.means().col(i)).squaredNorm();
        p += gm.weights()(i) * std::exp(-0.5 * sq / var) / std::pow(2.0 * std::numbers::pi * var, d / 2.0);
    }
    return std::log(p);
}

/// Central-difference gradient of a scalar function of a point.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h = 1e-5)
{
    Vector g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Vector xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        g(i) = (f(xp) - f(xm)) / (2.0 * h);
    }
    return g;
}

/// max |a - b| / max(|b|_inf, floor)
inline double rel_err(const Vector& a, const Vector& b, double floor = 1e-6)
{
    return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), floor);
}

/// Two unit Gaussians at (10,10) and (-10,-10), equal weights.
inline Mixture toy_mixture()
{
    Matrix means(2, 2);
    means << 10.0, -10.0, 10.0, -10.0;
    return Mixture(Vector::Constant(2, 0.5), means, Vector::Ones(2));
}

} // namespace tag::testing
