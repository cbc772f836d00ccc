#include "tag/mixture.hpp"

namespace tag {

double drift_energy_bound(const MixtureMarginals<double>& fam, const DriftFn& drift, int n_mc, std::uint64_t seed)
{
    if (n_mc < 1) {
        throw std::invalid_argument("drift_energy_bound: n_mc must be >= 1");
    }
    const int steps = fam.steps();
    std::vector<double> integrand(static_cast<std::size_t>(steps));
    for (int t = 1; t <= steps; ++t) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
        const Matrix xs = sample(fam.at(t), n_mc, rng);
        double acc = 0.0;
        for (Eigen::Index j = 0; j < xs.cols(); ++j) {
            const Vector v = drift(xs.col(j), t);
            if (!v.allFinite()) {
                throw std::runtime_error("drift_energy_bound: non-finite drift");
            }
            acc += v.squaredNorm();
        }
        integrand[static_cast<std::size_t>(t - 1)] = acc / n_mc / fam.schedule().beta(t);
    }
    if (steps == 1) {
        return 0.5 * integrand[0];
    }
    double total = 0.5 * (integrand.front() + integrand.back());
    for (int t = 2; t < steps; ++t) {
        total += integrand[static_cast<std::size_t>(t - 1)];
    }
    return 0.5 * total;
}

} // namespace tag
