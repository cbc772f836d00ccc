#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tag/mixture.hpp"
#include "tag/sampler.hpp"

namespace tag {

inline constexpr int kSlicedProjections = 64;
inline constexpr Eigen::Index kSlicedSubsample = 2048;

/// Mean over trajectories of (1/T) sum_{t=1..T} |predicted(x_t) - t|, using
/// the argmax times recorded in the set.
double time_gap(const TrajectorySet& set);

/// Same, recomputing argmax times with `source` for every state with t >= 1.
double time_gap(const TrajectorySet& set, const TimeSource& source);

/// Mean |predicted - t| at each recorded time index t >= 1 (aligned with set.times).
std::vector<double> time_gap_profile(const TrajectorySet& set, const TimeSource& source);

/// Sliced Wasserstein-1 between the columns of two sample sets: the average
/// over fixed random unit directions of the exact 1D W1 of the projections.
/// Sets larger than `cap` are subsampled without replacement; unequal sizes
/// use the quantile-function form of 1D W1.
double sliced_w1(const Matrix& a, const Matrix& b, int n_projections = kSlicedProjections, std::uint64_t seed = 0,
                 Eigen::Index cap = kSlicedSubsample);

/// Exact 1D W1 between two empirical distributions.
double w1_1d(std::vector<double> a, std::vector<double> b);

/// -mean log p(x) over the columns of `samples`.
double mixture_nll(const Mixture& gm, const Matrix& samples);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct MannWhitney {
    double u = 0.0;
    double z = 0.0;
    /// One-sided p-value for the alternative "a tends to be smaller than b".
    double p_less = 1.0;
};

/// Mann-Whitney U test (normal approximation with tie correction).
MannWhitney mann_whitney_less(const std::vector<double>& a, const std::vector<double>& b);

struct RunSummary {
    std::string run_id;
    double time_gap_mean = 0.0;
    std::vector<double> time_gap_profile;
    double sliced_w1 = 0.0;
    double nll = 0.0;
    std::string config_hash;
    std::uint64_t seed = 0;
    int projections = kSlicedProjections;
    Eigen::Index subsample_cap = kSlicedSubsample;

    nlohmann::json to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

/// 16 hex digits of FNV-1a over the compact dump of `config`.
std::string config_hash(const nlohmann::json& config);

} // namespace tag
