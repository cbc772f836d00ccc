#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "tag/mixture.hpp"
#include "tag/net.hpp"
#include "tag/random.hpp"
#include "tag/schedule.hpp"

namespace tag {

/// Raised when a sampler meets a non-finite drift, score or state.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Family = MixtureMarginals<double>;

/// Score of the forward marginal p_t with one calling contract for the
/// analytic oracle and learned models. Batches are d x n matrices.
class ScoreSource {
public:
    using BatchFn = std::function<Matrix(const Matrix& x, int t)>;

    static ScoreSource analytic(std::shared_ptr<const Family> family);

    /// eps-prediction network converted by eps_to_score; valid for t >= 1.
    template <typename Scalar>
    static ScoreSource learned(Mlp<Scalar> eps_model, NoiseSchedule schedule)
    {
        auto model = std::make_shared<const Mlp<Scalar>>(std::move(eps_model));
        const int total = schedule.steps();
        auto sched = std::make_shared<const NoiseSchedule>(schedule);
        BatchFn fn = [model, sched, total](const Matrix& x, int t) -> Matrix {
            if (t < 1 || t > total) {
                throw std::out_of_range("learned score: step outside [1, T]");
            }
            const std::vector<int> steps(static_cast<std::size_t>(x.cols()), t);
            using MatrixS = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
            const MatrixS eps = model->forward(score_model_input<Scalar>(x.cast<Scalar>(), steps, total));
            return -eps.template cast<double>() / std::sqrt(1.0 - sched->alpha_bar(t));
        };
        const auto dim = static_cast<Eigen::Index>(model->output_width());
        return ScoreSource(std::move(fn), std::move(schedule), nullptr, dim);
    }

    /// Arbitrary batched score function on points of dimension `dim`.
    static ScoreSource custom(BatchFn fn, NoiseSchedule schedule, Eigen::Index dim);

    /// Pointwise sum of two sources on the same schedule.
    static ScoreSource sum(const ScoreSource& a, const ScoreSource& b);

    Matrix score(const Matrix& x, int t) const;
    Vector score_one(const Vector& x, int t) const;

    const NoiseSchedule& schedule() const { return schedule_; }
    Eigen::Index dim() const { return dim_; }
    /// The mixture family behind an analytic source; null otherwise.
    const Family* oracle() const { return family_.get(); }

private:
    ScoreSource(BatchFn fn, NoiseSchedule schedule, std::shared_ptr<const Family> family, Eigen::Index dim)
        : fn_(std::move(fn)), schedule_(std::move(schedule)), family_(std::move(family)), dim_(dim)
    {
    }

    BatchFn fn_;
    NoiseSchedule schedule_;
    std::shared_ptr<const Family> family_;
    Eigen::Index dim_ = 0;
};

/// Time-linked score grad_x log p(t | x) and the argmax time, from the
/// analytic posterior or a trained time predictor.
class TimeSource {
public:
    static TimeSource analytic(std::shared_ptr<const Family> family);

    template <typename Scalar>
    static TimeSource predictor(Mlp<Scalar> model)
    {
        auto net = std::make_shared<const Mlp<Scalar>>(std::move(model));
        TimeSource out;
        out.steps_ = net->output_width();
        out.tls_ = [net](const Matrix& x, int t) { return predictor_tls(*net, x, t); };
        out.argmax_ = [net](const Matrix& x) { return predictor_argmax(*net, x); };
        return out;
    }

    /// TLS at step t in [1, T] for each column.
    Matrix tls(const Matrix& x, int t) const;
    Vector tls_one(const Vector& x, int t) const;
    /// argmax_t p(t | x) per column (1-based; ties to the smaller step).
    std::vector<int> argmax(const Matrix& x) const;
    int steps() const { return steps_; }

private:
    std::function<Matrix(const Matrix&, int)> tls_;
    std::function<std::vector<int>(const Matrix&)> argmax_;
    int steps_ = 0;
};

/// States of a batch of trajectories, column j being trajectory j.
///
/// states[i] is the batch at time index times[i]; times runs from T down to 0.
/// guidance[i] is the TAG displacement applied on arrival at states[i]
/// (zero for i = 0 and where no guidance was applied).
struct TrajectorySet {
    std::vector<int> times;
    std::vector<Matrix> states;
    std::vector<Matrix> guidance;
    /// predicted_times[i][j]: monitored argmax time of states[i] column j; empty when unmonitored.
    std::vector<std::vector<int>> predicted_times;
    std::vector<std::uint64_t> seeds;
    std::uint64_t seed = 0;

    Eigen::Index size() const { return states.empty() ? 0 : states.front().cols(); }
    const Matrix& terminal() const { return states.back(); }
};

/// x0_hat = (x + (1 - abar) s) / sqrt(abar).
Vector tweedie_x0hat(const Vector& x, const Vector& score, double alpha_bar);
Vector tweedie_x0hat(const ScoreSource& src, const Vector& x, int t);

/// x_{t-1} = (x + beta s) / sqrt(1 - beta) + sqrt(beta) z.
Vector ddpm_step_with_noise(const ScoreSource& src, const Vector& x, int t, const Vector& z);
Vector ddpm_step(const ScoreSource& src, const Vector& x, int t, Rng& rng);

/// Deterministic DDIM move from t to t_prev < t.
Vector ddim_step(const ScoreSource& src, const Vector& x, int t, int t_prev);

enum class SamplerKind { Ddpm, Ddim };

SamplerKind parse_sampler_kind(const std::string& name);
std::string to_string(SamplerKind kind);

struct OmegaConfig {
    OmegaKind kind = OmegaKind::OneMinusAlphaBar;
    double omega0 = 0.0;
};

using PointDrift = std::function<Vector(const Vector& x, int t)>;

struct SampleOptions {
    SamplerKind kind = SamplerKind::Ddpm;
    /// DDIM only: strictly decreasing time indices from T to 0; empty means every step.
    std::vector<int> ddim_times;
    OmegaConfig omega;
    /// TLS used by TAG; required when omega0 != 0.
    const TimeSource* tls = nullptr;
    /// DDIM: apply TAG after the final move with target step 1 instead of skipping it.
    bool clamp_final_target = false;
    /// External displacement v(x_t, t) added to each reverse step.
    PointDrift drift;
    /// Corruption strength: x_t += sigma eps before each reverse step.
    double sigma = 0.0;
    /// Records argmax times of every state with t >= 1 when set.
    const TimeSource* monitor = nullptr;
    int workers = 1;
};

/// Reverse sampling from x_T ~ N(0, I) with optional corruption, drift and TAG.
///
/// Per step t: x += sigma eps; x~ = step(x) + v(x, t);
/// x = x~ + omega(t) TLS(x~, t_prev) when t_prev >= 1 (or clamped, see options).
/// Trajectory j draws from Rng(derive_seed(seed, j)) and the result does not
/// depend on `workers`.
TrajectorySet sample(const ScoreSource& src, const SampleOptions& options, int n, std::uint64_t seed);

TrajectorySet sample_with_tag(const ScoreSource& src, const TimeSource& tls, const OmegaConfig& omega,
                              SamplerKind kind, int n, std::uint64_t seed, int workers = 1);
TrajectorySet sample_with_drift(const ScoreSource& src, const PointDrift& drift, int n, std::uint64_t seed,
                                int workers = 1);
TrajectorySet sample_corrupted(const ScoreSource& src, const TimeSource& tls, double sigma, const OmegaConfig& omega,
                               int n, std::uint64_t seed, int workers = 1);

/// Evenly spaced DDIM time indices T = tau_0 > ... > tau_steps = 0.
std::vector<int> ddim_time_grid(int total_steps, int sampling_steps);

/// Euler-Maruyama Langevin step x + h drift + sqrt(2h) z with drift s_k.
Vector langevin_step_with_noise(const ScoreSource& src, const Vector& x, int k, double h, const Vector& z);
Vector langevin_step(const ScoreSource& src, const Vector& x, int k, double h, Rng& rng);

/// TAG-modified Langevin drift s_k - sum_{i != k} gamma_i s_i.
Vector modified_langevin_drift(const Family& fam, const Vector& x, int k);
Vector modified_langevin_step_with_noise(const Family& fam, const Vector& x, int k, double h, const Vector& z);
Vector modified_langevin_step(const Family& fam, const Vector& x, int k, double h, Rng& rng);

enum class LangevinKind { Plain, Modified };

struct EscapeConfig {
    LangevinKind kind = LangevinKind::Plain;
    int k = 1;
    /// Exit threshold on p_k; <= 0 selects 1e-3 times the peak density of p_k.
    double epsilon = 0.0;
    double h = 1e-2;
    int max_steps = 10000;
    int trials = 500;
    std::uint64_t seed = 0;
    /// Draws one initial point.
    std::function<Vector(Rng&)> init;
    int workers = 1;
};

struct EscapeResult {
    /// First step with p_k(x) > epsilon, one per uncensored trial in trial order.
    std::vector<int> exit_steps;
    int censored = 0;
    int trials = 0;
    double epsilon = 0.0;
    /// Over uncensored trials; NaN when every trial is censored.
    double mean = 0.0;
    double median = 0.0;
    bool all_censored() const { return censored == trials; }
};

/// Largest density of a mixture among its component means.
double peak_density(const Mixture& gm);

EscapeResult estimate_escape_time(const Family& fam, const EscapeConfig& config);

/// Extra per-state CSV column computed from the state.
struct TrajectoryColumn {
    std::string name;
    std::function<double(const Vector&)> value;
};

/// One row per state per trajectory: run_id, trajectory, step, x0..x{d-1},
/// predicted_time, guidance_norm, then any extra columns.
void write_trajectory_csv(std::ostream& out, const TrajectorySet& set, const std::string& run_id,
                          const std::vector<TrajectoryColumn>& extra = {});

} // namespace tag
