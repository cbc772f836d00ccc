#include "tag/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "tag/parallel.hpp"

namespace tag {

namespace {

constexpr Eigen::Index kChunk = 256;

void require_finite(const Matrix& m, const char* what)
{
    if (!m.allFinite()) {
        throw NumericalError(std::string("non-finite ") + what);
    }
}

} // namespace

ScoreSource ScoreSource::analytic(std::shared_ptr<const Family> family)
{
    if (!family) {
        throw std::invalid_argument("ScoreSource::analytic: null family");
    }
    BatchFn fn = [family](const Matrix& x, int t) {
        const auto& gm = family->at(t);
        Matrix out(x.rows(), x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            out.col(j) = tag::score(gm, x.col(j));
        }
        return out;
    };
    NoiseSchedule sched = family->schedule();
    const Eigen::Index dim = family->dim();
    return ScoreSource(std::move(fn), std::move(sched), std::move(family), dim);
}

ScoreSource ScoreSource::custom(BatchFn fn, NoiseSchedule schedule, Eigen::Index dim)
{
    if (!fn || dim < 1) {
        throw std::invalid_argument("ScoreSource::custom: empty function or bad dimension");
    }
    return ScoreSource(std::move(fn), std::move(schedule), nullptr, dim);
}

ScoreSource ScoreSource::sum(const ScoreSource& a, const ScoreSource& b)
{
    if (a.schedule().alpha_bars() != b.schedule().alpha_bars() || a.dim() != b.dim()) {
        throw std::invalid_argument("ScoreSource::sum: schedules or dimensions differ");
    }
    BatchFn fa = a.fn_;
    BatchFn fb = b.fn_;
    return custom([fa, fb](const Matrix& x, int t) -> Matrix { return fa(x, t) + fb(x, t); }, a.schedule(), a.dim());
}

Matrix ScoreSource::score(const Matrix& x, int t) const
{
    if (t < 0 || t > schedule_.steps()) {
        throw std::out_of_range("ScoreSource: step outside [0, T]");
    }
    return fn_(x, t);
}

Vector ScoreSource::score_one(const Vector& x, int t) const
{
    return score(Matrix(x), t).col(0);
}

TimeSource TimeSource::analytic(std::shared_ptr<const Family> family)
{
    if (!family) {
        throw std::invalid_argument("TimeSource::analytic: null family");
    }
    TimeSource out;
    out.steps_ = family->steps();
    out.tls_ = [family](const Matrix& x, int t) {
        Matrix g(x.rows(), x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            g.col(j) = tls_analytic(*family, x.col(j), t);
        }
        return g;
    };
    out.argmax_ = [family](const Matrix& x) {
        std::vector<int> a(static_cast<std::size_t>(x.cols()));
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            a[static_cast<std::size_t>(j)] = time_posterior(*family, x.col(j)).argmax();
        }
        return a;
    };
    return out;
}

Matrix TimeSource::tls(const Matrix& x, int t) const
{
    if (t < 1 || t > steps_) {
        throw std::out_of_range("TimeSource::tls: step outside [1, T]");
    }
    return tls_(x, t);
}

Vector TimeSource::tls_one(const Vector& x, int t) const
{
    return tls(Matrix(x), t).col(0);
}

std::vector<int> TimeSource::argmax(const Matrix& x) const
{
    return argmax_(x);
}

Vector tweedie_x0hat(const Vector& x, const Vector& score, double alpha_bar)
{
    if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) {
        throw std::invalid_argument("tweedie_x0hat: alpha_bar must lie in (0, 1]");
    }
    return (x + (1.0 - alpha_bar) * score) / std::sqrt(alpha_bar);
}

Vector tweedie_x0hat(const ScoreSource& src, const Vector& x, int t)
{
    return tweedie_x0hat(x, src.score_one(x, t), src.schedule().alpha_bar(t));
}

namespace {

Matrix ddpm_mean(const Matrix& x, const Matrix& s, double beta)
{
    return (x + beta * s) / std::sqrt(1.0 - beta);
}

Matrix ddim_move(const Matrix& x, const Matrix& s, double abar, double abar_prev)
{
    const Matrix x0 = (x + (1.0 - abar) * s) / std::sqrt(abar);
    if (abar_prev == 1.0) {
        return x0;
    }
    // eps_hat = -sqrt(1 - abar) s
    return std::sqrt(abar_prev) * x0 - std::sqrt(1.0 - abar_prev) * std::sqrt(1.0 - abar) * s;
}

} // namespace

Vector ddpm_step_with_noise(const ScoreSource& src, const Vector& x, int t, const Vector& z)
{
    if (t < 1 || t > src.schedule().steps()) {
        throw std::out_of_range("ddpm_step: step outside [1, T]");
    }
    const double beta = src.schedule().beta(t);
    return ddpm_mean(Matrix(x), src.score(Matrix(x), t), beta).col(0) + std::sqrt(beta) * z;
}

Vector ddpm_step(const ScoreSource& src, const Vector& x, int t, Rng& rng)
{
    return ddpm_step_with_noise(src, x, t, rng.normal_vector(x.size()));
}

Vector ddim_step(const ScoreSource& src, const Vector& x, int t, int t_prev)
{
    const auto& s = src.schedule();
    if (t < 1 || t > s.steps() || t_prev < 0 || t_prev >= t) {
        throw std::invalid_argument("ddim_step: need 0 <= t_prev < t <= T");
    }
    return ddim_move(Matrix(x), src.score(Matrix(x), t), s.alpha_bar(t), s.alpha_bar(t_prev)).col(0);
}

SamplerKind parse_sampler_kind(const std::string& name)
{
    if (name == "ddpm") {
        return SamplerKind::Ddpm;
    }
    if (name == "ddim") {
        return SamplerKind::Ddim;
    }
    throw std::invalid_argument("unknown sampler kind: " + name);
}

std::string to_string(SamplerKind kind)
{
    return kind == SamplerKind::Ddpm ? "ddpm" : "ddim";
}

std::vector<int> ddim_time_grid(int total_steps, int sampling_steps)
{
    if (sampling_steps < 1 || sampling_steps > total_steps) {
        throw std::invalid_argument("ddim_time_grid: need 1 <= steps <= T");
    }
    std::vector<int> times;
    for (int i = 0; i <= sampling_steps; ++i) {
        const double u = static_cast<double>(sampling_steps - i) / sampling_steps;
        times.push_back(static_cast<int>(std::lround(u * total_steps)));
    }
    return times;
}

TrajectorySet sample(const ScoreSource& src, const SampleOptions& options, int n, std::uint64_t seed)
{
    const auto& sched = src.schedule();
    const int T = sched.steps();
    if (n < 1) {
        throw std::invalid_argument("sample: need n >= 1");
    }
    if (!(options.sigma >= 0.0)) {
        throw std::invalid_argument("sample: sigma must be nonnegative");
    }
    if (options.omega.omega0 != 0.0 && options.tls == nullptr) {
        throw std::invalid_argument("sample: TAG strength set without a TLS source");
    }
    const Eigen::Index dim = src.dim();

    std::vector<int> times;
    if (options.kind == SamplerKind::Ddim && !options.ddim_times.empty()) {
        times = options.ddim_times;
        if (times.front() != T || times.back() != 0) {
            throw std::invalid_argument("sample: DDIM times must run from T to 0");
        }
        for (std::size_t i = 1; i < times.size(); ++i) {
            if (times[i] >= times[i - 1]) {
                throw std::invalid_argument("sample: DDIM times must strictly decrease");
            }
        }
    } else {
        for (int t = T; t >= 0; --t) {
            times.push_back(t);
        }
    }
    TrajectorySet set;
    set.seed = seed;
    set.times = times;
    for (int j = 0; j < n; ++j) {
        set.seeds.push_back(derive_seed(seed, static_cast<std::uint64_t>(j)));
    }
    const auto chunks = static_cast<std::size_t>((n + kChunk - 1) / kChunk);
    std::vector<std::vector<Matrix>> chunk_states(chunks), chunk_guidance(chunks);
    std::vector<std::vector<std::vector<int>>> chunk_pred(chunks);

    parallel_for(chunks, options.workers, [&](std::size_t c) {
        const Eigen::Index begin = static_cast<Eigen::Index>(c) * kChunk;
        const Eigen::Index len = std::min<Eigen::Index>(kChunk, n - begin);
        std::vector<Rng> rngs;
        rngs.reserve(static_cast<std::size_t>(len));
        for (Eigen::Index j = 0; j < len; ++j) {
            rngs.emplace_back(set.seeds[static_cast<std::size_t>(begin + j)]);
        }
        Matrix x(dim, len);
        for (Eigen::Index j = 0; j < len; ++j) {
            x.col(j) = rngs[static_cast<std::size_t>(j)].normal_vector(dim);
        }
        auto& states = chunk_states[c];
        auto& guidance = chunk_guidance[c];
        auto& pred = chunk_pred[c];
        states.push_back(x);
        guidance.push_back(Matrix::Zero(dim, len));
        if (options.monitor) {
            pred.push_back(options.monitor->argmax(x));
        }
        for (std::size_t i = 0; i + 1 < times.size(); ++i) {
            const int t = times[i];
            const int tp = times[i + 1];
            if (options.sigma > 0.0) {
                for (Eigen::Index j = 0; j < len; ++j) {
                    x.col(j) += options.sigma * rngs[static_cast<std::size_t>(j)].normal_vector(dim);
                }
            }
            const Matrix s = src.score(x, t);
            require_finite(s, "score");
            Matrix next;
            if (options.kind == SamplerKind::Ddpm) {
                const double beta = sched.beta(t);
                next = ddpm_mean(x, s, beta);
                const double root = std::sqrt(beta);
                for (Eigen::Index j = 0; j < len; ++j) {
                    next.col(j) += root * rngs[static_cast<std::size_t>(j)].normal_vector(dim);
                }
            } else {
                next = ddim_move(x, s, sched.alpha_bar(t), sched.alpha_bar(tp));
            }
            if (options.drift) {
                for (Eigen::Index j = 0; j < len; ++j) {
                    const Vector v = options.drift(x.col(j), t);
                    if (v.size() != dim || !v.allFinite()) {
                        throw NumericalError("non-finite or misshaped drift at step " + std::to_string(t));
                    }
                    next.col(j) += v;
                }
            }
            Matrix g = Matrix::Zero(dim, len);
            int target = tp;
            if (target == 0 && options.clamp_final_target) {
                target = 1;
            }
            if (options.omega.omega0 != 0.0 && target >= 1) {
                const double w = omega_schedule(options.omega.kind, options.omega.omega0, t, sched);
                if (w != 0.0) {
                    g = w * options.tls->tls(next, target);
                    require_finite(g, "time-linked score");
                    next += g;
                }
            }
            require_finite(next, "state");
            x = std::move(next);
            states.push_back(x);
            guidance.push_back(std::move(g));
            if (options.monitor) {
                pred.push_back(tp >= 1 ? options.monitor->argmax(x) : std::vector<int>(static_cast<std::size_t>(len), 0));
            }
        }
    });

    for (std::size_t i = 0; i < times.size(); ++i) {
        Matrix st(dim, n), gd(dim, n);
        std::vector<int> pr;
        for (std::size_t c = 0; c < chunks; ++c) {
            const Eigen::Index begin = static_cast<Eigen::Index>(c) * kChunk;
            const Eigen::Index len = chunk_states[c][i].cols();
            st.middleCols(begin, len) = chunk_states[c][i];
            gd.middleCols(begin, len) = chunk_guidance[c][i];
            if (options.monitor) {
                pr.insert(pr.end(), chunk_pred[c][i].begin(), chunk_pred[c][i].end());
            }
        }
        set.states.push_back(std::move(st));
        set.guidance.push_back(std::move(gd));
        if (options.monitor) {
            set.predicted_times.push_back(std::move(pr));
        }
    }
    return set;
}

TrajectorySet sample_with_tag(const ScoreSource& src, const TimeSource& tls, const OmegaConfig& omega,
                              SamplerKind kind, int n, std::uint64_t seed, int workers)
{
    SampleOptions o;
    o.kind = kind;
    o.omega = omega;
    o.tls = &tls;
    o.workers = workers;
    return sample(src, o, n, seed);
}

TrajectorySet sample_with_drift(const ScoreSource& src, const PointDrift& drift, int n, std::uint64_t seed,
                                int workers)
{
    SampleOptions o;
    o.drift = drift;
    o.workers = workers;
    return sample(src, o, n, seed);
}

TrajectorySet sample_corrupted(const ScoreSource& src, const TimeSource& tls, double sigma, const OmegaConfig& omega,
                               int n, std::uint64_t seed, int workers)
{
    SampleOptions o;
    o.sigma = sigma;
    o.omega = omega;
    o.tls = &tls;
    o.workers = workers;
    return sample(src, o, n, seed);
}

Vector langevin_step_with_noise(const ScoreSource& src, const Vector& x, int k, double h, const Vector& z)
{
    if (!(h > 0.0)) {
        throw std::invalid_argument("langevin_step: step size must be positive");
    }
    return x + h * src.score_one(x, k) + std::sqrt(2.0 * h) * z;
}

Vector langevin_step(const ScoreSource& src, const Vector& x, int k, double h, Rng& rng)
{
    return langevin_step_with_noise(src, x, k, h, rng.normal_vector(x.size()));
}

Vector modified_langevin_drift(const Family& fam, const Vector& x, int k)
{
    fam.check_step(k);
    const auto gamma = detail::normalized_weights<double>(fam.log_marginals(x));
    const Matrix s = fam.scores(x);
    Vector out = s.col(k - 1);
    for (int i = 1; i <= fam.steps(); ++i) {
        if (i != k) {
            out -= gamma(i - 1) * s.col(i - 1);
        }
    }
    return out;
}

Vector modified_langevin_step_with_noise(const Family& fam, const Vector& x, int k, double h, const Vector& z)
{
    if (!(h > 0.0)) {
        throw std::invalid_argument("modified_langevin_step: step size must be positive");
    }
    return x + h * modified_langevin_drift(fam, x, k) + std::sqrt(2.0 * h) * z;
}

Vector modified_langevin_step(const Family& fam, const Vector& x, int k, double h, Rng& rng)
{
    return modified_langevin_step_with_noise(fam, x, k, h, rng.normal_vector(x.size()));
}

double peak_density(const Mixture& gm)
{
    double best = 0.0;
    for (Eigen::Index i = 0; i < gm.components(); ++i) {
        best = std::max(best, std::exp(log_density(gm, gm.means().col(i))));
    }
    return best;
}

EscapeResult estimate_escape_time(const Family& fam, const EscapeConfig& config)
{
    fam.check_step(config.k);
    if (!config.init) {
        throw std::invalid_argument("estimate_escape_time: no initial distribution");
    }
    if (config.trials < 1 || config.max_steps < 0 || !(config.h > 0.0)) {
        throw std::invalid_argument("estimate_escape_time: bad trial count, step budget or step size");
    }
    const auto& pk = fam.at(config.k);
    EscapeResult out;
    out.trials = config.trials;
    out.epsilon = config.epsilon > 0.0 ? config.epsilon : 1e-3 * peak_density(pk);
    const double log_eps = std::log(out.epsilon);

    std::vector<int> exit(static_cast<std::size_t>(config.trials), -1);
    parallel_for(exit.size(), config.workers, [&](std::size_t i) {
        Rng rng(derive_seed(config.seed, i));
        Vector x = config.init(rng);
        for (int step = 0; step <= config.max_steps; ++step) {
            if (step > 0) {
                const Vector z = rng.normal_vector(x.size());
                const Vector drift =
                    config.kind == LangevinKind::Plain ? Vector(score(pk, x)) : modified_langevin_drift(fam, x, config.k);
                x += config.h * drift + std::sqrt(2.0 * config.h) * z;
                if (!x.allFinite()) {
                    throw NumericalError("estimate_escape_time: non-finite state");
                }
            }
            if (log_density(pk, x) > log_eps) {
                exit[i] = step;
                return;
            }
        }
    });
    for (int e : exit) {
        if (e < 0) {
            ++out.censored;
        } else {
            out.exit_steps.push_back(e);
        }
    }
    if (out.exit_steps.empty()) {
        out.mean = out.median = std::numeric_limits<double>::quiet_NaN();
        return out;
    }
    double sum = 0.0;
    for (int e : out.exit_steps) {
        sum += e;
    }
    out.mean = sum / static_cast<double>(out.exit_steps.size());
    std::vector<int> sorted = out.exit_steps;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    out.median = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    return out;
}

void write_trajectory_csv(std::ostream& out, const TrajectorySet& set, const std::string& run_id,
                          const std::vector<TrajectoryColumn>& extra)
{
    if (set.states.empty()) {
        return;
    }
    const Eigen::Index d = set.states.front().rows();
    out << "run_id,trajectory,step";
    for (Eigen::Index r = 0; r < d; ++r) {
        out << ",x" << r;
    }
    out << ",predicted_time,guidance_norm";
    for (const auto& c : extra) {
        out << ',' << c.name;
    }
    out << '\n';
    out.precision(17);
    for (Eigen::Index j = 0; j < set.size(); ++j) {
        for (std::size_t i = 0; i < set.states.size(); ++i) {
            out << run_id << ',' << j << ',' << set.times[i];
            for (Eigen::Index r = 0; r < d; ++r) {
                out << ',' << set.states[i](r, j);
            }
            out << ',';
            if (!set.predicted_times.empty() && set.times[i] >= 1) {
                out << set.predicted_times[i][static_cast<std::size_t>(j)];
            }
            out << ',' << set.guidance[i].col(j).norm();
            for (const auto& c : extra) {
                out << ',' << c.value(set.states[i].col(j));
            }
            out << '\n';
        }
    }
}

} // namespace tag
