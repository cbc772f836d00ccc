#include "tag/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace tag {

namespace {

double gap_from(const TrajectorySet& set, const std::vector<std::vector<int>>& pred)
{
    if (set.size() == 0) {
        throw std::invalid_argument("time_gap: empty trajectory set");
    }
    double total = 0.0;
    for (Eigen::Index j = 0; j < set.size(); ++j) {
        double sum = 0.0;
        int count = 0;
        for (std::size_t i = 0; i < set.times.size(); ++i) {
            if (set.times[i] >= 1) {
                sum += std::abs(pred[i][static_cast<std::size_t>(j)] - set.times[i]);
                ++count;
            }
        }
        if (count == 0) {
            throw std::invalid_argument("time_gap: no states with t >= 1");
        }
        total += sum / count;
    }
    return total / static_cast<double>(set.size());
}

std::vector<std::vector<int>> predict_all(const TrajectorySet& set, const TimeSource& source)
{
    std::vector<std::vector<int>> pred(set.times.size());
    for (std::size_t i = 0; i < set.times.size(); ++i) {
        if (set.times[i] >= 1) {
            pred[i] = source.argmax(set.states[i]);
        }
    }
    return pred;
}

std::vector<double> ranks(const std::vector<double>& v)
{
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

Matrix subsample(const Matrix& m, Eigen::Index cap, Rng& rng)
{
    if (m.cols() <= cap) {
        return m;
    }
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.cols()));
    std::iota(idx.begin(), idx.end(), 0);
    // partial Fisher-Yates
    for (Eigen::Index i = 0; i < cap; ++i) {
        const auto j = i + static_cast<Eigen::Index>(rng.uniform() * static_cast<double>(m.cols() - i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(std::min(j, m.cols() - 1))]);
    }
    Matrix out(m.rows(), cap);
    for (Eigen::Index i = 0; i < cap; ++i) {
        out.col(i) = m.col(idx[static_cast<std::size_t>(i)]);
    }
    return out;
}

} // namespace

double time_gap(const TrajectorySet& set)
{
    if (set.predicted_times.size() != set.times.size()) {
        throw std::invalid_argument("time_gap: trajectory set has no recorded predicted times");
    }
    return gap_from(set, set.predicted_times);
}

double time_gap(const TrajectorySet& set, const TimeSource& source)
{
    return gap_from(set, predict_all(set, source));
}

std::vector<double> time_gap_profile(const TrajectorySet& set, const TimeSource& source)
{
    if (set.size() == 0) {
        throw std::invalid_argument("time_gap_profile: empty trajectory set");
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < set.times.size(); ++i) {
        if (set.times[i] < 1) {
            continue;
        }
        const auto pred = source.argmax(set.states[i]);
        double sum = 0.0;
        for (int p : pred) {
            sum += std::abs(p - set.times[i]);
        }
        out.push_back(sum / static_cast<double>(pred.size()));
    }
    return out;
}

double w1_1d(std::vector<double> a, std::vector<double> b)
{
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("w1_1d: empty sample");
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a.size() == b.size()) {
        double sum = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            sum += std::abs(a[i] - b[i]);
        }
        return sum / static_cast<double>(a.size());
    }
    // integrate |F_a^{-1}(u) - F_b^{-1}(u)| over the merged breakpoints of both quantile functions
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double u = 0.0, sum = 0.0;
    while (i < a.size() && j < b.size()) {
        const double next_a = static_cast<double>(i + 1) / na;
        const double next_b = static_cast<double>(j + 1) / nb;
        const double next = std::min(next_a, next_b);
        sum += (next - u) * std::abs(a[i] - b[j]);
        u = next;
        if (next_a <= next) {
            ++i;
        }
        if (next_b <= next) {
            ++j;
        }
    }
    return sum;
}

double sliced_w1(const Matrix& a, const Matrix& b, int n_projections, std::uint64_t seed, Eigen::Index cap)
{
    if (a.rows() != b.rows()) {
        throw std::invalid_argument("sliced_w1: dimension mismatch");
    }
    if (a.cols() == 0 || b.cols() == 0) {
        throw std::invalid_argument("sliced_w1: empty sample set");
    }
    if (n_projections < 1 || cap < 1) {
        throw std::invalid_argument("sliced_w1: need positive projection count and cap");
    }
    Rng sub_a(derive_seed(seed, 1)), sub_b(derive_seed(seed, 2)), dirs(derive_seed(seed, 0));
    const Matrix sa = subsample(a, cap, sub_a);
    const Matrix sb = subsample(b, cap, sub_b);
    double total = 0.0;
    for (int p = 0; p < n_projections; ++p) {
        Vector u = dirs.normal_vector(a.rows());
        while (u.norm() == 0.0) {
            u = dirs.normal_vector(a.rows());
        }
        u.normalize();
        const Vector pa = sa.transpose() * u;
        const Vector pb = sb.transpose() * u;
        total += w1_1d(std::vector<double>(pa.data(), pa.data() + pa.size()),
                       std::vector<double>(pb.data(), pb.data() + pb.size()));
    }
    return total / n_projections;
}

double mixture_nll(const Mixture& gm, const Matrix& samples)
{
    if (samples.cols() == 0) {
        throw std::invalid_argument("mixture_nll: empty sample set");
    }
    double sum = 0.0;
    for (Eigen::Index j = 0; j < samples.cols(); ++j) {
        sum -= log_density(gm, samples.col(j));
    }
    return sum / static_cast<double>(samples.cols());
}

double spearman(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size() || a.size() < 2) {
        throw std::invalid_argument("spearman: need two equal-length sequences of length >= 2");
    }
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) {
        return 0.0;
    }
    return cov / std::sqrt(va * vb);
}

MannWhitney mann_whitney_less(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("mann_whitney_less: empty sample");
    }
    std::vector<double> all(a);
    all.insert(all.end(), b.begin(), b.end());
    const auto r = ranks(all);
    const double n1 = static_cast<double>(a.size());
    const double n2 = static_cast<double>(b.size());
    const double r1 = std::accumulate(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(a.size()), 0.0);
    MannWhitney out;
    out.u = r1 - n1 * (n1 + 1.0) / 2.0;
    // tie correction
    std::vector<double> sorted(all);
    std::sort(sorted.begin(), sorted.end());
    double ties = 0.0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) {
            ++j;
        }
        const double t = static_cast<double>(j - i + 1);
        ties += t * t * t - t;
        i = j + 1;
    }
    const double n = n1 + n2;
    const double var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    const double mean = n1 * n2 / 2.0;
    if (var <= 0.0) {
        out.z = 0.0;
        out.p_less = 0.5;
        return out;
    }
    // continuity correction toward the null
    out.z = (out.u - mean + 0.5) / std::sqrt(var);
    out.p_less = 0.5 * std::erfc(-out.z / std::sqrt(2.0));
    return out;
}

nlohmann::json RunSummary::to_json() const
{
    return {{"run_id", run_id},
            {"time_gap_mean", time_gap_mean},
            {"time_gap_profile", time_gap_profile},
            {"sliced_w1", sliced_w1},
            {"nll", nll},
            {"config_hash", config_hash},
            {"seed", seed},
            {"projections", projections},
            {"subsample_cap", subsample_cap}};
}

std::string RunSummary::csv_header()
{
    return "run_id,time_gap_mean,sliced_w1,nll,config_hash,seed,projections,subsample_cap";
}

std::string RunSummary::csv_row() const
{
    std::ostringstream os;
    os.precision(10);
    os << run_id << ',' << time_gap_mean << ',' << sliced_w1 << ',' << nll << ',' << config_hash << ',' << seed << ','
       << projections << ',' << subsample_cap;
    return os.str();
}

std::string config_hash(const nlohmann::json& config)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace tag
