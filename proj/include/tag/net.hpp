#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "tag/random.hpp"
#include "tag/schedule.hpp"

namespace tag {

enum class Activation { Tanh, Identity };

Activation parse_activation(const std::string& name);
std::string to_string(Activation act);

/// Thrown when a training loss turns non-finite.
class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense feedforward network; hidden layers use `activation`, the output layer is affine.
///
/// Batches are matrices whose columns are samples.
template <typename Scalar>
class Mlp {
public:
    using VectorS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MatrixS = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    struct Cache {
        std::vector<MatrixS> inputs; // input to each layer
        std::vector<MatrixS> hidden; // post-activation of each hidden layer
        const Mlp* owner = nullptr;
        std::uint64_t generation = 0;
    };

    struct Gradients {
        std::vector<MatrixS> weights;
        std::vector<VectorS> biases;
        MatrixS input;
    };

    Mlp() = default;

    /// Zero-initialized network.
    Mlp(std::vector<int> layer_dims, Activation activation) : dims_(std::move(layer_dims)), activation_(activation)
    {
        if (dims_.size() < 2) {
            throw std::invalid_argument("Mlp: need at least input and output widths");
        }
        for (int d : dims_) {
            if (d < 1) {
                throw std::invalid_argument("Mlp: layer widths must be positive");
            }
        }
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            weights_.push_back(MatrixS::Zero(dims_[l + 1], dims_[l]));
            biases_.push_back(VectorS::Zero(dims_[l + 1]));
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
    static Mlp init(std::vector<int> layer_dims, Activation activation, Rng& rng)
    {
        Mlp net(std::move(layer_dims), activation);
        for (std::size_t l = 0; l < net.weights_.size(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(net.dims_[l]));
            for (Eigen::Index i = 0; i < net.weights_[l].size(); ++i) {
                net.weights_[l](i) = static_cast<Scalar>(bound * (2.0 * rng.uniform() - 1.0));
            }
            for (Eigen::Index i = 0; i < net.biases_[l].size(); ++i) {
                net.biases_[l](i) = static_cast<Scalar>(bound * (2.0 * rng.uniform() - 1.0));
            }
        }
        return net;
    }

    const std::vector<int>& layer_dims() const { return dims_; }
    int input_width() const { return dims_.front(); }
    int output_width() const { return dims_.back(); }
    std::size_t layers() const { return weights_.size(); }
    Activation activation() const { return activation_; }

    const MatrixS& weight(std::size_t l) const { return weights_.at(l); }
    const VectorS& bias(std::size_t l) const { return biases_.at(l); }

    /// Mutable parameter access; invalidates outstanding caches.
    MatrixS& weight_mut(std::size_t l)
    {
        touch();
        return weights_.at(l);
    }
    VectorS& bias_mut(std::size_t l)
    {
        touch();
        return biases_.at(l);
    }

    bool all_finite() const
    {
        for (std::size_t l = 0; l < layers(); ++l) {
            if (!weights_[l].allFinite() || !biases_[l].allFinite()) {
                return false;
            }
        }
        return true;
    }

    MatrixS forward(const MatrixS& input, Cache* cache = nullptr) const
    {
        if (input.rows() != input_width()) {
            throw std::invalid_argument("Mlp::forward: input width " + std::to_string(input.rows()) + " != " +
                                        std::to_string(input_width()));
        }
        if (cache) {
            cache->inputs.clear();
            cache->hidden.clear();
            cache->owner = this;
            cache->generation = generation_;
        }
        MatrixS h = input;
        for (std::size_t l = 0; l < layers(); ++l) {
            if (cache) {
                cache->inputs.push_back(h);
            }
            MatrixS z = weights_[l] * h;
            z.colwise() += biases_[l];
            if (l + 1 < layers()) {
                apply_activation(z);
                if (cache) {
                    cache->hidden.push_back(z);
                }
            }
            h = std::move(z);
        }
        return h;
    }

    VectorS forward_one(const VectorS& input) const { return forward(MatrixS(input)).col(0); }

    /// Reverse-mode gradients of sum(output_grad .* output) for the cached batch.
    Gradients backward(const Cache& cache, const MatrixS& output_grad) const
    {
        if (cache.owner != this || cache.generation != generation_ || cache.inputs.size() != layers()) {
            throw std::logic_error("Mlp::backward: stale or foreign cache");
        }
        if (output_grad.rows() != output_width() || output_grad.cols() != cache.inputs.front().cols()) {
            throw std::invalid_argument("Mlp::backward: output gradient shape mismatch");
        }
        Gradients g;
        g.weights.resize(layers());
        g.biases.resize(layers());
        MatrixS delta = output_grad;
        for (std::size_t l = layers(); l-- > 0;) {
            g.weights[l].noalias() = delta * cache.inputs[l].transpose();
            g.biases[l] = delta.rowwise().sum();
            MatrixS back = weights_[l].transpose() * delta;
            if (l > 0) {
                apply_activation_derivative(back, cache.hidden[l - 1]);
            }
            delta = std::move(back);
        }
        g.input = std::move(delta);
        return g;
    }

    nlohmann::json to_json() const
    {
        nlohmann::json w = nlohmann::json::array();
        nlohmann::json b = nlohmann::json::array();
        for (std::size_t l = 0; l < layers(); ++l) {
            std::vector<double> rows;
            rows.reserve(static_cast<std::size_t>(weights_[l].size()));
            for (Eigen::Index r = 0; r < weights_[l].rows(); ++r) {
                for (Eigen::Index c = 0; c < weights_[l].cols(); ++c) {
                    rows.push_back(static_cast<double>(weights_[l](r, c)));
                }
            }
            w.push_back(rows);
            std::vector<double> bias(static_cast<std::size_t>(biases_[l].size()));
            for (Eigen::Index i = 0; i < biases_[l].size(); ++i) {
                bias[static_cast<std::size_t>(i)] = static_cast<double>(biases_[l](i));
            }
            b.push_back(bias);
        }
        return {{"layer_dims", dims_}, {"activation", to_string(activation_)}, {"weights", w}, {"biases", b}};
    }

    static Mlp from_json(const nlohmann::json& j)
    {
        Mlp net(j.at("layer_dims").get<std::vector<int>>(), parse_activation(j.at("activation").get<std::string>()));
        const auto& w = j.at("weights");
        const auto& b = j.at("biases");
        if (w.size() != net.layers() || b.size() != net.layers()) {
            throw std::invalid_argument("Mlp checkpoint: layer count mismatch");
        }
        for (std::size_t l = 0; l < net.layers(); ++l) {
            const auto rows = w[l].get<std::vector<double>>();
            const auto bias = b[l].get<std::vector<double>>();
            auto& W = net.weights_[l];
            if (rows.size() != static_cast<std::size_t>(W.size()) || bias.size() != static_cast<std::size_t>(W.rows())) {
                throw std::invalid_argument("Mlp checkpoint: parameter shape mismatch");
            }
            for (Eigen::Index r = 0; r < W.rows(); ++r) {
                for (Eigen::Index c = 0; c < W.cols(); ++c) {
                    W(r, c) = static_cast<Scalar>(rows[static_cast<std::size_t>(r * W.cols() + c)]);
                }
            }
            for (std::size_t i = 0; i < bias.size(); ++i) {
                net.biases_[l](static_cast<Eigen::Index>(i)) = static_cast<Scalar>(bias[i]);
            }
        }
        if (!net.all_finite()) {
            throw std::invalid_argument("Mlp checkpoint: non-finite parameter");
        }
        return net;
    }

private:
    void touch() { generation_ = next_generation(); }

    static std::uint64_t next_generation()
    {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    void apply_activation(MatrixS& z) const
    {
        if (activation_ == Activation::Tanh) {
            z = z.array().tanh().matrix();
        }
    }

    // back *= f'(z) expressed through the activation value h = f(z)
    void apply_activation_derivative(MatrixS& back, const MatrixS& h) const
    {
        if (activation_ == Activation::Tanh) {
            back.array() *= Scalar(1) - h.array().square();
        }
    }

    std::vector<int> dims_;
    std::vector<MatrixS> weights_;
    std::vector<VectorS> biases_;
    Activation activation_ = Activation::Tanh;
    std::uint64_t generation_ = next_generation();
};

/// Adam moments shaped like the network parameters.
template <typename Scalar>
struct AdamState {
    using MatrixS = typename Mlp<Scalar>::MatrixS;
    using VectorS = typename Mlp<Scalar>::VectorS;

    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t step = 0;
    std::vector<MatrixS> m_w, v_w;
    std::vector<VectorS> m_b, v_b;

    AdamState() = default;
    AdamState(const Mlp<Scalar>& net, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
        : learning_rate(lr), beta1(b1), beta2(b2), epsilon(eps)
    {
        for (std::size_t l = 0; l < net.layers(); ++l) {
            m_w.push_back(MatrixS::Zero(net.weight(l).rows(), net.weight(l).cols()));
            v_w.push_back(m_w.back());
            m_b.push_back(VectorS::Zero(net.bias(l).size()));
            v_b.push_back(m_b.back());
        }
    }
};

template <typename Scalar>
void adam_update(Mlp<Scalar>& net, AdamState<Scalar>& state, const typename Mlp<Scalar>::Gradients& grads)
{
    if (state.m_w.size() != net.layers()) {
        throw std::invalid_argument("adam_update: state does not match network");
    }
    ++state.step;
    const auto b1 = static_cast<Scalar>(state.beta1);
    const auto b2 = static_cast<Scalar>(state.beta2);
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const auto lr = static_cast<Scalar>(state.learning_rate * std::sqrt(c2) / c1);
    const auto eps = static_cast<Scalar>(state.epsilon * std::sqrt(c2));
    const auto apply = [&](auto& param, auto& m, auto& v, const auto& g) {
        m = b1 * m + (Scalar(1) - b1) * g;
        v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
        param.array() -= lr * m.array() / (v.array().sqrt() + eps);
    };
    for (std::size_t l = 0; l < net.layers(); ++l) {
        apply(net.weight_mut(l), state.m_w[l], state.v_w[l], grads.weights[l]);
        apply(net.bias_mut(l), state.m_b[l], state.v_b[l], grads.biases[l]);
    }
}

/// Width of the score model's time features: t/T plus 4 sine/cosine pairs.
inline constexpr int kTimeFeatures = 9;

/// [t/T, sin(pi 2^k t/T), cos(pi 2^k t/T)] for k = 0..3.
template <typename Scalar>
Eigen::Matrix<Scalar, kTimeFeatures, 1> time_features(int t, int steps)
{
    Eigen::Matrix<Scalar, kTimeFeatures, 1> f;
    const double u = static_cast<double>(t) / steps;
    f(0) = static_cast<Scalar>(u);
    for (int k = 0; k < 4; ++k) {
        const double arg = std::numbers::pi * static_cast<double>(1 << k) * u;
        f(1 + 2 * k) = static_cast<Scalar>(std::sin(arg));
        f(2 + 2 * k) = static_cast<Scalar>(std::cos(arg));
    }
    return f;
}

/// Softmax over each column.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> softmax_columns(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& logits)
{
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> p = logits;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
        p.col(j).array() -= p.col(j).maxCoeff();
        p.col(j) = p.col(j).array().exp().matrix();
        p.col(j) /= p.col(j).sum();
    }
    return p;
}

/// Mean softmax cross-entropy of columns against integer labels in [0, classes);
/// `grad` receives d(loss)/d(logits) = (softmax - onehot) / n.
template <typename Scalar>
double softmax_cross_entropy(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& logits,
                             const std::vector<int>& labels,
                             Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>* grad = nullptr)
{
    if (static_cast<Eigen::Index>(labels.size()) != logits.cols()) {
        throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    }
    const auto n = static_cast<double>(logits.cols());
    double loss = 0.0;
    if (grad) {
        *grad = softmax_columns(logits);
    }
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const int y = labels[static_cast<std::size_t>(j)];
        if (y < 0 || y >= logits.rows()) {
            throw std::out_of_range("softmax_cross_entropy: label out of range");
        }
        const double m = static_cast<double>(logits.col(j).maxCoeff());
        const double lse = m + std::log((logits.col(j).template cast<double>().array() - m).exp().sum());
        loss += lse - static_cast<double>(logits(y, j));
        if (grad) {
            (*grad)(y, j) -= Scalar(1);
        }
    }
    if (grad) {
        *grad /= static_cast<Scalar>(n);
    }
    return loss / n;
}

struct MlpArch {
    std::vector<int> hidden;
    Activation activation = Activation::Tanh;
};

struct TrainConfig {
    int epochs = 1000;
    double learning_rate = 1e-3;
    /// 0 means full batch.
    int batch_size = 0;
};

template <typename Scalar>
struct TrainResult {
    Mlp<Scalar> model;
    std::vector<double> loss_history;
    /// Time predictor only: accuracy per step on the final epoch's batch (entry t-1).
    std::vector<double> step_accuracy;
};

namespace detail {

inline std::vector<int> full_dims(int in, const MlpArch& arch, int out)
{
    std::vector<int> dims{in};
    dims.insert(dims.end(), arch.hidden.begin(), arch.hidden.end());
    dims.push_back(out);
    return dims;
}

/// Forward-noised batch: columns x_t for uniformly drawn steps.
template <typename Scalar>
void noised_batch(const Eigen::MatrixXd& data, const NoiseSchedule& schedule, Rng& rng,
                  const std::vector<Eigen::Index>& idx, std::vector<int>& steps,
                  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& xt,
                  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& eps)
{
    const auto n = static_cast<Eigen::Index>(idx.size());
    const auto d = data.rows();
    xt.resize(d, n);
    eps.resize(d, n);
    steps.resize(idx.size());
    for (Eigen::Index j = 0; j < n; ++j) {
        const int t = rng.uniform_int(1, schedule.steps());
        steps[static_cast<std::size_t>(j)] = t;
        const double abar = schedule.alpha_bar(t);
        const double a = std::sqrt(abar);
        const double b = std::sqrt(1.0 - abar);
        for (Eigen::Index r = 0; r < d; ++r) {
            const double e = rng.normal();
            eps(r, j) = static_cast<Scalar>(e);
            xt(r, j) = static_cast<Scalar>(a * data(r, idx[static_cast<std::size_t>(j)]) + b * e);
        }
    }
}

inline std::vector<std::vector<Eigen::Index>> epoch_batches(Eigen::Index n, int batch_size, Rng& rng)
{
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    if (batch_size <= 0 || batch_size >= n) {
        return {order};
    }
    for (Eigen::Index i = n - 1; i > 0; --i) {
        std::swap(order[static_cast<std::size_t>(i)],
                  order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
    }
    std::vector<std::vector<Eigen::Index>> out;
    for (Eigen::Index s = 0; s < n; s += batch_size) {
        const auto e = std::min<Eigen::Index>(n, s + batch_size);
        out.emplace_back(order.begin() + s, order.begin() + e);
    }
    return out;
}

} // namespace detail

/// Score-model input for a batch of points at step t: [x; time features].
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> score_model_input(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& x, const std::vector<int>& steps, int total_steps)
{
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> in(x.rows() + kTimeFeatures, x.cols());
    in.topRows(x.rows()) = x;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        in.col(j).tail(kTimeFeatures) = time_features<Scalar>(steps[static_cast<std::size_t>(j)], total_steps);
    }
    return in;
}

/// Denoising score matching in the eps parameterization (constant weighting):
/// minimizes mean |eps_hat(x_t, t) - eps|^2 over uniformly drawn steps.
/// `data` holds one sample per column.
template <typename Scalar>
TrainResult<Scalar> train_score_model(const Eigen::MatrixXd& data, const NoiseSchedule& schedule, const MlpArch& arch,
                                      const TrainConfig& config, std::uint64_t seed)
{
    if (data.cols() == 0) {
        throw std::invalid_argument("train_score_model: empty data");
    }
    const int d = static_cast<int>(data.rows());
    Rng init_rng(derive_seed(seed, 0));
    Rng rng(derive_seed(seed, 1));
    TrainResult<Scalar> out{Mlp<Scalar>::init(detail::full_dims(d + kTimeFeatures, arch, d), arch.activation, init_rng),
                            {},
                            {}};
    AdamState<Scalar> adam(out.model, config.learning_rate);
    typename Mlp<Scalar>::Cache cache;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> xt, eps;
    std::vector<int> steps;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        double epoch_loss = 0.0;
        const auto batches = detail::epoch_batches(data.cols(), config.batch_size, rng);
        for (const auto& idx : batches) {
            detail::noised_batch(data, schedule, rng, idx, steps, xt, eps);
            const auto pred = out.model.forward(score_model_input<Scalar>(xt, steps, schedule.steps()), &cache);
            const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> diff = pred - eps;
            const double loss = static_cast<double>(diff.squaredNorm()) / static_cast<double>(diff.size());
            if (!std::isfinite(loss)) {
                throw TrainingDiverged("train_score_model: non-finite loss at epoch " + std::to_string(epoch));
            }
            epoch_loss += loss * static_cast<double>(idx.size());
            const auto grads = out.model.backward(cache, (Scalar(2) / static_cast<Scalar>(diff.size())) * diff);
            adam_update(out.model, adam, grads);
        }
        out.loss_history.push_back(epoch_loss / static_cast<double>(data.cols()));
    }
    return out;
}

/// Timestep classifier: x_t -> logits over steps 1..T, softmax cross-entropy
/// against one-hot labels.
template <typename Scalar>
TrainResult<Scalar> train_time_predictor(const Eigen::MatrixXd& data, const NoiseSchedule& schedule,
                                         const MlpArch& arch, const TrainConfig& config, std::uint64_t seed)
{
    if (data.cols() == 0) {
        throw std::invalid_argument("train_time_predictor: empty data");
    }
    const int d = static_cast<int>(data.rows());
    const int classes = schedule.steps();
    Rng init_rng(derive_seed(seed, 0));
    Rng rng(derive_seed(seed, 1));
    TrainResult<Scalar> out{Mlp<Scalar>::init(detail::full_dims(d, arch, classes), arch.activation, init_rng), {}, {}};
    AdamState<Scalar> adam(out.model, config.learning_rate);
    typename Mlp<Scalar>::Cache cache;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> xt, eps, grad;
    std::vector<int> steps, labels;
    std::vector<double> hits(static_cast<std::size_t>(classes)), seen(static_cast<std::size_t>(classes));
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const bool last = epoch + 1 == config.epochs;
        double epoch_loss = 0.0;
        const auto batches = detail::epoch_batches(data.cols(), config.batch_size, rng);
        for (const auto& idx : batches) {
            detail::noised_batch(data, schedule, rng, idx, steps, xt, eps);
            labels.resize(steps.size());
            for (std::size_t j = 0; j < steps.size(); ++j) {
                labels[j] = steps[j] - 1;
            }
            const auto logits = out.model.forward(xt, &cache);
            const double loss = softmax_cross_entropy<Scalar>(logits, labels, &grad);
            if (!std::isfinite(loss)) {
                throw TrainingDiverged("train_time_predictor: non-finite loss at epoch " + std::to_string(epoch));
            }
            epoch_loss += loss * static_cast<double>(idx.size());
            if (last) {
                for (Eigen::Index j = 0; j < logits.cols(); ++j) {
                    Eigen::Index best = 0;
                    logits.col(j).maxCoeff(&best);
                    const auto y = static_cast<std::size_t>(labels[static_cast<std::size_t>(j)]);
                    seen[y] += 1.0;
                    hits[y] += static_cast<double>(best) == static_cast<double>(y) ? 1.0 : 0.0;
                }
            }
            adam_update(out.model, adam, out.model.backward(cache, grad));
        }
        out.loss_history.push_back(epoch_loss / static_cast<double>(data.cols()));
    }
    out.step_accuracy.resize(static_cast<std::size_t>(classes));
    for (std::size_t c = 0; c < out.step_accuracy.size(); ++c) {
        out.step_accuracy[c] = seen[c] > 0 ? hits[c] / seen[c] : 0.0;
    }
    return out;
}

/// grad_x log softmax(phi(x))_t for each column of `x`; t in [1, T].
template <typename Scalar>
Eigen::MatrixXd predictor_tls(const Mlp<Scalar>& predictor, const Eigen::MatrixXd& x, int t)
{
    const int classes = predictor.output_width();
    if (t < 1 || t > classes) {
        throw std::out_of_range("predictor_tls: step outside [1, T]");
    }
    typename Mlp<Scalar>::Cache cache;
    const auto logits = predictor.forward(x.cast<Scalar>(), &cache);
    // d log softmax_t / d logits = onehot_t - softmax
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> g = -softmax_columns<Scalar>(logits);
    g.row(t - 1).array() += Scalar(1);
    return predictor.backward(cache, g).input.template cast<double>();
}

/// Argmax over predictor classes (1-based steps), ties to the smaller index.
template <typename Scalar>
std::vector<int> predictor_argmax(const Mlp<Scalar>& predictor, const Eigen::MatrixXd& x)
{
    const auto logits = predictor.forward(x.cast<Scalar>());
    std::vector<int> out(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < logits.rows(); ++i) {
            if (logits(i, j) > logits(best, j)) {
                best = i;
            }
        }
        out[static_cast<std::size_t>(j)] = static_cast<int>(best) + 1;
    }
    return out;
}

} // namespace tag
