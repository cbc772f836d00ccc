#include <doctest.h>

#include <cmath>

#include "tag/mixture.hpp"
#include "tag/net.hpp"
#include "test_support.hpp"

using namespace tag;
using Net = Mlp<double>;

namespace {

// Straight-line reimplementation: loops over scalars, no Eigen products.
Vector reference_forward(const Net& net, const Vector& x)
{
    std::vector<double> h(x.data(), x.data() + x.size());
    for (std::size_t l = 0; l < net.layers(); ++l) {
        const auto& W = net.weight(l);
        std::vector<double> z(static_cast<std::size_t>(W.rows()));
        for (Eigen::Index r = 0; r < W.rows(); ++r) {
            double acc = net.bias(l)(r);
            for (Eigen::Index c = 0; c < W.cols(); ++c) {
                acc += W(r, c) * h[static_cast<std::size_t>(c)];
            }
            z[static_cast<std::size_t>(r)] = l + 1 < net.layers() ? std::tanh(acc) : acc;
        }
        h = z;
    }
    return Eigen::Map<Vector>(h.data(), static_cast<Eigen::Index>(h.size()));
}

double rel(double a, double b)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

} // namespace

TEST_CASE("forward: zero net, identity layer, duplicate arithmetic")
{
    Net zero({3, 5, 2}, Activation::Tanh);
    CHECK(zero.forward_one(Vector::Constant(3, 4.0)).isZero());

    Net id({4, 4}, Activation::Tanh);
    id.weight_mut(0) = Matrix::Identity(4, 4);
    Rng rng(1);
    const Vector x = rng.normal_vector(4);
    CHECK(id.forward_one(x) == x);

    const auto net = Net::init({2, 16, 3}, Activation::Tanh, rng);
    for (int i = 0; i < 20; ++i) {
        const Vector xi = 3.0 * rng.normal_vector(2);
        CHECK(testing::rel_err(net.forward_one(xi), reference_forward(net, xi), 1e-12) < 1e-13);
    }
    CHECK_THROWS_AS(net.forward(Matrix::Zero(3, 1)), std::invalid_argument);
}

TEST_CASE("backward: linear layer input gradient is W^T g")
{
    Rng rng(2);
    const auto net = Net::init({3, 2}, Activation::Tanh, rng);
    Net::Cache cache;
    net.forward(Matrix(rng.normal_vector(3)), &cache);
    const Vector g = rng.normal_vector(2);
    const auto grads = net.backward(cache, g);
    CHECK(testing::rel_err(grads.input.col(0), net.weight(0).transpose() * g) < 1e-15);
}

TEST_CASE("backward: stale and foreign caches are rejected")
{
    Rng rng(3);
    auto net = Net::init({2, 4, 1}, Activation::Tanh, rng);
    const auto other = Net::init({2, 4, 1}, Activation::Tanh, rng);
    Net::Cache cache;
    net.forward(Matrix::Ones(2, 1), &cache);
    CHECK_THROWS_AS(other.backward(cache, Matrix::Ones(1, 1)), std::logic_error);
    CHECK_THROWS_AS(net.backward(cache, Matrix::Ones(2, 1)), std::invalid_argument);
    net.bias_mut(0)(0) += 0.1;
    CHECK_THROWS_AS(net.backward(cache, Matrix::Ones(1, 1)), std::logic_error);
    Net::Cache empty;
    CHECK_THROWS_AS(net.backward(empty, Matrix::Ones(1, 1)), std::logic_error);
}

TEST_CASE("gradient check on randomized architectures")
{
    Rng rng(4);
    const double h = 1e-5;
    double worst = 0.0;
    for (int trial = 0; trial < 8; ++trial) {
        std::vector<int> dims{1 + rng.uniform_int(0, 3)};
        const int depth = rng.uniform_int(1, 3);
        for (int l = 0; l < depth; ++l) {
            dims.push_back(rng.uniform_int(1, 7));
        }
        auto net = Net::init(dims, Activation::Tanh, rng);
        const Matrix x = rng.normal_vector(dims.front() * 3).reshaped(dims.front(), 3);
        const Matrix g = rng.normal_vector(dims.back() * 3).reshaped(dims.back(), 3);
        const auto loss = [&](const Net& n, const Matrix& in) { return (n.forward(in).array() * g.array()).sum(); };
        Net::Cache cache;
        net.forward(x, &cache);
        const auto grads = net.backward(cache, g);

        for (std::size_t l = 0; l < net.layers(); ++l) {
            for (Eigen::Index i = 0; i < net.weight(l).size(); ++i) {
                const double keep = net.weight(l)(i);
                net.weight_mut(l)(i) = keep + h;
                const double up = loss(net, x);
                net.weight_mut(l)(i) = keep - h;
                const double down = loss(net, x);
                net.weight_mut(l)(i) = keep;
                worst = std::max(worst, rel(grads.weights[l](i), (up - down) / (2 * h)));
            }
            for (Eigen::Index i = 0; i < net.bias(l).size(); ++i) {
                const double keep = net.bias(l)(i);
                net.bias_mut(l)(i) = keep + h;
                const double up = loss(net, x);
                net.bias_mut(l)(i) = keep - h;
                const double down = loss(net, x);
                net.bias_mut(l)(i) = keep;
                worst = std::max(worst, rel(grads.biases[l](i), (up - down) / (2 * h)));
            }
        }
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            Matrix xp = x, xm = x;
            xp(i) += h;
            xm(i) -= h;
            worst = std::max(worst, rel(grads.input(i), (loss(net, xp) - loss(net, xm)) / (2 * h)));
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("softmax cross-entropy gradient is softmax minus onehot")
{
    Rng rng(5);
    Matrix logits = 2.0 * rng.normal_vector(15).reshaped(5, 3);
    const std::vector<int> labels{0, 4, 2};
    Matrix grad;
    const double loss = softmax_cross_entropy<double>(logits, labels, &grad);
    double expected = 0.0;
    for (int j = 0; j < 3; ++j) {
        const Vector p = logits.col(j).array().exp() / logits.col(j).array().exp().sum();
        expected -= std::log(p(labels[static_cast<std::size_t>(j)]));
        Vector onehot = Vector::Zero(5);
        onehot(labels[static_cast<std::size_t>(j)]) = 1.0;
        CHECK(testing::rel_err(3.0 * grad.col(j), p - onehot) < 1e-12);
    }
    CHECK(loss == doctest::Approx(expected / 3).epsilon(1e-12));
    CHECK_THROWS_AS(softmax_cross_entropy<double>(logits, {0, 5, 1}), std::out_of_range);
}

TEST_CASE("Adam first step moves every parameter by the learning rate")
{
    Rng rng(6);
    auto net = Net::init({2, 3, 1}, Activation::Tanh, rng);
    const auto before = net;
    AdamState<double> adam(net, 0.01);
    Net::Cache cache;
    net.forward(Matrix::Ones(2, 4), &cache);
    const auto grads = net.backward(cache, Matrix::Ones(1, 4));
    adam_update(net, adam, grads);
    CHECK(adam.step == 1);
    for (std::size_t l = 0; l < net.layers(); ++l) {
        for (Eigen::Index i = 0; i < net.weight(l).size(); ++i) {
            const double g = grads.weights[l](i);
            const double moved = before.weight(l)(i) - net.weight(l)(i);
            if (std::abs(g) > 1e-6) {
                CHECK(moved == doctest::Approx(0.01 * (g > 0 ? 1 : -1)).epsilon(1e-4));
            }
        }
    }
}

TEST_CASE("checkpoint round trip reproduces outputs bit-exactly")
{
    Rng rng(7);
    const auto net = Net::init({3, 8, 8, 2}, Activation::Tanh, rng);
    const auto back = Net::from_json(nlohmann::json::parse(net.to_json().dump()));
    const Matrix x = rng.normal_vector(30).reshaped(3, 10);
    CHECK(back.forward(x) == net.forward(x));
    CHECK(back.layer_dims() == net.layer_dims());

    const auto netf = Mlp<float>::init({2, 5, 2}, Activation::Tanh, rng);
    const auto backf = Mlp<float>::from_json(nlohmann::json::parse(netf.to_json().dump()));
    const Eigen::MatrixXf xf = Eigen::MatrixXf::Random(2, 6);
    CHECK(backf.forward(xf) == netf.forward(xf));

    auto bad = net.to_json();
    bad["weights"][0][0] = nullptr;
    CHECK_THROWS(Net::from_json(bad));
    bad = net.to_json();
    bad["biases"].erase(0);
    CHECK_THROWS_AS(Net::from_json(bad), std::invalid_argument);
    CHECK_THROWS_AS(parse_activation("relu6"), std::invalid_argument);
}

TEST_CASE("score model learns a constant target and is deterministic")
{
    const Matrix data = Matrix::Zero(2, 64);
    const auto s = linear_beta_schedule(10, 1e-4, 1e-3);
    const MlpArch arch{{16}, Activation::Tanh};
    const TrainConfig cfg{300, 1e-2, 0};
    const auto a = train_score_model<double>(data, s, arch, cfg, 11);
    const auto b = train_score_model<double>(data, s, arch, cfg, 11);
    for (std::size_t l = 0; l < a.model.layers(); ++l) {
        CHECK(a.model.weight(l) == b.model.weight(l));
        CHECK(a.model.bias(l) == b.model.bias(l));
    }
    CHECK(a.loss_history == b.loss_history);
    CHECK(a.loss_history.size() == 300);
    CHECK(a.model.input_width() == 2 + kTimeFeatures);

    // x_0 = 0 gives x_t = sqrt(1 - abar) eps, so eps is a function of (x_t, t); eps_hat = 0 scores 1
    double tail = 0.0;
    for (std::size_t i = 250; i < 300; ++i) {
        tail += a.loss_history[i] / 50;
    }
    CHECK(tail < 0.5);
    CHECK_THROWS_AS(train_score_model<double>(Matrix(2, 0), s, arch, cfg, 1), std::invalid_argument);
}

TEST_CASE("score model divergence is reported")
{
    Matrix data = Matrix::Zero(1, 4);
    data(0, 0) = std::numeric_limits<double>::infinity();
    const auto s = linear_beta_schedule(5, 1e-3, 1e-2);
    CHECK_THROWS_AS(train_score_model<double>(data, s, {{4}, Activation::Tanh}, {5, 1e-3, 0}, 1), TrainingDiverged);
}

TEST_CASE("single-class time predictor has zero loss and zero TLS")
{
    Rng rng(8);
    const Matrix data = rng.normal_vector(40).reshaped(2, 20);
    const auto s = linear_beta_schedule(1, 0.1, 0.1);
    const auto r = train_time_predictor<double>(data, s, {{8}, Activation::Tanh}, {3, 1e-3, 0}, 2);
    for (double l : r.loss_history) {
        CHECK(l == 0.0);
    }
    CHECK(r.step_accuracy == std::vector<double>{1.0});
    CHECK(predictor_tls(r.model, data, 1).isZero());
    CHECK_THROWS_AS(predictor_tls(r.model, data, 2), std::out_of_range);
    CHECK_THROWS_AS(predictor_tls(r.model, data, 0), std::out_of_range);
}

TEST_CASE("predictor_tls matches finite differences of log softmax")
{
    Rng rng(9);
    const auto net = Net::init({2, 12, 12, 7}, Activation::Tanh, rng);
    const auto log_prob = [&](const Vector& x, int t) {
        const Vector logits = net.forward_one(x);
        const double m = logits.maxCoeff();
        return logits(t - 1) - m - std::log((logits.array() - m).exp().sum());
    };
    for (int i = 0; i < 20; ++i) {
        const Vector x = 2.0 * rng.normal_vector(2);
        const int t = rng.uniform_int(1, 7);
        const Vector got = predictor_tls(net, Matrix(x), t).col(0);
        const Vector fd = testing::fd_gradient([&](const Vector& y) { return log_prob(y, t); }, x);
        CHECK(testing::rel_err(got, fd) < 1e-4);
    }
}

TEST_CASE("predictor_argmax picks the largest logit, ties to the smaller step")
{
    Net net({1, 3}, Activation::Tanh);
    net.bias_mut(0) << 0.5, 2.0, 2.0;
    CHECK(predictor_argmax(net, Matrix::Zero(1, 2)) == std::vector<int>{2, 2});
}

TEST_CASE("small time predictor on the toy mixture beats the constant baseline")
{
    Rng rng(10);
    const auto gm = testing::toy_mixture();
    const Matrix data = sample(gm, 2000, rng);
    const auto s = linear_beta_schedule(20, 1e-3, 0.4);
    const auto r = train_time_predictor<float>(data, s, {{32, 32}, Activation::Tanh}, {300, 3e-3, 0}, 3);
    // uniform guess over 20 classes has cross-entropy log(20)
    CHECK(r.loss_history.back() < 0.8 * std::log(20.0));
    CHECK(r.loss_history.back() < r.loss_history.front());
    CHECK(r.step_accuracy.size() == 20);

    // learned TLS points roughly along the analytic one
    const MixtureMarginals<double> fam(gm, s);
    double cos_sum = 0.0;
    int count = 0;
    for (int i = 0; i < 200; ++i) {
        const int t = rng.uniform_int(2, 19);
        const Vector x0 = sample(gm, 1, rng).col(0);
        const Vector x = forward_perturb(x0, t, s, rng);
        const Vector a = tls_analytic(fam, x, t);
        const Vector b = predictor_tls(r.model, Matrix(x), t).col(0);
        if (a.norm() > 1e-8 && b.norm() > 1e-8) {
            cos_sum += a.dot(b) / (a.norm() * b.norm());
            ++count;
        }
    }
    CHECK(count > 100);
    CHECK(cos_sum / count > 0.5);
}
