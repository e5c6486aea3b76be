#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "s2il/net.hpp"

using namespace s2il;
using Catch::Approx;

namespace {

NetConfig tiny_net() {
    NetConfig cfg;
    cfg.input_size = 8;
    cfg.input_channels = 1;
    cfg.channels = {4, 6};
    cfg.proxies_per_class = 2;
    return cfg;
}

Tensor random_input(const NetConfig& cfg, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Tensor::randn({n, cfg.input_channels, cfg.input_size, cfg.input_size}, rng);
}

std::vector<double> unit(std::size_t dim, std::size_t axis) {
    std::vector<double> v(dim, 0.0);
    v[axis] = 1.0;
    return v;
}

}  // namespace

TEST_CASE("zero weights map any input to zero features", "[net]") {
    Model m = Model::init(tiny_net(), 1);
    for (ConvBlock& blk : m.blocks)
        std::fill(blk.weight.mutable_value().begin(), blk.weight.mutable_value().end(), 0.0);
    const FeatureBundle b = m.forward(random_input(m.cfg, 2, 5));
    for (const Tensor& layer : b.layers)
        for (double v : layer.value()) REQUIRE(v == 0.0);
    for (double v : b.pooled.value()) REQUIRE(v == 0.0);
}

TEST_CASE("score tensor has shape batch x classes", "[net]") {
    Model m = Model::init(tiny_net(), 1);
    std::mt19937_64 rng(2);
    m.head.add_classes_random({0, 1, 2}, rng);
    const FeatureBundle b = m.forward(random_input(m.cfg, 5, 6));
    REQUIRE(b.scores.shape() == Shape{5, 3});
    REQUIRE(b.pooled.shape() == Shape{5, m.cfg.feature_dim()});
    REQUIRE_THROWS_AS(m.forward(Tensor::zeros({1, 1, 9, 9})), DimensionError);
}

TEST_CASE("forward is deterministic for fixed weights and input", "[net]") {
    Model m = Model::init(tiny_net(), 3);
    std::mt19937_64 rng(4);
    m.head.add_classes_random({0, 1}, rng);
    const Tensor x = random_input(m.cfg, 3, 7);
    const FeatureBundle a = m.forward(x);
    const FeatureBundle b = m.forward(x);
    REQUIRE(a.scores.value() == b.scores.value());
    REQUIRE(a.pooled.value() == b.pooled.value());
}

TEST_CASE("final feature maps keep at least 2x2 spatial extent", "[net]") {
    NetConfig cfg = tiny_net();
    cfg.input_size = 8;
    cfg.channels = {4, 4, 4};  // two pools: 8 -> 4 -> 2
    REQUIRE(cfg.final_spatial() == 2);
    REQUIRE_NOTHROW(cfg.validate());
    cfg.channels = {4, 4, 4, 4};  // three pools would leave 1x1
    REQUIRE_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("growing by zero classes leaves the head unchanged", "[net]") {
    Model m = Model::init(tiny_net(), 5);
    std::mt19937_64 rng(6);
    m.head.add_classes_random({0, 1}, rng);
    const auto before = m.head.proxies().value();
    REQUIRE(m.head.add_classes_imprinted({}, {}, rng, 0.01).empty());
    REQUIRE(m.head.proxies().value() == before);
    REQUIRE(m.head.num_classes() == 2);
}

TEST_CASE("imprinted growth adds unit proxies and preserves old rows bitwise", "[net]") {
    NetConfig cfg = tiny_net();
    cfg.proxies_per_class = 10;
    Model m = Model::init(cfg, 7);
    std::mt19937_64 rng(8);
    m.head.add_classes_random({0}, rng);
    const auto before = m.head.proxies().value();
    const std::size_t d = cfg.feature_dim();

    std::vector<std::vector<double>> embeddings = {unit(d, 0), unit(d, 1)};
    for (auto& e : embeddings)
        for (double& v : e) v *= 3.7;  // non-unit means get normalized
    const auto fallbacks = m.head.add_classes_imprinted({1, 2}, embeddings, rng, 0.01);
    REQUIRE(fallbacks.empty());
    REQUIRE(m.head.num_classes() == 3);
    REQUIRE(m.head.proxies().shape() == Shape{30, d});

    // old rows untouched
    for (std::size_t i = 0; i < before.size(); ++i)
        REQUIRE(m.head.proxies().value()[i] == before[i]);

    // new proxies unit-norm and aligned with their class mean
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t p = 0; p < 10; ++p) {
            const std::size_t row = 10 + c * 10 + p;
            double norm = 0.0, cosine = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double v = m.head.proxies().value()[row * d + j];
                norm += v * v;
                cosine += v * (embeddings[c][j] / 3.7);
            }
            REQUIRE(std::sqrt(norm) == Approx(1.0).margin(1e-12));
            REQUIRE(cosine > 0.99);
        }
}

TEST_CASE("duplicate class ids and zero embeddings", "[net]") {
    Model m = Model::init(tiny_net(), 9);
    std::mt19937_64 rng(10);
    m.head.add_classes_random({0}, rng);
    REQUIRE_THROWS_AS(m.head.add_classes_random({0}, rng), ContractError);

    const std::size_t d = m.cfg.feature_dim();
    const auto fallbacks =
        m.head.add_classes_imprinted({7}, {std::vector<double>(d, 0.0)}, rng, 0.01);
    REQUIRE(fallbacks == std::vector<int>{7});
    // fallback proxies are still unit-norm
    const std::size_t rows = m.head.proxies().shape()[0];
    for (std::size_t p = rows - m.head.proxies_per_class(); p < rows; ++p) {
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = m.head.proxies().value()[p * d + j];
            norm += v * v;
        }
        REQUIRE(std::sqrt(norm) == Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("head growth preserves old-class scores exactly", "[net]") {
    Model m = Model::init(tiny_net(), 11);
    std::mt19937_64 rng(12);
    m.head.add_classes_random({0, 1}, rng);
    const Tensor x = random_input(m.cfg, 4, 13);
    const auto before = m.forward(x).scores.value();

    const std::size_t d = m.cfg.feature_dim();
    m.head.add_classes_imprinted({2}, {unit(d, 2)}, rng, 0.01);
    const auto after = m.forward(x).scores.value();

    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 2; ++c) REQUIRE(after[i * 3 + c] == before[i * 2 + c]);
}

TEST_CASE("lsc loss with a single class is the zero constant", "[net]") {
    Model m = Model::init(tiny_net(), 14);
    std::mt19937_64 rng(15);
    m.head.add_classes_random({0}, rng);
    const FeatureBundle b = m.forward(random_input(m.cfg, 3, 16));
    REQUIRE(lsc_loss(b, {0, 0, 0}, m.head).item() == 0.0);

    // independent of proxy direction
    for (double& v : m.head.proxies().mutable_value()) v = -v;
    const FeatureBundle b2 = m.forward(random_input(m.cfg, 3, 16));
    REQUIRE(lsc_loss(b2, {0, 0, 0}, m.head).item() == 0.0);
}

TEST_CASE("lsc loss margin-shifted floor for a perfectly aligned feature", "[net]") {
    // one proxy per class; feature equals the true proxy, distractor orthogonal
    ProxyHead head(1, 4, 0.6, 1.0);
    std::mt19937_64 rng(17);
    head.add_classes_imprinted({0, 1}, {unit(4, 0), unit(4, 1)}, rng, 0.0);
    const double eta = 40.0;
    head.scale().mutable_value()[0] = eta;

    FeatureBundle b;
    b.pooled = Tensor::from({1, 4}, unit(4, 0));
    b.scores = head.scores(b.pooled);
    REQUIRE(b.scores.value()[0] == Approx(1.0).margin(1e-12));
    REQUIRE(b.scores.value()[1] == Approx(0.0).margin(1e-12));

    const double loss = lsc_loss(b, {0}, head).item();
    const double expected = std::log1p(std::exp(-eta * (1.0 - 0.6)));
    REQUIRE(loss == Approx(expected).epsilon(1e-6));
    REQUIRE(loss > 0.0);
    REQUIRE(loss < 1e-6);
}

TEST_CASE("lsc loss is invariant to consistent slot permutation", "[net]") {
    std::mt19937_64 rng(18);
    ProxyHead h1(2, 4, 0.6, 1.0);
    h1.add_classes_imprinted({0, 1, 2}, {unit(4, 0), unit(4, 1), unit(4, 2)}, rng, 0.0);
    ProxyHead h2(2, 4, 0.6, 1.0);
    h2.add_classes_imprinted({2, 0, 1}, {unit(4, 2), unit(4, 0), unit(4, 1)}, rng, 0.0);

    Tensor pooled = Tensor::randn({5, 4}, rng);
    FeatureBundle b1, b2;
    b1.pooled = pooled;
    b1.scores = h1.scores(pooled);
    b2.pooled = pooled;
    b2.scores = h2.scores(pooled);

    const std::vector<std::size_t> labels1 = {0, 1, 2, 1, 0};
    std::vector<std::size_t> labels2(labels1.size());
    for (std::size_t i = 0; i < labels1.size(); ++i) {
        const int cls = h1.class_ids()[labels1[i]];
        labels2[i] = h2.slot_of(cls);
    }
    REQUIRE(lsc_loss(b1, labels1, h1).item() ==
            Approx(lsc_loss(b2, labels2, h2).item()).epsilon(1e-12));
}

TEST_CASE("lsc loss label outside known classes", "[net]") {
    Model m = Model::init(tiny_net(), 19);
    std::mt19937_64 rng(20);
    m.head.add_classes_random({0, 1}, rng);
    const FeatureBundle b = m.forward(random_input(m.cfg, 2, 21));
    REQUIRE_THROWS_AS(lsc_loss(b, {0, 2}, m.head), ContractError);
}

TEST_CASE("lsc loss gradient passes the finite-difference check", "[net]") {
    std::mt19937_64 rng(22);
    ProxyHead head(3, 5, 0.6, 1.0);
    head.add_classes_random({0, 1, 2}, rng);
    head.scale().mutable_value()[0] = 3.0;
    const std::vector<std::size_t> labels = {0, 2, 1, 1};

    auto f = [&](const Tensor& pooled) {
        FeatureBundle b;
        b.pooled = pooled;
        b.scores = head.scores(pooled);
        return lsc_loss(b, labels, head);
    };
    const FdReport rep = finite_difference_check(f, Tensor::randn({4, 5}, rng), 1e-5, 1e-4);
    INFO("wrt features: " << rep.max_rel_dev);
    REQUIRE(rep.pass);

    // and with respect to the proxies, routed through a fresh parameter tensor
    Tensor pooled = Tensor::randn({4, 5}, rng);
    Tensor proxy0 = head.proxies().detach();
    auto g2 = [&](const Tensor& proxies) {
        FeatureBundle b;
        b.pooled = pooled;
        const std::size_t n = pooled.shape()[0];
        const Tensor fn = l2_normalize_rows(pooled);
        const Tensor pn = l2_normalize_rows(proxies);
        const Tensor cos = reshape(matmul_nt(fn, pn), {n, 3u, 3u});
        b.scores = sum_last(mul(softmax(cos), cos));
        return lsc_loss(b, labels, head);
    };
    const FdReport rep2 = finite_difference_check(g2, proxy0, 1e-5, 1e-4);
    INFO("wrt proxies: " << rep2.max_rel_dev);
    REQUIRE(rep2.pass);
}

TEST_CASE("gradcam matches the analytic value for a linear score head", "[net]") {
    // score_l = w_l . GAP(maps): the per-channel importance is w_l / (H*W)
    std::mt19937_64 rng(23);
    const std::size_t n = 3, c = 4, h = 2, w = 2;
    Tensor maps = Tensor::randn({n, c, h, w}, rng);
    Tensor weight = Tensor::randn({2, c}, rng);  // two classes
    maps.set_requires_grad(true);
    {
        GradTape tape;
        Tensor scores = matmul_nt(global_avg_pool(maps), weight);
        tape.backward(sum_all(select_column(scores, 1)));
    }
    const auto& g = maps.grad();
    for (std::size_t ci = 0; ci < c; ++ci) {
        double alpha = 0.0;
        for (std::size_t ni = 0; ni < n; ++ni) {
            double s = 0.0;
            for (std::size_t p = 0; p < h * w; ++p) s += g[(ni * c + ci) * h * w + p];
            alpha += s / (h * w);
        }
        alpha /= n;
        REQUIRE(alpha == Approx(weight.value()[1 * c + ci] / (h * w)).epsilon(1e-12));
    }
}

TEST_CASE("gradcam importance is invariant to sample duplication", "[net]") {
    Model m = Model::init(tiny_net(), 24);
    std::mt19937_64 rng(25);
    m.head.add_classes_random({0, 1}, rng);
    const Tensor x = random_input(m.cfg, 3, 26);
    const auto a1 = gradcam_importance(m, x, 0);

    // duplicate the batch
    Tensor xx = concat(x, x, 0);
    const auto a2 = gradcam_importance(m, xx, 0);
    REQUIRE(a1.size() == m.cfg.feature_dim());
    for (std::size_t j = 0; j < a1.size(); ++j) REQUIRE(a2[j] == Approx(a1[j]).margin(1e-12));

    REQUIRE_THROWS_AS(gradcam_importance(m, x, 5), ContractError);
}

TEST_CASE("gradcam on a frozen model works and leaves no parameter grads", "[net]") {
    Model m = Model::init(tiny_net(), 27);
    std::mt19937_64 rng(28);
    m.head.add_classes_random({0, 1}, rng);
    Model frozen = m.frozen_clone();
    const auto a = gradcam_importance(frozen, random_input(m.cfg, 2, 29), 1);
    double mag = 0.0;
    for (double v : a) mag += std::fabs(v);
    REQUIRE(mag > 0.0);
}

TEST_CASE("snapshot serialization round trip is bit exact", "[net]") {
    Model m = Model::init(tiny_net(), 30);
    std::mt19937_64 rng(31);
    m.head.add_classes_random({3, 1, 4}, rng);
    m.head.scale().mutable_value()[0] = 2.25;

    const auto bytes = model_to_bytes(m);
    Model m2 = model_from_bytes(bytes);
    REQUIRE(model_to_bytes(m2) == bytes);
    REQUIRE(m2.head.class_ids() == m.head.class_ids());

    const Tensor x = random_input(m.cfg, 2, 32);
    REQUIRE(m2.forward(x).scores.value() == m.forward(x).scores.value());

    std::vector<std::uint8_t> corrupt = bytes;
    corrupt[0] = 'X';
    REQUIRE_THROWS_AS(model_from_bytes(corrupt), IoError);
}
