#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "s2il/tensor.hpp"

using namespace s2il;
using Catch::Approx;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_value()) v = dist(rng);
    return t;
}

// Scalar-valued wrapper: project through a fixed random direction so every
// output entry contributes to the gradient.
std::function<Tensor(const Tensor&)> project(const std::function<Tensor(const Tensor&)>& op,
                                             const Tensor& direction) {
    return [op, direction](const Tensor& x) { return sum_all(mul(op(x), direction)); };
}

}  // namespace

TEST_CASE("elementwise arithmetic basics", "[tensor]") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {3, 4});
    REQUIRE(add(a, b).value() == std::vector<double>{4, 6});
    REQUIRE(sub(b, a).value() == std::vector<double>{2, 2});
    REQUIRE(mul(a, b).value() == std::vector<double>{3, 8});
    REQUIRE(div(b, a).value() == std::vector<double>{3, 2});
    REQUIRE((2.0 * a + 1.0).value() == std::vector<double>{3, 5});
    REQUIRE_THROWS_AS(add(a, Tensor::from({3}, {1, 2, 3})), DimensionError);
}

TEST_CASE("division guard trips on unstabilized tiny denominators", "[tensor]") {
    Tensor a = Tensor::from({2}, {1, 1});
    Tensor b = Tensor::from({2}, {1.0, 1e-15});
    REQUIRE_THROWS_AS(div(a, b), NumericError);
    REQUIRE_NOTHROW(div(a, b, 1e-16));
    REQUIRE_THROWS_AS(scalar_div(1.0, b), NumericError);
}

TEST_CASE("global average pooling of a 2x2 map", "[tensor]") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    REQUIRE(global_avg_pool(x).value()[0] == 2.5);
}

TEST_CASE("conv2d of all-ones 3x3 with all-ones 3x3 kernel", "[tensor]") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, k, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    REQUIRE(y.value()[0] == 9.0);

    // padded output keeps the spatial size
    REQUIRE(conv2d(x, k, 1, 1).shape() == Shape{1, 1, 3, 3});
    REQUIRE_THROWS_AS(conv2d(x, Tensor::full({1, 2, 3, 3}, 1.0)), DimensionError);
}

TEST_CASE("backward quadratic and relu-gate examples", "[tensor]") {
    Tensor w = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(sum_all(mul(w, w)));
    }
    REQUIRE(w.grad() == std::vector<double>{2, 4});

    Tensor v = Tensor::from({2}, {-1, 1}).set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(mean_all(relu(v)));
    }
    REQUIRE(v.grad() == std::vector<double>{0, 0.5});
}

TEST_CASE("backward contract errors", "[tensor]") {
    Tensor w = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    GradTape tape;
    Tensor y = mul(w, w);
    REQUIRE_THROWS_AS(tape.backward(y), ContractError);  // non-scalar loss
    Tensor loss = sum_all(y);
    tape.backward(loss);
    REQUIRE_THROWS_AS(tape.backward(loss), StateError);  // consumed tape
}

TEST_CASE("non-reachable leaves hold zero gradient", "[tensor]") {
    Tensor used = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    Tensor unused = Tensor::from({2}, {5, 5}).set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(sum_all(used));
    }
    REQUIRE(unused.grad() == std::vector<double>{0, 0});
}

TEST_CASE("gradients do not accumulate across separate tapes after zeroing", "[tensor]") {
    Tensor w = Tensor::from({1}, {3}).set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(sum_all(mul(w, w)));
    }
    REQUIRE(w.grad()[0] == 6.0);
    w.zero_grad();
    {
        GradTape tape;
        tape.backward(sum_all(mul(w, w)));
    }
    REQUIRE(w.grad()[0] == 6.0);
}

TEST_CASE("power domain contracts", "[tensor]") {
    REQUIRE(pow(Tensor::from({1}, {-2}), 8.0).value()[0] == 256.0);
    REQUIRE_THROWS_AS(pow(Tensor::from({1}, {-2}), 0.5), NumericError);
    REQUIRE_THROWS_AS(pow(Tensor::from({1}, {0.0}), -1.0), NumericError);
    REQUIRE(signed_pow(Tensor::from({1}, {-0.5}), 3.0).value()[0] == Approx(-0.125));
    REQUIRE(signed_pow(Tensor::from({1}, {-0.7}), 0.0).value()[0] == 1.0);
    REQUIRE_THROWS_AS(log(Tensor::from({1}, {0.0})), NumericError);
    REQUIRE_THROWS_AS(sqrt(Tensor::from({1}, {-1.0})), NumericError);
}

TEST_CASE("finite difference check on x^2 at 3", "[tensor]") {
    auto f = [](const Tensor& x) { return sum_all(mul(x, x)); };
    const FdReport rep = finite_difference_check(f, Tensor::from({1}, {3.0}), 1e-5, 1e-6);
    REQUIRE(rep.pass);
    REQUIRE(rep.max_rel_dev < 1e-6);
}

TEST_CASE("finite difference check rejects non-scalar f", "[tensor]") {
    auto f = [](const Tensor& x) { return mul(x, x); };
    REQUIRE_THROWS_AS(finite_difference_check(f, Tensor::from({2}, {1.0, 2.0}), 1e-5, 1e-4),
                      ContractError);
}

TEST_CASE("finite difference check fails on an injected wrong backward rule", "[tensor]") {
    // forward x^2 with a deliberately wrong pullback (3x instead of 2x)
    auto bad_square = [](const Tensor& x) {
        return custom_unary(
            x,
            [](const std::vector<double>& v) {
                std::vector<double> out(v.size());
                for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * v[i];
                return out;
            },
            [](const std::vector<double>& og, const std::vector<double>& v,
               std::vector<double>& g) {
                for (std::size_t i = 0; i < v.size(); ++i) g[i] += og[i] * 3.0 * v[i];
            });
    };
    auto f = [&](const Tensor& x) { return sum_all(bad_square(x)); };
    const FdReport rep = finite_difference_check(f, Tensor::from({2}, {1.0, -2.0}), 1e-5, 1e-4);
    REQUIRE_FALSE(rep.pass);
}

TEST_CASE("gradient correctness across the operator set", "[tensor][grad]") {
    std::mt19937_64 rng(20240811);
    const double tol = 1e-4, step = 1e-5;

    auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                     Tensor x) {
        const FdReport rep = finite_difference_check(f, std::move(x), step, tol);
        INFO(name << " max_rel_dev=" << rep.max_rel_dev);
        REQUIRE(rep.pass);
    };

    for (int trial = 0; trial < 10; ++trial) {
        Tensor other = random_tensor({2, 3}, rng, 0.5, 1.5);
        Tensor dir = random_tensor({2, 3}, rng);
        check("add", project([&](const Tensor& x) { return add(x, other); }, dir),
              random_tensor({2, 3}, rng));
        check("sub", project([&](const Tensor& x) { return sub(other, x); }, dir),
              random_tensor({2, 3}, rng));
        check("mul", project([&](const Tensor& x) { return mul(x, other); }, dir),
              random_tensor({2, 3}, rng));
        check("div_num", project([&](const Tensor& x) { return div(x, other); }, dir),
              random_tensor({2, 3}, rng));
        check("div_den", project([&](const Tensor& x) { return div(other, x); }, dir),
              random_tensor({2, 3}, rng, 0.5, 1.5));
        check("scalar_ops",
              project([&](const Tensor& x) { return scalar_sub(2.0, mul_scalar(x, -1.7)); },
                      dir),
              random_tensor({2, 3}, rng));
        check("scalar_div", project([&](const Tensor& x) { return scalar_div(1.3, x); }, dir),
              random_tensor({2, 3}, rng, 0.5, 1.5));
        check("pow", project([&](const Tensor& x) { return pow(x, 1.7); }, dir),
              random_tensor({2, 3}, rng, 0.2, 2.0));
        check("signed_pow", project([&](const Tensor& x) { return signed_pow(x, 2.5); }, dir),
              random_tensor({2, 3}, rng, 0.2, 1.0));
        check("relu", project([&](const Tensor& x) { return relu(x); }, dir),
              random_tensor({2, 3}, rng, 0.2, 1.0));
        check("log", project([&](const Tensor& x) { return log(x); }, dir),
              random_tensor({2, 3}, rng, 0.5, 2.0));
        check("sqrt", project([&](const Tensor& x) { return sqrt(x); }, dir),
              random_tensor({2, 3}, rng, 0.5, 2.0));
        check("abs", project([&](const Tensor& x) { return abs(x); }, dir),
              random_tensor({2, 3}, rng, 0.2, 1.0));
        check("softmax", project([&](const Tensor& x) { return softmax(x); }, dir),
              random_tensor({2, 3}, rng));
    }

    for (int trial = 0; trial < 5; ++trial) {
        // reductions / shape ops
        check("sum_all", [](const Tensor& x) { return sum_all(x); },
              random_tensor({3, 4}, rng));
        check("mean_all", [](const Tensor& x) { return mean_all(x); },
              random_tensor({3, 4}, rng));
        {
            Tensor dir = random_tensor({4}, rng);
            check("batch_mean", project([](const Tensor& x) { return batch_mean(x); }, dir),
                  random_tensor({3, 4}, rng));
        }
        {
            Tensor dir = random_tensor({3}, rng);
            check("sum_last", project([](const Tensor& x) { return sum_last(x); }, dir),
                  random_tensor({3, 4}, rng));
            check("select_column",
                  project([](const Tensor& x) { return select_column(x, 2); }, dir),
                  random_tensor({3, 4}, rng));
        }
        {
            Tensor dir = random_tensor({12}, rng);
            check("reshape", project([](const Tensor& x) { return reshape(x, {12}); }, dir),
                  random_tensor({3, 4}, rng));
        }
        {
            Tensor other = random_tensor({2, 4}, rng);
            Tensor dir = random_tensor({5, 4}, rng);
            check("concat", project([&](const Tensor& x) { return concat(x, other, 0); }, dir),
                  random_tensor({3, 4}, rng));
        }
        {
            Tensor b = random_tensor({4, 5}, rng);
            Tensor dir = random_tensor({3, 5}, rng);
            check("matmul_a", project([&](const Tensor& x) { return matmul(x, b); }, dir),
                  random_tensor({3, 4}, rng));
            Tensor a = random_tensor({3, 4}, rng);
            check("matmul_b", project([&](const Tensor& x) { return matmul(a, x); }, dir),
                  random_tensor({4, 5}, rng));
            Tensor bn = random_tensor({5, 4}, rng);
            check("matmul_nt_a",
                  project([&](const Tensor& x) { return matmul_nt(x, bn); }, dir),
                  random_tensor({3, 4}, rng));
            check("matmul_nt_b",
                  project([&](const Tensor& x) { return matmul_nt(a, x); }, dir),
                  random_tensor({5, 4}, rng));
        }
        {
            Tensor dir = random_tensor({2, 3}, rng);
            check("spatial_mean",
                  project([](const Tensor& x) { return spatial_mean(x); }, dir),
                  random_tensor({2, 3, 4, 4}, rng));
            check("spatial_var", project([](const Tensor& x) { return spatial_var(x); }, dir),
                  random_tensor({2, 3, 4, 4}, rng));
            Tensor other = random_tensor({2, 3, 4, 4}, rng);
            check("spatial_cov_a",
                  project([&](const Tensor& x) { return spatial_cov(x, other); }, dir),
                  random_tensor({2, 3, 4, 4}, rng));
            check("spatial_cov_b",
                  project([&](const Tensor& x) { return spatial_cov(other, x); }, dir),
                  random_tensor({2, 3, 4, 4}, rng));
        }
        {
            Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
            Tensor dir = random_tensor({2, 3, 4, 4}, rng);
            check("conv2d_x",
                  project([&](const Tensor& x) { return conv2d(x, w, 1, 1); }, dir),
                  random_tensor({2, 2, 4, 4}, rng));
            Tensor img = random_tensor({2, 2, 4, 4}, rng);
            check("conv2d_w",
                  project([&](const Tensor& x) { return conv2d(img, x, 1, 1); }, dir),
                  random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5));
            Tensor bias = random_tensor({3}, rng);
            Tensor bdir = random_tensor({2, 3, 4, 4}, rng);
            Tensor fixed_img = random_tensor({2, 3, 4, 4}, rng);
            check("bias_add_x",
                  project([&](const Tensor& x) { return bias_add_channel(x, bias); }, bdir),
                  random_tensor({2, 3, 4, 4}, rng));
            check("bias_add_b",
                  project([&](const Tensor& x) { return bias_add_channel(fixed_img, x); },
                          bdir),
                  random_tensor({3}, rng));
        }
        {
            Tensor dir = random_tensor({2, 2, 2, 2}, rng);
            check("maxpool",
                  project([](const Tensor& x) { return maxpool2d(x, 2, 2); }, dir),
                  random_tensor({2, 2, 4, 4}, rng));
        }
        {
            Tensor dir = random_tensor({3, 4}, rng);
            check("l2_normalize_rows",
                  project([](const Tensor& x) { return l2_normalize_rows(x); }, dir),
                  random_tensor({3, 4}, rng, 0.5, 1.5));
            std::vector<double> w = {0.5, 1.5, 2.0, 0.25};
            check("scale_channels",
                  project([&](const Tensor& x) { return scale_channels(x, w); }, dir),
                  random_tensor({3, 4}, rng));
            Tensor s = random_tensor({1}, rng, 0.5, 2.0);
            check("scale_mul_x",
                  project([&](const Tensor& x) { return scale_mul(x, s); }, dir),
                  random_tensor({3, 4}, rng));
            Tensor base = random_tensor({3, 4}, rng);
            check("scale_mul_s",
                  project([&](const Tensor& x) { return scale_mul(base, x); },
                          Tensor::from({3, 4}, dir.value())),
                  random_tensor({1}, rng, 0.5, 2.0));
        }
        {
            std::vector<std::size_t> labels = {0, 2, 1};
            check("softmax_cross_entropy",
                  [&](const Tensor& x) { return softmax_cross_entropy(x, labels); },
                  random_tensor({3, 3}, rng));
        }
    }
}

TEST_CASE("backward is linear in the loss", "[tensor]") {
    std::mt19937_64 rng(7);
    Tensor x = random_tensor({4}, rng, 0.5, 1.5);
    const double a = 1.7, b = -2.3;

    auto grad_of = [&](const std::function<Tensor(const Tensor&)>& f) {
        Tensor xi = x.clone();
        xi.set_requires_grad(true);
        GradTape tape;
        tape.backward(f(xi));
        return xi.grad();
    };

    auto f = [](const Tensor& t) { return sum_all(mul(t, t)); };
    auto g = [](const Tensor& t) { return sum_all(sqrt(t)); };
    auto combined = [&](const Tensor& t) {
        return add(mul_scalar(f(t), a), mul_scalar(g(t), b));
    };

    const auto gf = grad_of(f), gg = grad_of(g), gc = grad_of(combined);
    for (std::size_t i = 0; i < gc.size(); ++i)
        REQUIRE(gc[i] == Approx(a * gf[i] + b * gg[i]).margin(1e-10));
}

TEST_CASE("forward determinism for a fixed seed", "[tensor]") {
    auto run = [] {
        std::mt19937_64 rng(99);
        Tensor x = Tensor::randn({2, 2, 6, 6}, rng);
        Tensor w = Tensor::randn({3, 2, 3, 3}, rng, 0.1);
        return sum_all(relu(conv2d(x, w, 1, 1))).item();
    };
    REQUIRE(run() == run());
}

TEST_CASE("maxpool tie goes to first position in scan order", "[tensor]") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {5, 5, 5, 5}).set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(sum_all(maxpool2d(x, 2, 2)));
    }
    REQUIRE(x.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("spatial statistics population normalization", "[tensor]") {
    // var of {1,2,3,4} with 1/N normalization is 1.25
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    REQUIRE(spatial_var(x).value()[0] == Approx(1.25));
    REQUIRE(spatial_cov(x, x).value()[0] == spatial_var(x).value()[0]);
    Tensor y = Tensor::from({1, 1, 2, 2}, {2, 4, 6, 8});
    REQUIRE(spatial_cov(x, y).value()[0] == Approx(2.5));
    REQUIRE_THROWS_AS(spatial_var(Tensor::from({1, 1, 1, 1}, {3})), ContractError);
}
