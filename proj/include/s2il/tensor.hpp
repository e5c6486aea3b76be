#pragma once

// Dense double-precision tensors with tape-based reverse-mode differentiation.
// Ops execute eagerly; when a GradTape is active and an input carries gradient,
// the op pushes a backward closure onto the tape. One tape per training step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "s2il/errors.hpp"

namespace s2il {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Denominator guard for elementwise division without an additive stabilizer.
inline constexpr double kDivGuardEps = 1e-12;

namespace detail {

struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until touched; same length as value once allocated
    bool requires_grad = false;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

class GradTape;

class Tensor {
  public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->value.assign(shape_numel(t.d_->shape), 0.0);
        return t;
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.d_->value.begin(), t.d_->value.end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        for (std::size_t d : shape)
            if (d == 0) throw DimensionError("zero dimension in shape " + shape_str(shape));
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    // Seeded Gaussian fill. Deterministic for a fixed engine state within one build.
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : t.d_->value) v = dist(rng);
        return t;
    }

    const Shape& shape() const { return d_->shape; }
    std::size_t numel() const { return d_->value.size(); }
    std::size_t rank() const { return d_->shape.size(); }

    const std::vector<double>& value() const { return d_->value; }
    std::vector<double>& mutable_value() { return d_->value; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return d_->value[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        d_->requires_grad = b;
        return *this;
    }

    // Gradient view; materializes zeros if backward never reached this tensor.
    const std::vector<double>& grad() const { return d_->ensure_grad(); }
    void zero_grad() { std::fill(d_->grad.begin(), d_->grad.end(), 0.0); }

    // Same values, no gradient participation, independent storage.
    Tensor detach() const {
        Tensor t;
        t.d_->shape = d_->shape;
        t.d_->value = d_->value;
        return t;
    }

    Tensor clone() const {
        Tensor t = detach();
        t.d_->requires_grad = d_->requires_grad;
        return t;
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    std::shared_ptr<detail::TensorData> data_ptr() const { return d_; }

  private:
    std::shared_ptr<detail::TensorData> d_;
};

// Records backward closures for one training step. Constructing a tape makes it
// the active tape for the current thread; destruction restores the previous one.
class GradTape {
  public:
    GradTape() : prev_(active_slot()) { active_slot() = this; }
    ~GradTape() { active_slot() = prev_; }

    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape* active() { return active_slot(); }

    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

    std::size_t size() const { return entries_.size(); }

    // Seeds d(loss)/d(loss)=1 and replays recorded closures in reverse.
    void backward(const Tensor& loss) {
        if (consumed_) throw StateError("backward() called twice on the same tape");
        if (loss.numel() != 1)
            throw ContractError("backward() requires a scalar loss, got " +
                                shape_str(loss.shape()));
        consumed_ = true;
        loss.data_ptr()->ensure_grad()[0] = 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

  private:
    static GradTape*& active_slot() {
        thread_local GradTape* tape = nullptr;
        return tape;
    }

    std::vector<std::function<void()>> entries_;
    GradTape* prev_ = nullptr;
    bool consumed_ = false;
};

namespace detail {

inline bool trace(std::initializer_list<const Tensor*> inputs) {
    if (GradTape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

using DataPtr = std::shared_ptr<TensorData>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
    if (detail::trace({&a, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr()] {
            const auto& og = od->ensure_grad();
            if (ad->requires_grad) {
                auto& ag = ad->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
            }
            if (bd->requires_grad) {
                auto& bg = bd->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
    if (detail::trace({&a, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr()] {
            const auto& og = od->ensure_grad();
            if (ad->requires_grad) {
                auto& ag = ad->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
            }
            if (bd->requires_grad) {
                auto& bg = bd->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i) bg[i] -= og[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
    if (detail::trace({&a, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr()] {
            const auto& og = od->ensure_grad();
            if (ad->requires_grad) {
                auto& ag = ad->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * bd->value[i];
            }
            if (bd->requires_grad) {
                auto& bg = bd->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i] * ad->value[i];
            }
        });
    }
    return out;
}

// Elementwise division. Denominator entries whose magnitude falls below
// guard_eps trip a NumericError: callers dividing by unstabilized quantities
// must either add their own constant or widen the guard consciously.
inline Tensor div(const Tensor& a, const Tensor& b, double guard_eps = kDivGuardEps) {
    detail::check_same_shape(a, b, "div");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < n; ++i) {
        if (std::fabs(bv[i]) < guard_eps)
            throw NumericError("div: denominator magnitude " + std::to_string(bv[i]) +
                               " below guard " + std::to_string(guard_eps));
        ov[i] = av[i] / bv[i];
    }
    if (detail::trace({&a, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr()] {
            const auto& og = od->ensure_grad();
            if (ad->requires_grad) {
                auto& ag = ad->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] / bd->value[i];
            }
            if (bd->requires_grad) {
                auto& bg = bd->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i)
                    bg[i] -= og[i] * od->value[i] / bd->value[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// scalar ops
// ---------------------------------------------------------------------------

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + s;
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
        });
    }
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * s;
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr(), s] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * s;
        });
    }
    return out;
}

// s - a
inline Tensor scalar_sub(double s, const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = s - av[i];
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] -= og[i];
        });
    }
    return out;
}

inline Tensor div_scalar(const Tensor& a, double s, double guard_eps = kDivGuardEps) {
    if (std::fabs(s) < guard_eps)
        throw NumericError("div_scalar: divisor below guard " + std::to_string(guard_eps));
    return mul_scalar(a, 1.0 / s);
}

// s / a, elementwise
inline Tensor scalar_div(double s, const Tensor& a, double guard_eps = kDivGuardEps) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (std::fabs(av[i]) < guard_eps)
            throw NumericError("scalar_div: denominator below guard " +
                               std::to_string(guard_eps));
        ov[i] = s / av[i];
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i)
                ag[i] -= og[i] * od->value[i] / ad->value[i];
        });
    }
    return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return scalar_sub(s, a); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return div_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

// x^e with a real exponent. Negative bases are rejected unless e is an exact
// integer; fractional powers of negatives have no real value. For the signed
// variant used by the structure component see signed_pow below.
inline Tensor pow(const Tensor& a, double e) {
    const bool integer_exp = (e == std::floor(e));
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double x = av[i];
        if (x < 0.0 && !integer_exp)
            throw NumericError("pow: negative base " + std::to_string(x) +
                               " with non-integer exponent " + std::to_string(e));
        if (x == 0.0 && e < 0.0) throw NumericError("pow: zero base with negative exponent");
        ov[i] = std::pow(x, e);
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr(), e] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) {
                const double x = ad->value[i];
                double dx;
                if (x == 0.0)
                    dx = (e == 1.0) ? 1.0 : 0.0;  // subgradient at the origin
                else
                    dx = e * std::pow(x, e - 1.0);
                ag[i] += og[i] * dx;
            }
        });
    }
    return out;
}

// sign(x) * |x|^r, the odd extension of the power map. Keeps s^r in [-1, 1]
// for s in [-1, 1] regardless of r; r == 0 yields the constant 1.
inline Tensor signed_pow(const Tensor& a, double r) {
    if (r < 0.0) throw ContractError("signed_pow: exponent must be nonnegative");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double x = av[i];
        ov[i] = (r == 0.0) ? 1.0 : std::copysign(std::pow(std::fabs(x), r), x);
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr(), r] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) {
                const double x = ad->value[i];
                double dx;
                if (r == 0.0)
                    dx = 0.0;
                else if (x == 0.0)
                    dx = (r == 1.0) ? 1.0 : 0.0;
                else
                    dx = r * std::pow(std::fabs(x), r - 1.0);
                ag[i] += og[i] * dx;
            }
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i)
                if (ad->value[i] > 0.0) ag[i] += og[i];
        });
    }
    return out;
}

inline Tensor log(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] <= 0.0)
            throw NumericError("log: non-positive input " + std::to_string(av[i]));
        ov[i] = std::log(av[i]);
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] / ad->value[i];
        });
    }
    return out;
}

inline Tensor sqrt(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] < 0.0) throw NumericError("sqrt: negative input " + std::to_string(av[i]));
        ov[i] = std::sqrt(av[i]);
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) {
                const double y = od->value[i];
                if (y > 0.0) ag[i] += og[i] * 0.5 / y;  // subgradient 0 at exact zero
            }
        });
    }
    return out;
}

inline Tensor abs(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = std::fabs(av[i]);
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) {
                const double x = ad->value[i];
                if (x > 0.0)
                    ag[i] += og[i];
                else if (x < 0.0)
                    ag[i] -= og[i];
            }
        });
    }
    return out;
}

// Derivative is zero almost everywhere, so the output never carries gradient.
inline Tensor sign(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < av.size(); ++i)
        ov[i] = av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
    return out;
}

// ---------------------------------------------------------------------------
// reductions and shape ops
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    Tensor out = Tensor::scalar(s);
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const double g = od->ensure_grad()[0];
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    return div_scalar(sum_all(a), static_cast<double>(a.numel()));
}

// Mean across the leading (batch) axis: [N, rest...] -> [rest...].
inline Tensor batch_mean(const Tensor& a) {
    if (a.rank() < 1) throw DimensionError("batch_mean: rank-0 tensor");
    const std::size_t n = a.shape()[0];
    Shape rest(a.shape().begin() + 1, a.shape().end());
    if (rest.empty()) rest = {1};
    Tensor out = Tensor::zeros(rest);
    const std::size_t m = out.numel();
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ov[j] += av[i * m + j];
    for (std::size_t j = 0; j < m; ++j) ov[j] /= static_cast<double>(n);
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr(), n, m] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ag[i * m + j] += og[j] * inv;
        });
    }
    return out;
}

// Sum over the trailing axis: [..., K] -> [...].
inline Tensor sum_last(const Tensor& a) {
    if (a.rank() < 2) throw DimensionError("sum_last: needs rank >= 2, got " +
                                           shape_str(a.shape()));
    const std::size_t k = a.shape().back();
    Shape lead(a.shape().begin(), a.shape().end() - 1);
    Tensor out = Tensor::zeros(lead);
    const std::size_t rows = out.numel();
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += av[r * k + j];
        ov[r] = s;
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr(), rows, k] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < k; ++j) ag[r * k + j] += og[r];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: element count mismatch " + shape_str(a.shape()) +
                             " -> " + shape_str(shape));
    Tensor out = Tensor::from(std::move(shape), a.value());
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr()] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
        });
    }
    return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
    if (a.rank() != b.rank())
        throw DimensionError("concat: rank mismatch");
    if (axis >= a.rank()) throw DimensionError("concat: axis out of range");
    for (std::size_t i = 0; i < a.rank(); ++i)
        if (i != axis && a.shape()[i] != b.shape()[i])
            throw DimensionError("concat: shapes differ off-axis " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
    Shape os = a.shape();
    os[axis] += b.shape()[axis];

    // outer x axis x inner addressing
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
    const std::size_t a_ax = a.shape()[axis], b_ax = b.shape()[axis];

    Tensor out = Tensor::zeros(os);
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t o = 0; o < outer; ++o) {
        double* dst = ov.data() + o * (a_ax + b_ax) * inner;
        std::copy_n(av.data() + o * a_ax * inner, a_ax * inner, dst);
        std::copy_n(bv.data() + o * b_ax * inner, b_ax * inner, dst + a_ax * inner);
    }
    if (detail::trace({&a, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr(),
                                    outer, inner, a_ax, b_ax] {
            const auto& og = od->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = og.data() + o * (a_ax + b_ax) * inner;
                if (ad->requires_grad) {
                    auto& ag = ad->ensure_grad();
                    double* dst = ag.data() + o * a_ax * inner;
                    for (std::size_t i = 0; i < a_ax * inner; ++i) dst[i] += src[i];
                }
                if (bd->requires_grad) {
                    auto& bg = bd->ensure_grad();
                    double* dst = bg.data() + o * b_ax * inner;
                    for (std::size_t i = 0; i < b_ax * inner; ++i)
                        dst[i] += src[a_ax * inner + i];
                }
            }
        });
    }
    return out;
}

// Column j of a [N, C] matrix as a [N] vector.
inline Tensor select_column(const Tensor& a, std::size_t j) {
    if (a.rank() != 2) throw DimensionError("select_column: expects a matrix");
    const std::size_t n = a.shape()[0], c = a.shape()[1];
    if (j >= c) throw DimensionError("select_column: column out of range");
    Tensor out = Tensor::zeros({n});
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i * c + j];
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr(), n, c, j] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ag[i * c + j] += og[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out = Tensor::zeros({m, n});
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av[i * k + p];
            const double* brow = bv.data() + p * n;
            double* orow = ov.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
        }
    if (detail::trace({&a, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record(
            [ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr(), m, k, n] {
                const auto& og = od->ensure_grad();
                if (ad->requires_grad) {  // dA = dC * B^T
                    auto& ag = ad->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            double s = 0.0;
                            const double* grow = og.data() + i * n;
                            const double* brow = bd->value.data() + p * n;
                            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                            ag[i * k + p] += s;
                        }
                }
                if (bd->requires_grad) {  // dB = A^T * dC
                    auto& bg = bd->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            const double x = ad->value[i * k + p];
                            const double* grow = og.data() + i * n;
                            double* brow = bg.data() + p * n;
                            for (std::size_t j = 0; j < n; ++j) brow[j] += x * grow[j];
                        }
            }
        });
    }
    return out;
}

// a [M, K] times b^T where b is [N, K]; the natural layout for row-per-proxy
// similarity scores.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
        throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()) + "^T");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    Tensor out = Tensor::zeros({m, n});
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            const double* arow = av.data() + i * k;
            const double* brow = bv.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            ov[i * n + j] = s;
        }
    if (detail::trace({&a, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record(
            [ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr(), m, k, n] {
                const auto& og = od->ensure_grad();
                if (ad->requires_grad) {  // dA = dC * B
                    auto& ag = ad->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const double g = og[i * n + j];
                            const double* brow = bd->value.data() + j * k;
                            double* arow = ag.data() + i * k;
                            for (std::size_t p = 0; p < k; ++p) arow[p] += g * brow[p];
                        }
                }
                if (bd->requires_grad) {  // dB = dC^T * A
                    auto& bg = bd->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const double g = og[i * n + j];
                            const double* arow = ad->value.data() + i * k;
                            double* brow = bg.data() + j * k;
                            for (std::size_t p = 0; p < k; ++p) brow[p] += g * arow[p];
                        }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// spatial statistics over [N, C, H, W] maps
// ---------------------------------------------------------------------------

namespace detail {
inline void check_nchw(const Tensor& a, const char* op) {
    if (a.rank() != 4)
        throw DimensionError(std::string(op) + ": expects [N,C,H,W], got " +
                             shape_str(a.shape()));
}
}  // namespace detail

// Per-map mean over spatial positions: [N,C,H,W] -> [N,C].
inline Tensor spatial_mean(const Tensor& a) {
    detail::check_nchw(a, "spatial_mean");
    const std::size_t n = a.shape()[0], c = a.shape()[1], p = a.shape()[2] * a.shape()[3];
    Tensor out = Tensor::zeros({n, c});
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t m = 0; m < n * c; ++m) {
        double s = 0.0;
        const double* map = av.data() + m * p;
        for (std::size_t i = 0; i < p; ++i) s += map[i];
        ov[m] = s / static_cast<double>(p);
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr(), n, c, p] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            const double inv = 1.0 / static_cast<double>(p);
            for (std::size_t m = 0; m < n * c; ++m) {
                const double g = og[m] * inv;
                double* map = ag.data() + m * p;
                for (std::size_t i = 0; i < p; ++i) map[i] += g;
            }
        });
    }
    return out;
}

inline Tensor global_avg_pool(const Tensor& a) { return spatial_mean(a); }

// Population variance per map (divide by the position count): [N,C,H,W] -> [N,C].
inline Tensor spatial_var(const Tensor& a) {
    detail::check_nchw(a, "spatial_var");
    const std::size_t n = a.shape()[0], c = a.shape()[1], p = a.shape()[2] * a.shape()[3];
    if (p < 2) throw ContractError("spatial_var: degenerate single-position map");
    Tensor out = Tensor::zeros({n, c});
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    std::vector<double> means(n * c);
    for (std::size_t m = 0; m < n * c; ++m) {
        const double* map = av.data() + m * p;
        double s = 0.0;
        for (std::size_t i = 0; i < p; ++i) s += map[i];
        const double mu = s / static_cast<double>(p);
        means[m] = mu;
        double v = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            const double d = map[i] - mu;
            v += d * d;
        }
        ov[m] = v / static_cast<double>(p);
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record(
            [ad = a.data_ptr(), od = out.data_ptr(), means = std::move(means), n, c, p] {
                if (!ad->requires_grad) return;
                const auto& og = od->ensure_grad();
                auto& ag = ad->ensure_grad();
                const double inv = 2.0 / static_cast<double>(p);
                for (std::size_t m = 0; m < n * c; ++m) {
                    const double g = og[m] * inv;
                    const double mu = means[m];
                    const double* map = ad->value.data() + m * p;
                    double* gmap = ag.data() + m * p;
                    for (std::size_t i = 0; i < p; ++i) gmap[i] += g * (map[i] - mu);
                }
            });
    }
    return out;
}

// Population covariance of paired maps: ([N,C,H,W], [N,C,H,W]) -> [N,C].
// Uses the same summation order as spatial_var so cov(u, u) == var(u) bitwise.
inline Tensor spatial_cov(const Tensor& a, const Tensor& b) {
    detail::check_nchw(a, "spatial_cov");
    detail::check_same_shape(a, b, "spatial_cov");
    const std::size_t n = a.shape()[0], c = a.shape()[1], p = a.shape()[2] * a.shape()[3];
    if (p < 2) throw ContractError("spatial_cov: degenerate single-position map");
    Tensor out = Tensor::zeros({n, c});
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.mutable_value();
    std::vector<double> mean_a(n * c), mean_b(n * c);
    for (std::size_t m = 0; m < n * c; ++m) {
        const double* ma = av.data() + m * p;
        const double* mb = bv.data() + m * p;
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < p; ++i) sa += ma[i];
        for (std::size_t i = 0; i < p; ++i) sb += mb[i];
        const double mua = sa / static_cast<double>(p);
        const double mub = sb / static_cast<double>(p);
        mean_a[m] = mua;
        mean_b[m] = mub;
        double cv = 0.0;
        for (std::size_t i = 0; i < p; ++i) cv += (ma[i] - mua) * (mb[i] - mub);
        ov[m] = cv / static_cast<double>(p);
    }
    if (detail::trace({&a, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr(),
                                    mean_a = std::move(mean_a), mean_b = std::move(mean_b), n,
                                    c, p] {
            const auto& og = od->ensure_grad();
            const double invp = 1.0 / static_cast<double>(p);
            for (std::size_t m = 0; m < n * c; ++m) {
                const double g = og[m] * invp;
                if (ad->requires_grad) {
                    auto& ag = ad->ensure_grad();
                    const double* mb = bd->value.data() + m * p;
                    double* gmap = ag.data() + m * p;
                    for (std::size_t i = 0; i < p; ++i) gmap[i] += g * (mb[i] - mean_b[m]);
                }
                if (bd->requires_grad) {
                    auto& bg = bd->ensure_grad();
                    const double* ma = ad->value.data() + m * p;
                    double* gmap = bg.data() + m * p;
                    for (std::size_t i = 0; i < p; ++i) gmap[i] += g * (ma[i] - mean_a[m]);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// neural-net ops
// ---------------------------------------------------------------------------

// 2-D convolution with zero padding. x: [N,Cin,H,W], w: [Cout,Cin,kh,kw].
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t pad = 0) {
    detail::check_nchw(x, "conv2d");
    if (w.rank() != 4) throw DimensionError("conv2d: weight must be [Cout,Cin,kh,kw]");
    if (stride == 0) throw ContractError("conv2d: stride must be positive");
    const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    const std::size_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != cin)
        throw DimensionError("conv2d: input channels " + std::to_string(cin) +
                             " != weight channels " + std::to_string(w.shape()[1]));
    if (h + 2 * pad < kh || wd + 2 * pad < kw)
        throw DimensionError("conv2d: kernel larger than padded input");
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - kw) / stride + 1;

    Tensor out = Tensor::zeros({n, cout, oh, ow});
    const auto& xv = x.value();
    const auto& wv = w.value();
    auto& ov = out.mutable_value();
    const std::ptrdiff_t ipad = static_cast<std::ptrdiff_t>(pad);

    // stride-1 fast path hoists the padding bounds out of the inner loop
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t co = 0; co < cout; ++co) {
            double* oplane = ov.data() + (ni * cout + co) * oh * ow;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* xplane = xv.data() + (ni * cin + ci) * h * wd;
                const double* wk = wv.data() + (co * cin + ci) * kh * kw;
                for (std::size_t ki = 0; ki < kh; ++ki)
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                        const double wgt = wk[ki * kw + kj];
                        if (stride == 1) {
                            const std::ptrdiff_t oj_lo =
                                std::max<std::ptrdiff_t>(0, ipad - static_cast<std::ptrdiff_t>(kj));
                            const std::ptrdiff_t oj_hi = std::min<std::ptrdiff_t>(
                                static_cast<std::ptrdiff_t>(ow),
                                static_cast<std::ptrdiff_t>(wd) + ipad -
                                    static_cast<std::ptrdiff_t>(kj));
                            for (std::size_t oi = 0; oi < oh; ++oi) {
                                const std::ptrdiff_t ii =
                                    static_cast<std::ptrdiff_t>(oi + ki) - ipad;
                                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                                const double* xrow =
                                    xplane + ii * wd + static_cast<std::ptrdiff_t>(kj) - ipad;
                                double* orow = oplane + oi * ow;
                                for (std::ptrdiff_t oj = oj_lo; oj < oj_hi; ++oj)
                                    orow[oj] += wgt * xrow[oj];
                            }
                            continue;
                        }
                        for (std::size_t oi = 0; oi < oh; ++oi) {
                            const std::ptrdiff_t ii =
                                static_cast<std::ptrdiff_t>(oi * stride + ki) - ipad;
                            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                            const double* xrow = xplane + ii * wd;
                            double* orow = oplane + oi * ow;
                            for (std::size_t oj = 0; oj < ow; ++oj) {
                                const std::ptrdiff_t jj =
                                    static_cast<std::ptrdiff_t>(oj * stride + kj) - ipad;
                                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
                                orow[oj] += wgt * xrow[jj];
                            }
                        }
                    }
            }
        }

    if (detail::trace({&x, &w})) {
        out.set_requires_grad(true);
        GradTape::active()->record([xd = x.data_ptr(), wdp = w.data_ptr(), od = out.data_ptr(),
                                    n, cin, h, wd, cout, kh, kw, oh, ow, stride, ipad] {
            const auto& og = od->ensure_grad();
            const auto oj_bounds = [&](std::size_t kj) {
                const std::ptrdiff_t lo =
                    std::max<std::ptrdiff_t>(0, ipad - static_cast<std::ptrdiff_t>(kj));
                const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(
                    static_cast<std::ptrdiff_t>(ow),
                    static_cast<std::ptrdiff_t>(wd) + ipad - static_cast<std::ptrdiff_t>(kj));
                return std::pair<std::ptrdiff_t, std::ptrdiff_t>(lo, hi);
            };
            if (xd->requires_grad) {
                auto& xg = xd->ensure_grad();
                for (std::size_t ni = 0; ni < n; ++ni)
                    for (std::size_t co = 0; co < cout; ++co) {
                        const double* gplane = og.data() + (ni * cout + co) * oh * ow;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            double* xgplane = xg.data() + (ni * cin + ci) * h * wd;
                            const double* wk = wdp->value.data() + (co * cin + ci) * kh * kw;
                            for (std::size_t ki = 0; ki < kh; ++ki)
                                for (std::size_t kj = 0; kj < kw; ++kj) {
                                    const double wgt = wk[ki * kw + kj];
                                    if (stride == 1) {
                                        const auto [lo, hi] = oj_bounds(kj);
                                        for (std::size_t oi = 0; oi < oh; ++oi) {
                                            const std::ptrdiff_t ii =
                                                static_cast<std::ptrdiff_t>(oi + ki) - ipad;
                                            if (ii < 0 ||
                                                ii >= static_cast<std::ptrdiff_t>(h))
                                                continue;
                                            double* xrow = xgplane + ii * wd +
                                                           static_cast<std::ptrdiff_t>(kj) -
                                                           ipad;
                                            const double* grow = gplane + oi * ow;
                                            for (std::ptrdiff_t oj = lo; oj < hi; ++oj)
                                                xrow[oj] += wgt * grow[oj];
                                        }
                                        continue;
                                    }
                                    for (std::size_t oi = 0; oi < oh; ++oi) {
                                        const std::ptrdiff_t ii =
                                            static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                            ipad;
                                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h))
                                            continue;
                                        double* xrow = xgplane + ii * wd;
                                        const double* grow = gplane + oi * ow;
                                        for (std::size_t oj = 0; oj < ow; ++oj) {
                                            const std::ptrdiff_t jj =
                                                static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                                ipad;
                                            if (jj < 0 ||
                                                jj >= static_cast<std::ptrdiff_t>(wd))
                                                continue;
                                            xrow[jj] += wgt * grow[oj];
                                        }
                                    }
                                }
                        }
                    }
            }
            if (wdp->requires_grad) {
                auto& wg = wdp->ensure_grad();
                for (std::size_t ni = 0; ni < n; ++ni)
                    for (std::size_t co = 0; co < cout; ++co) {
                        const double* gplane = og.data() + (ni * cout + co) * oh * ow;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const double* xplane = xd->value.data() + (ni * cin + ci) * h * wd;
                            double* wk = wg.data() + (co * cin + ci) * kh * kw;
                            for (std::size_t ki = 0; ki < kh; ++ki)
                                for (std::size_t kj = 0; kj < kw; ++kj) {
                                    double acc = 0.0;
                                    if (stride == 1) {
                                        const auto [lo, hi] = oj_bounds(kj);
                                        for (std::size_t oi = 0; oi < oh; ++oi) {
                                            const std::ptrdiff_t ii =
                                                static_cast<std::ptrdiff_t>(oi + ki) - ipad;
                                            if (ii < 0 ||
                                                ii >= static_cast<std::ptrdiff_t>(h))
                                                continue;
                                            const double* xrow = xplane + ii * wd +
                                                                 static_cast<std::ptrdiff_t>(
                                                                     kj) -
                                                                 ipad;
                                            const double* grow = gplane + oi * ow;
                                            for (std::ptrdiff_t oj = lo; oj < hi; ++oj)
                                                acc += xrow[oj] * grow[oj];
                                        }
                                        wk[ki * kw + kj] += acc;
                                        continue;
                                    }
                                    for (std::size_t oi = 0; oi < oh; ++oi) {
                                        const std::ptrdiff_t ii =
                                            static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                            ipad;
                                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h))
                                            continue;
                                        const double* xrow = xplane + ii * wd;
                                        const double* grow = gplane + oi * ow;
                                        for (std::size_t oj = 0; oj < ow; ++oj) {
                                            const std::ptrdiff_t jj =
                                                static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                                ipad;
                                            if (jj < 0 ||
                                                jj >= static_cast<std::ptrdiff_t>(wd))
                                                continue;
                                            acc += xrow[jj] * grow[oj];
                                        }
                                    }
                                    wk[ki * kw + kj] += acc;
                                }
                        }
                    }
            }
        });
    }
    return out;
}

// Adds a per-channel bias: x [N,C,H,W] + b [C].
inline Tensor bias_add_channel(const Tensor& x, const Tensor& b) {
    detail::check_nchw(x, "bias_add_channel");
    const std::size_t n = x.shape()[0], c = x.shape()[1], p = x.shape()[2] * x.shape()[3];
    if (b.rank() != 1 || b.shape()[0] != c)
        throw DimensionError("bias_add_channel: bias must be [C]");
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.value();
    const auto& bv = b.value();
    auto& ov = out.mutable_value();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double bias = bv[ci];
            const double* src = xv.data() + (ni * c + ci) * p;
            double* dst = ov.data() + (ni * c + ci) * p;
            for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + bias;
        }
    if (detail::trace({&x, &b})) {
        out.set_requires_grad(true);
        GradTape::active()->record(
            [xd = x.data_ptr(), bd = b.data_ptr(), od = out.data_ptr(), n, c, p] {
                const auto& og = od->ensure_grad();
                if (xd->requires_grad) {
                    auto& xg = xd->ensure_grad();
                    for (std::size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
                }
                if (bd->requires_grad) {
                    auto& bg = bd->ensure_grad();
                    for (std::size_t ni = 0; ni < n; ++ni)
                        for (std::size_t ci = 0; ci < c; ++ci) {
                            const double* src = og.data() + (ni * c + ci) * p;
                            double s = 0.0;
                            for (std::size_t i = 0; i < p; ++i) s += src[i];
                            bg[ci] += s;
                        }
                }
            });
    }
    return out;
}

// Max pooling with square window. Ties go to the first position in scan order.
inline Tensor maxpool2d(const Tensor& x, std::size_t win = 2, std::size_t stride = 2) {
    detail::check_nchw(x, "maxpool2d");
    if (win == 0 || stride == 0) throw ContractError("maxpool2d: window/stride must be positive");
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (h < win || w < win) throw DimensionError("maxpool2d: window larger than input");
    const std::size_t oh = (h - win) / stride + 1;
    const std::size_t ow = (w - win) / stride + 1;
    Tensor out = Tensor::zeros({n, c, oh, ow});
    const auto& xv = x.value();
    auto& ov = out.mutable_value();
    std::vector<std::size_t> argmax(out.numel());
    for (std::size_t m = 0; m < n * c; ++m) {
        const double* plane = xv.data() + m * h * w;
        for (std::size_t oi = 0; oi < oh; ++oi)
            for (std::size_t oj = 0; oj < ow; ++oj) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t besti = 0;
                for (std::size_t ki = 0; ki < win; ++ki)
                    for (std::size_t kj = 0; kj < win; ++kj) {
                        const std::size_t idx = (oi * stride + ki) * w + (oj * stride + kj);
                        if (plane[idx] > best) {
                            best = plane[idx];
                            besti = idx;
                        }
                    }
                const std::size_t oidx = m * oh * ow + oi * ow + oj;
                ov[oidx] = best;
                argmax[oidx] = m * h * w + besti;
            }
    }
    if (detail::trace({&x})) {
        out.set_requires_grad(true);
        GradTape::active()->record(
            [xd = x.data_ptr(), od = out.data_ptr(), argmax = std::move(argmax)] {
                if (!xd->requires_grad) return;
                const auto& og = od->ensure_grad();
                auto& xg = xd->ensure_grad();
                for (std::size_t i = 0; i < og.size(); ++i) xg[argmax[i]] += og[i];
            });
    }
    return out;
}

// Softmax over the trailing axis, numerically stabilized.
inline Tensor softmax(const Tensor& a) {
    if (a.rank() < 1) throw DimensionError("softmax: rank-0 tensor");
    const std::size_t k = a.shape().back();
    const std::size_t rows = a.numel() / k;
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = av.data() + r * k;
        double* o = ov.data() + r * k;
        double mx = in[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            o[j] = std::exp(in[j] - mx);
            s += o[j];
        }
        for (std::size_t j = 0; j < k; ++j) o[j] /= s;
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ad = a.data_ptr(), od = out.data_ptr(), rows, k] {
            if (!ad->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& ag = ad->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = od->value.data() + r * k;
                const double* g = og.data() + r * k;
                double dot = 0.0;
                for (std::size_t j = 0; j < k; ++j) dot += g[j] * y[j];
                double* dst = ag.data() + r * k;
                for (std::size_t j = 0; j < k; ++j) dst[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// Mean negative log-softmax of the labelled class: ([N,C], labels) -> scalar.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy: expects [N,C]");
    const std::size_t n = logits.shape()[0], c = logits.shape()[1];
    if (labels.size() != n)
        throw ContractError("softmax_cross_entropy: label count mismatch");
    for (std::size_t y : labels)
        if (y >= c) throw ContractError("softmax_cross_entropy: label out of range");
    const auto& lv = logits.value();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = lv.data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        total += mx + std::log(s) - row[labels[i]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n));
    if (detail::trace({&logits})) {
        out.set_requires_grad(true);
        GradTape::active()->record([ld = logits.data_ptr(), od = out.data_ptr(), labels, n, c] {
            if (!ld->requires_grad) return;
            const double g = od->ensure_grad()[0] / static_cast<double>(n);
            auto& lg = ld->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = ld->value.data() + i * c;
                double mx = row[0];
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double s = 0.0;
                for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
                double* dst = lg.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) {
                    const double p = std::exp(row[j] - mx) / s;
                    dst[j] += g * (p - (j == labels[i] ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

// Row-wise L2 normalization of [N, D]; rows with norm below eps fall back to x/eps.
inline Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12) {
    if (a.rank() != 2) throw DimensionError("l2_normalize_rows: expects [N,D]");
    const std::size_t n = a.shape()[0], d = a.shape()[1];
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.mutable_value();
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = av.data() + i * d;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += row[j] * row[j];
        const double nm = std::max(std::sqrt(s), eps);
        norms[i] = nm;
        double* o = ov.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = row[j] / nm;
    }
    if (detail::trace({&a})) {
        out.set_requires_grad(true);
        GradTape::active()->record(
            [ad = a.data_ptr(), od = out.data_ptr(), norms = std::move(norms), n, d, eps] {
                if (!ad->requires_grad) return;
                const auto& og = od->ensure_grad();
                auto& ag = ad->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const double* y = od->value.data() + i * d;
                    const double* g = og.data() + i * d;
                    double* dst = ag.data() + i * d;
                    const double nm = norms[i];
                    if (nm <= eps) {  // clamped branch is plain scaling
                        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j] / eps;
                        continue;
                    }
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
                    for (std::size_t j = 0; j < d; ++j) dst[j] += (g[j] - y[j] * dot) / nm;
                }
            });
    }
    return out;
}

// x scaled by a learnable scalar tensor (shape [1]).
inline Tensor scale_mul(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("scale_mul: scale must be a scalar tensor");
    Tensor out = Tensor::zeros(x.shape());
    const double sv = s.value()[0];
    const auto& xv = x.value();
    auto& ov = out.mutable_value();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * sv;
    if (detail::trace({&x, &s})) {
        out.set_requires_grad(true);
        GradTape::active()->record(
            [xd = x.data_ptr(), sd = s.data_ptr(), od = out.data_ptr()] {
                const auto& og = od->ensure_grad();
                if (xd->requires_grad) {
                    auto& xg = xd->ensure_grad();
                    const double sv = sd->value[0];
                    for (std::size_t i = 0; i < og.size(); ++i) xg[i] += og[i] * sv;
                }
                if (sd->requires_grad) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < og.size(); ++i) acc += og[i] * xd->value[i];
                    sd->ensure_grad()[0] += acc;
                }
            });
    }
    return out;
}

// Multiplies each channel by a fixed (non-learnable) weight. x is [N,C] or [N,C,H,W].
inline Tensor scale_channels(const Tensor& x, const std::vector<double>& w) {
    if (x.rank() != 2 && x.rank() != 4)
        throw DimensionError("scale_channels: expects [N,C] or [N,C,H,W]");
    const std::size_t c = x.shape()[1];
    if (w.size() != c) throw DimensionError("scale_channels: weight count != channels");
    const std::size_t n = x.shape()[0];
    const std::size_t p = x.numel() / (n * c);
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.value();
    auto& ov = out.mutable_value();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double wgt = w[ci];
            const double* src = xv.data() + (ni * c + ci) * p;
            double* dst = ov.data() + (ni * c + ci) * p;
            for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] * wgt;
        }
    if (detail::trace({&x})) {
        out.set_requires_grad(true);
        GradTape::active()->record([xd = x.data_ptr(), od = out.data_ptr(), w, n, c, p] {
            if (!xd->requires_grad) return;
            const auto& og = od->ensure_grad();
            auto& xg = xd->ensure_grad();
            for (std::size_t ni = 0; ni < n; ++ni)
                for (std::size_t ci = 0; ci < c; ++ci) {
                    const double wgt = w[ci];
                    const double* src = og.data() + (ni * c + ci) * p;
                    double* dst = xg.data() + (ni * c + ci) * p;
                    for (std::size_t i = 0; i < p; ++i) dst[i] += src[i] * wgt;
                }
        });
    }
    return out;
}

// Extension point for custom differentiable ops (used by tests to exercise the
// tape with hand-written rules). backward(output_grad, input, input_grad).
inline Tensor custom_unary(
    const Tensor& x, const std::function<std::vector<double>(const std::vector<double>&)>& fwd,
    const std::function<void(const std::vector<double>&, const std::vector<double>&,
                             std::vector<double>&)>& bwd,
    Shape out_shape = {}) {
    std::vector<double> y = fwd(x.value());
    Tensor out = Tensor::from(out_shape.empty() ? x.shape() : out_shape, std::move(y));
    if (detail::trace({&x})) {
        out.set_requires_grad(true);
        GradTape::active()->record([xd = x.data_ptr(), od = out.data_ptr(), bwd] {
            if (!xd->requires_grad) return;
            bwd(od->ensure_grad(), xd->value, xd->ensure_grad());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

struct FdReport {
    double max_rel_dev = 0.0;
    bool pass = false;
};

// Central-difference check of the analytic gradient of f at x. The deviation is
// |analytic - numeric| / max(1, |analytic|, |numeric|), maximized over entries.
inline FdReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                        double step, double tol) {
    if (step <= 0.0) throw ContractError("finite_difference_check: step must be positive");

    x.set_requires_grad(true);
    std::vector<double> analytic;
    {
        GradTape tape;
        Tensor y = f(x);
        if (y.numel() != 1)
            throw ContractError("finite_difference_check: f must return a scalar");
        tape.backward(y);
        analytic = x.grad();
    }

    FdReport report;
    auto& xv = x.mutable_value();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double saved = xv[i];
        xv[i] = saved + step;
        const double fp = f(x).item();
        xv[i] = saved - step;
        const double fm = f(x).item();
        xv[i] = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric)});
        report.max_rel_dev = std::max(report.max_rel_dev,
                                      std::fabs(analytic[i] - numeric) / denom);
    }
    report.pass = report.max_rel_dev < tol;
    return report;
}

}  // namespace s2il
