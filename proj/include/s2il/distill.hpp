#pragma once

// Feature-distillation losses: SSIM adapted to feature maps, the structural
// distillation loss built on it, and the two squared-norm baselines it is
// measured against.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "s2il/errors.hpp"
#include "s2il/features.hpp"
#include "s2il/tensor.hpp"

namespace s2il {

enum class PowerMode {
    sign_preserving,  // s^r computed as sign(s)*|s|^r, keeps the structure factor in [-1,1]
    plain,            // literal power; negative s requires an integer r
};

struct SSIMParams {
    double p = 0.1;
    double q = 8.0;
    double r = 8.0;
    // Classic stabilizer ratios for unit dynamic range: (K1*L)^2, (K2*L)^2, C2/2.
    double c1 = 1e-4;
    double c2 = 9e-4;
    double c3 = 4.5e-4;
    bool use_l = true;
    bool use_c = true;
    bool use_s = true;
    PowerMode power = PowerMode::sign_preserving;

    bool operator==(const SSIMParams&) const = default;

    void validate() const {
        if (!(c1 > 0.0) || !(c2 > 0.0) || !(c3 > 0.0))
            throw ContractError("SSIMParams: stabilizers must be positive");
        if (p < 0.0 || q < 0.0 || r < 0.0)
            throw ContractError("SSIMParams: exponents must be nonnegative");
    }
};

// Per-channel importance weights for the weighted baseline loss. Supplied by
// the caller; this module never estimates them.
struct FDWeights {
    std::vector<std::vector<double>> layer;  // layer[i][j] = rho_ij
    double pooled = 1.0;

    static FDWeights unit(const FeatureBundle& bundle) {
        FDWeights w;
        for (const Tensor& maps : bundle.layers)
            w.layer.emplace_back(maps.shape()[1], 1.0);
        w.pooled = 1.0;
        return w;
    }

    void validate() const {
        for (const auto& row : layer)
            for (double v : row)
                if (!(v >= 0.0) || !std::isfinite(v))
                    throw ContractError("FDWeights: values must be finite and nonnegative");
        if (!(pooled >= 0.0) || !std::isfinite(pooled))
            throw ContractError("FDWeights: pooled weight must be finite and nonnegative");
    }
};

namespace detail {

inline void check_map_pair(const Tensor& u, const Tensor& v) {
    check_same_shape(u, v, "ssim");
    const std::size_t positions = u.shape()[u.rank() - 1] * u.shape()[u.rank() - 2];
    if (u.rank() < 2 || positions < 2)
        throw ContractError("ssim: maps need at least 2 spatial positions, got " +
                            shape_str(u.shape()));
}

inline Tensor as_nchw(const Tensor& map) {
    if (map.rank() == 2) return reshape(map, {1, 1, map.shape()[0], map.shape()[1]});
    if (map.rank() == 4) return map;
    throw DimensionError("ssim: expected a [H,W] map or [N,C,H,W] batch, got " +
                         shape_str(map.shape()));
}

}  // namespace detail

// Raw similarity components per map, computed from spatial statistics with a
// single global window (one SSIM value per feature map). Inputs are [N,C,H,W];
// the result tensors are [N,C]. sigma_u*sigma_v is evaluated as
// sqrt(var_u*var_v) so identical inputs produce exactly 1 in every component.
struct SsimComponentTensors {
    Tensor l, c, s;
};

inline SsimComponentTensors ssim_component_tensors(const Tensor& u, const Tensor& v,
                                                   const SSIMParams& params) {
    params.validate();
    detail::check_map_pair(u, v);
    const Tensor un = detail::as_nchw(u);
    const Tensor vn = detail::as_nchw(v);

    const Tensor mu_u = spatial_mean(un);
    const Tensor mu_v = spatial_mean(vn);
    const Tensor var_u = spatial_var(un);
    const Tensor var_v = spatial_var(vn);
    const Tensor cov_uv = spatial_cov(un, vn);
    const Tensor sig_uv = sqrt(mul(var_u, var_v));

    SsimComponentTensors out;
    out.l = div(2.0 * mul(mu_u, mu_v) + params.c1,
                mul(mu_u, mu_u) + mul(mu_v, mu_v) + params.c1);
    out.c = div(2.0 * sig_uv + params.c2, var_u + var_v + params.c2);
    out.s = div(cov_uv + params.c3, sig_uv + params.c3);
    return out;
}

// SSIM map for batched features: [N,C,H,W] x [N,C,H,W] -> [N,C].
inline Tensor ssim_map(const Tensor& u, const Tensor& v, const SSIMParams& params) {
    SsimComponentTensors comp = ssim_component_tensors(u, v, params);
    std::optional<Tensor> acc;
    auto fold = [&acc](Tensor f) { acc = acc ? mul(*acc, std::move(f)) : std::move(f); };
    if (params.use_l) fold(pow(comp.l, params.p));
    if (params.use_c) fold(pow(comp.c, params.q));
    if (params.use_s)
        fold(params.power == PowerMode::sign_preserving ? signed_pow(comp.s, params.r)
                                                        : pow(comp.s, params.r));
    if (!acc) return Tensor::full({u.shape().size() == 2 ? 1 : u.shape()[0],
                                   u.shape().size() == 2 ? 1 : u.shape()[1]},
                                  1.0);
    return *acc;
}

struct SsimComponents {
    double l = 1.0, c = 1.0, s = 1.0;
};

// Component values for a single pair of maps ([H,W] or [1,1,H,W]).
inline SsimComponents ssim_components(const Tensor& u, const Tensor& v,
                                      const SSIMParams& params) {
    SsimComponentTensors comp = ssim_component_tensors(u, v, params);
    if (comp.l.numel() != 1)
        throw ContractError("ssim_components: expects a single map per argument");
    return {comp.l.value()[0], comp.c.value()[0], comp.s.value()[0]};
}

// SSIM value for a single pair of maps.
inline double ssim(const Tensor& u, const Tensor& v, const SSIMParams& params) {
    Tensor m = ssim_map(detail::as_nchw(u), detail::as_nchw(v), params);
    if (m.numel() != 1) throw ContractError("ssim: expects a single map per argument");
    return m.value()[0];
}

// Structural distillation loss over the last conv layer's maps: mean over the
// batch of the per-channel dissimilarities (1 - SSIM)/2 summed over channels.
// `previous` is treated as a constant (frozen teacher); no gradient reaches it.
inline Tensor s2il_loss(const Tensor& current, const Tensor& previous,
                        const SSIMParams& params) {
    if (current.rank() != 4 || previous.rank() != 4)
        throw DimensionError("s2il_loss: expects [N,C,H,W] feature maps");
    if (current.shape()[1] != previous.shape()[1])
        throw ContractError("s2il_loss: channel count mismatch " +
                            std::to_string(current.shape()[1]) + " vs " +
                            std::to_string(previous.shape()[1]));
    detail::check_map_pair(current, previous);
    const Tensor frozen = previous.requires_grad() ? previous.detach() : previous;
    const Tensor sim = ssim_map(current, frozen, params);     // [N,C]
    const Tensor terms = 0.5 * (1.0 - sim);                   // [N,C]
    return sum_all(terms) / static_cast<double>(current.shape()[0]);
}

// Per-channel dissimilarity terms without gradient tracking, for diagnostics.
inline std::vector<double> s2il_per_channel_terms(const Tensor& current, const Tensor& previous,
                                                  const SSIMParams& params) {
    const Tensor sim = ssim_map(current.detach(), previous.detach(), params);
    std::vector<double> terms(sim.numel());
    for (std::size_t i = 0; i < terms.size(); ++i) terms[i] = 0.5 * (1.0 - sim.value()[i]);
    return terms;
}

// Squared-norm feature distillation over every layer plus the pooled feature,
// batch-averaged. Without weights this is the plain objective; with weights
// each map's contribution is scaled by its importance. The two share one code
// path, so unit weights reproduce the unweighted loss bit for bit.
inline Tensor baseline_fd_loss(const FeatureBundle& current, const FeatureBundle& previous,
                               const std::optional<FDWeights>& weights = std::nullopt) {
    if (current.layers.size() != previous.layers.size())
        throw ContractError("baseline_fd_loss: layer count mismatch");
    if (current.layers.empty()) throw ContractError("baseline_fd_loss: empty bundles");
    FDWeights w = weights ? *weights : FDWeights::unit(current);
    w.validate();
    if (w.layer.size() != current.layers.size())
        throw ContractError("baseline_fd_loss: weight layer count mismatch");

    const std::size_t batch = current.layers[0].shape()[0];
    std::optional<Tensor> total;
    auto accumulate = [&total](Tensor term) {
        total = total ? add(*total, std::move(term)) : std::move(term);
    };

    for (std::size_t i = 0; i < current.layers.size(); ++i) {
        const Tensor& cur = current.layers[i];
        const Tensor prev = previous.layers[i].detach();
        detail::check_same_shape(cur, prev, "baseline_fd_loss");
        if (w.layer[i].size() != cur.shape()[1])
            throw ContractError("baseline_fd_loss: weight count mismatch at layer " +
                                std::to_string(i));
        const Tensor d = sub(cur, prev);
        accumulate(sum_all(scale_channels(mul(d, d), w.layer[i])));
    }
    if (current.pooled.numel() > 0) {
        const Tensor d = sub(current.pooled, previous.pooled.detach());
        accumulate(mul_scalar(sum_all(mul(d, d)), w.pooled));
    }
    return div_scalar(*total, static_cast<double>(batch));
}

}  // namespace s2il
