#pragma once

// Exemplar selection by greedy herding and budget management. The store keeps
// the full herding order per class; the retained set is always a prefix of it,
// so shrinking quotas never require reselection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "s2il/errors.hpp"

namespace s2il {

enum class ExemplarPolicy {
    per_class,     // M1: fixed k exemplars per class
    total_budget,  // M2: fixed overall budget, split evenly across seen classes
};

// Greedy herding over one class's feature vectors: each step picks the sample
// that brings the running mean of selected features closest to the class mean.
// Ties break toward the lowest index. Returns the first k indices in selection
// order; k = features.size() yields the full order.
inline std::vector<std::size_t> herding_select(const std::vector<std::vector<double>>& features,
                                               std::size_t k, bool normalize = true) {
    const std::size_t n = features.size();
    if (n == 0) throw ContractError("herding_select: empty class");
    if (k > n) throw ContractError("herding_select: k exceeds sample count");
    const std::size_t dim = features[0].size();
    for (const auto& f : features)
        if (f.size() != dim) throw DimensionError("herding_select: ragged feature vectors");

    std::vector<std::vector<double>> phi = features;
    if (normalize) {
        for (auto& f : phi) {
            double s = 0.0;
            for (double v : f) s += v * v;
            const double nm = std::sqrt(s);
            if (nm > 0.0)
                for (double& v : f) v /= nm;
        }
    }

    std::vector<double> mean(dim, 0.0);
    for (const auto& f : phi)
        for (std::size_t j = 0; j < dim; ++j) mean[j] += f[j];
    for (double& v : mean) v /= static_cast<double>(n);

    std::vector<std::size_t> picked;
    std::vector<bool> used(n, false);
    std::vector<double> sum(dim, 0.0);
    for (std::size_t step = 1; step <= k; ++step) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_i = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (used[i]) continue;
            double d2 = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double diff = mean[j] - (sum[j] + phi[i][j]) / static_cast<double>(step);
                d2 += diff * diff;
            }
            if (d2 < best) {
                best = d2;
                best_i = i;
            }
        }
        used[best_i] = true;
        picked.push_back(best_i);
        for (std::size_t j = 0; j < dim; ++j) sum[j] += phi[best_i][j];
    }
    return picked;
}

class ExemplarStore {
  public:
    ExemplarStore() = default;
    static ExemplarStore per_class(std::size_t k, bool normalize = true) {
        ExemplarStore s;
        s.policy_ = ExemplarPolicy::per_class;
        s.per_class_k_ = k;
        s.normalize_ = normalize;
        return s;
    }
    static ExemplarStore total_budget(std::size_t budget, bool normalize = true) {
        ExemplarStore s;
        s.policy_ = ExemplarPolicy::total_budget;
        s.budget_ = budget;
        s.normalize_ = normalize;
        return s;
    }

    ExemplarPolicy policy() const { return policy_; }
    bool normalize_features() const { return normalize_; }
    std::size_t budget() const { return budget_; }

    // Registers a class with its full herding order over global sample ids.
    void add_class(int cls, std::vector<std::size_t> full_order) {
        if (full_order.empty()) throw ContractError("ExemplarStore: empty herding order");
        if (order_.count(cls))
            throw ContractError("ExemplarStore: class already present: " + std::to_string(cls));
        const std::size_t n = full_order.size();
        order_[cls] = std::move(full_order);
        quota_[cls] = policy_ == ExemplarPolicy::per_class ? std::min(per_class_k_, n) : n;
    }

    bool has_class(int cls) const { return order_.count(cls) > 0; }
    std::size_t num_classes() const { return order_.size(); }

    // M2 rebalance: quota = floor(budget / classes_seen), remainder handed to
    // the lowest class ids. Idempotent for a fixed class count.
    void rebalance(std::size_t classes_seen) {
        if (policy_ != ExemplarPolicy::total_budget)
            throw ContractError("rebalance: store is not budget-managed");
        if (classes_seen == 0 || classes_seen != order_.size())
            throw ContractError("rebalance: classes_seen must match registered classes");
        const std::size_t base = budget_ / classes_seen;
        if (base == 0)
            throw ContractError("rebalance: budget " + std::to_string(budget_) +
                                " too small for " + std::to_string(classes_seen) + " classes");
        std::size_t remainder = budget_ - base * classes_seen;
        for (auto& [cls, ids] : order_) {  // std::map iterates ascending class id
            std::size_t q = base + (remainder > 0 ? 1 : 0);
            if (remainder > 0) --remainder;
            quota_[cls] = std::min(q, ids.size());
        }
    }

    // Retained exemplars: the herding-order prefix of length quota.
    std::vector<std::size_t> ids(int cls) const {
        auto it = order_.find(cls);
        if (it == order_.end())
            throw ContractError("ExemplarStore: unknown class " + std::to_string(cls));
        const std::size_t q = quota_.at(cls);
        return {it->second.begin(), it->second.begin() + static_cast<std::ptrdiff_t>(q)};
    }

    std::size_t count(int cls) const {
        auto it = quota_.find(cls);
        if (it == quota_.end())
            throw ContractError("ExemplarStore: unknown class " + std::to_string(cls));
        return it->second;
    }

    std::vector<std::size_t> all_ids() const {
        std::vector<std::size_t> out;
        for (const auto& [cls, ids] : order_) {
            const std::size_t q = quota_.at(cls);
            out.insert(out.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(q));
        }
        return out;
    }

    std::size_t total_stored() const {
        std::size_t n = 0;
        for (const auto& [cls, q] : quota_) n += q;
        return n;
    }

    std::size_t min_count() const {
        if (quota_.empty()) throw StateError("ExemplarStore: empty store");
        std::size_t m = std::numeric_limits<std::size_t>::max();
        for (const auto& [cls, q] : quota_) m = std::min(m, q);
        return m;
    }

    const std::map<int, std::vector<std::size_t>>& full_orders() const { return order_; }

  private:
    ExemplarPolicy policy_ = ExemplarPolicy::total_budget;
    std::size_t per_class_k_ = 20;
    std::size_t budget_ = 2000;
    bool normalize_ = true;
    std::map<int, std::vector<std::size_t>> order_;  // class -> full herding order
    std::map<int, std::size_t> quota_;               // class -> retained prefix length
};

}  // namespace s2il
