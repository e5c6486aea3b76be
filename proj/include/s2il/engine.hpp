#pragma once

// Per-task incremental training: backbone handoff between tasks, head growth
// with imprinted proxies, classification + distillation objective with the
// sqrt-ratio lambda schedule, balanced fine-tuning, and Oracle-mode training
// (full past data, no distillation).

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "s2il/dataset.hpp"
#include "s2il/distill.hpp"
#include "s2il/errors.hpp"
#include "s2il/exemplar.hpp"
#include "s2il/metrics.hpp"
#include "s2il/net.hpp"
#include "s2il/stream.hpp"

namespace s2il {

enum class DistillMode { none, eq1, eq2, s2il };

inline std::string to_string(DistillMode m) {
    switch (m) {
        case DistillMode::none: return "none";
        case DistillMode::eq1: return "eq1";
        case DistillMode::eq2: return "eq2";
        case DistillMode::s2il: return "s2il";
    }
    return "?";
}

struct TrainConfig {
    std::size_t epochs = 30;
    // The base task trains from scratch and usually needs a longer, hotter
    // schedule than the warm-started incremental tasks; 0 means "same as
    // epochs / lr".
    std::size_t base_epochs = 0;
    double base_lr = 0.0;
    std::size_t batch = 32;
    double lr = 0.1;
    double lr_min = 0.0;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double lambda_base = 4.0;
    std::size_t finetune_epochs = 10;
    double finetune_lr = 0.05;
    bool finetune_distill = true;
    std::uint64_t seed = 1;
    DistillMode mode = DistillMode::s2il;
    bool oracle = false;

    bool operator==(const TrainConfig&) const = default;

    void validate() const {
        if (batch == 0) throw ContractError("TrainConfig: batch size must be positive");
        if (lr < 0.0 || lr_min < 0.0 || finetune_lr < 0.0 || base_lr < 0.0)
            throw ContractError("TrainConfig: learning rates must be nonnegative");
        if (momentum < 0.0 || momentum >= 1.0)
            throw ContractError("TrainConfig: momentum must be in [0,1)");
        if (weight_decay < 0.0) throw ContractError("TrainConfig: negative weight decay");
        if (lambda_base < 0.0) throw ContractError("TrainConfig: negative lambda base");
    }
};

// Distillation weight: base * sqrt(classes seen / classes new). Grows with the
// accumulated class count, reflecting the rising need to preserve old knowledge.
inline double lambda_schedule(double base, std::size_t classes_seen, std::size_t classes_new) {
    if (classes_new == 0) throw ContractError("lambda_schedule: classes_new must be positive");
    if (classes_seen < classes_new)
        throw ContractError("lambda_schedule: classes_seen < classes_new");
    return base * std::sqrt(static_cast<double>(classes_seen) /
                            static_cast<double>(classes_new));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (splitmix64(b) + 0x9e3779b97f4a7c15ull));
}

template <typename... Rest>
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
    return mix_seed(mix_seed(a, b), static_cast<std::uint64_t>(rest)...);
}

// SGD with momentum and decoupled-from-schedule weight decay (added to the
// gradient, classic formulation).
class Sgd {
  public:
    Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0);
    }

    void step(double lr) {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor& p = params_[k];
            const auto& g = p.grad();
            auto& vel = velocity_[k];
            auto& val = p.mutable_value();
            for (std::size_t i = 0; i < val.size(); ++i) {
                const double grad = g[i] + weight_decay_ * val[i];
                vel[i] = momentum_ * vel[i] + grad;
                val[i] -= lr * vel[i];
            }
        }
    }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_;
    double weight_decay_;
};

// Cosine annealing from lr down to lr_min across the epoch count.
inline double cosine_lr(double lr, double lr_min, std::size_t epoch, std::size_t total) {
    if (total <= 1) return lr;
    const double t = static_cast<double>(epoch) / static_cast<double>(total);
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(M_PI * t));
}

struct TaskDiagnostics {
    double lambda = 0.0;
    std::map<int, std::size_t> class_draws;     // main-phase sampler statistics
    std::vector<double> cls_batch_losses;       // main phase, per batch
    std::vector<double> distill_batch_losses;   // main phase, per batch
    std::vector<int> imprint_fallbacks;
};

struct TaskOutcome {
    Model model;
    std::vector<double> task_accuracies;  // a[t][0..t]
    TaskDiagnostics diag;
};

class Trainer {
  public:
    Trainer(const Dataset& data, const TaskStream& stream, NetConfig net_cfg, TrainConfig cfg,
            SSIMParams ssim_params = {}, std::optional<FDWeights> fd_weights = std::nullopt)
        : data_(data),
          stream_(stream),
          net_cfg_(net_cfg),
          cfg_(cfg),
          ssim_(ssim_params),
          fd_weights_(std::move(fd_weights)) {
        net_cfg_.validate();
        cfg_.validate();
        ssim_.validate();
    }

    bool collect_gradcam = false;
    GradCamSource gradcam_source = GradCamSource::presoftmax;

    // Runs tasks 0..T, maintaining the exemplar store between tasks. The sink,
    // when given, receives each trained per-task snapshot.
    RunRecord run_stream(ExemplarStore& store,
                         const std::function<void(std::size_t, const Model&)>& sink = {}) {
        RunRecord record;
        diagnostics_.clear();
        std::optional<Model> prev;
        for (std::size_t t = 0; t < stream_.tasks.size(); ++t) {
            TaskOutcome out = train_task(prev ? &*prev : nullptr, t, store);
            record.append_task(out.task_accuracies, stream_.tasks[t].classes.size());
            record.alphas.push_back(collect_gradcam ? collect_alphas(out.model)
                                                    : std::map<int, std::vector<double>>{});
            diagnostics_.push_back(out.diag);
            if (sink) sink(t, out.model);
            prev = std::move(out.model);
        }
        final_model_ = std::move(prev);
        return record;
    }

    // Trains task t. For t=0 the model starts from seeded random init and
    // trains with the classification loss alone; for t>0 the backbone continues
    // from the previous snapshot, the head grows with imprinted proxies, and
    // the loss gains the selected distillation term against the frozen teacher.
    // Oracle mode instead samples all data seen so far and forces lambda to 0.
    TaskOutcome train_task(const Model* model_prev, std::size_t t, ExemplarStore& store) {
        if (t >= stream_.tasks.size()) throw ContractError("train_task: task out of range");
        if (t > 0 && model_prev == nullptr)
            throw ContractError("train_task: previous snapshot required for t>0");

        const Task& task = stream_.tasks[t];
        TaskOutcome out;
        TaskDiagnostics& diag = out.diag;

        std::optional<Model> teacher;
        if (t == 0) {
            out.model = Model::init(net_cfg_, mix_seed(cfg_.seed, 0xA110C, 0));
            std::mt19937_64 rng(mix_seed(cfg_.seed, 0x4EAD, 0));
            out.model.head.add_classes_random(task.classes, rng);
        } else {
            if (model_prev->cfg.feature_dim() != net_cfg_.feature_dim())
                throw ContractError("train_task: teacher/student channel mismatch");
            out.model = model_prev->clone();
            teacher = model_prev->frozen_clone();

            std::mt19937_64 rng(mix_seed(cfg_.seed, 0x4EAD, t));
            diag.imprint_fallbacks = out.model.head.add_classes_imprinted(
                task.classes, class_mean_embeddings(out.model, task), rng,
                net_cfg_.imprint_jitter);
        }

        // Training pool: new data plus replayed exemplars, or everything seen
        // so far in Oracle mode.
        std::vector<std::size_t> pool;
        if (cfg_.oracle) {
            pool = stream_.train_through(t);
        } else {
            pool = task.train_ids;
            if (t > 0) {
                for (int cls : stream_.classes_through(t - 1))
                    if (!store.has_class(cls))
                        throw ContractError("train_task: exemplar store missing class " +
                                            std::to_string(cls));
                const auto replay = store.all_ids();
                pool.insert(pool.end(), replay.begin(), replay.end());
            }
        }

        const bool distill = t > 0 && !cfg_.oracle && cfg_.mode != DistillMode::none;
        diag.lambda = distill ? lambda_schedule(cfg_.lambda_base, stream_.class_count_through(t),
                                                task.classes.size())
                              : 0.0;

        const std::size_t epochs =
            (t == 0 && cfg_.base_epochs > 0) ? cfg_.base_epochs : cfg_.epochs;
        const double lr = (t == 0 && cfg_.base_lr > 0.0) ? cfg_.base_lr : cfg_.lr;
        train_phase(out.model, teacher ? &*teacher : nullptr, pool, diag.lambda, epochs, lr,
                    t, /*phase=*/0, &diag);

        // Exemplars for the classes just learned, selected by herding on the
        // freshly trained features; the budget is then respread over all seen
        // classes. Oracle runs never consume the store.
        if (!cfg_.oracle) {
            update_store(store, out.model, task);
            if (t > 0 && cfg_.finetune_epochs > 0)
                out.model = finetune_balanced(std::move(out.model), t, store,
                                              teacher ? &*teacher : nullptr, diag.lambda);
        }

        out.task_accuracies = evaluate(out.model, t);
        return out;
    }

    // Balanced fine-tune: every seen class contributes the same number of
    // samples (its exemplar-store prefix truncated to the smallest per-class
    // count); the distillation term stays active with the same lambda unless
    // configured off.
    // Equal-per-class sample ids for the fine-tune phase: every class seen
    // through t contributes the same count (the smallest stored prefix).
    std::vector<std::size_t> balanced_pool(std::size_t t, const ExemplarStore& store) const {
        for (int cls : stream_.classes_through(t)) {
            if (!store.has_class(cls) || store.count(cls) == 0)
                throw ContractError("finetune_balanced: class " + std::to_string(cls) +
                                    " has no samples");
        }
        const std::size_t per_class = store.min_count();
        std::vector<std::size_t> pool;
        for (int cls : stream_.classes_through(t)) {
            const auto ids = store.ids(cls);
            pool.insert(pool.end(), ids.begin(),
                        ids.begin() + static_cast<std::ptrdiff_t>(per_class));
        }
        return pool;
    }

    Model finetune_balanced(Model model, std::size_t t, const ExemplarStore& store,
                            const Model* teacher, double lambda) {
        std::vector<std::size_t> pool = balanced_pool(t, store);
        if (cfg_.finetune_epochs == 0) return model;
        const double ft_lambda = cfg_.finetune_distill ? lambda : 0.0;
        train_phase(model, teacher, pool, ft_lambda, cfg_.finetune_epochs, cfg_.finetune_lr, t,
                    /*phase=*/1, nullptr);
        return model;
    }

    // Accuracy on each task's test split through task t, evaluated over all
    // classes seen so far.
    std::vector<double> evaluate(const Model& model, std::size_t t) const {
        std::vector<double> acc;
        for (std::size_t i = 0; i <= t; ++i) {
            const auto& ids = stream_.tasks[i].test_ids;
            std::size_t correct = 0;
            for (std::size_t off = 0; off < ids.size(); off += kEvalChunk) {
                const std::size_t n = std::min(kEvalChunk, ids.size() - off);
                std::vector<std::size_t> chunk(ids.begin() + off, ids.begin() + off + n);
                const Tensor x = data_.batch(chunk);
                const FeatureBundle bundle = model.forward(x);
                const auto& scores = bundle.scores.value();
                const std::size_t c = bundle.scores.shape()[1];
                for (std::size_t k = 0; k < n; ++k) {
                    std::size_t best = 0;
                    for (std::size_t j = 1; j < c; ++j)
                        if (scores[k * c + j] > scores[k * c + best]) best = j;
                    if (model.head.class_ids()[best] == data_.labels[chunk[k]]) ++correct;
                }
            }
            acc.push_back(static_cast<double>(correct) / static_cast<double>(ids.size()));
        }
        return acc;
    }

    const std::vector<TaskDiagnostics>& diagnostics() const { return diagnostics_; }
    const std::optional<Model>& final_model() const { return final_model_; }
    const TaskStream& stream() const { return stream_; }

  private:
    static constexpr std::size_t kEvalChunk = 128;

    std::vector<std::vector<double>> class_mean_embeddings(const Model& model,
                                                           const Task& task) const {
        std::vector<std::vector<double>> out;
        for (int cls : task.classes) {
            const auto ids = data_.class_indices(cls, false);
            std::vector<double> mean(model.cfg.feature_dim(), 0.0);
            std::size_t total = 0;
            for (std::size_t off = 0; off < ids.size(); off += kEvalChunk) {
                const std::size_t n = std::min(kEvalChunk, ids.size() - off);
                std::vector<std::size_t> chunk(ids.begin() + off, ids.begin() + off + n);
                const FeatureBundle bundle = model.forward(data_.batch(chunk));
                const auto& pooled = bundle.pooled.value();
                const std::size_t d = mean.size();
                for (std::size_t k = 0; k < n; ++k)
                    for (std::size_t j = 0; j < d; ++j) mean[j] += pooled[k * d + j];
                total += n;
            }
            for (double& v : mean) v /= static_cast<double>(total);
            out.push_back(std::move(mean));
        }
        return out;
    }

    void train_phase(Model& model, const Model* teacher, std::vector<std::size_t> pool,
                     double lambda, std::size_t epochs, double lr0, std::size_t t,
                     std::size_t phase, TaskDiagnostics* diag) {
        if (pool.empty()) throw ContractError("train_phase: empty sample pool");
        Sgd opt(model.parameters(), cfg_.momentum, cfg_.weight_decay);

        for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
            const double lr = cosine_lr(lr0, cfg_.lr_min, epoch, epochs);
            std::mt19937_64 rng(mix_seed(cfg_.seed, t, phase, epoch));
            std::shuffle(pool.begin(), pool.end(), rng);

            for (std::size_t off = 0; off < pool.size(); off += cfg_.batch) {
                const std::size_t n = std::min(cfg_.batch, pool.size() - off);
                std::vector<std::size_t> batch_ids(pool.begin() + off, pool.begin() + off + n);
                std::vector<std::size_t> labels(n);
                for (std::size_t k = 0; k < n; ++k) {
                    labels[k] = model.head.slot_of(data_.labels[batch_ids[k]]);
                    if (diag && phase == 0) ++diag->class_draws[data_.labels[batch_ids[k]]];
                }

                const Tensor x = data_.batch(batch_ids);
                GradTape tape;
                model.zero_grad();
                FeatureBundle bundle = model.forward(x);
                Tensor loss = lsc_loss(bundle, labels, model.head);
                const double cls_value = loss.item();
                double distill_value = 0.0;
                if (lambda > 0.0 && teacher != nullptr) {
                    const FeatureBundle prev = teacher->forward(x);
                    Tensor dloss =
                        cfg_.mode == DistillMode::s2il
                            ? s2il_loss(bundle.last_maps(), prev.last_maps(), ssim_)
                            : baseline_fd_loss(bundle, prev,
                                               cfg_.mode == DistillMode::eq2 ? fd_weights_
                                                                             : std::nullopt);
                    distill_value = dloss.item();
                    loss = add(loss, mul_scalar(dloss, lambda));
                }
                if (!std::isfinite(loss.item()))
                    throw NumericError("non-finite loss at task " + std::to_string(t) +
                                       ", phase " + std::to_string(phase) + ", epoch " +
                                       std::to_string(epoch) + ", batch " +
                                       std::to_string(off / cfg_.batch));
                if (diag && phase == 0) {
                    diag->cls_batch_losses.push_back(cls_value);
                    if (lambda > 0.0) diag->distill_batch_losses.push_back(distill_value);
                }
                tape.backward(loss);
                opt.step(lr);
                model.head.renormalize();
            }
        }
    }

    void update_store(ExemplarStore& store, const Model& model, const Task& task) const {
        for (int cls : task.classes) {
            const auto ids = data_.class_indices(cls, false);
            std::vector<std::vector<double>> features;
            features.reserve(ids.size());
            for (std::size_t off = 0; off < ids.size(); off += kEvalChunk) {
                const std::size_t n = std::min(kEvalChunk, ids.size() - off);
                std::vector<std::size_t> chunk(ids.begin() + off, ids.begin() + off + n);
                const FeatureBundle bundle = model.forward(data_.batch(chunk));
                const auto& pooled = bundle.pooled.value();
                const std::size_t d = model.cfg.feature_dim();
                for (std::size_t k = 0; k < n; ++k)
                    features.emplace_back(pooled.begin() + k * d, pooled.begin() + (k + 1) * d);
            }
            const auto order =
                herding_select(features, features.size(), store.normalize_features());
            std::vector<std::size_t> global_order(order.size());
            for (std::size_t k = 0; k < order.size(); ++k) global_order[k] = ids[order[k]];
            store.add_class(cls, std::move(global_order));
        }
        if (store.policy() == ExemplarPolicy::total_budget)
            store.rebalance(store.num_classes());
    }

    std::map<int, std::vector<double>> collect_alphas(const Model& model) const {
        std::map<int, std::vector<double>> out;
        for (int cls : stream_.tasks[0].classes) {
            const auto ids = data_.class_indices(cls, true);
            if (ids.empty()) continue;
            out[cls] = gradcam_importance(model, data_.batch(ids), model.head.slot_of(cls),
                                          gradcam_source);
        }
        return out;
    }

    const Dataset& data_;
    const TaskStream& stream_;
    NetConfig net_cfg_;
    TrainConfig cfg_;
    SSIMParams ssim_;
    std::optional<FDWeights> fd_weights_;
    std::vector<TaskDiagnostics> diagnostics_;
    std::optional<Model> final_model_;
};

}  // namespace s2il
