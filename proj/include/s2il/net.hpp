#pragma once

// Small configurable CNN backbone, growing multi-proxy cosine classifier,
// Grad-CAM channel importance, and binary model snapshots.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "s2il/errors.hpp"
#include "s2il/features.hpp"
#include "s2il/tensor.hpp"

namespace s2il {

struct NetConfig {
    std::size_t input_size = 32;  // square inputs
    std::size_t input_channels = 1;
    std::vector<std::size_t> channels = {16, 32, 64};
    std::size_t kernel = 3;  // odd, zero-padded to preserve spatial size
    std::size_t proxies_per_class = 10;
    double margin = 0.6;
    double scale_init = 1.0;
    // Projection floor for the learnable scale: keeps the temperature from
    // collapsing through zero before the similarities separate.
    double scale_floor = 1.0;
    double imprint_jitter = 0.01;

    bool operator==(const NetConfig&) const = default;

    std::size_t feature_dim() const { return channels.back(); }

    // 2x2 max-pool after every block except the last.
    bool pool_after(std::size_t block) const { return block + 1 < channels.size(); }

    std::size_t final_spatial() const {
        std::size_t s = input_size;
        for (std::size_t i = 0; i < channels.size(); ++i)
            if (pool_after(i)) s /= 2;
        return s;
    }

    void validate() const {
        if (channels.empty()) throw ContractError("NetConfig: needs at least one conv block");
        if (kernel % 2 == 0 || kernel == 0)
            throw ContractError("NetConfig: kernel must be odd");
        if (input_size < kernel) throw ContractError("NetConfig: input smaller than kernel");
        if (proxies_per_class == 0)
            throw ContractError("NetConfig: proxies_per_class must be positive");
        // SSIM statistics need at least 2 spatial positions per axis.
        if (final_spatial() < 2)
            throw ContractError("NetConfig: final feature maps smaller than 2x2");
    }
};

// Cosine-similarity classifier with K proxies per class. The per-class score
// is the softmax-weighted average of the feature's cosine similarities to that
// class's proxies, so adding classes never perturbs existing class scores.
class ProxyHead {
  public:
    ProxyHead() = default;
    ProxyHead(std::size_t proxies_per_class, std::size_t feature_dim, double margin,
              double scale_init, double scale_floor = 1.0)
        : k_(proxies_per_class), dim_(feature_dim), margin_(margin),
          scale_floor_(scale_floor) {
        scale_ = Tensor::scalar(scale_init);
        scale_.set_requires_grad(true);
    }

    std::size_t num_classes() const { return class_ids_.size(); }
    std::size_t proxies_per_class() const { return k_; }
    std::size_t feature_dim() const { return dim_; }
    double margin() const { return margin_; }
    const std::vector<int>& class_ids() const { return class_ids_; }
    Tensor& scale() { return scale_; }
    const Tensor& scale() const { return scale_; }
    Tensor& proxies() { return proxies_; }
    const Tensor& proxies() const { return proxies_; }

    bool has_class(int id) const {
        return std::find(class_ids_.begin(), class_ids_.end(), id) != class_ids_.end();
    }

    std::size_t slot_of(int id) const {
        auto it = std::find(class_ids_.begin(), class_ids_.end(), id);
        if (it == class_ids_.end())
            throw ContractError("ProxyHead: unknown class id " + std::to_string(id));
        return static_cast<std::size_t>(it - class_ids_.begin());
    }

    // Aggregated per-class similarity scores for pooled features [N, D].
    Tensor scores(const Tensor& pooled) const {
        if (num_classes() == 0) throw StateError("ProxyHead: no classes registered");
        const std::size_t n = pooled.shape()[0];
        const Tensor fn = l2_normalize_rows(pooled);
        const Tensor pn = l2_normalize_rows(proxies_);
        const Tensor cos = reshape(matmul_nt(fn, pn), {n, num_classes(), k_});
        return sum_last(mul(softmax(cos), cos));
    }

    void add_classes_random(const std::vector<int>& ids, std::mt19937_64& rng) {
        std::vector<std::vector<double>> rows;
        for (int id : ids) {
            check_new_class(id);
            for (std::size_t p = 0; p < k_; ++p) rows.push_back(random_unit(rng));
        }
        append(ids, rows);
    }

    // Imprinting: every proxy of a new class starts at the unit-normalized
    // class-mean embedding plus a small seeded perturbation. Returns the ids
    // whose embedding had no usable direction and fell back to a random unit.
    std::vector<int> add_classes_imprinted(const std::vector<int>& ids,
                                           const std::vector<std::vector<double>>& embeddings,
                                           std::mt19937_64& rng, double jitter) {
        if (ids.size() != embeddings.size())
            throw ContractError("ProxyHead: one embedding required per new class");
        std::vector<int> fallbacks;
        std::vector<std::vector<double>> rows;
        for (std::size_t c = 0; c < ids.size(); ++c) {
            check_new_class(ids[c]);
            if (embeddings[c].size() != dim_)
                throw DimensionError("ProxyHead: embedding dimension mismatch");
            std::vector<double> base = embeddings[c];
            if (!normalize(base)) {
                base = random_unit(rng);
                fallbacks.push_back(ids[c]);
            }
            std::normal_distribution<double> noise(0.0, jitter);
            for (std::size_t p = 0; p < k_; ++p) {
                std::vector<double> row = base;
                for (double& v : row) v += noise(rng);
                if (!normalize(row)) row = base;
                rows.push_back(std::move(row));
            }
        }
        append(ids, rows);
        return fallbacks;
    }

    // Projects every proxy back onto the unit sphere and keeps the scale
    // positive (a negative temperature would invert the margin semantics).
    // Applied after each optimizer step; not a recorded operation.
    void renormalize() {
        scale_.mutable_value()[0] = std::max(scale_.value()[0], scale_floor_);
        if (num_classes() == 0) return;
        auto& data = proxies_.mutable_value();
        const std::size_t rows = proxies_.shape()[0];
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < dim_; ++j) s += data[r * dim_ + j] * data[r * dim_ + j];
            const double nm = std::sqrt(s);
            if (nm > 0.0)
                for (std::size_t j = 0; j < dim_; ++j) data[r * dim_ + j] /= nm;
        }
    }

    ProxyHead clone() const {
        ProxyHead h;
        h.k_ = k_;
        h.dim_ = dim_;
        h.margin_ = margin_;
        h.scale_floor_ = scale_floor_;
        h.class_ids_ = class_ids_;
        h.scale_ = scale_.clone();
        if (proxies_.numel() > 0) h.proxies_ = proxies_.clone();
        return h;
    }

    void set_trainable(bool on) {
        scale_.set_requires_grad(on);
        if (proxies_.numel() > 0) proxies_.set_requires_grad(on);
    }

    // Deserialization hook: install a previously saved slot registry + proxies.
    void restore_slots(const std::vector<int>& ids, const Tensor& proxies) {
        if (!class_ids_.empty()) throw StateError("ProxyHead: slots already populated");
        if (proxies.rank() != 2 || proxies.shape()[0] != ids.size() * k_ ||
            proxies.shape()[1] != dim_)
            throw IoError("ProxyHead: proxy tensor shape does not match registry");
        class_ids_ = ids;
        proxies_ = proxies.clone();
        proxies_.set_requires_grad(true);
    }

  private:
    void check_new_class(int id) {
        if (has_class(id))
            throw ContractError("ProxyHead: duplicate class id " + std::to_string(id));
    }

    std::vector<double> random_unit(std::mt19937_64& rng) const {
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<double> v(dim_);
        double s;
        do {
            s = 0.0;
            for (double& x : v) {
                x = dist(rng);
                s += x * x;
            }
        } while (s == 0.0);
        const double nm = std::sqrt(s);
        for (double& x : v) x /= nm;
        return v;
    }

    static bool normalize(std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        if (s <= 0.0 || !std::isfinite(s)) return false;
        const double nm = std::sqrt(s);
        for (double& x : v) x /= nm;
        return true;
    }

    void append(const std::vector<int>& ids, const std::vector<std::vector<double>>& rows) {
        if (ids.empty()) return;
        const bool trainable = proxies_.numel() > 0 ? proxies_.requires_grad() : true;
        std::vector<double> flat;
        flat.reserve(rows.size() * dim_);
        for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
        Tensor fresh = Tensor::from({rows.size(), dim_}, std::move(flat));
        if (proxies_.numel() == 0) {
            proxies_ = fresh;
        } else {
            // Existing rows are copied bit-for-bit into a new leaf parameter.
            proxies_ = concat(proxies_.detach(), fresh, 0);
        }
        proxies_.set_requires_grad(trainable);
        class_ids_.insert(class_ids_.end(), ids.begin(), ids.end());
    }

    std::size_t k_ = 0;
    std::size_t dim_ = 0;
    double margin_ = 0.6;
    double scale_floor_ = 1.0;
    Tensor scale_;
    Tensor proxies_;
    std::vector<int> class_ids_;
};

struct ConvBlock {
    Tensor weight;  // [Cout, Cin, k, k]
    Tensor bias;    // [Cout]
    bool pool = false;
};

class Model {
  public:
    NetConfig cfg;
    std::vector<ConvBlock> blocks;
    ProxyHead head;

    static Model init(const NetConfig& config, std::uint64_t seed) {
        config.validate();
        Model m;
        m.cfg = config;
        m.head = ProxyHead(config.proxies_per_class, config.feature_dim(), config.margin,
                           config.scale_init, config.scale_floor);
        std::mt19937_64 rng(seed);
        std::size_t cin = config.input_channels;
        for (std::size_t i = 0; i < config.channels.size(); ++i) {
            const std::size_t cout = config.channels[i];
            const double stddev =
                std::sqrt(2.0 / static_cast<double>(cin * config.kernel * config.kernel));
            ConvBlock blk;
            blk.weight = Tensor::randn({cout, cin, config.kernel, config.kernel}, rng, stddev);
            blk.weight.set_requires_grad(true);
            blk.bias = Tensor::zeros({cout});
            blk.bias.set_requires_grad(true);
            blk.pool = config.pool_after(i);
            m.blocks.push_back(std::move(blk));
            cin = cout;
        }
        return m;
    }

    FeatureBundle forward(const Tensor& x) const {
        if (x.rank() != 4 || x.shape()[1] != cfg.input_channels ||
            x.shape()[2] != cfg.input_size || x.shape()[3] != cfg.input_size)
            throw DimensionError("Model::forward: expected [N," +
                                 std::to_string(cfg.input_channels) + "," +
                                 std::to_string(cfg.input_size) + "," +
                                 std::to_string(cfg.input_size) + "], got " +
                                 shape_str(x.shape()));
        FeatureBundle bundle;
        Tensor y = x;
        const std::size_t pad = cfg.kernel / 2;
        for (const ConvBlock& blk : blocks) {
            y = relu(bias_add_channel(conv2d(y, blk.weight, 1, pad), blk.bias));
            if (blk.pool) y = maxpool2d(y, 2, 2);
            bundle.layers.push_back(y);
        }
        bundle.pooled = global_avg_pool(bundle.layers.back());
        if (head.num_classes() > 0) bundle.scores = head.scores(bundle.pooled);
        return bundle;
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        for (ConvBlock& blk : blocks) {
            out.push_back(blk.weight);
            out.push_back(blk.bias);
        }
        if (head.proxies().numel() > 0) out.push_back(head.proxies());
        out.push_back(head.scale());
        return out;
    }

    void zero_grad() {
        for (Tensor& p : parameters()) p.zero_grad();
    }

    void set_trainable(bool on) {
        for (ConvBlock& blk : blocks) {
            blk.weight.set_requires_grad(on);
            blk.bias.set_requires_grad(on);
        }
        head.set_trainable(on);
    }

    Model clone() const {
        Model m;
        m.cfg = cfg;
        for (const ConvBlock& blk : blocks)
            m.blocks.push_back({blk.weight.clone(), blk.bias.clone(), blk.pool});
        m.head = head.clone();
        return m;
    }

    Model frozen_clone() const {
        Model m = clone();
        m.set_trainable(false);
        return m;
    }
};

// Classification loss: NCA-style softmax over per-class proxy similarities,
// with the margin subtracted from the true class and the learnable scale
// applied before the softmax.
inline Tensor lsc_loss(const FeatureBundle& bundle, const std::vector<std::size_t>& labels,
                       const ProxyHead& head) {
    if (bundle.scores.numel() == 0) throw StateError("lsc_loss: bundle has no scores");
    const std::size_t n = bundle.scores.shape()[0];
    const std::size_t c = bundle.scores.shape()[1];
    if (labels.size() != n) throw ContractError("lsc_loss: label count mismatch");
    Tensor margin_hot = Tensor::zeros({n, c});
    auto& mh = margin_hot.mutable_value();
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= c)
            throw ContractError("lsc_loss: label slot " + std::to_string(labels[i]) +
                                " outside known classes");
        mh[i * c + labels[i]] = head.margin();
    }
    const Tensor logits = sub(scale_mul(bundle.scores, head.scale()), margin_hot);
    return softmax_cross_entropy(logits, labels);
}

enum class GradCamSource {
    presoftmax,   // class similarity score (before scale and softmax)
    postsoftmax,  // class probability
};

// Mean Grad-CAM importance of each last-layer channel for one class: the
// per-sample gradient of the class score wrt each map, globally averaged over
// space, then averaged over the batch. Returns a vector of length L_fm.
inline std::vector<double> gradcam_importance(const Model& model, const Tensor& samples,
                                              std::size_t class_slot,
                                              GradCamSource source = GradCamSource::presoftmax) {
    if (samples.numel() == 0 || samples.shape()[0] == 0)
        throw ContractError("gradcam_importance: empty batch");
    if (class_slot >= model.head.num_classes())
        throw ContractError("gradcam_importance: class slot out of range");

    // Marking the input differentiable forces recording even on frozen models.
    Tensor x = samples.detach();
    x.set_requires_grad(true);
    GradTape tape;
    FeatureBundle bundle = model.forward(x);
    Tensor col;
    if (source == GradCamSource::presoftmax) {
        col = select_column(bundle.scores, class_slot);
    } else {
        col = select_column(softmax(scale_mul(bundle.scores, model.head.scale())), class_slot);
    }
    tape.backward(sum_all(col));

    const Tensor& maps = bundle.last_maps();
    const auto& g = maps.grad();
    const std::size_t n = maps.shape()[0], c = maps.shape()[1];
    const std::size_t p = maps.shape()[2] * maps.shape()[3];
    std::vector<double> alpha(c, 0.0);
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double* plane = g.data() + (ni * c + ci) * p;
            double s = 0.0;
            for (std::size_t i = 0; i < p; ++i) s += plane[i];
            alpha[ci] += s / static_cast<double>(p);
        }
    for (double& v : alpha) v /= static_cast<double>(n);
    return alpha;
}

// ---------------------------------------------------------------------------
// snapshot serialization: versioned container of shapes + raw 64-bit floats
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(out, bits);
}

struct ByteReader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;

    std::uint8_t u8() {
        if (pos >= buf.size()) throw IoError("snapshot: truncated");
        return buf[pos++];
    }
    std::uint16_t u16() {
        std::uint16_t v = u8();
        return static_cast<std::uint16_t>(v | (static_cast<std::uint16_t>(u8()) << 8));
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }
};

inline void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    for (double v : t.value()) put_f64(out, v);
}

inline Tensor get_tensor(ByteReader& r) {
    const std::size_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = r.f64();
    return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace detail

inline std::vector<std::uint8_t> model_to_bytes(const Model& m) {
    std::vector<std::uint8_t> out = {'S', '2', 'S', 'N'};
    detail::put_u16(out, 1);  // version
    detail::put_u16(out, static_cast<std::uint16_t>(m.cfg.input_size));
    detail::put_u16(out, static_cast<std::uint16_t>(m.cfg.input_channels));
    detail::put_u16(out, static_cast<std::uint16_t>(m.cfg.kernel));
    detail::put_u16(out, static_cast<std::uint16_t>(m.cfg.channels.size()));
    for (std::size_t c : m.cfg.channels) detail::put_u16(out, static_cast<std::uint16_t>(c));
    detail::put_u16(out, static_cast<std::uint16_t>(m.cfg.proxies_per_class));
    detail::put_f64(out, m.cfg.margin);
    detail::put_f64(out, m.cfg.scale_init);
    detail::put_f64(out, m.cfg.scale_floor);
    detail::put_f64(out, m.cfg.imprint_jitter);

    // head registry: class ids in slot order
    detail::put_u32(out, static_cast<std::uint32_t>(m.head.class_ids().size()));
    for (int id : m.head.class_ids()) detail::put_u32(out, static_cast<std::uint32_t>(id));

    detail::put_tensor(out, m.head.scale());
    detail::put_u16(out, static_cast<std::uint16_t>(m.blocks.size()));
    for (const ConvBlock& blk : m.blocks) {
        detail::put_tensor(out, blk.weight);
        detail::put_tensor(out, blk.bias);
    }
    const bool has_proxies = m.head.proxies().numel() > 0;
    out.push_back(has_proxies ? 1 : 0);
    if (has_proxies) detail::put_tensor(out, m.head.proxies());
    return out;
}

inline Model model_from_bytes(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r{bytes};
    if (bytes.size() < 6 || bytes[0] != 'S' || bytes[1] != '2' || bytes[2] != 'S' ||
        bytes[3] != 'N')
        throw IoError("snapshot: bad magic");
    r.pos = 4;
    const std::uint16_t version = r.u16();
    if (version != 1) throw IoError("snapshot: unsupported version " + std::to_string(version));

    NetConfig cfg;
    cfg.input_size = r.u16();
    cfg.input_channels = r.u16();
    cfg.kernel = r.u16();
    cfg.channels.resize(r.u16());
    for (auto& c : cfg.channels) c = r.u16();
    cfg.proxies_per_class = r.u16();
    cfg.margin = r.f64();
    cfg.scale_init = r.f64();
    cfg.scale_floor = r.f64();
    cfg.imprint_jitter = r.f64();

    std::vector<int> ids(r.u32());
    for (auto& id : ids) id = static_cast<int>(r.u32());

    Model m;
    m.cfg = cfg;
    m.head = ProxyHead(cfg.proxies_per_class, cfg.feature_dim(), cfg.margin, cfg.scale_init,
                       cfg.scale_floor);
    Tensor scale = detail::get_tensor(r);
    m.head.scale().mutable_value() = scale.value();

    const std::size_t nblocks = r.u16();
    if (nblocks != cfg.channels.size()) throw IoError("snapshot: block count mismatch");
    for (std::size_t i = 0; i < nblocks; ++i) {
        ConvBlock blk;
        blk.weight = detail::get_tensor(r).set_requires_grad(true);
        blk.bias = detail::get_tensor(r).set_requires_grad(true);
        blk.pool = cfg.pool_after(i);
        m.blocks.push_back(std::move(blk));
    }
    m.head.scale().set_requires_grad(true);
    if (r.u8()) {
        Tensor proxies = detail::get_tensor(r);
        m.head.restore_slots(ids, proxies);
    } else if (!ids.empty()) {
        throw IoError("snapshot: class registry without proxies");
    }
    return m;
}

inline void save_model(const Model& m, const std::string& path) {
    const auto bytes = model_to_bytes(m);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return model_from_bytes(bytes);
}

inline std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace s2il
