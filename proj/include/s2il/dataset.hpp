#pragma once

// In-memory labelled image sets, the procedural synthetic generator, and the
// S2IL dataset file format (magic "S2IL", version u16, counts, image dims,
// then per-sample records: label u16, split flag u8, little-endian float32
// pixels).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "s2il/errors.hpp"
#include "s2il/tensor.hpp"

namespace s2il {

struct Dataset {
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t class_count = 0;
    std::vector<float> pixels;        // sample-major, contiguous C*H*W per sample
    std::vector<std::uint16_t> labels;
    std::vector<std::uint8_t> is_test;  // 0 = train, 1 = test

    std::size_t sample_count() const { return labels.size(); }
    std::size_t pixels_per_sample() const { return channels * height * width; }

    std::vector<std::size_t> indices(bool test) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if ((is_test[i] != 0) == test) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> class_indices(int cls, bool test) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls && (is_test[i] != 0) == test) out.push_back(i);
        return out;
    }

    // Stacks the given samples into a [n, C, H, W] double tensor.
    Tensor batch(const std::vector<std::size_t>& ids) const {
        if (ids.empty()) throw ContractError("Dataset::batch: empty id list");
        const std::size_t ps = pixels_per_sample();
        Tensor out = Tensor::zeros({ids.size(), channels, height, width});
        auto& v = out.mutable_value();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= sample_count())
                throw ContractError("Dataset::batch: sample id out of range");
            const float* src = pixels.data() + ids[i] * ps;
            double* dst = v.data() + i * ps;
            for (std::size_t j = 0; j < ps; ++j) dst[j] = static_cast<double>(src[j]);
        }
        return out;
    }

    void validate() const {
        if (pixels.size() != sample_count() * pixels_per_sample())
            throw ContractError("Dataset: pixel buffer size mismatch");
        if (is_test.size() != sample_count())
            throw ContractError("Dataset: split flag count mismatch");
        for (std::uint16_t l : labels)
            if (l >= class_count) throw ContractError("Dataset: label out of range");
    }
};

// Procedural class-conditional textures: an oriented grating plus a blob at a
// class-specific position, under per-sample jitter and Gaussian pixel noise.
// Fixed 80/20 train/test split per class. Deterministic for a fixed seed.
inline Dataset generate_synthetic(std::size_t classes, std::size_t per_class,
                                  std::size_t image_size, std::uint64_t seed,
                                  std::size_t channels = 1) {
    if (classes < 2) throw ContractError("generate_synthetic: need at least 2 classes");
    if (per_class < 5) throw ContractError("generate_synthetic: need at least 5 per class");
    if (image_size < 8) throw ContractError("generate_synthetic: image size too small");

    Dataset ds;
    ds.channels = channels;
    ds.height = image_size;
    ds.width = image_size;
    ds.class_count = classes;
    const std::size_t n = classes * per_class;
    ds.pixels.resize(n * ds.pixels_per_sample());
    ds.labels.resize(n);
    ds.is_test.resize(n);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.12);
    std::uniform_int_distribution<int> shift(-3, 3);
    const double s = static_cast<double>(image_size);
    const std::size_t train_per_class = (per_class * 8) / 10;

    std::size_t idx = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        const double theta = M_PI * static_cast<double>(c) / static_cast<double>(classes);
        const double freq = 2.0 + static_cast<double>(c % 3);
        const double phase = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(classes);
        const double cx = s / 2.0 + (s / 4.0) * std::cos(phase);
        const double cy = s / 2.0 + (s / 4.0) * std::sin(phase);
        const double blob_sharp = 2.0 * (s / 8.0) * (s / 8.0);

        for (std::size_t k = 0; k < per_class; ++k, ++idx) {
            ds.labels[idx] = static_cast<std::uint16_t>(c);
            ds.is_test[idx] = k < train_per_class ? 0 : 1;
            const double dx = shift(rng), dy = shift(rng);
            float* img = ds.pixels.data() + idx * ds.pixels_per_sample();
            for (std::size_t ch = 0; ch < channels; ++ch)
                for (std::size_t y = 0; y < image_size; ++y)
                    for (std::size_t x = 0; x < image_size; ++x) {
                        const double px = static_cast<double>(x) + dx;
                        const double py = static_cast<double>(y) + dy;
                        const double wave =
                            std::cos(2.0 * M_PI * freq *
                                         (px * std::cos(theta) + py * std::sin(theta)) / s +
                                     phase);
                        const double d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
                        double v = 0.5 + 0.22 * wave + 0.45 * std::exp(-d2 / blob_sharp) +
                                   noise(rng);
                        v = std::min(1.0, std::max(0.0, v));
                        img[(ch * image_size + y) * image_size + x] = static_cast<float>(v);
                    }
        }
    }
    ds.validate();
    return ds;
}

namespace detail {

inline void ds_put_u16(std::ofstream& f, std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    f.write(b, 2);
}

inline void ds_put_u32(std::ofstream& f, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>(v >> (8 * i));
    f.write(b, 4);
}

inline std::uint16_t ds_get_u16(std::ifstream& f) {
    unsigned char b[2];
    f.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t ds_get_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write("S2IL", 4);
    detail::ds_put_u16(f, 1);  // version
    detail::ds_put_u32(f, static_cast<std::uint32_t>(ds.sample_count()));
    detail::ds_put_u16(f, static_cast<std::uint16_t>(ds.class_count));
    detail::ds_put_u16(f, static_cast<std::uint16_t>(ds.channels));
    detail::ds_put_u16(f, static_cast<std::uint16_t>(ds.height));
    detail::ds_put_u16(f, static_cast<std::uint16_t>(ds.width));
    const std::size_t ps = ds.pixels_per_sample();
    static_assert(sizeof(float) == 4);
    for (std::size_t i = 0; i < ds.sample_count(); ++i) {
        detail::ds_put_u16(f, ds.labels[i]);
        const char split = static_cast<char>(ds.is_test[i]);
        f.write(&split, 1);
        f.write(reinterpret_cast<const char*>(ds.pixels.data() + i * ps),
                static_cast<std::streamsize>(ps * sizeof(float)));
    }
    if (!f) throw IoError("write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "S2IL", 4) != 0)
        throw IoError("not an S2IL dataset file: " + path);
    const std::uint16_t version = detail::ds_get_u16(f);
    if (version != 1) throw IoError("unsupported dataset version " + std::to_string(version));
    Dataset ds;
    const std::uint32_t n = detail::ds_get_u32(f);
    ds.class_count = detail::ds_get_u16(f);
    ds.channels = detail::ds_get_u16(f);
    ds.height = detail::ds_get_u16(f);
    ds.width = detail::ds_get_u16(f);
    const std::size_t ps = ds.pixels_per_sample();
    ds.labels.resize(n);
    ds.is_test.resize(n);
    ds.pixels.resize(static_cast<std::size_t>(n) * ps);
    for (std::uint32_t i = 0; i < n; ++i) {
        ds.labels[i] = detail::ds_get_u16(f);
        char split;
        f.read(&split, 1);
        ds.is_test[i] = static_cast<std::uint8_t>(split);
        f.read(reinterpret_cast<char*>(ds.pixels.data() + static_cast<std::size_t>(i) * ps),
               static_cast<std::streamsize>(ps * sizeof(float)));
    }
    if (!f) throw IoError("truncated dataset file: " + path);
    ds.validate();
    return ds;
}

}  // namespace s2il
