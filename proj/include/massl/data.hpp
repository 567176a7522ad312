#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "model.hpp"
#include "rng.hpp"

namespace massl {

/// A single-channel image with an optional binary mask. Images hold values in
/// [0,1] row-major; masks hold 0 or 1.
struct Sample {
    std::string id;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> image;
    std::optional<std::vector<std::uint8_t>> mask;

    bool labeled() const { return mask.has_value(); }
    bool operator==(const Sample&) const = default;
};

/// Knobs of the synthetic generator. Defaults are calibrated so every mask
/// covers 2-30% of the image at any resolution.
struct SynthParams {
    double background_lo = 0.15, background_hi = 0.35;
    double texture_amplitude = 0.06;  // per low-frequency component, 3 components
    double noise_sigma = 0.05;
    double contrast_lo = 0.22, contrast_hi = 0.42;
    double radius_lo = 0.06, radius_hi = 0.16;  // fraction of the shorter side
    double irregularity = 0.12;                  // max amplitude of boundary harmonics
    std::size_t max_blobs = 3;
    double min_fraction = 0.02, max_fraction = 0.30;
};

namespace detail {

struct Blob {
    double cy, cx, ry, rx, angle;
    double harm_amp[3];
    double harm_phase[3];

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = (c * dx + s * dy) / rx;
        const double v = (-s * dx + c * dy) / ry;
        const double rho = std::sqrt(u * u + v * v);
        const double phi = std::atan2(v, u);
        double r = 1.0;
        for (int k = 0; k < 3; ++k) r += harm_amp[k] * std::cos((k + 2) * phi + harm_phase[k]);
        return rho < r;
    }
};

}  // namespace detail

/// Draws one synthetic sample: smooth background texture, 1..max_blobs bright
/// blobs with irregular boundaries, additive Gaussian noise, clamped to [0,1].
/// The mask is the union of blob supports. Blob layouts whose foreground
/// fraction falls outside [min_fraction, max_fraction] are redrawn.
inline Sample generate_sample(std::size_t index, std::size_t height, std::size_t width, std::uint64_t seed,
                              const SynthParams& sp = {}) {
    SplitMix64 rng(derive_seed(seed, index));
    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%05zu", index);
    s.id = buf;
    s.height = height;
    s.width = width;
    const std::size_t n = height * width;
    const double H = static_cast<double>(height), W = static_cast<double>(width);
    const double side = std::min(H, W);

    std::vector<double> img(n, rng.uniform(sp.background_lo, sp.background_hi));
    for (int k = 0; k < 3; ++k) {
        const double amp = sp.texture_amplitude * rng.uniform(0.5, 1.0);
        const double fy = rng.uniform(0.5, 2.5), fx = rng.uniform(0.5, 2.5), ph = rng.uniform(0.0, 2 * std::numbers::pi);
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                img[y * width + x] += amp * std::cos(2 * std::numbers::pi * (fy * y / H + fx * x / W) + ph);
            }
        }
    }

    std::vector<std::uint8_t> mask(n);
    std::vector<double> contrast(n, 0.0);
    for (;;) {
        std::fill(mask.begin(), mask.end(), 0);
        std::fill(contrast.begin(), contrast.end(), 0.0);
        const std::size_t blobs = 1 + static_cast<std::size_t>(rng.below(sp.max_blobs));
        for (std::size_t b = 0; b < blobs; ++b) {
            detail::Blob blob{};
            blob.ry = side * rng.uniform(sp.radius_lo, sp.radius_hi);
            blob.rx = side * rng.uniform(sp.radius_lo, sp.radius_hi);
            const double margin = std::max(blob.ry, blob.rx);
            blob.cy = rng.uniform(std::min(margin, H / 2), std::max(H - margin, H / 2));
            blob.cx = rng.uniform(std::min(margin, W / 2), std::max(W - margin, W / 2));
            blob.angle = rng.uniform(0.0, std::numbers::pi);
            for (int k = 0; k < 3; ++k) {
                blob.harm_amp[k] = rng.uniform(0.0, sp.irregularity);
                blob.harm_phase[k] = rng.uniform(0.0, 2 * std::numbers::pi);
            }
            const double c = rng.uniform(sp.contrast_lo, sp.contrast_hi);
            for (std::size_t y = 0; y < height; ++y) {
                for (std::size_t x = 0; x < width; ++x) {
                    if (blob.contains(y + 0.5, x + 0.5)) {
                        mask[y * width + x] = 1;
                        contrast[y * width + x] = std::max(contrast[y * width + x], c);
                    }
                }
            }
        }
        const double fraction =
            static_cast<double>(std::count(mask.begin(), mask.end(), std::uint8_t{1})) / static_cast<double>(n);
        if (fraction >= sp.min_fraction && fraction <= sp.max_fraction) break;
    }

    s.image.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = img[i] + contrast[i] + sp.noise_sigma * rng.normal();
        s.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    s.mask = std::move(mask);
    return s;
}

inline std::vector<Sample> generate_synthetic(std::size_t count, std::size_t height, std::size_t width,
                                              std::uint64_t seed, const SynthParams& sp = {}) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(i, height, width, seed, sp));
    return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSizes {
    std::size_t labeled = 2, unlabeled = 40, validation = 8, test = 10;
};

/// Sample indices of one Monte Carlo fold. In semi-supervised mode the four
/// sets are pairwise disjoint; in fully-supervised mode labeled == unlabeled
/// and both hold labeled + unlabeled samples' worth of training images.
struct SplitPlan {
    std::vector<std::size_t> labeled, unlabeled, validation, test;
    std::size_t fold = 0;
    std::uint64_t seed = 0;
    bool fully_supervised = false;

    bool operator==(const SplitPlan&) const = default;
};

inline std::vector<SplitPlan> make_splits(std::size_t pool_size, std::size_t fold_count, const SplitSizes& sizes,
                                          std::uint64_t seed, bool fully_supervised) {
    const std::size_t need = sizes.labeled + sizes.unlabeled + sizes.validation + sizes.test;
    if (need > pool_size) {
        throw ConfigError("split sizes need " + std::to_string(need) + " samples, dataset has " +
                              std::to_string(pool_size),
                          "n_labeled");
    }
    if (fold_count == 0) throw ConfigError("folds must be >= 1", "folds");
    std::vector<SplitPlan> plans;
    for (std::size_t f = 0; f < fold_count; ++f) {
        SplitMix64 rng(derive_seed(seed, f));
        std::vector<std::size_t> ids(pool_size);
        for (std::size_t i = 0; i < pool_size; ++i) ids[i] = i;
        shuffle(ids, rng);
        auto take = [&, pos = std::size_t{0}](std::size_t k) mutable {
            std::vector<std::size_t> out(ids.begin() + static_cast<long>(pos), ids.begin() + static_cast<long>(pos + k));
            pos += k;
            return out;
        };
        SplitPlan p;
        p.fold = f;
        p.seed = seed;
        p.fully_supervised = fully_supervised;
        if (fully_supervised) {
            p.labeled = take(sizes.labeled + sizes.unlabeled);
            p.unlabeled = p.labeled;
        } else {
            p.labeled = take(sizes.labeled);
            p.unlabeled = take(sizes.unlabeled);
        }
        p.validation = take(sizes.validation);
        p.test = take(sizes.test);
        plans.push_back(std::move(p));
    }
    return plans;
}

/// Read-only view of a subset of a sample pool. Counts element accesses so
/// callers can verify that a training protocol never touched a set.
class SampleSet {
  public:
    SampleSet() = default;
    SampleSet(const std::vector<Sample>& pool, std::vector<std::size_t> indices, bool require_masks)
        : pool_(&pool), indices_(std::move(indices)) {
        for (auto i : indices_) {
            if (i >= pool.size()) throw ValidationError("sample index " + std::to_string(i) + " out of range");
            if (require_masks && !pool[i].labeled()) {
                throw ValidationError("sample '" + pool[i].id + "' lacks a mask but is in a labeled set");
            }
        }
    }

    std::size_t size() const { return indices_.size(); }
    bool empty() const { return indices_.empty(); }
    const Sample& at(std::size_t i) const {
        ++accesses_;
        return (*pool_)[indices_.at(i)];
    }
    std::size_t accesses() const { return accesses_; }

  private:
    const std::vector<Sample>* pool_ = nullptr;
    std::vector<std::size_t> indices_;
    mutable std::size_t accesses_ = 0;
};

// ---------------------------------------------------------------------------
// Dataset file
//
//   "MASSLDS\0"                8 bytes
//   version                    u32
//   sample count               u32
//   height, width              u32, u32
//   payload byte length        u64
//   per sample:
//     id length u32, id bytes
//     image: height*width float32
//     mask flag u8 (0/1), then height*width u8 mask values when flag is 1
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[8] = {'M', 'A', 'S', 'S', 'L', 'D', 'S', '\0'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 8 + 4 * 4 + 8;

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline std::string encode_dataset(const std::vector<Sample>& samples) {
    const std::size_t H = samples.empty() ? 0 : samples.front().height;
    const std::size_t W = samples.empty() ? 0 : samples.front().width;
    std::string payload;
    for (const auto& s : samples) {
        if (s.height != H || s.width != W || s.image.size() != H * W) {
            throw ValidationError("sample '" + s.id + "' extents differ from the dataset's");
        }
        detail::put_le(payload, s.id.size(), 4);
        payload += s.id;
        for (float v : s.image) detail::put_f32_le(payload, v);
        payload.push_back(static_cast<char>(s.mask ? 1 : 0));
        if (s.mask) {
            if (s.mask->size() != H * W) throw ValidationError("sample '" + s.id + "' mask size mismatch");
            for (auto m : *s.mask) payload.push_back(static_cast<char>(m));
        }
    }
    std::string out(kDatasetMagic, kDatasetMagic + 8);
    detail::put_le(out, kDatasetVersion, 4);
    detail::put_le(out, samples.size(), 4);
    detail::put_le(out, H, 4);
    detail::put_le(out, W, 4);
    detail::put_le(out, payload.size(), 8);
    return out + payload;
}

inline std::vector<Sample> decode_dataset(const std::string& bytes) {
    using Kind = FormatError::Kind;
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 8 || !std::equal(kDatasetMagic, kDatasetMagic + 8, bytes.begin())) {
        throw FormatError(Kind::bad_magic, "not a dataset file");
    }
    if (bytes.size() < kDatasetHeaderBytes) throw FormatError(Kind::truncated, "dataset header is truncated");
    const auto version = detail::get_le(raw + 8, 4);
    if (version != kDatasetVersion) {
        throw FormatError(Kind::version_mismatch, "dataset version " + std::to_string(version) + ", expected " +
                                                      std::to_string(kDatasetVersion));
    }
    const auto count = detail::get_le(raw + 12, 4);
    const auto H = detail::get_le(raw + 16, 4);
    const auto W = detail::get_le(raw + 20, 4);
    const auto payload = detail::get_le(raw + 24, 8);
    const std::size_t have = bytes.size() - kDatasetHeaderBytes;
    if (have < payload) {
        throw FormatError(Kind::truncated, "dataset payload has " + std::to_string(have) + " bytes, header declares " +
                                               std::to_string(payload));
    }
    if (have > payload) {
        throw FormatError(Kind::header_mismatch, "dataset has " + std::to_string(have - payload) + " trailing bytes");
    }

    const std::size_t end = bytes.size();
    const std::uint64_t n = H * W;

    // Layout pass: sizes only, so extents that disagree with the payload are
    // reported as such rather than as whatever garbage the misaligned read hits.
    std::size_t pos = kDatasetHeaderBytes;
    auto need = [&](std::uint64_t k, const char* what) {
        if (k > end - pos) {
            throw FormatError(Kind::header_mismatch,
                              std::string("header extents/count overrun the payload while reading ") + what);
        }
    };
    for (std::uint64_t k = 0; k < count; ++k) {
        need(4, "id length");
        const auto id_len = detail::get_le(raw + pos, 4);
        pos += 4;
        need(id_len, "id");
        pos += static_cast<std::size_t>(id_len);
        if (n > (end - pos) / 4) need(end - pos + 1, "image");
        pos += static_cast<std::size_t>(4 * n);
        need(1, "mask flag");
        if (raw[pos++]) {
            need(n, "mask");
            pos += static_cast<std::size_t>(n);
        }
    }
    if (pos != end) {
        throw FormatError(Kind::header_mismatch, "dataset payload has " + std::to_string(end - pos) +
                                                     " bytes left after the declared samples");
    }

    pos = kDatasetHeaderBytes;
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::uint64_t k = 0; k < count; ++k) {
        Sample s;
        s.height = static_cast<std::size_t>(H);
        s.width = static_cast<std::size_t>(W);
        const auto id_len = static_cast<std::size_t>(detail::get_le(raw + pos, 4));
        pos += 4;
        s.id.assign(bytes.data() + pos, id_len);
        pos += id_len;
        s.image.resize(static_cast<std::size_t>(n));
        for (auto& v : s.image) {
            v = detail::get_f32_le(raw + pos);
            pos += 4;
        }
        const auto flag = raw[pos++];
        if (flag > 1) throw FormatError(Kind::malformed_header, "mask flag must be 0 or 1 in sample '" + s.id + "'");
        if (flag) {
            std::vector<std::uint8_t> m(raw + pos, raw + pos + n);
            pos += static_cast<std::size_t>(n);
            if (std::any_of(m.begin(), m.end(), [](auto v) { return v > 1; })) {
                throw FormatError(Kind::malformed_header, "non-binary mask in sample '" + s.id + "'");
            }
            s.mask = std::move(m);
        }
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_dataset(const std::string& path, const std::vector<Sample>& samples) {
    detail::write_file(path, encode_dataset(samples));
}

inline std::vector<Sample> read_dataset(const std::string& path) { return decode_dataset(detail::read_file(path)); }

/// Stacks images (and masks, when requested) of the listed set positions into
/// (N,1,H,W) tensors.
template <typename T>
Tensor<T> stack_images(const std::vector<const Sample*>& batch) {
    const std::size_t H = batch.front()->height, W = batch.front()->width;
    std::vector<T> v;
    v.reserve(batch.size() * H * W);
    for (const auto* s : batch) v.insert(v.end(), s->image.begin(), s->image.end());
    return Tensor<T>({batch.size(), 1, H, W}, std::move(v));
}

template <typename T>
Tensor<T> stack_masks(const std::vector<const Sample*>& batch) {
    const std::size_t H = batch.front()->height, W = batch.front()->width;
    std::vector<T> v;
    v.reserve(batch.size() * H * W);
    for (const auto* s : batch) {
        if (!s->mask) throw ValidationError("sample '" + s->id + "' has no mask");
        for (auto m : *s->mask) v.push_back(static_cast<T>(m));
    }
    return Tensor<T>({batch.size(), 1, H, W}, std::move(v));
}

}  // namespace massl
