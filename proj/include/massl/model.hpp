#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "layers.hpp"
#include "rng.hpp"

namespace massl {

struct NetworkConfig {
    std::size_t levels = 3;
    std::size_t base_channels = 8;
    std::size_t max_channels = 256;
    std::size_t height = 64;
    std::size_t width = 64;
    // 2 for attention-masked reconstruction (background, foreground), 1 for plain.
    std::size_t recon_channels = 2;
    double leaky_slope = 0.01;
    double norm_eps = 1e-5;

    std::size_t channels_at(std::size_t level) const {
        const std::size_t c = base_channels << level;
        return c < max_channels ? c : max_channels;
    }

    void validate() const {
        if (levels < 2) throw ConfigError("levels must be >= 2", "levels");
        if (base_channels < 1) throw ConfigError("base_channels must be >= 1", "base_channels");
        if (max_channels < base_channels) throw ConfigError("max_channels must be >= base_channels", "max_channels");
        const std::size_t div = std::size_t{1} << (levels - 1);
        if (height == 0 || height % div) {
            throw ConfigError("height " + std::to_string(height) + " not divisible by " + std::to_string(div), "height");
        }
        if (width == 0 || width % div) {
            throw ConfigError("width " + std::to_string(width) + " not divisible by " + std::to_string(div), "width");
        }
        if (recon_channels != 1 && recon_channels != 2) {
            throw ConfigError("recon_channels must be 1 or 2", "recon_channels");
        }
        if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must be in [0,1)", "leaky_slope");
        if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive", "norm_eps");
    }

    bool operator==(const NetworkConfig&) const = default;
};

enum class ParamGroup { encoder, seg_decoder, recon_decoder };

inline const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::encoder: return "encoder";
        case ParamGroup::seg_decoder: return "seg_decoder";
        case ParamGroup::recon_decoder: return "recon_decoder";
    }
    return "?";
}

inline ParamGroup parse_group(std::string_view s) {
    if (s == "encoder") return ParamGroup::encoder;
    if (s == "seg_decoder") return ParamGroup::seg_decoder;
    if (s == "recon_decoder") return ParamGroup::recon_decoder;
    throw FormatError(FormatError::Kind::malformed_header, "unknown parameter group '" + std::string(s) + "'");
}

template <typename T>
struct Parameter {
    std::string name;
    ParamGroup group;
    Tensor<T> tensor;
};

template <typename T>
struct ForwardResult {
    Tensor<T> segmentation;              // (N,1,H,W)
    Tensor<T> reconstruction;            // (N,recon_channels,H,W)
    std::vector<Tensor<T>> features;     // one per encoder level, deepest last
};

/// Shared encoder with two decoders: a segmentation decoder that concatenates
/// same-level encoder features (skip connections) and a reconstruction
/// decoder that sees only the deepest encoding.
///
/// Every level runs two conv3x3 -> instance norm -> LeakyReLU blocks. Decoder
/// levels upsample first, concatenate skips (segmentation only), then apply
/// their two blocks. Both heads are 1x1 convolutions followed by a sigmoid.
template <typename T>
class Model {
  public:
    Model(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        SplitMix64 rng(seed);
        const std::size_t L = cfg_.levels;
        for (std::size_t i = 0; i < L; ++i) {
            const std::size_t in = i == 0 ? 1 : cfg_.channels_at(i - 1);
            enc_.push_back(make_level(ParamGroup::encoder, "enc" + std::to_string(i), in, cfg_.channels_at(i), rng));
        }
        for (std::size_t i = L - 1; i-- > 0;) {
            const std::size_t up = cfg_.channels_at(i + 1);
            seg_.push_back(make_level(ParamGroup::seg_decoder, "seg" + std::to_string(i), up + cfg_.channels_at(i),
                                      cfg_.channels_at(i), rng));
        }
        seg_head_ = add_conv(ParamGroup::seg_decoder, "seg.head", cfg_.channels_at(0), 1, 1, rng);
        for (std::size_t i = L - 1; i-- > 0;) {
            rec_.push_back(make_level(ParamGroup::recon_decoder, "rec" + std::to_string(i), cfg_.channels_at(i + 1),
                                      cfg_.channels_at(i), rng));
        }
        rec_head_ = add_conv(ParamGroup::recon_decoder, "rec.head", cfg_.channels_at(0), cfg_.recon_channels, 1, rng);
    }

    // Copies share parameter storage; use clone() for an independent snapshot.
    Model(const Model&) = default;
    Model& operator=(const Model&) = default;

    Model clone() const {
        Model m = *this;
        for (auto& p : m.params_) p.tensor = p.tensor.clone(true);
        return m;
    }

    const NetworkConfig& config() const { return cfg_; }
    std::vector<Parameter<T>>& parameters() { return params_; }
    const std::vector<Parameter<T>>& parameters() const { return params_; }

    std::vector<Tensor<T>> group(ParamGroup g) const {
        std::vector<Tensor<T>> out;
        for (const auto& p : params_) {
            if (p.group == g) out.push_back(p.tensor);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    void clear_grads() {
        for (auto& p : params_) p.tensor.clear_grad();
    }

    /// Per-level encoder outputs (after each level's second block), shallowest first.
    std::vector<Tensor<T>> encode(const Tensor<T>& x) const {
        check_input(x);
        std::vector<Tensor<T>> feats;
        Tensor<T> h = x;
        for (std::size_t i = 0; i < enc_.size(); ++i) {
            if (i > 0) h = avg_pool2(h);
            h = apply_level(enc_[i], h);
            feats.push_back(h);
        }
        return feats;
    }

    /// Soft foreground probability from encoder features, (N,1,H,W).
    Tensor<T> segment(const std::vector<Tensor<T>>& feats) const {
        check_features(feats);
        Tensor<T> h = feats.back();
        for (std::size_t k = 0; k < seg_.size(); ++k) {
            const std::size_t level = seg_.size() - 1 - k;
            h = concat_channels(upsample2(h), feats[level]);
            h = apply_level(seg_[k], h);
        }
        return sigmoid(apply_conv(seg_head_, h));
    }

    /// Reconstruction from the deepest encoding only.
    Tensor<T> reconstruct(const std::vector<Tensor<T>>& feats) const {
        check_features(feats);
        Tensor<T> h = feats.back();
        for (const auto& level : rec_) h = apply_level(level, upsample2(h));
        return sigmoid(apply_conv(rec_head_, h));
    }

    ForwardResult<T> forward(const Tensor<T>& x) const {
        ForwardResult<T> r;
        r.features = encode(x);
        r.segmentation = segment(r.features);
        r.reconstruction = reconstruct(r.features);
        return r;
    }

    /// Input channel count of each reconstruction-decoder level's first conv, shallowest level last.
    std::vector<std::size_t> recon_level_in_channels() const {
        std::vector<std::size_t> out;
        for (const auto& l : rec_) out.push_back(params_[l.blocks[0].conv.weight].tensor.extent(1));
        return out;
    }
    std::vector<std::size_t> seg_level_in_channels() const {
        std::vector<std::size_t> out;
        for (const auto& l : seg_) out.push_back(params_[l.blocks[0].conv.weight].tensor.extent(1));
        return out;
    }

  private:
    struct ConvRef {
        std::size_t weight, bias;
    };
    struct BlockRef {
        ConvRef conv;
        std::size_t scale, shift;
    };
    struct LevelRef {
        std::array<BlockRef, 2> blocks;
    };

    std::size_t add_param(ParamGroup g, std::string name, Shape shape, std::vector<T> values) {
        params_.push_back({std::move(name), g, Tensor<T>(std::move(shape), std::move(values), true)});
        return params_.size() - 1;
    }

    // Fan-in scaled uniform weights, zero bias.
    ConvRef add_conv(ParamGroup g, const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                     SplitMix64& rng) {
        const std::size_t fan_in = in * k * k;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<T> w(out * in * k * k);
        for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
        ConvRef r;
        r.weight = add_param(g, prefix + ".weight", {out, in, k, k}, std::move(w));
        r.bias = add_param(g, prefix + ".bias", {out}, std::vector<T>(out, T(0)));
        return r;
    }

    BlockRef add_block(ParamGroup g, const std::string& prefix, std::size_t in, std::size_t out, SplitMix64& rng) {
        BlockRef b;
        b.conv = add_conv(g, prefix + ".conv", in, out, 3, rng);
        b.scale = add_param(g, prefix + ".norm.scale", {out}, std::vector<T>(out, T(1)));
        b.shift = add_param(g, prefix + ".norm.shift", {out}, std::vector<T>(out, T(0)));
        return b;
    }

    LevelRef make_level(ParamGroup g, const std::string& prefix, std::size_t in, std::size_t out, SplitMix64& rng) {
        return {{add_block(g, prefix + ".0", in, out, rng), add_block(g, prefix + ".1", out, out, rng)}};
    }

    Tensor<T> apply_conv(const ConvRef& c, const Tensor<T>& x) const {
        return conv2d(x, params_[c.weight].tensor, params_[c.bias].tensor);
    }

    Tensor<T> apply_level(const LevelRef& l, Tensor<T> h) const {
        const T slope = static_cast<T>(cfg_.leaky_slope);
        const T eps = static_cast<T>(cfg_.norm_eps);
        for (const auto& b : l.blocks) {
            h = apply_conv(b.conv, h);
            h = instance_norm(h, params_[b.scale].tensor, params_[b.shift].tensor, eps);
            h = leaky_relu(h, slope);
        }
        return h;
    }

    void check_input(const Tensor<T>& x) const {
        if (x.dim() != 4 || x.extent(1) != 1 || x.extent(2) != cfg_.height || x.extent(3) != cfg_.width) {
            throw ShapeError("model expects (N,1," + std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
                             "), got " + to_string(x.shape()));
        }
    }

    void check_features(const std::vector<Tensor<T>>& f) const {
        if (f.size() != cfg_.levels) {
            throw ShapeError("expected " + std::to_string(cfg_.levels) + " feature levels, got " +
                             std::to_string(f.size()));
        }
    }

    NetworkConfig cfg_;
    std::vector<Parameter<T>> params_;
    std::vector<LevelRef> enc_;
    std::vector<LevelRef> seg_;  // deepest decoder level first
    std::vector<LevelRef> rec_;
    ConvRef seg_head_{}, rec_head_{};
};

template <typename T>
Model<T> build_model(const NetworkConfig& cfg, std::uint64_t seed) {
    return Model<T>(cfg, seed);
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   MASSL-CHECKPOINT <version>\n
//   <config key> <value>\n            (one line per NetworkConfig field)
//   params <count>\n
//   param <group> <name> <extent>...\n  (one line per parameter, model order)
//   end\n
//   <little-endian float32 values, all parameters in model order>
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "MASSL-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

inline void put_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Kind::io, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io, "write failed for '" + path + "'");
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const Model<T>& m) {
    const auto& c = m.config();
    std::string out = std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion) + "\n";
    out += "levels " + std::to_string(c.levels) + "\n";
    out += "base_channels " + std::to_string(c.base_channels) + "\n";
    out += "max_channels " + std::to_string(c.max_channels) + "\n";
    out += "height " + std::to_string(c.height) + "\n";
    out += "width " + std::to_string(c.width) + "\n";
    out += "recon_channels " + std::to_string(c.recon_channels) + "\n";
    out += "leaky_slope " + detail::format_double(c.leaky_slope) + "\n";
    out += "norm_eps " + detail::format_double(c.norm_eps) + "\n";
    out += "params " + std::to_string(m.parameters().size()) + "\n";
    for (const auto& p : m.parameters()) {
        out += std::string("param ") + to_string(p.group) + " " + p.name;
        for (auto e : p.tensor.shape()) out += " " + std::to_string(e);
        out += "\n";
    }
    out += "end\n";
    for (const auto& p : m.parameters()) {
        for (T v : p.tensor.values()) detail::put_f32_le(out, static_cast<float>(v));
    }
    return out;
}

template <typename T>
Model<T> decode_checkpoint(const std::string& bytes) {
    using Kind = FormatError::Kind;
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw FormatError(Kind::truncated, "checkpoint header ends prematurely");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    auto parse_size = [](const std::string& s, const std::string& key) {
        std::size_t v = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size()) {
            throw FormatError(Kind::malformed_header, "bad integer for '" + key + "': '" + s + "'");
        }
        return v;
    };
    auto parse_real = [](const std::string& s, const std::string& key) {
        double v = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size()) {
            throw FormatError(Kind::malformed_header, "bad number for '" + key + "': '" + s + "'");
        }
        return v;
    };
    auto key_value = [&](const std::string& expect) {
        const std::string line = next_line();
        const auto sp = line.find(' ');
        if (sp == std::string::npos || line.substr(0, sp) != expect) {
            throw FormatError(Kind::malformed_header, "expected '" + expect + "' line, got '" + line + "'");
        }
        return line.substr(sp + 1);
    };

    if (bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) {
        throw FormatError(Kind::bad_magic, "not a checkpoint file");
    }
    const int version = static_cast<int>(parse_size(key_value(std::string(kCheckpointMagic)), "version"));
    if (version != kCheckpointVersion) {
        throw FormatError(Kind::version_mismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                      std::to_string(kCheckpointVersion));
    }
    NetworkConfig cfg;
    cfg.levels = parse_size(key_value("levels"), "levels");
    cfg.base_channels = parse_size(key_value("base_channels"), "base_channels");
    cfg.max_channels = parse_size(key_value("max_channels"), "max_channels");
    cfg.height = parse_size(key_value("height"), "height");
    cfg.width = parse_size(key_value("width"), "width");
    cfg.recon_channels = parse_size(key_value("recon_channels"), "recon_channels");
    cfg.leaky_slope = parse_real(key_value("leaky_slope"), "leaky_slope");
    cfg.norm_eps = parse_real(key_value("norm_eps"), "norm_eps");
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw FormatError(Kind::malformed_header, std::string("checkpoint config invalid: ") + e.what());
    }
    const std::size_t count = parse_size(key_value("params"), "params");

    Model<T> model(cfg, 0);
    auto& params = model.parameters();
    if (count != params.size()) {
        throw FormatError(Kind::header_mismatch, "checkpoint lists " + std::to_string(count) +
                                                     " parameters, config implies " + std::to_string(params.size()));
    }
    for (auto& p : params) {
        std::istringstream ls(next_line());
        std::string tag, group, name;
        ls >> tag >> group >> name;
        if (tag != "param") throw FormatError(Kind::malformed_header, "expected 'param' entry");
        Shape shape;
        std::size_t e;
        while (ls >> e) shape.push_back(e);
        if (!ls.eof()) throw FormatError(Kind::malformed_header, "bad extent list for '" + name + "'");
        if (parse_group(group) != p.group || name != p.name || shape != p.tensor.shape()) {
            throw FormatError(Kind::header_mismatch, "parameter entry '" + group + " " + name + " " +
                                                         to_string(shape) + "' does not match expected '" +
                                                         to_string(p.group) + " " + p.name + " " +
                                                         to_string(p.tensor.shape()) + "'");
        }
    }
    if (next_line() != "end") throw FormatError(Kind::malformed_header, "missing 'end' line");

    const std::size_t need = 4 * model.parameter_count();
    const std::size_t have = bytes.size() - pos;
    if (have < need) {
        throw FormatError(Kind::truncated, "checkpoint payload has " + std::to_string(have) + " bytes, expected " +
                                               std::to_string(need));
    }
    if (have > need) {
        throw FormatError(Kind::header_mismatch, "checkpoint payload has " + std::to_string(have - need) +
                                                     " trailing bytes");
    }
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
    for (auto& p : params) {
        for (auto& v : p.tensor.mutable_values()) {
            v = static_cast<T>(detail::get_f32_le(raw));
            raw += 4;
        }
    }
    return model;
}

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
    detail::write_file(path, encode_checkpoint(m));
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    return decode_checkpoint<T>(detail::read_file(path));
}

}  // namespace massl
