#pragma once

// Miniature encoder-decoder segmentation networks: U-Net and FPN decoders
// over plain, residual or dense encoders. Every network maps [N,1,S,S] to
// two-channel logits; forward() adds the per-pixel softmax.
//
// Encoder layout for depth D and base width c: stages 0..D-1 run a block at
// resolution S/2^i with c*2^i channels, keep the result as a skip feature and
// max-pool; a bottleneck block with c*2^D channels runs at S/2^D.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/checkpoint.hpp"
#include "ctseg/ops.hpp"
#include "ctseg/volume_io.hpp"

namespace ctseg {

using ad::Tensor;

enum class Arch { unet, fpn };
enum class EncoderKind { plain, residual, dense };

NLOHMANN_JSON_SERIALIZE_ENUM(Arch, {{Arch::unet, "unet"}, {Arch::fpn, "fpn"}})
NLOHMANN_JSON_SERIALIZE_ENUM(EncoderKind, {{EncoderKind::plain, "plain"},
                                           {EncoderKind::residual, "residual"},
                                           {EncoderKind::dense, "dense"}})

inline std::string to_string(Arch a) { return a == Arch::unet ? "unet" : "fpn"; }
inline std::string to_string(EncoderKind e) {
    switch (e) {
        case EncoderKind::plain: return "plain";
        case EncoderKind::residual: return "residual";
        case EncoderKind::dense: return "dense";
    }
    return "?";
}
inline Arch parse_arch(const std::string& s) {
    if (s == "unet") return Arch::unet;
    if (s == "fpn") return Arch::fpn;
    fail(ErrorCode::InvalidConfig, "unknown architecture '" + s + "'");
}
inline EncoderKind parse_encoder(const std::string& s) {
    if (s == "plain") return EncoderKind::plain;
    if (s == "residual") return EncoderKind::residual;
    if (s == "dense") return EncoderKind::dense;
    fail(ErrorCode::InvalidConfig, "unknown encoder '" + s + "'");
}

struct ModelConfig {
    Arch arch = Arch::unet;
    EncoderKind encoder = EncoderKind::plain;
    int depth = 2;
    int base_channels = 8;
    int growth_rate = 8;
    int dense_layers = 2;
    int pyramid_channels = 16;
    int input_size = 64;

    void validate() const {
        require(depth >= 2 && depth <= 4, ErrorCode::InvalidConfig, "depth must be in [2,4]");
        require(base_channels > 0 && growth_rate > 0 && dense_layers > 0 && pyramid_channels > 0,
                ErrorCode::InvalidConfig, "channel counts must be positive");
        require(input_size > 0 && (input_size & (input_size - 1)) == 0, ErrorCode::InvalidConfig,
                "input_size must be a power of two");
        require(input_size >= 4 * (1 << depth), ErrorCode::InvalidConfig,
                "input_size must be at least 4 * 2^depth");
    }

    [[nodiscard]] int stage_channels(int stage) const { return base_channels << stage; }

    bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, arch, encoder, depth, base_channels, growth_rate,
                                   dense_layers, pyramid_channels, input_size)

template <typename T>
class Model {
public:
    Model(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed), rng_(seed) {
        config_.validate();
        build();
    }

    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    [[nodiscard]] const ModelConfig& config() const { return config_; }
    [[nodiscard]] std::uint64_t seed() const { return seed_; }

    void set_training(bool training) { training_ = training; }
    [[nodiscard]] bool training() const { return training_; }

    /// Raw two-channel logits in the current mode. Training mode updates the
    /// batch-norm running statistics.
    Tensor<T> forward_logits(const Tensor<T>& x) const { return run(x, training_); }

    /// Eval-mode logits regardless of the current mode.
    Tensor<T> eval_logits(const Tensor<T>& x) const { return run(x, false); }

    Tensor<T> forward(const Tensor<T>& x) const { return ad::softmax_channels(forward_logits(x)); }

    /// Eval-mode probabilities without graph recording; safe to call from
    /// several threads at once.
    Tensor<T> infer(const Tensor<T>& x) const {
        ad::NoGradGuard guard;
        return ad::softmax_channels(run(x, false));
    }

    [[nodiscard]] const std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() const {
        return params_;
    }
    [[nodiscard]] const std::vector<std::pair<std::string, Tensor<T>>>& named_buffers() const {
        return buffers_;
    }
    [[nodiscard]] std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (const auto& [name, t] : params_) out.push_back(t);
        return out;
    }
    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    /// Parameters followed by batch-norm buffers, as float arrays.
    [[nodiscard]] std::vector<ad::NamedArray> state() const {
        std::vector<ad::NamedArray> out;
        for (const auto* group : {&params_, &buffers_})
            for (const auto& [name, t] : *group)
                out.push_back({name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())});
        return out;
    }

    void load_state(const std::vector<ad::NamedArray>& state) {
        std::map<std::string, const ad::NamedArray*> by_name;
        for (const auto& a : state) by_name[a.name] = &a;
        for (auto* group : {&params_, &buffers_})
            for (auto& [name, t] : *group) {
                auto it = by_name.find(name);
                require(it != by_name.end(), ErrorCode::InvalidConfig,
                        "checkpoint is missing tensor " + name);
                require(it->second->shape == t.shape(), ErrorCode::ShapeMismatch,
                        "checkpoint tensor " + name + " has shape " + ad::shape_str(it->second->shape) +
                            ", model expects " + ad::shape_str(t.shape()));
                std::copy(it->second->values.begin(), it->second->values.end(), t.values().begin());
            }
        require(by_name.size() == params_.size() + buffers_.size(), ErrorCode::InvalidConfig,
                "checkpoint has tensors the model does not define");
    }

    /// Same architecture and weights in another scalar type (the 64-bit
    /// shadow used by gradient checks).
    template <typename U>
    [[nodiscard]] Model<U> cast() const {
        Model<U> out(config_, seed_);
        out.load_state(state());
        out.set_training(training_);
        return out;
    }

private:
    struct Conv {
        Tensor<T> weight, bias;
        std::size_t pad = 0;
        Tensor<T> operator()(const Tensor<T>& x) const { return ad::conv2d(x, weight, bias, 1, pad); }
    };
    struct BatchNorm {
        Tensor<T> gamma, beta, running_mean, running_var;
        Tensor<T> operator()(const Tensor<T>& x, bool training) const {
            Tensor<T> rm = running_mean, rv = running_var;
            return ad::batchnorm2d(x, gamma, beta, rm, rv, training);
        }
    };
    struct ConvBnRelu {
        Conv conv;
        BatchNorm bn;
        Tensor<T> operator()(const Tensor<T>& x, bool training) const {
            return ad::relu(bn(conv(x), training));
        }
    };
    struct PlainBlock {
        ConvBnRelu first, second;
    };
    struct ResidualBlock {
        ConvBnRelu first;
        Conv second;
        BatchNorm second_bn;
        bool projected = false;
        Conv projection;
        BatchNorm projection_bn;
    };
    struct DenseBlock {
        std::vector<ConvBnRelu> layers;
        ConvBnRelu transition;
    };
    using Block = std::variant<PlainBlock, ResidualBlock, DenseBlock>;

    struct UNetStage {
        ConvBnRelu up;
        PlainBlock fuse;
    };

    Tensor<T> new_param(const std::string& name, const ad::Shape& shape, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<T> v(ad::numel(shape));
        for (auto& x : v) x = static_cast<T>(stddev > 0 ? dist(rng_) : 0.0);
        Tensor<T> t(shape, std::move(v), true);
        params_.emplace_back(name, t);
        return t;
    }

    Tensor<T> new_buffer(const std::string& name, std::size_t n, T value) {
        Tensor<T> t = Tensor<T>::full({n}, value);
        buffers_.emplace_back(name, t);
        return t;
    }

    // Hidden layers use He-normal init; output heads are drawn at a tenth of
    // that scale so both output channels start close to each other.
    Conv make_conv(const std::string& name, int cin, int cout, int k, bool bias,
                   double gain = std::sqrt(2.0)) {
        Conv c;
        const double fan_in = static_cast<double>(cin) * k * k;
        c.weight = new_param(name + ".weight",
                             {static_cast<std::size_t>(cout), static_cast<std::size_t>(cin),
                              static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                             gain / std::sqrt(fan_in));
        if (bias) c.bias = new_param(name + ".bias", {static_cast<std::size_t>(cout)}, 0.0);
        c.pad = static_cast<std::size_t>(k / 2);
        return c;
    }

    BatchNorm make_bn(const std::string& name, int channels) {
        BatchNorm b;
        const auto c = static_cast<std::size_t>(channels);
        b.gamma = new_param(name + ".gamma", {c}, 0.0);
        std::fill(b.gamma.values().begin(), b.gamma.values().end(), T{1});
        b.beta = new_param(name + ".beta", {c}, 0.0);
        b.running_mean = new_buffer(name + ".running_mean", c, T{0});
        b.running_var = new_buffer(name + ".running_var", c, T{1});
        return b;
    }

    ConvBnRelu make_cbr(const std::string& name, int cin, int cout, int k = 3) {
        ConvBnRelu l;
        l.conv = make_conv(name + ".conv", cin, cout, k, false);
        l.bn = make_bn(name + ".bn", cout);
        return l;
    }

    PlainBlock make_plain(const std::string& name, int cin, int cout) {
        PlainBlock b;
        b.first = make_cbr(name + ".0", cin, cout);
        b.second = make_cbr(name + ".1", cout, cout);
        return b;
    }

    Block make_block(const std::string& name, int cin, int cout) {
        switch (config_.encoder) {
            case EncoderKind::plain: return make_plain(name, cin, cout);
            case EncoderKind::residual: {
                ResidualBlock b;
                b.first = make_cbr(name + ".0", cin, cout);
                b.second = make_conv(name + ".1.conv", cout, cout, 3, false);
                b.second_bn = make_bn(name + ".1.bn", cout);
                b.projected = cin != cout;
                if (b.projected) {
                    b.projection = make_conv(name + ".proj.conv", cin, cout, 1, false);
                    b.projection_bn = make_bn(name + ".proj.bn", cout);
                }
                return b;
            }
            case EncoderKind::dense: {
                DenseBlock b;
                int ch = cin;
                for (int j = 0; j < config_.dense_layers; ++j) {
                    b.layers.push_back(make_cbr(name + ".layer" + std::to_string(j), ch, config_.growth_rate));
                    ch += config_.growth_rate;
                }
                b.transition = make_cbr(name + ".transition", ch, cout, 1);
                return b;
            }
        }
        fail(ErrorCode::InvalidConfig, "unknown encoder kind");
    }

    void build() {
        const int depth = config_.depth;
        int cin = 1;
        for (int i = 0; i <= depth; ++i) {
            encoder_.push_back(make_block("enc" + std::to_string(i), cin, config_.stage_channels(i)));
            cin = config_.stage_channels(i);
        }
        if (config_.arch == Arch::unet) {
            for (int i = depth - 1; i >= 0; --i) {
                const std::string name = "dec" + std::to_string(i);
                const int c = config_.stage_channels(i);
                UNetStage s;
                s.up = make_cbr(name + ".up", config_.stage_channels(i + 1), c);
                s.fuse = make_plain(name + ".fuse", 2 * c, c);
                decoder_.push_back(std::move(s));
            }
            head_ = make_conv("head", config_.base_channels, 2, 1, true, 0.1);
        } else {
            const int p = config_.pyramid_channels;
            for (int i = 0; i <= depth; ++i)
                laterals_.push_back(make_conv("fpn.lateral" + std::to_string(i),
                                              config_.stage_channels(i), p, 1, false));
            for (int i = 0; i <= depth; ++i)
                level_heads_.push_back(make_cbr("fpn.head" + std::to_string(i), p, p));
            head_ = make_conv("fpn.fuse", (depth + 1) * p, 2, 3, true, 0.1);
        }
    }

    Tensor<T> apply(const Block& block, const Tensor<T>& x, bool training) const {
        if (const auto* b = std::get_if<PlainBlock>(&block)) {
            return b->second(b->first(x, training), training);
        }
        if (const auto* b = std::get_if<ResidualBlock>(&block)) {
            Tensor<T> h = b->second_bn(b->second(b->first(x, training)), training);
            Tensor<T> skip = b->projected ? b->projection_bn(b->projection(x), training) : x;
            return ad::relu(ad::add(h, skip));
        }
        const auto& d = std::get<DenseBlock>(block);
        Tensor<T> feats = x;
        for (const auto& layer : d.layers) feats = ad::concat_channels(feats, layer(feats, training));
        return d.transition(feats, training);
    }

    Tensor<T> run(const Tensor<T>& x, bool training) const {
        const auto s = static_cast<std::size_t>(config_.input_size);
        require(x.defined() && x.rank() == 4 && x.dim(1) == 1 && x.dim(2) == s && x.dim(3) == s,
                ErrorCode::ShapeMismatch,
                "model expects [N,1," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                    ad::shape_str(x.shape()));
        const auto depth = static_cast<std::size_t>(config_.depth);
        std::vector<Tensor<T>> features;
        Tensor<T> h = x;
        for (std::size_t i = 0; i <= depth; ++i) {
            if (i > 0) h = ad::maxpool2d(h);
            h = apply(encoder_[i], h, training);
            features.push_back(h);
        }
        if (config_.arch == Arch::unet) {
            for (std::size_t k = 0; k < depth; ++k) {
                const std::size_t level = depth - 1 - k;
                const auto& stage = decoder_[k];
                h = stage.up(ad::upsample_nearest2x(h), training);
                h = ad::concat_channels(h, features[level]);
                h = stage.fuse.second(stage.fuse.first(h, training), training);
            }
            return head_(h);
        }
        std::vector<Tensor<T>> pyramid(depth + 1);
        pyramid[depth] = laterals_[depth](features[depth]);
        for (std::size_t k = depth; k-- > 0;)
            pyramid[k] = ad::add(laterals_[k](features[k]), ad::upsample_nearest2x(pyramid[k + 1]));
        Tensor<T> fused;
        for (std::size_t level = 0; level <= depth; ++level) {
            Tensor<T> p = level_heads_[level](pyramid[level], training);
            for (std::size_t u = 0; u < level; ++u) p = ad::upsample_nearest2x(p);
            fused = fused.defined() ? ad::concat_channels(fused, p) : p;
        }
        return head_(fused);
    }

    ModelConfig config_;
    std::uint64_t seed_;
    std::mt19937_64 rng_;
    bool training_ = false;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::vector<std::pair<std::string, Tensor<T>>> buffers_;
    std::vector<Block> encoder_;
    std::vector<UNetStage> decoder_;
    std::vector<Conv> laterals_;
    std::vector<ConvBnRelu> level_heads_;
    Conv head_;
};

/// Stacks 8-bit slices into an [N,1,H,W] tensor scaled to [0,1].
template <typename T = float>
Tensor<T> slices_to_tensor(std::span<const NormalizedSlice> slices) {
    require(!slices.empty(), ErrorCode::EmptyDataset, "no slices to stack");
    const int w = slices.front().width, h = slices.front().height;
    std::vector<T> data;
    data.reserve(slices.size() * static_cast<std::size_t>(w) * h);
    for (const auto& s : slices) {
        require(s.same_dims(w, h), ErrorCode::ShapeMismatch, "slices in a batch must share dims");
        for (std::uint8_t p : s.pixels) data.push_back(static_cast<T>(p) / T{255});
    }
    return Tensor<T>({slices.size(), 1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)},
                     std::move(data));
}

/// Foreground iff the channel-1 probability strictly exceeds 0.5.
template <typename T>
BinaryMask mask_from_probabilities(const Tensor<T>& probs, std::size_t n = 0) {
    require(probs.rank() == 4 && probs.dim(1) == 2 && n < probs.dim(0), ErrorCode::ShapeMismatch,
            "expected [N,2,H,W] probabilities");
    const std::size_t h = probs.dim(2), w = probs.dim(3), plane = h * w;
    BinaryMask m(static_cast<int>(w), static_cast<int>(h));
    const T* fg = probs.data().data() + (n * 2 + 1) * plane;
    for (std::size_t i = 0; i < plane; ++i) m.pixels[i] = fg[i] > T(0.5) ? 1 : 0;
    return m;
}

template <typename T>
BinaryMask predict_mask(const Model<T>& model, const NormalizedSlice& slice) {
    const NormalizedSlice batch[] = {slice};
    return mask_from_probabilities(model.infer(slices_to_tensor<T>(batch)));
}

template <typename T>
std::vector<BinaryMask> predict_masks(const Model<T>& model, std::span<const NormalizedSlice> slices,
                                      std::size_t batch_size = 8) {
    std::vector<BinaryMask> out;
    out.reserve(slices.size());
    for (std::size_t start = 0; start < slices.size(); start += batch_size) {
        const auto chunk = slices.subspan(start, std::min(batch_size, slices.size() - start));
        const auto probs = model.infer(slices_to_tensor<T>(chunk));
        for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(mask_from_probabilities(probs, i));
    }
    return out;
}

}  // namespace ctseg
