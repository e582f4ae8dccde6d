#pragma once

#include <deque>
#include <optional>
#include <unordered_set>

#include "pkdn/ops.hpp"

namespace pkdn {

// Owns every trainable tensor of a network. Addresses are stable; iteration
// order is registration order and doubles as the checkpoint blob order.
template <class T>
class ParamRegistry {
public:
    Parameter<T>& add(const std::string& name, Tensor<T> init) {
        if (!names_.insert(name).second) throw ValidationError(cat("parameter registered twice: ", name));
        store_.emplace_back(std::move(init));
        order_.emplace_back(name, &store_.back());
        return store_.back();
    }

    size_t size() const { return order_.size(); }

    i64 total_elements() const {
        i64 t = 0;
        for (auto& [name, p] : order_) t += p->numel();
        return t;
    }

    const std::vector<std::pair<std::string, Parameter<T>*>>& entries() const { return order_; }

    Parameter<T>* find(const std::string& name) {
        for (auto& [n, p] : order_)
            if (n == name) return p;
        return nullptr;
    }

    void zero_grad_all() {
        for (auto& [n, p] : order_) p->zero_grad();
    }

    void fill_values(T v) {
        for (auto& [n, p] : order_) std::fill(p->value.mut(), p->value.mut() + p->numel(), v);
    }

private:
    std::deque<Parameter<T>> store_;
    std::vector<std::pair<std::string, Parameter<T>*>> order_;
    std::unordered_set<std::string> names_;
};

// Architectural free parameters shared by the attention blocks.
struct BlockConfig {
    int channels = 16;
    int reduction_ratio = 4;
    int spatial_kernel = 7;
    int rcab_per_group = 2;

    void validate() const {
        if (channels < 1) throw ValidationError(cat("block config: channels must be >= 1, got ", channels));
        if (reduction_ratio < 1 || channels % reduction_ratio != 0)
            throw ValidationError(
                cat("block config: channels ", channels, " not divisible by reduction_ratio ", reduction_ratio));
        if (spatial_kernel < 1 || spatial_kernel % 2 == 0)
            throw ValidationError(cat("block config: spatial_kernel must be odd, got ", spatial_kernel));
        if (rcab_per_group < 1)
            throw ValidationError(cat("block config: rcab_per_group must be >= 1, got ", rcab_per_group));
    }
};

// params: out_c*in_c*k^2 weights + out_c biases
template <class T>
struct Conv2dLayer {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
    int stride = 1;
    int pad = 0;

    static Conv2dLayer make(ParamRegistry<T>& reg, const std::string& prefix, int in_c, int out_c, int k, Rng& rng,
                            int stride = 1) {
        Conv2dLayer layer;
        Tensor<T> w({out_c, in_c, k, k});
        const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
        T* pw = w.mut();
        for (i64 i = 0; i < w.numel(); ++i) pw[i] = static_cast<T>(rng.normal(0.0, stddev));
        layer.w = &reg.add(prefix + ".w", std::move(w));
        layer.b = &reg.add(prefix + ".b", Tensor<T>({1, out_c, 1, 1}));
        layer.stride = stride;
        layer.pad = k / 2;
        return layer;
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, *w, *b, stride, pad); }

    i64 param_elems() const { return w->numel() + b->numel(); }
};

// y = x * sigmoid(W2 relu(W1 gap(x))), W1: c -> c/r, W2: c/r -> c (1x1).
// params: 2*c^2/r + c/r + c
template <class T>
struct ChannelAttention {
    Conv2dLayer<T> reduce, expand;
    int channels = 0;

    static ChannelAttention make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
        ChannelAttention ca;
        ca.channels = cfg.channels;
        ca.reduce = Conv2dLayer<T>::make(reg, prefix + ".reduce", cfg.channels, cfg.channels / cfg.reduction_ratio, 1, rng);
        ca.expand = Conv2dLayer<T>::make(reg, prefix + ".expand", cfg.channels / cfg.reduction_ratio, cfg.channels, 1, rng);
        return ca;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.c() != channels)
            throw ValidationError(cat("channel_attention: expected ", channels, " channels, got ", x.c()));
        Tensor<T> s = sigmoid(expand(relu(reduce(global_avg_pool(x)))));
        return mul_broadcast(x, s);
    }

    i64 param_elems() const { return reduce.param_elems() + expand.param_elems(); }
};

// y = x * sigmoid(conv_kxk(concat(mean_c(x), max_c(x)))).
// params: 2*k^2 + 1
template <class T>
struct SpatialAttention {
    Conv2dLayer<T> conv;
    int channels = 0;

    static SpatialAttention make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
        SpatialAttention sa;
        sa.channels = cfg.channels;
        sa.conv = Conv2dLayer<T>::make(reg, prefix + ".conv", 2, 1, cfg.spatial_kernel, rng);
        return sa;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.c() != channels)
            throw ValidationError(cat("spatial_attention: expected ", channels, " channels, got ", x.c()));
        Tensor<T> m = sigmoid(conv(concat_channels(channel_mean_map(x), channel_max_map(x))));
        return mul_broadcast(x, m);
    }

    i64 param_elems() const { return conv.param_elems(); }
};

// y = x + CA(conv2(relu(conv1(x)))), both convs 3x3 channel-preserving.
// params: 2*(9c^2 + c) + CA
template <class T>
struct Rcab {
    Conv2dLayer<T> conv1, conv2;
    ChannelAttention<T> ca;
    int channels = 0;

    static Rcab make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
        Rcab r;
        r.channels = cfg.channels;
        r.conv1 = Conv2dLayer<T>::make(reg, prefix + ".conv1", cfg.channels, cfg.channels, 3, rng);
        r.conv2 = Conv2dLayer<T>::make(reg, prefix + ".conv2", cfg.channels, cfg.channels, 3, rng);
        r.ca = ChannelAttention<T>::make(reg, prefix + ".ca", cfg, rng);
        return r;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.c() != channels) throw ValidationError(cat("rcab: expected ", channels, " channels, got ", x.c()));
        return add(x, ca(conv2(relu(conv1(x)))));
    }

    i64 param_elems() const { return conv1.param_elems() + conv2.param_elems() + ca.param_elems(); }
};

// y = x + conv3x3(rcab_B(...rcab_1(x)...)).
// params: B*RCAB + 9c^2 + c
template <class T>
struct Rcag {
    std::vector<Rcab<T>> rcabs;
    Conv2dLayer<T> tail;
    int channels = 0;

    static Rcag make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
        Rcag g;
        g.channels = cfg.channels;
        for (int i = 0; i < cfg.rcab_per_group; ++i)
            g.rcabs.push_back(Rcab<T>::make(reg, cat(prefix, ".rcab", i), cfg, rng));
        g.tail = Conv2dLayer<T>::make(reg, prefix + ".tail", cfg.channels, cfg.channels, 3, rng);
        return g;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.c() != channels) throw ValidationError(cat("rcag: expected ", channels, " channels, got ", x.c()));
        Tensor<T> f = x;
        for (const auto& r : rcabs) f = r(f);
        return add(x, tail(f));
    }

    i64 param_elems() const {
        i64 t = tail.param_elems();
        for (const auto& r : rcabs) t += r.param_elems();
        return t;
    }
};

// Error refinement: conv2(relu(conv1(e))), both 3x3 channel-preserving.
// params: 2*(9c^2 + c)
template <class T>
struct ProjectionFunction {
    Conv2dLayer<T> conv1, conv2;
    int channels = 0;

    static ProjectionFunction make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
        ProjectionFunction pf;
        pf.channels = cfg.channels;
        pf.conv1 = Conv2dLayer<T>::make(reg, prefix + ".conv1", cfg.channels, cfg.channels, 3, rng);
        pf.conv2 = Conv2dLayer<T>::make(reg, prefix + ".conv2", cfg.channels, cfg.channels, 3, rng);
        return pf;
    }

    Tensor<T> operator()(const Tensor<T>& e) const {
        if (e.c() != channels)
            throw ValidationError(cat("projection_function: expected ", channels, " channels, got ", e.c()));
        return conv2(relu(conv1(e)));
    }

    i64 param_elems() const { return conv1.param_elems() + conv2.param_elems(); }
};

// Feature fusion: y = CA(f + PF(f - f_prev)), f_prev at the same resolution.
// params: PF + CA
template <class T>
struct Ffb {
    ProjectionFunction<T> pf;
    ChannelAttention<T> ca;

    static Ffb make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
        Ffb f;
        f.pf = ProjectionFunction<T>::make(reg, prefix + ".pf", cfg, rng);
        f.ca = ChannelAttention<T>::make(reg, prefix + ".ca", cfg, rng);
        return f;
    }

    Tensor<T> operator()(const Tensor<T>& f, const Tensor<T>& f_prev) const {
        if (!(f.shape() == f_prev.shape()))
            throw ValidationError(cat("ffb: feature ", f.shape().str(), " and retained feature ",
                                      f_prev.shape().str(), " must match"));
        return ca(add(f, pf(sub(f, f_prev))));
    }

    i64 param_elems() const { return pf.param_elems() + ca.param_elems(); }
};

// Parsing map fusion. The map is nearest-resized to the feature grid,
// both inputs are projected into a shared domain, fused, refined by parallel
// channel/spatial attention, fused again and added back to f.
// params: 9*c*n_cls + c  (proj_p) + 9c^2 + c (proj_f) + 2*(18c^2 + c) (fusions) + CA + SA
template <class T>
struct Pfb {
    Conv2dLayer<T> proj_p, proj_f, fuse1, fuse2;
    ChannelAttention<T> ca;
    SpatialAttention<T> sa;
    int channels = 0;
    int n_classes = 0;

    static Pfb make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, int n_classes, Rng& rng) {
        if (n_classes < 1) throw ValidationError(cat("pfb: n_classes must be >= 1, got ", n_classes));
        Pfb p;
        p.channels = cfg.channels;
        p.n_classes = n_classes;
        p.proj_p = Conv2dLayer<T>::make(reg, prefix + ".proj_p", n_classes, cfg.channels, 3, rng);
        p.proj_f = Conv2dLayer<T>::make(reg, prefix + ".proj_f", cfg.channels, cfg.channels, 3, rng);
        p.fuse1 = Conv2dLayer<T>::make(reg, prefix + ".fuse1", 2 * cfg.channels, cfg.channels, 3, rng);
        p.ca = ChannelAttention<T>::make(reg, prefix + ".ca", cfg, rng);
        p.sa = SpatialAttention<T>::make(reg, prefix + ".sa", cfg, rng);
        p.fuse2 = Conv2dLayer<T>::make(reg, prefix + ".fuse2", 2 * cfg.channels, cfg.channels, 3, rng);
        return p;
    }

    Tensor<T> operator()(const Tensor<T>& f, const Tensor<T>& parsing) const {
        if (f.c() != channels) throw ValidationError(cat("pfb: expected ", channels, " channels, got ", f.c()));
        if (parsing.c() != n_classes)
            throw ValidationError(cat("pfb: parsing has ", parsing.c(), " class planes, configured for ", n_classes));
        Tensor<T> p = nearest_resize(parsing, f.h(), f.w());
        Tensor<T> fused = fuse1(concat_channels(proj_p(p), proj_f(f)));
        Tensor<T> refined = fuse2(concat_channels(ca(fused), sa(fused)));
        return add(f, refined);
    }

    i64 param_elems() const {
        return proj_p.param_elems() + proj_f.param_elems() + fuse1.param_elems() + fuse2.param_elems() +
               ca.param_elems() + sa.param_elems();
    }
};

// Inverse pixel-shuffle then conv 4c -> c; halves the resolution.
// params: 36c^2 + c
template <class T>
struct DownsampleBlock {
    Conv2dLayer<T> conv;
    int channels = 0;

    static DownsampleBlock make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
        DownsampleBlock d;
        d.channels = cfg.channels;
        d.conv = Conv2dLayer<T>::make(reg, prefix + ".conv", 4 * cfg.channels, cfg.channels, 3, rng);
        return d;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.c() != channels)
            throw ValidationError(cat("downsample_block: expected ", channels, " channels, got ", x.c()));
        return conv(pixel_unshuffle(x, 2));
    }

    i64 param_elems() const { return conv.param_elems(); }
};

// Conv c -> 4c then pixel-shuffle; doubles the resolution.
// params: 36c^2 + 4c
template <class T>
struct UpsampleBlock {
    Conv2dLayer<T> conv;
    int channels = 0;

    static UpsampleBlock make(ParamRegistry<T>& reg, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
        UpsampleBlock u;
        u.channels = cfg.channels;
        u.conv = Conv2dLayer<T>::make(reg, prefix + ".conv", cfg.channels, 4 * cfg.channels, 3, rng);
        return u;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.c() != channels)
            throw ValidationError(cat("upsample_block: expected ", channels, " channels, got ", x.c()));
        return pixel_shuffle(conv(x), 2);
    }

    i64 param_elems() const { return conv.param_elems(); }
};

}  // namespace pkdn
