#pragma once

#include <filesystem>
#include <fstream>
#include <optional>

#include <json.hpp>

#include "pkdn/blocks.hpp"
#include "pkdn/resample.hpp"

namespace pkdn {

enum class ElemMode { f32, f64 };

template <class T>
constexpr ElemMode elem_mode_of();
template <>
constexpr ElemMode elem_mode_of<float>() {
    return ElemMode::f32;
}
template <>
constexpr ElemMode elem_mode_of<double>() {
    return ElemMode::f64;
}

inline const char* elem_mode_name(ElemMode m) { return m == ElemMode::f32 ? "f32" : "f64"; }

inline ElemMode parse_elem_mode(const std::string& s) {
    if (s == "f32") return ElemMode::f32;
    if (s == "f64") return ElemMode::f64;
    throw ValidationError(cat("element_mode must be f32 or f64, got '", s, "'"));
}

// Everything that determines both networks.
struct NetConfig {
    int base_channels = 16;
    int stages = 2;
    int blocks_per_stage = 1;
    int n_classes = 4;
    int scale = 4;
    double lambda_ts = 1.0;
    double lambda_fs = 0.05;
    int rcab_per_group = 2;
    int reduction_ratio = 4;
    int spatial_kernel = 7;
    bool use_pfb = true;  // teacher prior blocks: PFB when true, RCAG when false
    bool use_ffb = true;
    u64 init_seed = 0x0123456789abcdefull;
    ElemMode element_mode = ElemMode::f32;

    void validate() const {
        if (stages < 1) throw ValidationError(cat("net config: stages must be >= 1, got ", stages));
        if (blocks_per_stage < 1)
            throw ValidationError(cat("net config: blocks_per_stage must be >= 1, got ", blocks_per_stage));
        if (scale < 1 || (scale & (scale - 1)) != 0)
            throw ValidationError(cat("net config: scale must be a power of 2, got ", scale));
        if (lambda_ts < 0 || lambda_fs < 0)
            throw ValidationError("net config: lambda_ts and lambda_fs must be >= 0");
        if (n_classes < 1) throw ValidationError(cat("net config: n_classes must be >= 1, got ", n_classes));
        block().validate();
    }

    BlockConfig block() const {
        return BlockConfig{base_channels, reduction_ratio, spatial_kernel, rcab_per_group};
    }

    bool operator==(const NetConfig&) const = default;
};

template <class T>
struct ForwardResult {
    Tensor<T> sr;
    std::vector<Tensor<T>> taps;  // one per down/up block, execution order
};

enum class NetKind { teacher, student };

inline const char* net_kind_name(NetKind k) { return k == NetKind::teacher ? "teacher" : "student"; }

// Shared encoder-decoder skeleton. The teacher runs PFBs on the parsing map
// at every stage; the student replaces each PFB with an RCAG and takes no
// parsing input. Features enter at HR scale via a bicubic head and a global
// residual of that upsample is added at the tail, so an all-zero network is
// exactly the bicubic upsampler.
template <class T>
class Network {
public:
    Network(NetKind kind, const NetConfig& cfg) : cfg_(cfg), kind_(kind) {
        cfg.validate();
        if (cfg.element_mode != elem_mode_of<T>())
            throw ValidationError(cat("net config element_mode ", elem_mode_name(cfg.element_mode),
                                      " does not match instantiated mode ", elem_mode_name(elem_mode_of<T>())));
        Rng rng(cfg.init_seed);
        const BlockConfig bc = cfg.block();
        head_ = Conv2dLayer<T>::make(reg_, "head", 3, cfg.base_channels, 3, rng);
        for (int s = 0; s < cfg.stages; ++s) {
            EncStage stage;
            for (int b = 0; b < cfg.blocks_per_stage; ++b)
                stage.prior.push_back(make_prior(cat("enc", s, ".prior", b), bc, rng));
            stage.down = DownsampleBlock<T>::make(reg_, cat("enc", s, ".down"), bc, rng);
            enc_.push_back(std::move(stage));
        }
        for (int b = 0; b < cfg.blocks_per_stage; ++b)
            bottleneck_.push_back(make_prior(cat("bottleneck.prior", b), bc, rng));
        for (int s = 0; s < cfg.stages; ++s) {
            DecStage stage;
            stage.up = UpsampleBlock<T>::make(reg_, cat("dec", s, ".up"), bc, rng);
            if (cfg.use_ffb) stage.ffb = Ffb<T>::make(reg_, cat("dec", s, ".ffb"), bc, rng);
            for (int b = 0; b < cfg.blocks_per_stage; ++b)
                stage.prior.push_back(make_prior(cat("dec", s, ".prior", b), bc, rng));
            dec_.push_back(std::move(stage));
        }
        tail_ = Conv2dLayer<T>::make(reg_, "tail", cfg.base_channels, 3, 3, rng);
    }

    Network(Network&&) = default;
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    const NetConfig& config() const { return cfg_; }
    NetKind kind() const { return kind_; }
    bool needs_parsing() const { return kind_ == NetKind::teacher && cfg_.use_pfb; }

    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    ParamRegistry<T>& params() { return reg_; }
    const ParamRegistry<T>& params() const { return reg_; }
    i64 param_count() const { return reg_.total_elements(); }

    ForwardResult<T> forward(const Tensor<T>& lr, const Tensor<T>* parsing) const {
        const Shape ls = lr.shape();
        if (ls.c != 3) throw ValidationError(cat("forward: LR input must have 3 channels, got ", ls.c));
        if (ls.n < 1 || ls.h < 1 || ls.w < 1)
            throw ValidationError(cat("forward: bad LR shape ", ls.str()));
        const int H = ls.h * cfg_.scale, W = ls.w * cfg_.scale;
        if (needs_parsing()) {
            if (!parsing) throw ValidationError("forward: teacher requires a parsing map input");
            const Shape ps = parsing->shape();
            if (!(ps == Shape{ls.n, cfg_.n_classes, H, W}))
                throw ValidationError(cat("forward: parsing shape ", ps.str(), " must be (", ls.n, ",",
                                          cfg_.n_classes, ",", H, ",", W, ")"));
        }

        Tensor<T> base = bicubic_upsample(lr, H, W);
        Tensor<T> f = head_(base);
        ForwardResult<T> out;
        std::vector<Tensor<T>> retained;
        for (const auto& stage : enc_) {
            for (const auto& p : stage.prior) f = run_prior(p, f, parsing);
            retained.push_back(f);
            f = stage.down(f);
            out.taps.push_back(f);
        }
        for (const auto& p : bottleneck_) f = run_prior(p, f, parsing);
        for (size_t s = 0; s < dec_.size(); ++s) {
            const auto& stage = dec_[s];
            f = stage.up(f);
            out.taps.push_back(f);
            if (stage.ffb) f = (*stage.ffb)(f, retained[retained.size() - 1 - s]);
            for (const auto& p : stage.prior) f = run_prior(p, f, parsing);
        }
        out.sr = add(tail_(f), base);
        return out;
    }

private:
    struct PriorBlock {
        std::optional<Pfb<T>> pfb;
        std::optional<Rcag<T>> rcag;
    };

    struct EncStage {
        std::vector<PriorBlock> prior;
        DownsampleBlock<T> down;
    };

    struct DecStage {
        UpsampleBlock<T> up;
        std::optional<Ffb<T>> ffb;
        std::vector<PriorBlock> prior;
    };

    PriorBlock make_prior(const std::string& prefix, const BlockConfig& bc, Rng& rng) {
        PriorBlock p;
        if (kind_ == NetKind::teacher && cfg_.use_pfb)
            p.pfb = Pfb<T>::make(reg_, prefix + ".pfb", bc, cfg_.n_classes, rng);
        else
            p.rcag = Rcag<T>::make(reg_, prefix + ".rcag", bc, rng);
        return p;
    }

    Tensor<T> run_prior(const PriorBlock& p, const Tensor<T>& f, const Tensor<T>* parsing) const {
        if (p.pfb) return (*p.pfb)(f, *parsing);
        return (*p.rcag)(f);
    }

    NetConfig cfg_;
    NetKind kind_;
    ParamRegistry<T> reg_;
    Conv2dLayer<T> head_, tail_;
    std::vector<EncStage> enc_;
    std::vector<PriorBlock> bottleneck_;
    std::vector<DecStage> dec_;
    bool frozen_ = false;
};

template <class T>
Network<T> build_teacher(const NetConfig& cfg) {
    return Network<T>(NetKind::teacher, cfg);
}

template <class T>
Network<T> build_student(const NetConfig& cfg) {
    return Network<T>(NetKind::student, cfg);
}

template <class T>
ForwardResult<T> teacher_forward(const Network<T>& net, const Tensor<T>& lr, const Tensor<T>& parsing) {
    return net.forward(lr, &parsing);
}

template <class T>
ForwardResult<T> student_forward(const Network<T>& net, const Tensor<T>& lr) {
    return net.forward(lr, nullptr);
}

// ---------------------------------------------------------------------------
// checkpoints
//
// Layout: magic "PKDN1", little-endian u32 header length, a JSON header
// (kind, element mode, config fields, init seed, name table with shapes,
// optional training state), then raw little-endian parameter value blobs in
// name-table order. Training checkpoints append Adam first/second moment
// blobs in the same order.

namespace ckpt {

constexpr char kMagic[5] = {'P', 'K', 'D', 'N', '1'};

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw Error("checkpoint: truncated file while reading header length");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

template <class T>
void put_blob_le(std::ostream& os, const T* vals, i64 count) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    std::vector<unsigned char> buf(static_cast<size_t>(count) * sizeof(T));
    for (i64 i = 0; i < count; ++i) {
        U u;
        std::memcpy(&u, &vals[i], sizeof(T));
        for (size_t k = 0; k < sizeof(T); ++k)
            buf[static_cast<size_t>(i) * sizeof(T) + k] = static_cast<unsigned char>(u >> (8 * k));
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

template <class T>
void get_blob_le(std::istream& is, T* vals, i64 count) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    std::vector<unsigned char> buf(static_cast<size_t>(count) * sizeof(T));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<size_t>(is.gcount()) != buf.size())
        throw Error("checkpoint: truncated file while reading parameter blobs");
    for (i64 i = 0; i < count; ++i) {
        U u = 0;
        for (size_t k = 0; k < sizeof(T); ++k)
            u |= static_cast<U>(buf[static_cast<size_t>(i) * sizeof(T) + k]) << (8 * k);
        std::memcpy(&vals[i], &u, sizeof(T));
    }
}

inline nlohmann::json config_json(const NetConfig& c) {
    return nlohmann::json{{"base_channels", c.base_channels},
                          {"stages", c.stages},
                          {"blocks_per_stage", c.blocks_per_stage},
                          {"n_classes", c.n_classes},
                          {"scale", c.scale},
                          {"lambda_ts", c.lambda_ts},
                          {"lambda_fs", c.lambda_fs},
                          {"rcab_per_group", c.rcab_per_group},
                          {"reduction_ratio", c.reduction_ratio},
                          {"spatial_kernel", c.spatial_kernel},
                          {"use_pfb", c.use_pfb},
                          {"use_ffb", c.use_ffb},
                          {"init_seed", c.init_seed}};
}

inline NetConfig config_from_json(const nlohmann::json& j, ElemMode mode) {
    NetConfig c;
    c.base_channels = j.at("base_channels").get<int>();
    c.stages = j.at("stages").get<int>();
    c.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    c.scale = j.at("scale").get<int>();
    c.lambda_ts = j.at("lambda_ts").get<double>();
    c.lambda_fs = j.at("lambda_fs").get<double>();
    c.rcab_per_group = j.at("rcab_per_group").get<int>();
    c.reduction_ratio = j.at("reduction_ratio").get<int>();
    c.spatial_kernel = j.at("spatial_kernel").get<int>();
    c.use_pfb = j.at("use_pfb").get<bool>();
    c.use_ffb = j.at("use_ffb").get<bool>();
    c.init_seed = j.at("init_seed").get<u64>();
    c.element_mode = mode;
    return c;
}

}  // namespace ckpt

struct TrainExtras {
    i64 step = 0;
    u64 data_seed = 0;
};

struct CheckpointInfo {
    NetKind kind = NetKind::teacher;
    NetConfig cfg;
    bool has_train = false;
    TrainExtras train;
};

template <class T>
void checkpoint_save(const Network<T>& net, const std::string& path, const TrainExtras* extras = nullptr) {
    nlohmann::json header;
    header["kind"] = net_kind_name(net.kind());
    header["elem"] = elem_mode_name(elem_mode_of<T>());
    header["cfg"] = ckpt::config_json(net.config());
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, p] : net.params().entries()) {
        const Shape s = p->shape();
        names.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}});
    }
    header["params"] = names;
    if (extras) header["train"] = {{"step", extras->step}, {"data_seed", extras->data_seed}, {"moments", true}};

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(cat("checkpoint: cannot open '", path, "' for writing"));
    os.write(ckpt::kMagic, 5);
    const std::string hs = header.dump();
    ckpt::put_u32_le(os, static_cast<std::uint32_t>(hs.size()));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, p] : net.params().entries()) ckpt::put_blob_le(os, p->value.data(), p->numel());
    if (extras) {
        for (const auto& [name, p] : net.params().entries()) ckpt::put_blob_le(os, p->m.data(), p->numel());
        for (const auto& [name, p] : net.params().entries()) ckpt::put_blob_le(os, p->v.data(), p->numel());
    }
    if (!os) throw Error(cat("checkpoint: write failed for '", path, "'"));
}

inline nlohmann::json read_checkpoint_header(std::istream& is, const std::string& path) {
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, ckpt::kMagic, 5) != 0)
        throw ValidationError(cat("checkpoint '", path, "': unknown format or version (bad magic)"));
    const std::uint32_t len = ckpt::get_u32_le(is);
    std::string hs(len, '\0');
    is.read(hs.data(), len);
    if (static_cast<std::uint32_t>(is.gcount()) != len)
        throw Error(cat("checkpoint '", path, "': truncated header"));
    try {
        return nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(cat("checkpoint '", path, "': malformed header: ", e.what()));
    }
}

inline CheckpointInfo checkpoint_peek(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError(cat("checkpoint: cannot open '", path, "'"));
    const nlohmann::json h = read_checkpoint_header(is, path);
    CheckpointInfo info;
    const std::string kind = h.at("kind").get<std::string>();
    if (kind == "teacher")
        info.kind = NetKind::teacher;
    else if (kind == "student")
        info.kind = NetKind::student;
    else
        throw ValidationError(cat("checkpoint '", path, "': unknown kind '", kind, "'"));
    info.cfg = ckpt::config_from_json(h.at("cfg"), parse_elem_mode(h.at("elem").get<std::string>()));
    if (h.contains("train")) {
        info.has_train = true;
        info.train.step = h["train"].at("step").get<i64>();
        info.train.data_seed = h["train"].at("data_seed").get<u64>();
    }
    return info;
}

// Restores a network from `path`. The caller-supplied config must match the
// stored one field for field; mismatches are reported by name.
template <class T>
Network<T> checkpoint_load(const NetConfig& cfg, const std::string& path, TrainExtras* extras_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError(cat("checkpoint: cannot open '", path, "'"));
    const nlohmann::json h = read_checkpoint_header(is, path);

    const ElemMode mode = parse_elem_mode(h.at("elem").get<std::string>());
    if (mode != elem_mode_of<T>())
        throw ValidationError(cat("checkpoint '", path, "': element mode ", elem_mode_name(mode),
                                  " does not match requested ", elem_mode_name(elem_mode_of<T>())));
    const NetConfig stored = ckpt::config_from_json(h.at("cfg"), mode);
    const nlohmann::json want = ckpt::config_json(cfg);
    const nlohmann::json got = ckpt::config_json(stored);
    for (auto& [key, val] : want.items())
        if (got.at(key) != val)
            throw ValidationError(cat("checkpoint '", path, "': config mismatch on '", key, "' (file has ",
                                      got.at(key).dump(), ", requested ", val.dump(), ")"));

    const std::string kind_name = h.at("kind").get<std::string>();
    const NetKind kind = kind_name == "teacher" ? NetKind::teacher : NetKind::student;
    Network<T> net(kind, stored);

    const auto& names = h.at("params");
    const auto& entries = net.params().entries();
    if (names.size() != entries.size())
        throw ValidationError(cat("checkpoint '", path, "': parameter table has ", names.size(),
                                  " entries, network expects ", entries.size()));
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& [name, p] = entries[i];
        if (names[i].at("name").get<std::string>() != name)
            throw ValidationError(cat("checkpoint '", path, "': parameter ", i, " is '",
                                      names[i].at("name").get<std::string>(), "', expected '", name, "'"));
        const auto sh = names[i].at("shape");
        const Shape s = p->shape();
        if (!(sh.size() == 4 && sh[0] == s.n && sh[1] == s.c && sh[2] == s.h && sh[3] == s.w))
            throw ValidationError(cat("checkpoint '", path, "': shape mismatch for '", name, "'"));
    }
    for (const auto& [name, p] : entries) ckpt::get_blob_le(is, p->value.mut(), p->numel());
    const bool moments = h.contains("train") && h["train"].value("moments", false);
    if (moments) {
        for (const auto& [name, p] : entries) ckpt::get_blob_le(is, p->m.data(), p->numel());
        for (const auto& [name, p] : entries) ckpt::get_blob_le(is, p->v.data(), p->numel());
    }
    if (extras_out && h.contains("train")) {
        extras_out->step = h["train"].at("step").get<i64>();
        extras_out->data_seed = h["train"].at("data_seed").get<u64>();
    }
    return net;
}

}  // namespace pkdn
