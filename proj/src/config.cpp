#include "pkdn/config.hpp"

#include <fstream>

namespace pkdn {

namespace {

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError(cat("config: key '", key, "' expects an integer, got '", v, "'"));
    }
}

i64 to_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError(cat("config: key '", key, "' expects an integer, got '", v, "'"));
    }
}

u64 to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError(cat("config: key '", key, "' expects an unsigned integer, got '", v, "'"));
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError(cat("config: key '", key, "' expects a number, got '", v, "'"));
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError(cat("config: key '", key, "' expects true/false, got '", v, "'"));
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    if (key == "element_mode")
        net.element_mode = parse_elem_mode(value);
    else if (key == "base_channels")
        net.base_channels = to_int(key, value);
    else if (key == "stages")
        net.stages = to_int(key, value);
    else if (key == "blocks_per_stage")
        net.blocks_per_stage = to_int(key, value);
    else if (key == "n_classes")
        net.n_classes = to_int(key, value);
    else if (key == "scale")
        net.scale = to_int(key, value);
    else if (key == "lambda_ts")
        net.lambda_ts = to_double(key, value);
    else if (key == "lambda_fs")
        net.lambda_fs = to_double(key, value);
    else if (key == "rcab_per_group")
        net.rcab_per_group = to_int(key, value);
    else if (key == "reduction_ratio")
        net.reduction_ratio = to_int(key, value);
    else if (key == "spatial_kernel")
        net.spatial_kernel = to_int(key, value);
    else if (key == "use_pfb")
        net.use_pfb = to_bool(key, value);
    else if (key == "use_ffb")
        net.use_ffb = to_bool(key, value);
    else if (key == "init_seed")
        net.init_seed = to_u64(key, value);
    else if (key == "lr")
        lr = to_double(key, value);
    else if (key == "beta1")
        beta1 = to_double(key, value);
    else if (key == "beta2")
        beta2 = to_double(key, value);
    else if (key == "adam_eps")
        adam_eps = to_double(key, value);
    else if (key == "batch_size")
        batch_size = to_int(key, value);
    else if (key == "steps")
        steps = to_i64(key, value);
    else if (key == "seed")
        seed = to_u64(key, value);
    else if (key == "ckpt_every")
        ckpt_every = to_i64(key, value);
    else if (key == "data_source")
        data_source = value;
    else if (key == "data_dir")
        data_dir = value;
    else if (key == "synth_count")
        synth_count = to_int(key, value);
    else if (key == "synth_size")
        synth_size = to_int(key, value);
    else
        throw ValidationError(cat("config: unknown key '", key, "'"));
}

void RunConfig::apply_line(const std::string& line) {
    const auto eq = line.find('=');
    if (eq == std::string::npos)
        throw ValidationError(cat("config: expected key=value, got '", line, "'"));
    apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
}

void RunConfig::validate() const {
    net.validate();
    if (!(lr > 0)) throw ValidationError("config: lr must be > 0");
    if (batch_size < 1) throw ValidationError("config: batch_size must be >= 1");
    if (steps < 1) throw ValidationError("config: steps must be >= 1");
    if (data_source != "synth" && data_source != "dir")
        throw ValidationError(cat("config: data_source must be synth or dir, got '", data_source, "'"));
    if (data_source == "dir" && data_dir.empty())
        throw ValidationError("config: data_source=dir requires data_dir");
    if (data_source == "synth") {
        if (synth_count < 1) throw ValidationError("config: synth_count must be >= 1");
        if (synth_size < 32) throw ValidationError("config: synth_size must be >= 32");
        if (synth_size % net.scale != 0)
            throw ValidationError(cat("config: synth_size ", synth_size, " not divisible by scale ", net.scale));
    }
}

std::string RunConfig::echo() const {
    std::ostringstream os;
    os << "element_mode=" << elem_mode_name(net.element_mode) << '\n';
    os << "base_channels=" << net.base_channels << '\n';
    os << "stages=" << net.stages << '\n';
    os << "blocks_per_stage=" << net.blocks_per_stage << '\n';
    os << "n_classes=" << net.n_classes << '\n';
    os << "scale=" << net.scale << '\n';
    os << "lambda_ts=" << net.lambda_ts << '\n';
    os << "lambda_fs=" << net.lambda_fs << '\n';
    os << "rcab_per_group=" << net.rcab_per_group << '\n';
    os << "reduction_ratio=" << net.reduction_ratio << '\n';
    os << "spatial_kernel=" << net.spatial_kernel << '\n';
    os << "use_pfb=" << (net.use_pfb ? "true" : "false") << '\n';
    os << "use_ffb=" << (net.use_ffb ? "true" : "false") << '\n';
    os << "init_seed=" << net.init_seed << '\n';
    os << "lr=" << lr << '\n';
    os << "beta1=" << beta1 << '\n';
    os << "beta2=" << beta2 << '\n';
    os << "adam_eps=" << adam_eps << '\n';
    os << "batch_size=" << batch_size << '\n';
    os << "steps=" << steps << '\n';
    os << "seed=" << seed << '\n';
    os << "ckpt_every=" << ckpt_every << '\n';
    os << "data_source=" << data_source << '\n';
    os << "data_dir=" << data_dir << '\n';
    os << "synth_count=" << synth_count << '\n';
    os << "synth_size=" << synth_size << '\n';
    return os.str();
}

TrainConfig RunConfig::train_config() const {
    TrainConfig tc;
    tc.adam = AdamConfig{lr, beta1, beta2, adam_eps};
    tc.batch_size = batch_size;
    tc.steps = steps;
    tc.data_seed = seed;
    tc.ckpt_every = ckpt_every;
    return tc;
}

Dataset RunConfig::make_dataset() const {
    if (data_source == "dir") return Dataset::from_directory(data_dir, net.n_classes, net.scale);
    return Dataset::synthetic(synth_count, synth_size, seed, net.n_classes, net.scale);
}

RunConfig RunConfig::resolve(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw ValidationError(cat("config: cannot open '", config_path, "'"));
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            try {
                cfg.apply_line(t);
            } catch (const ValidationError& e) {
                throw ValidationError(cat(config_path, ":", lineno, ": ", e.what()));
            }
        }
    }
    for (const auto& o : overrides) cfg.apply_line(o);
    cfg.validate();
    return cfg;
}

}  // namespace pkdn
