#pragma once

#include <string>
#include <vector>

#include "pkdn/network.hpp"
#include "pkdn/trainer.hpp"

namespace pkdn {

// Flat key=value configuration covering the network, trainer and data
// settings. Resolution order: built-in defaults, then the config file, then
// command-line overrides (last write wins). Unknown keys are rejected.
struct RunConfig {
    NetConfig net;

    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 4;
    i64 steps = 2000;
    u64 seed = 1;  // data order seed
    i64 ckpt_every = 500;

    std::string data_source = "synth";  // synth | dir
    std::string data_dir;
    int synth_count = 16;
    int synth_size = 32;

    void apply(const std::string& key, const std::string& value);
    void apply_line(const std::string& line);  // "key=value", used for --set
    void validate() const;

    // Every key in canonical order; suitable for echoing and re-parsing.
    std::string echo() const;

    TrainConfig train_config() const;
    Dataset make_dataset() const;

    static RunConfig resolve(const std::string& config_path, const std::vector<std::string>& overrides);
};

}  // namespace pkdn
