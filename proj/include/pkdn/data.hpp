#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pkdn/tensor.hpp"

namespace pkdn {

using Tensor64 = Tensor<double>;

// One training triple. hr and lr live in [0,1]; parsing is one-hot class
// planes that sum to exactly 1 at every pixel. lr is always derived from hr
// through bicubic_downsample, so it is bit-reproducible.
struct Sample {
    Tensor64 lr;       // (1, 3, H/s, W/s)
    Tensor64 hr;       // (1, 3, H, W)
    Tensor64 parsing;  // (1, n_classes, H, W)
    std::string stem;
};

// Anti-aliased Catmull-Rom downscale by an integer factor, edge-clamped,
// output clamped to [0,1].
Tensor64 bicubic_downsample(const Tensor64& hr, int factor);

// 8-bit RGB file -> (1,3,H,W) in [0,1] via v/255.
Tensor64 load_image(const std::string& path);
// Clamps to [0,1], quantizes with round(v*255).
void save_image(const Tensor64& img, const std::string& path);

// 8-bit single-channel label file -> one-hot (1,n_classes,H,W).
Tensor64 load_parsing(const std::string& path, int n_classes);
// Label map (values < 256) written as 8-bit gray.
void save_label_map(const std::vector<unsigned char>& labels, int width, int height, const std::string& path);

// argmax over class planes -> per-pixel labels
std::vector<unsigned char> parsing_to_labels(const Tensor64& parsing);

// Procedural face-like image plus its exact generating label map, one-hot
// encoded. Classes for the default geometry: 0 background, 1 skin, 2 eyes,
// 3 mouth. Deterministic per seed.
std::pair<Tensor64, Tensor64> synth_face(u64 seed, int size, int n_classes = 4);

// Paired corpus: either a directory with hr/<stem>.png + parsing/<stem>.png,
// or an in-memory synthetic spec. Samples are produced on demand and lr is
// recomputed from hr every time.
class Dataset {
public:
    static Dataset synthetic(int count, int size, u64 seed, int n_classes, int scale);
    static Dataset from_directory(const std::string& dir, int n_classes, int scale);

    size_t size() const { return synthetic_ ? static_cast<size_t>(count_) : stems_.size(); }
    Sample get(size_t index) const;

    int n_classes() const { return n_classes_; }
    int scale() const { return scale_; }

private:
    Dataset() = default;

    bool synthetic_ = false;
    int n_classes_ = 4;
    int scale_ = 4;
    // synthetic spec
    int count_ = 0;
    int synth_size_ = 0;
    u64 seed_ = 0;
    // directory mode
    std::string dir_;
    std::vector<std::string> stems_;
};

// Index order for global step `step` under per-epoch seeded shuffling.
// Batches partition each epoch in order, so the final batch of an epoch may
// be short. Random access by step is what makes resume deterministic.
std::vector<size_t> batch_indices(size_t dataset_size, int batch_size, u64 seed, i64 step);

}  // namespace pkdn
