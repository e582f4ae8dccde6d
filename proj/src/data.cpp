#include "pkdn/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "pkdn/png_io.hpp"
#include "pkdn/resample.hpp"

namespace fs = std::filesystem;

namespace pkdn {

Tensor64 bicubic_downsample(const Tensor64& hr, int factor) {
    const Shape s = hr.shape();
    if (factor < 1) throw ValidationError(cat("bicubic_downsample: factor must be >= 1, got ", factor));
    if (s.h % factor != 0 || s.w % factor != 0)
        throw ValidationError(
            cat("bicubic_downsample: dims ", s.h, "x", s.w, " not divisible by factor ", factor));
    const int oh = s.h / factor, ow = s.w / factor;
    const auto hp = resample::make_axis_plan(s.h, oh, true);
    const auto wp = resample::make_axis_plan(s.w, ow, true);
    Tensor64 out({s.n, s.c, oh, ow});
    resample::apply_plans(hr.data(), out.mut(), s.n * s.c, s.h, s.w, hp, wp);
    double* p = out.mut();
    for (i64 i = 0; i < out.numel(); ++i) p[i] = std::min(1.0, std::max(0.0, p[i]));
    return out;
}

Tensor64 load_image(const std::string& path) {
    const ImageU8 img = read_png(path);
    if (img.channels != 3) throw ValidationError(cat("'", path, "' is not an RGB image"));
    Tensor64 t({1, 3, img.height, img.width});
    double* p = t.mut();
    const i64 plane = i64(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                p[c * plane + i64(y) * img.width + x] =
                    img.pixels[(size_t(y) * img.width + x) * 3 + size_t(c)] / 255.0;
    return t;
}

void save_image(const Tensor64& img, const std::string& path) {
    const Shape s = img.shape();
    if (s.n != 1 || s.c != 3)
        throw ValidationError(cat("save_image: expected (1,3,H,W), got ", s.str()));
    ImageU8 out;
    out.width = s.w;
    out.height = s.h;
    out.channels = 3;
    out.pixels.resize(size_t(s.h) * s.w * 3);
    const double* p = img.data();
    const i64 plane = i64(s.h) * s.w;
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::min(1.0, std::max(0.0, p[c * plane + i64(y) * s.w + x]));
                out.pixels[(size_t(y) * s.w + x) * 3 + size_t(c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    write_png(path, out);
}

Tensor64 load_parsing(const std::string& path, int n_classes) {
    if (n_classes < 1) throw ValidationError("load_parsing: n_classes must be >= 1");
    const ImageU8 img = read_png(path);
    if (img.channels != 1)
        throw ValidationError(cat("'", path, "' is not a single-channel label image"));
    Tensor64 t({1, n_classes, img.height, img.width});
    double* p = t.mut();
    const i64 plane = i64(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const unsigned char label = img.pixels[size_t(y) * img.width + x];
            if (label >= n_classes)
                throw ValidationError(cat("'", path, "': label ", int(label), " at pixel (", x, ",", y,
                                          ") is out of range for ", n_classes, " classes"));
            p[i64(label) * plane + i64(y) * img.width + x] = 1.0;
        }
    return t;
}

void save_label_map(const std::vector<unsigned char>& labels, int width, int height, const std::string& path) {
    if (labels.size() != size_t(width) * height)
        throw ValidationError("save_label_map: label buffer does not match dimensions");
    ImageU8 img;
    img.width = width;
    img.height = height;
    img.channels = 1;
    img.pixels = labels;
    write_png(path, img);
}

std::vector<unsigned char> parsing_to_labels(const Tensor64& parsing) {
    const Shape s = parsing.shape();
    if (s.n != 1) throw ValidationError(cat("parsing_to_labels: expected batch of 1, got ", s.str()));
    std::vector<unsigned char> labels(size_t(s.h) * s.w);
    const double* p = parsing.data();
    const i64 plane = i64(s.h) * s.w;
    for (i64 i = 0; i < plane; ++i) {
        int best = 0;
        double bv = p[i];
        for (int c = 1; c < s.c; ++c)
            if (p[c * plane + i] > bv) {
                bv = p[c * plane + i];
                best = c;
            }
        labels[size_t(i)] = static_cast<unsigned char>(best);
    }
    return labels;
}

namespace {

struct Ellipse {
    double cx, cy, rx, ry;
    bool contains(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
};

}  // namespace

std::pair<Tensor64, Tensor64> synth_face(u64 seed, int size, int n_classes) {
    if (size < 32) throw ValidationError(cat("synth_face: size must be >= 32, got ", size));
    if (n_classes < 4) throw ValidationError(cat("synth_face: needs at least 4 classes, got ", n_classes));
    Rng rng(mix_seed(seed, 0x5f));
    const double S = size;

    // Geometry anchored to the face center so eyes and mouth always stay
    // inside the skin ellipse and every class is present.
    const Ellipse face{(0.5 + rng.uniform(-0.05, 0.05)) * S, (0.5 + rng.uniform(-0.04, 0.06)) * S,
                       rng.uniform(0.30, 0.38) * S, rng.uniform(0.36, 0.44) * S};
    const double eye_dx = rng.uniform(0.12, 0.16) * S;
    const double eye_dy = rng.uniform(0.08, 0.12) * S;
    const double eye_rx = rng.uniform(0.05, 0.07) * S;
    const double eye_ry = rng.uniform(0.035, 0.05) * S;
    const Ellipse eye_l{face.cx - eye_dx, face.cy - eye_dy, eye_rx, eye_ry};
    const Ellipse eye_r{face.cx + eye_dx, face.cy - eye_dy, eye_rx, eye_ry};
    const Ellipse mouth{face.cx + rng.uniform(-0.02, 0.02) * S, face.cy + rng.uniform(0.16, 0.22) * S,
                        rng.uniform(0.10, 0.14) * S, rng.uniform(0.035, 0.05) * S};

    double bg[3], skin[3], eye[3], lips[3];
    for (double& v : bg) v = rng.uniform(0.10, 0.45);
    skin[0] = rng.uniform(0.55, 0.90);
    skin[1] = skin[0] * rng.uniform(0.72, 0.92);
    skin[2] = skin[1] * rng.uniform(0.72, 0.92);
    for (double& v : eye) v = rng.uniform(0.05, 0.25);
    lips[0] = rng.uniform(0.50, 0.80);
    lips[1] = rng.uniform(0.12, 0.30);
    lips[2] = rng.uniform(0.18, 0.38);
    const double* palette[4] = {bg, skin, eye, lips};

    // Smooth low-frequency shading so the image is not piecewise constant.
    const double fx = rng.uniform(0.7, 1.8), fy = rng.uniform(0.7, 1.8);
    const double phase = rng.uniform(0.0, 6.28318);
    const double amp = rng.uniform(0.08, 0.16);

    Tensor64 hr({1, 3, size, size});
    Tensor64 parsing({1, n_classes, size, size});
    double* hp = hr.mut();
    double* pp = parsing.mut();
    const i64 plane = i64(size) * size;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            int label = 0;
            if (eye_l.contains(px, py) || eye_r.contains(px, py))
                label = 2;
            else if (mouth.contains(px, py))
                label = 3;
            else if (face.contains(px, py))
                label = 1;
            const double shade =
                1.0 + amp * std::sin(6.28318 * (fx * px / S + fy * py / S) + phase);
            const i64 at = i64(y) * size + x;
            for (int c = 0; c < 3; ++c) {
                const double v = palette[label][c] * shade;
                hp[c * plane + at] = std::min(0.98, std::max(0.02, v));
            }
            pp[i64(label) * plane + at] = 1.0;
        }
    return {std::move(hr), std::move(parsing)};
}

Dataset Dataset::synthetic(int count, int size, u64 seed, int n_classes, int scale) {
    if (count < 1) throw ValidationError(cat("dataset: synthetic count must be >= 1, got ", count));
    if (size % scale != 0)
        throw ValidationError(cat("dataset: size ", size, " not divisible by scale ", scale));
    Dataset d;
    d.synthetic_ = true;
    d.count_ = count;
    d.synth_size_ = size;
    d.seed_ = seed;
    d.n_classes_ = n_classes;
    d.scale_ = scale;
    return d;
}

Dataset Dataset::from_directory(const std::string& dir, int n_classes, int scale) {
    Dataset d;
    d.synthetic_ = false;
    d.dir_ = dir;
    d.n_classes_ = n_classes;
    d.scale_ = scale;
    const fs::path hr_dir = fs::path(dir) / "hr";
    const fs::path parse_dir = fs::path(dir) / "parsing";
    if (!fs::is_directory(hr_dir))
        throw ValidationError(cat("dataset: missing directory '", hr_dir.string(), "'"));
    for (const auto& entry : fs::directory_iterator(hr_dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
        d.stems_.push_back(entry.path().stem().string());
    }
    std::sort(d.stems_.begin(), d.stems_.end());
    if (d.stems_.empty()) throw ValidationError(cat("dataset: no .png files under '", hr_dir.string(), "'"));
    for (const auto& stem : d.stems_) {
        if (!fs::exists(parse_dir / (stem + ".png")))
            throw ValidationError(cat("dataset: missing parsing map for stem '", stem, "'"));
    }
    return d;
}

Sample Dataset::get(size_t index) const {
    if (index >= size()) throw ValidationError(cat("dataset: index ", index, " out of range"));
    Sample s;
    if (synthetic_) {
        auto [hr, parsing] = synth_face(mix_seed(seed_, index), synth_size_, n_classes_);
        s.hr = std::move(hr);
        s.parsing = std::move(parsing);
        s.stem = cat("synth_", index);
    } else {
        const fs::path base(dir_);
        s.stem = stems_[index];
        s.hr = load_image((base / "hr" / (s.stem + ".png")).string());
        s.parsing = load_parsing((base / "parsing" / (s.stem + ".png")).string(), n_classes_);
        if (s.parsing.h() != s.hr.h() || s.parsing.w() != s.hr.w())
            throw ValidationError(cat("dataset: stem '", s.stem, "' parsing size ", s.parsing.h(), "x",
                                      s.parsing.w(), " does not match hr ", s.hr.h(), "x", s.hr.w()));
    }
    if (s.hr.h() % scale_ != 0 || s.hr.w() % scale_ != 0)
        throw ValidationError(cat("dataset: stem '", s.stem, "' size ", s.hr.h(), "x", s.hr.w(),
                                  " not divisible by scale ", scale_));
    s.lr = bicubic_downsample(s.hr, scale_);
    return s;
}

std::vector<size_t> batch_indices(size_t dataset_size, int batch_size, u64 seed, i64 step) {
    if (dataset_size == 0) throw ValidationError("batch_indices: empty dataset");
    if (batch_size < 1) throw ValidationError(cat("batch_indices: batch size must be >= 1, got ", batch_size));
    const i64 per_epoch = static_cast<i64>((dataset_size + batch_size - 1) / size_t(batch_size));
    const i64 epoch = step / per_epoch;
    const i64 slot = step % per_epoch;
    std::vector<size_t> order(dataset_size);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(mix_seed(seed, static_cast<u64>(epoch)));
    for (size_t i = dataset_size; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const size_t lo = size_t(slot) * batch_size;
    const size_t hi = std::min(dataset_size, lo + batch_size);
    return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

}  // namespace pkdn
