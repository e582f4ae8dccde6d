#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "pkdn/data.hpp"

namespace pkdn {

// ITU-R BT.601 luma on [0,1] inputs: Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255.
inline Tensor64 rgb_to_y(const Tensor64& img) {
    const Shape s = img.shape();
    if (s.c != 3) throw ValidationError(cat("rgb_to_y: expected 3 channels, got ", s.c));
    Tensor64 y({s.n, 1, s.h, s.w});
    const double* p = img.data();
    double* py = y.mut();
    const i64 plane = i64(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
        const double* r = p + (i64(n) * 3 + 0) * plane;
        const double* g = p + (i64(n) * 3 + 1) * plane;
        const double* b = p + (i64(n) * 3 + 2) * plane;
        double* out = py + i64(n) * plane;
        for (i64 i = 0; i < plane; ++i)
            out[i] = (65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i] + 16.0) / 255.0;
    }
    return y;
}

// 10*log10(255^2 / MSE) on [0,1] inputs scaled to [0,255]. Identical images
// return the +infinity sentinel.
inline double psnr(const Tensor64& a, const Tensor64& b) {
    if (!(a.shape() == b.shape()))
        throw ValidationError(cat("psnr: shape mismatch ", a.shape().str(), " vs ", b.shape().str()));
    const double* pa = a.data();
    const double* pb = b.data();
    double mse = 0.0;
    for (i64 i = 0; i < a.numel(); ++i) {
        const double d = 255.0 * (pa[i] - pb[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

namespace detail_ssim {

inline const std::vector<double>& gaussian_window_11() {
    static const std::vector<double> w = [] {
        std::vector<double> v(121);
        const double sigma = 1.5;
        double sum = 0.0;
        for (int i = 0; i < 11; ++i)
            for (int j = 0; j < 11; ++j) {
                const double di = i - 5, dj = j - 5;
                v[size_t(i * 11 + j)] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
                sum += v[size_t(i * 11 + j)];
            }
        for (double& x : v) x /= sum;
        return v;
    }();
    return w;
}

// Standard single-plane SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
// K2=0.03, L=255, valid-region sliding, mean over window positions.
inline double ssim_plane(const double* a, const double* b, int h, int w) {
    const auto& win = gaussian_window_11();
    const double C1 = (0.01 * 255.0) * (0.01 * 255.0);
    const double C2 = (0.03 * 255.0) * (0.03 * 255.0);
    double total = 0.0;
    i64 count = 0;
    for (int y = 0; y + 11 <= h; ++y)
        for (int x = 0; x + 11 <= w; ++x) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double wv = win[size_t(i * 11 + j)];
                    const double va = 255.0 * a[i64(y + i) * w + (x + j)];
                    const double vb = 255.0 * b[i64(y + i) * w + (x + j)];
                    mx += wv * va;
                    my += wv * vb;
                    xx += wv * va * va;
                    yy += wv * vb * vb;
                    xy += wv * va * vb;
                }
            const double sx = xx - mx * mx;
            const double sy = yy - my * my;
            const double sxy = xy - mx * my;
            total += ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sx + sy + C2));
            ++count;
        }
    return total / static_cast<double>(count);
}

}  // namespace detail_ssim

// Single-channel input computes plane SSIM; 3-channel input averages the
// per-channel values.
inline double ssim(const Tensor64& a, const Tensor64& b) {
    if (!(a.shape() == b.shape()))
        throw ValidationError(cat("ssim: shape mismatch ", a.shape().str(), " vs ", b.shape().str()));
    const Shape s = a.shape();
    if (s.n != 1) throw ValidationError(cat("ssim: expected a single image, got batch ", s.n));
    if (s.h < 11 || s.w < 11)
        throw ValidationError(cat("ssim: image ", s.h, "x", s.w, " smaller than the 11x11 window"));
    const i64 plane = i64(s.h) * s.w;
    double total = 0.0;
    for (int c = 0; c < s.c; ++c)
        total += detail_ssim::ssim_plane(a.data() + c * plane, b.data() + c * plane, s.h, s.w);
    return total / s.c;
}

struct MetricRow {
    std::string id;
    double psnr_y = 0, ssim_y = 0, psnr_rgb = 0, ssim_rgb = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    double mean_psnr_y = 0, mean_ssim_y = 0, mean_psnr_rgb = 0, mean_ssim_rgb = 0;
    // +inf PSNR entries are excluded from the means and counted here.
    int psnr_y_inf_count = 0, psnr_rgb_inf_count = 0;

    std::string to_tsv() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(6);
        os << "id\tpsnr_y\tssim_y\tpsnr_rgb\tssim_rgb\n";
        auto field = [&os](double v) {
            if (std::isinf(v))
                os << "inf";
            else
                os << v;
        };
        for (const auto& r : rows) {
            os << r.id << '\t';
            field(r.psnr_y);
            os << '\t';
            field(r.ssim_y);
            os << '\t';
            field(r.psnr_rgb);
            os << '\t';
            field(r.ssim_rgb);
            os << '\n';
        }
        os << "mean\t";
        field(mean_psnr_y);
        os << '\t';
        field(mean_ssim_y);
        os << '\t';
        field(mean_psnr_rgb);
        os << '\t';
        field(mean_ssim_rgb);
        os << '\n';
        os << "# psnr_y_inf_count=" << psnr_y_inf_count << " psnr_rgb_inf_count=" << psnr_rgb_inf_count << '\n';
        return os.str();
    }

    nlohmann::json to_json() const {
        auto enc = [](double v) -> nlohmann::json {
            if (std::isinf(v)) return "inf";
            return v;
        };
        nlohmann::json images = nlohmann::json::array();
        for (const auto& r : rows)
            images.push_back({{"id", r.id},
                              {"psnr_y", enc(r.psnr_y)},
                              {"ssim_y", r.ssim_y},
                              {"psnr_rgb", enc(r.psnr_rgb)},
                              {"ssim_rgb", r.ssim_rgb}});
        return nlohmann::json{{"images", images},
                              {"mean", {{"psnr_y", enc(mean_psnr_y)},
                                        {"ssim_y", mean_ssim_y},
                                        {"psnr_rgb", enc(mean_psnr_rgb)},
                                        {"ssim_rgb", mean_ssim_rgb}}},
                              {"psnr_y_inf_count", psnr_y_inf_count},
                              {"psnr_rgb_inf_count", psnr_rgb_inf_count}};
    }
};

// Runs `model` over the dataset and reports per-image and mean PSNR/SSIM on
// both the Y channel and RGB. Model outputs are clamped to [0,1] before
// scoring.
inline MetricReport evaluate(const std::function<Tensor64(const Sample&)>& model, const Dataset& ds) {
    if (ds.size() == 0) throw ValidationError("evaluate: empty dataset");
    MetricReport rep;
    double sum_py = 0, sum_sy = 0, sum_pr = 0, sum_sr = 0;
    int n_py = 0, n_pr = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
        const Sample s = ds.get(i);
        Tensor64 sr = model(s);
        if (!(sr.shape() == s.hr.shape()))
            throw Error(cat("evaluate: model output ", sr.shape().str(), " does not match hr ",
                            s.hr.shape().str(), " for '", s.stem, "'"));
        double* p = sr.mut();
        for (i64 k = 0; k < sr.numel(); ++k) p[k] = std::min(1.0, std::max(0.0, p[k]));
        MetricRow row;
        row.id = s.stem;
        const Tensor64 sr_y = rgb_to_y(sr), hr_y = rgb_to_y(s.hr);
        row.psnr_y = psnr(sr_y, hr_y);
        row.ssim_y = ssim(sr_y, hr_y);
        row.psnr_rgb = psnr(sr, s.hr);
        row.ssim_rgb = ssim(sr, s.hr);
        if (std::isinf(row.psnr_y))
            ++rep.psnr_y_inf_count;
        else {
            sum_py += row.psnr_y;
            ++n_py;
        }
        if (std::isinf(row.psnr_rgb))
            ++rep.psnr_rgb_inf_count;
        else {
            sum_pr += row.psnr_rgb;
            ++n_pr;
        }
        sum_sy += row.ssim_y;
        sum_sr += row.ssim_rgb;
        rep.rows.push_back(std::move(row));
    }
    rep.mean_psnr_y = n_py > 0 ? sum_py / n_py : std::numeric_limits<double>::infinity();
    rep.mean_psnr_rgb = n_pr > 0 ? sum_pr / n_pr : std::numeric_limits<double>::infinity();
    rep.mean_ssim_y = sum_sy / static_cast<double>(ds.size());
    rep.mean_ssim_rgb = sum_sr / static_cast<double>(ds.size());
    return rep;
}

}  // namespace pkdn
