#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "pkdn/ops.hpp"

namespace pkdn {
namespace resample {

// Catmull-Rom cubic (a = -0.5), support [-2, 2].
inline double cubic_kernel(double t) {
    t = std::abs(t);
    if (t <= 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
    if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
    return 0.0;
}

// Per-axis sampling plan: for each output index, a ragged list of
// (source index, weight) taps. Indices are edge-clamped and weights are
// normalized to sum to 1, so constants are reproduced exactly. Downscale
// plans widen the kernel by the scale ratio (anti-aliasing).
struct AxisPlan {
    int in_len = 0, out_len = 0;
    std::vector<int> offset;  // out_len + 1
    std::vector<int> idx;
    std::vector<double> wgt;
};

inline AxisPlan make_axis_plan(int in_len, int out_len, bool antialias) {
    AxisPlan plan;
    plan.in_len = in_len;
    plan.out_len = out_len;
    plan.offset.assign(static_cast<size_t>(out_len) + 1, 0);
    const double ratio = static_cast<double>(in_len) / out_len;
    const double kscale = (antialias && out_len < in_len) ? ratio : 1.0;
    const double support = 2.0 * kscale;
    for (int i = 0; i < out_len; ++i) {
        const double center = (i + 0.5) * ratio - 0.5;
        const int j_lo = static_cast<int>(std::ceil(center - support));
        const int j_hi = static_cast<int>(std::floor(center + support));
        double sum = 0.0;
        std::vector<std::pair<int, double>> taps;
        for (int j = j_lo; j <= j_hi; ++j) {
            const double w = cubic_kernel((j - center) / kscale);
            if (w == 0.0) continue;
            const int jc = std::min(in_len - 1, std::max(0, j));
            taps.emplace_back(jc, w);
            sum += w;
        }
        if (taps.empty()) {
            taps.emplace_back(std::min(in_len - 1, std::max(0, static_cast<int>(std::lround(center)))), 1.0);
            sum = 1.0;
        }
        for (auto& [j, w] : taps) {
            plan.idx.push_back(j);
            plan.wgt.push_back(w / sum);
        }
        plan.offset[static_cast<size_t>(i) + 1] = static_cast<int>(plan.idx.size());
    }
    return plan;
}

// Scatter form of a plan: for each input index, the (output index, weight)
// taps that read it. Used by the backward pass.
inline AxisPlan transpose_plan(const AxisPlan& p) {
    AxisPlan t;
    t.in_len = p.out_len;
    t.out_len = p.in_len;
    std::vector<std::vector<std::pair<int, double>>> rows(static_cast<size_t>(p.in_len));
    for (int i = 0; i < p.out_len; ++i)
        for (int k = p.offset[static_cast<size_t>(i)]; k < p.offset[static_cast<size_t>(i) + 1]; ++k)
            rows[static_cast<size_t>(p.idx[static_cast<size_t>(k)])].emplace_back(i, p.wgt[static_cast<size_t>(k)]);
    t.offset.assign(static_cast<size_t>(t.out_len) + 1, 0);
    for (int j = 0; j < t.out_len; ++j) {
        for (auto& [i, w] : rows[static_cast<size_t>(j)]) {
            t.idx.push_back(i);
            t.wgt.push_back(w);
        }
        t.offset[static_cast<size_t>(j) + 1] = static_cast<int>(t.idx.size());
    }
    return t;
}

// Separable application: width pass first (contiguous reads), then height.
template <class T>
void apply_plans(const T* in, T* out, int planes, int in_h, int in_w, const AxisPlan& hp, const AxisPlan& wp) {
    const int out_h = hp.out_len, out_w = wp.out_len;
    std::vector<T> tmp(static_cast<size_t>(planes) * in_h * out_w);
    parallel_for(0, i64(planes) * in_h, [&](i64 row) {
        const T* src = in + row * in_w;
        T* dst = tmp.data() + row * out_w;
        for (int j = 0; j < out_w; ++j) {
            double acc = 0.0;
            for (int k = wp.offset[size_t(j)]; k < wp.offset[size_t(j) + 1]; ++k)
                acc += wp.wgt[size_t(k)] * static_cast<double>(src[wp.idx[size_t(k)]]);
            dst[j] = static_cast<T>(acc);
        }
    }, 64);
    parallel_for(0, i64(planes), [&](i64 p) {
        const T* src = tmp.data() + p * in_h * out_w;
        T* dst = out + p * out_h * out_w;
        for (int i = 0; i < out_h; ++i)
            for (int j = 0; j < out_w; ++j) {
                double acc = 0.0;
                for (int k = hp.offset[size_t(i)]; k < hp.offset[size_t(i) + 1]; ++k)
                    acc += hp.wgt[size_t(k)] * static_cast<double>(src[i64(hp.idx[size_t(k)]) * out_w + j]);
                dst[i64(i) * out_w + j] = static_cast<T>(acc);
            }
    }, 8);
}

}  // namespace resample

// Differentiable bicubic resize (no anti-aliasing; intended for upscaling
// inside the network head). Edge-clamped Catmull-Rom taps.
template <class T>
Tensor<T> bicubic_upsample(const Tensor<T>& x, int out_h, int out_w) {
    const Shape s = x.shape();
    if (out_h < 1 || out_w < 1)
        throw ValidationError(cat("bicubic_upsample: target ", out_h, "x", out_w, " must be >= 1"));
    auto hp = std::make_shared<resample::AxisPlan>(resample::make_axis_plan(s.h, out_h, false));
    auto wp = std::make_shared<resample::AxisPlan>(resample::make_axis_plan(s.w, out_w, false));
    Tensor<T> out({s.n, s.c, out_h, out_w});
    resample::apply_plans(x.data(), out.mut(), s.n * s.c, s.h, s.w, *hp, *wp);

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, s, out_h, out_w, hp, wp](Tape<T>& t, const std::vector<T>& g) {
                                          const auto hpt = resample::transpose_plan(*hp);
                                          const auto wpt = resample::transpose_plan(*wp);
                                          std::vector<T> dx(size_t(s.numel()));
                                          resample::apply_plans(g.data(), dx.data(), s.n * s.c, out_h, out_w, hpt, wpt);
                                          t.add_grad(nx, dx.data(), s.numel());
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

}  // namespace pkdn
