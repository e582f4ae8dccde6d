#pragma once

#include <functional>
#include <span>
#include <unordered_set>

#include "pkdn/ops.hpp"

namespace pkdn {

struct FdOptions {
    // 0 checks every coordinate; otherwise a seeded sample per parameter.
    int max_coords_per_param = 0;
    u64 seed = 0x600dcafe;
    // Restrict sampling to coordinates with |analytic| >= floor. Central
    // differences in double resolve gradients down to roughly err(f)/2eps;
    // coordinates below that (saturated gate paths in deep nets) are not
    // measurable by this oracle and are covered by the per-op checks instead.
    double min_grad_floor = 0.0;
};

// Smooth scalar readout sum(x * r) with constant weights r: probes composite
// blocks without introducing |.| kinks, and keeps per-coordinate gradients
// O(1) so finite-difference roundoff stays negligible. Kahan-compensated so
// the readout itself adds no accumulation noise.
template <class T>
Tensor<T> dot_readout(const Tensor<T>& x, const Tensor<T>& r) {
    detail::require_same_shape(x, r, "dot_readout");
    const i64 n = x.numel();
    const T* px = x.data();
    const T* pr = r.data();
    T acc = T(0), comp = T(0);
    for (i64 i = 0; i < n; ++i) {
        const T term = px[i] * pr[i] - comp;
        const T next = acc + term;
        comp = (next - acc) - term;
        acc = next;
    }
    Tensor<T> out = Tensor<T>::scalar(acc);
    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, n, r](Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(nx);
                                          const T* pr = r.data();
                                          for (i64 i = 0; i < n; ++i) buf[size_t(i)] += g[0] * pr[i];
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

// Central-difference check of analytic gradients. `f` must rebuild the same
// computation from the current parameter values on every call; it is run once
// under a fresh tape for the analytic pass and tape-free for the probes.
// Returns max over sampled coordinates of |a - n| / max(|a|, |n|, 1e-8).
template <class T>
double finite_diff_check(const std::function<Tensor<T>()>& f, std::span<Parameter<T>* const> params,
                         double epsilon, const FdOptions& opt = {}) {
    if (!(epsilon > 0)) throw ValidationError("finite_diff_check: epsilon must be > 0");
    for (auto* p : params) p->zero_grad();

    std::vector<std::vector<T>> analytic;
    {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> loss = f();
        backward(loss);
    }
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad);

    Rng rng(opt.seed);
    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<T>& p = *params[pi];
        const i64 count = p.numel();
        std::vector<i64> candidates;
        candidates.reserve(static_cast<size_t>(count));
        for (i64 i = 0; i < count; ++i)
            if (opt.min_grad_floor <= 0.0 ||
                std::abs(static_cast<double>(analytic[pi][static_cast<size_t>(i)])) >= opt.min_grad_floor)
                candidates.push_back(i);
        if (candidates.empty()) continue;
        std::vector<i64> coords;
        if (opt.max_coords_per_param <= 0 ||
            static_cast<i64>(candidates.size()) <= opt.max_coords_per_param) {
            coords = candidates;
        } else {
            std::unordered_set<size_t> seen;
            while (static_cast<int>(seen.size()) < opt.max_coords_per_param)
                seen.insert(static_cast<size_t>(rng.below(candidates.size())));
            for (size_t k : seen) coords.push_back(candidates[k]);
            std::sort(coords.begin(), coords.end());
        }
        T* vals = p.value.mut();
        for (i64 i : coords) {
            const T orig = vals[i];
            vals[i] = orig + static_cast<T>(epsilon);
            const double fp = static_cast<double>(f().item());
            vals[i] = orig - static_cast<T>(epsilon);
            const double fm = static_cast<double>(f().item());
            vals[i] = orig;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double a = static_cast<double>(analytic[pi][static_cast<size_t>(i)]);
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    for (auto* p : params) p->zero_grad();
    return max_rel;
}

}  // namespace pkdn
