#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "pkdn/parallel.hpp"
#include "pkdn/tensor.hpp"

namespace pkdn {

// Brings a parameter into the graph under the active tape. Repeated use in
// one pass shares a single leaf slot, so gradients from every path sum.
template <class T>
Tensor<T> use(Parameter<T>& p) {
    Tensor<T> t = p.value;
    if (Tape<T>* tape = active_tape<T>()) t.set_node(tape->leaf(p), tape->serial());
    return t;
}

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!(a.shape() == b.shape()))
        throw ValidationError(cat(op, ": shape mismatch ", a.shape().str(), " vs ", b.shape().str()));
}

template <class T, class Fn>
int maybe_record(const Tensor<T>& out_ref, Tape<T>* tape, bool any_parent, Fn&& bw) {
    if (!tape || !any_parent) return -1;
    return tape->record(out_ref.numel(), std::forward<Fn>(bw));
}

// pixel_shuffle data movement: (n, c*r^2, h, w) -> (n, c, h*r, w*r)
template <class T>
void shuffle_buf(const T* in, T* out, int n, int c_out, int h, int w, int r) {
    const i64 plane_in = i64(h) * w;
    const i64 h_out = i64(h) * r, w_out = i64(w) * r;
    const i64 plane_out = h_out * w_out;
    parallel_for(0, i64(n) * c_out, [&](i64 p) {
        const int nn = static_cast<int>(p / c_out);
        const int cc = static_cast<int>(p % c_out);
        T* dst = out + (i64(nn) * c_out + cc) * plane_out;
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < r; ++j) {
                const T* src = in + ((i64(nn) * c_out * r * r) + i64(cc) * r * r + i64(i) * r + j) * plane_in;
                for (int y = 0; y < h; ++y) {
                    T* drow = dst + (i64(y) * r + i) * w_out + j;
                    const T* srow = src + i64(y) * w;
                    for (int x = 0; x < w; ++x) drow[i64(x) * r] = srow[x];
                }
            }
        }
    }, 4);
}

// inverse movement: (n, c, h*r, w*r) -> (n, c*r^2, h, w)
template <class T>
void unshuffle_buf(const T* in, T* out, int n, int c_in, int h_out, int w_out, int r) {
    const i64 h_in = i64(h_out) * r, w_in = i64(w_out) * r;
    const i64 plane_in = h_in * w_in;
    const i64 plane_out = i64(h_out) * w_out;
    parallel_for(0, i64(n) * c_in, [&](i64 p) {
        const int nn = static_cast<int>(p / c_in);
        const int cc = static_cast<int>(p % c_in);
        const T* src = in + (i64(nn) * c_in + cc) * plane_in;
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < r; ++j) {
                T* dst = out + ((i64(nn) * c_in * r * r) + i64(cc) * r * r + i64(i) * r + j) * plane_out;
                for (int y = 0; y < h_out; ++y) {
                    const T* srow = src + (i64(y) * r + i) * w_in + j;
                    T* drow = dst + i64(y) * w_out;
                    for (int x = 0; x < w_out; ++x) drow[x] = srow[i64(x) * r];
                }
            }
        }
    }, 4);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise suite

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.mut();
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

    Tape<T>* tape = active_tape<T>();
    const int na = tape_node(tape, a), nb = tape_node(tape, b);
    out.set_node(detail::maybe_record(out, tape, na >= 0 || nb >= 0,
                                      [na, nb, n](Tape<T>& t, const std::vector<T>& g) {
                                          if (na >= 0) t.add_grad(na, g.data(), n);
                                          if (nb >= 0) t.add_grad(nb, g.data(), n);
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.mut();
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] - pb[i];

    Tape<T>* tape = active_tape<T>();
    const int na = tape_node(tape, a), nb = tape_node(tape, b);
    out.set_node(detail::maybe_record(out, tape, na >= 0 || nb >= 0,
                                      [na, nb, n](Tape<T>& t, const std::vector<T>& g) {
                                          if (na >= 0) t.add_grad(na, g.data(), n);
                                          if (nb >= 0) {
                                              auto& buf = t.grad_buf(nb);
                                              for (i64 i = 0; i < n; ++i) buf[size_t(i)] -= g[size_t(i)];
                                          }
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double s) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.mut();
    const i64 n = a.numel();
    const T sv = static_cast<T>(s);
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] * sv;

    Tape<T>* tape = active_tape<T>();
    const int na = tape_node(tape, a);
    out.set_node(detail::maybe_record(out, tape, na >= 0,
                                      [na, n, sv](Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(na);
                                          for (i64 i = 0; i < n; ++i) buf[size_t(i)] += sv * g[size_t(i)];
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.mut();
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);

    Tape<T>* tape = active_tape<T>();
    const int na = tape_node(tape, a);
    out.set_node(detail::maybe_record(out, tape, na >= 0,
                                      [na, n, a](Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(na);
                                          const T* px = a.data();
                                          for (i64 i = 0; i < n; ++i)
                                              if (px[i] > T(0)) buf[size_t(i)] += g[size_t(i)];
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.mut();
    const i64 n = a.numel();
    const T lo = std::numeric_limits<T>::min();
    const T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
    for (i64 i = 0; i < n; ++i) {
        const T y = T(1) / (T(1) + std::exp(-pa[i]));
        po[i] = std::min(hi, std::max(lo, y));
    }

    Tape<T>* tape = active_tape<T>();
    const int na = tape_node(tape, a);
    out.set_node(detail::maybe_record(out, tape, na >= 0,
                                      [na, n, out](Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(na);
                                          const T* py = out.data();
                                          for (i64 i = 0; i < n; ++i)
                                              buf[size_t(i)] += g[size_t(i)] * py[i] * (T(1) - py[i]);
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

// x * s with s broadcast from (n,c,1,1) (per-channel gate) or (n,1,h,w)
// (per-position gate).
template <class T>
Tensor<T> mul_broadcast(const Tensor<T>& x, const Tensor<T>& s) {
    const Shape xs = x.shape(), ss = s.shape();
    const bool channel_gate = ss.n == xs.n && ss.c == xs.c && ss.h == 1 && ss.w == 1;
    const bool spatial_gate = ss.n == xs.n && ss.c == 1 && ss.h == xs.h && ss.w == xs.w;
    if (!channel_gate && !spatial_gate)
        throw ValidationError(cat("mul_broadcast: gate shape ", ss.str(), " does not broadcast over ", xs.str()));

    Tensor<T> out(xs);
    const T* px = x.data();
    const T* ps = s.data();
    T* po = out.mut();
    const i64 plane = i64(xs.h) * xs.w;
    if (channel_gate) {
        for (i64 p = 0; p < i64(xs.n) * xs.c; ++p) {
            const T sv = ps[p];
            for (i64 i = 0; i < plane; ++i) po[p * plane + i] = px[p * plane + i] * sv;
        }
    } else {
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c) {
                const T* sp = ps + i64(n) * plane;
                T* op = po + (i64(n) * xs.c + c) * plane;
                const T* xp = px + (i64(n) * xs.c + c) * plane;
                for (i64 i = 0; i < plane; ++i) op[i] = xp[i] * sp[i];
            }
    }

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x), ns = tape_node(tape, s);
    out.set_node(detail::maybe_record(
                     out, tape, nx >= 0 || ns >= 0,
                     [nx, ns, x, s, xs, channel_gate, plane](Tape<T>& t, const std::vector<T>& g) {
                         const T* px = x.data();
                         const T* ps = s.data();
                         if (nx >= 0) {
                             auto& buf = t.grad_buf(nx);
                             if (channel_gate) {
                                 for (i64 p = 0; p < i64(xs.n) * xs.c; ++p) {
                                     const T sv = ps[p];
                                     for (i64 i = 0; i < plane; ++i)
                                         buf[size_t(p * plane + i)] += g[size_t(p * plane + i)] * sv;
                                 }
                             } else {
                                 for (int n = 0; n < xs.n; ++n)
                                     for (int c = 0; c < xs.c; ++c) {
                                         const T* sp = ps + i64(n) * plane;
                                         const i64 base = (i64(n) * xs.c + c) * plane;
                                         for (i64 i = 0; i < plane; ++i) buf[size_t(base + i)] += g[size_t(base + i)] * sp[i];
                                     }
                             }
                         }
                         if (ns >= 0) {
                             auto& buf = t.grad_buf(ns);
                             if (channel_gate) {
                                 for (i64 p = 0; p < i64(xs.n) * xs.c; ++p) {
                                     T acc = T(0);
                                     for (i64 i = 0; i < plane; ++i) acc += g[size_t(p * plane + i)] * px[p * plane + i];
                                     buf[size_t(p)] += acc;
                                 }
                             } else {
                                 for (int n = 0; n < xs.n; ++n)
                                     for (i64 i = 0; i < plane; ++i) {
                                         T acc = T(0);
                                         for (int c = 0; c < xs.c; ++c) {
                                             const i64 base = (i64(n) * xs.c + c) * plane;
                                             acc += g[size_t(base + i)] * px[base + i];
                                         }
                                         buf[size_t(i64(n) * plane + i)] += acc;
                                     }
                             }
                         }
                     }),
                 tape ? tape->serial() : 0);
    return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape as = a.shape(), bs = b.shape();
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
        throw ValidationError(cat("concat_channels: ", as.str(), " and ", bs.str(), " differ outside the channel axis"));
    Tensor<T> out({as.n, as.c + bs.c, as.h, as.w});
    const i64 plane = i64(as.h) * as.w;
    T* po = out.mut();
    for (int n = 0; n < as.n; ++n) {
        std::memcpy(po + (i64(n) * (as.c + bs.c)) * plane, a.data() + i64(n) * as.c * plane,
                    sizeof(T) * size_t(as.c * plane));
        std::memcpy(po + (i64(n) * (as.c + bs.c) + as.c) * plane, b.data() + i64(n) * bs.c * plane,
                    sizeof(T) * size_t(bs.c * plane));
    }

    Tape<T>* tape = active_tape<T>();
    const int na = tape_node(tape, a), nb = tape_node(tape, b);
    out.set_node(detail::maybe_record(out, tape, na >= 0 || nb >= 0,
                                      [na, nb, as, bs, plane](Tape<T>& t, const std::vector<T>& g) {
                                          if (na >= 0) {
                                              auto& buf = t.grad_buf(na);
                                              for (int n = 0; n < as.n; ++n)
                                                  for (i64 i = 0; i < i64(as.c) * plane; ++i)
                                                      buf[size_t(i64(n) * as.c * plane + i)] +=
                                                          g[size_t((i64(n) * (as.c + bs.c)) * plane + i)];
                                          }
                                          if (nb >= 0) {
                                              auto& buf = t.grad_buf(nb);
                                              for (int n = 0; n < bs.n; ++n)
                                                  for (i64 i = 0; i < i64(bs.c) * plane; ++i)
                                                      buf[size_t(i64(n) * bs.c * plane + i)] +=
                                                          g[size_t((i64(n) * (as.c + bs.c) + as.c) * plane + i)];
                                          }
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const Shape s = x.shape();
    if (x.numel() == 0) throw ValidationError("global_avg_pool: empty tensor");
    Tensor<T> out({s.n, s.c, 1, 1});
    const i64 plane = i64(s.h) * s.w;
    const T* px = x.data();
    T* po = out.mut();
    for (i64 p = 0; p < i64(s.n) * s.c; ++p) {
        T acc = T(0);
        for (i64 i = 0; i < plane; ++i) acc += px[p * plane + i];
        po[p] = acc / static_cast<T>(plane);
    }

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, s, plane](Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(nx);
                                          const T inv = T(1) / static_cast<T>(plane);
                                          for (i64 p = 0; p < i64(s.n) * s.c; ++p) {
                                              const T gv = g[size_t(p)] * inv;
                                              for (i64 i = 0; i < plane; ++i) buf[size_t(p * plane + i)] += gv;
                                          }
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

template <class T>
Tensor<T> channel_mean_map(const Tensor<T>& x) {
    const Shape s = x.shape();
    if (x.numel() == 0) throw ValidationError("channel_mean_map: empty tensor");
    Tensor<T> out({s.n, 1, s.h, s.w});
    const i64 plane = i64(s.h) * s.w;
    const T* px = x.data();
    T* po = out.mut();
    for (int n = 0; n < s.n; ++n)
        for (i64 i = 0; i < plane; ++i) {
            T acc = T(0);
            for (int c = 0; c < s.c; ++c) acc += px[(i64(n) * s.c + c) * plane + i];
            po[i64(n) * plane + i] = acc / static_cast<T>(s.c);
        }

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, s, plane](Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(nx);
                                          const T inv = T(1) / static_cast<T>(s.c);
                                          for (int n = 0; n < s.n; ++n)
                                              for (int c = 0; c < s.c; ++c)
                                                  for (i64 i = 0; i < plane; ++i)
                                                      buf[size_t((i64(n) * s.c + c) * plane + i)] +=
                                                          g[size_t(i64(n) * plane + i)] * inv;
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

// Max over channels; ties route the gradient to the lowest channel index.
template <class T>
Tensor<T> channel_max_map(const Tensor<T>& x) {
    const Shape s = x.shape();
    if (x.numel() == 0) throw ValidationError("channel_max_map: empty tensor");
    Tensor<T> out({s.n, 1, s.h, s.w});
    const i64 plane = i64(s.h) * s.w;
    const T* px = x.data();
    T* po = out.mut();
    auto arg = std::make_shared<std::vector<int>>(size_t(i64(s.n) * plane));
    for (int n = 0; n < s.n; ++n)
        for (i64 i = 0; i < plane; ++i) {
            T best = px[(i64(n) * s.c) * plane + i];
            int bc = 0;
            for (int c = 1; c < s.c; ++c) {
                const T v = px[(i64(n) * s.c + c) * plane + i];
                if (v > best) {
                    best = v;
                    bc = c;
                }
            }
            po[i64(n) * plane + i] = best;
            (*arg)[size_t(i64(n) * plane + i)] = bc;
        }

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, s, plane, arg](Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(nx);
                                          for (int n = 0; n < s.n; ++n)
                                              for (i64 i = 0; i < plane; ++i) {
                                                  const int c = (*arg)[size_t(i64(n) * plane + i)];
                                                  buf[size_t((i64(n) * s.c + c) * plane + i)] += g[size_t(i64(n) * plane + i)];
                                              }
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

// mean of |x| over every element; the L1 building block. sign(0) = 0.
template <class T>
Tensor<T> mean_abs(const Tensor<T>& x) {
    if (x.numel() == 0) throw ValidationError("mean_abs: empty tensor");
    const i64 n = x.numel();
    const T* px = x.data();
    T acc = T(0);
    for (i64 i = 0; i < n; ++i) acc += std::abs(px[i]);
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, n, x](Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(nx);
                                          const T* px = x.data();
                                          const T gv = g[0] / static_cast<T>(n);
                                          for (i64 i = 0; i < n; ++i) {
                                              if (px[i] > T(0))
                                                  buf[size_t(i)] += gv;
                                              else if (px[i] < T(0))
                                                  buf[size_t(i)] -= gv;
                                          }
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

// ---------------------------------------------------------------------------
// pixel shuffle pair

template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
    const Shape s = x.shape();
    if (r < 1) throw ValidationError(cat("pixel_shuffle: factor must be >= 1, got ", r));
    if (s.c % (r * r) != 0)
        throw ValidationError(cat("pixel_shuffle: channels ", s.c, " not divisible by r^2=", r * r));
    const int c_out = s.c / (r * r);
    Tensor<T> out({s.n, c_out, s.h * r, s.w * r});
    detail::shuffle_buf(x.data(), out.mut(), s.n, c_out, s.h, s.w, r);

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, s, c_out, r](Tape<T>& t, const std::vector<T>& g) {
                                          std::vector<T> dg(g.size());
                                          detail::unshuffle_buf(g.data(), dg.data(), s.n, c_out, s.h, s.w, r);
                                          t.add_grad(nx, dg.data(), static_cast<i64>(dg.size()));
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
    const Shape s = x.shape();
    if (r < 1) throw ValidationError(cat("pixel_unshuffle: factor must be >= 1, got ", r));
    if (s.h % r != 0 || s.w % r != 0)
        throw ValidationError(cat("pixel_unshuffle: spatial dims ", s.h, "x", s.w, " not divisible by r=", r));
    const int h_out = s.h / r, w_out = s.w / r;
    Tensor<T> out({s.n, s.c * r * r, h_out, w_out});
    detail::unshuffle_buf(x.data(), out.mut(), s.n, s.c, h_out, w_out, r);

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, s, h_out, w_out, r](Tape<T>& t, const std::vector<T>& g) {
                                          std::vector<T> dg(g.size());
                                          detail::shuffle_buf(g.data(), dg.data(), s.n, s.c, h_out, w_out, r);
                                          t.add_grad(nx, dg.data(), static_cast<i64>(dg.size()));
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

// ---------------------------------------------------------------------------
// nearest-neighbor resize

template <class T>
Tensor<T> nearest_resize(const Tensor<T>& x, int out_h, int out_w) {
    const Shape s = x.shape();
    if (out_h < 1 || out_w < 1)
        throw ValidationError(cat("nearest_resize: target ", out_h, "x", out_w, " must be >= 1"));
    Tensor<T> out({s.n, s.c, out_h, out_w});
    const T* px = x.data();
    T* po = out.mut();
    const i64 in_plane = i64(s.h) * s.w;
    const i64 out_plane = i64(out_h) * out_w;
    std::vector<int> src_y(static_cast<size_t>(out_h));
    std::vector<int> src_x(static_cast<size_t>(out_w));
    for (int i = 0; i < out_h; ++i) src_y[size_t(i)] = static_cast<int>((i64(i) * s.h) / out_h);
    for (int j = 0; j < out_w; ++j) src_x[size_t(j)] = static_cast<int>((i64(j) * s.w) / out_w);
    parallel_for(0, i64(s.n) * s.c, [&](i64 p) {
        const T* sp = px + p * in_plane;
        T* op = po + p * out_plane;
        for (int i = 0; i < out_h; ++i)
            for (int j = 0; j < out_w; ++j) op[i64(i) * out_w + j] = sp[i64(src_y[size_t(i)]) * s.w + src_x[size_t(j)]];
    }, 8);

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    out.set_node(detail::maybe_record(out, tape, nx >= 0,
                                      [nx, s, out_h, out_w, src_y, src_x, in_plane, out_plane](
                                          Tape<T>& t, const std::vector<T>& g) {
                                          auto& buf = t.grad_buf(nx);
                                          for (i64 p = 0; p < i64(s.n) * s.c; ++p)
                                              for (int i = 0; i < out_h; ++i)
                                                  for (int j = 0; j < out_w; ++j)
                                                      buf[size_t(p * in_plane + i64(src_y[size_t(i)]) * s.w +
                                                                 src_x[size_t(j)])] +=
                                                          g[size_t(p * out_plane + i64(i) * out_w + j)];
                                      }),
                 tape ? tape->serial() : 0);
    return out;
}

// ---------------------------------------------------------------------------
// convolution

// Zero-padded square-kernel conv. Gradient passes are written as gathers so
// each output location is owned by one loop index and can run in parallel.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int padding) {
    const Shape xs = x.shape(), ws = w.shape(), bs = b.shape();
    if (ws.h != ws.w) throw ValidationError(cat("conv2d: kernel must be square, got ", ws.h, "x", ws.w));
    if (ws.h % 2 == 0) throw ValidationError(cat("conv2d: kernel size must be odd, got ", ws.h));
    if (xs.c != ws.c)
        throw ValidationError(cat("conv2d: input channels ", xs.c, " do not match kernel in_c ", ws.c));
    if (!(bs == Shape{1, ws.n, 1, 1}))
        throw ValidationError(cat("conv2d: bias shape ", bs.str(), " must be (1,", ws.n, ",1,1)"));
    if (stride < 1) throw ValidationError(cat("conv2d: stride must be >= 1, got ", stride));
    if (padding < 0) throw ValidationError(cat("conv2d: padding must be >= 0, got ", padding));

    const int K = ws.h, Cin = xs.c, Cout = ws.n, H = xs.h, W = xs.w;
    const int Ho = (H + 2 * padding - K) / stride + 1;
    const int Wo = (W + 2 * padding - K) / stride + 1;
    if (Ho < 1 || Wo < 1)
        throw ValidationError(cat("conv2d: output ", Ho, "x", Wo, " is empty for input ", xs.str()));

    Tensor<T> out({xs.n, Cout, Ho, Wo});
    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = b.data();
    T* po = out.mut();

    parallel_for(0, i64(xs.n) * Cout, [&](i64 plane) {
        const int n = static_cast<int>(plane / Cout);
        const int co = static_cast<int>(plane % Cout);
        T* op = po + plane * Ho * Wo;
        const T bias = pb[co];
        for (int ho = 0; ho < Ho; ++ho) {
            const int hi0 = ho * stride - padding;
            const int kh_lo = std::max(0, -hi0);
            const int kh_hi = std::min(K, H - hi0);
            for (int wo = 0; wo < Wo; ++wo) {
                const int wi0 = wo * stride - padding;
                const int kw_lo = std::max(0, -wi0);
                const int kw_hi = std::min(K, W - wi0);
                T acc = bias;
                for (int ci = 0; ci < Cin; ++ci) {
                    const T* xp = px + (i64(n) * Cin + ci) * H * W;
                    const T* wp = pw + (i64(co) * Cin + ci) * K * K;
                    for (int kh = kh_lo; kh < kh_hi; ++kh) {
                        const T* xrow = xp + i64(hi0 + kh) * W + wi0;
                        const T* wrow = wp + i64(kh) * K;
                        for (int kw = kw_lo; kw < kw_hi; ++kw) acc += xrow[kw] * wrow[kw];
                    }
                }
                op[i64(ho) * Wo + wo] = acc;
            }
        }
    }, 2);

    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x), nw = tape_node(tape, w), nb = tape_node(tape, b);
    if (tape && (nx >= 0 || nw >= 0 || nb >= 0)) {
        const Shape os = out.shape();
        auto bw = [nx, nw, nb, x, w, xs, ws, os, stride, padding, K, Cin, Cout, H, W, Ho, Wo](
                      Tape<T>& t, const std::vector<T>& g) {
            const T* px = x.data();
            const T* pw = w.data();
            if (nx >= 0) {
                std::vector<T> dx(size_t(x.numel()), T(0));
                parallel_for(0, i64(xs.n) * Cin, [&](i64 plane) {
                    const int n = static_cast<int>(plane / Cin);
                    const int ci = static_cast<int>(plane % Cin);
                    T* dxp = dx.data() + plane * H * W;
                    for (int hi = 0; hi < H; ++hi)
                        for (int wi = 0; wi < W; ++wi) {
                            T acc = T(0);
                            for (int kh = 0; kh < K; ++kh) {
                                const int ho_num = hi + padding - kh;
                                if (ho_num < 0 || ho_num % stride != 0) continue;
                                const int ho = ho_num / stride;
                                if (ho >= Ho) continue;
                                for (int kw = 0; kw < K; ++kw) {
                                    const int wo_num = wi + padding - kw;
                                    if (wo_num < 0 || wo_num % stride != 0) continue;
                                    const int wo = wo_num / stride;
                                    if (wo >= Wo) continue;
                                    for (int co = 0; co < Cout; ++co)
                                        acc += pw[((i64(co) * Cin + ci) * K + kh) * K + kw] *
                                               g[size_t(((i64(n) * Cout + co) * Ho + ho) * Wo + wo)];
                                }
                            }
                            dxp[i64(hi) * W + wi] = acc;
                        }
                }, 2);
                t.add_grad(nx, dx.data(), x.numel());
            }
            if (nw >= 0) {
                std::vector<T> dw(size_t(w.numel()), T(0));
                parallel_for(0, i64(Cout) * Cin, [&](i64 pair) {
                    const int co = static_cast<int>(pair / Cin);
                    const int ci = static_cast<int>(pair % Cin);
                    T* dwp = dw.data() + pair * K * K;
                    for (int kh = 0; kh < K; ++kh)
                        for (int kw = 0; kw < K; ++kw) {
                            T acc = T(0);
                            for (int n = 0; n < xs.n; ++n) {
                                const T* xp = px + (i64(n) * Cin + ci) * H * W;
                                const T* gp = g.data() + (i64(n) * Cout + co) * Ho * Wo;
                                for (int ho = 0; ho < Ho; ++ho) {
                                    const int hi = ho * stride - padding + kh;
                                    if (hi < 0 || hi >= H) continue;
                                    for (int wo = 0; wo < Wo; ++wo) {
                                        const int wi = wo * stride - padding + kw;
                                        if (wi < 0 || wi >= W) continue;
                                        acc += xp[i64(hi) * W + wi] * gp[i64(ho) * Wo + wo];
                                    }
                                }
                            }
                            dwp[i64(kh) * K + kw] = acc;
                        }
                }, 1);
                t.add_grad(nw, dw.data(), w.numel());
            }
            if (nb >= 0) {
                std::vector<T> db(size_t(Cout), T(0));
                for (int n = 0; n < os.n; ++n)
                    for (int co = 0; co < Cout; ++co) {
                        const T* gp = g.data() + (i64(n) * Cout + co) * Ho * Wo;
                        T acc = T(0);
                        for (i64 i = 0; i < i64(Ho) * Wo; ++i) acc += gp[i];
                        db[size_t(co)] += acc;
                    }
                t.add_grad(nb, db.data(), Cout);
            }
        };
        out.set_node(tape->record(out.numel(), std::move(bw)), tape->serial());
    }
    return out;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, Parameter<T>& w, Parameter<T>& b, int stride, int padding) {
    return conv2d(x, use(w), use(b), stride, padding);
}

}  // namespace pkdn
