#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>

#include "pkdn/data.hpp"
#include "pkdn/network.hpp"

namespace pkdn {

struct LossBreakdown {
    double l_sr = 0.0;
    double l_ts = 0.0;
    double l_fs = 0.0;
    double total = 0.0;
};

template <class T>
Tensor<T> teacher_loss(const Tensor<T>& sr_t, const Tensor<T>& hr) {
    detail::require_same_shape(sr_t, hr, "teacher_loss");
    return mean_abs(sub(sr_t, hr));
}

template <class T>
struct StudentLoss {
    Tensor<T> total;
    LossBreakdown parts;
};

// L_S = L_SR + lambda_TS * L_TS + lambda_FS * L_FS. Teacher outputs and taps
// enter as constants; only the student side carries graph nodes.
template <class T>
StudentLoss<T> student_loss(const Tensor<T>& sr_s, const Tensor<T>& hr, const Tensor<T>& sr_t,
                            const std::vector<Tensor<T>>& taps_t, const std::vector<Tensor<T>>& taps_s,
                            double lambda_ts, double lambda_fs) {
    detail::require_same_shape(sr_s, hr, "student_loss(sr,hr)");
    detail::require_same_shape(sr_t, sr_s, "student_loss(teacher sr,student sr)");
    if (taps_t.size() != taps_s.size())
        throw ValidationError(cat("student_loss: tap count mismatch, teacher ", taps_t.size(), " vs student ",
                                  taps_s.size()));
    StudentLoss<T> out;
    Tensor<T> l_sr = mean_abs(sub(sr_s, hr));
    Tensor<T> l_ts = mean_abs(sub(sr_t, sr_s));
    Tensor<T> l_fs = Tensor<T>::scalar(T(0));
    for (size_t i = 0; i < taps_t.size(); ++i) {
        if (!(taps_t[i].shape() == taps_s[i].shape()))
            throw ValidationError(cat("student_loss: tap ", i, " shape mismatch ", taps_t[i].shape().str(),
                                      " vs ", taps_s[i].shape().str()));
        l_fs = add(l_fs, mean_abs(sub(taps_t[i], taps_s[i])));
    }
    if (!taps_t.empty()) l_fs = scale(l_fs, 1.0 / static_cast<double>(taps_t.size()));
    out.total = add(l_sr, add(scale(l_ts, lambda_ts), scale(l_fs, lambda_fs)));
    out.parts.l_sr = static_cast<double>(l_sr.item());
    out.parts.l_ts = static_cast<double>(l_ts.item());
    out.parts.l_fs = static_cast<double>(l_fs.item());
    out.parts.total = static_cast<double>(out.total.item());
    return out;
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over every registered parameter; zeroes grads after
// the update. `t` is the 1-based step count.
template <class T>
void adam_step(ParamRegistry<T>& params, const AdamConfig& cfg, i64 t) {
    if (t < 1) throw ValidationError("adam_step: step count must be >= 1");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (const auto& [name, p] : params.entries()) {
        T* val = p->value.mut();
        const i64 n = p->numel();
        for (i64 i = 0; i < n; ++i) {
            const double g = static_cast<double>(p->grad[size_t(i)]);
            if (!std::isfinite(g))
                throw Error(cat("adam_step: non-finite gradient in parameter '", name, "' at element ", i));
            const double m = cfg.beta1 * static_cast<double>(p->m[size_t(i)]) + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * static_cast<double>(p->v[size_t(i)]) + (1.0 - cfg.beta2) * g * g;
            p->m[size_t(i)] = static_cast<T>(m);
            p->v[size_t(i)] = static_cast<T>(v);
            val[i] = static_cast<T>(static_cast<double>(val[i]) -
                                    cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps));
            p->grad[size_t(i)] = T(0);
        }
    }
}

struct TrainConfig {
    AdamConfig adam;
    int batch_size = 4;
    i64 steps = 2000;
    u64 data_seed = 1;
    i64 ckpt_every = 500;
    std::string run_dir;          // empty: no checkpoint files
    std::ostream* log = nullptr;  // TSV: step l_sr l_ts l_fs total wall_ms
    i64 start_step = 0;           // resume point
};

struct TrainState {
    i64 step = 0;
    u64 data_seed = 0;
    std::vector<LossBreakdown> history;  // records for steps start..steps inclusive
};

template <class T>
struct Batch {
    Tensor<T> lr, hr, parsing;
};

template <class To, class From>
Tensor<To> cast_tensor(const Tensor<From>& src) {
    Tensor<To> out(src.shape());
    To* po = out.mut();
    const From* ps = src.data();
    for (i64 i = 0; i < src.numel(); ++i) po[i] = static_cast<To>(ps[i]);
    return out;
}

namespace detail {

template <class T>
Tensor<T> stack_cast(const std::vector<Tensor64>& parts) {
    const Shape s0 = parts.front().shape();
    Tensor<T> out({static_cast<int>(parts.size()) * s0.n, s0.c, s0.h, s0.w});
    T* po = out.mut();
    i64 at = 0;
    for (const auto& part : parts) {
        if (!(part.shape() == s0))
            throw Error(cat("batch assembly: sample shape drift, ", part.shape().str(), " vs ", s0.str()));
        const double* ps = part.data();
        for (i64 i = 0; i < part.numel(); ++i) po[at + i] = static_cast<T>(ps[i]);
        at += part.numel();
    }
    return out;
}

inline void log_record(std::ostream* log, i64 step, const LossBreakdown& lb, double wall_ms) {
    if (!log) return;
    (*log) << step << '\t' << std::setprecision(10) << lb.l_sr << '\t' << lb.l_ts << '\t' << lb.l_fs << '\t'
           << lb.total << '\t' << std::llround(wall_ms) << '\n';
    log->flush();
}

}  // namespace detail

// Deterministic batch for a global step: per-epoch shuffled order, sequential
// slots within the epoch.
template <class T>
Batch<T> batch_at(const Dataset& ds, int batch_size, u64 seed, i64 step) {
    const auto idx = batch_indices(ds.size(), batch_size, seed, step);
    std::vector<Tensor64> lr, hr, parsing;
    for (size_t i : idx) {
        Sample s = ds.get(i);
        lr.push_back(std::move(s.lr));
        hr.push_back(std::move(s.hr));
        parsing.push_back(std::move(s.parsing));
    }
    return Batch<T>{detail::stack_cast<T>(lr), detail::stack_cast<T>(hr), detail::stack_cast<T>(parsing)};
}

namespace detail {

template <class T>
void maybe_checkpoint(const Network<T>& net, const TrainConfig& tc, i64 completed_steps) {
    if (tc.run_dir.empty() || tc.ckpt_every < 1) return;
    if (completed_steps % tc.ckpt_every != 0) return;
    const TrainExtras extras{completed_steps, tc.data_seed};
    checkpoint_save(net, (std::filesystem::path(tc.run_dir) / cat("ckpt_", completed_steps, ".pkdn")).string(),
                    &extras);
}

}  // namespace detail

// Stage one: minimize the L1 reconstruction loss of the (parsing-guided)
// teacher. Records a loss entry per step computed before that step's update,
// plus a final entry at `steps` with the trained weights.
template <class T>
TrainState train_teacher(Network<T>& net, const Dataset& ds, const TrainConfig& tc) {
    if (net.frozen()) throw ValidationError("train_teacher: network is frozen");
    TrainState state;
    state.data_seed = tc.data_seed;
    net.params().zero_grad_all();
    for (i64 s = tc.start_step; s <= tc.steps; ++s) {
        const auto t0 = std::chrono::steady_clock::now();
        Batch<T> batch = batch_at<T>(ds, tc.batch_size, tc.data_seed, s);
        LossBreakdown lb;
        if (s < tc.steps) {
            Tape<T> tape;
            TapeScope<T> scope(tape);
            ForwardResult<T> fr = net.forward(batch.lr, net.needs_parsing() ? &batch.parsing : nullptr);
            Tensor<T> loss = teacher_loss(fr.sr, batch.hr);
            lb.l_sr = lb.total = static_cast<double>(loss.item());
            if (!std::isfinite(lb.total)) throw Error(cat("train_teacher: non-finite loss at step ", s));
            backward(loss);
            adam_step(net.params(), tc.adam, s + 1);
        } else {
            ForwardResult<T> fr = net.forward(batch.lr, net.needs_parsing() ? &batch.parsing : nullptr);
            lb.l_sr = lb.total = static_cast<double>(teacher_loss(fr.sr, batch.hr).item());
        }
        const double wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        state.history.push_back(lb);
        state.step = s;
        detail::log_record(tc.log, s, lb, wall_ms);
        if (s < tc.steps) detail::maybe_checkpoint(net, tc, s + 1);
    }
    if (!tc.run_dir.empty()) {
        const TrainExtras extras{tc.steps, tc.data_seed};
        checkpoint_save(net, (std::filesystem::path(tc.run_dir) / "final.pkdn").string(), &extras);
    }
    return state;
}

// Stage two: the frozen teacher supervises the student through output and
// intermediate-feature losses. The parsing map feeds the teacher only.
template <class T>
TrainState train_student(Network<T>& student, const Network<T>& teacher, const Dataset& ds,
                         const TrainConfig& tc) {
    if (!teacher.frozen())
        throw ValidationError("train_student: teacher must be frozen (call freeze() after loading)");
    if (student.frozen()) throw ValidationError("train_student: student network is frozen");
    if (!(teacher.config().stages == student.config().stages &&
          teacher.config().base_channels == student.config().base_channels &&
          teacher.config().scale == student.config().scale))
        throw ValidationError("train_student: teacher and student configs are not tap-congruent");
    const double lambda_ts = student.config().lambda_ts;
    const double lambda_fs = student.config().lambda_fs;
    TrainState state;
    state.data_seed = tc.data_seed;
    student.params().zero_grad_all();
    for (i64 s = tc.start_step; s <= tc.steps; ++s) {
        const auto t0 = std::chrono::steady_clock::now();
        Batch<T> batch = batch_at<T>(ds, tc.batch_size, tc.data_seed, s);
        ForwardResult<T> fr_t;
        {
            NoGradScope<T> no_grad;
            fr_t = teacher.forward(batch.lr, teacher.needs_parsing() ? &batch.parsing : nullptr);
        }
        LossBreakdown lb;
        if (s < tc.steps) {
            Tape<T> tape;
            TapeScope<T> scope(tape);
            ForwardResult<T> fr_s = student.forward(batch.lr, nullptr);
            StudentLoss<T> sl = student_loss(fr_s.sr, batch.hr, fr_t.sr, fr_t.taps, fr_s.taps, lambda_ts,
                                             lambda_fs);
            lb = sl.parts;
            if (!std::isfinite(lb.total)) throw Error(cat("train_student: non-finite loss at step ", s));
            backward(sl.total);
            adam_step(student.params(), tc.adam, s + 1);
        } else {
            ForwardResult<T> fr_s = student.forward(batch.lr, nullptr);
            lb = student_loss(fr_s.sr, batch.hr, fr_t.sr, fr_t.taps, fr_s.taps, lambda_ts, lambda_fs).parts;
        }
        const double wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        state.history.push_back(lb);
        state.step = s;
        detail::log_record(tc.log, s, lb, wall_ms);
        if (s < tc.steps) detail::maybe_checkpoint(student, tc, s + 1);
    }
    if (!tc.run_dir.empty()) {
        const TrainExtras extras{tc.steps, tc.data_seed};
        checkpoint_save(student, (std::filesystem::path(tc.run_dir) / "final.pkdn").string(), &extras);
    }
    return state;
}

}  // namespace pkdn
