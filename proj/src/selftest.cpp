#include "pkdn/selftest.hpp"

#include <functional>
#include <iomanip>

#include "pkdn/gradcheck.hpp"
#include "pkdn/network.hpp"
#include "pkdn/trainer.hpp"

namespace pkdn {

namespace {

using T = double;  // the whole suite runs in 64-bit mode
constexpr double kFdTol = 1e-5;
constexpr double kEps = 1e-6;

Tensor<T> rand_tensor(Shape s, Rng& rng, double lo, double hi) {
    Tensor<T> t(s);
    T* p = t.mut();
    for (i64 i = 0; i < t.numel(); ++i) p[i] = rng.uniform(lo, hi);
    return t;
}

// Values in +-[0.2, 1.0]: random sign, magnitude away from the |.| kink.
Tensor<T> rand_signed(Shape s, Rng& rng) {
    Tensor<T> t(s);
    T* p = t.mut();
    for (i64 i = 0; i < t.numel(); ++i) {
        const double m = rng.uniform(0.2, 1.0);
        p[i] = rng.uniform() < 0.5 ? -m : m;
    }
    return t;
}

class Suite {
public:
    Suite(std::ostream& out) : out_(out) {}

    void check_fd(const std::string& name, double max_rel, double tol = kFdTol) {
        const bool pass = max_rel <= tol;
        report(name, pass, cat("max_rel=", std::scientific, std::setprecision(2), max_rel));
    }

    void check(const std::string& name, bool pass, const std::string& note = "") { report(name, pass, note); }

    int failures() const { return failures_; }

private:
    void report(const std::string& name, bool pass, const std::string& note) {
        out_ << (pass ? "  [ok] " : "[FAIL] ") << std::left << std::setw(44) << name << ' ' << note << '\n';
        if (!pass) ++failures_;
    }

    std::ostream& out_;
    int failures_ = 0;
};

// FD over an op applied to parameter-wrapped inputs, read out through a
// fixed random linear functional.
double fd_op(Rng& rng, std::vector<Parameter<T>*> params, Shape out_shape,
             const std::function<Tensor<T>()>& apply, double grad_floor = 0.0) {
    const Tensor<T> r = rand_signed(out_shape, rng);
    auto f = [&]() { return dot_readout(apply(), r); };
    FdOptions opt;
    opt.min_grad_floor = grad_floor;
    return finite_diff_check<T>(f, params, kEps, opt);
}

void op_checks(Suite& suite, Rng& rng) {
    {
        Parameter<T> x(rand_signed({2, 3, 5, 5}, rng));
        Parameter<T> w(rand_signed({4, 3, 3, 3}, rng));
        Parameter<T> b(rand_signed({1, 4, 1, 1}, rng));
        std::vector<Parameter<T>*> ps{&x, &w, &b};
        suite.check_fd("op.conv2d", fd_op(rng, ps, {2, 4, 5, 5},
                                          [&] { return conv2d(use(x), use(w), use(b), 1, 1); }));
        suite.check_fd("op.conv2d_relu", fd_op(rng, ps, {2, 4, 5, 5}, [&] {
                           return relu(conv2d(use(x), use(w), use(b), 1, 1));
                       }));
    }
    {
        Parameter<T> x(rand_signed({2, 3, 6, 6}, rng));
        Parameter<T> w(rand_signed({4, 3, 3, 3}, rng));
        Parameter<T> b(rand_signed({1, 4, 1, 1}, rng));
        std::vector<Parameter<T>*> ps{&x, &w, &b};
        suite.check_fd("op.conv2d_stride2", fd_op(rng, ps, {2, 4, 3, 3},
                                                  [&] { return conv2d(use(x), use(w), use(b), 2, 1); }));
    }
    {
        Parameter<T> x(rand_signed({1, 8, 3, 3}, rng));
        std::vector<Parameter<T>*> ps{&x};
        suite.check_fd("op.pixel_shuffle", fd_op(rng, ps, {1, 2, 6, 6}, [&] { return pixel_shuffle(use(x), 2); }));
    }
    {
        Parameter<T> x(rand_signed({1, 2, 6, 6}, rng));
        std::vector<Parameter<T>*> ps{&x};
        suite.check_fd("op.pixel_unshuffle",
                       fd_op(rng, ps, {1, 8, 3, 3}, [&] { return pixel_unshuffle(use(x), 2); }));
    }
    {
        Parameter<T> x(rand_signed({1, 3, 4, 4}, rng));
        std::vector<Parameter<T>*> ps{&x};
        suite.check_fd("op.nearest_resize_up",
                       fd_op(rng, ps, {1, 3, 7, 9}, [&] { return nearest_resize(use(x), 7, 9); }));
        suite.check_fd("op.nearest_resize_down",
                       fd_op(rng, ps, {1, 3, 2, 2}, [&] { return nearest_resize(use(x), 2, 2); }));
    }
    {
        Parameter<T> x(rand_signed({1, 3, 4, 4}, rng));
        std::vector<Parameter<T>*> ps{&x};
        suite.check_fd("op.bicubic_upsample",
                       fd_op(rng, ps, {1, 3, 16, 16}, [&] { return bicubic_upsample(use(x), 16, 16); }));
    }
    {
        Parameter<T> a(rand_signed({2, 3, 4, 4}, rng));
        Parameter<T> b(rand_signed({2, 3, 4, 4}, rng));
        std::vector<Parameter<T>*> ps{&a, &b};
        suite.check_fd("op.add_sub_scale", fd_op(rng, ps, {2, 3, 4, 4}, [&] {
                           return scale(add(use(a), sub(use(a), use(b))), 0.7);
                       }));
    }
    {
        Parameter<T> x(rand_signed({2, 4, 3, 3}, rng));
        Parameter<T> s(rand_signed({2, 4, 1, 1}, rng));
        std::vector<Parameter<T>*> ps{&x, &s};
        suite.check_fd("op.mul_broadcast_channel",
                       fd_op(rng, ps, {2, 4, 3, 3}, [&] { return mul_broadcast(use(x), use(s)); }));
    }
    {
        Parameter<T> x(rand_signed({2, 4, 3, 3}, rng));
        Parameter<T> s(rand_signed({2, 1, 3, 3}, rng));
        std::vector<Parameter<T>*> ps{&x, &s};
        suite.check_fd("op.mul_broadcast_spatial",
                       fd_op(rng, ps, {2, 4, 3, 3}, [&] { return mul_broadcast(use(x), use(s)); }));
    }
    {
        Parameter<T> x(rand_signed({2, 3, 4, 4}, rng));
        std::vector<Parameter<T>*> ps{&x};
        suite.check_fd("op.relu", fd_op(rng, ps, {2, 3, 4, 4}, [&] { return relu(use(x)); }));
        suite.check_fd("op.sigmoid", fd_op(rng, ps, {2, 3, 4, 4}, [&] { return sigmoid(use(x)); }));
    }
    {
        Parameter<T> a(rand_signed({1, 2, 4, 4}, rng));
        Parameter<T> b(rand_signed({1, 3, 4, 4}, rng));
        std::vector<Parameter<T>*> ps{&a, &b};
        suite.check_fd("op.concat_channels",
                       fd_op(rng, ps, {1, 5, 4, 4}, [&] { return concat_channels(use(a), use(b)); }));
    }
    {
        Parameter<T> x(rand_signed({2, 4, 5, 5}, rng));
        std::vector<Parameter<T>*> ps{&x};
        suite.check_fd("op.global_avg_pool",
                       fd_op(rng, ps, {2, 4, 1, 1}, [&] { return global_avg_pool(use(x)); }));
        suite.check_fd("op.channel_mean_map",
                       fd_op(rng, ps, {2, 1, 5, 5}, [&] { return channel_mean_map(use(x)); }));
        suite.check_fd("op.channel_max_map",
                       fd_op(rng, ps, {2, 1, 5, 5}, [&] { return channel_max_map(use(x)); }));
        suite.check_fd("op.mean_abs",
                       finite_diff_check<T>([&] { return mean_abs(use(x)); }, std::array{&x}, kEps));
    }
    {
        // Linear functional: central differences are exact up to rounding.
        Parameter<T> w(rand_signed({1, 1, 3, 3}, rng));
        const double rel =
            finite_diff_check<T>([&] { return global_avg_pool(use(w)); }, std::array{&w}, kEps);
        suite.check_fd("op.fd_linear_exact", rel, 1e-9);
    }
}

void invariant_checks(Suite& suite, Rng& rng) {
    for (const int r : {2, 4}) {
        const Tensor<T> x = rand_signed({2, 2 * r * r, 3, 5}, rng);
        const Tensor<T> rt = pixel_unshuffle(pixel_shuffle(x, r), r);
        bool exact = true;
        for (i64 i = 0; i < x.numel(); ++i) exact = exact && x.data()[i] == rt.data()[i];
        const Tensor<T> y = rand_signed({1, 3, 4 * r, 4 * r}, rng);
        const Tensor<T> rt2 = pixel_shuffle(pixel_unshuffle(y, r), r);
        for (i64 i = 0; i < y.numel(); ++i) exact = exact && y.data()[i] == rt2.data()[i];
        suite.check(cat("inv.shuffle_roundtrip_r", r), exact);
    }
    {
        const Tensor<T> x = rand_signed({2, 3, 5, 5}, rng);
        Tensor<T> w({3, 3, 1, 1});
        T* pw = w.mut();
        for (int i = 0; i < 3; ++i) pw[i * 3 + i] = 1.0;
        const Tensor<T> b({1, 3, 1, 1});
        const Tensor<T> y = conv2d(x, w, b, 1, 0);
        bool exact = true;
        for (i64 i = 0; i < x.numel(); ++i) exact = exact && x.data()[i] == y.data()[i];
        suite.check("inv.conv_identity_kernel", exact);
    }
    {
        const Tensor<T> x = rand_signed({1, 2, 3, 3}, rng);
        const Tensor<T> z({1, 2, 3, 3});
        suite.check("inv.mean_abs_positive",
                    mean_abs(x).item() > 0.0 && mean_abs(z).item() == 0.0);
        const Tensor<T> sg = sigmoid(rand_tensor({1, 1, 8, 8}, rng, -60.0, 60.0));
        bool open_interval = true;
        for (i64 i = 0; i < sg.numel(); ++i)
            open_interval = open_interval && sg.data()[i] > 0.0 && sg.data()[i] < 1.0;
        suite.check("inv.sigmoid_open_interval", open_interval);
    }
}

void block_checks(Suite& suite, Rng& rng) {
    BlockConfig bc{8, 4, 7, 2};
    const int n_classes = 4;

    auto collect = [](ParamRegistry<T>& reg) {
        std::vector<Parameter<T>*> out;
        for (auto& [name, p] : reg.entries()) out.push_back(p);
        return out;
    };

    {
        ParamRegistry<T> reg;
        auto ca = ChannelAttention<T>::make(reg, "ca", bc, rng);
        Parameter<T> x(rand_signed({2, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        suite.check_fd("block.channel_attention",
                       fd_op(rng, ps, {2, 8, 6, 6}, [&] { return ca(use(x)); }, 1e-3));
        reg.fill_values(0);
        const Tensor<T> y = ca(x.value);
        bool half = true;
        for (i64 i = 0; i < y.numel(); ++i) half = half && y.data()[i] == 0.5 * x.value.data()[i];
        suite.check("block.channel_attention.zero_gate", half);
    }
    {
        ParamRegistry<T> reg;
        auto sa = SpatialAttention<T>::make(reg, "sa", bc, rng);
        Parameter<T> x(rand_signed({2, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        suite.check_fd("block.spatial_attention",
                       fd_op(rng, ps, {2, 8, 6, 6}, [&] { return sa(use(x)); }, 1e-3));
        reg.fill_values(0);
        const Tensor<T> y = sa(x.value);
        bool half = true;
        for (i64 i = 0; i < y.numel(); ++i) half = half && y.data()[i] == 0.5 * x.value.data()[i];
        suite.check("block.spatial_attention.zero_gate", half);
    }
    {
        ParamRegistry<T> reg;
        auto rcab = Rcab<T>::make(reg, "rcab", bc, rng);
        Parameter<T> x(rand_signed({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        suite.check_fd("block.rcab", fd_op(rng, ps, {1, 8, 6, 6}, [&] { return rcab(use(x)); }, 1e-3));
        reg.fill_values(0);
        const Tensor<T> y = rcab(x.value);
        bool identity = true;
        for (i64 i = 0; i < y.numel(); ++i) identity = identity && y.data()[i] == x.value.data()[i];
        suite.check("block.rcab.zero_identity", identity);
    }
    {
        ParamRegistry<T> reg;
        auto rcag = Rcag<T>::make(reg, "rcag", bc, rng);
        Parameter<T> x(rand_signed({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        suite.check_fd("block.rcag", fd_op(rng, ps, {1, 8, 6, 6}, [&] { return rcag(use(x)); }, 1e-3));
        reg.fill_values(0);
        const Tensor<T> y = rcag(x.value);
        bool identity = true;
        for (i64 i = 0; i < y.numel(); ++i) identity = identity && y.data()[i] == x.value.data()[i];
        suite.check("block.rcag.zero_identity", identity);
    }
    {
        ParamRegistry<T> reg;
        auto pf = ProjectionFunction<T>::make(reg, "pf", bc, rng);
        Parameter<T> x(rand_signed({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        suite.check_fd("block.projection_function",
                       fd_op(rng, ps, {1, 8, 6, 6}, [&] { return pf(use(x)); }, 1e-3));
    }
    {
        ParamRegistry<T> reg;
        auto ffb = Ffb<T>::make(reg, "ffb", bc, rng);
        Parameter<T> f(rand_signed({1, 8, 6, 6}, rng));
        Parameter<T> fp(rand_signed({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&f);
        ps.push_back(&fp);
        suite.check_fd("block.ffb",
                       fd_op(rng, ps, {1, 8, 6, 6}, [&] { return ffb(use(f), use(fp)); }, 1e-3));
        reg.fill_values(0);
        const Tensor<T> y = ffb(f.value, f.value);
        bool half = true;
        for (i64 i = 0; i < y.numel(); ++i) half = half && y.data()[i] == 0.5 * f.value.data()[i];
        suite.check("block.ffb.zero_half_gate", half);
    }
    {
        ParamRegistry<T> reg;
        auto pfb = Pfb<T>::make(reg, "pfb", bc, n_classes, rng);
        Parameter<T> f(rand_signed({1, 8, 16, 16}, rng));
        Parameter<T> parsing(rand_tensor({1, n_classes, 8, 8}, rng, 0.0, 1.0));
        auto ps = collect(reg);
        ps.push_back(&f);
        ps.push_back(&parsing);
        suite.check_fd("block.pfb",
                       fd_op(rng, ps, {1, 8, 16, 16}, [&] { return pfb(use(f), use(parsing)); }, 1e-3));
        reg.fill_values(0);
        const Tensor<T> y = pfb(f.value, parsing.value);
        bool identity = true;
        for (i64 i = 0; i < y.numel(); ++i) identity = identity && y.data()[i] == f.value.data()[i];
        suite.check("block.pfb.zero_identity", identity);
    }
    {
        ParamRegistry<T> reg;
        auto down = DownsampleBlock<T>::make(reg, "down", bc, rng);
        Parameter<T> x(rand_signed({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        suite.check_fd("block.downsample_block",
                       fd_op(rng, ps, {1, 8, 3, 3}, [&] { return down(use(x)); }, 1e-3));
    }
    {
        ParamRegistry<T> reg;
        auto up = UpsampleBlock<T>::make(reg, "up", bc, rng);
        Parameter<T> x(rand_signed({1, 8, 3, 3}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        suite.check_fd("block.upsample_block",
                       fd_op(rng, ps, {1, 8, 6, 6}, [&] { return up(use(x)); }, 1e-3));
    }
}

NetConfig toy_config() {
    NetConfig cfg;
    cfg.base_channels = 8;
    cfg.stages = 2;
    cfg.scale = 4;
    cfg.n_classes = 4;
    cfg.element_mode = ElemMode::f64;
    return cfg;
}

// Reshapes a freshly built network into a finite-difference fixture: weights
// scaled down so residual cascades stay at O(1) magnitudes (full-size Kaiming
// grows curvature past what a central difference can follow), and biases
// randomized away from zero so no relu preactivation cluster sits on its
// kink. Training networks keep the production init; this is the "input
// nudge" that keeps the oracle on smooth ground.
void fd_fixture(Network<T>& net, Rng& rng) {
    for (auto& [name, p] : net.params().entries()) {
        const bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
        for (i64 i = 0; i < p->numel(); ++i) {
            if (is_bias) {
                const double m = rng.uniform(0.05, 0.3);
                p->value.mut()[i] = static_cast<T>(rng.uniform() < 0.5 ? -m : m);
            } else {
                p->value.mut()[i] = static_cast<T>(p->value.data()[i] * 0.4);
            }
        }
    }
}

void network_checks(Suite& suite, Rng& rng) {
    const NetConfig cfg = toy_config();
    const int H = 32, L = H / cfg.scale;

    // Whole networks span gradient magnitudes from O(10) down to saturated
    // sub-1e-8 gate paths the FD oracle cannot resolve in double precision,
    // so the sampler probes measurable coordinates only. Fixture seeds are
    // pinned; every backward rule is additionally covered coordinate-complete
    // by the op and block checks above.
    const double eps_net = 1e-6;
    FdOptions opt;
    opt.max_coords_per_param = 3;
    opt.min_grad_floor = 0.2;

    {
        Rng fx(mix_seed(5, 21));
        Network<T> teacher = build_teacher<T>(cfg);
        fd_fixture(teacher, fx);
        Parameter<T> lr(rand_tensor({1, 3, L, L}, fx, 0.05, 0.95));
        Parameter<T> parsing(rand_tensor({1, cfg.n_classes, H, H}, fx, 0.0, 1.0));
        std::vector<Parameter<T>*> ps;
        for (auto& [name, p] : teacher.params().entries()) ps.push_back(p);
        ps.push_back(&lr);
        ps.push_back(&parsing);
        const Tensor<T> r = rand_signed({1, 3, H, H}, fx);
        opt.seed = mix_seed(5, 22);
        auto f = [&] {
            const Tensor<T> parsing_t = use(parsing);
            return dot_readout(teacher_forward(teacher, use(lr), parsing_t).sr, r);
        };
        suite.check_fd("net.teacher_end_to_end", finite_diff_check<T>(f, ps, eps_net, opt));
    }
    {
        Rng fx(mix_seed(5, 21));
        Network<T> student = build_student<T>(cfg);
        fd_fixture(student, fx);
        Parameter<T> lr(rand_tensor({1, 3, L, L}, fx, 0.05, 0.95));
        std::vector<Parameter<T>*> ps;
        for (auto& [name, p] : student.params().entries()) ps.push_back(p);
        ps.push_back(&lr);
        const Tensor<T> r = rand_signed({1, 3, H, H}, fx);
        opt.seed = mix_seed(5, 22);
        auto f = [&] { return dot_readout(student_forward(student, use(lr)).sr, r); };
        suite.check_fd("net.student_end_to_end", finite_diff_check<T>(f, ps, eps_net, opt));
    }
    {
        // Gradient flow through every registered tap plus the SR output,
        // probed through smooth readouts.
        Rng fx(mix_seed(6, 21));
        Network<T> student = build_student<T>(cfg);
        fd_fixture(student, fx);
        const Tensor<T> lr = rand_tensor({1, 3, L, L}, fx, 0.05, 0.95);
        std::vector<Parameter<T>*> ps;
        for (auto& [name, p] : student.params().entries()) ps.push_back(p);
        std::vector<Tensor<T>> readouts;
        {
            NoGradScope<T> ng;
            const ForwardResult<T> probe = student_forward(student, lr);
            for (const auto& tap : probe.taps) readouts.push_back(rand_signed(tap.shape(), fx));
            readouts.push_back(rand_signed(probe.sr.shape(), fx));
        }
        opt.seed = mix_seed(6, 22);
        auto f = [&] {
            ForwardResult<T> fr = student_forward(student, lr);
            Tensor<T> total = dot_readout(fr.sr, readouts.back());
            for (size_t i = 0; i < fr.taps.size(); ++i)
                total = add(total, dot_readout(fr.taps[i], readouts[i]));
            return total;
        };
        suite.check_fd("net.student_tap_gradients", finite_diff_check<T>(f, ps, eps_net, opt));
    }
    {
        Network<T> teacher = build_teacher<T>(cfg);
        Network<T> student = build_student<T>(cfg);
        teacher.params().fill_values(0);
        student.params().fill_values(0);
        const Tensor<T> lr = rand_tensor({1, 3, L, L}, rng, 0.05, 0.95);
        const Tensor<T> parsing = rand_tensor({1, cfg.n_classes, H, H}, rng, 0.0, 1.0);
        const Tensor<T> base = bicubic_upsample(lr, H, H);
        const ForwardResult<T> ft = teacher_forward(teacher, lr, parsing);
        const ForwardResult<T> fs = student_forward(student, lr);
        bool exact = true;
        for (i64 i = 0; i < base.numel(); ++i)
            exact = exact && ft.sr.data()[i] == base.data()[i] && fs.sr.data()[i] == base.data()[i];
        suite.check("net.zero_weights_equal_bicubic", exact);

        bool congruent = ft.taps.size() == fs.taps.size() &&
                         ft.taps.size() == static_cast<size_t>(2 * cfg.stages);
        if (congruent)
            for (size_t i = 0; i < ft.taps.size(); ++i)
                congruent = congruent && ft.taps[i].shape() == fs.taps[i].shape();
        suite.check("net.tap_congruence", congruent);
    }
}

// Negative control: an op whose forward computes y = 2x but whose backward
// reports 2.02x. The checker has to flag it.
Tensor<T> corrupted_double(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    T* po = out.mut();
    const T* px = x.data();
    for (i64 i = 0; i < x.numel(); ++i) po[i] = T(2) * px[i];
    Tape<T>* tape = active_tape<T>();
    const int nx = tape_node(tape, x);
    if (tape && nx >= 0) {
        const i64 n = x.numel();
        out.set_node(tape->record(n,
                                  [nx, n](Tape<T>& t, const std::vector<T>& g) {
                                      auto& buf = t.grad_buf(nx);
                                      for (i64 i = 0; i < n; ++i) buf[size_t(i)] += T(2.02) * g[size_t(i)];
                                  }),
                     tape->serial());
    }
    return out;
}

}  // namespace

int run_selftest(std::ostream& out, bool inject_grad_fault) {
    Suite suite(out);
    Rng rng(0x7357c0de);
    op_checks(suite, rng);
    invariant_checks(suite, rng);
    block_checks(suite, rng);
    network_checks(suite, rng);
    if (inject_grad_fault) {
        Parameter<T> x(rand_signed({1, 1, 3, 3}, rng));
        const Tensor<T> r = rand_signed({1, 1, 3, 3}, rng);
        const double rel = finite_diff_check<T>(
            [&] { return dot_readout(corrupted_double(use(x)), r); }, std::array{&x}, kEps);
        suite.check_fd("negative_control.corrupted_backward", rel);
    }
    out << (suite.failures() == 0 ? "selftest: all checks passed\n"
                                  : cat("selftest: ", suite.failures(), " check(s) FAILED\n"));
    return suite.failures();
}

}  // namespace pkdn
