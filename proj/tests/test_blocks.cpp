#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pkdn/blocks.hpp"
#include "pkdn/gradcheck.hpp"

using namespace pkdn;
using T = double;

namespace {

Tensor<T> rt(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(s);
    for (i64 i = 0; i < t.numel(); ++i) t.mut()[i] = rng.uniform(lo, hi);
    return t;
}

Tensor<T> rsigned(Shape s, Rng& rng) {
    Tensor<T> t(s);
    for (i64 i = 0; i < t.numel(); ++i) {
        const double m = rng.uniform(0.2, 1.0);
        t.mut()[i] = rng.uniform() < 0.5 ? -m : m;
    }
    return t;
}

const BlockConfig kCfg{8, 4, 7, 2};

template <class Fn>
double block_fd(Rng& rng, std::vector<Parameter<T>*> ps, Shape out_shape, Fn&& apply) {
    const Tensor<T> r = rsigned(out_shape, rng);
    FdOptions opt;
    opt.min_grad_floor = 1e-3;
    auto f = [&] { return dot_readout(apply(), r); };
    return finite_diff_check<T>(f, ps, 1e-6, opt);
}

std::vector<Parameter<T>*> collect(ParamRegistry<T>& reg) {
    std::vector<Parameter<T>*> out;
    for (auto& [name, p] : reg.entries()) out.push_back(p);
    return out;
}

}  // namespace

TEST_CASE("BlockConfig validation") {
    CHECK_NOTHROW(kCfg.validate());
    CHECK_THROWS_AS((BlockConfig{8, 3, 7, 2}.validate()), ValidationError);  // 8 % 3
    CHECK_THROWS_AS((BlockConfig{8, 4, 6, 2}.validate()), ValidationError);  // even kernel
    CHECK_THROWS_AS((BlockConfig{8, 4, 7, 0}.validate()), ValidationError);
}

TEST_CASE("parameter registry rejects duplicates and counts elements") {
    ParamRegistry<T> reg;
    reg.add("a", Tensor<T>({1, 2, 3, 3}));
    CHECK_THROWS_AS(reg.add("a", Tensor<T>({1, 1, 1, 1})), ValidationError);
    reg.add("b", Tensor<T>({1, 4, 1, 1}));
    CHECK(reg.size() == 2);
    CHECK(reg.total_elements() == 18 + 4);
    CHECK(reg.find("b") != nullptr);
    CHECK(reg.find("missing") == nullptr);
}

TEST_CASE("channel attention: gate semantics and gradient") {
    Rng rng(101);
    ParamRegistry<T> reg;
    auto ca = ChannelAttention<T>::make(reg, "ca", kCfg, rng);

    SUBCASE("zero weights gate at exactly one half") {
        reg.fill_values(0);
        const Tensor<T> x = rt({2, 8, 5, 5}, rng);
        const Tensor<T> y = ca(x);
        for (i64 i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == 0.5 * x.data()[i]);
    }
    SUBCASE("zero input stays zero under any weights") {
        const Tensor<T> y = ca(Tensor<T>({1, 8, 4, 4}));
        for (i64 i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
    }
    SUBCASE("channel mismatch is rejected") {
        CHECK_THROWS_AS(ca(Tensor<T>({1, 4, 4, 4})), ValidationError);
    }
    SUBCASE("gradients") {
        Parameter<T> x(rsigned({2, 8, 5, 5}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        CHECK(block_fd(rng, ps, {2, 8, 5, 5}, [&] { return ca(use(x)); }) <= 1e-5);
    }
    SUBCASE("census: 2*c^2/r + c/r + c") {
        CHECK(ca.param_elems() == 2 * 8 * 8 / 4 + 8 / 4 + 8);
    }
}

TEST_CASE("spatial attention: gate semantics and gradient") {
    Rng rng(102);
    ParamRegistry<T> reg;
    auto sa = SpatialAttention<T>::make(reg, "sa", kCfg, rng);

    SUBCASE("zero weights gate at one half") {
        reg.fill_values(0);
        const Tensor<T> x = rt({1, 8, 6, 6}, rng);
        const Tensor<T> y = sa(x);
        for (i64 i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == 0.5 * x.data()[i]);
    }
    SUBCASE("spatially constant input gives a constant interior gate") {
        // Zero padding makes border windows differ; translation invariance of
        // the pooled maps holds wherever the 7x7 window is fully interior.
        const int S = 16, lo = 3, hi = S - 3;
        Tensor<T> x({1, 8, S, S});
        Rng r2(7);
        for (int c = 0; c < 8; ++c) {
            const double v = r2.uniform(-1, 1);
            for (i64 i = 0; i < i64(S) * S; ++i) x.mut()[c * S * S + i] = v;
        }
        const Tensor<T> y = sa(x);
        for (int c = 0; c < 8; ++c) {
            const double ref = y.at(0, c, lo, lo);
            for (int i = lo; i < hi; ++i)
                for (int j = lo; j < hi; ++j)
                    CHECK(y.at(0, c, i, j) == doctest::Approx(ref).epsilon(1e-12));
        }
    }
    SUBCASE("gradients") {
        Parameter<T> x(rsigned({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        CHECK(block_fd(rng, ps, {1, 8, 6, 6}, [&] { return sa(use(x)); }) <= 1e-5);
    }
    SUBCASE("census: 2*k^2 + 1") {
        CHECK(sa.param_elems() == 2 * 7 * 7 + 1);
    }
}

TEST_CASE("rcab: residual survives zero weights, shape preserved") {
    Rng rng(103);
    ParamRegistry<T> reg;
    auto rcab = Rcab<T>::make(reg, "rcab", kCfg, rng);

    SUBCASE("zero weights reduce to identity") {
        reg.fill_values(0);
        const Tensor<T> x = rt({1, 8, 5, 5}, rng);
        const Tensor<T> y = rcab(x);
        for (i64 i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
    }
    SUBCASE("shape contract at (2,8,16,16)") {
        const Tensor<T> y = rcab(rt({2, 8, 16, 16}, rng));
        CHECK(y.shape() == Shape{2, 8, 16, 16});
    }
    SUBCASE("gradients") {
        Parameter<T> x(rsigned({1, 8, 5, 5}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        CHECK(block_fd(rng, ps, {1, 8, 5, 5}, [&] { return rcab(use(x)); }) <= 1e-5);
    }
    SUBCASE("census: 2*(9c^2+c) + CA") {
        CHECK(rcab.param_elems() == 2 * (9 * 64 + 8) + (2 * 16 + 2 + 8));
    }
}

TEST_CASE("rcag: nested residuals and census formula") {
    Rng rng(104);
    ParamRegistry<T> reg;
    auto rcag = Rcag<T>::make(reg, "rcag", kCfg, rng);

    SUBCASE("zero weights reduce to identity") {
        reg.fill_values(0);
        const Tensor<T> x = rt({1, 8, 6, 6}, rng);
        const Tensor<T> y = rcag(x);
        for (i64 i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
    }
    SUBCASE("B=1 equals rcab + conv + outer residual") {
        BlockConfig one = kCfg;
        one.rcab_per_group = 1;
        Rng ra(55), rb(55);
        ParamRegistry<T> reg_a, reg_b;
        auto g = Rcag<T>::make(reg_a, "g", one, ra);
        auto rcab = Rcab<T>::make(reg_b, "g.rcab0", one, rb);
        auto tail = Conv2dLayer<T>::make(reg_b, "g.tail", one.channels, one.channels, 3, rb);
        const Tensor<T> x = rt({1, 8, 6, 6}, ra);
        const Tensor<T> ya = g(x);
        const Tensor<T> yb = add(x, tail(rcab(x)));
        for (i64 i = 0; i < x.numel(); ++i) CHECK(ya.data()[i] == yb.data()[i]);
    }
    SUBCASE("census: B*rcab + 9c^2 + c") {
        const i64 rcab_count = 2 * (9 * 64 + 8) + (2 * 16 + 2 + 8);
        CHECK(rcag.param_elems() == 2 * rcab_count + 9 * 64 + 8);
    }
    SUBCASE("gradients") {
        Parameter<T> x(rsigned({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        CHECK(block_fd(rng, ps, {1, 8, 6, 6}, [&] { return rcag(use(x)); }) <= 1e-5);
    }
}

TEST_CASE("projection function: zero weights give zero output") {
    Rng rng(105);
    ParamRegistry<T> reg;
    auto pf = ProjectionFunction<T>::make(reg, "pf", kCfg, rng);

    SUBCASE("zero weights") {
        reg.fill_values(0);
        const Tensor<T> y = pf(rt({1, 8, 5, 5}, rng));
        for (i64 i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
    }
    SUBCASE("shape preserved") {
        CHECK(pf(rt({2, 8, 7, 9}, rng)).shape() == Shape{2, 8, 7, 9});
    }
    SUBCASE("gradients") {
        Parameter<T> x(rsigned({1, 8, 5, 5}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        CHECK(block_fd(rng, ps, {1, 8, 5, 5}, [&] { return pf(use(x)); }) <= 1e-5);
    }
}

TEST_CASE("ffb: error feedback composition") {
    Rng rng(106);
    ParamRegistry<T> reg;
    auto ffb = Ffb<T>::make(reg, "ffb", kCfg, rng);

    SUBCASE("equal inputs with zero weights halve the feature") {
        reg.fill_values(0);
        const Tensor<T> f = rt({1, 8, 6, 6}, rng);
        const Tensor<T> y = ffb(f, f);
        for (i64 i = 0; i < f.numel(); ++i) CHECK(y.data()[i] == 0.5 * f.data()[i]);
    }
    SUBCASE("shape preserved and mismatch rejected") {
        Rng r2(9);
        const Tensor<T> f = rt({1, 8, 6, 6}, r2);
        CHECK(ffb(f, f).shape() == f.shape());
        CHECK_THROWS_AS(ffb(f, rt({1, 8, 3, 3}, r2)), ValidationError);
    }
    SUBCASE("gradients w.r.t. both inputs") {
        Parameter<T> f(rsigned({1, 8, 6, 6}, rng));
        Parameter<T> fp(rsigned({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&f);
        ps.push_back(&fp);
        CHECK(block_fd(rng, ps, {1, 8, 6, 6}, [&] { return ffb(use(f), use(fp)); }) <= 1e-5);
    }
}

TEST_CASE("pfb: parsing fusion semantics") {
    Rng rng(107);
    ParamRegistry<T> reg;
    auto pfb = Pfb<T>::make(reg, "pfb", kCfg, 4, rng);

    SUBCASE("zero weights reduce to identity") {
        reg.fill_values(0);
        const Tensor<T> f = rt({1, 8, 8, 8}, rng);
        const Tensor<T> parsing = rt({1, 4, 16, 16}, rng, 0.0, 1.0);
        const Tensor<T> y = pfb(f, parsing);
        for (i64 i = 0; i < f.numel(); ++i) CHECK(y.data()[i] == f.data()[i]);
    }
    SUBCASE("class count mismatch is rejected") {
        CHECK_THROWS_AS(pfb(rt({1, 8, 8, 8}, rng), rt({1, 3, 8, 8}, rng)), ValidationError);
    }
    SUBCASE("pre-resized parsing gives the same output as raw") {
        const Tensor<T> f = rt({1, 8, 8, 8}, rng);
        const Tensor<T> parsing = rt({1, 4, 16, 16}, rng, 0.0, 1.0);
        const Tensor<T> pre = nearest_resize(parsing, 8, 8);
        const Tensor<T> y_raw = pfb(f, parsing);
        const Tensor<T> y_pre = pfb(f, pre);
        for (i64 i = 0; i < f.numel(); ++i) CHECK(y_raw.data()[i] == y_pre.data()[i]);
    }
    SUBCASE("gradients w.r.t. feature, parsing and weights") {
        Parameter<T> f(rsigned({1, 8, 16, 16}, rng));
        Parameter<T> parsing(rt({1, 4, 8, 8}, rng, 0.0, 1.0));
        auto ps = collect(reg);
        ps.push_back(&f);
        ps.push_back(&parsing);
        CHECK(block_fd(rng, ps, {1, 8, 16, 16}, [&] { return pfb(use(f), use(parsing)); }) <= 1e-5);
    }
    SUBCASE("census formula") {
        const i64 ca = 2 * 16 + 2 + 8;
        const i64 sa = 2 * 49 + 1;
        const i64 proj_p = 8 * 4 * 9 + 8;
        const i64 proj_f = 9 * 64 + 8;
        const i64 fuse = 8 * 16 * 9 + 8;
        CHECK(pfb.param_elems() == proj_p + proj_f + 2 * fuse + ca + sa);
    }
}

TEST_CASE("down/upsample blocks: shape algebra") {
    Rng rng(108);
    ParamRegistry<T> reg;
    auto down = DownsampleBlock<T>::make(reg, "down", kCfg, rng);
    auto up = UpsampleBlock<T>::make(reg, "up", kCfg, rng);

    SUBCASE("(1,8,16,16) halves to (1,8,8,8) and composes") {
        const Tensor<T> x = rt({1, 8, 16, 16}, rng);
        const Tensor<T> d1 = down(x);
        CHECK(d1.shape() == Shape{1, 8, 8, 8});
        CHECK(down(d1).shape() == Shape{1, 8, 4, 4});
    }
    SUBCASE("upsample doubles and round-trips the shape") {
        const Tensor<T> x = rt({1, 8, 8, 8}, rng);
        const Tensor<T> u = up(x);
        CHECK(u.shape() == Shape{1, 8, 16, 16});
        CHECK(down(u).shape() == x.shape());
    }
    SUBCASE("odd spatial dims are rejected") {
        CHECK_THROWS_AS(down(rt({1, 8, 5, 6}, rng)), ValidationError);
    }
    SUBCASE("gradients") {
        Parameter<T> x(rsigned({1, 8, 6, 6}, rng));
        auto ps = collect(reg);
        ps.push_back(&x);
        CHECK(block_fd(rng, ps, {1, 8, 3, 3}, [&] { return down(use(x)); }) <= 1e-5);
        Parameter<T> x2(rsigned({1, 8, 3, 3}, rng));
        std::vector<Parameter<T>*> ps2 = collect(reg);
        ps2.push_back(&x2);
        CHECK(block_fd(rng, ps2, {1, 8, 6, 6}, [&] { return up(use(x2)); }) <= 1e-5);
    }
    SUBCASE("census: down 36c^2+c, up 36c^2+4c") {
        CHECK(down.param_elems() == 36 * 64 + 8);
        CHECK(up.param_elems() == 36 * 64 + 4 * 8);
    }
}

TEST_CASE("blocks preserve (n,c) across random shapes") {
    Rng rng(109);
    ParamRegistry<T> reg;
    auto rcab = Rcab<T>::make(reg, "rcab", kCfg, rng);
    auto ca = ChannelAttention<T>::make(reg, "ca", kCfg, rng);
    auto sa = SpatialAttention<T>::make(reg, "sa", kCfg, rng);
    for (int trial = 0; trial < 8; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(2));
        const int h = 4 + static_cast<int>(rng.below(12));
        const int w = 4 + static_cast<int>(rng.below(12));
        const Tensor<T> x = rt({n, 8, h, w}, rng);
        CHECK(rcab(x).shape() == x.shape());
        CHECK(ca(x).shape() == x.shape());
        CHECK(sa(x).shape() == x.shape());
    }
}
