#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pkdn/gradcheck.hpp"
#include "pkdn/ops.hpp"
#include "pkdn/resample.hpp"

using namespace pkdn;

namespace {

Tensor<double> rt(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(s);
    double* p = t.mut();
    for (i64 i = 0; i < t.numel(); ++i) p[i] = rng.uniform(lo, hi);
    return t;
}

// Independent direct convolution: explicit zero-padded buffer, straight
// seven-loop summation. Deliberately a different code path from the library.
Tensor<double> conv_ref(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                        int pad) {
    const Shape xs = x.shape(), ws = w.shape();
    const int K = ws.h, H = xs.h, W = xs.w;
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    std::vector<double> padded(size_t(xs.n) * xs.c * Hp * Wp, 0.0);
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    padded[((size_t(n) * xs.c + c) * Hp + (y + pad)) * Wp + (xx + pad)] = x.at(n, c, y, xx);
    const int Ho = (H + 2 * pad - K) / stride + 1;
    const int Wo = (W + 2 * pad - K) / stride + 1;
    Tensor<double> out({xs.n, ws.n, Ho, Wo});
    double* po = out.mut();
    for (int n = 0; n < xs.n; ++n)
        for (int co = 0; co < ws.n; ++co)
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo) {
                    double acc = b.at(0, co, 0, 0);
                    for (int ci = 0; ci < xs.c; ++ci)
                        for (int kh = 0; kh < K; ++kh)
                            for (int kw = 0; kw < K; ++kw)
                                acc += padded[((size_t(n) * xs.c + ci) * Hp + (ho * stride + kh)) * Wp +
                                              (wo * stride + kw)] *
                                       w.at(co, ci, kh, kw);
                    po[((i64(n) * ws.n + co) * Ho + ho) * Wo + wo] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("conv2d hand example: all-ones 3x3") {
    const Tensor<double> x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    const Tensor<double> w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    const Tensor<double> b({1, 1, 1, 1});
    const Tensor<double> y = conv2d(x, w, b, 1, 1);
    REQUIRE(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 0, 2) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 2, 0) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 2, 2) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 0, 1) == doctest::Approx(6.0));
    CHECK(y.at(0, 0, 1, 0) == doctest::Approx(6.0));
    CHECK(y.at(0, 0, 1, 2) == doctest::Approx(6.0));
    CHECK(y.at(0, 0, 2, 1) == doctest::Approx(6.0));
    CHECK(y.at(0, 0, 1, 1) == doctest::Approx(9.0));
}

TEST_CASE("conv2d identity 1x1 kernel") {
    Rng rng(11);
    const Tensor<double> x = rt({2, 3, 4, 5}, rng);
    Tensor<double> w({3, 3, 1, 1});
    for (int i = 0; i < 3; ++i) w.mut()[i * 3 + i] = 1.0;
    const Tensor<double> b({1, 3, 1, 1});
    const Tensor<double> y = conv2d(x, w, b, 1, 0);
    for (i64 i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches the direct-summation reference") {
    Rng rng(12);
    for (const auto& [stride, pad] : std::vector<std::pair<int, int>>{{1, 0}, {1, 1}, {2, 1}, {1, 2}}) {
        const Tensor<double> x = rt({2, 3, 6, 7}, rng);
        const Tensor<double> w = rt({4, 3, 3, 3}, rng);
        const Tensor<double> b = rt({1, 4, 1, 1}, rng);
        const Tensor<double> got = conv2d(x, w, b, stride, pad);
        const Tensor<double> want = conv_ref(x, w, b, stride, pad);
        REQUIRE(got.shape() == want.shape());
        for (i64 i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d gradients match central finite differences") {
    Rng rng(13);
    Parameter<double> x(rt({2, 3, 5, 5}, rng));
    Parameter<double> w(rt({4, 3, 3, 3}, rng));
    Parameter<double> b(rt({1, 4, 1, 1}, rng));
    const Tensor<double> r = rt({2, 4, 5, 5}, rng);
    auto f = [&] { return dot_readout(conv2d(use(x), use(w), use(b), 1, 1), r); };
    const double rel = finite_diff_check<double>(f, std::array{&x, &w, &b}, 1e-6);
    CHECK(rel <= 1e-5);
}

TEST_CASE("conv2d validates shapes with named dimensions") {
    const Tensor<double> x({1, 2, 4, 4});
    const Tensor<double> w({1, 3, 3, 3});
    const Tensor<double> b({1, 1, 1, 1});
    CHECK_THROWS_WITH_AS(conv2d(x, w, b, 1, 1), doctest::Contains("channels"), ValidationError);
    const Tensor<double> even_w({1, 2, 2, 2});
    CHECK_THROWS_AS(conv2d(x, even_w, b, 1, 1), ValidationError);
    const Tensor<double> w2({1, 2, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w2, b, 0, 1), ValidationError);
}

TEST_CASE("pixel_shuffle layout and identity") {
    Tensor<double> x({1, 4, 1, 1}, {1.0, 2.0, 3.0, 4.0});
    const Tensor<double> y = pixel_shuffle(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y.at(0, 0, 0, 0) == 1.0);
    CHECK(y.at(0, 0, 0, 1) == 2.0);
    CHECK(y.at(0, 0, 1, 0) == 3.0);
    CHECK(y.at(0, 0, 1, 1) == 4.0);

    Rng rng(21);
    const Tensor<double> z = rt({2, 3, 4, 4}, rng);
    const Tensor<double> same = pixel_shuffle(z, 1);
    for (i64 i = 0; i < z.numel(); ++i) CHECK(same.data()[i] == z.data()[i]);

    CHECK_THROWS_AS(pixel_shuffle(z, 2), ValidationError);  // 3 % 4 != 0
}

TEST_CASE("pixel_unshuffle layout, identity, errors") {
    Tensor<double> x({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    const Tensor<double> y = pixel_unshuffle(x, 2);
    REQUIRE(y.shape() == Shape{1, 4, 1, 1});
    for (int c = 0; c < 4; ++c) CHECK(y.at(0, c, 0, 0) == 1.0 + c);

    Rng rng(22);
    const Tensor<double> z = rt({1, 2, 3, 3}, rng);
    const Tensor<double> same = pixel_unshuffle(z, 1);
    for (i64 i = 0; i < z.numel(); ++i) CHECK(same.data()[i] == z.data()[i]);
    CHECK_THROWS_AS(pixel_unshuffle(z, 2), ValidationError);
}

TEST_CASE("pixel shuffle round trips exactly") {
    Rng rng(23);
    for (const int r : {2, 4}) {
        const Tensor<double> x = rt({2, 3 * r * r, 3, 5}, rng);
        const Tensor<double> back = pixel_unshuffle(pixel_shuffle(x, r), r);
        for (i64 i = 0; i < x.numel(); ++i) REQUIRE(back.data()[i] == x.data()[i]);
        const Tensor<double> y = rt({1, 3, 4 * r, 4 * r}, rng);
        const Tensor<double> back2 = pixel_shuffle(pixel_unshuffle(y, r), r);
        for (i64 i = 0; i < y.numel(); ++i) REQUIRE(back2.data()[i] == y.data()[i]);
    }
}

TEST_CASE("nearest_resize semantics") {
    const Tensor<double> one = Tensor<double>::full({1, 1, 1, 1}, 7.5);
    const Tensor<double> big = nearest_resize(one, 5, 3);
    for (i64 i = 0; i < big.numel(); ++i) CHECK(big.data()[i] == 7.5);

    Tensor<double> x({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    const Tensor<double> up = nearest_resize(x, 4, 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(up.at(0, 0, i, j) == x.at(0, 0, i / 2, j / 2));

    Rng rng(31);
    const Tensor<double> z = rt({1, 2, 3, 4}, rng);
    const Tensor<double> same = nearest_resize(z, 3, 4);
    for (i64 i = 0; i < z.numel(); ++i) CHECK(same.data()[i] == z.data()[i]);

    Parameter<double> p(rt({1, 2, 3, 3}, rng));
    const Tensor<double> r = rt({1, 2, 5, 7}, rng);
    auto f = [&] { return dot_readout(nearest_resize(use(p), 5, 7), r); };
    CHECK(finite_diff_check<double>(f, std::array{&p}, 1e-6) <= 1e-5);
}

TEST_CASE("elementwise definitions") {
    Tensor<double> x({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
    const Tensor<double> y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 2.0);

    CHECK(sigmoid(Tensor<double>::scalar(0.0)).item() == doctest::Approx(0.5));

    Rng rng(41);
    const Tensor<double> a = rt({1, 2, 4, 4}, rng);
    const Tensor<double> b = rt({1, 3, 4, 4}, rng);
    const Tensor<double> cc = concat_channels(a, b);
    REQUIRE(cc.shape() == Shape{1, 5, 4, 4});
    CHECK(cc.at(0, 0, 1, 1) == a.at(0, 0, 1, 1));
    CHECK(cc.at(0, 2, 3, 3) == b.at(0, 0, 3, 3));
    CHECK(cc.at(0, 4, 0, 0) == b.at(0, 2, 0, 0));

    const Tensor<double> c = rt({1, 2, 4, 5}, rng);
    CHECK_THROWS_AS(add(a, c), ValidationError);
    CHECK_THROWS_AS(sub(a, c), ValidationError);
    CHECK_THROWS_AS(concat_channels(a, c), ValidationError);
    CHECK_THROWS_AS(mul_broadcast(a, rt({1, 3, 1, 1}, rng)), ValidationError);
}

TEST_CASE("reduction definitions") {
    CHECK(mean_abs(Tensor<double>({1, 1, 2, 2})).item() == 0.0);
    Tensor<double> pm({1, 1, 1, 4}, {-1.0, 1.0, -1.0, 1.0});
    CHECK(mean_abs(pm).item() == doctest::Approx(1.0));
    Tensor<double> g({1, 1, 2, 2}, {1.0, 2.0, 3.0, 5.0});
    CHECK(global_avg_pool(g).item() == doctest::Approx(2.75));

    Rng rng(42);
    const Tensor<double> x = rt({2, 3, 4, 4}, rng);
    const Tensor<double> mm = channel_mean_map(x);
    REQUIRE(mm.shape() == Shape{2, 1, 4, 4});
    CHECK(mm.at(1, 0, 2, 2) ==
          doctest::Approx((x.at(1, 0, 2, 2) + x.at(1, 1, 2, 2) + x.at(1, 2, 2, 2)) / 3.0));
    const Tensor<double> mx = channel_max_map(x);
    CHECK(mx.at(0, 0, 1, 1) == std::max({x.at(0, 0, 1, 1), x.at(0, 1, 1, 1), x.at(0, 2, 1, 1)}));
}

TEST_CASE("channel_max_map routes ties to the first channel") {
    Tensor<double> x({1, 2, 1, 1}, {0.7, 0.7});
    Parameter<double> p(x);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    backward(mean_abs(channel_max_map(use(p))));
    CHECK(p.grad[0] == doctest::Approx(1.0));
    CHECK(p.grad[1] == 0.0);
}

TEST_CASE("backward basics") {
    SUBCASE("mean_abs subgradient, sign(3) = 1") {
        Parameter<double> w(Tensor<double>::scalar(3.0));
        Tape<double> tape;
        TapeScope<double> scope(tape);
        backward(mean_abs(use(w)));
        CHECK(w.grad[0] == doctest::Approx(1.0));
    }
    SUBCASE("sign(0) = 0") {
        Parameter<double> w(Tensor<double>::scalar(0.0));
        Tape<double> tape;
        TapeScope<double> scope(tape);
        backward(mean_abs(use(w)));
        CHECK(w.grad[0] == 0.0);
    }
    SUBCASE("unused parameter keeps zero grad") {
        Parameter<double> w(Tensor<double>::scalar(2.0));
        Parameter<double> unused(Tensor<double>::scalar(5.0));
        Tape<double> tape;
        TapeScope<double> scope(tape);
        backward(mean_abs(use(w)));
        CHECK(unused.grad[0] == 0.0);
    }
    SUBCASE("two paths double the grad") {
        Parameter<double> w(Tensor<double>::scalar(2.0));
        Tape<double> tape;
        TapeScope<double> scope(tape);
        const Tensor<double> x = use(w);
        backward(mean_abs(add(x, x)));
        CHECK(w.grad[0] == doctest::Approx(2.0));
    }
    SUBCASE("non-scalar loss rejected") {
        Parameter<double> w(Tensor<double>::full({1, 1, 1, 2}, 1.0));
        Tape<double> tape;
        TapeScope<double> scope(tape);
        CHECK_THROWS_AS(backward(relu(use(w))), ValidationError);
    }
    SUBCASE("consumed tape rejected") {
        Parameter<double> w(Tensor<double>::scalar(1.0));
        Tape<double> tape;
        TapeScope<double> scope(tape);
        const Tensor<double> loss = mean_abs(use(w));
        backward(loss);
        CHECK_THROWS_AS(backward(loss), Error);
    }
    SUBCASE("no active tape rejected") {
        CHECK_THROWS_AS(backward(Tensor<double>::scalar(1.0)), Error);
    }
}

TEST_CASE("tensors from a dead tape act as constants") {
    Parameter<double> w(Tensor<double>::scalar(2.0));
    Tensor<double> stale;
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        stale = scale(use(w), 3.0);
    }
    Tape<double> tape2;
    TapeScope<double> scope2(tape2);
    Parameter<double> v(Tensor<double>::scalar(1.0));
    backward(mean_abs(add(stale, use(v))));
    CHECK(w.grad[0] == 0.0);  // stale path is constant on the new tape
    CHECK(v.grad[0] == doctest::Approx(1.0));
}

TEST_CASE("ops never mutate their inputs") {
    Rng rng(51);
    const Tensor<double> x = rt({1, 4, 6, 6}, rng);
    const Tensor<double> w = rt({4, 4, 3, 3}, rng);
    const Tensor<double> b = rt({1, 4, 1, 1}, rng);
    const std::vector<double> x_snap = x.vec(), w_snap = w.vec();
    (void)sigmoid(conv2d(x, w, b, 1, 1));
    (void)pixel_unshuffle(x, 2);
    (void)mean_abs(x);
    CHECK(x.vec() == x_snap);
    CHECK(w.vec() == w_snap);
}

TEST_CASE("identical inputs give bit-identical outputs") {
    Rng rng(52);
    const Tensor<double> x = rt({1, 4, 6, 6}, rng);
    const Tensor<double> w = rt({4, 4, 3, 3}, rng);
    const Tensor<double> b = rt({1, 4, 1, 1}, rng);
    const Tensor<double> y1 = sigmoid(conv2d(x, w, b, 1, 1));
    const Tensor<double> y2 = sigmoid(conv2d(x, w, b, 1, 1));
    for (i64 i = 0; i < y1.numel(); ++i) REQUIRE(y1.data()[i] == y2.data()[i]);
    bool finite = true;
    for (i64 i = 0; i < y1.numel(); ++i) finite = finite && std::isfinite(y1.data()[i]);
    CHECK(finite);
}

TEST_CASE("finite_diff_check is exact on a linear function") {
    Rng rng(61);
    Parameter<double> w(rt({1, 1, 3, 3}, rng));
    auto f = [&] { return global_avg_pool(use(w)); };
    CHECK(finite_diff_check<double>(f, std::array{&w}, 1e-6) <= 1e-9);
}

TEST_CASE("float mode mirrors double semantics") {
    Rng rng(62);
    Tensor<float> x({1, 4, 2, 2});
    for (i64 i = 0; i < x.numel(); ++i) x.mut()[i] = static_cast<float>(rng.uniform(-1, 1));
    const Tensor<float> back = pixel_unshuffle(pixel_shuffle(x, 2), 2);
    for (i64 i = 0; i < x.numel(); ++i) REQUIRE(back.data()[i] == x.data()[i]);
    Parameter<float> w(Tensor<float>::scalar(3.0f));
    Tape<float> tape;
    TapeScope<float> scope(tape);
    backward(mean_abs(use(w)));
    CHECK(w.grad[0] == 1.0f);
}

TEST_CASE("bicubic_upsample constants and gradient") {
    const Tensor<double> c = Tensor<double>::full({1, 2, 3, 3}, 0.37);
    const Tensor<double> up = bicubic_upsample(c, 9, 12);
    for (i64 i = 0; i < up.numel(); ++i) CHECK(up.data()[i] == doctest::Approx(0.37).epsilon(1e-12));

    Rng rng(63);
    Parameter<double> p(rt({1, 2, 4, 4}, rng));
    const Tensor<double> r = rt({1, 2, 8, 8}, rng);
    auto f = [&] { return dot_readout(bicubic_upsample(use(p), 8, 8), r); };
    CHECK(finite_diff_check<double>(f, std::array{&p}, 1e-6) <= 1e-5);
}
