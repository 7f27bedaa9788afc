#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "faceaug/embedder.hpp"
#include "faceaug/errors.hpp"
#include "faceaug/ops.hpp"
#include "testutil.hpp"

using namespace faceaug;
using tu::fd_check;
using tu::random_normal;
using tu::random_uniform;

namespace {

// Scalar probe loss: sum(y * fixed_weights). Smooth in y everywhere, and the
// fixed weights keep gradients non-degenerate.
Var weighted_sum(Tape& t, Var y, const Tensor& weights) { return sum_all(mul(y, t.input(weights))); }

double top_singular_value_svd(const Tensor& m) {
    const int rows = m.dim(0), cols = m.dim(1);
    Eigen::MatrixXd w(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) w(r, c) = m[static_cast<int64_t>(r) * cols + c];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
    return svd.singularValues()(0);
}

}  // namespace

TEST_CASE("elementwise forwards") {
    Rng rng(1);
    Tensor a = random_uniform({2, 3, 4, 2}, rng);
    Tensor b = random_uniform({2, 3, 4, 2}, rng);
    Tape t(false);
    Var va = t.input(a), vb = t.input(b);

    Tensor s = add(va, vb).value();
    Tensor d = sub(va, vb).value();
    Tensor p = mul(va, vb).value();
    Tensor sc = scale(va, 2.5f).value();
    Tensor as = add_scalar(va, -0.25f).value();
    Tensor r = relu(va).value();
    Tensor th = tanh_act(va).value();
    Tensor sg = sigmoid_act(va).value();
    Tensor cl = clamp(va, -0.5f, 0.5f).value();
    for (int64_t i = 0; i < a.size(); ++i) {
        CHECK(s[i] == doctest::Approx(a[i] + b[i]));
        CHECK(d[i] == doctest::Approx(a[i] - b[i]));
        CHECK(p[i] == doctest::Approx(a[i] * b[i]));
        CHECK(sc[i] == doctest::Approx(2.5f * a[i]));
        CHECK(as[i] == doctest::Approx(a[i] - 0.25f));
        CHECK(r[i] == doctest::Approx(std::max(0.0f, a[i])));
        CHECK(th[i] == doctest::Approx(std::tanh(a[i])));
        CHECK(sg[i] == doctest::Approx(1.0f / (1.0f + std::exp(-a[i]))));
        CHECK(cl[i] == doctest::Approx(std::min(0.5f, std::max(-0.5f, a[i]))));
    }
}

TEST_CASE("elementwise gradients vs finite differences") {
    Rng rng(2);
    Parameter pa("a", random_uniform({3, 5}, rng));
    Parameter pb("b", random_uniform({3, 5}, rng));
    // Keep relu/clamp probes away from their kinks.
    for (int64_t i = 0; i < pa.value.size(); ++i)
        if (std::abs(pa.value[i]) < 5e-3f) pa.value[i] = 0.1f;
    const Tensor w = random_normal({3, 5}, rng);

    auto check = [&](const std::function<Var(Tape&)>& build) {
        auto out = fd_check({&pa, &pb}, build);
        CAPTURE(out.worst);
        CHECK(out.max_rel < 1e-2);
    };
    check([&](Tape& t) { return weighted_sum(t, add(t.leaf(pa), t.leaf(pb)), w); });
    check([&](Tape& t) { return weighted_sum(t, sub(t.leaf(pa), t.leaf(pb)), w); });
    check([&](Tape& t) { return weighted_sum(t, mul(t.leaf(pa), t.leaf(pb)), w); });
    check([&](Tape& t) { return weighted_sum(t, scale(t.leaf(pa), -1.7f), w); });
    check([&](Tape& t) { return weighted_sum(t, add_scalar(t.leaf(pa), 0.3f), w); });
    check([&](Tape& t) { return weighted_sum(t, relu(t.leaf(pa)), w); });
    check([&](Tape& t) { return weighted_sum(t, tanh_act(t.leaf(pa)), w); });
    check([&](Tape& t) { return weighted_sum(t, sigmoid_act(t.leaf(pa)), w); });
    check([&](Tape& t) { return weighted_sum(t, clamp(t.leaf(pa), -3.0f, 3.0f), w); });
}

TEST_CASE("clamp zeroes gradient outside the range") {
    Parameter p("p", Tensor({3}, std::vector<float>{-2.0f, 0.0f, 2.0f}));
    Tape t;
    Var y = sum_all(clamp(t.leaf(p), -1.0f, 1.0f));
    p.zero_grad();
    t.backward(y);
    CHECK(p.grad[0] == 0.0f);
    CHECK(p.grad[1] == 1.0f);
    CHECK(p.grad[2] == 0.0f);
}

TEST_CASE("mul_mask broadcasts a single-channel mask over all channels") {
    Rng rng(3);
    Tensor x = random_uniform({2, 4, 4, 3}, rng);
    Tensor m = random_uniform({2, 4, 4, 1}, rng, 0.0f, 1.0f);
    Tape t(false);
    Tensor y = mul_mask(t.input(x), t.input(m)).value();
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int c = 0; c < 3; ++c)
                    CHECK(y.at(n, i, j, c) ==
                          doctest::Approx(x.at(n, i, j, c) * m.at(n, i, j, 0)));

    Parameter px("x", x), pm("m", m);
    const Tensor w = random_normal({2, 4, 4, 3}, rng);
    auto out = fd_check({&px, &pm},
                        [&](Tape& tt) { return weighted_sum(tt, mul_mask(tt.leaf(px), tt.leaf(pm)), w); });
    CAPTURE(out.worst);
    CHECK(out.max_rel < 1e-2);
}

TEST_CASE("conv2d forward matches the direct-loop oracle") {
    Rng rng(4);
    struct Case {
        int n, h, cin, cout, k, stride, pad;
        bool bias;
    };
    const Case cases[] = {
        {1, 8, 1, 4, 3, 1, 1, true},  {2, 8, 3, 5, 3, 2, 1, true},  {1, 12, 2, 3, 9, 1, 4, true},
        {2, 6, 4, 4, 3, 1, 1, false}, {1, 7, 3, 2, 3, 2, 1, true},
    };
    for (const auto& c : cases) {
        Tensor x = random_uniform({c.n, c.h, c.h, c.cin}, rng);
        Tensor w = random_normal({c.cout, c.k, c.k, c.cin}, rng, 0.2f);
        Tensor b = c.bias ? random_uniform({c.cout}, rng) : Tensor();
        Tape t(false);
        Var vb = c.bias ? t.input(b) : Var{};
        Tensor got = conv2d(t.input(x), t.input(w), vb, c.stride, c.pad).value();
        Tensor want = tu::conv2d_naive(x, w, b, c.stride, c.pad);
        REQUIRE(got.shape() == want.shape());
        CHECK(tu::max_rel_diff(got, want) < 1e-4);
    }
}

TEST_CASE("conv2d gradients vs finite differences") {
    Rng rng(5);
    Parameter px("x", random_uniform({2, 6, 6, 3}, rng));
    Parameter pw("w", random_normal({4, 3, 3, 3}, rng, 0.3f));
    Parameter pb("b", random_uniform({4}, rng));
    const Tensor wt = random_normal({2, 3, 3, 4}, rng);
    auto out = fd_check({&px, &pw, &pb}, [&](Tape& t) {
        return weighted_sum(t, conv2d(t.leaf(px), t.leaf(pw), t.leaf(pb), 2, 1), wt);
    });
    CAPTURE(out.worst);
    CHECK(out.max_rel < 1e-2);
}

TEST_CASE("conv2d_transpose forward matches the scatter oracle") {
    Rng rng(6);
    struct Case {
        int n, h, cin, cout, k, stride, pad, opad;
        bool bias;
    };
    const Case cases[] = {
        {1, 4, 4, 3, 3, 2, 1, 1, false},
        {2, 5, 2, 4, 3, 2, 1, 1, true},
        {1, 6, 3, 2, 3, 1, 1, 0, true},
    };
    for (const auto& c : cases) {
        Tensor x = random_uniform({c.n, c.h, c.h, c.cin}, rng);
        Tensor w = random_normal({c.cin, c.k, c.k, c.cout}, rng, 0.3f);
        Tensor b = c.bias ? random_uniform({c.cout}, rng) : Tensor();
        Tape t(false);
        Var vb = c.bias ? t.input(b) : Var{};
        Tensor got = conv2d_transpose(t.input(x), t.input(w), vb, c.stride, c.pad, c.opad).value();
        Tensor want = tu::conv2d_transpose_naive(x, w, b, c.stride, c.pad, c.opad);
        REQUIRE(got.shape() == want.shape());
        CHECK(tu::max_rel_diff(got, want) < 1e-4);
        if (c.stride == 2 && c.opad == 1) CHECK(got.dim(1) == 2 * c.h);
    }
}

TEST_CASE("conv2d_transpose gradients vs finite differences") {
    Rng rng(7);
    Parameter px("x", random_uniform({1, 4, 4, 3}, rng));
    Parameter pw("w", random_normal({3, 3, 3, 2}, rng, 0.3f));
    const Tensor wt = random_normal({1, 8, 8, 2}, rng);
    auto out = fd_check({&px, &pw}, [&](Tape& t) {
        return weighted_sum(t, conv2d_transpose(t.leaf(px), t.leaf(pw), Var{}, 2, 1, 1), wt);
    });
    CAPTURE(out.worst);
    CHECK(out.max_rel < 1e-2);
}

TEST_CASE("batch_norm training mode normalizes with batch statistics") {
    Rng rng(8);
    const int c = 3;
    Tensor x = random_uniform({4, 5, 5, c}, rng, -2.0f, 2.0f);
    Parameter gamma("g", Tensor({c}, 1.0f));
    Parameter beta("b", Tensor({c}));
    BnBuffers buf;
    buf.init(c);
    Tape t(false);
    Tensor y = batch_norm(t.input(x), t.leaf(gamma), t.leaf(beta), buf, Fwd::train(true)).value();

    const int m = 4 * 5 * 5;
    for (int j = 0; j < c; ++j) {
        double mu = 0.0, var = 0.0, ymu = 0.0, yvar = 0.0;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 5; ++i)
                for (int k = 0; k < 5; ++k) {
                    mu += x.at(n, i, k, j);
                    ymu += y.at(n, i, k, j);
                }
        mu /= m;
        ymu /= m;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 5; ++i)
                for (int k = 0; k < 5; ++k) {
                    var += std::pow(x.at(n, i, k, j) - mu, 2);
                    yvar += std::pow(y.at(n, i, k, j) - ymu, 2);
                }
        var /= m;
        yvar /= m;
        CHECK(std::abs(ymu) < 1e-5);
        CHECK(yvar == doctest::Approx(1.0).epsilon(1e-3));
        // Running buffers: momentum 0.1 toward (batch mean, unbiased var).
        CHECK(buf.running_mean[j] == doctest::Approx(0.1 * mu).epsilon(1e-4));
        const double unbiased = var * m / (m - 1);
        CHECK(buf.running_var[j] == doctest::Approx(0.9 * 1.0 + 0.1 * unbiased).epsilon(1e-4));
    }
}

TEST_CASE("batch_norm eval mode uses running statistics and update_stats=false is pure") {
    Rng rng(9);
    const int c = 2;
    Tensor x = random_uniform({2, 4, 4, c}, rng);
    Parameter gamma("g", Tensor({c}, std::vector<float>{1.5f, 0.5f}));
    Parameter beta("b", Tensor({c}, std::vector<float>{0.1f, -0.2f}));
    BnBuffers buf;
    buf.init(c);
    buf.running_mean[0] = 0.3f;
    buf.running_mean[1] = -0.1f;
    buf.running_var[0] = 2.0f;
    buf.running_var[1] = 0.5f;
    const Tensor rm = buf.running_mean, rv = buf.running_var;

    Tape t(false);
    Tensor y = batch_norm(t.input(x), t.leaf(gamma), t.leaf(beta), buf, Fwd::eval()).value();
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 4; ++i)
            for (int k = 0; k < 4; ++k)
                for (int j = 0; j < c; ++j) {
                    const float xh = (x.at(n, i, k, j) - rm[j]) / std::sqrt(rv[j] + 1e-5f);
                    CHECK(y.at(n, i, k, j) ==
                          doctest::Approx(gamma.value[j] * xh + beta.value[j]).epsilon(1e-4));
                }
    CHECK(buf.running_mean[0] == rm[0]);
    CHECK(buf.running_var[1] == rv[1]);

    // A training-mode forward with update_stats=false also leaves them alone.
    Tape t2(false);
    (void)batch_norm(t2.input(x), t2.leaf(gamma), t2.leaf(beta), buf, Fwd::train(false));
    CHECK(buf.running_mean[0] == rm[0]);
    CHECK(buf.running_var[0] == rv[0]);
}

TEST_CASE("batch_norm gradients vs finite differences") {
    Rng rng(10);
    Parameter px("x", random_uniform({3, 4, 4, 2}, rng));
    Parameter gamma("g", random_uniform({2}, rng, 0.5f, 1.5f));
    Parameter beta("b", random_uniform({2}, rng, -0.5f, 0.5f));
    BnBuffers buf;
    buf.init(2);
    const Tensor w = random_normal({3, 4, 4, 2}, rng);
    auto out = fd_check({&px, &gamma, &beta}, [&](Tape& t) {
        return weighted_sum(
            t, batch_norm(t.leaf(px), t.leaf(gamma), t.leaf(beta), buf, Fwd::train(false)), w);
    });
    CAPTURE(out.worst);
    CHECK(out.max_rel < 1e-2);
}

TEST_CASE("global_avg_pool and dense forwards and gradients") {
    Rng rng(11);
    Tensor x = random_uniform({2, 3, 3, 4}, rng);
    Tape t(false);
    Tensor pooled = global_avg_pool(t.input(x)).value();
    REQUIRE(pooled.shape() == std::vector<int>{2, 4});
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 4; ++c) {
            double acc = 0.0;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) acc += x.at(n, i, j, c);
            CHECK(pooled[n * 4 + c] == doctest::Approx(acc / 9.0));
        }

    Tensor w({3, 4});
    Tensor b({3});
    Rng r2(12);
    w = random_normal({3, 4}, r2, 0.5f);
    b = random_uniform({3}, r2);
    Tensor dz = dense(t.input(pooled), t.input(w), t.input(b)).value();
    REQUIRE(dz.shape() == std::vector<int>{2, 3});
    for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 3; ++o) {
            double acc = b[o];
            for (int i = 0; i < 4; ++i) acc += pooled[n * 4 + i] * w[o * 4 + i];
            CHECK(dz[n * 3 + o] == doctest::Approx(acc).epsilon(1e-5));
        }

    Parameter px("x", x);
    Parameter pw("w", w), pb("b", b);
    const Tensor wt = random_normal({2, 3}, r2);
    auto out = fd_check({&px, &pw, &pb}, [&](Tape& tt) {
        return weighted_sum(tt, dense(global_avg_pool(tt.leaf(px)), tt.leaf(pw), tt.leaf(pb)), wt);
    });
    CAPTURE(out.worst);
    CHECK(out.max_rel < 1e-2);
}

TEST_CASE("l2_normalize_rows yields unit rows and correct gradients") {
    Rng rng(13);
    Parameter px("x", random_uniform({4, 6}, rng, -2.0f, 2.0f));
    Tape t(false);
    Tensor y = l2_normalize_rows(t.leaf(px)).value();
    for (int n = 0; n < 4; ++n) {
        double s = 0.0;
        for (int d = 0; d < 6; ++d) s += static_cast<double>(y[n * 6 + d]) * y[n * 6 + d];
        CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-5));
    }
    const Tensor w = random_normal({4, 6}, rng);
    auto out = fd_check(
        {&px}, [&](Tape& tt) { return weighted_sum(tt, l2_normalize_rows(tt.leaf(px)), w); });
    CAPTURE(out.worst);
    CHECK(out.max_rel < 1e-2);
}

TEST_CASE("scalar reductions match loop oracles and differentiate") {
    Rng rng(14);
    Parameter pa("a", random_uniform({3, 7}, rng));
    Parameter pb("b", random_uniform({3, 7}, rng));
    Tape t(false);
    Var va = t.leaf(pa), vb = t.leaf(pb);

    double s = 0.0, sq = 0.0, msd = 0.0, mse = 0.0;
    for (int64_t i = 0; i < pa.value.size(); ++i) {
        s += pa.value[i];
        sq += static_cast<double>(pa.value[i]) * pa.value[i];
        const double d = static_cast<double>(pa.value[i]) - pb.value[i];
        mse += d * d;
    }
    for (int n = 0; n < 3; ++n) {
        double row = 0.0;
        for (int d = 0; d < 7; ++d) {
            const double diff = static_cast<double>(pa.value[n * 7 + d]) - pb.value[n * 7 + d];
            row += diff * diff;
        }
        msd += row;
    }
    CHECK(sum_all(va).value()[0] == doctest::Approx(s).epsilon(1e-5));
    CHECK(frobenius_norm(va).value()[0] == doctest::Approx(std::sqrt(sq)).epsilon(1e-5));
    CHECK(mse_loss(va, vb).value()[0] == doctest::Approx(mse / 21.0).epsilon(1e-5));
    CHECK(mean_row_sqdist(va, vb).value()[0] == doctest::Approx(msd / 3.0).epsilon(1e-5));

    auto check = [&](const std::function<Var(Tape&)>& build) {
        auto out = fd_check({&pa, &pb}, build);
        CAPTURE(out.worst);
        CHECK(out.max_rel < 1e-2);
    };
    check([&](Tape& tt) { return frobenius_norm(tt.leaf(pa)); });
    check([&](Tape& tt) { return mse_loss(tt.leaf(pa), tt.leaf(pb)); });
    check([&](Tape& tt) { return mean_row_sqdist(tt.leaf(pa), tt.leaf(pb)); });
}

TEST_CASE("triplet_hinge value matches triplet_loss and differentiates") {
    Rng rng(15);
    Parameter pe("e", random_uniform({6, 8}, rng));
    std::vector<TripletIndex> triples{{0, 1, 2}, {3, 4, 5}, {1, 0, 4}, {2, 3, 0}};
    Tape t(false);
    const double viaGraph = triplet_hinge(t.leaf(pe), triples, 0.2f).value()[0];
    const double viaDouble = triplet_loss(pe.value, triples, 0.2f);
    CHECK(viaGraph == doctest::Approx(viaDouble).epsilon(1e-5));

    auto out = fd_check(
        {&pe}, [&](Tape& tt) { return triplet_hinge(tt.leaf(pe), triples, 0.2f); });
    CAPTURE(out.worst);
    CHECK(out.max_rel < 1e-2);
}

TEST_CASE("spectral_sigma approaches the true top singular value") {
    Rng rng(16);
    for (int draw = 0; draw < 8; ++draw) {
        Tensor w = random_normal({64, 576}, rng, 0.1f);
        SnState state;
        state.init(64, std::min(32, 64), rng);
        SigmaEstimate est = spectral_sigma(w, state, 5);
        const double truth = top_singular_value_svd(w);
        CHECK(std::abs(est.sigma - truth) / truth < 1e-2);
    }
}

TEST_CASE("spectral_normalize scales the weight to unit top singular value") {
    Rng rng(17);
    Parameter pw("w", random_normal({16, 3, 3, 8}, rng, 0.5f));
    SnState state;
    Tape t(false);
    Tensor what = spectral_normalize(t.leaf(pw), state, 5).value();
    REQUIRE(what.shape() == pw.value.shape());
    const double sigma = top_singular_value_svd(what.reshaped({16, 72}));
    CHECK(std::abs(sigma - 1.0) < 1e-2);
}

TEST_CASE("spectral_normalize update flag controls basis persistence") {
    Rng rng(18);
    Parameter pw("w", random_normal({8, 3, 3, 4}, rng, 0.5f));
    SnState state;
    {
        Tape t(false);
        (void)spectral_normalize(t.leaf(pw), state, 5);
    }
    REQUIRE(state.initialized());
    const Tensor basis = state.basis;
    {
        Tape t(false);
        (void)spectral_normalize(t.leaf(pw), state, 5, false);
    }
    CHECK(tu::max_abs_diff(state.basis, basis) == 0.0);
    {
        Tape t(false);
        (void)spectral_normalize(t.leaf(pw), state, 5, true);
    }
    CHECK(tu::max_abs_diff(state.basis, basis) > 0.0);
}

TEST_CASE("spectral_normalize passes a zero weight through unchanged") {
    Parameter pw("w", Tensor({4, 3, 3, 2}));
    SnState state;
    Tape t(false);
    Tensor what = spectral_normalize(t.leaf(pw), state, 5).value();
    CHECK(what.all_finite());
    CHECK(tu::max_abs_diff(what, pw.value) == 0.0);
}

TEST_CASE("spectral_normalize gradients vs finite differences") {
    Rng rng(19);
    Parameter pw("w", random_normal({6, 3, 3, 4}, rng, 0.4f));
    SnState state;
    {
        // Warm the basis once so every finite-difference eval sees it.
        Tape t(false);
        (void)spectral_normalize(t.leaf(pw), state, 5, true);
    }
    const Tensor wt = random_normal({6, 3, 3, 4}, rng);
    auto out = fd_check({&pw}, [&](Tape& t) {
        return weighted_sum(t, spectral_normalize(t.leaf(pw), state, 5, false), wt);
    });
    CAPTURE(out.worst);
    CHECK(out.max_rel < 1e-2);
}

TEST_CASE("shape errors are reported") {
    Tape t(false);
    Tensor a({2, 3}), b({3, 2});
    CHECK_THROWS_AS((void)add(t.input(a), t.input(b)), ShapeError);
    CHECK_THROWS_AS((void)mse_loss(t.input(a), t.input(b)), ShapeError);
    Tensor x({1, 4, 4, 2}), w({3, 3, 3, 5});
    CHECK_THROWS_AS((void)conv2d(t.input(x), t.input(w), Var{}, 1, 1), ShapeError);
}
