#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "cmamba/rng.hpp"
#include "cmamba/ssm.hpp"
#include "cmamba/tensor.hpp"
#include "doctest.h"

using namespace cmamba;

namespace {

// Independent token-by-token reference: plain loops, no shared kernels.
// A_full is (E,S) always (the caller expands shared A).
std::vector<double> naive_scan(const std::vector<double>& a_full, const std::vector<double>& b,
                               const std::vector<double>& c, const std::vector<double>& dt,
                               const std::vector<double>& x, std::size_t bsz, std::size_t v,
                               std::size_t n, std::size_t e, std::size_t s) {
    auto phi = [](double z) {
        if (std::fabs(z) < 1e-4) return 1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0;
        return (std::exp(z) - 1.0) / z;
    };
    std::vector<double> y(bsz * v * n * e, 0.0);
    for (std::size_t bi = 0; bi < bsz; ++bi) {
        for (std::size_t vi = 0; vi < v; ++vi) {
            std::vector<std::vector<double>> h(e, std::vector<double>(s, 0.0));
            const std::size_t lane = bi * v + vi;
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t ei = 0; ei < e; ++ei) {
                    const double d = dt[(lane * n + t) * e + ei];
                    const double xe = x[(lane * n + t) * e + ei];
                    double acc = 0.0;
                    for (std::size_t si = 0; si < s; ++si) {
                        const double av = a_full[ei * s + si];
                        const double z = d * av;
                        const double abar = std::exp(z);
                        const double bbar = phi(z) * d * b[(lane * n + t) * s + si];
                        h[ei][si] = abar * h[ei][si] + bbar * xe;
                        acc += c[(lane * n + t) * s + si] * h[ei][si];
                    }
                    y[(lane * n + t) * e + ei] = acc;
                }
            }
        }
    }
    return y;
}

struct ScanInstance {
    Tensor a, b, c, dt, x;
    std::size_t bsz, v, n, e, s;
    std::vector<double> a_full;  // (E,S) expansion of a
};

ScanInstance random_instance(Rng& rng, bool per_feature) {
    ScanInstance inst;
    inst.bsz = 1 + rng.below(2);
    inst.v = 1 + rng.below(3);
    inst.n = 1 + rng.below(8);
    inst.e = 1 + rng.below(4);
    inst.s = 16;
    inst.a = per_feature ? Tensor::uniform({inst.e, inst.s}, rng, -1.5, -0.1)
                         : Tensor::uniform({inst.s}, rng, -1.5, -0.1);
    inst.b = Tensor::uniform({inst.bsz, inst.v, inst.n, inst.s}, rng, -2, 2);
    inst.c = Tensor::uniform({inst.bsz, inst.v, inst.n, inst.s}, rng, -2, 2);
    inst.dt = Tensor::uniform({inst.bsz, inst.v, inst.n, inst.e}, rng, 1e-3, 0.9);
    inst.x = Tensor::uniform({inst.bsz, inst.v, inst.n, inst.e}, rng, -2, 2);
    for (std::size_t ei = 0; ei < inst.e; ++ei) {
        for (std::size_t si = 0; si < inst.s; ++si) {
            inst.a_full.push_back(per_feature ? inst.a.at({ei, si}) : inst.a.at({si}));
        }
    }
    return inst;
}

}  // namespace

TEST_CASE("discretize closed-form scalar case") {
    Tensor a({1}, std::vector<double>{-1.0});
    Tensor b({1}, std::vector<double>{1.0});
    Tensor dt({1}, std::vector<double>{std::log(2.0)});
    auto [abar, bbar] = discretize(a, b, dt);
    CHECK(abar.shape() == Shape{1, 1});
    CHECK(abar.item() == doctest::Approx(0.5).epsilon(1e-12));
    // ((0.5 - 1) / (-1)) * 1
    CHECK(bbar.item() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("discretize small-step limit uses the series branch") {
    const double tiny = 1e-9;
    Tensor a({1}, std::vector<double>{-1.0});
    Tensor b({1}, std::vector<double>{3.0});
    Tensor dt({1}, std::vector<double>{tiny});
    auto [abar, bbar] = discretize(a, b, dt);
    CHECK(abar.item() == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(bbar.item() == doctest::Approx(tiny * 3.0).epsilon(1e-6));
}

TEST_CASE("discretize matches the elementwise formula on a random batch") {
    Rng rng(3);
    const std::size_t e = 4, s = 16;
    Tensor a = Tensor::uniform({e, s}, rng, -2, -0.1);
    Tensor b = Tensor::uniform({3, s}, rng, -2, 2);
    Tensor dt = Tensor::uniform({3, e}, rng, 0.01, 0.9);
    auto [abar, bbar] = discretize(a, b, dt);
    CHECK(abar.shape() == Shape{3, e, s});
    for (std::size_t l = 0; l < 3; ++l) {
        for (std::size_t ei = 0; ei < e; ++ei) {
            for (std::size_t si = 0; si < s; ++si) {
                const double z = dt.at({l, ei}) * a.at({ei, si});
                CHECK(abar.at({l, ei, si}) == doctest::Approx(std::exp(z)).epsilon(1e-12));
                const double expect = (std::exp(z) - 1.0) / z * dt.at({l, ei}) * b.at({l, si});
                CHECK(bbar.at({l, ei, si}) == doctest::Approx(expect).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("series and closed-form branches agree at the switch point") {
    // straight-line evaluations of both branches at |z| = 1e-4
    for (double z : {1e-4, -1e-4, 1.0000001e-4, -1.0000001e-4, 0.9999999e-4}) {
        const double full = (std::exp(z) - 1.0) / z;
        const double series = 1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0;
        CHECK(std::fabs(full - series) < 1e-12);
        CHECK(std::fabs(detail::zoh_phi(z) - full) < 1e-12);
    }
    // the derivative switches at 5e-3, where its closed form stops cancelling
    for (double z : {5e-3, -5e-3, 5.0001e-3, -5.0001e-3}) {
        const double dfull = (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
        const double dseries = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0 + z * z * z * z / 144.0;
        CHECK(std::fabs(dfull - dseries) < 1e-9);
        CHECK(std::fabs(detail::zoh_dphi(z) - dseries) < 1e-9);
    }
}

TEST_CASE("discretize rejects non-positive step sizes") {
    Tensor a({1}, std::vector<double>{-1.0});
    Tensor b({1}, std::vector<double>{1.0});
    CHECK_THROWS_AS(discretize(a, b, Tensor({1}, std::vector<double>{0.0})), std::domain_error);
    CHECK_THROWS_AS(discretize(a, b, Tensor({1}, std::vector<double>{-0.5})), std::domain_error);
}

TEST_CASE("scan reproduces the hand-unrolled two-token recurrence") {
    // abar = 0.5 and bbar = 0.5 via a = -1, dt = ln 2, b = 1
    const double ln2 = std::log(2.0);
    Tensor a({1}, std::vector<double>{-1.0});
    Tensor b({1, 1, 2, 1}, std::vector<double>{1, 1});
    Tensor c({1, 1, 2, 1}, std::vector<double>{1, 1});
    Tensor dt({1, 1, 2, 1}, std::vector<double>{ln2, ln2});
    Tensor x({1, 1, 2, 1}, std::vector<double>{1, 1});
    Tensor y = selective_scan_core(a, b, c, dt, x);
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.at({0, 0, 1, 0}) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("zero input produces zero output") {
    Rng rng(5);
    auto inst = random_instance(rng, false);
    Tensor x0(inst.x.shape(), 0.0);
    Tensor y = selective_scan_core(inst.a, inst.b, inst.c, inst.dt, x0);
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("scan equals the naive unrolled oracle on 120 random instances") {
    Rng rng(42);
    double worst = 0.0;
    for (int trial = 0; trial < 120; ++trial) {
        auto inst = random_instance(rng, trial % 2 == 0);
        Tensor y = selective_scan_core(inst.a, inst.b, inst.c, inst.dt, inst.x);
        const auto ref = naive_scan(inst.a_full, inst.b.values(), inst.c.values(), inst.dt.values(),
                                    inst.x.values(), inst.bsz, inst.v, inst.n, inst.e, inst.s);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            worst = std::max(worst, std::fabs(y.values()[i] - ref[i]));
        }
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("scan with token-constant parameters matches the convolution form") {
    Rng rng(33);
    for (std::size_t n : {1UL, 4UL, 16UL, 32UL}) {
        const std::size_t e = 3, s = 5;
        Tensor a = Tensor::uniform({e, s}, rng, -1.5, -0.2);
        Tensor b_row = Tensor::uniform({s}, rng, -1, 1);
        Tensor c_row = Tensor::uniform({s}, rng, -1, 1);
        Tensor dt_row = Tensor::uniform({e}, rng, 0.05, 0.8);
        Tensor x = Tensor::uniform({n, e}, rng, -2, 2);

        // tile the constants over tokens for the data-dependent entry point
        std::vector<double> bt, ct, dtt;
        for (std::size_t t = 0; t < n; ++t) {
            bt.insert(bt.end(), b_row.values().begin(), b_row.values().end());
            ct.insert(ct.end(), c_row.values().begin(), c_row.values().end());
            dtt.insert(dtt.end(), dt_row.values().begin(), dt_row.values().end());
        }
        Tensor b4({1, 1, n, s}, bt), c4({1, 1, n, s}, ct), dt4({1, 1, n, e}, dtt);
        Tensor x4 = reshape(x, {1, 1, n, e});
        Tensor y_scan = selective_scan_core(a, b4, c4, dt4, x4);

        auto [abar, bbar] = discretize(a, b_row, dt_row);
        Tensor d0({e}, 0.0);
        Tensor y_conv = lti_convolution_reference(x, abar, bbar, c_row, d0);
        for (std::size_t i = 0; i < y_conv.size(); ++i) {
            CHECK(std::fabs(y_scan.values()[i] - y_conv.values()[i]) < 1e-8);
        }
    }
}

TEST_CASE("convolution reference single-step and memoryless cases") {
    const std::size_t e = 2, s = 3;
    Rng rng(9);
    Tensor abar = Tensor::uniform({e, s}, rng, 0.1, 0.9);
    Tensor bbar = Tensor::uniform({e, s}, rng, -1, 1);
    Tensor c = Tensor::uniform({s}, rng, -1, 1);
    Tensor d = Tensor::uniform({e}, rng, -1, 1);
    {
        Tensor x({1, e}, std::vector<double>{1.5, -2.0});
        Tensor y = lti_convolution_reference(x, abar, bbar, c, d);
        for (std::size_t ei = 0; ei < e; ++ei) {
            double cb = 0;
            for (std::size_t si = 0; si < s; ++si) cb += c.at({si}) * bbar.at({ei, si});
            CHECK(y.at({0, ei}) == doctest::Approx((cb + d.at({ei})) * x.at({0, ei})).epsilon(1e-12));
        }
    }
    {
        // zero transition truncates the kernel to its first tap
        Tensor azero({e, s}, 0.0);
        Tensor x = Tensor::uniform({4, e}, rng, -2, 2);
        Tensor y = lti_convolution_reference(x, azero, bbar, c, d);
        for (std::size_t t = 0; t < 4; ++t) {
            for (std::size_t ei = 0; ei < e; ++ei) {
                double cb = 0;
                for (std::size_t si = 0; si < s; ++si) cb += c.at({si}) * bbar.at({ei, si});
                CHECK(y.at({t, ei}) == doctest::Approx((cb + d.at({ei})) * x.at({t, ei})).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("causality: a perturbation at token t only changes outputs at >= t") {
    Rng rng(77);
    auto inst = random_instance(rng, false);
    if (inst.n < 2) inst.n = 4;  // ensure room for a mid-sequence probe
    inst.b = Tensor::uniform({inst.bsz, inst.v, inst.n, inst.s}, rng, -2, 2);
    inst.c = Tensor::uniform({inst.bsz, inst.v, inst.n, inst.s}, rng, -2, 2);
    inst.dt = Tensor::uniform({inst.bsz, inst.v, inst.n, inst.e}, rng, 1e-3, 0.9);
    inst.x = Tensor::uniform({inst.bsz, inst.v, inst.n, inst.e}, rng, -2, 2);

    Tensor base = selective_scan_core(inst.a, inst.b, inst.c, inst.dt, inst.x);
    for (std::size_t t = 0; t < inst.n; ++t) {
        Tensor xp = inst.x.clone();
        xp.values()[(0 * inst.v * inst.n + t) * inst.e] += 0.25;  // lane (0,0), token t
        Tensor probed = selective_scan_core(inst.a, inst.b, inst.c, inst.dt, xp);
        for (std::size_t tt = 0; tt < inst.n; ++tt) {
            double diff = 0;
            for (std::size_t ei = 0; ei < inst.e; ++ei) {
                diff = std::max(diff, std::fabs(probed.at({0, 0, tt, ei}) - base.at({0, 0, tt, ei})));
            }
            if (tt < t) CHECK(diff == 0.0);
        }
        double at_t = 0;
        for (std::size_t ei = 0; ei < inst.e; ++ei) {
            at_t = std::max(at_t, std::fabs(probed.at({0, 0, t, ei}) - base.at({0, 0, t, ei})));
        }
        CHECK(at_t > 0.0);
    }
}

TEST_CASE("stability: bounded state under negative A and bounded steps") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 64, e = 2, s = 4;
        Tensor a = Tensor::uniform({e, s}, rng, -2.0, -0.05);
        Tensor b_row = Tensor::uniform({s}, rng, -1, 1);
        Tensor dt_row = Tensor::uniform({e}, rng, 0.05, 0.9);
        std::vector<double> xs(n * e);
        for (auto& v : xs) v = rng.uniform(-3, 3);

        auto [abar_t, bbar_t] = discretize(a, b_row, dt_row);
        double max_abar = 0, max_bbar = 0, max_x = 0;
        for (double v : abar_t.values()) max_abar = std::max(max_abar, std::fabs(v));
        for (double v : bbar_t.values()) max_bbar = std::max(max_bbar, std::fabs(v));
        for (double v : xs) max_x = std::max(max_x, std::fabs(v));
        REQUIRE(max_abar < 1.0);
        const double bound = max_bbar * max_x / (1.0 - max_abar);

        // unroll the constant-parameter recurrence and track |h|
        std::vector<double> h(e * s, 0.0);
        double max_h = 0;
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t ei = 0; ei < e; ++ei) {
                for (std::size_t si = 0; si < s; ++si) {
                    h[ei * s + si] = abar_t.at({ei, si}) * h[ei * s + si] +
                                     bbar_t.at({ei, si}) * xs[t * e + ei];
                    max_h = std::max(max_h, std::fabs(h[ei * s + si]));
                }
            }
        }
        CHECK(max_h <= bound * (1.0 + 1e-12));
    }
}

TEST_CASE("scan core gradients match finite differences") {
    Rng rng(21);
    const std::size_t bsz = 1, v = 1, n = 3, e = 2, s = 3;
    Tensor a = Tensor::uniform({s}, rng, -1.5, -0.5).set_requires_grad();
    Tensor b = Tensor::uniform({bsz, v, n, s}, rng, -1, 1).set_requires_grad();
    Tensor c = Tensor::uniform({bsz, v, n, s}, rng, -1, 1).set_requires_grad();
    Tensor dt = Tensor::uniform({bsz, v, n, e}, rng, 0.1, 0.8).set_requires_grad();
    Tensor x = Tensor::uniform({bsz, v, n, e}, rng, -1, 1).set_requires_grad();
    auto f = [&]() { return mean_all(selective_scan_core(a, b, c, dt, x)); };
    auto report = grad_check(f, {{"a", a}, {"b", b}, {"c", c}, {"dt", dt}, {"x", x}});
    CHECK_MESSAGE(report.pass, report.summary());

    // feature-specific transition parameter as well
    Tensor a2 = Tensor::uniform({e, s}, rng, -1.5, -0.5).set_requires_grad();
    auto f2 = [&]() { return mean_all(selective_scan_core(a2, b, c, dt, x)); };
    auto report2 = grad_check(f2, {{"a2", a2}, {"x", x}});
    CHECK_MESSAGE(report2.pass, report2.summary());
}

TEST_CASE("scan reports the token of a non-finite state") {
    Rng rng(61);
    auto inst = random_instance(rng, false);
    Tensor x = inst.x.clone();
    const std::size_t t_bad = inst.n - 1;
    x.values()[(0 * inst.n + t_bad) * inst.e] = std::numeric_limits<double>::infinity();
    const std::string want = "token " + std::to_string(t_bad);
    CHECK_THROWS_WITH_AS(selective_scan_core(inst.a, inst.b, inst.c, inst.dt, x),
                         doctest::Contains(want.c_str()), std::runtime_error);
}

TEST_CASE("block preserves shape at paper-size dimensions") {
    MambaBlockConfig cfg;
    cfg.d_model = 128;
    Rng rng(1);
    MambaBlockParams params;
    params.init(cfg, rng);
    Tensor z = Tensor::uniform({2, 7, 12, 128}, rng, -1, 1);
    Tensor out = mamba_block_forward(z, cfg, params);
    CHECK(out.shape() == Shape{2, 7, 12, 128});
}

TEST_CASE("transition parameter counts under both sharing modes") {
    Rng rng(2);
    MambaBlockConfig fi;
    fi.d_model = 128;
    MambaBlockParams p_fi;
    p_fi.init(fi, rng);
    CHECK(p_fi.a_param_count() == 16);

    MambaBlockConfig fs = fi;
    fs.a_mode = AMode::feature_specific;
    MambaBlockParams p_fs;
    p_fs.init(fs, rng);
    CHECK(p_fs.a_param_count() == 128 * 16);
    CHECK(p_fs.a_param_count() - p_fi.a_param_count() == (128 - 1) * 16);
}

TEST_CASE("block trace reflects the configuration flags") {
    MambaBlockConfig vanilla = MambaBlockConfig::vanilla(8);
    auto tr = block_trace(vanilla);
    CHECK(std::count(tr.begin(), tr.end(), "causal_conv") == 1);
    CHECK(std::count(tr.begin(), tr.end(), "d_free") == 1);
    CHECK(std::count(tr.begin(), tr.end(), "a_feature_specific") == 1);

    MambaBlockConfig modified;
    modified.d_model = 8;
    auto tr2 = block_trace(modified);
    CHECK(std::count(tr2.begin(), tr2.end(), "causal_conv") == 0);
    CHECK(std::count(tr2.begin(), tr2.end(), "d_data_dependent") == 1);
    CHECK(std::count(tr2.begin(), tr2.end(), "a_feature_independent") == 1);
    CHECK(std::count(tr2.begin(), tr2.end(), "z_gate") == 1);
}

TEST_CASE("block gradients pass the finite-difference check in both designs") {
    for (bool vanilla : {false, true}) {
        MambaBlockConfig cfg;
        cfg.d_model = 8;
        cfg.d_state = 4;
        if (vanilla) cfg = MambaBlockConfig::vanilla(8, 4);
        Rng rng(31);
        MambaBlockParams params;
        params.init(cfg, rng);
        Tensor z = Tensor::uniform({1, 2, 4, 8}, rng, -1, 1);
        std::vector<std::pair<std::string, Tensor>> named;
        params.collect_params("block", named);
        auto f = [&]() { return mean_all(mamba_block_forward(z, cfg, params)); };
        auto report = grad_check(f, named);
        CHECK_MESSAGE(report.pass, report.summary());
    }
}

TEST_CASE("causal conv matches a hand computation and differentiates") {
    Rng rng(41);
    Tensor x = Tensor::uniform({1, 1, 5, 2}, rng, -1, 1).set_requires_grad();
    Tensor w = Tensor::uniform({2, 3}, rng, -1, 1).set_requires_grad();
    Tensor b = Tensor::uniform({2}, rng, -1, 1).set_requires_grad();
    Tensor y = causal_depthwise_conv(x, w, b);
    for (std::size_t t = 0; t < 5; ++t) {
        for (std::size_t e = 0; e < 2; ++e) {
            double acc = b.at({e});
            for (std::size_t k = 0; k < 3; ++k) {
                const std::ptrdiff_t tau = static_cast<std::ptrdiff_t>(t + k) - 2;
                if (tau < 0) continue;
                acc += w.at({e, k}) * x.at({0, 0, static_cast<std::size_t>(tau), e});
            }
            CHECK(y.at({0, 0, t, e}) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    auto f = [&]() { return mean_all(causal_depthwise_conv(x, w, b)); };
    auto report = grad_check(f, {{"x", x}, {"w", w}, {"b", b}});
    CHECK_MESSAGE(report.pass, report.summary());
}
