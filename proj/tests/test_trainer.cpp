#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "cmamba/data.hpp"
#include "cmamba/rng.hpp"
#include "cmamba/trainer.hpp"
#include "doctest.h"

using namespace cmamba;

namespace {

// small multichannel series: two sinusoids per channel plus mild noise
TimeSeriesTable sinusoid_table(std::size_t rows, std::size_t channels, std::uint64_t seed) {
    TimeSeriesTable t;
    t.rows = rows;
    t.channels = channels;
    for (std::size_t c = 0; c < channels; ++c) t.column_names.push_back("c" + std::to_string(c));
    t.values.resize(rows * channels);
    Rng rng(seed);
    std::vector<double> phase(channels), amp(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        phase[c] = rng.uniform(0, 6.28);
        amp[c] = rng.uniform(0.5, 1.5);
    }
    const double tau = 6.283185307179586;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double x = static_cast<double>(r);
            // periods 16 and 32: both fit inside the 32-step look-back
            t.values[r * channels + c] = amp[c] * std::sin(tau * x / 16.0 + phase[c]) +
                                         0.4 * std::sin(tau * x / 32.0 + 2.0 * phase[c]) +
                                         0.02 * rng.normal();
        }
    }
    return t;
}

ModelConfig tiny_model(std::size_t channels) {
    ModelConfig cfg;
    cfg.look_back = 32;
    cfg.horizon = 8;
    cfg.channels = channels;
    cfg.patch_len = 8;
    cfg.stride = 4;
    cfg.embed_dim = 16;
    cfg.num_blocks = 1;
    cfg.block.d_state = 8;
    return cfg;
}

}  // namespace

TEST_CASE("loss values on the worked examples") {
    Tensor pred({2}, std::vector<double>{1, 2});
    Tensor target({2}, std::vector<double>{2, 2});
    CHECK(loss(LossKind::l1, pred, target).item() == doctest::Approx(0.5));
    CHECK(loss(LossKind::l2, pred, target).item() == doctest::Approx(0.5));
    Tensor bad({3}, 0.0);
    CHECK_THROWS_AS(loss(LossKind::l1, pred, bad), std::invalid_argument);
}

TEST_CASE("l1 subgradient is zero at exact ties") {
    Tensor pred({3}, std::vector<double>{1.0, 2.0, 5.0});
    pred.set_requires_grad();
    Tensor target({3}, std::vector<double>{2.0, 2.0, 3.0});
    Tape tape;
    backward(loss(LossKind::l1, pred, target));
    const auto& g = pred.grad();
    CHECK(g[0] == doctest::Approx(-1.0 / 3.0));
    CHECK(g[1] == 0.0);
    CHECK(g[2] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("metrics on perfect, shifted, and random inputs") {
    std::vector<double> truth{1, 2, 3, 4};
    {
        auto [mse, mae] = metrics(truth, truth);
        CHECK(mse == 0.0);
        CHECK(mae == 0.0);
    }
    {
        std::vector<double> shifted{2, 3, 4, 5};
        auto [mse, mae] = metrics(shifted, truth);
        CHECK(mse == doctest::Approx(1.0));
        CHECK(mae == doctest::Approx(1.0));
    }
    {
        // independent one-pass accumulation oracle
        Rng rng(3);
        std::vector<double> p(257), t(257);
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = rng.uniform(-4, 4);
            t[i] = rng.uniform(-4, 4);
        }
        long double se = 0, ae = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const long double d = static_cast<long double>(p[i]) - t[i];
            se += d * d;
            ae += fabsl(d);
        }
        auto [mse, mae] = metrics(p, t);
        CHECK(std::fabs(mse - static_cast<double>(se / 257.0L)) < 1e-12);
        CHECK(std::fabs(mae - static_cast<double>(ae / 257.0L)) < 1e-12);
    }
    CHECK_THROWS_AS(metrics({}, {}), std::invalid_argument);
}

TEST_CASE("adam first step and zero-gradient behaviour") {
    {
        Tensor p = Tensor::scalar(1.0).set_requires_grad();
        p.zero_grad();
        p.data()->grad[0] = 1.0;
        AdamConfig cfg;
        cfg.lr = 1e-3;
        cfg.clip_norm = 0.0;
        Adam adam({{"p", p}}, cfg);
        adam.step();
        CHECK(p.item() == doctest::Approx(1.0 - 1e-3).epsilon(1e-7));
        CHECK(p.grad()[0] == 0.0);  // gradients zeroed after the step
    }
    {
        Tensor p = Tensor::scalar(1.0).set_requires_grad();
        p.zero_grad();
        Adam adam({{"p", p}}, AdamConfig{});
        adam.step();
        CHECK(p.item() == 1.0);
    }
}

TEST_CASE("adam matches a scalar textbook recurrence on a quadratic") {
    // optimize f(theta) = theta^2 from theta = 1 at lr 0.1
    Tensor theta = Tensor::scalar(1.0).set_requires_grad();
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.clip_norm = 0.0;
    Adam adam({{"theta", theta}}, cfg);

    // independent scalar recurrence
    double ref = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2.0 * ref;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.999, t));
        ref -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    }

    for (int t = 1; t <= 100; ++t) {
        {
            Tape tape;
            backward(mul(theta, theta));
        }
        adam.step();
    }
    CHECK(std::fabs(theta.item()) < 0.1);
    CHECK(theta.item() == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("adam aborts on non-finite gradients naming the parameter") {
    Tensor p = Tensor::scalar(1.0).set_requires_grad();
    p.zero_grad();
    p.data()->grad[0] = std::numeric_limits<double>::quiet_NaN();
    AdamConfig cfg;
    cfg.clip_norm = 0.0;  // keep the nan visible to the update
    Adam adam({{"weights.w1", p}}, cfg);
    CHECK_THROWS_WITH_AS(adam.step(), doctest::Contains("weights.w1"), std::runtime_error);
}

TEST_CASE("gradient clipping rescales the global norm") {
    Tensor p({2}, std::vector<double>{0.0, 0.0});
    p.set_requires_grad();
    p.zero_grad();
    p.data()->grad[0] = 30.0;
    p.data()->grad[1] = 40.0;  // norm 50
    AdamConfig cfg;
    cfg.lr = 1.0;
    cfg.clip_norm = 5.0;
    Adam adam({{"p", p}}, cfg);
    adam.step();
    // both coordinates scaled by 0.1 before the update; with bias correction
    // the first step moves by lr * g/|g| elementwise, so just check symmetry
    CHECK(p.values()[0] < 0.0);
    CHECK(p.values()[1] < 0.0);
}

TEST_CASE("a single small-rate step decreases the loss on a frozen batch") {
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        ModelConfig cfg = tiny_model(2);
        CMambaModel model(cfg, 100 + trial);
        Rng rng(200 + trial);
        Tensor x = Tensor::uniform({4, cfg.look_back, cfg.channels}, rng, -1, 1);
        Tensor y = Tensor::uniform({4, cfg.horizon, cfg.channels}, rng, -1, 1);

        AdamConfig acfg;
        acfg.lr = 1e-5;
        Adam adam(model.parameters(), acfg);

        double before;
        {
            Tape tape;
            Tensor l = loss(LossKind::l1, model_forward(model, x, true), y);
            before = l.item();
            backward(l);
        }
        adam.step();
        double after;
        {
            Tensor l = loss(LossKind::l1, model_forward(model, x, false), y);
            after = l.item();
        }
        CHECK(after < before);
    }
}

TEST_CASE("training learns a synthetic sinusoid mixture") {
    auto table = sinusoid_table(400, 2, 5);
    normalize_global(table, 280);
    auto views = make_splits(table.rows, SplitSpec{0.7, 0.1, 0.2}, 32);
    WindowSet train_w(table, views.train, 32, 8);
    WindowSet val_w(table, views.val, 32, 8);
    WindowSet test_w(table, views.test, 32, 8);

    ModelConfig mcfg = tiny_model(2);
    CMambaModel model(mcfg, 2020);
    TrainConfig tcfg;
    tcfg.epochs = 20;
    tcfg.patience = 20;
    tcfg.batch_size = 32;
    tcfg.adam.lr = 5e-3;
    tcfg.seed = 2020;
    MixupConfig mix;
    mix.sigma = 0.5;

    auto report = train(model, train_w, val_w, test_w, tcfg, mix);
    CHECK(report.test_mae < 0.1);
    CHECK(report.best_epoch >= 1);
    CHECK(report.val_loss.size() == report.train_loss.size());
}

TEST_CASE("identical seeds give byte-identical reports") {
    auto table = sinusoid_table(300, 2, 7);
    normalize_global(table, 210);
    auto views = make_splits(table.rows, SplitSpec{0.7, 0.1, 0.2}, 32);
    WindowSet train_w(table, views.train, 32, 8);
    WindowSet val_w(table, views.val, 32, 8);
    WindowSet test_w(table, views.test, 32, 8);

    auto run = [&]() {
        CMambaModel model(tiny_model(2), 11);
        TrainConfig tcfg;
        tcfg.epochs = 3;
        tcfg.batch_size = 16;
        tcfg.seed = 11;
        MixupConfig mix;
        mix.sigma = 1.0;
        return train(model, train_w, val_w, test_w, tcfg, mix).to_text();
    };
    CHECK(run() == run());
}

TEST_CASE("sigma zero and disabled mixup produce identical reports") {
    auto table = sinusoid_table(300, 3, 9);
    normalize_global(table, 210);
    auto views = make_splits(table.rows, SplitSpec{0.7, 0.1, 0.2}, 32);
    WindowSet train_w(table, views.train, 32, 8);
    WindowSet val_w(table, views.val, 32, 8);
    WindowSet test_w(table, views.test, 32, 8);

    auto run = [&](MixupConfig mix) {
        CMambaModel model(tiny_model(3), 13);
        TrainConfig tcfg;
        tcfg.epochs = 2;
        tcfg.batch_size = 16;
        tcfg.seed = 13;
        return train(model, train_w, val_w, test_w, tcfg, mix).to_text();
    };
    MixupConfig zero;
    zero.sigma = 0.0;
    MixupConfig off;
    off.mode = MixupMode::off;
    off.enabled = false;
    CHECK(run(zero) == run(off));
}

TEST_CASE("evaluation mutates nothing") {
    auto table = sinusoid_table(200, 2, 15);
    normalize_global(table, 140);
    WindowSet w(table, RowRange{0, 200, 0}, 32, 8);
    CMambaModel model(tiny_model(2), 17);
    const auto before = snapshot_params(model.parameters());
    (void)evaluate_metrics(model, w, 16);
    (void)evaluate_loss(model, w, LossKind::l1, 16);
    (void)predict_all(model, w, 16);
    const auto after = snapshot_params(model.parameters());
    CHECK(before == after);
    for (const auto& [name, p] : model.parameters()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("report serialization includes losses but no timing") {
    TrainReport r;
    r.seed = 5;
    r.train_loss = {0.5, 0.4};
    r.val_loss = {0.6, 0.55};
    r.best_epoch = 2;
    r.best_val = 0.55;
    r.test_mse = 0.30;
    r.test_mae = 0.25;
    r.wall_seconds = 123.0;
    const std::string text = r.to_text();
    CHECK(text.find("test_mse") != std::string::npos);
    CHECK(text.find("epoch 2") != std::string::npos);
    CHECK(text.find("123") == std::string::npos);  // wall time never serialized
}
