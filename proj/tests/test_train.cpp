#include <cmath>

#include "doctest.h"

#include "carspeed/model.hpp"
#include "carspeed/train.hpp"

using namespace carspeed;

namespace {

// a tiny synthetic dataset whose labels depend on the window content
WindowedDataset toy_dataset(int n, int w, uint64_t seed) {
    WindowedDataset ds;
    ds.window_size = w;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        WindowEntry e;
        double acc = 0;
        for (int k = 0; k < w * 3; ++k) {
            const double v = rng.normal();
            e.window.push_back(v);
            acc += std::abs(v);
        }
        e.label = acc / (w * 3) * 10.0;
        e.t_label = i;
        e.session_id = "toy";
        ds.entries.push_back(e);
    }
    return ds;
}

}  // namespace

TEST_CASE("mse loss") {
    SUBCASE("zero when prediction equals ground truth") {
        Tensor<double> p({3, 1}, {1, 2, 3});
        CHECK(mse_loss<double>(nullptr, p, p).item() == 0.0);
    }
    SUBCASE("hand value with the half normalizer") {
        Tensor<double> pred({1, 1}, {0.0});
        Tensor<double> gt({1, 1}, {2.0});
        CHECK(mse_loss<double>(nullptr, pred, gt).item() == 2.0);
    }
    SUBCASE("gradient is (pred - gt)/N") {
        Tensor<double> pred({4, 1}, {1.0, -2.0, 0.5, 3.0});
        Tensor<double> gt({4, 1}, {0.0, 1.0, 0.5, -1.0});
        Tape<double> tape;
        tape.watch(pred);
        auto grads = tape.backward(mse_loss(&tape, pred, gt));
        for (int i = 0; i < 4; ++i) {
            const double expect = (pred.at(i) - gt.at(i)) / 4.0;
            CHECK(grads.at(pred.node).at(i) == doctest::Approx(expect).epsilon(1e-15));
        }
        // and against finite differences
        const double err = grad_check<double>(
            [&](Tape<double>* t, std::vector<Tensor<double>>& ps) {
                return mse_loss(t, ps[0], gt);
            },
            {pred}, 1e-6);
        CHECK(err < 1e-8);
    }
    SUBCASE("length mismatch is an error") {
        Tensor<double> a({2, 1}, {1, 2});
        Tensor<double> b({3, 1}, {1, 2, 3});
        CHECK_THROWS_AS(mse_loss<double>(nullptr, a, b), InvalidInput);
    }
}

TEST_CASE("learning-rate schedule") {
    TrainConfig cfg;
    CHECK(lr_at(0, cfg) == 0.001);
    CHECK(lr_at(30000, cfg) == doctest::Approx(0.0002).epsilon(1e-12));
    CHECK(std::abs(lr_at(15000, cfg) - 4.4721359549995794e-4) < 1e-8);
    CHECK_THROWS_AS(lr_at(-1, cfg), InvalidInput);
    SUBCASE("strictly decreasing") {
        double prev = lr_at(0, cfg);
        for (int64_t s = 1; s < 2000; s += 37) {
            const double lr = lr_at(s, cfg);
            CHECK(lr < prev);
            prev = lr;
        }
    }
}

TEST_CASE("adam steps") {
    TrainConfig cfg;
    SUBCASE("zero gradient leaves parameters unchanged but advances the step") {
        Tensor<double> theta({2}, {1.0, -2.0});
        std::vector<ParamRef<double>> params{{"p", &theta}};
        AdamState<double> st;
        st.init(params);
        std::vector<Tensor<double>> grads{Tensor<double>::zeros({2})};
        adam_step(params, grads, st, 0.001, cfg);
        CHECK(st.step == 1);
        CHECK(theta.at(0) == 1.0);
        CHECK(theta.at(1) == -2.0);
    }
    SUBCASE("first update magnitude is about the learning rate") {
        Tensor<double> theta({1}, {0.0});
        std::vector<ParamRef<double>> params{{"p", &theta}};
        AdamState<double> st;
        st.init(params);
        std::vector<Tensor<double>> grads{Tensor<double>({1}, {0.5})};
        adam_step(params, grads, st, 0.001, cfg);
        CHECK(std::abs(-theta.at(0) - 0.001) < 1e-10);
    }
    SUBCASE("two steps match a hand-rolled scalar trace") {
        const double g = 0.37, lr1 = 0.001, lr2 = 0.0009;
        // independent scalar implementation
        double m = 0, v = 0, theta_ref = 1.5;
        for (int t = 1; t <= 2; ++t) {
            m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g;
            v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g;
            const double mh = m / (1 - std::pow(cfg.adam_beta1, t));
            const double vh = v / (1 - std::pow(cfg.adam_beta2, t));
            theta_ref -= (t == 1 ? lr1 : lr2) * mh / (std::sqrt(vh) + cfg.adam_epsilon);
        }

        Tensor<double> theta({1}, {1.5});
        std::vector<ParamRef<double>> params{{"p", &theta}};
        AdamState<double> st;
        st.init(params);
        std::vector<Tensor<double>> grads{Tensor<double>({1}, {g})};
        adam_step(params, grads, st, lr1, cfg);
        adam_step(params, grads, st, lr2, cfg);
        CHECK(std::abs(theta.at(0) - theta_ref) < 1e-12);
    }
    SUBCASE("non-finite gradients abort with the parameter name") {
        Tensor<double> theta({1}, {0.0});
        std::vector<ParamRef<double>> params{{"layer3.W", &theta}};
        AdamState<double> st;
        st.init(params);
        std::vector<Tensor<double>> grads{Tensor<double>({1}, {std::nan("")})};
        try {
            adam_step(params, grads, st, 0.001, cfg);
            FAIL("expected abort");
        } catch (const InvalidInput& e) {
            CHECK(std::string(e.what()).find("layer3.W") != std::string::npos);
        }
    }
}

TEST_CASE("gradient clipping") {
    std::vector<Tensor<double>> grads{Tensor<double>({2}, {3.0, 4.0})};  // norm 5
    SUBCASE("untouched below the limit") {
        const double norm = clip_global_norm(grads, 10.0);
        CHECK(norm == doctest::Approx(5.0));
        CHECK(grads[0].at(0) == 3.0);
    }
    SUBCASE("scaled above the limit") {
        const double norm = clip_global_norm(grads, 1.0);
        CHECK(norm == doctest::Approx(5.0));
        CHECK(grads[0].at(0) == doctest::Approx(0.6));
        CHECK(grads[0].at(1) == doctest::Approx(0.8));
    }
}

TEST_CASE("early stopping rule") {
    SUBCASE("patience one with strictly worsening validation stops after two epochs") {
        EarlyStopper stopper(1, 1e-6);
        CHECK_FALSE(stopper.observe(1.0));
        CHECK(stopper.observe(1.1));  // second epoch triggers the stop
    }
    SUBCASE("improvement resets the counter") {
        EarlyStopper stopper(2, 1e-6);
        CHECK_FALSE(stopper.observe(1.0));
        CHECK_FALSE(stopper.observe(1.05));
        CHECK_FALSE(stopper.observe(0.5));
        CHECK_FALSE(stopper.observe(0.6));
        CHECK(stopper.observe(0.7));
        CHECK(stopper.best() == 0.5);
    }
    SUBCASE("sub-threshold improvement does not count") {
        EarlyStopper stopper(1, 1e-3);
        CHECK_FALSE(stopper.observe(1.0));
        CHECK(stopper.observe(1.0 - 1e-4));
    }
}

TEST_CASE("fit loop") {
    auto train = toy_dataset(24, 5, 1);
    auto val = toy_dataset(8, 5, 2);
    TrainConfig cfg;
    cfg.max_epochs = 4;
    cfg.batch_size = 8;
    cfg.seed = 5;

    SUBCASE("history bookkeeping and the step-count invariant") {
        auto model = build_model<double>("dnn_star", 5, 9);
        auto hist = fit(model, train, val, cfg);
        REQUIRE(hist.epochs.size() == 4);
        CHECK(hist.stop_reason == "max_epochs");
        CHECK(hist.total_steps == 4 * 3);  // ceil(24/8) batches per epoch
        double prev_lr = 1.0;
        for (size_t i = 0; i < hist.epochs.size(); ++i) {
            CHECK(hist.epochs[i].epoch == static_cast<int>(i) + 1);
            CHECK(std::isfinite(hist.epochs[i].train_loss));
            CHECK(std::isfinite(hist.epochs[i].val_loss));
            CHECK(hist.epochs[i].lr < prev_lr);
            prev_lr = hist.epochs[i].lr;
        }
    }
    SUBCASE("returned weights reproduce the recorded best validation loss") {
        auto model = build_model<double>("dnn_star", 5, 9);
        auto hist = fit(model, train, val, cfg);
        CHECK(eval_mse(model, val) == hist.best_val_loss);
        CHECK(hist.best_epoch >= 1);
    }
    SUBCASE("same seed reruns bit-identically in wide mode") {
        auto m1 = build_model<double>("dnn_star", 5, 9);
        auto m2 = build_model<double>("dnn_star", 5, 9);
        auto h1 = fit(m1, train, val, cfg);
        auto h2 = fit(m2, train, val, cfg);
        REQUIRE(h1.epochs.size() == h2.epochs.size());
        for (size_t i = 0; i < h1.epochs.size(); ++i) {
            CHECK(h1.epochs[i].train_loss == h2.epochs[i].train_loss);
            CHECK(h1.epochs[i].val_loss == h2.epochs[i].val_loss);
        }
    }
    SUBCASE("last partial batch is used") {
        auto model = build_model<double>("dnn_star", 5, 9);
        TrainConfig odd = cfg;
        odd.batch_size = 10;  // 24 -> 10+10+4
        auto hist = fit(model, train, val, odd);
        CHECK(hist.total_steps == 4 * 3);
    }
    SUBCASE("empty splits and window mismatches are rejected") {
        auto model = build_model<double>("dnn_star", 5, 9);
        WindowedDataset empty;
        empty.window_size = 5;
        CHECK_THROWS_AS(fit(model, empty, val, cfg), InvalidInput);
        auto wrong = toy_dataset(8, 10, 3);
        CHECK_THROWS_AS(fit(model, wrong, wrong, cfg), InvalidInput);
    }
    SUBCASE("a poisoned label aborts with epoch context") {
        auto model = build_model<double>("dnn_star", 5, 9);
        auto bad = train;
        bad.entries[3].label = std::nan("");
        try {
            fit(model, bad, val, cfg);
            FAIL("expected abort");
        } catch (const InvalidInput& e) {
            CHECK(std::string(e.what()).find("epoch") != std::string::npos);
        }
    }
    SUBCASE("target train loss ends the run early") {
        auto model = build_model<double>("dnn_star", 5, 9);
        TrainConfig tg = cfg;
        tg.max_epochs = 50;
        tg.target_train_loss = 1e6;  // trivially satisfied
        auto hist = fit(model, train, val, tg);
        CHECK(hist.stop_reason == "target_train_loss");
        CHECK(hist.epochs.size() == 1);
    }
    SUBCASE("config validation") {
        TrainConfig bad = cfg;
        bad.decay_rate = 1.5;
        auto model = build_model<double>("dnn_star", 5, 9);
        CHECK_THROWS_AS(fit(model, train, val, bad), InvalidInput);
    }
}
