#include <cmath>
#include <sstream>

#include "doctest.h"

#include "carspeed/eval.hpp"

using namespace carspeed;

TEST_CASE("rmse and mae") {
    SUBCASE("identical vectors give zero") {
        std::vector<double> v{1, 2, 3};
        CHECK(rmse(v, v) == 0.0);
        CHECK(mae(v, v) == 0.0);
    }
    SUBCASE("hand values") {
        std::vector<double> gt{0, 2}, pred{0, 0};
        CHECK(rmse(gt, pred) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
        CHECK(mae(gt, pred) == 1.0);
    }
    SUBCASE("scale equivariance") {
        Rng rng(3);
        std::vector<double> gt(50), pred(50);
        for (size_t i = 0; i < gt.size(); ++i) {
            gt[i] = rng.normal();
            pred[i] = rng.normal();
        }
        const double k = -2.5;
        std::vector<double> gts(50), preds(50);
        for (size_t i = 0; i < gt.size(); ++i) {
            gts[i] = k * gt[i];
            preds[i] = k * pred[i];
        }
        CHECK(rmse(gts, preds) == doctest::Approx(std::abs(k) * rmse(gt, pred)).epsilon(1e-12));
    }
    SUBCASE("mae never exceeds rmse on random vectors") {
        Rng rng(11);
        for (int round = 0; round < 1000; ++round) {
            const size_t n = 1 + rng.below(20);
            std::vector<double> gt(n), pred(n);
            for (size_t i = 0; i < n; ++i) {
                gt[i] = rng.normal() * 10;
                pred[i] = rng.normal() * 10;
            }
            CHECK(mae(gt, pred) <= rmse(gt, pred) + 1e-12);
        }
    }
    SUBCASE("errors") {
        std::vector<double> a{1}, b{1, 2}, none;
        CHECK_THROWS_AS(rmse(a, b), InvalidInput);
        CHECK_THROWS_AS(mae(none, none), InvalidInput);
    }
}

TEST_CASE("latency statistic is the median") {
    CHECK(median({3.0}) == 3.0);
    CHECK(median({1.0, 2.0, 100.0}) == 2.0);          // not the mean (34.3)
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK(latency_from_samples({9.0, 1.0, 2.0}) == 2.0);
    CHECK_THROWS_AS(median({}), InvalidInput);
}

TEST_CASE("metrics report invariants") {
    MetricsReport r;
    r.model_name = "x";
    r.rmse_mps = 2.0;
    r.mae_mps = 1.0;
    r.latency_ms = 0.5;
    r.validate(true);
    SUBCASE("rmse below mae is impossible") {
        r.rmse_mps = 0.5;
        CHECK_THROWS_AS(r.validate(true), InvalidInput);
    }
    SUBCASE("measured latency must be positive") {
        r.latency_ms = 0.0;
        CHECK_THROWS_AS(r.validate(true), InvalidInput);
        r.validate(false);  // fine when timing was disabled
    }
}

TEST_CASE("trace CSV round trip preserves the metrics bit for bit") {
    Rng rng(8);
    std::vector<TraceRow> trace;
    for (int i = 0; i < 57; ++i) {
        trace.push_back({static_cast<double>(i), std::abs(rng.normal()) * 12,
                         std::abs(rng.normal()) * 12});
    }
    std::ostringstream out;
    write_trace_csv(out, trace);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "t,gt_speed,pred_speed");
    std::vector<TraceRow> parsed;
    while (std::getline(in, line)) {
        const auto f = split(line, ',');
        REQUIRE(f.size() == 3);
        parsed.push_back({std::stod(f[0]), std::stod(f[1]), std::stod(f[2])});
    }
    REQUIRE(parsed.size() == trace.size());
    CHECK(rmse_of_trace(parsed) == rmse_of_trace(trace));
    CHECK(mae_of_trace(parsed) == mae_of_trace(trace));

    SUBCASE("independent streaming recomputation agrees closely") {
        // reverse order, separate accumulators
        double sq = 0, ab = 0;
        size_t n = 0;
        for (auto it = parsed.rbegin(); it != parsed.rend(); ++it) {
            const double d = it->gt_speed - it->pred_speed;
            sq += d * d;
            ab += std::abs(d);
            ++n;
        }
        CHECK(std::abs(std::sqrt(sq / n) - rmse_of_trace(trace)) < 1e-9);
        CHECK(std::abs(ab / n - mae_of_trace(trace)) < 1e-9);
    }
}

TEST_CASE("metrics CSV format") {
    MetricsReport r;
    r.model_name = "carspeednet";
    r.window_samples = 80;
    r.window_seconds = 4.0;
    r.rmse_mps = 1.25;
    r.mae_mps = 0.75;
    r.latency_ms = 3.125;
    r.param_count = 169781;
    r.published_count = 178169;
    std::ostringstream out;
    write_metrics_csv(out, {r}, false);
    CHECK(out.str() ==
          "model,window_samples,window_seconds,rmse_mps,mae_mps,latency_ms,param_count\n"
          "carspeednet,80,4.00,1.250000,0.750000,3.125,169781\n");
    std::ostringstream out2;
    write_metrics_csv(out2, {r}, true);
    CHECK(out2.str().find("published_param_count") != std::string::npos);
    CHECK(out2.str().find(",178169") != std::string::npos);
}

TEST_CASE("history CSV format and the timing switch") {
    TrainHistory h;
    h.epochs.push_back({1, 2.5, 3.5, 1e-3, 12.625});
    h.epochs.push_back({2, 1.5, 2.0, 9e-4, 11.5});
    std::ostringstream with_time, without_time;
    write_history_csv(with_time, h, false);
    write_history_csv(without_time, h, true);
    CHECK(with_time.str().rfind("epoch,train_loss,val_loss,lr,seconds\n", 0) == 0);
    CHECK(with_time.str().find("12.625") != std::string::npos);
    CHECK(without_time.str().find("12.625") == std::string::npos);
    CHECK(without_time.str().find("0.000") != std::string::npos);
}

TEST_CASE("latency measurement on a real model is stable") {
    auto m = build_model<float>("dnn_star", 5, 3);
    m.norm.fitted = true;
    std::vector<double> window(15, 0.5);
    const double a = measure_latency_ms(m, window, 51);
    const double b = measure_latency_ms(m, window, 51);
    CHECK(a > 0);
    CHECK(b > 0);
    CHECK(std::abs(a - b) < 0.5 * std::max(a, b));
    CHECK_THROWS_AS(measure_latency_ms(m, window, 5), InvalidInput);
}

TEST_CASE("held-out session selection is deterministic and bounded") {
    std::vector<std::string> ids{"c", "a", "e", "b", "d"};
    auto t1 = select_test_sessions(ids, 2, 77);
    auto t2 = select_test_sessions(ids, 2, 77);
    CHECK(t1 == t2);
    CHECK(t1.size() == 2);
    CHECK_THROWS_AS(select_test_sessions(ids, 4, 1), InvalidInput);
    CHECK_THROWS_AS(select_test_sessions({"a", "b"}, 1, 1), InvalidInput);
}

TEST_CASE("precision names") {
    CHECK(precision_from_name("narrow") == Precision::narrow);
    CHECK(precision_from_name("wide") == Precision::wide);
    CHECK_THROWS_AS(precision_from_name("half"), InvalidInput);
}
