#include <cmath>

#include "doctest.h"

#include "carspeed/model.hpp"

using namespace carspeed;

namespace {

template <typename S>
Tensor<S> randn_tensor(std::vector<int> shape, Rng& rng) {
    std::vector<S> v(static_cast<size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<S>(rng.normal());
    return Tensor<S>(std::move(shape), std::move(v));
}

NormStats unit_stats() {
    NormStats n;
    n.fitted = true;
    return n;
}

}  // namespace

TEST_CASE("carspeednet wiring follows the published description") {
    auto specs = zoo_layer_specs("carspeednet");
    REQUIRE(specs.size() == 19);
    CHECK(specs[0].kind == LayerKind::bilstm);
    CHECK(specs[0].units == 100);
    CHECK(specs[0].return_sequences);
    // recurrent unit ladder (100-bidirectional, 50, 20, 20, 20)
    CHECK(specs[2].units == 50);
    CHECK(specs[4].units == 20);
    CHECK(specs[6].units == 20);
    CHECK(specs[8].units == 20);
    for (size_t i : {1u, 3u, 5u, 7u, 9u}) CHECK(specs[i].kind == LayerKind::batchnorm);
    // convolutional stage 64, 64, 32 with kernel 3, each followed by relu
    CHECK(specs[10].units == 64);
    CHECK(specs[12].units == 64);
    CHECK(specs[14].units == 32);
    for (size_t i : {10u, 12u, 14u}) {
        CHECK(specs[i].kind == LayerKind::conv1d);
        CHECK(specs[i].kernel == 3);
        CHECK(specs[i + 1].kind == LayerKind::relu);
    }
    CHECK(specs[16].kind == LayerKind::take_last_step);
    CHECK(specs[17].units == 32);
    CHECK(specs[17].act == Activation::relu);
    CHECK(specs[18].units == 1);
    CHECK(specs[18].act == Activation::linear);

    // the bidirectional stage emits 200 features per step
    ShapeFlow flow;
    flow = advance_flow(flow, specs[0]);
    CHECK(flow.width == 200);
    CHECK(flow.sequence);
}

TEST_CASE("parameter counts") {
    SUBCASE("published component values") {
        CHECK(bilstm_param_count(3, 100) == 83200);
        CHECK(lstm_param_count(200, 50) == 50200);
        CHECK(conv1d_param_count(3, 20, 64) == 3904);
        CHECK(dense_param_count(32, 32) == 1056);
    }
    SUBCASE("carspeednet total matches its own closed-form sum") {
        auto m = build_model<float>("carspeednet", 80, 1);
        CHECK(m.param_count() == 169781);
        int64_t closed = 0;
        ShapeFlow flow;
        for (const auto& spec : m.specs) {
            closed += spec_param_count(spec, flow.width);
            flow = advance_flow(flow, spec);
        }
        CHECK(closed == 169781);
        CHECK(published_param_count("carspeednet") == 178169);
    }
    SUBCASE("a single dense unit on 3 inputs") {
        CHECK(dense_param_count(3, 1) == 4);
    }
    SUBCASE("recurrent models count independently of window size") {
        int64_t first = -1;
        for (int w : {5, 10, 20, 40, 60, 80}) {
            auto m = build_model<float>("carspeednet", w, 1);
            if (first < 0) first = m.param_count();
            CHECK(m.param_count() == first);
        }
    }
    SUBCASE("published totals are recorded for every baseline") {
        CHECK(published_param_count("dnn_star") == 13031);
        CHECK(published_param_count("lstm") == 17181);
        CHECK(published_param_count("wavenet") == 239937);
        CHECK(published_param_count("bilstm") == 26251);
        CHECK(published_param_count("resnet") == 95043);
    }
}

TEST_CASE("every zoo model runs one forward pass per window size") {
    Rng rng(5);
    for (const auto& name : zoo_model_names()) {
        for (int w : {5, 20}) {
            auto m = build_model<double>(name, w, 7);
            auto x = randn_tensor<double>({3, w, 3}, rng);
            Rng drop(11);
            auto y = m.forward(nullptr, x, LayerMode::train, &drop);
            REQUIRE(y.shape == std::vector<int>{3, 1});
            for (int i = 0; i < 3; ++i) CHECK(std::isfinite(y.at(i)));
        }
    }
}

TEST_CASE("build validation") {
    CHECK_THROWS_AS(build_model<float>("carspeednet", 4, 1), InvalidInput);
    CHECK_THROWS_AS(build_model<float>("no_such_model", 20, 1), InvalidInput);
    CHECK_THROWS_AS(zoo_layer_specs("vgg"), InvalidInput);
    SUBCASE("same seed builds identical parameters, different seed does not") {
        auto a = build_model<double>("dnn_star", 10, 42);
        auto b = build_model<double>("dnn_star", 10, 42);
        auto c = build_model<double>("dnn_star", 10, 43);
        bool all_equal = true, any_diff = false;
        for (size_t l = 0; l < a.params.size(); ++l) {
            for (size_t t = 0; t < a.params[l].trainable.size(); ++t) {
                const auto& ta = a.params[l].trainable[t].second;
                const auto& tb = b.params[l].trainable[t].second;
                const auto& tc = c.params[l].trainable[t].second;
                for (int64_t i = 0; i < ta.numel(); ++i) {
                    all_equal = all_equal && ta.at(i) == tb.at(i);
                    any_diff = any_diff || ta.at(i) != tc.at(i);
                }
            }
        }
        CHECK(all_equal);
        CHECK(any_diff);
    }
}

TEST_CASE("predict contract") {
    auto m = build_model<float>("carspeednet", 20, 9);
    m.norm = unit_stats();
    Rng rng(2);
    Rng drop(3);
    auto warm = randn_tensor<float>({4, 20, 3}, rng);
    m.forward(nullptr, warm, LayerMode::train, &drop);  // seed batchnorm stats

    std::vector<double> windows(32 * 20 * 3);
    Rng wrng(4);
    for (auto& v : windows) v = wrng.normal();

    SUBCASE("wrong window size and channel count are rejected") {
        CHECK_THROWS_AS(m.predict(windows.data(), 1, 80, 3), InvalidInput);
        CHECK_THROWS_AS(m.predict(windows.data(), 1, 20, 2), InvalidInput);
    }
    SUBCASE("missing normalization stats are rejected") {
        auto fresh = build_model<float>("carspeednet", 20, 9);
        CHECK_THROWS_AS(fresh.predict(windows.data(), 1, 20, 3), InvalidInput);
    }
    SUBCASE("deterministic and batch-size independent") {
        auto once = m.predict(windows.data(), 32, 20, 3);
        auto again = m.predict(windows.data(), 32, 20, 3);
        for (int i = 0; i < 32; ++i) CHECK(once[static_cast<size_t>(i)] == again[static_cast<size_t>(i)]);
        for (int row : {0, 7, 31}) {
            auto single = m.predict(windows.data() + row * 20 * 3, 1, 20, 3);
            CHECK(single[0] == once[static_cast<size_t>(row)]);
        }
    }
    SUBCASE("never returns negative speed") {
        // a stack whose output is a fixed negative number
        Model<float> neg;
        neg.name = "clamp_probe";
        neg.window_size = 5;
        neg.specs = {take_last_spec(), dense_spec(1, Activation::linear)};
        for (const auto& spec : neg.specs) neg.params.push_back(alloc_params<float>(spec, 3));
        neg.params[1].get("b").mut()[0] = -3.0f;
        neg.norm = unit_stats();
        std::vector<double> w(5 * 3, 1.0);
        CHECK(neg.predict(w.data(), 1, 5, 3)[0] == 0.0f);
    }
}

TEST_CASE("wavenet uses the six published dilation rates") {
    auto specs = zoo_layer_specs("wavenet");
    std::vector<int> dilations;
    for (const auto& s : specs) {
        if (s.kind == LayerKind::conv1d && s.kernel == 3) dilations.push_back(s.dilation);
    }
    CHECK(dilations == std::vector<int>{1, 2, 4, 8, 16, 32});
}
