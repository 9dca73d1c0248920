#include <cmath>

#include "doctest.h"

#include "carspeed/model.hpp"
#include "carspeed/tensor.hpp"
#include "carspeed/train.hpp"

using namespace carspeed;

namespace {

Tensor<double> randn_tensor(std::vector<int> shape, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (auto& x : v) x = rng.normal();
    return Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("matmul values") {
    Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    Tensor<double> col({2, 1}, {3, 4});
    auto r = matmul<double>(nullptr, eye, col);
    CHECK(r.shape == std::vector<int>{2, 1});
    CHECK(r.at(0) == 3);
    CHECK(r.at(1) == 4);

    Tensor<double> a({1, 2}, {1, 2});
    Tensor<double> b({2, 1}, {3, 4});
    CHECK(matmul<double>(nullptr, a, b).item() == 11.0);
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor<double> a({2, 3}, std::vector<double>(6, 1.0));
    Tensor<double> b({2, 2}, std::vector<double>(4, 1.0));
    try {
        matmul<double>(nullptr, a, b);
        FAIL("expected a dimension error");
    } catch (const InvalidInput& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2 x 3]") != std::string::npos);
        CHECK(msg.find("[2 x 2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches central finite differences") {
    Rng rng(99);
    Tensor<double> a = randn_tensor({3, 4}, rng);
    Tensor<double> b = randn_tensor({4, 2}, rng);
    const double err = grad_check<double>(
        [](Tape<double>* tape, std::vector<Tensor<double>>& p) {
            return sum_all(tape, matmul(tape, p[0], p[1]));
        },
        {a, b}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("elementwise values") {
    Tensor<double> x({3}, {-1, 0, 2});
    auto r = relu<double>(nullptr, x);
    CHECK(r.at(0) == 0);
    CHECK(r.at(1) == 0);
    CHECK(r.at(2) == 2);

    CHECK(sigmoid<double>(nullptr, Tensor<double>::scalar(0)).item() == doctest::Approx(0.5).epsilon(1e-15));

    // dispatcher and named forms share the path
    Tensor<double> a({2}, {1, 2});
    Tensor<double> b({2}, {3, 5});
    auto via_enum = ewise<double>(nullptr, EwiseKind::mul, a, &b);
    auto named = mul<double>(nullptr, a, b);
    CHECK(via_enum.at(0) == named.at(0));
    CHECK(via_enum.at(1) == named.at(1));

    CHECK_THROWS_AS(ewise<double>(nullptr, EwiseKind::add, a), InvalidInput);
    CHECK_THROWS_AS(ewise<double>(nullptr, EwiseKind::relu, a, &b), InvalidInput);
    Tensor<double> wrong({3}, {1, 2, 3});
    CHECK_THROWS_AS(add<double>(nullptr, a, wrong), InvalidInput);
}

TEST_CASE("tanh gradient at 0.3 matches finite differences") {
    Tensor<double> x = Tensor<double>::scalar(0.3);
    const double err = grad_check<double>(
        [](Tape<double>* tape, std::vector<Tensor<double>>& p) {
            return sum_all(tape, tanh_op(tape, p[0]));
        },
        {x}, 1e-6);
    CHECK(err < 1e-6);
}

TEST_CASE("trailing-axis broadcast add and its gradient") {
    Rng rng(5);
    Tensor<double> x = randn_tensor({4, 3}, rng);
    Tensor<double> bias = randn_tensor({3}, rng);
    auto y = add<double>(nullptr, x, bias);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 3; ++c) {
            CHECK(y.at(r * 3 + c) == x.at(r * 3 + c) + bias.at(c));
        }
    }
    const double err = grad_check<double>(
        [](Tape<double>* tape, std::vector<Tensor<double>>& p) {
            return sum_all(tape, mul(tape, add(tape, p[0], p[1]), p[0]));
        },
        {x, bias}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("concat values and width") {
    Tensor<double> a({2}, {1, 2});
    Tensor<double> b({1}, {3});
    auto r = concat<double>(nullptr, a, b, 0);
    CHECK(r.shape == std::vector<int>{3});
    CHECK(r.at(2) == 3);

    // bidirectional merge: [T x 100] forward and backward halves -> [T x 200]
    Rng rng(1);
    auto fwd = randn_tensor({7, 100}, rng);
    auto bwd = randn_tensor({7, 100}, rng);
    auto merged = concat<double>(nullptr, fwd, bwd, 1);
    CHECK(merged.shape == std::vector<int>{7, 200});

    CHECK_THROWS_AS(concat<double>(nullptr, a, b, 1), InvalidInput);
    Tensor<double> c({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(concat<double>(nullptr, a, c, 0), InvalidInput);
}

TEST_CASE("concat backward splits gradients like per-branch runs") {
    Rng rng(2);
    Tensor<double> a = randn_tensor({3, 2}, rng);
    Tensor<double> b = randn_tensor({3, 2}, rng);

    // joint run through concat
    Tensor<double> a1 = a.clone(), b1 = b.clone();
    Tape<double> tape;
    tape.watch(a1);
    tape.watch(b1);
    auto joined = concat(&tape, tanh_op(&tape, a1), sigmoid(&tape, b1), 1);
    auto grads = tape.backward(sum_all(&tape, mul(&tape, joined, joined)));

    // each branch alone
    Tensor<double> a2 = a.clone();
    Tape<double> ta;
    ta.watch(a2);
    auto ya = tanh_op(&ta, a2);
    auto ga = ta.backward(sum_all(&ta, mul(&ta, ya, ya)));
    Tensor<double> b2 = b.clone();
    Tape<double> tb;
    tb.watch(b2);
    auto yb = sigmoid(&tb, b2);
    auto gb = tb.backward(sum_all(&tb, mul(&tb, yb, yb)));

    for (int i = 0; i < 6; ++i) {
        CHECK(grads.at(a1.node).at(i) == doctest::Approx(ga.at(a2.node).at(i)).epsilon(1e-14));
        CHECK(grads.at(b1.node).at(i) == doctest::Approx(gb.at(b2.node).at(i)).epsilon(1e-14));
    }
}

TEST_CASE("backward basics") {
    SUBCASE("identity loss gives gradient one") {
        Tensor<double> x = Tensor<double>::scalar(3.5);
        Tape<double> tape;
        tape.watch(x);
        auto grads = tape.backward(x);
        CHECK(grads.at(x.node).item() == 1.0);
    }
    SUBCASE("sum of squares") {
        Tensor<double> x({2}, {1, 2});
        Tape<double> tape;
        tape.watch(x);
        auto loss = sum_all(&tape, mul(&tape, x, x));
        auto grads = tape.backward(loss);
        CHECK(grads.at(x.node).at(0) == 2.0);
        CHECK(grads.at(x.node).at(1) == 4.0);
    }
    SUBCASE("gradients accumulate over multiple uses") {
        Tensor<double> x = Tensor<double>::scalar(2.0);
        Tape<double> tape;
        tape.watch(x);
        auto loss = sum_all(&tape, mul(&tape, x, x));  // both operands are x
        auto grads = tape.backward(loss);
        CHECK(grads.at(x.node).item() == 4.0);
    }
    SUBCASE("second backward is an error") {
        Tensor<double> x = Tensor<double>::scalar(1.0);
        Tape<double> tape;
        tape.watch(x);
        auto y = mul(&tape, x, x);
        auto loss = sum_all(&tape, y);
        tape.backward(loss);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.backward(loss), InvalidInput);
    }
    SUBCASE("non-scalar loss is an error") {
        Tensor<double> x({2}, {1, 2});
        Tape<double> tape;
        tape.watch(x);
        auto y = mul(&tape, x, x);
        CHECK_THROWS_AS(tape.backward(y), InvalidInput);
    }
    SUBCASE("tensor not on tape is an error") {
        Tensor<double> x = Tensor<double>::scalar(1.0);
        x.requires_grad = true;  // never watched
        Tape<double> tape;
        CHECK_THROWS_AS(mul(&tape, x, x), InvalidInput);

        // a node from a previous tape is also rejected
        Tensor<double> y = Tensor<double>::scalar(2.0);
        Tape<double> old;
        old.watch(y);
        Tape<double> fresh;
        CHECK_THROWS_AS(mul(&fresh, y, y), InvalidInput);
        CHECK_THROWS_AS(fresh.backward(y), InvalidInput);
    }
}

TEST_CASE("forward ops are pure and tapes are topologically ordered") {
    Rng rng(7);
    Tensor<double> a = randn_tensor({4, 4}, rng);
    Tensor<double> b = randn_tensor({4, 4}, rng);
    auto r1 = matmul<double>(nullptr, a, b);
    auto r2 = matmul<double>(nullptr, a, b);
    for (int i = 0; i < 16; ++i) CHECK(r1.at(i) == r2.at(i));

    Tensor<double> w = a.clone();
    Tape<double> tape;
    tape.watch(w);
    auto y = relu(&tape, matmul(&tape, w, b));
    sum_all(&tape, y);
    CHECK(tape.topologically_sorted());
    CHECK(tape.op_count() > 0);
}

TEST_CASE("grad_check on simple functions") {
    Rng rng(3);
    SUBCASE("constant gradient of a sum") {
        Tensor<double> p = randn_tensor({5}, rng);
        const double err = grad_check<double>(
            [](Tape<double>* tape, std::vector<Tensor<double>>& ps) {
                return sum_all(tape, ps[0]);
            },
            {p}, 1e-4);
        CHECK(err < 1e-9);
    }
    SUBCASE("dense layer under mse") {
        Tensor<double> w = randn_tensor({4, 3}, rng);
        Tensor<double> b = randn_tensor({3}, rng);
        Tensor<double> x = randn_tensor({2, 4}, rng);
        Tensor<double> gt = randn_tensor({2, 3}, rng);
        const double err = grad_check<double>(
            [&](Tape<double>* tape, std::vector<Tensor<double>>& ps) {
                auto pred = add(tape, matmul(tape, x, ps[0]), ps[1]);
                return mse_loss(tape, pred, gt);
            },
            {w, b}, 1e-5);
        CHECK(err < 1e-6);
    }
    SUBCASE("one lstm step") {
        Rng init_rng(11);
        auto p = make_lstm_params<double>(3, 4, init_rng);
        Tensor<double> x = randn_tensor({2, 1, 3}, rng);
        const double err = grad_check<double>(
            [&](Tape<double>* tape, std::vector<Tensor<double>>& ps) {
                LayerParams<double> lp;
                lp.trainable = {{"W", ps[0]}, {"U", ps[1]}, {"b", ps[2]}};
                return sum_all(tape, lstm_forward(tape, x, lp, false));
            },
            {p.get("W"), p.get("U"), p.get("b")}, 1e-5);
        CHECK(err < 1e-5);
    }
    SUBCASE("epsilon must be positive") {
        Tensor<double> p = randn_tensor({2}, rng);
        CHECK_THROWS_AS(grad_check<double>(
                            [](Tape<double>* tape, std::vector<Tensor<double>>& ps) {
                                return sum_all(tape, ps[0]);
                            },
                            {p}, 0.0),
                        InvalidInput);
    }
}

TEST_CASE("full carspeednet loss gradient vs finite differences (wide)") {
    auto model = build_model<double>("carspeednet", 5, 17);
    Rng rng(23);
    Tensor<double> x = randn_tensor({2, 5, 3}, rng);
    Tensor<double> gt({2, 1}, {3.0, 7.5});
    auto refs = model.trainable_refs();
    std::vector<Tensor<double>> params;
    for (auto& r : refs) params.push_back(*r.tensor);

    const double err = grad_check<double>(
        [&](Tape<double>* tape, std::vector<Tensor<double>>& ps) {
            for (size_t i = 0; i < refs.size(); ++i) *refs[i].tensor = ps[i];
            auto pred = model.forward(tape, x, LayerMode::train, nullptr);
            return mse_loss(tape, pred, gt);
        },
        params, 1e-3, /*max_coords_per_tensor=*/24);
    CHECK(err < 1e-4);
}
