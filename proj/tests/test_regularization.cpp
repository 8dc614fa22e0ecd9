#include <doctest.h>

#include "gridnet/dropout.hpp"
#include "gridnet/grid_model.hpp"
#include "model_util.hpp"
#include "test_util.hpp"

using namespace gridnet;
using testutil::random_tensor;

namespace {

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
    if (!(a.shape() == b.shape())) {
        return false;
    }
    for (std::size_t k = 0; k < a.numel(); ++k) {
        if (a.values()[k] != b.values()[k]) {
            return false;
        }
    }
    return true;
}

GridSpec grid_5x6() { return make_symmetric_spec(5, 3, 3, 4, 3); }

}  // namespace

TEST_CASE("mask sampling is a pure function of (seed, step)") {
    const GridSpec s = grid_5x6();
    const DropMask a = sample_drop_mask(s, 0.5, 42, 7);
    const DropMask b = sample_drop_mask(s, 0.5, 42, 7);
    CHECK(a.keep == b.keep);
    int differing = 0;
    for (std::uint64_t step = 0; step < 20; ++step) {
        differing += sample_drop_mask(s, 0.5, 42, step).keep != a.keep;
    }
    CHECK(differing >= 18);
    CHECK(sample_drop_mask(s, 0.5, 43, 7).keep != a.keep);
}

TEST_CASE("extreme keep probabilities") {
    const GridSpec s = grid_5x6();
    for (std::uint64_t step = 0; step < 50; ++step) {
        CHECK(sample_drop_mask(s, 1.0, 1, step).count_kept() == 30);
        CHECK(sample_drop_mask(s, 0.0, 1, step).count_kept() == 0);
    }
    CHECK_THROWS_AS(sample_drop_mask(s, 1.5, 1, 0), std::invalid_argument);
    CHECK_THROWS_AS(sample_drop_mask(s, -0.1, 1, 0), std::invalid_argument);
}

TEST_CASE("keep rate at p = 0.7 over 10,000 masks") {
    const GridSpec s = grid_5x6();
    std::vector<int> per_cell(30, 0);
    std::size_t kept = 0;
    for (std::uint64_t step = 0; step < 10000; ++step) {
        const DropMask m = sample_drop_mask(s, 0.7, 2024, step);
        kept += m.count_kept();
        for (std::size_t k = 0; k < 30; ++k) {
            per_cell[k] += m.keep[k];
        }
    }
    const double rate = static_cast<double>(kept) / (10000.0 * 30.0);
    CHECK(rate == doctest::Approx(0.7).epsilon(0.01 / 0.7));
    // Each cell individually: 5 binomial standard deviations is about 0.023.
    for (int c : per_cell) {
        CHECK(std::abs(c / 10000.0 - 0.7) < 0.03);
    }
}

TEST_CASE("p = 1 forward is bit-identical to a forward without a mask") {
    const GridSpec s = grid_5x6();
    auto a = build_grid<float>(s, {32, 32}, 11);
    auto b = a.clone();
    const Tensor<float> x = random_tensor<float>(Shape{2, 3, 32, 32}, 1);
    const DropMask keep = sample_drop_mask(s, 1.0, 5, 0);
    CHECK(bit_equal(forward(a, x, Mode::Train, &keep).logits, forward(b, x, Mode::Train).logits));
}

TEST_CASE("dropping equals zeroing the residual output") {
    const GridSpec s = grid_5x6();
    auto a = build_grid<float>(s, {32, 32}, 12);
    testutil::randomize_model(a, 13);
    const Tensor<float> x = random_tensor<float>(Shape{2, 3, 32, 32}, 2);

    for (double p : {0.0, 0.5}) {
        const DropMask drop = sample_drop_mask(s, p, 6, 1);
        auto b = a.clone();
        auto c = a.clone();
        // A residual unit whose last convolution is zero outputs exactly zero.
        for (auto& [coord, blk] : c.blocks()) {
            if (blk.res && !drop.kept(coord.stream, coord.column)) {
                for (float& v : c.block(coord).res->conv2.weight.values()) {
                    v = 0.0f;
                }
            }
        }
        const auto rb = forward(b, x, Mode::Train, &drop);
        const auto rc = forward(c, x, Mode::Train);
        CHECK(bit_equal(rb.logits, rc.logits));
        if (p == 0.0) {
            // Identity and vertical paths still carry signal.
            double mag = 0.0;
            for (float v : rb.features.at({0, 5}).values()) {
                mag += std::abs(v);
            }
            CHECK(mag > 0.0);
        }
    }
}

TEST_CASE("dropped residual units receive no gradient") {
    GridSpec s = make_symmetric_spec(3, 1, 1, 2, 2);
    auto m = build_grid<double>(s, {8, 8}, 3);
    const DropMask drop = sample_drop_mask(s, 0.0, 1, 0);
    const Tensor<double> x = random_tensor<double>(Shape{2, 3, 8, 8}, 4);
    std::vector<int> labels(2 * 8 * 8);
    for (std::size_t k = 0; k < labels.size(); ++k) {
        labels[k] = static_cast<int>(k % 2);
    }
    m.zero_grad();
    Tape<double> tape;
    const auto r = forward(m, x, Mode::Train, &drop, &tape);
    tape.backward(softmax_cross_entropy(r.logits, std::span<const int>(labels), &tape));
    for (auto& e : m.named_tensors()) {
        if (e.role == TensorRole::Parameter && e.name.find(".res.") != std::string::npos) {
            for (double g : std::as_const(*e.tensor).grad()) {
                CHECK(g == 0.0);
            }
        }
    }
}

TEST_CASE("eval forward ignores the dropout configuration") {
    GridSpec s = grid_5x6();
    GridSpec t = s;
    t.dropout_p = 0.1;
    auto a = build_grid<float>(s, {32, 32}, 1);
    auto b = build_grid<float>(t, {32, 32}, 1);
    const Tensor<float> x = random_tensor<float>(Shape{1, 3, 32, 32}, 3);
    CHECK(bit_equal(forward(a, x, Mode::Eval).logits, forward(b, x, Mode::Eval).logits));
}

TEST_CASE("mask dimensions must match the grid") {
    auto m = build_grid<float>(grid_5x6(), {32, 32});
    const DropMask wrong = sample_drop_mask(make_symmetric_spec(5, 2, 2, 4, 3), 1.0, 1, 0);
    CHECK_THROWS_AS(forward(m, random_tensor<float>(Shape{1, 3, 32, 32}, 1), Mode::Train, &wrong),
                    std::invalid_argument);
}
