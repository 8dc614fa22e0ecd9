#include <doctest.h>

#include <cmath>
#include <set>

#include "gridnet/grid_model.hpp"
#include "model_util.hpp"
#include "test_util.hpp"

using namespace gridnet;
using testutil::random_tensor;

namespace {

GridSpec small_spec(int streams, int n_sub, int n_up, int f0 = 4, int classes = 3) {
    return make_symmetric_spec(streams, n_sub, n_up, f0, classes);
}

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

}  // namespace

TEST_CASE("stream dimensions") {
    GridSpec s = small_spec(5, 3, 3, 16);
    std::vector<int> widths;
    for (int i = 0; i < 5; ++i) {
        widths.push_back(stream_dims(s, i, {400, 400}).features);
    }
    CHECK(widths == std::vector<int>{16, 32, 64, 128, 256});
    CHECK(stream_dims(s, 4, {400, 400}) == StreamDims{256, 25, 25});
    CHECK(stream_dims(s, 2, {13, 7}) == StreamDims{64, 4, 2});

    GridSpec deep = small_spec(7, 1, 1, 8);
    CHECK(stream_dims(deep, 0, {96, 80}) == StreamDims{8, 96, 80});
    CHECK(stream_dims(deep, 6, {96, 80}).features == 512);
}

TEST_CASE("degenerate grid: stem plus head has 128 parameters") {
    GridSpec s = small_spec(1, 0, 0, 4, 2);
    const auto m = build_grid<float>(s, {8, 8});
    CHECK(m.blocks().empty());
    // stem BN 2*3, stem conv 3*4*9 + 4, head 4*2 + 2
    CHECK(count_params_exact(m) == 6 + 112 + 10);
}

TEST_CASE("one-block count matches a hand tally") {
    // N_S = 2, one Sub column, F0 = 2, C = 2, 3 channels.
    // stem: 6 + (3*2*9 + 2) = 62; head: 2*2 + 2 = 6
    // block (0,0) residual: 2*2 BN + 2*(2*2*9) = 8 + 72 = 80
    // block (1,0) sub: BN over 2 channels (4) + conv 4*2*9 = 72 -> 76
    GridSpec s = small_spec(2, 1, 0, 2, 2);
    const auto m = build_grid<float>(s, {8, 8});
    CHECK(m.blocks().size() == 2);
    CHECK(count_params_exact(m) == 62 + 6 + 80 + 76);
}

TEST_CASE("closed-form estimates") {
    CHECK(approx_param_count(small_spec(5, 3, 3, 16)) == 10027008.0);
    CHECK(approx_param_count(small_spec(1, 3, 3, 16)) == 39168.0);
    CHECK(approx_activation_count(small_spec(5, 3, 3, 16), {400, 400}) == 291840000.0);
    CHECK_THROWS_AS(approx_param_count(small_spec(3, 0, 2, 4)), std::invalid_argument);

    // Affine in N_Cu with slope 4 * 6 * H * W * F0.
    const double a3 = approx_activation_count(small_spec(5, 3, 3, 16), {400, 400});
    const double a6 = approx_activation_count(small_spec(5, 3, 6, 16), {400, 400});
    CHECK(a6 - a3 == 3.0 * 4.0 * 6.0 * 400 * 400 * 16);
}

TEST_CASE("exact count against the estimate and its monotonicity") {
    const auto m = build_grid<float>(small_spec(5, 3, 3, 16, 19), {16, 16});
    const double exact = static_cast<double>(count_params_exact(m));
    const double ratio = exact / approx_param_count(m.spec());
    MESSAGE("exact " << exact << " ratio " << ratio);
    CHECK(ratio > 0.5);
    CHECK(ratio < 2.0);

    std::int64_t prev = 0;
    for (int ns = 1; ns <= 5; ++ns) {
        const auto g = build_grid<float>(small_spec(ns, 2, 2, 4), {16, 16});
        CHECK(count_params_exact(g) > prev);
        prev = count_params_exact(g);
    }
    prev = 0;
    for (int nc = 1; nc <= 4; ++nc) {
        const auto g = build_grid<float>(small_spec(3, nc, nc, 4), {16, 16});
        CHECK(count_params_exact(g) > prev);
        prev = count_params_exact(g);
    }

    const auto f8 = build_grid<float>(small_spec(4, 2, 2, 8), {16, 16});
    const auto f16 = build_grid<float>(small_spec(4, 2, 2, 16), {16, 16});
    const double quad = static_cast<double>(count_params_exact(f16)) / count_params_exact(f8);
    CHECK(quad > 3.8);
    CHECK(quad < 4.0);
}

TEST_CASE("masking changes no parameter count") {
    GridSpec s = small_spec(5, 3, 3, 4);
    const auto full = build_grid<float>(s, {32, 32});
    for (MaskPreset p : {MaskPreset::ConvDeconv, MaskPreset::UNet, MaskPreset::Frrn}) {
        GridSpec masked = s;
        masked.mask = preset_mask(p, s);
        const auto m = build_grid<float>(masked, {32, 32});
        CHECK(count_params_exact(m) == count_params_exact(full));
    }
}

TEST_CASE("activation tally is of the order of the estimate") {
    GridSpec s = small_spec(5, 3, 3, 16);
    const double exact = static_cast<double>(exact_activation_count(s, {400, 400}));
    const double ratio = exact / approx_activation_count(s, {400, 400});
    CHECK(ratio > 0.1);
    CHECK(ratio < 10.0);
}

TEST_CASE("eval order: Sub columns top-down, Up columns bottom-up") {
    const auto m = build_grid<float>(small_spec(4, 2, 2, 4), {16, 16});
    const auto& order = m.eval_order();
    for (std::size_t k = 1; k < order.size(); ++k) {
        const BlockCoord a = order[k - 1];
        const BlockCoord b = order[k];
        CHECK(a.column <= b.column);
        if (a.column == b.column) {
            if (m.spec().column_kinds[a.column] == ColumnKind::Sub) {
                CHECK(a.stream < b.stream);
            } else {
                CHECK(a.stream > b.stream);
            }
        }
    }
    // All streams enter in the first Sub column.
    for (int i = 1; i < 4; ++i) {
        CHECK(stream_entry_column(m.spec(), i) == 0);
        CHECK(m.has_block({i, 0}));
        CHECK_FALSE(m.block({i, 0}).res.has_value());
    }
    CHECK(m.blocks().size() == 16);
}

TEST_CASE("presets") {
    GridSpec s = small_spec(5, 3, 3, 4);
    SUBCASE("full") {
        CHECK(preset_mask(MaskPreset::Full, s).all_enabled());
    }
    SUBCASE("conv_deconv enables one monotone path") {
        const ConnectionMask m = preset_mask(MaskPreset::ConvDeconv, s);
        std::set<std::pair<int, int>> res;
        std::set<std::pair<int, int>> vert;
        for (const auto& st : testutil::conv_deconv_path_5x6()) {
            (st.kind == testutil::PathStep::Res ? res : vert).insert({st.stream, st.column});
        }
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < 6; ++j) {
                CHECK(m.residual_on(i, j) == res.contains({i, j}));
                CHECK(m.vertical_on(i, j) == vert.contains({i, j}));
            }
        }
        CHECK(conv_deconv_depths(s) == std::vector<int>{1, 2, 4, 3, 2, 0});
    }
    SUBCASE("u_net adds same-depth skips to conv_deconv") {
        const ConnectionMask cd = preset_mask(MaskPreset::ConvDeconv, s);
        const ConnectionMask un = preset_mask(MaskPreset::UNet, s);
        int extra = 0;
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < 6; ++j) {
                if (cd.residual_on(i, j)) {
                    CHECK(un.residual_on(i, j));
                }
                CHECK(un.vertical_on(i, j) == cd.vertical_on(i, j));
                extra += un.residual_on(i, j) && !cd.residual_on(i, j);
            }
        }
        CHECK(extra > 0);
        // Stream 0 leaves at column 0 and returns at column 5; the skip spans it.
        for (int j = 1; j <= 5; ++j) {
            CHECK(un.residual_on(0, j));
        }
    }
    SUBCASE("frrn is a full residual stream 0 beside the single down/up path") {
        const ConnectionMask m = preset_mask(MaskPreset::Frrn, s);
        const ConnectionMask cd = preset_mask(MaskPreset::ConvDeconv, s);
        for (int j = 0; j < 6; ++j) {
            CHECK(m.residual_on(0, j));
        }
        for (int i = 1; i < 5; ++i) {
            for (int j = 0; j < 6; ++j) {
                CHECK(m.residual_on(i, j) == cd.residual_on(i, j));
                CHECK(m.vertical_on(i, j) == cd.vertical_on(i, j));
            }
        }
    }
    SUBCASE("interleaved orderings reject path presets") {
        GridSpec inter = s;
        inter.column_kinds = {ColumnKind::Sub, ColumnKind::Up, ColumnKind::Sub, ColumnKind::Up};
        inter.mask = ConnectionMask{};
        CHECK_THROWS_AS(preset_mask(MaskPreset::UNet, inter), std::invalid_argument);
        CHECK_NOTHROW(preset_mask(MaskPreset::Full, inter));
        CHECK_NOTHROW(build_grid<float>(inter, {16, 16}));
    }
    CHECK(parse_mask_preset("u_net") == MaskPreset::UNet);
    CHECK_THROWS_AS(parse_mask_preset("unet"), std::invalid_argument);
}

TEST_CASE("zero mappings leave stream 0 equal to the stem") {
    auto m = build_grid<float>(small_spec(4, 2, 2, 4), {16, 16});
    testutil::randomize_model(m, 7);
    for (auto& e : m.named_tensors()) {
        if (e.coord && e.role == TensorRole::Parameter) {
            for (float& v : e.tensor->values()) {
                v = 0.0f;
            }
        }
    }
    const Tensor<float> x = random_tensor<float>(Shape{2, 3, 16, 16}, 8);
    const auto r = forward(m, x, Mode::Eval);
    for (const auto& [coord, feat] : r.features) {
        if (coord.stream == 0) {
            CHECK(bit_equal(feat, r.stem));
        }
    }
    CHECK(bit_equal(r.logits, conv2d(r.stem, m.head())));
}

TEST_CASE("conv_deconv mask equals a sequential encoder-decoder") {
    GridSpec s = small_spec(5, 3, 3, 4);
    s.mask = preset_mask(MaskPreset::ConvDeconv, s);
    auto m = build_grid<float>(s, {32, 32}, 3);
    testutil::randomize_model(m, 4);
    testutil::SequentialNet<float> seq(m, testutil::conv_deconv_path_5x6());
    for (int k = 0; k < 3; ++k) {
        const Tensor<float> x = random_tensor<float>(Shape{1, 3, 32, 32}, 100 + k);
        const Tensor<float> a = forward(m, x, Mode::Eval).logits;
        const Tensor<float> b = seq(x);
        REQUIRE(a.shape() == b.shape());
        CHECK(testutil::max_abs_diff(a.values(), b.values()) < 1e-6);
    }
}

TEST_CASE("fuse_block addends") {
    auto m = build_grid<double>(small_spec(2, 1, 1, 2), {8, 8});
    testutil::randomize_model(m, 5);
    const Tensor<double> x0 = random_tensor<double>(Shape{2, 2, 8, 8}, 6);
    BlockContext ctx;
    ctx.target = m.stream_shapes()[0];

    SUBCASE("vertical input absent") {
        auto t = fuse_block<double>(m.block({0, 0}), &x0, nullptr, ctx);
        CHECK_FALSE(t.vertical.defined());
        const Tensor<double> want = add(x0, t.residual);
        for (std::size_t k = 0; k < want.numel(); ++k) {
            CHECK(t.output.values()[k] == want.values()[k]);
        }
    }
    SUBCASE("horizontal input absent") {
        BlockContext c1 = ctx;
        c1.target = m.stream_shapes()[1];
        auto t = fuse_block<double>(m.block({1, 0}), nullptr, &x0, c1);
        CHECK_FALSE(t.identity.defined());
        CHECK(t.output.same_storage(t.vertical));
        CHECK(t.output.shape() == Shape{2, 4, 4, 4});
    }
    SUBCASE("gated residual") {
        ctx.keep_residual = false;
        const Tensor<double> x1 = random_tensor<double>(Shape{2, 4, 4, 4}, 9);
        auto t = fuse_block<double>(m.block({0, 1}), &x0, &x1, ctx);
        CHECK_FALSE(t.residual.defined());
        const Tensor<double> want = add(x0, t.vertical);
        for (std::size_t k = 0; k < want.numel(); ++k) {
            CHECK(t.output.values()[k] == want.values()[k]);
        }
    }
    CHECK_THROWS_AS(fuse_block<double>(m.block({0, 0}), static_cast<const Tensor<double>*>(nullptr), nullptr, ctx),
                    std::invalid_argument);
}

TEST_CASE("concat fusion projects back to the stream width") {
    GridSpec s = small_spec(3, 1, 1, 4);
    s.fusion = Fusion::Concat;
    auto m = build_grid<float>(s, {16, 16});
    CHECK(m.block({0, 1}).fuse_proj->weight.shape() == Shape{4, 12, 1, 1});
    CHECK_FALSE(m.block({1, 0}).fuse_proj.has_value());
    const auto r = forward(m, random_tensor<float>(Shape{2, 3, 16, 16}, 1), Mode::Train);
    CHECK(r.logits.shape() == Shape{2, 3, 16, 16});
}

TEST_CASE("vertical residual shortcuts keep shapes") {
    GridSpec s = small_spec(3, 2, 2, 4);
    s.vertical_residual = true;
    auto m = build_grid<float>(s, {15, 13});
    const auto r = forward(m, random_tensor<float>(Shape{2, 3, 15, 13}, 1), Mode::Train);
    CHECK(r.logits.shape() == Shape{2, 3, 15, 13});
}

TEST_CASE("build and forward errors") {
    GridSpec s = small_spec(5, 2, 2, 4);
    CHECK_THROWS_AS(build_grid<float>(s, {15, 32}), std::invalid_argument);
    GridSpec dead = s;
    dead.mask = ConnectionMask(5, 4, false);
    CHECK_THROWS_AS(build_grid<float>(dead, {32, 32}), std::invalid_argument);

    auto m = build_grid<float>(s, {32, 32});
    CHECK_THROWS_AS(m.set_mask(ConnectionMask(5, 4, false)), std::invalid_argument);
    CHECK_THROWS_AS(forward(m, random_tensor<float>(Shape{1, 1, 32, 32}, 1), Mode::Eval), std::invalid_argument);
    CHECK_THROWS_AS(forward(m, random_tensor<float>(Shape{1, 3, 8, 32}, 1), Mode::Eval), std::invalid_argument);
    const DropMask drop = DropMask::all_keep(m.spec());
    CHECK_THROWS_AS(forward(m, random_tensor<float>(Shape{1, 3, 32, 32}, 1), Mode::Eval, &drop),
                    std::invalid_argument);
}

TEST_CASE("forward accepts other input sizes") {
    auto m = build_grid<float>(small_spec(4, 2, 2, 4), {32, 32});
    for (auto hw : {std::pair{24, 40}, std::pair{17, 9}, std::pair{64, 64}}) {
        const auto r = forward(m, random_tensor<float>(Shape{1, 3, hw.first, hw.second}, 2), Mode::Eval);
        CHECK(r.logits.shape() == Shape{1, 3, hw.first, hw.second});
    }
}

TEST_CASE("every active block receives gradient") {
    auto m = build_grid<double>(small_spec(3, 2, 2, 2), {16, 16}, 1);
    const Tensor<double> x = random_tensor<double>(Shape{2, 3, 16, 16}, 3);
    std::vector<int> labels(2 * 16 * 16);
    for (std::size_t k = 0; k < labels.size(); ++k) {
        labels[k] = static_cast<int>(k * 7 % 3);
    }
    m.zero_grad();
    Tape<double> tape;
    const auto r = forward(m, x, Mode::Train, nullptr, &tape);
    tape.backward(softmax_cross_entropy(r.logits, std::span<const int>(labels), &tape));
    for (auto& e : m.named_tensors()) {
        if (e.role != TensorRole::Parameter || !e.name.ends_with("weight")) {
            continue;
        }
        double norm = 0.0;
        for (double g : std::as_const(*e.tensor).grad()) {
            norm += std::abs(g);
        }
        CHECK_MESSAGE(norm > 0.0, e.name);
    }
}

TEST_CASE("clone shares no storage and named tensors are ordered") {
    auto m = build_grid<float>(small_spec(3, 1, 1, 4), {8, 8});
    auto c = m.clone();
    const auto a = m.named_tensors();
    const auto b = c.named_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].name == b[k].name);
        CHECK_FALSE(a[k].tensor->same_storage(*b[k].tensor));
    }
    CHECK(a.front().name.starts_with("stem."));
    CHECK(a.back().name.starts_with("head."));
}

TEST_CASE("masked parameters are frozen") {
    GridSpec s = small_spec(3, 1, 1, 4);
    s.mask = preset_mask(MaskPreset::ConvDeconv, s);
    auto m = build_grid<float>(s, {8, 8});
    std::size_t frozen = 0;
    for (const auto& e : m.named_tensors()) {
        frozen += e.frozen;
        if (e.coord && e.frozen) {
            const bool res = e.name.find(".res.") != std::string::npos;
            if (res) {
                CHECK_FALSE(s.mask.residual_on(e.coord->stream, e.coord->column));
            }
        }
    }
    CHECK(frozen > 0);
    auto unmasked = build_grid<float>(small_spec(3, 1, 1, 4), {8, 8});
    CHECK(m.trainable_parameters().size() < unmasked.trainable_parameters().size());
}
