// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
// Exit status is nonzero when any hard criterion fails; the ablation trend
// (7) is reported but only flagged.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "gridnet/checkpoint.hpp"
#include "gridnet/gradcheck.hpp"
#include "gridnet/metrics.hpp"
#include "gridnet/train.hpp"
#include "model_util.hpp"
#include "test_util.hpp"

using namespace gridnet;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr double kEquivTol = 1e-6;
constexpr double kKeepRateTol = 0.01;
constexpr double kLearnIoU = 0.85;
constexpr double kLearnMinutes = 60.0;
constexpr int kLearnEpochs = 20;
constexpr double kAblationAllowance = 0.02;
constexpr double kAdamRelTol = 1e-12;

struct Outcome {
    bool pass = false;
    std::string detail;
    bool hard = true;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

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

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c);
    return buf;
}

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    auto m = build_grid<double>(make_symmetric_spec(3, 1, 1, 4, 4), {16, 16}, 21);
    const Tensor<double> x = testutil::random_tensor<double>(Shape{1, 3, 16, 16}, 22, false, 0.0, 1.0);
    std::vector<int> labels(256);
    StreamRng rng(23);
    for (int& l : labels) {
        l = rng.uniform_int(0, 3);
    }
    GradcheckOptions o;
    o.samples = 100;
    o.tolerance = kGradTol;
    const GradcheckReport r = gradcheck_grid(m, x, labels, o);
    const double dt = seconds_since(t0);
    return {r.checked == 100 && r.max_rel_error < kGradTol && dt < kGradSeconds,
            fmt("max rel err %.3g over 100 coords (worst ", r.max_rel_error) + r.worst +
                fmt("), %.1fs", dt)};
}

Outcome counting_oracle() {
    const GridSpec s = make_symmetric_spec(5, 3, 3, 16, 19);
    const double approx = approx_param_count(s);
    const auto m = build_grid<float>(s, {16, 16});
    const double exact = static_cast<double>(count_params_exact(m));
    const double ratio = exact / approx;
    bool monotone = true;
    std::int64_t prev = 0;
    for (int ns = 1; ns <= 6; ++ns) {
        const auto c = count_params_exact(build_grid<float>(make_symmetric_spec(ns, 3, 3, 16, 19), {32, 32}));
        monotone = monotone && c > prev;
        prev = c;
    }
    prev = 0;
    for (int nc = 1; nc <= 5; ++nc) {
        const auto c = count_params_exact(build_grid<float>(make_symmetric_spec(5, nc, nc, 16, 19), {16, 16}));
        monotone = monotone && c > prev;
        prev = c;
    }
    return {approx == 10027008.0 && ratio > 0.5 && ratio < 2.0 && monotone,
            fmt("approx %.0f, exact %.0f, ratio %.4f", approx, exact, ratio) +
                (monotone ? ", monotone" : ", NOT monotone")};
}

Outcome mask_equivalence() {
    GridSpec s = make_symmetric_spec(5, 3, 3, 4, 4);
    s.mask = preset_mask(MaskPreset::ConvDeconv, s);
    auto m = build_grid<float>(s, {32, 32}, 31);
    testutil::randomize_model(m, 32);
    testutil::SequentialNet<float> seq(m, testutil::conv_deconv_path_5x6());
    double worst = 0.0;
    for (int k = 0; k < 10; ++k) {
        const Tensor<float> x = testutil::random_tensor<float>(Shape{1, 3, 32, 32}, 300 + k);
        const Tensor<float> a = forward(m, x, Mode::Eval).logits;
        const Tensor<float> b = seq(x);
        worst = std::max(worst, testutil::max_abs_diff(a.values(), b.values()));
    }
    return {worst < kEquivTol, fmt("max abs diff %.3g over 10 inputs", worst)};
}

Outcome dropout_semantics() {
    const GridSpec s = make_symmetric_spec(5, 3, 3, 4, 4);
    auto base = build_grid<float>(s, {32, 32}, 41);
    testutil::randomize_model(base, 42);
    const Tensor<float> x = testutil::random_tensor<float>(Shape{2, 3, 32, 32}, 43);

    auto a = base.clone();
    auto b = base.clone();
    const DropMask keep = sample_drop_mask(s, 1.0, 7, 0);
    const bool p1 = bit_equal(forward(a, x, Mode::Train, &keep).logits, forward(b, x, Mode::Train).logits);

    auto c = base.clone();
    auto d = base.clone();
    for (auto& [coord, blk] : d.blocks()) {
        if (blk.res) {
            for (float& v : d.block(coord).res->conv2.weight.values()) {
                v = 0.0f;
            }
        }
    }
    const DropMask none = sample_drop_mask(s, 0.0, 7, 0);
    const bool p0 = bit_equal(forward(c, x, Mode::Train, &none).logits, forward(d, x, Mode::Train).logits);

    std::size_t kept = 0;
    for (std::uint64_t step = 0; step < 10000; ++step) {
        kept += sample_drop_mask(s, 0.7, 99, step).count_kept();
    }
    const double rate = static_cast<double>(kept) / (10000.0 * 30.0);
    return {p1 && p0 && std::abs(rate - 0.7) <= kKeepRateTol,
            std::string("p=1 ") + (p1 ? "bit-equal" : "DIFFERS") + ", p=0 " + (p0 ? "bit-equal" : "DIFFERS") +
                fmt(", keep rate %.4f", rate)};
}

Outcome zero_mapping() {
    auto m = build_grid<float>(make_symmetric_spec(5, 3, 3, 4, 4), {32, 32}, 51);
    testutil::randomize_model(m, 52);
    for (auto& e : m.named_tensors()) {
        if (e.coord && e.role == TensorRole::Parameter) {
            for (float& v : e.tensor->values()) {
                v = 0.0f;
            }
        }
    }
    const auto r = forward(m, testutil::random_tensor<float>(Shape{2, 3, 32, 32}, 53), Mode::Eval);
    bool ok = true;
    int blocks = 0;
    for (const auto& [coord, feat] : r.features) {
        if (coord.stream == 0) {
            ok = ok && bit_equal(feat, r.stem);
            ++blocks;
        }
    }
    return {ok && blocks == 6, std::to_string(blocks) + " stream-0 blocks " + (ok ? "bit-equal to stem" : "DIFFER")};
}

struct LearnSetup {
    int train_scenes = 200;
    int test_scenes = 50;
    int epochs = kLearnEpochs;
    double keep_p = 0.9;
    std::uint64_t seed = 5;
};

// Trains the 5-stream, 2+2 column, F0 = 4 grid on 64x64 scenes and returns
// the single-scale mean IoU on held-out scenes.
double learn_and_score(const LearnSetup& ls) {
    std::vector<Scene> train;
    std::vector<Scene> test;
    for (std::uint64_t s : dataset_seeds(11, ls.train_scenes)) {
        train.push_back(generate_scene(s, 64, 64, 4, 6));
    }
    for (std::uint64_t s : dataset_seeds(12, ls.test_scenes)) {
        test.push_back(generate_scene(s, 64, 64, 4, 6));
    }
    GridSpec spec = make_symmetric_spec(5, 2, 2, 4, 4);
    spec.dropout_p = ls.keep_p;
    auto m = build_grid<float>(spec, {64, 64}, derive_seed(ls.seed, {0x696e6974ULL}));
    TrainConfig tc;
    tc.epochs = ls.epochs;
    tc.lr_drop_epoch = ls.epochs * 4 / 5;
    tc.dropout_p = ls.keep_p;
    tc.seed = ls.seed;
    tc.augment = AugmentConfig{48, 64, 64, 0.5};
    OptimState opt = make_optim_state(m, AdamConfig{});
    for (int e = 0; e < ls.epochs; ++e) {
        train_epoch(m, train, tc, opt, e);
    }
    std::vector<EvalSample> samples;
    const std::vector<double> one = {1.0};
    for (const Scene& sc : test) {
        samples.push_back({multiscale_predict(m, sc.image, 64, 64, one).labels, sc.labels, sc.instances});
    }
    return *evaluate_samples(samples, 4, CategoryMap::synthetic(4)).class_iou.mean;
}

Outcome desk_learning() {
    const auto t0 = Clock::now();
    const double miou = learn_and_score(LearnSetup{});
    const double minutes = seconds_since(t0) / 60.0;
    return {miou >= kLearnIoU && minutes <= kLearnMinutes,
            fmt("mean IoU %.4f after %.0f epochs, %.1f min", miou, kLearnEpochs, minutes)};
}

Outcome ablation_direction() {
    double with = 0.0;
    double without = 0.0;
    for (std::uint64_t seed : {101, 102, 103}) {
        LearnSetup ls;
        ls.train_scenes = 96;
        ls.test_scenes = 32;
        ls.epochs = 8;
        ls.seed = seed;
        ls.keep_p = 0.9;
        with += learn_and_score(ls) / 3.0;
        ls.keep_p = 1.0;
        without += learn_and_score(ls) / 3.0;
    }
    Outcome o{with >= without - kAblationAllowance,
              fmt("mean IoU with total dropout %.4f, without %.4f", with, without), false};
    if (!o.pass) {
        o.detail += " (flagged regression)";
    }
    return o;
}

Outcome adam_oracle() {
    Tensor<double> p(Shape{1, 1, 2, 3}, {0.3, -0.7, 1.1, 0.0, 2.5, -4.0}, true);
    OptimState st;
    st.m.assign(1, std::vector<double>(6, 0.0));
    st.v.assign(1, std::vector<double>(6, 0.0));
    std::vector<testutil::ScalarAdam> oracle(6);
    std::vector<double> theta(p.values().begin(), p.values().end());
    StreamRng rng(81);
    const std::vector<AdamTarget<double>> targets = {{&p, "p", false}};
    double worst = 0.0;
    for (int s = 0; s < 100; ++s) {
        for (std::size_t i = 0; i < 6; ++i) {
            const double g = rng.uniform(-1.0, 1.0) * (1.0 + static_cast<double>(i));
            p.grad()[i] = g;
            theta[i] = oracle[i].step(theta[i], g);
        }
        adam_update<double>(targets, st);
        for (std::size_t i = 0; i < 6; ++i) {
            worst = std::max(worst, relative_error(p.values()[i], theta[i]));
        }
    }
    return {worst < kAdamRelTol, fmt("max rel err %.3g over 100 steps", worst)};
}

Outcome resume_equivalence() {
    const auto dir = std::filesystem::temp_directory_path() / "gridnet_acceptance";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "resume.grdn").string();
    std::vector<Scene> scenes;
    for (std::uint64_t s : dataset_seeds(91, 4)) {
        scenes.push_back(generate_scene(s, 64, 64, 4, 6));
    }
    const GridSpec spec = make_symmetric_spec(5, 2, 2, 4, 4);
    auto model = build_grid<float>(spec, {64, 64}, 92);
    OptimState opt = make_optim_state(model, AdamConfig{});
    const AugmentConfig aug{48, 64, 64, 0.5};
    const std::vector<std::size_t> idx = {0, 1, 2, 3};
    train_step(model, make_batch(scenes, idx, aug, 93, 0), nullptr, opt);
    save_checkpoint(path, model, opt, {1, {}});

    const Batch batch = make_batch(scenes, idx, aug, 93, 1);
    const DropMask drop = sample_drop_mask(spec, 0.9, 93, 1);
    train_step(model, batch, &drop, opt);

    LoadedCheckpoint ck = load_checkpoint(path, &spec);
    train_step(ck.model, batch, &drop, ck.opt);
    std::filesystem::remove_all(dir);

    bool same = ck.opt.step == opt.step && ck.opt.m == opt.m && ck.opt.v == opt.v;
    const auto a = model.named_tensors();
    const auto b = ck.model.named_tensors();
    same = same && a.size() == b.size();
    for (std::size_t k = 0; same && k < a.size(); ++k) {
        same = bit_equal(*a[k].tensor, *b[k].tensor);
    }
    return {same, same ? "parameters, buffers and moments bit-equal" : "state DIFFERS"};
}

Outcome metrics_oracles() {
    ConfusionMatrix m(2);
    const std::vector<int> truth = {1, 1, 1, 1, 1, 0, 0, 0};
    const std::vector<int> pred = {1, 1, 1, 0, 0, 1, 0, 0};
    m.accumulate(pred, truth);
    const double v = *iou(m).per_class[1];
    const bool counts = m.tp(1) == 3 && m.fp(1) == 1 && m.fn(1) == 2;

    const std::vector<int> t2 = {1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0};
    const std::vector<int> in2 = {1, 1, 1, 1, 0, 0, 2, 2, 2, 2, 0, 0};
    const std::vector<int> p2 = {1, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1};
    InstanceSizes sizes(2);
    sizes.accumulate(t2, in2);
    InstanceIoU ii(sizes);
    ii.accumulate(p2, t2, in2);
    ConfusionMatrix m2(2);
    m2.accumulate(p2, t2);
    const double gap = std::abs(*ii.scores().per_class[1] - *iou(m2).per_class[1]);

    std::vector<std::vector<int>> ps;
    std::vector<std::vector<int>> ts;
    StreamRng rng(101);
    for (int k = 0; k < 10; ++k) {
        std::vector<int> p(100);
        std::vector<int> t(100);
        for (std::size_t i = 0; i < 100; ++i) {
            p[i] = rng.uniform_int(0, 3);
            t[i] = rng.uniform_int(0, 3);
        }
        ps.push_back(p);
        ts.push_back(t);
    }
    ConfusionMatrix fwd(4);
    ConfusionMatrix rev(4);
    for (int k = 0; k < 10; ++k) {
        fwd.accumulate(ps[k], ts[k]);
        rev.accumulate(ps[9 - k], ts[9 - k]);
    }
    return {counts && v == 0.5 && gap < 1e-15 && fwd == rev,
            fmt("IoU %.17g, |iIoU-IoU| %.3g", v, gap) + (fwd == rev ? ", order independent" : ", ORDER DEPENDENT")};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"gradient correctness", gradient_correctness},
        {"counting oracle", counting_oracle},
        {"mask equivalence", mask_equivalence},
        {"total dropout semantics", dropout_semantics},
        {"zero-mapping identity", zero_mapping},
        {"desk-scale learning", desk_learning},
        {"ablation direction", ablation_direction},
        {"adam oracle", adam_oracle},
        {"checkpoint resume-equivalence", resume_equivalence},
        {"metrics oracles", metrics_oracles},
    };
    int hard_failures = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("[%zu] %s %s: %s\n", k + 1, o.pass ? "PASS" : "FAIL", criteria[k].first, o.detail.c_str());
        std::fflush(stdout);
        if (!o.pass && o.hard) {
            ++hard_failures;
        }
    }
    return hard_failures == 0 ? 0 : 1;
}
