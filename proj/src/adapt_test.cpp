#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "../tests/support/oracles.hpp"
#include "spa/adapt.hpp"
#include "spa/augment.hpp"
#include "spa/metrics.hpp"
#include "spa/nn_ops.hpp"

using namespace spa;

namespace {

PredictionBatch logits_batch(std::vector<double> logits, int classes) {
    PredictionBatch p;
    p.num_classes = classes;
    p.batch = static_cast<int>(logits.size()) / classes;
    p.class_logits = std::move(logits);
    return p;
}

// Two-class logits whose softmax maximum equals c (c >= 0.5).
std::vector<double> with_confidence(double c) { return {std::log(c / (1.0 - c)), 0.0}; }

ModelConfig config_of(int size) {
    ModelConfig c;
    c.height = size;
    c.width = size;
    return c;
}

std::vector<Image> images(int n, int size, std::uint64_t seed) {
    std::vector<Image> out;
    for (int i = 0; i < n; ++i) out.push_back(spa::testing::random_image(size, size, seed + i));
    return out;
}

std::vector<SampleRecord> stream_of(int n, std::uint64_t seed) {
    Rng rng(seed);
    return gen_dataset(n, 24, rng);
}

double kl_oracle(const std::vector<double>& ps, const std::vector<double>& pw) {
    double acc = 0.0;
    for (std::size_t k = 0; k < ps.size(); ++k) acc += ps[k] * std::log(ps[k] / pw[k]);
    return acc;
}

std::vector<double> softmax_of(std::span<const double> z) {
    std::vector<double> p(z.size());
    double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) s += p[k] = std::exp(z[k] - m);
    for (double& v : p) v /= s;
    return p;
}

}  // namespace

TEST_CASE("confidence") {
    CHECK(confidence(logits_batch({0.3, 0.3, 0.3, 0.3}, 4))[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(confidence(logits_batch({2.0, 0.0}, 2))[0] == doctest::Approx(0.880797).epsilon(1e-6));
    const double e2 = std::exp(2.0);
    CHECK(std::abs(confidence(logits_batch({2.0, 0.0}, 2))[0] - e2 / (e2 + 1.0)) <= 1e-15);
    const auto a = confidence(logits_batch({0.1, -1.2, 3.4}, 3));
    const auto b = confidence(logits_batch({100.1, 98.8, 103.4}, 3));
    CHECK(std::abs(a[0] - b[0]) <= 1e-12);
    CHECK_THROWS_AS(confidence(PredictionBatch{}), std::invalid_argument);
}

TEST_CASE("selection is strict and elementwise") {
    const std::vector<double> cs{0.9, 0.5, 0.6, 0.7};
    const std::vector<double> cw{0.5, 0.5, 0.6, 0.9};
    std::vector<double> ls;
    std::vector<double> lw;
    for (int i = 0; i < 4; ++i) {
        for (double v : with_confidence(cs[i])) ls.push_back(v);
        for (double v : with_confidence(cw[i])) lw.push_back(v);
    }
    const auto m = select(logits_batch(ls, 2), logits_batch(lw, 2));
    CHECK(m.sample_bits == std::vector<std::uint8_t>{1, 0, 0, 0});
    CHECK(m.sample_fraction() == 0.25);

    // Spec example with one entry below 0.5: the max-probability of a
    // two-class softmax cannot be 0.4, so use three classes there.
    const auto strong = logits_batch({std::log(0.4), std::log(0.35), std::log(0.25)}, 3);
    const auto weak = logits_batch({std::log(0.5), std::log(0.25), std::log(0.25)}, 3);
    CHECK(select(strong, weak).sample_bits == std::vector<std::uint8_t>{0});

    const auto hi = logits_batch(with_confidence(0.7), 2);
    const auto lo = logits_batch(with_confidence(0.6), 2);
    CHECK(select(hi, lo, 0.75).sample_bits == std::vector<std::uint8_t>{0});
    CHECK(select(hi, lo, 0.65).sample_bits == std::vector<std::uint8_t>{1});
    CHECK_THROWS_AS(select(hi, logits_batch({0.0, 0.0, 0.0}, 3)), std::invalid_argument);
}

TEST_CASE("kl consistency values and gradients") {
    const std::vector<double> strong{std::log(0.8), std::log(0.2)};
    const std::vector<double> weak{0.0, 0.0};
    const std::vector<std::uint8_t> one{1};
    const auto kl = kl_consistency(weak, strong, 2, one);
    CHECK(kl.value == doctest::Approx(0.8 * std::log(1.6) + 0.2 * std::log(0.4)).epsilon(1e-12));
    CHECK(kl.value == doctest::Approx(0.19274).epsilon(1e-4));
    CHECK(kl_consistency(strong, strong, 2, one).value == doctest::Approx(0.0).scale(1.0));

    const auto none = kl_consistency(weak, strong, 2, std::vector<std::uint8_t>{0});
    CHECK(none.value == 0.0);
    for (double g : none.grad_weak) CHECK(g == 0.0);

    // Analytic gradients against central differences on both inputs.
    Rng rng(4);
    std::vector<double> w(12);
    std::vector<double> s(12);
    for (double& v : w) v = rng.normal();
    for (double& v : s) v = rng.normal();
    const std::vector<std::uint8_t> mask{1, 0, 1, 1};
    const auto full = kl_consistency(w, s, 3, mask, false);
    const auto detached = kl_consistency(w, s, 3, mask, true);
    CHECK(detached.grad_weak == full.grad_weak);
    for (double g : detached.grad_strong) CHECK(g == 0.0);
    auto value_at = [&](const std::vector<double>& ww, const std::vector<double>& ss) {
        double acc = 0.0;
        for (int r = 0; r < 4; ++r) {
            if (!mask[r]) continue;
            acc += kl_oracle(softmax_of(std::span(ss).subspan(r * 3, 3)), softmax_of(std::span(ww).subspan(r * 3, 3)));
        }
        return acc / 3.0;
    };
    CHECK(full.value == doctest::Approx(value_at(w, s)).epsilon(1e-12));
    const double h = 1e-6;
    for (std::size_t i = 0; i < w.size(); ++i) {
        auto wp = w, wm = w, sp = s, sm = s;
        wp[i] += h;
        wm[i] -= h;
        sp[i] += h;
        sm[i] -= h;
        CHECK(full.grad_weak[i] == doctest::Approx((value_at(wp, s) - value_at(wm, s)) / (2 * h)).epsilon(1e-6).scale(1e-6));
        CHECK(full.grad_strong[i] == doctest::Approx((value_at(w, sp) - value_at(w, sm)) / (2 * h)).epsilon(1e-6).scale(1e-6));
    }
    CHECK_THROWS_AS(kl_consistency(w, s, 3, one), std::invalid_argument);
}

TEST_CASE("losses are nonnegative") {
    Rng rng(5);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> a(6);
        std::vector<double> b(6);
        for (double& v : a) v = 5.0 * rng.normal();
        for (double& v : b) v = 5.0 * rng.normal();
        CHECK(kl_consistency(a, b, 3, std::vector<std::uint8_t>{1, 1}).value >= 0.0);
        CHECK(l1_consistency(a, b, 3).value >= 0.0);
    }
}

TEST_CASE("l1 consistency") {
    CHECK(l1_consistency(std::vector<double>{1.0, 2.0}, std::vector<double>{0.0, 4.0}, 2).value == 1.5);
    CHECK(l1_consistency(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0, 2.0}, 2).value == 0.0);
    const std::vector<double> w{1.0, 2.0, 5.0, 5.0};
    const std::vector<double> s{0.0, 4.0, 1.0, 1.0};
    const auto kept = l1_consistency(w, s, 2, std::vector<std::uint8_t>{0, 1});
    CHECK(kept.value == (4.0 + 4.0) / 2.0);
    CHECK(kept.grad_weak == std::vector<double>{0.0, 0.0, 0.5, 0.5});
    const auto both = l1_consistency(w, s, 2, std::vector<std::uint8_t>{1, 1}, false);
    CHECK(both.grad_strong == std::vector<double>{-0.25, 0.25, -0.25, -0.25});
    CHECK(l1_consistency(w, s, 2, std::vector<std::uint8_t>{0, 0}).value == 0.0);
}

TEST_CASE("entropy loss") {
    CHECK(entropy_loss(std::vector<double>{1.0, 1.0, 1.0}, 3).value == doctest::Approx(std::log(3.0)).epsilon(1e-14));
    CHECK(entropy_loss(std::vector<double>{60.0, 0.0, 0.0}, 3).value <= 1e-20);
    const std::vector<double> z{0.3, -1.0, 2.0, 0.5, 0.5, -0.2};
    const auto e = entropy_loss(z, 3);
    auto value_at = [](const std::vector<double>& zz) {
        double acc = 0.0;
        for (int r = 0; r < 2; ++r) {
            for (double p : softmax_of(std::span(zz).subspan(r * 3, 3))) acc -= p * std::log(p);
        }
        return acc / 2.0;
    };
    CHECK(e.value == doctest::Approx(value_at(z)).epsilon(1e-13));
    for (std::size_t i = 0; i < z.size(); ++i) {
        auto zp = z, zm = z;
        zp[i] += 1e-6;
        zm[i] -= 1e-6;
        CHECK(e.grad_weak[i] == doctest::Approx((value_at(zp) - value_at(zm)) / 2e-6).epsilon(1e-6).scale(1e-6));
    }
}

TEST_CASE("consistency and entropy gradients through the model match finite differences") {
    ModelState s = make_model(config_of(8), 3);
    Rng perturb(3);
    for (auto& p : s.params) {
        if (s.is_adaptable(static_cast<ParamId>(&p - s.params.data()))) {
            for (double& v : p.value) v += 0.1 * perturb.normal();
        }
    }
    const auto x = images(3, 8, 70);
    const auto v = images(3, 8, 80);
    const auto teacher = forward(s, x, Branch::strong).predictions;
    const std::vector<std::uint8_t> all{1, 1, 1};

    auto kl_value = [&](const ModelState& st) {
        const auto w = forward(st, v, Branch::weak).predictions;
        return kl_consistency(w.class_logits, teacher.class_logits, 3, all).value;
    };
    auto ent_value = [&](const ModelState& st) {
        const auto p = forward(st, x, Branch::strong).predictions;
        return entropy_loss(p.class_logits, 3).value;
    };

    const auto wf = forward(s, v, Branch::weak);
    PredictionBatch gkl = PredictionBatch::zeros_like(wf.predictions);
    gkl.class_logits = kl_consistency(wf.predictions.class_logits, teacher.class_logits, 3, all).grad_weak;
    const auto grads_kl = backward(s, wf.tape, gkl);

    const auto sf = forward(s, x, Branch::strong);
    PredictionBatch gent = PredictionBatch::zeros_like(sf.predictions);
    gent.class_logits = entropy_loss(sf.predictions.class_logits, 3).grad_weak;
    const auto grads_ent = backward(s, sf.tape, gent);

    int checked = 0;
    for (int pi = 0; pi < kParamCount; ++pi) {
        if (!s.is_adaptable(static_cast<ParamId>(pi))) continue;
        for (std::size_t i = 0; i < s.params[pi].value.size(); ++i) {
            const double keep = s.params[pi].value[i];
            const double h = 1e-4;
            s.params[pi].value[i] = keep + h;
            const double kp = kl_value(s);
            const double ep = ent_value(s);
            s.params[pi].value[i] = keep - h;
            const double km = kl_value(s);
            const double em = ent_value(s);
            s.params[pi].value[i] = keep;
            const double nk = (kp - km) / (2 * h);
            const double ne = (ep - em) / (2 * h);
            CAPTURE(s.params[pi].name);
            CAPTURE(i);
            CHECK(std::abs(grads_kl[pi][i] - nk) <= 1e-4 * std::max({std::abs(nk), std::abs(grads_kl[pi][i]), 1e-3}));
            CHECK(std::abs(grads_ent[pi][i] - ne) <= 1e-4 * std::max({std::abs(ne), std::abs(grads_ent[pi][i]), 1e-3}));
            ++checked;
        }
    }
    CHECK(checked == 8 * 2 + 16 * 2 + 16 * 16 + 16);
}

TEST_CASE("views") {
    const auto x = images(4, 32, 1);
    AdaptConfig cfg;
    Rng r1(1);
    const auto sep = make_views(x, cfg, r1);
    CHECK(sep.size() == 2);
    CHECK(sep[0].size() == 4);
    cfg.view_mode = ViewMode::combined;
    Rng r2(1);
    CHECK(make_views(x, cfg, r2).size() == 1);
    cfg.view_mode = ViewMode::separate;
    cfg.use_noise_view = false;
    Rng r3(1);
    CHECK(make_views(x, cfg, r3).size() == 1);
    cfg.use_low_freq_view = false;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves the model frozen") {
    const ModelState s0 = make_model(config_of(24), 2);
    ModelState s = s0;
    AdaptConfig cfg;
    cfg.lr_norm = 0.0;
    cfg.lr_projector = 0.0;
    const auto x = images(6, 24, 10);
    Rng rng(1);
    const auto res = spa_adapt_step(s, x, cfg, rng);
    CHECK(res.predictions.class_logits == forward(s0, x, Branch::strong).predictions.class_logits);
    for (std::size_t i = 0; i < s.params.size(); ++i) CHECK(s.params[i].value == s0.params[i].value);
    for (const auto& p : s.params) {
        for (double g : p.grad) CHECK(g == 0.0);
    }
}

TEST_CASE("stop-gradient step equals a weak-branch-only reconstruction") {
    ModelState base = make_model(config_of(24), 5);
    Rng perturb(9);
    for (double& v : base.param(ParamId::projector_weight).value) v += 0.05 * perturb.normal();
    const auto x = images(6, 24, 20);
    AdaptConfig cfg;
    cfg.lr_norm = 0.05;
    cfg.lr_projector = 0.05;
    cfg.selection_enabled = false;

    ModelState stepped = base;
    Rng rng(3);
    spa_adapt_step(stepped, x, cfg, rng);

    ModelState manual = base;
    Rng vr(3);
    const auto views = make_views(x, cfg, vr);
    const auto sp = forward(manual, x, Branch::strong).predictions;
    GradientSet total(manual.params.size());
    for (std::size_t i = 0; i < total.size(); ++i) total[i].assign(manual.params[i].numel(), 0.0);
    for (const auto& view : views) {
        const auto wf = forward(manual, view, Branch::weak);
        PredictionBatch g = PredictionBatch::zeros_like(wf.predictions);
        const std::vector<std::uint8_t> all(sp.batch, 1);
        g.class_logits = kl_consistency(wf.predictions.class_logits, sp.class_logits, 3, all).grad_weak;
        const auto l1 = l1_consistency(wf.predictions.regression, sp.regression, sp.reg_outputs, all);
        for (std::size_t i = 0; i < l1.grad_weak.size(); ++i) g.regression[i] = cfg.reg_loss_weight * l1.grad_weak[i];
        const std::vector<std::uint8_t> pix(sp.pixel_logits.size() / 2, 1);
        const auto pk = kl_consistency(wf.predictions.pixel_logits, sp.pixel_logits, 2, pix);
        for (std::size_t i = 0; i < pk.grad_weak.size(); ++i) g.pixel_logits[i] = cfg.pixel_loss_weight * pk.grad_weak[i];
        const auto gr = backward(manual, wf.tape, g);
        for (std::size_t i = 0; i < total.size(); ++i) {
            for (std::size_t j = 0; j < total[i].size(); ++j) total[i][j] += gr[i][j];
        }
    }
    accumulate_grads(manual, total);
    sgd_step(manual, [&](std::string_view n) { return n.starts_with("projector.") ? cfg.lr_projector : cfg.lr_norm; },
             cfg.momentum);
    for (std::size_t i = 0; i < manual.params.size(); ++i) CHECK(manual.params[i].value == stepped.params[i].value);

    ModelState through = base;
    AdaptConfig no_sg = cfg;
    no_sg.stop_gradient = false;
    Rng rng2(3);
    spa_adapt_step(through, x, no_sg, rng2);
    bool differs = false;
    for (std::size_t i = 0; i < through.params.size(); ++i) differs |= through.params[i].value != stepped.params[i].value;
    CHECK(differs);
}

TEST_CASE("rollback on a non-finite update") {
    const ModelState s0 = make_model(config_of(24), 6);
    ModelState s = s0;
    const auto x = images(4, 24, 30);
    AdaptConfig cfg;
    cfg.lr_norm = 1e308;
    cfg.lr_projector = 1e308;
    cfg.selection_enabled = false;
    Rng rng(1);
    const auto res = spa_adapt_step(s, x, cfg, rng);
    CHECK(res.rolled_back);
    CHECK(res.diagnostic.find("restored") != std::string::npos);
    for (std::size_t i = 0; i < s.params.size(); ++i) CHECK(s.params[i].value == s0.params[i].value);
    ModelState e = s0;
    CHECK(entropy_adapt_step(e, x, cfg).rolled_back);

    auto bad = x;
    bad[1].values[5] = std::nan("");
    CHECK_THROWS_AS(spa_adapt_step(s, bad, AdaptConfig{}, rng), std::invalid_argument);
}

TEST_CASE("run_stream") {
    const ModelState s = make_model(config_of(24), 7);
    const auto stream = stream_of(50, 40);
    AdaptConfig cfg;
    cfg.batch_size = 16;

    SUBCASE("method none equals the frozen model") {
        const auto r = run_stream(s, stream, cfg, Method::none);
        std::vector<Image> x;
        std::vector<int> labels;
        for (const auto& rec : stream) {
            x.push_back(rec.image);
            labels.push_back(rec.class_label);
        }
        const auto frozen = forward(s, x, Branch::strong).predictions;
        CHECK(r.accuracy == accuracy(frozen, labels));
        for (int b = 0; b < 50; ++b) CHECK(r.predicted_class[b] == argmax(frozen.logits(b)));
        CHECK(r.records.size() == 4);
        CHECK(r.records.back().acc_running == r.accuracy);
    }
    SUBCASE("first batch predictions come from the initial parameters") {
        cfg.lr_norm = 0.1;
        cfg.lr_projector = 0.1;
        const auto r = run_stream(s, stream, cfg, Method::spa);
        std::vector<Image> first;
        for (int i = 0; i < 16; ++i) first.push_back(stream[i].image);
        const auto frozen = forward(s, first, Branch::strong).predictions;
        for (int b = 0; b < 16; ++b) CHECK(r.predicted_class[b] == argmax(frozen.logits(b)));
    }
    SUBCASE("bit-identical reruns") {
        for (Method m : {Method::spa, Method::spa_i, Method::entropy}) {
            const auto a = run_stream(s, stream, cfg, m);
            const auto b = run_stream(s, stream, cfg, m);
            CHECK(a.predicted_class == b.predicted_class);
            CHECK(a.predicted_box == b.predicted_box);
            for (std::size_t i = 0; i < a.records.size(); ++i) {
                CHECK(a.records[i].loss == b.records[i].loss);
                CHECK(a.records[i].selected_frac == b.records[i].selected_frac);
            }
        }
    }
    SUBCASE("incompatible streams are rejected") {
        Rng rng(1);
        const auto wrong = gen_dataset(4, 32, rng);
        CHECK_THROWS_AS(run_stream(s, wrong, cfg, Method::spa), std::invalid_argument);
        CHECK_THROWS_AS(run_stream(s, std::vector<SampleRecord>{}, cfg, Method::spa), std::invalid_argument);
    }
    SUBCASE("csv") {
        const auto path = std::filesystem::temp_directory_path() / "spa_stream_test.csv";
        run_stream(s, stream, cfg, Method::none).write_csv(path);
        std::ifstream is(path);
        std::string header;
        std::getline(is, header);
        CHECK(header == "batch,loss,selected_frac,acc_running,mae_running");
        std::filesystem::remove(path);
    }
}

TEST_CASE("method names") {
    for (Method m : {Method::none, Method::spa, Method::spa_i, Method::entropy}) CHECK(parse_method(method_name(m)) == m);
    CHECK_THROWS_AS(parse_method("tent"), std::invalid_argument);
}

TEST_CASE("config validation") {
    AdaptConfig c;
    CHECK_NOTHROW(c.validate());
    c.momentum = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = AdaptConfig{};
    c.confidence_floor = 1.5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = AdaptConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
