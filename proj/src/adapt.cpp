#include "spa/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

#include "spa/augment.hpp"
#include "spa/metrics.hpp"
#include "spa/nn_ops.hpp"

namespace spa {
namespace {

void require_unit(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
}

double row_max_prob(std::span<const double> z, std::vector<double>& scratch) {
    scratch.resize(z.size());
    softmax_into(z, scratch);
    return *std::max_element(scratch.begin(), scratch.end());
}

double fraction(const std::vector<std::uint8_t>& bits) {
    if (bits.empty()) return 0.0;
    const auto on = std::count(bits.begin(), bits.end(), std::uint8_t{1});
    return static_cast<double>(on) / static_cast<double>(bits.size());
}

bool all_finite(const GradientSet& g) {
    for (const auto& v : g) {
        for (double x : v) {
            if (!std::isfinite(x)) return false;
        }
    }
    return true;
}

void add_into(GradientSet& total, const GradientSet& g) {
    for (std::size_t i = 0; i < total.size(); ++i) {
        for (std::size_t j = 0; j < total[i].size(); ++j) total[i][j] += g[i][j];
    }
}

void add_scaled(std::vector<double>& dst, const std::vector<double>& src, double scale) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

GradientSet zero_grads(const ModelState& state) {
    GradientSet g(state.params.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i].assign(state.params[i].numel(), 0.0);
    return g;
}

double lr_for(const AdaptConfig& cfg, std::string_view name) {
    return name.starts_with("projector.") ? cfg.lr_projector : cfg.lr_norm;
}

// Applies the step unless the loss or any gradient is non-finite; restores
// the previous parameters if the update itself produced non-finite values.
void apply_update(ModelState& state, const GradientSet& grads, const AdaptConfig& cfg, StepResult& res) {
    if (!std::isfinite(res.loss) || !all_finite(grads)) {
        state.zero_grad();
        res.rolled_back = true;
        res.diagnostic = "non-finite loss or gradient (loss=" + std::to_string(res.loss) + "); step skipped";
        return;
    }
    std::vector<Param> snapshot = state.params;
    accumulate_grads(state, grads);
    sgd_step(state, [&](std::string_view name) { return lr_for(cfg, name); }, cfg.momentum);
    for (const auto& p : state.params) {
        const bool ok = std::all_of(p.value.begin(), p.value.end(), [](double v) { return std::isfinite(v); });
        if (!ok) {
            state.params = std::move(snapshot);
            state.zero_grad();
            res.rolled_back = true;
            res.diagnostic = "update produced non-finite values in " + p.name + "; parameters restored";
            return;
        }
    }
}

std::vector<std::uint8_t> all_ones(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

}  // namespace

void AdaptConfig::validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0, 1]");
    require_unit(mask_ratio, "mask_ratio");
    require_unit(noise_gamma, "noise_gamma");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw std::invalid_argument("noise_std must be >= 0");
    if (!(lr_norm >= 0.0) || !(lr_projector >= 0.0)) throw std::invalid_argument("learning rates must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
    if (!(reg_loss_weight >= 0.0)) throw std::invalid_argument("reg_loss_weight must be >= 0");
    if (!(pixel_loss_weight >= 0.0)) throw std::invalid_argument("pixel_loss_weight must be >= 0");
    if (confidence_floor) require_unit(*confidence_floor, "confidence_floor");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!use_low_freq_view && !use_noise_view) {
        throw std::invalid_argument("at least one of the low-frequency and noise augmentations must be enabled");
    }
}

double SelectionMask::sample_fraction() const { return fraction(sample_bits); }
double SelectionMask::pixel_fraction() const { return fraction(pixel_bits); }

std::vector<double> confidence(const PredictionBatch& pred) {
    if (pred.num_classes < 1) throw std::invalid_argument("confidence: no classification logits");
    std::vector<double> out(pred.batch);
    std::vector<double> scratch;
    for (int b = 0; b < pred.batch; ++b) out[b] = row_max_prob(pred.logits(b), scratch);
    return out;
}

std::vector<double> pixel_confidence(const PredictionBatch& pred) {
    const int plane = pred.height * pred.width;
    std::vector<double> out(static_cast<std::size_t>(pred.batch) * plane);
    std::vector<double> scratch;
    for (int b = 0; b < pred.batch; ++b) {
        for (int q = 0; q < plane; ++q) out[static_cast<std::size_t>(b) * plane + q] = row_max_prob(pred.pixel(b, q), scratch);
    }
    return out;
}

SelectionMask select(const PredictionBatch& strong, const PredictionBatch& weak, std::optional<double> floor) {
    if (!strong.same_shape(weak)) throw std::invalid_argument("select: strong and weak predictions differ in shape");
    auto pick = [&](const std::vector<double>& cs, const std::vector<double>& cw) {
        std::vector<std::uint8_t> bits(cs.size());
        for (std::size_t i = 0; i < cs.size(); ++i) {
            const bool ok = cs[i] > cw[i] && (!floor || cs[i] >= *floor);
            bits[i] = ok ? 1 : 0;
        }
        return bits;
    };
    SelectionMask m;
    m.sample_bits = pick(confidence(strong), confidence(weak));
    if (!strong.pixel_logits.empty()) m.pixel_bits = pick(pixel_confidence(strong), pixel_confidence(weak));
    return m;
}

ConsistencyLoss kl_consistency(std::span<const double> weak_logits, std::span<const double> strong_logits, int classes,
                               std::span<const std::uint8_t> mask, bool stop_gradient) {
    if (classes < 1 || weak_logits.size() != strong_logits.size() || weak_logits.size() % classes != 0) {
        throw std::invalid_argument("kl_consistency: logits shape mismatch");
    }
    const std::size_t rows = weak_logits.size() / classes;
    if (mask.size() != rows) throw std::invalid_argument("kl_consistency: mask has the wrong length");
    ConsistencyLoss out;
    out.grad_weak.assign(weak_logits.size(), 0.0);
    out.grad_strong.assign(strong_logits.size(), 0.0);
    const auto selected = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    if (selected == 0) return out;
    const double inv = 1.0 / static_cast<double>(selected);
    std::vector<double> ls(classes), lw(classes);
    for (std::size_t r = 0; r < rows; ++r) {
        if (mask[r] == 0) continue;
        log_softmax_into(strong_logits.subspan(r * classes, classes), ls);
        log_softmax_into(weak_logits.subspan(r * classes, classes), lw);
        double kl = 0.0;
        for (int k = 0; k < classes; ++k) kl += std::exp(ls[k]) * (ls[k] - lw[k]);
        out.value += kl * inv;
        for (int k = 0; k < classes; ++k) {
            const double ps = std::exp(ls[k]);
            out.grad_weak[r * classes + k] = (std::exp(lw[k]) - ps) * inv;
            if (!stop_gradient) out.grad_strong[r * classes + k] = ps * ((ls[k] - lw[k]) - kl) * inv;
        }
    }
    return out;
}

ConsistencyLoss l1_consistency(std::span<const double> weak, std::span<const double> strong, int row_width,
                               std::span<const std::uint8_t> mask, bool stop_gradient) {
    if (row_width < 1 || weak.size() != strong.size() || weak.size() % row_width != 0) {
        throw std::invalid_argument("l1_consistency: shape mismatch");
    }
    const std::size_t rows = weak.size() / row_width;
    if (!mask.empty() && mask.size() != rows) throw std::invalid_argument("l1_consistency: mask has the wrong length");
    ConsistencyLoss out;
    out.grad_weak.assign(weak.size(), 0.0);
    out.grad_strong.assign(strong.size(), 0.0);
    const std::size_t kept =
        mask.empty() ? rows : static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    if (kept == 0) return out;
    const double inv = 1.0 / (static_cast<double>(kept) * row_width);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask.empty() && mask[r] == 0) continue;
        for (int j = 0; j < row_width; ++j) {
            const std::size_t i = r * row_width + j;
            const double d = weak[i] - strong[i];
            out.value += std::abs(d) * inv;
            const double s = d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0;
            out.grad_weak[i] = s * inv;
            if (!stop_gradient) out.grad_strong[i] = -s * inv;
        }
    }
    return out;
}

ConsistencyLoss entropy_loss(std::span<const double> logits, int classes) {
    if (classes < 1 || logits.empty() || logits.size() % classes != 0) {
        throw std::invalid_argument("entropy_loss: logits shape mismatch");
    }
    const std::size_t rows = logits.size() / classes;
    const double inv = 1.0 / static_cast<double>(rows);
    ConsistencyLoss out;
    out.grad_weak.assign(logits.size(), 0.0);
    out.grad_strong.assign(logits.size(), 0.0);
    std::vector<double> lp(classes);
    for (std::size_t r = 0; r < rows; ++r) {
        log_softmax_into(logits.subspan(r * classes, classes), lp);
        double ent = 0.0;
        for (int k = 0; k < classes; ++k) ent -= std::exp(lp[k]) * lp[k];
        out.value += ent * inv;
        for (int k = 0; k < classes; ++k) out.grad_weak[r * classes + k] = -std::exp(lp[k]) * (lp[k] + ent) * inv;
    }
    return out;
}

std::vector<std::vector<Image>> make_views(std::span<const Image> batch, const AdaptConfig& cfg, Rng& rng) {
    std::vector<std::vector<Image>> views;
    if (cfg.view_mode == ViewMode::combined) {
        AugmentSpec spec;
        spec.alpha = cfg.alpha;
        spec.mask_ratio = cfg.use_low_freq_view ? cfg.mask_ratio : 0.0;
        spec.noise_gamma = cfg.use_noise_view ? cfg.noise_gamma : 0.0;
        spec.noise_std = cfg.noise_std;
        views.emplace_back();
        for (const Image& img : batch) views[0].push_back(augment_combined(img, spec, rng));
        return views;
    }
    const int n_views = (cfg.use_low_freq_view ? 1 : 0) + (cfg.use_noise_view ? 1 : 0);
    views.resize(n_views);
    for (const Image& img : batch) {
        int v = 0;
        if (cfg.use_low_freq_view) views[v++].push_back(augment_low_freq(img, cfg.alpha, cfg.mask_ratio, rng));
        if (cfg.use_noise_view) views[v++].push_back(augment_noise(img, cfg.noise_gamma, rng, cfg.noise_std));
    }
    return views;
}

StepResult spa_adapt_step(ModelState& state, std::span<const Image> batch, const AdaptConfig& cfg, Rng& rng) {
    cfg.validate();
    ForwardResult strong = forward(state, batch, Branch::strong);
    StepResult res;
    res.predictions = strong.predictions;
    const PredictionBatch& sp = strong.predictions;

    const auto views = make_views(batch, cfg, rng);
    GradientSet total = zero_grads(state);
    PredictionBatch strong_grad = PredictionBatch::zeros_like(sp);
    double sel_sum = 0.0;
    for (const auto& view : views) {
        ForwardResult weak = forward(state, view, Branch::weak);
        const PredictionBatch& wp = weak.predictions;
        SelectionMask mask;
        if (cfg.selection_enabled) {
            mask = select(sp, wp, cfg.confidence_floor);
        } else {
            mask.sample_bits = all_ones(sp.batch);
            mask.pixel_bits = all_ones(sp.pixel_logits.size() / std::max(1, sp.pixel_classes));
        }
        sel_sum += mask.sample_fraction();

        PredictionBatch weak_grad = PredictionBatch::zeros_like(wp);
        const auto kl = kl_consistency(wp.class_logits, sp.class_logits, sp.num_classes, mask.sample_bits, cfg.stop_gradient);
        res.loss += kl.value;
        weak_grad.class_logits = kl.grad_weak;
        add_scaled(strong_grad.class_logits, kl.grad_strong, 1.0);
        if (sp.reg_outputs > 0 && cfg.reg_loss_weight > 0.0) {
            const auto l1 =
                l1_consistency(wp.regression, sp.regression, sp.reg_outputs, mask.sample_bits, cfg.stop_gradient);
            res.loss += cfg.reg_loss_weight * l1.value;
            add_scaled(weak_grad.regression, l1.grad_weak, cfg.reg_loss_weight);
            add_scaled(strong_grad.regression, l1.grad_strong, cfg.reg_loss_weight);
        }
        if (!sp.pixel_logits.empty() && cfg.pixel_loss_weight > 0.0) {
            const auto pix =
                kl_consistency(wp.pixel_logits, sp.pixel_logits, sp.pixel_classes, mask.pixel_bits, cfg.stop_gradient);
            res.loss += cfg.pixel_loss_weight * pix.value;
            add_scaled(weak_grad.pixel_logits, pix.grad_weak, cfg.pixel_loss_weight);
            add_scaled(strong_grad.pixel_logits, pix.grad_strong, cfg.pixel_loss_weight);
        }
        add_into(total, backward(state, weak.tape, weak_grad));
    }
    if (!cfg.stop_gradient) add_into(total, backward(state, strong.tape, strong_grad));
    res.selected_frac = sel_sum / static_cast<double>(views.size());
    apply_update(state, total, cfg, res);
    return res;
}

StepResult entropy_adapt_step(ModelState& state, std::span<const Image> batch, const AdaptConfig& cfg) {
    cfg.validate();
    ForwardResult fwd = forward(state, batch, Branch::strong);
    StepResult res;
    res.predictions = fwd.predictions;
    const auto ent = entropy_loss(fwd.predictions.class_logits, fwd.predictions.num_classes);
    res.loss = ent.value;
    res.selected_frac = 1.0;
    PredictionBatch grad = PredictionBatch::zeros_like(fwd.predictions);
    grad.class_logits = ent.grad_weak;
    apply_update(state, backward(state, fwd.tape, grad), cfg, res);
    return res;
}

std::string_view method_name(Method m) {
    switch (m) {
        case Method::none: return "none";
        case Method::spa: return "spa";
        case Method::spa_i: return "spa_i";
        case Method::entropy: return "entropy";
    }
    return "unknown";
}

Method parse_method(std::string_view name) {
    for (Method m : {Method::none, Method::spa, Method::spa_i, Method::entropy}) {
        if (method_name(m) == name) return m;
    }
    throw std::invalid_argument("unknown method '" + std::string(name) + "' (expected none, spa, spa_i or entropy)");
}

void StreamResult::write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "batch,loss,selected_frac,acc_running,mae_running\n" << std::setprecision(17);
    for (const auto& r : records) {
        os << r.batch_index << ',' << r.loss << ',' << r.selected_frac << ',' << r.acc_running << ',' << r.mae_running
           << '\n';
    }
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

StreamResult run_stream(const ModelState& initial, std::span<const SampleRecord> stream, const AdaptConfig& cfg,
                        Method method, const std::function<void(const StreamRecord&)>& on_batch) {
    cfg.validate();
    const ModelConfig& mc = initial.config;
    if (stream.empty()) throw std::invalid_argument("run_stream: empty stream");
    if (mc.reg_outputs != 3) {
        throw std::invalid_argument("run_stream: checkpoint has " + std::to_string(mc.reg_outputs) +
                                    " regression outputs, the stream carries 3 object targets");
    }
    for (std::size_t i = 0; i < stream.size(); ++i) {
        const auto& rec = stream[i];
        if (rec.image.height != mc.height || rec.image.width != mc.width || rec.image.channels != mc.in_channels) {
            throw std::invalid_argument("run_stream: sample " + std::to_string(i) + " is " +
                                        std::to_string(rec.image.channels) + "x" + std::to_string(rec.image.height) +
                                        "x" + std::to_string(rec.image.width) + ", checkpoint expects " +
                                        std::to_string(mc.in_channels) + "x" + std::to_string(mc.height) + "x" +
                                        std::to_string(mc.width));
        }
        if (rec.class_label < 0 || rec.class_label >= mc.num_classes) {
            throw std::invalid_argument("run_stream: sample " + std::to_string(i) + " has label " +
                                        std::to_string(rec.class_label) + " outside the checkpoint's " +
                                        std::to_string(mc.num_classes) + " classes");
        }
    }

    ModelState state = initial;
    state.zero_grad();
    AdaptConfig step_cfg = cfg;
    if (method == Method::spa_i) step_cfg.view_mode = ViewMode::combined;
    Rng rng(derive_seed(cfg.seed, "views"));

    StreamResult out;
    std::size_t hits = 0;
    double abs_err = 0.0;
    double iou_sum = 0.0;
    double sel_sum = 0.0;
    for (std::size_t start = 0; start < stream.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(stream.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<Image> images;
        images.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) images.push_back(stream[i].image);

        StepResult step;
        switch (method) {
            case Method::none:
                step.predictions = forward(state, images, Branch::strong).predictions;
                break;
            case Method::spa:
            case Method::spa_i:
                step = spa_adapt_step(state, images, step_cfg, rng);
                break;
            case Method::entropy:
                step = entropy_adapt_step(state, images, step_cfg);
                break;
        }
        if (step.rolled_back) ++out.rolled_back_steps;

        const PredictionBatch& pred = step.predictions;
        for (int b = 0; b < pred.batch; ++b) {
            const SampleRecord& rec = stream[start + b];
            const int cls = argmax(pred.logits(b));
            hits += cls == rec.class_label ? 1 : 0;
            std::array<double, 3> box{};
            double err = 0.0;
            for (int r = 0; r < 3; ++r) {
                box[r] = pred.regression[static_cast<std::size_t>(b) * 3 + r];
                err += std::abs(box[r] - rec.object_target[r]);
            }
            abs_err += err / 3.0;
            iou_sum += iou(foreground_mask(pred, b), rec.pixel_labels.data);
            out.predicted_class.push_back(cls);
            out.predicted_box.push_back(box);
        }
        sel_sum += step.selected_frac;
        const double seen = static_cast<double>(end);
        StreamRecord record{static_cast<int>(out.records.size()), step.loss, step.selected_frac,
                            static_cast<double>(hits) / seen, abs_err / seen};
        out.records.push_back(record);
        if (on_batch) on_batch(record);
    }
    const double n = static_cast<double>(stream.size());
    out.accuracy = static_cast<double>(hits) / n;
    out.mae_px = abs_err / n;
    out.iou = iou_sum / n;
    out.selected_frac_mean = sel_sum / static_cast<double>(out.records.size());
    return out;
}

}  // namespace spa
