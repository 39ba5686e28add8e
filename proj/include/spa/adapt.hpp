#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spa/data.hpp"
#include "spa/image.hpp"
#include "spa/model.hpp"
#include "spa/rng.hpp"

namespace spa {

enum class ViewMode {
    separate,  // v_l and v_h, one loss each
    combined,  // one view with both augmentations (SPA-I)
};

struct AdaptConfig {
    double alpha = 0.2;
    double mask_ratio = 0.2;
    double noise_gamma = 0.4;
    double noise_std = 0.25;  // about one data std, the scale of N(0, 1) on standardized inputs
    double lr_norm = 3e-4;
    double lr_projector = 1.5e-3;
    double momentum = 0.9;
    double reg_loss_weight = 0.01;
    double pixel_loss_weight = 1.0;
    ViewMode view_mode = ViewMode::separate;
    bool selection_enabled = true;
    bool stop_gradient = true;
    bool use_low_freq_view = true;
    bool use_noise_view = true;
    std::optional<double> confidence_floor;
    int batch_size = 64;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Sample-level bits (B) and pixel-level bits (B x H x W).
struct SelectionMask {
    std::vector<std::uint8_t> sample_bits;
    std::vector<std::uint8_t> pixel_bits;

    double sample_fraction() const;
    double pixel_fraction() const;
};

/// Max softmax probability per sample.
std::vector<double> confidence(const PredictionBatch& pred);
/// Max softmax probability per pixel, B x H x W.
std::vector<double> pixel_confidence(const PredictionBatch& pred);

/// Bit set iff confidence(strong) > confidence(weak) and, with a floor,
/// confidence(strong) >= floor.
SelectionMask select(const PredictionBatch& strong, const PredictionBatch& weak,
                     std::optional<double> confidence_floor = std::nullopt);

/// Loss value and its gradients with respect to both inputs. The strong
/// gradient stays zero when the strong side is treated as a constant.
struct ConsistencyLoss {
    double value = 0.0;
    std::vector<double> grad_weak;
    std::vector<double> grad_strong;
};

/// Mean over selected rows of KL(softmax(strong) || softmax(weak)). Logits are
/// row-major with `classes` columns; `mask` has one entry per row.
ConsistencyLoss kl_consistency(std::span<const double> weak_logits, std::span<const double> strong_logits, int classes,
                               std::span<const std::uint8_t> mask, bool stop_gradient = true);

/// Mean absolute difference over the entries of selected rows; an empty mask
/// keeps every row.
ConsistencyLoss l1_consistency(std::span<const double> weak, std::span<const double> strong, int row_width,
                               std::span<const std::uint8_t> mask = {}, bool stop_gradient = true);

/// Mean Shannon entropy of the row softmaxes and its gradient.
ConsistencyLoss entropy_loss(std::span<const double> logits, int classes);

struct StepResult {
    PredictionBatch predictions;  // strong view, before the update
    double loss = 0.0;
    double selected_frac = 0.0;
    bool rolled_back = false;
    std::string diagnostic;
};

/// Weak views of a batch in draw order: per view, per sample.
std::vector<std::vector<Image>> make_views(std::span<const Image> batch, const AdaptConfig& cfg, Rng& rng);

/// One online step: views, forward, selection, consistency losses, backward,
/// SGD on the adaptable parameters.
StepResult spa_adapt_step(ModelState& state, std::span<const Image> batch, const AdaptConfig& cfg, Rng& rng);

/// Entropy minimization on the strong-branch outputs with the same optimizer.
StepResult entropy_adapt_step(ModelState& state, std::span<const Image> batch, const AdaptConfig& cfg);

enum class Method { none, spa, spa_i, entropy };
std::string_view method_name(Method m);
Method parse_method(std::string_view name);

struct StreamRecord {
    int batch_index = 0;
    double loss = 0.0;
    double selected_frac = 0.0;
    double acc_running = 0.0;
    double mae_running = 0.0;
};

struct StreamResult {
    std::vector<StreamRecord> records;
    std::vector<int> predicted_class;                  // per sample, before its update
    std::vector<std::array<double, 3>> predicted_box;  // per sample regression (first three outputs)
    double accuracy = 0.0;
    double mae_px = 0.0;
    double iou = 0.0;
    double selected_frac_mean = 0.0;
    int rolled_back_steps = 0;

    void write_csv(const std::filesystem::path& path) const;
};

/// Single pass over the stream in batches of cfg.batch_size. `state` is
/// copied; the caller's model is left untouched.
StreamResult run_stream(const ModelState& state, std::span<const SampleRecord> stream, const AdaptConfig& cfg,
                        Method method, const std::function<void(const StreamRecord&)>& on_batch = {});

}  // namespace spa
