#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spa/image.hpp"

namespace spa {

struct ModelConfig {
    int in_channels = 1;
    int height = 32;
    int width = 32;
    int num_classes = 3;
    int reg_outputs = 3;
    int pixel_classes = 2;  // class 0 is background

    bool operator==(const ModelConfig&) const = default;
};

inline constexpr int kConv1Channels = 8;
inline constexpr int kConv2Channels = 16;
inline constexpr int kMomentFeatures = 3;  // foreground centroid x, y and sqrt(mass)
inline constexpr double kNormEpsilon = 1e-5;

/// Stable parameter identifiers; the order is the checkpoint order.
enum class ParamId : int {
    conv1_weight,
    conv1_bias,
    norm1_scale,
    norm1_shift,
    conv2_weight,
    conv2_bias,
    norm2_scale,
    norm2_shift,
    projector_weight,
    projector_bias,
    cls_weight,
    cls_bias,
    reg_weight,
    reg_bias,
    pixel_weight,
    pixel_bias,
    count
};
inline constexpr int kParamCount = static_cast<int>(ParamId::count);

std::string_view param_name(ParamId id);

struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;  // always holds f32-representable numbers
    std::vector<double> grad;
    std::vector<double> momentum;

    std::size_t numel() const { return value.size(); }
};

/// Parameters, the adaptable subset, gradients and optimizer state.
struct ModelState {
    ModelConfig config;
    std::vector<Param> params;  // indexed by ParamId
    std::set<std::string> adaptable;

    Param& param(ParamId id) { return params[static_cast<int>(id)]; }
    const Param& param(ParamId id) const { return params[static_cast<int>(id)]; }
    Param& param(std::string_view name);
    bool is_adaptable(ParamId id) const { return adaptable.contains(std::string(param_name(id))); }

    void zero_grad();
    void set_adaptable(std::set<std::string> names);
    void make_all_adaptable();
};

/// Norm affines and the projector.
std::set<std::string> default_adaptable_names();

/// Seeded initialization (He-normal convolutions, identity projector).
ModelState make_model(const ModelConfig& config, std::uint64_t seed);

enum class Branch { strong, weak };

struct PredictionBatch {
    int batch = 0;
    int num_classes = 0;
    int reg_outputs = 0;
    int height = 0;
    int width = 0;
    int pixel_classes = 0;
    std::vector<double> class_logits;  // B x C
    std::vector<double> regression;    // B x R
    std::vector<double> pixel_logits;  // B x H x W x K

    static PredictionBatch zeros_like(const PredictionBatch& p);
    std::span<const double> logits(int b) const {
        return {class_logits.data() + static_cast<std::size_t>(b) * num_classes, static_cast<std::size_t>(num_classes)};
    }
    std::span<const double> pixel(int b, int p) const {
        return {pixel_logits.data() + (static_cast<std::size_t>(b) * height * width + p) * pixel_classes,
                static_cast<std::size_t>(pixel_classes)};
    }
    bool same_shape(const PredictionBatch& o) const;
};

/// Forward intermediates of one batch; enough for exact reverse mode.
struct Tape {
    Branch branch = Branch::strong;
    int batch = 0;
    std::vector<double> input_padded;  // B x Cin x (H+2) x (W+2)
    std::vector<double> xhat1;         // B x 8 x HW, normalized conv1 output
    std::vector<double> inv_std1;      // B x 8
    std::vector<double> act1_padded;   // B x 8 x (H+2) x (W+2), post ReLU
    std::vector<double> xhat2;         // B x 16 x HW
    std::vector<double> inv_std2;      // B x 16
    std::vector<double> features;      // B x 16 x HW, post ReLU
    std::vector<double> pooled;        // B x 16
    std::vector<double> projected;     // B x 16 (weak branch only)
    std::vector<double> pixel_probs;   // B x HW x K, softmax of the pixel logits
    std::vector<double> moments;       // B x 3
    std::vector<double> mass;          // B, sum of foreground + epsilon
};

struct ForwardResult {
    PredictionBatch predictions;
    Tape tape;
};

ForwardResult forward(const ModelState& state, std::span<const Image> batch, Branch branch);

/// Gradients aligned with ModelState::params.
using GradientSet = std::vector<std::vector<double>>;

/// Exact gradients of sum(output_grads * outputs) for every adaptable
/// parameter; non-adaptable entries are zero.
GradientSet backward(const ModelState& state, const Tape& tape, const PredictionBatch& output_grads);

void accumulate_grads(ModelState& state, const GradientSet& grads);

/// buffer <- momentum * buffer + grad; param <- param - lr * buffer, on the
/// adaptable subset only, then clears every gradient. Parameters and buffers
/// are stored rounded to single precision.
void sgd_step(ModelState& state, double lr, double momentum);
void sgd_step(ModelState& state, const std::function<double(std::string_view)>& lr_of, double momentum);

void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_checkpoint(const ModelState& state);
ModelState deserialize_checkpoint(std::span<const std::uint8_t> bytes);

/// Zero-mean, unit-variance normalization over the whole span with
/// kNormEpsilon inside the square root. Returns 1/sqrt(var + eps). The norm
/// layers apply it per sample and per channel over the spatial plane.
double normalize_features(std::span<const double> in, std::span<double> out);

}  // namespace spa
