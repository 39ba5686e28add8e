#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spa/image.hpp"
#include "spa/model.hpp"
#include "spa/rng.hpp"

namespace spa {

enum class ShapeClass : int { disk = 0, square = 1, cross = 2 };
inline constexpr int kNumShapeClasses = 3;
inline constexpr double kMinShapeSize = 4.0;
inline constexpr double kMaxShapeSize = 10.0;
inline constexpr double kMaxSourceBlur = 0.8;    // optical softness, Gaussian std in pixels
inline constexpr double kMaxSourceNoise = 0.12;  // sensor noise std

struct SampleRecord {
    Image image;
    int class_label = 0;
    std::array<double, 3> object_target{};  // centre x, centre y, size (pixels)
    Grid<std::uint8_t> pixel_labels;        // 1 = foreground

    bool operator==(const SampleRecord&) const = default;
};

/// Shapes on a flat background, softened by a Gaussian blur and overlaid with
/// sensor noise. Draw order per sample: class, size, centre x, centre y,
/// foreground level, background level, blur std, noise std, then one normal
/// per pixel (channel, row, column). Sizes lie in [4, 10] px and the centre
/// keeps a margin of at least `size` to every border. Labels come from the
/// unblurred geometry; the target centre is the centroid of the label mask.
std::vector<SampleRecord> gen_dataset(int n, int image_size, Rng& rng, int channels = 1);

/// Smallest accepted image side for gen_dataset.
inline constexpr int kMinImageSize = 2 * static_cast<int>(kMaxShapeSize) + 1;

enum class CorruptionKind { gaussian_noise, shot_noise, gaussian_blur, contrast, brightness, pixelate };

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::gaussian_noise;
    int severity = 1;  // 1..5; 0 is accepted as the identity

    bool operator==(const CorruptionSpec&) const = default;
};

std::string_view corruption_name(CorruptionKind kind);
CorruptionKind parse_corruption(std::string_view name);
/// Parses "kind:severity" or "kind" (severity 5).
CorruptionSpec parse_corruption_spec(std::string_view text);
std::span<const CorruptionKind> all_corruptions();

/// Schedule value used at a severity, e.g. noise sigma or blur std.
double corruption_parameter(CorruptionKind kind, int severity);

Image corrupt(const Image& img, const CorruptionSpec& spec, Rng& rng);

/// Corrupts every record with a per-sample child stream of `seed`.
std::vector<SampleRecord> corrupt_dataset(std::span<const SampleRecord> records, const CorruptionSpec& spec,
                                          std::uint64_t seed);

void save_dataset(const std::filesystem::path& path, std::span<const SampleRecord> records);
std::vector<SampleRecord> load_dataset(const std::filesystem::path& path);

struct TrainConfig {
    int epochs = 20;
    double lr = 0.01;  // Adam step size; x0.1 for the last quarter of the epochs
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int batch_size = 32;
    double reg_loss_weight = 0.1;
    std::uint64_t seed = 7;
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
};

/// Supervised training of every parameter with Adam: cross-entropy on
/// classes, L1 on the object target, per-pixel cross-entropy on the masks.
/// The returned state has zero momentum and the default adaptable set.
ModelState train_source(std::span<const SampleRecord> dataset, const TrainConfig& cfg,
                        const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace spa
