#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "spa/image.hpp"
#include "spa/model.hpp"

namespace spa {

/// Fraction of predicted labels equal to the reference labels.
double accuracy(std::span<const int> predicted, std::span<const int> labels);

/// Fraction of samples whose logits argmax (lowest index on ties) matches.
double accuracy(const PredictionBatch& pred, std::span<const int> labels);

/// Mean absolute error over all entries.
double mae(std::span<const double> predicted, std::span<const double> target);

/// Intersection over union of two binary masks; two empty masks give 1.
double iou(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> target);

/// Foreground decision per pixel: softmax probability of the non-background
/// classes >= 0.5.
std::vector<std::uint8_t> foreground_mask(const PredictionBatch& pred, int sample);

inline constexpr double kForegroundThreshold = 0.5;

}  // namespace spa
