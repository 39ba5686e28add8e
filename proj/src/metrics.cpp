#include "spa/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "spa/nn_ops.hpp"

namespace spa {

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
    if (predicted.empty()) throw std::invalid_argument("accuracy: empty input");
    if (predicted.size() != labels.size()) {
        throw std::invalid_argument("accuracy: " + std::to_string(predicted.size()) + " predictions vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double accuracy(const PredictionBatch& pred, std::span<const int> labels) {
    std::vector<int> predicted(pred.batch);
    for (int b = 0; b < pred.batch; ++b) predicted[b] = argmax(pred.logits(b));
    return accuracy(predicted, labels);
}

double mae(std::span<const double> predicted, std::span<const double> target) {
    if (predicted.empty()) throw std::invalid_argument("mae: empty input");
    if (predicted.size() != target.size()) throw std::invalid_argument("mae: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) acc += std::abs(predicted[i] - target[i]);
    return acc / static_cast<double>(predicted.size());
}

double iou(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> target) {
    if (predicted.size() != target.size()) throw std::invalid_argument("iou: size mismatch");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const bool a = predicted[i] != 0;
        const bool b = target[i] != 0;
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::uint8_t> foreground_mask(const PredictionBatch& pred, int sample) {
    if (sample < 0 || sample >= pred.batch) throw std::out_of_range("foreground_mask: sample out of range");
    const int plane = pred.height * pred.width;
    std::vector<std::uint8_t> out(plane);
    std::vector<double> p(pred.pixel_classes);
    for (int q = 0; q < plane; ++q) {
        softmax_into(pred.pixel(sample, q), p);
        out[q] = 1.0 - p[0] >= kForegroundThreshold ? 1 : 0;
    }
    return out;
}

}  // namespace spa
