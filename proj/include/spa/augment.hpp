#pragma once

#include <cstdint>
#include <filesystem>

#include "spa/image.hpp"
#include "spa/rng.hpp"

namespace spa {

/// 0/1 amplitude mask; 0 removes the corresponding Fourier amplitude.
using MaskGrid = Grid<std::uint8_t>;

struct AugmentSpec {
    double alpha = 0.2;        // side fraction of the low-frequency block
    double mask_ratio = 0.2;   // fraction of zeros inside the block
    double noise_gamma = 0.4;  // noise mixing weight
    double noise_std = 1.0;    // std of eps
    std::uint64_t seed = 0;

    void validate() const;
};

/// Coordinate frame a mask is expressed in.
enum class MaskFrame {
    centered,    // low frequencies in the middle (after center_shift)
    unshifted,   // raw DFT layout, DC at (0, 0)
};

/// Exactly round(m*h*w) zeros placed uniformly without replacement.
MaskGrid make_random_mask(int height, int width, double mask_ratio, Rng& rng);

/// Side lengths of the centred low-frequency block: floor(alpha*h) x floor(alpha*w).
struct BlockExtent {
    int top, left, rows, cols;
};
BlockExtent low_freq_block(int height, int width, double alpha);

/// Ones outside the centred block; round(m*rows*cols) zeros inside it.
/// Expressed in the centered frame.
MaskGrid make_low_freq_mask(int height, int width, double alpha, double mask_ratio, Rng& rng);

/// Multiplies each channel's amplitude spectrum by the mask, keeps the phase,
/// and returns the real part of the inverse transform.
Image apply_amplitude_mask(const Image& img, const MaskGrid& mask, MaskFrame frame = MaskFrame::centered);

/// (1 - gamma) * x + gamma * eps, eps ~ N(0, noise_std^2) drawn per pixel in
/// channel/row/column order.
Image augment_noise(const Image& img, double gamma, Rng& rng, double noise_std = 1.0);

/// Low-frequency amplitude view: make_low_freq_mask + apply_amplitude_mask.
Image augment_low_freq(const Image& img, double alpha, double mask_ratio, Rng& rng);

/// Both augmentations on one view: low-frequency mask first, then noise,
/// drawing from `rng` in that order. A mask without zeros skips the transform.
Image augment_combined(const Image& img, const AugmentSpec& spec, Rng& rng);

/// Binary PGM (P5), values linearly mapped from [min, max] to [0, 255].
void write_pgm(const std::filesystem::path& path, const Grid<double>& plane);

/// Reads a P2 or P5 graymap; values are divided by maxval.
Grid<double> read_pgm(const std::filesystem::path& path);

}  // namespace spa
