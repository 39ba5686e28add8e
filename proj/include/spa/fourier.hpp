#pragma once

#include <complex>
#include <iosfwd>
#include <span>
#include <vector>

#include "spa/image.hpp"

namespace spa {

using Complex = std::complex<double>;

/// Unshifted 2-D DFT output, DC at (0, 0).
using Spectrum = Grid<Complex>;

struct AmplitudePhase {
    Grid<double> amplitude;
    Grid<double> phase;  // in (-pi, pi]
};

struct RadialRing {
    int ring_index = 0;
    double mean_amplitude = 0.0;
    long count = 0;
};

/// Mean spectral amplitude per concentric rectangle around the spectrum centre.
struct RadialProfile {
    std::vector<RadialRing> rings;

    std::size_t size() const { return rings.size(); }
    double value(std::size_t k) const { return rings[k].mean_amplitude; }
};

struct InverseResult {
    Grid<double> image;
    double max_abs_imag = 0.0;  // residual imaginary part discarded by the real projection
};

/// Unnormalized forward DFT of a single-channel real plane. Any H, W >= 1.
Spectrum dft2_forward(const Grid<double>& img);
Spectrum dft2_forward(const Image& img);  // requires channels == 1

/// Inverse DFT scaled by 1/(H*W); returns the real part.
InverseResult dft2_inverse(const Spectrum& spec);

AmplitudePhase split_amplitude_phase(const Spectrum& spec);
Spectrum combine_amplitude_phase(const AmplitudePhase& ap);

/// Cyclic half-rotation moving index (0,0) to (H/2, W/2) (floor).
template <typename T>
Grid<T> center_shift(const Grid<T>& g) {
    Grid<T> out(g.height, g.width);
    const int sh = g.height / 2;
    const int sw = g.width / 2;
    for (int r = 0; r < g.height; ++r) {
        for (int c = 0; c < g.width; ++c) {
            out.at((r + sh) % g.height, (c + sw) % g.width) = g.at(r, c);
        }
    }
    return out;
}

/// Exact inverse of center_shift, including odd sizes.
template <typename T>
Grid<T> center_unshift(const Grid<T>& g) {
    Grid<T> out(g.height, g.width);
    const int sh = g.height / 2;
    const int sw = g.width / 2;
    for (int r = 0; r < g.height; ++r) {
        for (int c = 0; c < g.width; ++c) {
            out.at(r, c) = g.at((r + sh) % g.height, (c + sw) % g.width);
        }
    }
    return out;
}

/// Ring index of a shifted-grid entry: per-axis normalized Chebyshev distance
/// from the centre, scaled to floor(max(H,W)/2) and rounded.
int rapsd_ring_of(int row, int col, int height, int width);
int rapsd_ring_count(int height, int width);

/// Radially averaged spectrum of a center-shifted amplitude grid.
RadialProfile rapsd(const Grid<double>& shifted_amplitude);

/// Convenience: shift(|F(plane)|) followed by rapsd.
RadialProfile image_rapsd(const Grid<double>& plane);

/// Per-ring mean of the individual profiles. Multi-channel images contribute
/// the mean of their per-channel profiles.
RadialProfile mean_rapsd(std::span<const Image> images);

void write_profile_csv(std::ostream& os, const RadialProfile& profile);

}  // namespace spa
