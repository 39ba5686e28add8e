#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "spa/image.hpp"
#include "spa/rng.hpp"

namespace spa::testing {

/// Direct double sum, O(H^2 W^2).
inline Grid<std::complex<double>> naive_dft(const Grid<double>& x) {
    const int h = x.height;
    const int w = x.width;
    Grid<std::complex<double>> out(h, w);
    for (int u = 0; u < h; ++u) {
        for (int v = 0; v < w; ++v) {
            std::complex<double> acc = 0.0;
            for (int r = 0; r < h; ++r) {
                for (int c = 0; c < w; ++c) {
                    const double angle = -2.0 * std::numbers::pi * (static_cast<double>(u * r) / h + static_cast<double>(v * c) / w);
                    acc += x.at(r, c) * std::polar(1.0, angle);
                }
            }
            out.at(u, v) = acc;
        }
    }
    return out;
}

inline Grid<double> random_grid(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Grid<double> g(h, w);
    for (double& v : g.data) v = rng.normal();
    return g;
}

inline Image random_image(int h, int w, std::uint64_t seed, int channels = 1) {
    Rng rng(seed);
    Image img(h, w, channels);
    for (double& v : img.values) v = rng.uniform();
    return img;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

}  // namespace spa::testing
