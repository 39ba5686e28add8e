#include "spa/fourier.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>

namespace spa {
namespace {

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

// 1-D transform of a fixed length. Power-of-two lengths use an iterative
// radix-2 Cooley-Tukey pass; everything else falls back to a direct DFT with
// an exactly indexed twiddle table.
class Dft1d {
public:
    explicit Dft1d(int n) : n_(n), twiddle_(static_cast<std::size_t>(n)) {
        for (int k = 0; k < n; ++k) {
            const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
            twiddle_[k] = Complex(std::cos(angle), std::sin(angle));
        }
        if (is_power_of_two(n)) {
            bitrev_.resize(n);
            int bits = 0;
            while ((1 << bits) < n) ++bits;
            for (int i = 0; i < n; ++i) {
                int r = 0;
                for (int b = 0; b < bits; ++b) {
                    if (i & (1 << b)) r |= 1 << (bits - 1 - b);
                }
                bitrev_[i] = r;
            }
        }
    }

    // In-place forward transform of `n_` elements spaced `stride` apart.
    void forward(Complex* data, int stride, std::vector<Complex>& scratch) const {
        scratch.resize(n_);
        if (!bitrev_.empty()) {
            for (int i = 0; i < n_; ++i) scratch[bitrev_[i]] = data[static_cast<std::ptrdiff_t>(i) * stride];
            for (int len = 2; len <= n_; len <<= 1) {
                const int half = len / 2;
                const int step = n_ / len;
                for (int start = 0; start < n_; start += len) {
                    for (int j = 0; j < half; ++j) {
                        const Complex w = twiddle_[static_cast<std::size_t>(j) * step];
                        const Complex a = scratch[start + j];
                        const Complex b = scratch[start + j + half] * w;
                        scratch[start + j] = a + b;
                        scratch[start + j + half] = a - b;
                    }
                }
            }
        } else {
            for (int k = 0; k < n_; ++k) {
                Complex acc(0.0, 0.0);
                for (int j = 0; j < n_; ++j) {
                    const auto idx = static_cast<std::size_t>((static_cast<long>(j) * k) % n_);
                    acc += data[static_cast<std::ptrdiff_t>(j) * stride] * twiddle_[idx];
                }
                scratch[k] = acc;
            }
        }
        for (int i = 0; i < n_; ++i) data[static_cast<std::ptrdiff_t>(i) * stride] = scratch[i];
    }

private:
    int n_;
    std::vector<Complex> twiddle_;
    std::vector<int> bitrev_;
};

void transform_2d(Grid<Complex>& g) {
    std::vector<Complex> scratch;
    const Dft1d rows(g.width);
    for (int r = 0; r < g.height; ++r) rows.forward(&g.at(r, 0), 1, scratch);
    const Dft1d cols(g.height);
    for (int c = 0; c < g.width; ++c) cols.forward(&g.at(0, c), g.width, scratch);
}

void require_finite(const Spectrum& spec) {
    for (int r = 0; r < spec.height; ++r) {
        for (int c = 0; c < spec.width; ++c) {
            const Complex v = spec.at(r, c);
            if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) {
                throw std::invalid_argument("non-finite spectrum entry at (" + std::to_string(r) + ", " +
                                            std::to_string(c) + ")");
            }
        }
    }
}

}  // namespace

Spectrum dft2_forward(const Grid<double>& img) {
    Spectrum spec(img.height, img.width);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            const double v = img.at(r, c);
            if (!std::isfinite(v)) {
                throw std::invalid_argument("non-finite pixel at (" + std::to_string(r) + ", " + std::to_string(c) +
                                            ")");
            }
            spec.at(r, c) = Complex(v, 0.0);
        }
    }
    transform_2d(spec);
    return spec;
}

Spectrum dft2_forward(const Image& img) {
    if (img.channels != 1) {
        throw std::invalid_argument("dft2_forward expects a single-channel image, got " +
                                    std::to_string(img.channels) + " channels");
    }
    return dft2_forward(img.channel(0));
}

InverseResult dft2_inverse(const Spectrum& spec) {
    require_finite(spec);
    // IDFT(X) = conj(DFT(conj(X))) / (H*W)
    Spectrum work(spec.height, spec.width);
    for (std::size_t i = 0; i < spec.size(); ++i) work.data[i] = std::conj(spec.data[i]);
    transform_2d(work);

    InverseResult out{Grid<double>(spec.height, spec.width), 0.0};
    const double scale = 1.0 / (static_cast<double>(spec.height) * spec.width);
    for (std::size_t i = 0; i < work.size(); ++i) {
        const Complex v = std::conj(work.data[i]) * scale;
        out.image.data[i] = v.real();
        out.max_abs_imag = std::max(out.max_abs_imag, std::abs(v.imag()));
    }
    return out;
}

AmplitudePhase split_amplitude_phase(const Spectrum& spec) {
    require_finite(spec);
    AmplitudePhase ap{Grid<double>(spec.height, spec.width), Grid<double>(spec.height, spec.width)};
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const Complex v = spec.data[i];
        ap.amplitude.data[i] = std::abs(v);
        // atan2(0, 0) := 0; atan2 returns -pi for (-x, -0.0), fold it onto +pi
        double phase = (v.real() == 0.0 && v.imag() == 0.0) ? 0.0 : std::atan2(v.imag(), v.real());
        if (phase == -std::numbers::pi) phase = std::numbers::pi;
        ap.phase.data[i] = phase;
    }
    return ap;
}

Spectrum combine_amplitude_phase(const AmplitudePhase& ap) {
    if (ap.amplitude.height != ap.phase.height || ap.amplitude.width != ap.phase.width) {
        throw std::invalid_argument("amplitude and phase grids differ in size");
    }
    Spectrum spec(ap.amplitude.height, ap.amplitude.width);
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const double a = ap.amplitude.data[i];
        const double p = ap.phase.data[i];
        if (!std::isfinite(a) || !std::isfinite(p)) {
            throw std::invalid_argument("non-finite amplitude/phase at flat index " + std::to_string(i));
        }
        spec.data[i] = std::polar(a, p);
    }
    return spec;
}

int rapsd_ring_count(int height, int width) { return std::max(height, width) / 2 + 1; }

int rapsd_ring_of(int row, int col, int height, int width) {
    const int half_h = height / 2;
    const int half_w = width / 2;
    const int radius = std::max(height, width) / 2;
    const double dy = half_h > 0 ? std::abs(row - half_h) / static_cast<double>(half_h) : 0.0;
    const double dx = half_w > 0 ? std::abs(col - half_w) / static_cast<double>(half_w) : 0.0;
    const long ring = std::lround(std::max(dy, dx) * radius);
    return static_cast<int>(std::min<long>(ring, radius));
}

RadialProfile rapsd(const Grid<double>& shifted_amplitude) {
    const int h = shifted_amplitude.height;
    const int w = shifted_amplitude.width;
    const int n_rings = rapsd_ring_count(h, w);
    std::vector<double> sums(n_rings, 0.0);
    std::vector<long> counts(n_rings, 0);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const int k = rapsd_ring_of(r, c, h, w);
            sums[k] += shifted_amplitude.at(r, c);
            ++counts[k];
        }
    }
    RadialProfile profile;
    profile.rings.reserve(n_rings);
    long total = 0;
    for (int k = 0; k < n_rings; ++k) {
        if (counts[k] == 0) throw std::logic_error("empty RAPSD ring " + std::to_string(k));
        total += counts[k];
        profile.rings.push_back({k, sums[k] / static_cast<double>(counts[k]), counts[k]});
    }
    if (total != static_cast<long>(h) * w) throw std::logic_error("RAPSD ring counts do not partition the grid");
    return profile;
}

RadialProfile image_rapsd(const Grid<double>& plane) {
    return rapsd(center_shift(split_amplitude_phase(dft2_forward(plane)).amplitude));
}

RadialProfile mean_rapsd(std::span<const Image> images) {
    if (images.empty()) throw std::invalid_argument("mean_rapsd needs at least one image");
    const int h = images.front().height;
    const int w = images.front().width;
    RadialProfile acc;
    for (const Image& img : images) {
        if (img.height != h || img.width != w) {
            throw std::invalid_argument("mean_rapsd: image size " + std::to_string(img.height) + "x" +
                                        std::to_string(img.width) + " differs from " + std::to_string(h) + "x" +
                                        std::to_string(w));
        }
        for (int ch = 0; ch < img.channels; ++ch) {
            RadialProfile p = image_rapsd(img.channel(ch));
            if (acc.rings.empty()) {
                acc = p;
                for (auto& ring : acc.rings) ring.mean_amplitude = 0.0;
            }
            for (std::size_t k = 0; k < p.size(); ++k) {
                acc.rings[k].mean_amplitude += p.rings[k].mean_amplitude / img.channels;
            }
        }
    }
    for (auto& ring : acc.rings) ring.mean_amplitude /= static_cast<double>(images.size());
    return acc;
}

void write_profile_csv(std::ostream& os, const RadialProfile& profile) {
    os << "ring,mean_amplitude,count\n";
    const auto old_precision = os.precision();
    os << std::setprecision(17);
    for (const auto& ring : profile.rings) {
        os << ring.ring_index << ',' << ring.mean_amplitude << ',' << ring.count << '\n';
    }
    os.precision(old_precision);
}

}  // namespace spa
