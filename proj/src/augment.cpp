#include "spa/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <stdexcept>
#include <string>

#include "spa/fourier.hpp"

namespace spa {
namespace {

// Guards floor(alpha * n) against products such as 0.29 * 100 = 28.999999999999996.
constexpr double kFloorSlack = 1e-9;

void require_unit_interval(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument(std::string(name) + " must lie in [0, 1], got " + std::to_string(v));
    }
}

void place_zeros(MaskGrid& mask, std::vector<std::size_t> candidates, std::size_t zeros, Rng& rng) {
    // Partial Fisher-Yates: the first `zeros` slots become the sample.
    for (std::size_t i = 0; i < zeros; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.uniform_index(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
        mask.data[candidates[i]] = 0;
    }
}

}  // namespace

void AugmentSpec::validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0, 1]");
    require_unit_interval(mask_ratio, "mask_ratio");
    require_unit_interval(noise_gamma, "noise_gamma");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw std::invalid_argument("noise_std must be >= 0");
}

MaskGrid make_random_mask(int height, int width, double mask_ratio, Rng& rng) {
    require_unit_interval(mask_ratio, "mask_ratio");
    MaskGrid mask(height, width, 1);
    const auto n = mask.size();
    const auto zeros = static_cast<std::size_t>(std::lround(mask_ratio * static_cast<double>(n)));
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    place_zeros(mask, std::move(all), zeros, rng);
    return mask;
}

BlockExtent low_freq_block(int height, int width, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0, 1]");
    const int rows = static_cast<int>(std::floor(alpha * height + kFloorSlack));
    const int cols = static_cast<int>(std::floor(alpha * width + kFloorSlack));
    if (rows == 0 || cols == 0) {
        throw std::invalid_argument("low-frequency block is empty: floor(" + std::to_string(alpha) + " * " +
                                    std::to_string(height) + "x" + std::to_string(width) + ") has a zero side");
    }
    return {height / 2 - rows / 2, width / 2 - cols / 2, rows, cols};
}

MaskGrid make_low_freq_mask(int height, int width, double alpha, double mask_ratio, Rng& rng) {
    require_unit_interval(mask_ratio, "mask_ratio");
    const BlockExtent block = low_freq_block(height, width, alpha);
    MaskGrid mask(height, width, 1);
    std::vector<std::size_t> inside;
    inside.reserve(static_cast<std::size_t>(block.rows) * block.cols);
    for (int r = block.top; r < block.top + block.rows; ++r) {
        for (int c = block.left; c < block.left + block.cols; ++c) {
            inside.push_back(static_cast<std::size_t>(r) * width + c);
        }
    }
    const auto zeros = static_cast<std::size_t>(std::lround(mask_ratio * static_cast<double>(inside.size())));
    place_zeros(mask, std::move(inside), zeros, rng);
    return mask;
}

Image apply_amplitude_mask(const Image& img, const MaskGrid& mask, MaskFrame frame) {
    if (mask.height != img.height || mask.width != img.width) {
        throw std::invalid_argument("mask is " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                                    ", image is " + std::to_string(img.height) + "x" + std::to_string(img.width));
    }
    Image out(img.height, img.width, img.channels);
    for (int ch = 0; ch < img.channels; ++ch) {
        AmplitudePhase ap = split_amplitude_phase(dft2_forward(img.channel(ch)));
        Grid<double> amp = frame == MaskFrame::centered ? center_shift(ap.amplitude) : std::move(ap.amplitude);
        for (std::size_t i = 0; i < amp.size(); ++i) {
            if (mask.data[i] == 0) amp.data[i] = 0.0;
        }
        ap.amplitude = frame == MaskFrame::centered ? center_unshift(amp) : std::move(amp);
        out.set_channel(ch, dft2_inverse(combine_amplitude_phase(ap)).image);
    }
    return out;
}

Image augment_noise(const Image& img, double gamma, Rng& rng, double noise_std) {
    require_unit_interval(gamma, "noise_gamma");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw std::invalid_argument("noise_std must be >= 0");
    Image out = img;
    for (double& v : out.values) v = (1.0 - gamma) * v + gamma * noise_std * rng.normal();
    return out;
}

Image augment_low_freq(const Image& img, double alpha, double mask_ratio, Rng& rng) {
    return apply_amplitude_mask(img, make_low_freq_mask(img.height, img.width, alpha, mask_ratio, rng));
}

Image augment_combined(const Image& img, const AugmentSpec& spec, Rng& rng) {
    spec.validate();
    const MaskGrid mask = make_low_freq_mask(img.height, img.width, spec.alpha, spec.mask_ratio, rng);
    const bool any_zero = std::find(mask.data.begin(), mask.data.end(), 0) != mask.data.end();
    const Image masked = any_zero ? apply_amplitude_mask(img, mask) : img;
    return augment_noise(masked, spec.noise_gamma, rng, spec.noise_std);
}

void write_pgm(const std::filesystem::path& path, const Grid<double>& plane) {
    const auto [lo_it, hi_it] = std::minmax_element(plane.data.begin(), plane.data.end());
    const double lo = *lo_it;
    const double span = *hi_it - lo;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "P5\n" << plane.width << ' ' << plane.height << "\n255\n";
    for (double v : plane.data) {
        const double t = span > 0.0 ? (v - lo) / span : 0.0;
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

namespace {

std::string pgm_token(std::istream& is) {
    std::string tok;
    while (is >> tok) {
        if (tok[0] != '#') return tok;
        std::string rest;
        std::getline(is, rest);
    }
    throw std::runtime_error("truncated PGM header");
}

int pgm_int(std::istream& is, const char* what, int min_value = 1) {
    const std::string tok = pgm_token(is);
    try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used == tok.size() && v >= min_value) return v;
    } catch (const std::exception&) {
    }
    throw std::runtime_error(std::string("bad PGM ") + what + " '" + tok + "'");
}

}  // namespace

Grid<double> read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    const std::string magic = pgm_token(is);
    if (magic != "P2" && magic != "P5") throw std::runtime_error(path.string() + ": not a PGM file (magic '" + magic + "')");
    const int width = pgm_int(is, "width");
    const int height = pgm_int(is, "height");
    const int maxval = pgm_int(is, "maxval");
    if (maxval > 65535) throw std::runtime_error(path.string() + ": maxval above 65535");
    Grid<double> out(height, width);
    if (magic == "P2") {
        for (double& v : out.data) v = static_cast<double>(pgm_int(is, "sample", 0)) / maxval;
    } else {
        is.get();
        for (double& v : out.data) {
            int value = is.get();
            if (maxval > 255) value = value * 256 + is.get();
            if (!is) throw std::runtime_error(path.string() + ": truncated pixel data");
            v = static_cast<double>(value) / maxval;
        }
    }
    return out;
}

}  // namespace spa
