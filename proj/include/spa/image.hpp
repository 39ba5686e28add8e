#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace spa {

/// Dense row-major 2-D grid. Used for spectra, amplitude/phase planes and masks.
template <typename T>
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {
        if (h < 1 || w < 1) {
            throw std::invalid_argument("grid dimensions must be positive, got " + std::to_string(h) + "x" +
                                        std::to_string(w));
        }
    }

    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * width + c]; }
    const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }
    std::size_t size() const { return data.size(); }

    bool operator==(const Grid&) const = default;
};

/// Real-valued image, channel-major then row-major (values[c][y][x]).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> values;

    Image() = default;
    Image(int h, int w, int c = 1, double fill = 0.0);

    double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }

    Grid<double> channel(int c) const;
    void set_channel(int c, const Grid<double>& plane);

    /// Throws if the buffer length is inconsistent or any value is non-finite.
    void validate() const;

    bool operator==(const Image&) const = default;
};

Image image_from_grid(const Grid<double>& plane);

}  // namespace spa
