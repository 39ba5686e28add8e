#include "spa/image.hpp"

#include <algorithm>
#include <cmath>

namespace spa {

Image::Image(int h, int w, int c, double fill)
    : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 1 || w < 1 || c < 1) {
        throw std::invalid_argument("image dimensions must be positive, got " + std::to_string(h) + "x" +
                                    std::to_string(w) + "x" + std::to_string(c));
    }
}

Grid<double> Image::channel(int c) const {
    Grid<double> g(height, width);
    auto first = values.begin() + static_cast<std::ptrdiff_t>(c * plane_size());
    std::copy(first, first + static_cast<std::ptrdiff_t>(plane_size()), g.data.begin());
    return g;
}

void Image::set_channel(int c, const Grid<double>& plane) {
    if (plane.height != height || plane.width != width) {
        throw std::invalid_argument("channel plane size mismatch");
    }
    std::copy(plane.data.begin(), plane.data.end(), values.begin() + static_cast<std::ptrdiff_t>(c * plane_size()));
}

void Image::validate() const {
    if (height < 1 || width < 1 || channels < 1) {
        throw std::invalid_argument("image has non-positive dimensions");
    }
    if (values.size() != static_cast<std::size_t>(height) * width * channels) {
        throw std::invalid_argument("image buffer holds " + std::to_string(values.size()) + " values, expected " +
                                    std::to_string(static_cast<std::size_t>(height) * width * channels));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            const auto plane = plane_size();
            const auto c = i / plane;
            const auto y = (i % plane) / width;
            const auto x = i % width;
            throw std::invalid_argument("non-finite pixel at (c=" + std::to_string(c) + ", y=" + std::to_string(y) +
                                        ", x=" + std::to_string(x) + ")");
        }
    }
}

Image image_from_grid(const Grid<double>& plane) {
    Image img(plane.height, plane.width, 1);
    img.values = plane.data;
    return img;
}

}  // namespace spa
