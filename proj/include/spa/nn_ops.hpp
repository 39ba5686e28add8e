#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace spa {

inline void softmax_into(std::span<const double> z, std::span<double> p) {
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
}

inline std::vector<double> softmax(std::span<const double> z) {
    std::vector<double> p(z.size());
    softmax_into(z, p);
    return p;
}

inline void log_softmax_into(std::span<const double> z, std::span<double> out) {
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
}

/// Index of the largest entry; ties resolve to the lowest index.
inline int argmax(std::span<const double> v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

}  // namespace spa
