#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "../tests/support/oracles.hpp"
#include "spa/augment.hpp"
#include "spa/data.hpp"
#include "spa/fourier.hpp"

using namespace spa;

namespace {

int zeros(const MaskGrid& m) { return static_cast<int>(std::count(m.data.begin(), m.data.end(), 0)); }

struct Blob {
    double cx = 0.0;
    double cy = 0.0;
    int area = 0;  // bounding box
};

// Bright region: pixels above the midpoint of the image's range.
Blob bright_region(const Image& img) {
    const auto [lo, hi] = std::minmax_element(img.values.begin(), img.values.end());
    const double thr = 0.5 * (*lo + *hi);
    double sx = 0.0;
    double sy = 0.0;
    int n = 0;
    int x0 = img.width, y0 = img.height, x1 = -1, y1 = -1;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            if (img.at(0, y, x) <= thr) continue;
            sx += x;
            sy += y;
            ++n;
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (n == 0) return {};
    return {sx / n, sy / n, (x1 - x0 + 1) * (y1 - y0 + 1)};
}

}  // namespace

TEST_CASE("rng streams are reproducible and documented") {
    Rng a(123);
    Rng b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    CHECK(derive_seed(1, "x") != derive_seed(1, "y"));
    CHECK(derive_seed(1, "x", 0) != derive_seed(1, "x", 1));
    Rng u(5);
    for (int i = 0; i < 1000; ++i) {
        const double v = u.uniform();
        CHECK((v >= 0.0 && v < 1.0));
        CHECK(u.uniform_index(7) < 7u);
    }
    Rng n(9);
    double s = 0.0;
    double s2 = 0.0;
    for (int i = 0; i < 20000; ++i) {
        const double v = n.normal();
        s += v;
        s2 += v * v;
    }
    CHECK(std::abs(s / 20000) < 0.03);
    CHECK(std::abs(s2 / 20000 - 1.0) < 0.05);
}

TEST_CASE("random mask has an exact zero count") {
    Rng rng(1);
    CHECK(zeros(make_random_mask(10, 10, 0.0, rng)) == 0);
    CHECK(zeros(make_random_mask(10, 10, 1.0, rng)) == 100);
    CHECK(zeros(make_random_mask(10, 10, 0.2, rng)) == 20);
    CHECK_THROWS_AS(make_random_mask(4, 4, 1.5, rng), std::invalid_argument);
}

TEST_CASE("low-frequency mask block and count") {
    Rng rng(2);
    CHECK(zeros(make_low_freq_mask(32, 32, 0.2, 0.0, rng)) == 0);
    CHECK(zeros(make_low_freq_mask(32, 32, 1.0, 1.0, rng)) == 32 * 32);

    const auto ext = low_freq_block(32, 32, 0.2);
    CHECK(ext.rows == 6);
    CHECK(ext.cols == 6);
    for (int trial = 0; trial < 50; ++trial) {
        const auto m = make_low_freq_mask(32, 32, 0.2, 0.2, rng);
        CHECK(zeros(m) == 7);
        for (int r = 0; r < 32; ++r) {
            for (int c = 0; c < 32; ++c) {
                const bool inside = r >= ext.top && r < ext.top + 6 && c >= ext.left && c < ext.left + 6;
                if (!inside) CHECK(m.at(r, c) == 1);
            }
        }
    }
    CHECK_THROWS_AS(make_low_freq_mask(4, 4, 0.2, 0.2, rng), std::invalid_argument);
}

TEST_CASE("amplitude mask identities") {
    const Image img = spa::testing::random_image(16, 16, 3);
    const Image same = apply_amplitude_mask(img, MaskGrid(16, 16, 1));
    for (std::size_t i = 0; i < img.values.size(); ++i) CHECK(std::abs(same.values[i] - img.values[i]) <= 1e-6);
    const Image zero = apply_amplitude_mask(img, MaskGrid(16, 16, 0));
    for (double v : zero.values) CHECK(std::abs(v) <= 1e-12);
    CHECK_THROWS_AS(apply_amplitude_mask(img, MaskGrid(8, 8, 1)), std::invalid_argument);
}

TEST_CASE("masking never touches amplitudes outside the block") {
    // Taking the real part mirrors each masked entry to its conjugate
    // position, so the untouched region is the block plus its mirror image.
    const int n = 32;
    const Image img = spa::testing::random_image(n, n, 4);
    const auto ext = low_freq_block(n, n, 0.2);
    auto in_block = [&](int r, int c) {
        return r >= ext.top && r < ext.top + ext.rows && c >= ext.left && c < ext.left + ext.cols;
    };
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(derive_seed(11, "outside", trial));
        const auto mask = make_low_freq_mask(n, n, 0.2, 0.2, rng);
        const auto before = center_shift(split_amplitude_phase(dft2_forward(img)).amplitude);
        const auto after = center_shift(split_amplitude_phase(dft2_forward(apply_amplitude_mask(img, mask))).amplitude);
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < n; ++c) {
                if (in_block(r, c) || in_block((n - r) % n, (n - c) % n)) continue;
                CHECK(std::abs(after.at(r, c) - before.at(r, c)) <= 1e-9 * std::max(1.0, before.at(r, c)));
            }
        }
        const auto pb = rapsd(before);
        const auto pa = rapsd(after);
        for (std::size_t k = static_cast<std::size_t>(ext.rows / 2 + 1); k < pb.size(); ++k) {
            CHECK(std::abs(pa.value(k) - pb.value(k)) <= 1e-9 * std::max(1.0, pb.value(k)));
        }
    }
}

TEST_CASE("noise injection") {
    const Image img(8, 8, 1, 0.4);
    Rng r0(1);
    CHECK(augment_noise(img, 0.0, r0) == img);

    Rng r1(2);
    Rng eps(2);
    const Image half = augment_noise(img, 0.5, r1);
    for (double v : half.values) CHECK(v == 0.5 * 0.4 + 0.5 * eps.normal());

    Rng r2(3);
    const Image pure = augment_noise(Image(64, 64, 1, 0.7), 1.0, r2);
    double mean = 0.0;
    for (double v : pure.values) mean += v;
    mean /= pure.values.size();
    double var = 0.0;
    for (double v : pure.values) var += (v - mean) * (v - mean);
    var /= pure.values.size();
    CHECK(std::abs(mean) <= 0.05);
    CHECK(std::abs(var - 1.0) <= 0.1);

    Rng r3(4);
    Rng e3(4);
    const Image scaled = augment_noise(img, 0.5, r3, 0.25);
    for (double v : scaled.values) CHECK(v == 0.5 * 0.4 + 0.5 * (0.25 * e3.normal()));
}

TEST_CASE("combined view composes the two augmentations") {
    const Image img = spa::testing::random_image(32, 32, 8);
    AugmentSpec id{0.2, 0.0, 0.0, 1.0, 0};
    Rng r0(1);
    const Image same = augment_combined(img, id, r0);
    for (std::size_t i = 0; i < img.values.size(); ++i) CHECK(std::abs(same.values[i] - img.values[i]) <= 1e-12);

    AugmentSpec noise_only{0.2, 0.0, 0.4, 1.0, 0};
    Rng r1(5);
    Rng r2(5);
    CHECK(augment_combined(img, noise_only, r1) == augment_noise(img, 0.4, r2));

    AugmentSpec both{0.2, 0.2, 0.4, 0.5, 0};
    Rng r3(6);
    Rng r4(6);
    const Image manual = augment_noise(augment_low_freq(img, 0.2, 0.2, r4), 0.4, r4, 0.5);
    CHECK(augment_combined(img, both, r3) == manual);
}

TEST_CASE("augmentations are deterministic") {
    const Image img = spa::testing::random_image(32, 32, 9);
    Rng a(3);
    Rng b(3);
    CHECK(augment_low_freq(img, 0.2, 0.2, a) == augment_low_freq(img, 0.2, 0.2, b));
    CHECK(augment_noise(img, 0.4, a) == augment_noise(img, 0.4, b));
}

TEST_CASE("spec validation") {
    CHECK_THROWS_AS((AugmentSpec{0.0, 0.2, 0.4, 1.0, 0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((AugmentSpec{0.2, -0.1, 0.4, 1.0, 0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((AugmentSpec{0.2, 0.2, 1.1, 1.0, 0}.validate()), std::invalid_argument);
    CHECK_NOTHROW((AugmentSpec{}.validate()));
}

TEST_CASE("low-frequency masking preserves shape geometry") {
    Rng data(21);
    const auto records = gen_dataset(200, 32, data);
    int ok = 0;
    for (int i = 0; i < 200; ++i) {
        Rng rng(derive_seed(21, "geom", i));
        const double m = 0.5 * rng.uniform();
        // Noise-free rendering of the same shape.
        Image x(32, 32, 1, 0.1);
        for (std::size_t p = 0; p < x.values.size(); ++p) {
            if (records[i].pixel_labels.data[p]) x.values[p] = 0.8;
        }
        const Blob a = bright_region(x);
        const Blob b = bright_region(augment_low_freq(x, 0.2, m, rng));
        const bool centroid = std::hypot(a.cx - b.cx, a.cy - b.cy) <= 1.0;
        const bool box = std::abs(b.area - a.area) <= 0.1 * a.area;
        ok += centroid && box ? 1 : 0;
    }
    CHECK(ok >= 190);
}

TEST_CASE("noise injection raises the high-frequency profile") {
    Rng data(22);
    const auto records = gen_dataset(256, 32, data);
    std::vector<Image> clean;
    std::vector<Image> noisy;
    for (int i = 0; i < 256; ++i) {
        Rng rng(derive_seed(22, "vh", i));
        clean.push_back(records[i].image);
        noisy.push_back(augment_noise(records[i].image, 0.4, rng, 0.25));
    }
    const auto pc = mean_rapsd(clean);
    const auto pn = mean_rapsd(noisy);
    const std::size_t n = pc.size();
    for (std::size_t k = n - n / 4; k < n; ++k) CHECK(pn.value(k) > pc.value(k));
}

TEST_CASE("PGM roundtrip") {
    const auto path = std::filesystem::temp_directory_path() / "spa_augment_test.pgm";
    Grid<double> g(3, 4);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = static_cast<double>(i);
    write_pgm(path, g);
    const auto back = read_pgm(path);
    CHECK(back.height == 3);
    CHECK(back.width == 4);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(back.data[i] == doctest::Approx(g.data[i] / 11.0).epsilon(1.0 / 255));
    std::filesystem::remove(path);
}
