#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spa/adapt.hpp"
#include "spa/augment.hpp"
#include "spa/data.hpp"
#include "spa/fourier.hpp"
#include "spa/metrics.hpp"

namespace spa {

// ---- RAPSD comparison -------------------------------------------------------

struct ImageSet {
    std::string name;
    std::vector<Image> images;
};

enum class AugmentKind { low_freq, noise };

/// An augmentation applied to every clean image; image i draws from
/// Rng(derive_seed(spec.seed, name, i)).
struct AugmentProfileSpec {
    std::string name;
    AugmentKind kind = AugmentKind::low_freq;
    AugmentSpec spec;
};

struct NamedProfile {
    std::string name;
    RadialProfile profile;
};

struct RapsdReport {
    std::vector<NamedProfile> profiles;       // the reference set first
    std::vector<std::vector<double>> ratios;  // per profile, per ring: profile / reference

    const RadialProfile& profile(std::string_view name) const;
    const std::vector<double>& ratio(std::string_view name) const;
    /// `set,ring,mean_amplitude`, one block per set.
    void write_csv(std::ostream& os) const;
};

inline constexpr std::size_t kMinRapsdImages = 32;

/// Mean profiles of the reference set, each corrupted set, and each
/// augmentation of the reference set, plus per-ring ratios to the reference.
RapsdReport rapsd_report(const ImageSet& clean, std::span<const ImageSet> corrupted,
                         std::span<const AugmentProfileSpec> augments, std::size_t min_images = kMinRapsdImages);

/// Mean of profile values over rings [first, last).
double mean_over_rings(const RadialProfile& p, std::size_t first, std::size_t last);
/// Rings [n - n/4, n) and [1, 1 + n/4) of an n-ring profile.
std::pair<std::size_t, std::size_t> top_quartile_rings(std::size_t n);
std::pair<std::size_t, std::size_t> bottom_quartile_rings(std::size_t n);

// ---- benchmark matrix -------------------------------------------------------

/// A method plus its ablation switches, e.g. "spa_no_stop_gradient".
struct MethodVariant {
    std::string name;
    Method method = Method::spa;
    bool stop_gradient = true;
    bool selection = true;
    bool low_freq_view = true;
    bool noise_view = true;

    AdaptConfig apply(AdaptConfig cfg) const;
};

MethodVariant method_variant(std::string_view name);
std::span<const std::string_view> known_method_variants();

struct MetricsRow {
    std::string method;
    CorruptionSpec corruption;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double mae_px = 0.0;
    double iou = 0.0;
    double selected_frac_mean = 0.0;
    bool failed = false;
    std::string error;
};

struct BenchmarkSpec {
    std::vector<std::string> methods = {"none", "spa", "entropy"};
    std::vector<CorruptionKind> corruptions = {CorruptionKind::gaussian_noise, CorruptionKind::gaussian_blur,
                                               CorruptionKind::contrast};
    std::vector<int> severities = {5};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    int stream_size = 3000;
    int image_size = 32;
    AdaptConfig adapt;
    double lift_margin = 0.03;         // spa over none, accuracy fraction
    double soft_margin = 0.01;         // tolerated reversal of a weak-effect ordering
    double iou_tolerance = 0.01;       // allowed IoU loss of spa against none
    double entropy_win_fraction = 2.0 / 3.0;

    void validate() const;
};

struct OrderingResult {
    std::string name;
    bool hard = true;
    bool evaluated = false;
    bool passed = true;
    std::string detail;
};

struct BenchmarkResult {
    std::vector<MetricsRow> rows;  // method-major within each (corruption, severity, seed) cell group
    std::vector<OrderingResult> orderings;

    bool hard_failure() const;
    void write_csv(std::ostream& os) const;
    void write_report(std::ostream& os) const;
};

/// Stream for one (corruption, seed) cell: clean records from
/// Rng(derive_seed(seed, "stream")) corrupted with derive_seed(seed, "corrupt").
std::vector<SampleRecord> make_stream(const CorruptionSpec& corruption, std::uint64_t seed, int n, int image_size);

/// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
double sign_test_p(int wins, int losses);

std::vector<OrderingResult> evaluate_orderings(std::span<const MetricsRow> rows, const BenchmarkSpec& spec);

BenchmarkResult benchmark(const ModelState& model, const BenchmarkSpec& spec,
                          const std::function<void(const MetricsRow&)>& on_row = {});

}  // namespace spa
