#include "spa/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "spa/nn_ops.hpp"

namespace spa {
namespace {

constexpr std::array<CorruptionKind, 6> kAllKinds = {CorruptionKind::gaussian_noise, CorruptionKind::shot_noise,
                                                     CorruptionKind::gaussian_blur,  CorruptionKind::contrast,
                                                     CorruptionKind::brightness,     CorruptionKind::pixelate};

// Index 0 is the identity extension; 1..5 are the documented severities.
constexpr std::array<double, 6> kNoiseSigma = {0.0, 0.04, 0.08, 0.12, 0.18, 0.26};
constexpr std::array<double, 6> kShotRate = {0.0, 60.0, 25.0, 12.0, 5.0, 3.0};  // photons per unit intensity
constexpr std::array<double, 6> kBlurStd = {0.0, 0.4, 0.7, 1.0, 1.5, 2.0};
constexpr std::array<double, 6> kContrast = {1.0, 0.75, 0.6, 0.45, 0.3, 0.2};
constexpr std::array<double, 6> kBrightness = {0.0, 0.05, 0.1, 0.15, 0.2, 0.3};
constexpr std::array<double, 6> kPixelate = {1.0, 2.0, 2.0, 4.0, 4.0, 8.0};

bool inside_shape(ShapeClass shape, double dx, double dy, double size) {
    const double half = size / 2.0;
    switch (shape) {
        case ShapeClass::disk:
            return dx * dx + dy * dy <= half * half;
        case ShapeClass::square:
            return std::abs(dx) <= half && std::abs(dy) <= half;
        case ShapeClass::cross: {
            const double arm = size / 6.0;  // bar thickness is a third of the extent
            return (std::abs(dx) <= half && std::abs(dy) <= arm) || (std::abs(dy) <= half && std::abs(dx) <= arm);
        }
    }
    return false;
}

Grid<double> blur_plane(const Grid<double>& src, double stddev) {
    const int radius = static_cast<int>(std::ceil(3.0 * stddev));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (stddev * stddev));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;
    const int h = src.height;
    const int w = src.width;
    // Separable pass with replicated borders.
    Grid<double> tmp(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * src.at(y, std::clamp(x + i, 0, w - 1));
            tmp.at(y, x) = acc;
        }
    }
    Grid<double> out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp.at(std::clamp(y + i, 0, h - 1), x);
            out.at(y, x) = acc;
        }
    }
    return out;
}

void require_severity(int severity) {
    if (severity < 0 || severity > 5) {
        throw std::invalid_argument("corruption severity must be in 0..5, got " + std::to_string(severity));
    }
}

// Little-endian f32 helpers for the dataset file.
void write_f32(std::ostream& os, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    char bytes[4];
    for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    os.write(bytes, 4);
}

double read_f32(const unsigned char* p) {
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return static_cast<double>(f);
}

constexpr int kDatasetVersion = 1;

}  // namespace

std::vector<SampleRecord> gen_dataset(int n, int image_size, Rng& rng, int channels) {
    if (n < 1) throw std::invalid_argument("dataset size n must be >= 1, got " + std::to_string(n));
    if (image_size < kMinImageSize) {
        throw std::invalid_argument("image_size must be >= " + std::to_string(kMinImageSize) +
                                    " to keep a margin of at least the shape size, got " + std::to_string(image_size));
    }
    if (channels < 1) throw std::invalid_argument("channels must be >= 1");
    std::vector<SampleRecord> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        SampleRecord rec;
        const auto shape = static_cast<ShapeClass>(rng.uniform_index(kNumShapeClasses));
        const double size = kMinShapeSize + (kMaxShapeSize - kMinShapeSize) * rng.uniform();
        const double cx = size + (image_size - 1 - 2.0 * size) * rng.uniform();
        const double cy = size + (image_size - 1 - 2.0 * size) * rng.uniform();
        const double fg = 0.6 + 0.4 * rng.uniform();
        const double bg = 0.2 * rng.uniform();
        const double softness = kMaxSourceBlur * rng.uniform();
        const double grain = kMaxSourceNoise * rng.uniform();

        rec.class_label = static_cast<int>(shape);
        rec.object_target = {cx, cy, size};
        rec.pixel_labels = Grid<std::uint8_t>(image_size, image_size, 0);
        rec.image = Image(image_size, image_size, channels, bg);
        double sx = 0.0;
        double sy = 0.0;
        int area = 0;
        for (int y = 0; y < image_size; ++y) {
            for (int x = 0; x < image_size; ++x) {
                if (!inside_shape(shape, x - cx, y - cy, size)) continue;
                rec.pixel_labels.at(y, x) = 1;
                for (int c = 0; c < channels; ++c) rec.image.at(c, y, x) = fg;
                sx += x;
                sy += y;
                ++area;
            }
        }
        // The target centre is the centroid of the rasterized mask.
        if (area > 0) rec.object_target = {sx / area, sy / area, size};
        if (softness > 0.0) {
            for (int c = 0; c < channels; ++c) rec.image.set_channel(c, blur_plane(rec.image.channel(c), softness));
        }
        for (double& v : rec.image.values) v += grain * rng.normal();
        out.push_back(std::move(rec));
    }
    return out;
}

std::string_view corruption_name(CorruptionKind kind) {
    switch (kind) {
        case CorruptionKind::gaussian_noise: return "gaussian_noise";
        case CorruptionKind::shot_noise: return "shot_noise";
        case CorruptionKind::gaussian_blur: return "gaussian_blur";
        case CorruptionKind::contrast: return "contrast";
        case CorruptionKind::brightness: return "brightness";
        case CorruptionKind::pixelate: return "pixelate";
    }
    return "unknown";
}

CorruptionKind parse_corruption(std::string_view name) {
    for (CorruptionKind k : kAllKinds) {
        if (corruption_name(k) == name) return k;
    }
    throw std::invalid_argument("unknown corruption kind '" + std::string(name) + "'");
}

CorruptionSpec parse_corruption_spec(std::string_view text) {
    const auto colon = text.find(':');
    CorruptionSpec spec{parse_corruption(text.substr(0, colon)), 5};
    if (colon != std::string_view::npos) {
        const std::string sev(text.substr(colon + 1));
        std::size_t used = 0;
        int value = 0;
        try {
            value = std::stoi(sev, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != sev.size() || sev.empty()) throw std::invalid_argument("bad severity in '" + std::string(text) + "'");
        require_severity(value);
        spec.severity = value;
    }
    return spec;
}

std::span<const CorruptionKind> all_corruptions() { return kAllKinds; }

double corruption_parameter(CorruptionKind kind, int severity) {
    require_severity(severity);
    switch (kind) {
        case CorruptionKind::gaussian_noise: return kNoiseSigma[severity];
        case CorruptionKind::shot_noise: return kShotRate[severity];
        case CorruptionKind::gaussian_blur: return kBlurStd[severity];
        case CorruptionKind::contrast: return kContrast[severity];
        case CorruptionKind::brightness: return kBrightness[severity];
        case CorruptionKind::pixelate: return kPixelate[severity];
    }
    throw std::invalid_argument("unknown corruption kind");
}

Image corrupt(const Image& img, const CorruptionSpec& spec, Rng& rng) {
    const double param = corruption_parameter(spec.kind, spec.severity);
    Image out = img;
    if (spec.severity == 0) return out;
    switch (spec.kind) {
        case CorruptionKind::gaussian_noise:
            for (double& v : out.values) v += param * rng.normal();
            break;
        case CorruptionKind::shot_noise:
            for (double& v : out.values) v = static_cast<double>(rng.poisson(std::max(v, 0.0) * param)) / param;
            break;
        case CorruptionKind::gaussian_blur:
            for (int c = 0; c < img.channels; ++c) out.set_channel(c, blur_plane(img.channel(c), param));
            break;
        case CorruptionKind::contrast: {
            const double mean = std::accumulate(img.values.begin(), img.values.end(), 0.0) /
                                static_cast<double>(img.values.size());
            for (double& v : out.values) v = mean + param * (v - mean);
            break;
        }
        case CorruptionKind::brightness:
            for (double& v : out.values) v += param;
            break;
        case CorruptionKind::pixelate: {
            // Nearest-neighbour down/up sampling: each f x f block takes the
            // value of the pixel at its centre (clamped to the image).
            const int f = static_cast<int>(param);
            for (int c = 0; c < img.channels; ++c) {
                for (int y = 0; y < img.height; ++y) {
                    const int sy = std::min(img.height - 1, (y / f) * f + f / 2);
                    for (int x = 0; x < img.width; ++x) {
                        const int sx = std::min(img.width - 1, (x / f) * f + f / 2);
                        out.at(c, y, x) = img.at(c, sy, sx);
                    }
                }
            }
            break;
        }
    }
    return out;
}

std::vector<SampleRecord> corrupt_dataset(std::span<const SampleRecord> records, const CorruptionSpec& spec,
                                          std::uint64_t seed) {
    std::vector<SampleRecord> out(records.begin(), records.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        Rng rng(derive_seed(seed, "corrupt", i));
        out[i].image = corrupt(records[i].image, spec, rng);
    }
    return out;
}

void save_dataset(const std::filesystem::path& path, std::span<const SampleRecord> records) {
    if (records.empty()) throw std::invalid_argument("refusing to write an empty dataset");
    const Image& first = records.front().image;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "version=" << kDatasetVersion << " n=" << records.size() << " h=" << first.height << " w=" << first.width
       << " c=" << first.channels << '\n';
    for (const auto& rec : records) {
        if (rec.image.height != first.height || rec.image.width != first.width ||
            rec.image.channels != first.channels) {
            throw std::invalid_argument("dataset records differ in image size");
        }
        for (double v : rec.image.values) write_f32(os, v);
        write_f32(os, rec.class_label);
        for (double v : rec.object_target) write_f32(os, v);
        for (auto v : rec.pixel_labels.data) write_f32(os, v);
    }
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<SampleRecord> load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset " + path.string());
    std::string manifest;
    std::getline(is, manifest);
    std::map<std::string, long> fields;
    std::istringstream ms(manifest);
    std::string token;
    while (ms >> token) {
        const auto eq = token.find('=');
        if (eq == std::string::npos) throw std::runtime_error("malformed dataset manifest token '" + token + "'");
        try {
            fields[token.substr(0, eq)] = std::stol(token.substr(eq + 1));
        } catch (const std::exception&) {
            throw std::runtime_error("malformed dataset manifest value in '" + token + "'");
        }
    }
    for (const char* key : {"version", "n", "h", "w", "c"}) {
        if (!fields.contains(key)) throw std::runtime_error(std::string("dataset manifest lacks '") + key + "'");
    }
    if (fields["version"] != kDatasetVersion) {
        throw std::runtime_error("unsupported dataset version " + std::to_string(fields["version"]));
    }
    const long n = fields["n"];
    const int h = static_cast<int>(fields["h"]);
    const int w = static_cast<int>(fields["w"]);
    const int c = static_cast<int>(fields["c"]);
    if (n < 1 || h < 1 || w < 1 || c < 1) throw std::runtime_error("dataset manifest has non-positive sizes");
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t floats = plane * c + 1 + 3 + plane;
    std::vector<unsigned char> buf(floats * 4);
    std::vector<SampleRecord> out;
    out.reserve(n);
    for (long i = 0; i < n; ++i) {
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (is.gcount() != static_cast<std::streamsize>(buf.size())) {
            throw std::runtime_error("dataset truncated at record " + std::to_string(i) + " of " + std::to_string(n));
        }
        const unsigned char* p = buf.data();
        SampleRecord rec;
        rec.image = Image(h, w, c);
        for (double& v : rec.image.values) {
            v = read_f32(p);
            p += 4;
        }
        rec.class_label = static_cast<int>(read_f32(p));
        p += 4;
        for (double& v : rec.object_target) {
            v = read_f32(p);
            p += 4;
        }
        rec.pixel_labels = Grid<std::uint8_t>(h, w);
        for (auto& v : rec.pixel_labels.data) {
            v = static_cast<std::uint8_t>(read_f32(p));
            p += 4;
        }
        out.push_back(std::move(rec));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("dataset has trailing bytes");
    return out;
}

ModelState train_source(std::span<const SampleRecord> dataset, const TrainConfig& cfg,
                        const std::function<void(const EpochLog&)>& on_epoch) {
    if (dataset.empty()) throw std::invalid_argument("train_source: empty dataset");
    if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.lr >= 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) ||
        !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) || !(cfg.adam_epsilon > 0.0)) {
        throw std::invalid_argument("train_source: invalid schedule");
    }
    const Image& first = dataset.front().image;
    ModelConfig mc;
    mc.in_channels = first.channels;
    mc.height = first.height;
    mc.width = first.width;
    ModelState state = make_model(mc, derive_seed(cfg.seed, "init"));
    const std::set<std::string> adapt_default = state.adaptable;
    state.make_all_adaptable();

    Rng rng(derive_seed(cfg.seed, "shuffle"));
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t plane = static_cast<std::size_t>(mc.height) * mc.width;
    const int decay_epoch = cfg.epochs - cfg.epochs / 4;
    std::vector<std::vector<double>> moment1(state.params.size());
    std::vector<std::vector<double>> moment2(state.params.size());
    for (std::size_t i = 0; i < state.params.size(); ++i) {
        moment1[i].assign(state.params[i].numel(), 0.0);
        moment2[i].assign(state.params[i].numel(), 0.0);
    }
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
        const double lr = epoch >= decay_epoch ? cfg.lr * 0.1 : cfg.lr;
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Image> images;
            for (std::size_t i = start; i < end; ++i) images.push_back(dataset[order[i]].image);
            auto fwd = forward(state, images, Branch::strong);
            const PredictionBatch& pred = fwd.predictions;
            PredictionBatch grad = PredictionBatch::zeros_like(pred);
            const double bsz = static_cast<double>(images.size());
            double loss = 0.0;
            std::vector<double> prob(std::max(mc.num_classes, mc.pixel_classes));
            for (int b = 0; b < pred.batch; ++b) {
                const SampleRecord& rec = dataset[order[start + b]];
                // classification cross-entropy
                auto logits = pred.logits(b);
                softmax_into(logits, {prob.data(), logits.size()});
                loss -= std::log(prob[rec.class_label]) / bsz;
                for (int k = 0; k < mc.num_classes; ++k) {
                    grad.class_logits[b * mc.num_classes + k] = (prob[k] - (k == rec.class_label ? 1.0 : 0.0)) / bsz;
                }
                // object regression, L1
                const double norm = cfg.reg_loss_weight / (bsz * mc.reg_outputs);
                for (int r = 0; r < mc.reg_outputs; ++r) {
                    const double diff = pred.regression[b * mc.reg_outputs + r] - rec.object_target[r];
                    loss += norm * std::abs(diff);
                    grad.regression[b * mc.reg_outputs + r] = norm * (diff > 0.0 ? 1.0 : diff < 0.0 ? -1.0 : 0.0);
                }
                // per-pixel cross-entropy
                const double pix_norm = 1.0 / (bsz * static_cast<double>(plane));
                for (std::size_t q = 0; q < plane; ++q) {
                    auto z = pred.pixel(b, static_cast<int>(q));
                    softmax_into(z, {prob.data(), z.size()});
                    const int label = rec.pixel_labels.data[q] != 0 ? 1 : 0;
                    loss -= pix_norm * std::log(prob[label]);
                    double* gz = grad.pixel_logits.data() + (b * plane + q) * mc.pixel_classes;
                    for (int k = 0; k < mc.pixel_classes; ++k) gz[k] = pix_norm * (prob[k] - (k == label ? 1.0 : 0.0));
                }
            }
            if (!std::isfinite(loss)) {
                throw std::runtime_error("train_source diverged: non-finite loss in epoch " + std::to_string(epoch) +
                                         " at sample offset " + std::to_string(start));
            }
            epoch_loss += loss * bsz;
            const GradientSet grads = backward(state, fwd.tape, grad);
            ++step;
            const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (std::size_t i = 0; i < state.params.size(); ++i) {
                auto& value = state.params[i].value;
                for (std::size_t j = 0; j < value.size(); ++j) {
                    const double g = grads[i][j];
                    moment1[i][j] = cfg.beta1 * moment1[i][j] + (1.0 - cfg.beta1) * g;
                    moment2[i][j] = cfg.beta2 * moment2[i][j] + (1.0 - cfg.beta2) * g * g;
                    const double upd = (moment1[i][j] / c1) / (std::sqrt(moment2[i][j] / c2) + cfg.adam_epsilon);
                    value[j] = static_cast<double>(static_cast<float>(value[j] - lr * upd));
                }
            }
        }
        if (on_epoch) on_epoch({epoch, epoch_loss / static_cast<double>(dataset.size())});
    }
    state.zero_grad();
    state.adaptable = adapt_default;
    return state;
}

}  // namespace spa
