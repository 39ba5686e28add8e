#include "spa/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "spa/rng.hpp"

namespace spa {
namespace {

constexpr std::array<std::string_view, kParamCount> kNames = {
    "conv1.weight",     "conv1.bias",     "norm1.scale",     "norm1.shift",   "conv2.weight",     "conv2.bias",
    "norm2.scale",      "norm2.shift",    "projector.weight", "projector.bias", "cls_head.weight", "cls_head.bias",
    "reg_head.weight",  "reg_head.bias",  "pixel_head.weight", "pixel_head.bias"};

constexpr double kMassEpsilon = 1e-6;

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::size_t idx(ParamId id) { return static_cast<std::size_t>(id); }

Param make_param(ParamId id, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    Param p;
    p.name = std::string(param_name(id));
    p.shape = std::move(shape);
    p.value.assign(n, 0.0);
    p.grad.assign(n, 0.0);
    p.momentum.assign(n, 0.0);
    return p;
}

std::vector<std::vector<int>> reference_shapes(const ModelConfig& c) {
    const int reg_in = kConv2Channels + kMomentFeatures;
    return {{kConv1Channels, c.in_channels, 3, 3},
            {kConv1Channels},
            {kConv1Channels},
            {kConv1Channels},
            {kConv2Channels, kConv1Channels, 3, 3},
            {kConv2Channels},
            {kConv2Channels},
            {kConv2Channels},
            {kConv2Channels, kConv2Channels},
            {kConv2Channels},
            {c.num_classes, kConv2Channels},
            {c.num_classes},
            {c.reg_outputs, reg_in},
            {c.reg_outputs},
            {c.pixel_classes, kConv2Channels},
            {c.pixel_classes}};
}

// Dot product with eight fixed lanes; vectorizes without reassociating the
// floating-point sum, so the result does not depend on the target ISA.
double dot_lanes(const double* a, const double* b, std::size_t n) {
    double lanes[8] = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

// 3x3 convolutions, stride 1, zero padding 1. Inputs are padded to
// (H+2)x(W+2) per channel. Outputs and output gradients use a "wide" layout
// of H rows by W+2 columns whose last two columns are scratch, so every tap
// is one flat loop over the plane.
std::size_t wide_span(int h, int w) { return static_cast<std::size_t>(h) * (w + 2) - 2; }

void conv3x3_forward(const double* in, int in_ch, const double* weight, const double* bias, int out_ch, int h, int w,
                     double* out_wide) {
    const int pw = w + 2;
    const std::size_t in_plane = static_cast<std::size_t>(h + 2) * pw;
    const std::size_t wide_plane = static_cast<std::size_t>(h) * pw;
    const std::size_t n = wide_span(h, w);
    for (int co = 0; co < out_ch; ++co) {
        double* __restrict o = out_wide + co * wide_plane;
        std::fill(o, o + wide_plane, bias[co]);
        for (int ci = 0; ci < in_ch; ++ci) {
            const double* __restrict s0 = in + ci * in_plane;
            const double* __restrict s1 = s0 + pw;
            const double* __restrict s2 = s0 + 2 * pw;
            const double* k = weight + (co * in_ch + ci) * 9;
            const double k0 = k[0], k1 = k[1], k2 = k[2], k3 = k[3], k4 = k[4], k5 = k[5], k6 = k[6], k7 = k[7],
                         k8 = k[8];
            for (std::size_t i = 0; i < n; ++i) {
                o[i] = o[i] + k0 * s0[i] + k1 * s0[i + 1] + k2 * s0[i + 2] + k3 * s1[i] + k4 * s1[i + 1] +
                       k5 * s1[i + 2] + k6 * s2[i] + k7 * s2[i + 1] + k8 * s2[i + 2];
            }
        }
    }
}

// `dout_wide` must hold zeros in its scratch columns.
void conv3x3_weight_grad(const double* in, int in_ch, const double* dout_wide, int out_ch, int h, int w,
                         double* dweight, double* dbias) {
    const int pw = w + 2;
    const std::size_t in_plane = static_cast<std::size_t>(h + 2) * pw;
    const std::size_t wide_plane = static_cast<std::size_t>(h) * pw;
    const std::size_t n = wide_span(h, w);
    std::vector<double> ones(n, 1.0);
    for (int co = 0; co < out_ch; ++co) {
        const double* g = dout_wide + co * wide_plane;
        if (dbias != nullptr) dbias[co] += dot_lanes(g, ones.data(), n);
        if (dweight == nullptr) continue;
        for (int ci = 0; ci < in_ch; ++ci) {
            const double* src = in + ci * in_plane;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    dweight[((co * in_ch + ci) * 3 + ky) * 3 + kx] += dot_lanes(g, src + ky * pw + kx, n);
                }
            }
        }
    }
}

// Accumulates the input gradient into a padded buffer. Each output-gradient
// plane is embedded in a zero frame so the transposed convolution becomes a
// gather over the whole padded input plane.
void conv3x3_input_grad(const double* weight, const double* dout_wide, int in_ch, int out_ch, int h, int w,
                        double* din_padded) {
    const int pw = w + 2;
    const std::size_t in_plane = static_cast<std::size_t>(h + 2) * pw;
    const std::size_t wide_plane = static_cast<std::size_t>(h) * pw;
    const std::size_t lead = 2 * static_cast<std::size_t>(pw) + 2;
    std::vector<double> framed(static_cast<std::size_t>(out_ch) * (in_plane + lead), 0.0);
    for (int co = 0; co < out_ch; ++co) {
        const double* g = dout_wide + co * wide_plane;
        std::copy(g, g + wide_span(h, w), framed.begin() + static_cast<std::ptrdiff_t>(co * (in_plane + lead) + lead));
    }
    for (int ci = 0; ci < in_ch; ++ci) {
        double* __restrict d = din_padded + ci * in_plane;
        for (int co = 0; co < out_ch; ++co) {
            // g0[j] = dout[j - 2*pw - 2], the tap (ky, kx) = (2, 2)
            const double* __restrict g0 = framed.data() + co * (in_plane + lead);
            const double* __restrict g1 = g0 + pw;
            const double* __restrict g2 = g0 + 2 * pw;
            const double* k = weight + (co * in_ch + ci) * 9;
            const double k0 = k[0], k1 = k[1], k2 = k[2], k3 = k[3], k4 = k[4], k5 = k[5], k6 = k[6], k7 = k[7],
                         k8 = k[8];
            for (std::size_t j = 0; j < in_plane; ++j) {
                d[j] = d[j] + k8 * g0[j] + k7 * g0[j + 1] + k6 * g0[j + 2] + k5 * g1[j] + k4 * g1[j + 1] +
                       k3 * g1[j + 2] + k2 * g2[j] + k1 * g2[j + 1] + k0 * g2[j + 2];
            }
        }
    }
}

void compact_from_wide(const double* wide, int channels, int h, int w, double* compact) {
    for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < h; ++y) {
            const double* src = wide + (static_cast<std::size_t>(c) * h + y) * (w + 2);
            std::copy(src, src + w, compact + (static_cast<std::size_t>(c) * h + y) * w);
        }
    }
}

void wide_from_compact(const double* compact, int channels, int h, int w, double* wide) {
    for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < h; ++y) {
            const double* src = compact + (static_cast<std::size_t>(c) * h + y) * w;
            double* dst = wide + (static_cast<std::size_t>(c) * h + y) * (w + 2);
            std::copy(src, src + w, dst);
            dst[w] = 0.0;
            dst[w + 1] = 0.0;
        }
    }
}

// Backward through y = scale[c] * xhat + shift[c] and the per-channel
// normalization. `dy` is overwritten with dL/dx when `want_input_grad` is set.
void norm_backward(const double* xhat, const double* inv_std, const double* scale, int channels, std::size_t plane,
                   double* dy, double* dscale, double* dshift, bool want_input_grad) {
    const double n = static_cast<double>(plane);
    for (int c = 0; c < channels; ++c) {
        double acc_scale = 0.0;
        double acc_shift = 0.0;
        const double* xh = xhat + c * plane;
        double* g = dy + c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            acc_scale += g[p] * xh[p];
            acc_shift += g[p];
        }
        if (dscale != nullptr) dscale[c] += acc_scale;
        if (dshift != nullptr) dshift[c] += acc_shift;
        if (!want_input_grad) continue;
        const double mean_dxhat = scale[c] * acc_shift / n;
        const double mean_dxhat_xhat = scale[c] * acc_scale / n;
        for (std::size_t p = 0; p < plane; ++p) {
            g[p] = inv_std[c] * (scale[c] * g[p] - mean_dxhat - xh[p] * mean_dxhat_xhat);
        }
    }
}

void softmax(const double* z, int k, double* p) {
    double mx = z[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
        p[i] = std::exp(z[i] - mx);
        sum += p[i];
    }
    for (int i = 0; i < k; ++i) p[i] /= sum;
}

// Little-endian byte helpers for the checkpoint format.
void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
void put_f32(std::vector<std::uint8_t>& out, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(out, bits);
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
    std::uint8_t u8() { return take(1)[0]; }
    std::uint16_t u16() {
        auto b = take(2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32() {
        auto b = take(4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    double f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, sizeof f);
        return static_cast<double>(f);
    }
    std::string str(std::size_t n) {
        auto b = take(n);
        return {b.begin(), b.end()};
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> take(std::size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw std::runtime_error("SPA1 checkpoint truncated at byte " + std::to_string(bytes_.size()));
        }
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

constexpr std::uint16_t kCheckpointVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

}  // namespace

std::string_view param_name(ParamId id) { return kNames[idx(id)]; }

Param& ModelState::param(std::string_view name) {
    for (auto& p : params) {
        if (p.name == name) return p;
    }
    throw std::invalid_argument("unknown parameter '" + std::string(name) + "'");
}

void ModelState::zero_grad() {
    for (auto& p : params) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

void ModelState::set_adaptable(std::set<std::string> names) {
    for (const auto& n : names) {
        const bool known = std::find(kNames.begin(), kNames.end(), n) != kNames.end();
        if (!known) throw std::invalid_argument("unknown adaptable parameter '" + n + "'");
    }
    adaptable = std::move(names);
}

void ModelState::make_all_adaptable() {
    adaptable.clear();
    for (auto n : kNames) adaptable.emplace(n);
}

std::set<std::string> default_adaptable_names() {
    return {"norm1.scale", "norm1.shift", "norm2.scale", "norm2.shift", "projector.weight", "projector.bias"};
}

ModelState make_model(const ModelConfig& config, std::uint64_t seed) {
    if (config.in_channels < 1 || config.height < 1 || config.width < 1 || config.num_classes < 1 ||
        config.reg_outputs < 0 || config.pixel_classes < 2) {
        throw std::invalid_argument("invalid model configuration");
    }
    ModelState state;
    state.config = config;
    const auto shapes = reference_shapes(config);
    for (int i = 0; i < kParamCount; ++i) state.params.push_back(make_param(static_cast<ParamId>(i), shapes[i]));

    Rng rng(seed);
    auto fill_normal = [&](ParamId id, double stddev) {
        for (double& v : state.param(id).value) v = to_f32(stddev * rng.normal());
    };
    fill_normal(ParamId::conv1_weight, std::sqrt(2.0 / (9.0 * config.in_channels)));
    fill_normal(ParamId::conv2_weight, std::sqrt(2.0 / (9.0 * kConv1Channels)));
    fill_normal(ParamId::cls_weight, std::sqrt(1.0 / kConv2Channels));
    fill_normal(ParamId::pixel_weight, std::sqrt(1.0 / kConv2Channels));
    for (ParamId id : {ParamId::norm1_scale, ParamId::norm2_scale}) {
        auto& v = state.param(id).value;
        std::fill(v.begin(), v.end(), 1.0);
    }
    auto& proj = state.param(ParamId::projector_weight).value;
    for (int i = 0; i < kConv2Channels; ++i) proj[static_cast<std::size_t>(i) * kConv2Channels + i] = 1.0;
    // Regression starts from the foreground moments: (cx, cy, sqrt(mass)).
    auto& reg = state.param(ParamId::reg_weight).value;
    const int reg_in = kConv2Channels + kMomentFeatures;
    for (int r = 0; r < std::min(config.reg_outputs, kMomentFeatures); ++r) {
        reg[static_cast<std::size_t>(r) * reg_in + kConv2Channels + r] = 1.0;
    }
    state.adaptable = default_adaptable_names();
    return state;
}

PredictionBatch PredictionBatch::zeros_like(const PredictionBatch& p) {
    PredictionBatch z = p;
    std::fill(z.class_logits.begin(), z.class_logits.end(), 0.0);
    std::fill(z.regression.begin(), z.regression.end(), 0.0);
    std::fill(z.pixel_logits.begin(), z.pixel_logits.end(), 0.0);
    return z;
}

bool PredictionBatch::same_shape(const PredictionBatch& o) const {
    return batch == o.batch && num_classes == o.num_classes && reg_outputs == o.reg_outputs && height == o.height &&
           width == o.width && pixel_classes == o.pixel_classes && class_logits.size() == o.class_logits.size() &&
           regression.size() == o.regression.size() && pixel_logits.size() == o.pixel_logits.size();
}

double normalize_features(std::span<const double> in, std::span<double> out) {
    const double n = static_cast<double>(in.size());
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + kNormEpsilon);
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = (in[i] - mean) * inv_std;
    return inv_std;
}

ForwardResult forward(const ModelState& state, std::span<const Image> batch, Branch branch) {
    const ModelConfig& cfg = state.config;
    const int h = cfg.height;
    const int w = cfg.width;
    const int cin = cfg.in_channels;
    const int n_cls = cfg.num_classes;
    const int n_reg = cfg.reg_outputs;
    const int n_pix = cfg.pixel_classes;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t pplane = static_cast<std::size_t>(h + 2) * (w + 2);
    const int bsz = static_cast<int>(batch.size());
    if (bsz == 0) throw std::invalid_argument("forward: empty batch");
    for (int b = 0; b < bsz; ++b) {
        const Image& img = batch[b];
        if (img.height != h || img.width != w || img.channels != cin) {
            throw std::invalid_argument("forward: sample " + std::to_string(b) + " is " + std::to_string(img.channels) +
                                        "x" + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                        ", model expects " + std::to_string(cin) + "x" + std::to_string(h) + "x" +
                                        std::to_string(w));
        }
        if (img.values.size() != plane * cin) throw std::invalid_argument("forward: malformed image buffer");
    }

    ForwardResult res;
    Tape& t = res.tape;
    t.branch = branch;
    t.batch = bsz;
    t.input_padded.assign(bsz * cin * pplane, 0.0);
    t.xhat1.resize(bsz * kConv1Channels * plane);
    t.inv_std1.resize(static_cast<std::size_t>(bsz) * kConv1Channels);
    t.act1_padded.assign(bsz * kConv1Channels * pplane, 0.0);
    t.xhat2.resize(bsz * kConv2Channels * plane);
    t.inv_std2.resize(static_cast<std::size_t>(bsz) * kConv2Channels);
    t.features.resize(bsz * kConv2Channels * plane);
    t.pooled.resize(static_cast<std::size_t>(bsz) * kConv2Channels);
    t.projected.assign(branch == Branch::weak ? static_cast<std::size_t>(bsz) * kConv2Channels : 0, 0.0);
    t.pixel_probs.resize(bsz * plane * n_pix);
    t.moments.resize(static_cast<std::size_t>(bsz) * kMomentFeatures);
    t.mass.resize(bsz);

    PredictionBatch& out = res.predictions;
    out.batch = bsz;
    out.num_classes = n_cls;
    out.reg_outputs = n_reg;
    out.height = h;
    out.width = w;
    out.pixel_classes = n_pix;
    out.class_logits.assign(static_cast<std::size_t>(bsz) * n_cls, 0.0);
    out.regression.assign(static_cast<std::size_t>(bsz) * n_reg, 0.0);
    out.pixel_logits.assign(bsz * plane * n_pix, 0.0);

    const auto& p = state.params;
    const double* w1 = p[idx(ParamId::conv1_weight)].value.data();
    const double* b1 = p[idx(ParamId::conv1_bias)].value.data();
    const double* s1 = p[idx(ParamId::norm1_scale)].value.data();
    const double* o1 = p[idx(ParamId::norm1_shift)].value.data();
    const double* w2 = p[idx(ParamId::conv2_weight)].value.data();
    const double* b2 = p[idx(ParamId::conv2_bias)].value.data();
    const double* s2 = p[idx(ParamId::norm2_scale)].value.data();
    const double* o2 = p[idx(ParamId::norm2_shift)].value.data();
    const double* pw = p[idx(ParamId::projector_weight)].value.data();
    const double* pb = p[idx(ParamId::projector_bias)].value.data();
    const double* cw = p[idx(ParamId::cls_weight)].value.data();
    const double* cb = p[idx(ParamId::cls_bias)].value.data();
    const double* rw = p[idx(ParamId::reg_weight)].value.data();
    const double* rb = p[idx(ParamId::reg_bias)].value.data();
    const double* dw = p[idx(ParamId::pixel_weight)].value.data();
    const double* db = p[idx(ParamId::pixel_bias)].value.data();
    const int reg_in = kConv2Channels + kMomentFeatures;

    std::vector<double> z1(kConv1Channels * plane);
    std::vector<double> z2(kConv2Channels * plane);
    std::vector<double> wide(kConv2Channels * static_cast<std::size_t>(h) * (w + 2));
    for (int b = 0; b < bsz; ++b) {
        double* in_pad = t.input_padded.data() + b * cin * pplane;
        for (int c = 0; c < cin; ++c) {
            for (int y = 0; y < h; ++y) {
                const double* src = batch[b].values.data() + c * plane + static_cast<std::size_t>(y) * w;
                std::copy(src, src + w, in_pad + c * pplane + static_cast<std::size_t>(y + 1) * (w + 2) + 1);
            }
        }

        conv3x3_forward(in_pad, cin, w1, b1, kConv1Channels, h, w, wide.data());
        compact_from_wide(wide.data(), kConv1Channels, h, w, z1.data());
        double* xh1 = t.xhat1.data() + b * kConv1Channels * plane;
        for (int c = 0; c < kConv1Channels; ++c) {
            t.inv_std1[b * kConv1Channels + c] =
                normalize_features({z1.data() + c * plane, plane}, {xh1 + c * plane, plane});
        }
        double* a1 = t.act1_padded.data() + b * kConv1Channels * pplane;
        for (int c = 0; c < kConv1Channels; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const double v = s1[c] * xh1[c * plane + static_cast<std::size_t>(y) * w + x] + o1[c];
                    a1[c * pplane + static_cast<std::size_t>(y + 1) * (w + 2) + x + 1] = v > 0.0 ? v : 0.0;
                }
            }
        }

        conv3x3_forward(a1, kConv1Channels, w2, b2, kConv2Channels, h, w, wide.data());
        compact_from_wide(wide.data(), kConv2Channels, h, w, z2.data());
        double* xh2 = t.xhat2.data() + b * kConv2Channels * plane;
        for (int c = 0; c < kConv2Channels; ++c) {
            t.inv_std2[b * kConv2Channels + c] =
                normalize_features({z2.data() + c * plane, plane}, {xh2 + c * plane, plane});
        }
        double* feat = t.features.data() + b * kConv2Channels * plane;
        double* g = t.pooled.data() + static_cast<std::size_t>(b) * kConv2Channels;
        for (int c = 0; c < kConv2Channels; ++c) {
            double acc = 0.0;
            for (std::size_t q = 0; q < plane; ++q) {
                const double v = s2[c] * xh2[c * plane + q] + o2[c];
                const double a = v > 0.0 ? v : 0.0;
                feat[c * plane + q] = a;
                acc += a;
            }
            g[c] = acc / static_cast<double>(plane);
        }

        const double* cls_in = g;
        if (branch == Branch::weak) {
            double* gp = t.projected.data() + static_cast<std::size_t>(b) * kConv2Channels;
            for (int i = 0; i < kConv2Channels; ++i) {
                double acc = pb[i];
                for (int j = 0; j < kConv2Channels; ++j) acc += pw[i * kConv2Channels + j] * g[j];
                gp[i] = acc;
            }
            cls_in = gp;
        }
        double* logits = out.class_logits.data() + static_cast<std::size_t>(b) * n_cls;
        for (int k = 0; k < n_cls; ++k) {
            double acc = cb[k];
            for (int j = 0; j < kConv2Channels; ++j) acc += cw[k * kConv2Channels + j] * cls_in[j];
            logits[k] = acc;
        }

        double* pix = out.pixel_logits.data() + b * plane * n_pix;
        double* pp = t.pixel_probs.data() + b * plane * n_pix;
        double mass = kMassEpsilon;
        double mx = 0.0;
        double my = 0.0;
        for (std::size_t q = 0; q < plane; ++q) {
            double* zq = pix + q * n_pix;
            for (int k = 0; k < n_pix; ++k) {
                double acc = db[k];
                for (int c = 0; c < kConv2Channels; ++c) acc += dw[k * kConv2Channels + c] * feat[c * plane + q];
                zq[k] = acc;
            }
            double* pq = pp + q * n_pix;
            softmax(zq, n_pix, pq);
            const double fg = 1.0 - pq[0];
            mass += fg;
            mx += fg * static_cast<double>(q % w);
            my += fg * static_cast<double>(q / w);
        }
        double* m = t.moments.data() + static_cast<std::size_t>(b) * kMomentFeatures;
        m[0] = mx / mass;
        m[1] = my / mass;
        m[2] = std::sqrt(mass);
        t.mass[b] = mass;

        double* reg = out.regression.data() + static_cast<std::size_t>(b) * n_reg;
        for (int r = 0; r < n_reg; ++r) {
            const double* row = rw + static_cast<std::size_t>(r) * reg_in;
            double acc = rb[r];
            for (int j = 0; j < kConv2Channels; ++j) acc += row[j] * g[j];
            for (int j = 0; j < kMomentFeatures; ++j) acc += row[kConv2Channels + j] * m[j];
            reg[r] = acc;
        }
    }
    return res;
}

GradientSet backward(const ModelState& state, const Tape& t, const PredictionBatch& dout) {
    const ModelConfig& cfg = state.config;
    const int h = cfg.height;
    const int w = cfg.width;
    const int cin = cfg.in_channels;
    const int n_cls = cfg.num_classes;
    const int n_reg = cfg.reg_outputs;
    const int n_pix = cfg.pixel_classes;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t pplane = static_cast<std::size_t>(h + 2) * (w + 2);
    const int bsz = t.batch;
    if (dout.batch != bsz || dout.num_classes != n_cls || dout.reg_outputs != n_reg || dout.height != h ||
        dout.width != w || dout.pixel_classes != n_pix ||
        dout.class_logits.size() != static_cast<std::size_t>(bsz) * n_cls ||
        dout.regression.size() != static_cast<std::size_t>(bsz) * n_reg ||
        dout.pixel_logits.size() != bsz * plane * n_pix) {
        throw std::invalid_argument("backward: output gradient shape does not match the tape (batch " +
                                    std::to_string(dout.batch) + " vs " + std::to_string(bsz) + ")");
    }
    if (t.pooled.size() != static_cast<std::size_t>(bsz) * kConv2Channels) {
        throw std::invalid_argument("backward: tape was not produced by this model");
    }

    GradientSet grads(kParamCount);
    std::array<bool, kParamCount> want{};
    for (int i = 0; i < kParamCount; ++i) {
        grads[i].assign(state.params[i].numel(), 0.0);
        want[i] = state.is_adaptable(static_cast<ParamId>(i));
    }
    auto want_id = [&](ParamId id) { return want[idx(id)]; };
    auto grad_ptr = [&](ParamId id) -> double* { return want_id(id) ? grads[idx(id)].data() : nullptr; };

    const bool need_act1 = want_id(ParamId::conv1_weight) || want_id(ParamId::conv1_bias) ||
                           want_id(ParamId::norm1_scale) || want_id(ParamId::norm1_shift);
    const bool need_z2 = need_act1 || want_id(ParamId::conv2_weight) || want_id(ParamId::conv2_bias);
    const bool need_features = need_z2 || want_id(ParamId::norm2_scale) || want_id(ParamId::norm2_shift);
    const bool need_z1 = want_id(ParamId::conv1_weight) || want_id(ParamId::conv1_bias);

    const auto& p = state.params;
    const double* s1 = p[idx(ParamId::norm1_scale)].value.data();
    const double* w2 = p[idx(ParamId::conv2_weight)].value.data();
    const double* s2 = p[idx(ParamId::norm2_scale)].value.data();
    const double* pw = p[idx(ParamId::projector_weight)].value.data();
    const double* cw = p[idx(ParamId::cls_weight)].value.data();
    const double* rw = p[idx(ParamId::reg_weight)].value.data();
    const double* dw = p[idx(ParamId::pixel_weight)].value.data();
    const int reg_in = kConv2Channels + kMomentFeatures;

    std::vector<double> dg(kConv2Channels);
    std::vector<double> dgp(kConv2Channels);
    std::vector<double> dz_pix(plane * n_pix);
    std::vector<double> dh(kConv2Channels * plane);
    std::vector<double> da1(kConv1Channels * pplane);
    std::vector<double> dy1(kConv1Channels * plane);
    std::vector<double> gwide(kConv2Channels * static_cast<std::size_t>(h) * (w + 2));

    for (int b = 0; b < bsz; ++b) {
        std::fill(dg.begin(), dg.end(), 0.0);
        const double* g = t.pooled.data() + static_cast<std::size_t>(b) * kConv2Channels;
        const double* feat = t.features.data() + b * kConv2Channels * plane;
        const double* m = t.moments.data() + static_cast<std::size_t>(b) * kMomentFeatures;

        // Regression head: r = W [g; m] + bias.
        const double* dreg = dout.regression.data() + static_cast<std::size_t>(b) * n_reg;
        std::array<double, kMomentFeatures> dm{};
        for (int r = 0; r < n_reg; ++r) {
            const double gr = dreg[r];
            if (gr == 0.0) continue;
            const double* row = rw + static_cast<std::size_t>(r) * reg_in;
            if (double* gw = grad_ptr(ParamId::reg_weight)) {
                double* grow = gw + static_cast<std::size_t>(r) * reg_in;
                for (int j = 0; j < kConv2Channels; ++j) grow[j] += gr * g[j];
                for (int j = 0; j < kMomentFeatures; ++j) grow[kConv2Channels + j] += gr * m[j];
            }
            if (double* gb = grad_ptr(ParamId::reg_bias)) gb[r] += gr;
            for (int j = 0; j < kConv2Channels; ++j) dg[j] += row[j] * gr;
            for (int j = 0; j < kMomentFeatures; ++j) dm[j] += row[kConv2Channels + j] * gr;
        }

        // Pixel logits receive their direct gradient plus the moment path.
        const double* dpix = dout.pixel_logits.data() + b * plane * n_pix;
        std::copy(dpix, dpix + plane * n_pix, dz_pix.begin());
        const bool moment_path = dm[0] != 0.0 || dm[1] != 0.0 || dm[2] != 0.0;
        if (moment_path) {
            const double mass = t.mass[b];
            const double* pp = t.pixel_probs.data() + b * plane * n_pix;
            for (std::size_t q = 0; q < plane; ++q) {
                const double x = static_cast<double>(q % w);
                const double y = static_cast<double>(q / w);
                const double dq = dm[0] * (x - m[0]) / mass + dm[1] * (y - m[1]) / mass + dm[2] / (2.0 * m[2]);
                // foreground = 1 - softmax(z)[0]
                const double* probs = pp + q * n_pix;
                const double p0 = probs[0];
                dz_pix[q * n_pix] += dq * (-p0 * (1.0 - p0));
                for (int k = 1; k < n_pix; ++k) dz_pix[q * n_pix + k] += dq * p0 * probs[k];
            }
        }

        // Pixel head (1x1 convolution over features).
        std::fill(dh.begin(), dh.end(), 0.0);
        double* gpw = grad_ptr(ParamId::pixel_weight);
        double* gpb = grad_ptr(ParamId::pixel_bias);
        for (std::size_t q = 0; q < plane; ++q) {
            const double* dzq = dz_pix.data() + q * n_pix;
            for (int k = 0; k < n_pix; ++k) {
                const double gz = dzq[k];
                if (gz == 0.0) continue;
                if (gpb != nullptr) gpb[k] += gz;
                for (int c = 0; c < kConv2Channels; ++c) {
                    if (gpw != nullptr) gpw[k * kConv2Channels + c] += gz * feat[c * plane + q];
                    dh[c * plane + q] += dw[k * kConv2Channels + c] * gz;
                }
            }
        }

        // Classification head, through the projector on the weak branch.
        const double* dlog = dout.class_logits.data() + static_cast<std::size_t>(b) * n_cls;
        const double* cls_in = t.branch == Branch::weak ? t.projected.data() + static_cast<std::size_t>(b) * kConv2Channels : g;
        std::fill(dgp.begin(), dgp.end(), 0.0);
        for (int k = 0; k < n_cls; ++k) {
            const double gk = dlog[k];
            if (gk == 0.0) continue;
            if (double* gw = grad_ptr(ParamId::cls_weight)) {
                for (int j = 0; j < kConv2Channels; ++j) gw[k * kConv2Channels + j] += gk * cls_in[j];
            }
            if (double* gb = grad_ptr(ParamId::cls_bias)) gb[k] += gk;
            for (int j = 0; j < kConv2Channels; ++j) dgp[j] += cw[k * kConv2Channels + j] * gk;
        }
        if (t.branch == Branch::weak) {
            double* gpw2 = grad_ptr(ParamId::projector_weight);
            double* gpb2 = grad_ptr(ParamId::projector_bias);
            for (int i = 0; i < kConv2Channels; ++i) {
                if (gpb2 != nullptr) gpb2[i] += dgp[i];
                for (int j = 0; j < kConv2Channels; ++j) {
                    if (gpw2 != nullptr) gpw2[i * kConv2Channels + j] += dgp[i] * g[j];
                    dg[j] += pw[i * kConv2Channels + j] * dgp[i];
                }
            }
        } else {
            for (int j = 0; j < kConv2Channels; ++j) dg[j] += dgp[j];
        }

        if (!need_features) continue;

        // Global mean pool, then ReLU.
        const double inv_plane = 1.0 / static_cast<double>(plane);
        for (int c = 0; c < kConv2Channels; ++c) {
            for (std::size_t q = 0; q < plane; ++q) {
                double& v = dh[c * plane + q];
                v = feat[c * plane + q] > 0.0 ? v + dg[c] * inv_plane : 0.0;
            }
        }

        const double* xh2 = t.xhat2.data() + b * kConv2Channels * plane;
        norm_backward(xh2, t.inv_std2.data() + b * kConv2Channels, s2, kConv2Channels, plane, dh.data(), grad_ptr(ParamId::norm2_scale),
                      grad_ptr(ParamId::norm2_shift), need_z2);
        if (!need_z2) continue;

        const double* a1 = t.act1_padded.data() + b * kConv1Channels * pplane;
        wide_from_compact(dh.data(), kConv2Channels, h, w, gwide.data());
        conv3x3_weight_grad(a1, kConv1Channels, gwide.data(), kConv2Channels, h, w, grad_ptr(ParamId::conv2_weight),
                            grad_ptr(ParamId::conv2_bias));
        if (!need_act1) continue;

        std::fill(da1.begin(), da1.end(), 0.0);
        conv3x3_input_grad(w2, gwide.data(), kConv1Channels, kConv2Channels, h, w, da1.data());
        for (int c = 0; c < kConv1Channels; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const std::size_t pi = c * pplane + static_cast<std::size_t>(y + 1) * (w + 2) + x + 1;
                    dy1[c * plane + static_cast<std::size_t>(y) * w + x] = a1[pi] > 0.0 ? da1[pi] : 0.0;
                }
            }
        }
        const double* xh1 = t.xhat1.data() + b * kConv1Channels * plane;
        norm_backward(xh1, t.inv_std1.data() + b * kConv1Channels, s1, kConv1Channels, plane, dy1.data(), grad_ptr(ParamId::norm1_scale),
                      grad_ptr(ParamId::norm1_shift), need_z1);
        if (!need_z1) continue;

        const double* in_pad = t.input_padded.data() + b * cin * pplane;
        wide_from_compact(dy1.data(), kConv1Channels, h, w, gwide.data());
        conv3x3_weight_grad(in_pad, cin, gwide.data(), kConv1Channels, h, w, grad_ptr(ParamId::conv1_weight),
                            grad_ptr(ParamId::conv1_bias));
    }
    return grads;
}

void accumulate_grads(ModelState& state, const GradientSet& grads) {
    if (grads.size() != state.params.size()) throw std::invalid_argument("gradient set does not match the model");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto& g = state.params[i].grad;
        if (grads[i].size() != g.size()) throw std::invalid_argument("gradient shape mismatch for " + state.params[i].name);
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += grads[i][j];
    }
}

void sgd_step(ModelState& state, const std::function<double(std::string_view)>& lr_of, double momentum) {
    for (auto& p : state.params) {
        if (!state.adaptable.contains(p.name)) continue;
        const double lr = lr_of(p.name);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            p.momentum[i] = to_f32(momentum * p.momentum[i] + p.grad[i]);
            p.value[i] = to_f32(p.value[i] - lr * p.momentum[i]);
        }
    }
    state.zero_grad();
}

void sgd_step(ModelState& state, double lr, double momentum) {
    sgd_step(state, [lr](std::string_view) { return lr; }, momentum);
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelState& state) {
    std::vector<std::uint8_t> out = {'S', 'P', 'A', '1'};
    put_u16(out, kCheckpointVersion);
    const ModelConfig& c = state.config;
    for (int v : {c.in_channels, c.height, c.width, c.num_classes, c.reg_outputs, c.pixel_classes}) {
        put_u32(out, static_cast<std::uint32_t>(v));
    }
    put_u32(out, static_cast<std::uint32_t>(state.params.size()));
    for (const auto& p : state.params) {
        put_u16(out, static_cast<std::uint16_t>(p.name.size()));
        out.insert(out.end(), p.name.begin(), p.name.end());
        put_u8(out, kDtypeF32);
        put_u8(out, state.adaptable.contains(p.name) ? 1 : 0);
        put_u8(out, static_cast<std::uint8_t>(p.shape.size()));
        for (int d : p.shape) put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (const auto& p : state.params) {
        for (double v : p.value) put_f32(out, v);
        for (double v : p.momentum) put_f32(out, v);
    }
    return out;
}

ModelState deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader rd(bytes);
    if (bytes.size() < 4 || rd.str(4) != "SPA1") {
        throw std::runtime_error("not an SPA1 checkpoint: bad magic bytes");
    }
    const std::uint16_t version = rd.u16();
    if (version != kCheckpointVersion) {
        throw std::runtime_error("SPA1 checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
    }
    ModelConfig cfg;
    cfg.in_channels = static_cast<int>(rd.u32());
    cfg.height = static_cast<int>(rd.u32());
    cfg.width = static_cast<int>(rd.u32());
    cfg.num_classes = static_cast<int>(rd.u32());
    cfg.reg_outputs = static_cast<int>(rd.u32());
    cfg.pixel_classes = static_cast<int>(rd.u32());
    ModelState state = make_model(cfg, 0);
    state.adaptable.clear();

    const std::uint32_t count = rd.u32();
    if (count != static_cast<std::uint32_t>(kParamCount)) {
        throw std::runtime_error("SPA1 checkpoint lists " + std::to_string(count) + " parameters, expected " +
                                 std::to_string(kParamCount));
    }
    for (auto& p : state.params) {
        const std::string name = rd.str(rd.u16());
        if (name != p.name) throw std::runtime_error("SPA1 checkpoint: expected parameter '" + p.name + "', found '" + name + "'");
        if (rd.u8() != kDtypeF32) throw std::runtime_error("SPA1 checkpoint: unsupported dtype for " + name);
        if (rd.u8() != 0) state.adaptable.insert(name);
        const std::uint8_t rank = rd.u8();
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(rd.u32());
        if (shape != p.shape) throw std::runtime_error("SPA1 checkpoint: shape mismatch for " + name);
    }
    for (auto& p : state.params) {
        for (double& v : p.value) v = rd.f32();
        for (double& v : p.momentum) v = rd.f32();
    }
    if (!rd.done()) throw std::runtime_error("SPA1 checkpoint has trailing bytes");
    return state;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(state);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace spa
