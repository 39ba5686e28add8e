#include "spa/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace spa {
namespace {

std::string num(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

std::string num(std::uint64_t v) { return std::to_string(v); }
std::string num(int v) { return std::to_string(v); }
std::string flag(bool v) { return v ? "true" : "false"; }

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F f) {
    std::string out;
    for (const auto& x : xs) {
        if (!out.empty()) out += ',';
        out += f(x);
    }
    return out;
}

std::vector<ConfigKey> build_keys() {
    const ModelConfig m;
    const TrainConfig t;
    const AdaptConfig a;
    const BenchmarkSpec b;
    return {
        {"seed", "0", "master seed for data generation, source training and adaptation views"},
        {"image_size", num(m.height), "side of the square shapes images"},
        {"channels", num(m.in_channels), "image channels"},
        {"dataset_size", "3000", "records written by gen-data"},
        {"dataset", "dataset.bin", "dataset read by train-source"},
        {"checkpoint", "source.ckpt", "checkpoint read by adapt and benchmark"},
        {"epochs", num(t.epochs), "source training epochs"},
        {"train_lr", num(t.lr), "Adam step size for source training"},
        {"train_batch_size", num(t.batch_size), "source training batch size"},
        {"train_reg_loss_weight", num(t.reg_loss_weight), "weight of the L1 regression loss in source training"},
        {"method", "spa", "adaptation method: none, spa, spa_i or entropy"},
        {"corruption", "gaussian_noise", "corruption kind of the adapt stream"},
        {"severity", "5", "corruption severity of the adapt stream"},
        {"stream_size", num(b.stream_size), "samples per test stream"},
        {"batch_size", num(a.batch_size), "adaptation batch size"},
        {"alpha", num(a.alpha), "side fraction of the low-frequency block"},
        {"mask_ratio", num(a.mask_ratio), "fraction of masked amplitudes inside the block"},
        {"noise_gamma", num(a.noise_gamma), "noise mixing weight"},
        {"noise_std", num(a.noise_std), "std of the injected noise"},
        {"lr_norm", num(a.lr_norm), "SGD step size for the norm affines"},
        {"lr_projector", num(a.lr_projector), "SGD step size for the projector"},
        {"momentum", num(a.momentum), "SGD momentum"},
        {"reg_loss_weight", num(a.reg_loss_weight), "weight of the L1 regression consistency"},
        {"pixel_loss_weight", num(a.pixel_loss_weight), "weight of the per-pixel KL consistency"},
        {"view_mode", a.view_mode == ViewMode::separate ? "separate" : "combined", "separate or combined views"},
        {"selection", flag(a.selection_enabled), "keep only samples the strong branch is more confident on"},
        {"stop_gradient", flag(a.stop_gradient), "treat strong-branch predictions as constants"},
        {"low_freq_view", flag(a.use_low_freq_view), "use the low-frequency masking view"},
        {"noise_view", flag(a.use_noise_view), "use the noise injection view"},
        {"confidence_floor", a.confidence_floor ? num(*a.confidence_floor) : "none",
         "minimum strong-branch confidence for selection, or none"},
        {"benchmark_methods", join(b.methods, [](const std::string& s) { return s; }), "methods of the benchmark matrix"},
        {"benchmark_corruptions",
         join(b.corruptions, [](CorruptionKind k) { return std::string(corruption_name(k)); }),
         "corruption kinds of the benchmark matrix"},
        {"benchmark_severities", join(b.severities, [](int s) { return num(s); }), "severities of the benchmark matrix"},
        {"benchmark_seeds", join(b.seeds, [](std::uint64_t s) { return num(s); }), "stream seeds of the benchmark matrix"},
        {"lift_margin", num(b.lift_margin), "required accuracy lift of spa over none"},
        {"soft_margin", num(b.soft_margin), "tolerated reversal of a soft ordering"},
        {"iou_tolerance", num(b.iou_tolerance), "allowed IoU loss of spa against none"},
        {"rapsd_sets", "gaussian_noise:5,gaussian_blur:5,contrast:5,brightness:5",
         "corrupted sets compared by rapsd"},
        {"rapsd_images", "512", "clean images generated for rapsd"},
    };
}

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void bad_value(std::string_view key, const std::string& value, std::string_view expected) {
    throw std::invalid_argument("config key '" + std::string(key) + "': cannot parse '" + value + "' as " +
                                std::string(expected));
}

template <typename T>
T parse_number(std::string_view key, const std::string& value, std::string_view expected) {
    T out{};
    auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || end != value.data() + value.size()) bad_value(key, value, expected);
    return out;
}

}  // namespace

std::span<const ConfigKey> config_keys() {
    static const std::vector<ConfigKey> keys = build_keys();
    return keys;
}

Config::Config() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

Config Config::parse(std::istream& is, std::string_view origin) {
    Config cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        const std::string body = trim(std::string_view(line).substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(std::string(origin) + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        try {
            cfg.set(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(std::string(origin) + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

Config Config::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path.string());
    return parse(is, path.string());
}

void Config::set(std::string_view key, std::string_view value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
    it->second = std::string(value);
}

const std::string& Config::get(std::string_view key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
    return it->second;
}

double Config::get_double(std::string_view key) const {
    const double v = parse_number<double>(key, get(key), "a real number");
    if (!std::isfinite(v)) bad_value(key, get(key), "a finite real number");
    return v;
}

int Config::get_int(std::string_view key) const { return parse_number<int>(key, get(key), "an integer"); }

std::uint64_t Config::get_u64(std::string_view key) const {
    return parse_number<std::uint64_t>(key, get(key), "an unsigned integer");
}

bool Config::get_bool(std::string_view key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(key, v, "a boolean (true/false)");
}

std::vector<std::string> Config::get_list(std::string_view key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void Config::write(std::ostream& os) const {
    for (const auto& k : config_keys()) os << k.name << " = " << get(k.name) << '\n';
}

void Config::write(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write(os);
}

ModelConfig model_config(const Config& cfg) {
    ModelConfig m;
    m.in_channels = cfg.get_int("channels");
    m.height = m.width = cfg.get_int("image_size");
    return m;
}

TrainConfig train_config(const Config& cfg) {
    TrainConfig t;
    t.epochs = cfg.get_int("epochs");
    t.lr = cfg.get_double("train_lr");
    t.batch_size = cfg.get_int("train_batch_size");
    t.reg_loss_weight = cfg.get_double("train_reg_loss_weight");
    t.seed = cfg.get_u64("seed");
    if (t.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (t.batch_size < 1) throw std::invalid_argument("train_batch_size must be >= 1");
    return t;
}

AdaptConfig adapt_config(const Config& cfg) {
    AdaptConfig a;
    a.alpha = cfg.get_double("alpha");
    a.mask_ratio = cfg.get_double("mask_ratio");
    a.noise_gamma = cfg.get_double("noise_gamma");
    a.noise_std = cfg.get_double("noise_std");
    a.lr_norm = cfg.get_double("lr_norm");
    a.lr_projector = cfg.get_double("lr_projector");
    a.momentum = cfg.get_double("momentum");
    a.reg_loss_weight = cfg.get_double("reg_loss_weight");
    a.pixel_loss_weight = cfg.get_double("pixel_loss_weight");
    const std::string& mode = cfg.get("view_mode");
    if (mode == "separate") {
        a.view_mode = ViewMode::separate;
    } else if (mode == "combined") {
        a.view_mode = ViewMode::combined;
    } else {
        throw std::invalid_argument("view_mode must be 'separate' or 'combined', got '" + mode + "'");
    }
    a.selection_enabled = cfg.get_bool("selection");
    a.stop_gradient = cfg.get_bool("stop_gradient");
    a.use_low_freq_view = cfg.get_bool("low_freq_view");
    a.use_noise_view = cfg.get_bool("noise_view");
    if (cfg.get("confidence_floor") == "none") {
        a.confidence_floor.reset();
    } else {
        a.confidence_floor = cfg.get_double("confidence_floor");
    }
    a.batch_size = cfg.get_int("batch_size");
    a.seed = cfg.get_u64("seed");
    a.validate();
    return a;
}

BenchmarkSpec benchmark_spec(const Config& cfg) {
    BenchmarkSpec b;
    b.methods = cfg.get_list("benchmark_methods");
    b.corruptions.clear();
    for (const auto& c : cfg.get_list("benchmark_corruptions")) b.corruptions.push_back(parse_corruption(c));
    b.severities.clear();
    for (const auto& s : cfg.get_list("benchmark_severities")) {
        b.severities.push_back(parse_number<int>("benchmark_severities", s, "an integer"));
    }
    b.seeds.clear();
    for (const auto& s : cfg.get_list("benchmark_seeds")) {
        b.seeds.push_back(parse_number<std::uint64_t>("benchmark_seeds", s, "an unsigned integer"));
    }
    b.stream_size = cfg.get_int("stream_size");
    b.image_size = cfg.get_int("image_size");
    b.adapt = adapt_config(cfg);
    b.lift_margin = cfg.get_double("lift_margin");
    b.soft_margin = cfg.get_double("soft_margin");
    b.iou_tolerance = cfg.get_double("iou_tolerance");
    b.validate();
    return b;
}

}  // namespace spa
