#include "spa/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "spa/augment.hpp"
#include "spa/config.hpp"
#include "spa/eval.hpp"

namespace spa {
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flag values collected by CLI11; each maps onto one config key.
struct Options {
    std::string config_path;
    std::string out_dir = ".";
    std::vector<std::string> overrides;
    std::vector<std::pair<std::string, std::string>> keyed;  // filled after parsing
};

class Command {
public:
    Command(CLI::App& app, std::string name, std::string help) : sub_(app.add_subcommand(std::move(name), std::move(help))) {
        sub_->add_option("--config", opts_.config_path, "key = value config file");
        sub_->add_option("--out-dir", opts_.out_dir, "output directory")->capture_default_str();
        sub_->add_option("--set", opts_.overrides, "override a config key, key=value (repeatable)");
        option("--seed", "seed", "master seed");
    }

    // Registers `--flag VALUE` writing config key `key`.
    void option(const std::string& flag, const std::string& key, const std::string& help) {
        auto slot = std::make_shared<std::string>();
        sub_->add_option(flag, *slot, help + " [" + key + "]");
        values_.emplace_back(key, slot);
    }

    // Registers a switch writing `value` into config key `key`.
    void toggle(const std::string& flag, const std::string& key, const std::string& value, const std::string& help) {
        auto slot = std::make_shared<bool>(false);
        sub_->add_flag(flag, *slot, help);
        toggles_.push_back({key, value, slot});
    }

    bool parsed() const { return sub_->parsed(); }
    const std::string& out_dir() const { return opts_.out_dir; }

    Config config() const {
        Config cfg;
        try {
            if (!opts_.config_path.empty()) cfg = Config::load(opts_.config_path);
            for (const auto& kv : opts_.overrides) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
                cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
            }
            for (const auto& [key, slot] : values_) {
                if (!slot->empty()) cfg.set(key, *slot);
            }
            for (const auto& t : toggles_) {
                if (*t.slot) cfg.set(t.key, t.value);
            }
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }
        return cfg;
    }

private:
    struct Toggle {
        std::string key;
        std::string value;
        std::shared_ptr<bool> slot;
    };
    CLI::App* sub_;
    Options opts_;
    std::vector<std::pair<std::string, std::shared_ptr<std::string>>> values_;
    std::vector<Toggle> toggles_;
};

fs::path prepare_out_dir(const std::string& dir) {
    fs::path p(dir);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

template <typename F>
void write_with(const fs::path& path, F f) {
    std::ostringstream os;
    f(os);
    write_text(path, os.str());
}

void finish(const Config& cfg, const fs::path& out) { cfg.write(out / "config.txt"); }

int cmd_gen_data(const Config& cfg, const fs::path& out, std::ostream& log) {
    const int n = cfg.get_int("dataset_size");
    const int size = cfg.get_int("image_size");
    const int channels = cfg.get_int("channels");
    const std::uint64_t seed = cfg.get_u64("seed");
    Rng rng(derive_seed(seed, "gen-data"));
    const auto records = gen_dataset(n, size, rng, channels);
    save_dataset(out / "dataset.bin", records);
    std::array<int, kNumShapeClasses> counts{};
    for (const auto& r : records) ++counts[r.class_label];
    write_with(out / "manifest.txt", [&](std::ostream& os) {
        os << "file = dataset.bin\nrecords = " << n << "\nimage_size = " << size << "\nchannels = " << channels
           << "\nseed = " << seed << "\nclass_counts = " << counts[0] << ',' << counts[1] << ',' << counts[2] << '\n';
    });
    finish(cfg, out);
    log << "wrote " << n << " records to " << (out / "dataset.bin").string() << '\n';
    return kExitOk;
}

int cmd_train_source(const Config& cfg, const fs::path& out, std::ostream& log) {
    const fs::path data_path = cfg.get("dataset");
    if (!fs::exists(data_path)) throw std::runtime_error("dataset not found: " + data_path.string());
    const auto data = load_dataset(data_path);
    std::ostringstream epochs;
    epochs << "epoch,loss\n" << std::setprecision(17);
    const ModelState state = train_source(data, train_config(cfg), [&](const EpochLog& e) {
        epochs << e.epoch << ',' << e.loss << '\n';
        log << "epoch " << e.epoch << " loss " << e.loss << '\n';
    });
    save_checkpoint(state, out / "source.ckpt");
    write_text(out / "train_log.csv", epochs.str());
    finish(cfg, out);
    log << "wrote " << (out / "source.ckpt").string() << '\n';
    return kExitOk;
}

int cmd_adapt(const Config& cfg, const fs::path& out, std::ostream& log) {
    const ModelState model = load_checkpoint(cfg.get("checkpoint"));
    const Method method = parse_method(cfg.get("method"));
    const CorruptionSpec cs{parse_corruption(cfg.get("corruption")), cfg.get_int("severity")};
    const AdaptConfig acfg = adapt_config(cfg);
    const auto stream = make_stream(cs, acfg.seed, cfg.get_int("stream_size"), cfg.get_int("image_size"));
    const StreamResult res = run_stream(model, stream, acfg, method);
    res.write_csv(out / "stream.csv");
    write_with(out / "summary.txt", [&](std::ostream& os) {
        os << std::setprecision(17) << "method = " << method_name(method) << "\ncorruption = " << corruption_name(cs.kind)
           << "\nseverity = " << cs.severity << "\naccuracy = " << res.accuracy << "\nmae_px = " << res.mae_px
           << "\niou = " << res.iou << "\nselected_frac_mean = " << res.selected_frac_mean
           << "\nrolled_back_steps = " << res.rolled_back_steps << '\n';
    });
    finish(cfg, out);
    log << method_name(method) << ' ' << corruption_name(cs.kind) << ':' << cs.severity << " accuracy " << res.accuracy
        << " mae_px " << res.mae_px << " iou " << res.iou << " selected " << res.selected_frac_mean << '\n';
    return kExitOk;
}

int cmd_rapsd(const Config& cfg, const fs::path& out, std::ostream& log) {
    const std::uint64_t seed = cfg.get_u64("seed");
    Rng rng(derive_seed(seed, "rapsd"));
    const auto records = gen_dataset(cfg.get_int("rapsd_images"), cfg.get_int("image_size"), rng);
    ImageSet clean{"clean", {}};
    for (const auto& r : records) clean.images.push_back(r.image);

    std::vector<ImageSet> corrupted;
    for (const auto& text : cfg.get_list("rapsd_sets")) {
        const CorruptionSpec cs = parse_corruption_spec(text);
        ImageSet set{std::string(corruption_name(cs.kind)) + ":" + std::to_string(cs.severity), {}};
        for (const auto& r : corrupt_dataset(records, cs, derive_seed(seed, "rapsd-corrupt"))) set.images.push_back(r.image);
        corrupted.push_back(std::move(set));
    }
    const AdaptConfig a = adapt_config(cfg);
    AugmentSpec spec{a.alpha, a.mask_ratio, a.noise_gamma, a.noise_std, derive_seed(seed, "rapsd-augment")};
    const std::vector<AugmentProfileSpec> augments = {{"v_l", AugmentKind::low_freq, spec},
                                                      {"v_h", AugmentKind::noise, spec}};
    const RapsdReport rep = rapsd_report(clean, corrupted, augments);
    write_with(out / "rapsd.csv", [&](std::ostream& os) { rep.write_csv(os); });
    finish(cfg, out);

    const std::size_t rings = rep.profiles.front().profile.size();
    const auto [ht0, ht1] = top_quartile_rings(rings);
    const auto [lb0, lb1] = bottom_quartile_rings(rings);
    const RadialProfile& base = rep.profiles.front().profile;
    log << std::fixed << std::setprecision(4) << "set  top-quartile ratio  bottom-quartile ratio\n";
    for (const auto& p : rep.profiles) {
        log << p.name << "  " << mean_over_rings(p.profile, ht0, ht1) / mean_over_rings(base, ht0, ht1) << "  "
            << mean_over_rings(p.profile, lb0, lb1) / mean_over_rings(base, lb0, lb1) << '\n';
    }
    return kExitOk;
}

int cmd_augment_preview(const Config& cfg, const fs::path& out, const std::string& input, std::ostream& log) {
    const std::uint64_t seed = cfg.get_u64("seed");
    Image img;
    if (input.empty()) {
        Rng gen(derive_seed(seed, "preview-image"));
        img = gen_dataset(1, cfg.get_int("image_size"), gen).front().image;
    } else {
        img = image_from_grid(read_pgm(input));
    }
    const double alpha = cfg.get_double("alpha");
    const double m = cfg.get_double("mask_ratio");
    const double gamma = cfg.get_double("noise_gamma");
    AugmentSpec{alpha, m, gamma, cfg.get_double("noise_std"), seed}.validate();
    Rng rng(derive_seed(seed, "preview"));
    const Image v_l = augment_low_freq(img, alpha, m, rng);
    const Image v_h = augment_noise(img, gamma, rng, cfg.get_double("noise_std"));
    write_pgm(out / "original.pgm", img.channel(0));
    write_pgm(out / "v_l.pgm", v_l.channel(0));
    write_pgm(out / "v_h.pgm", v_h.channel(0));
    finish(cfg, out);
    log << "wrote original.pgm, v_l.pgm, v_h.pgm to " << out.string() << '\n';
    return kExitOk;
}

int cmd_benchmark(const Config& cfg, const fs::path& out, std::ostream& log) {
    const ModelState model = load_checkpoint(cfg.get("checkpoint"));
    const BenchmarkSpec spec = benchmark_spec(cfg);
    const BenchmarkResult res = benchmark(model, spec, [&](const MetricsRow& r) {
        log << r.method << ' ' << corruption_name(r.corruption.kind) << ':' << r.corruption.severity << " seed " << r.seed;
        if (r.failed) {
            log << " FAILED: " << r.error << '\n';
        } else {
            log << " accuracy " << r.accuracy << " mae_px " << r.mae_px << " iou " << r.iou << '\n';
        }
    });
    write_with(out / "benchmark.csv", [&](std::ostream& os) { res.write_csv(os); });
    write_with(out / "report.txt", [&](std::ostream& os) { res.write_report(os); });
    finish(cfg, out);
    res.write_report(log);
    return res.hard_failure() ? kExitOrdering : kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Test-time adaptation with Fourier-view consistency on synthetic shapes", "spa"};
    app.require_subcommand(1);

    Command gen(app, "gen-data", "generate a shapes dataset");
    gen.option("--n", "dataset_size", "number of records");
    gen.option("--image-size", "image_size", "image side");

    Command train(app, "train-source", "train the source model");
    train.option("--dataset", "dataset", "dataset file");
    train.option("--epochs", "epochs", "training epochs");

    Command adapt(app, "adapt", "adapt on one corrupted stream");
    adapt.option("--checkpoint", "checkpoint", "source checkpoint");
    adapt.option("--method", "method", "none, spa, spa_i or entropy");
    adapt.option("--corruption", "corruption", "corruption kind");
    adapt.option("--severity", "severity", "corruption severity");
    adapt.option("--stream-size", "stream_size", "stream length");
    adapt.option("--batch-size", "batch_size", "batch size");
    adapt.toggle("--no-stop-gradient", "stop_gradient", "false", "let gradients flow into the strong branch");
    adapt.toggle("--no-selection", "selection", "false", "use every sample");
    adapt.toggle("--no-low-freq", "low_freq_view", "false", "drop the low-frequency view");
    adapt.toggle("--no-noise", "noise_view", "false", "drop the noise view");
    adapt.toggle("--combined-views", "view_mode", "combined", "one view with both augmentations");

    Command rapsd(app, "rapsd", "mean RAPSD of clean, corrupted and augmented images");
    rapsd.option("--sets", "rapsd_sets", "comma-separated kind:severity list");
    rapsd.option("--images", "rapsd_images", "clean images");

    Command preview(app, "augment-preview", "write an image and its two views as PGM");
    std::string input;
    preview.option("--alpha", "alpha", "block side fraction");
    preview.option("--m", "mask_ratio", "mask ratio");
    preview.option("--gamma", "noise_gamma", "noise weight");
    app.get_subcommand("augment-preview")->add_option("--input", input, "PGM image; a generated shape if omitted");

    Command bench(app, "benchmark", "run the method x corruption x seed matrix");
    bench.option("--checkpoint", "checkpoint", "source checkpoint");
    bench.option("--methods", "benchmark_methods", "comma-separated methods");
    bench.option("--corruptions", "benchmark_corruptions", "comma-separated corruption kinds");
    bench.option("--severities", "benchmark_severities", "comma-separated severities");
    bench.option("--seeds", "benchmark_seeds", "comma-separated stream seeds");
    bench.option("--stream-size", "stream_size", "stream length");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        for (const Command* c : {&gen, &train, &adapt, &rapsd, &preview, &bench}) {
            if (!c->parsed()) continue;
            const Config cfg = c->config();
            const fs::path dir = prepare_out_dir(c->out_dir());
            if (c == &gen) return cmd_gen_data(cfg, dir, out);
            if (c == &train) return cmd_train_source(cfg, dir, out);
            if (c == &adapt) return cmd_adapt(cfg, dir, out);
            if (c == &rapsd) return cmd_rapsd(cfg, dir, out);
            if (c == &preview) return cmd_augment_preview(cfg, dir, input, out);
            return cmd_benchmark(cfg, dir, out);
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace spa
