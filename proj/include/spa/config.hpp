#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spa/adapt.hpp"
#include "spa/data.hpp"
#include "spa/eval.hpp"

namespace spa {

struct ConfigKey {
    std::string name;
    std::string default_value;
    std::string doc;
};

/// Every accepted key with its default, in output order. Defaults mirror the
/// default-constructed config structs.
std::span<const ConfigKey> config_keys();

/// Flat `key = value` document. Lines are trimmed, `#` starts a comment,
/// and keys outside config_keys() are rejected.
class Config {
public:
    Config();

    static Config parse(std::istream& is, std::string_view origin = "<config>");
    static Config load(const std::filesystem::path& path);

    void set(std::string_view key, std::string_view value);
    const std::string& get(std::string_view key) const;

    double get_double(std::string_view key) const;
    int get_int(std::string_view key) const;
    std::uint64_t get_u64(std::string_view key) const;
    bool get_bool(std::string_view key) const;
    /// Comma-separated list, empty items dropped.
    std::vector<std::string> get_list(std::string_view key) const;

    /// All keys, defaults included, in config_keys() order.
    void write(std::ostream& os) const;
    void write(const std::filesystem::path& path) const;

private:
    std::map<std::string, std::string, std::less<>> values_;
};

ModelConfig model_config(const Config& cfg);
TrainConfig train_config(const Config& cfg);
AdaptConfig adapt_config(const Config& cfg);
BenchmarkSpec benchmark_spec(const Config& cfg);

}  // namespace spa
