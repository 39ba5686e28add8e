#pragma once

#include <filesystem>

namespace spa::testing {

/// Directory holding the default dataset.bin and source.ckpt.
const std::filesystem::path& fixture_dir();

}  // namespace spa::testing
