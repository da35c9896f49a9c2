#pragma once

#include <string>

#include "hyvi/experiment.hpp"

namespace hyvi::cli {

/// Scaled-down experiment pipelines: "wave", "exp1-small" or "exp2-small".
/// `overrides` is applied on top of the pipeline defaults; `seed_override` replaces the seed list.
/// Completed runs with a matching config hash are loaded instead of retrained.
/// Returns an exit code; failed runs are reported and the remaining ones still evaluated.
int reproduce(const std::string& which, const Json& overrides, const std::optional<std::uint64_t>& seed_override,
              const std::filesystem::path& out_dir);

/// Default settings of a pipeline, as a config document.
Json reproduce_defaults(const std::string& which);

}  // namespace hyvi::cli
