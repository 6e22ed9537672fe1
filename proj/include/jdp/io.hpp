#pragma once

#include "jdp/dynpred.hpp"
#include "jdp/jointfit.hpp"
#include "jdp/simgen.hpp"
#include "jdp/tuner.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace jdp::io {

using json = nlohmann::ordered_json;

inline constexpr const char* toolkit_version = "0.1.0";

/// Parses a JSON file; syntax errors become ParseError with line and column.
json read_json_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file, then renames over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& content);

/// 16 hex digits of FNV-1a over the compact dump.
std::string config_digest(const json& config);

struct ScenarioFile {
    simgen::ScenarioConfig config;
    std::uint64_t seed = 1;
    simgen::GeneratorMode mode = simgen::GeneratorMode::closed_form;
};

/// Keys: optional `scenario` (1 or 2) selects the preset base; then any of the
/// LongitudinalParams / EventParams field names, `n`, `t_landmark`,
/// `u_horizon`, `seed`, `generator_mode`. Unknown keys are rejected.
ScenarioFile scenario_from_json(const json& j);
json to_json(const ScenarioFile& s);

/// Keys mirror TuningConfig; `mcmc` and `model` are nested objects.
tuner::TuningConfig tuning_config_from_json(const json& j);
json to_json(const tuner::TuningConfig& c);

json to_json(const tuner::TuningReport& r);
json to_json(const tuner::TuningEntry& e);

/// Spec, spline basis, column names and the flattened draw matrix.
json to_json(const joint::JointModelFit& fit);
joint::JointModelFit joint_fit_from_json(const json& j);

json to_json(const dynpred::PredictionResult& r, const std::string& subject_id, double t, double u);

} // namespace jdp::io
