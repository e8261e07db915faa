#pragma once

#include "json.hpp"
#include "ultraad/embeddings_io.hpp"

#include <filesystem>
#include <string>

namespace ultraad {

// Every knob with its default value. Sections: synth, model, train,
// experiment, eval, gradcheck, plus top-level "data" and "checkpoint" paths.
nlohmann::json default_config();

// Reads a JSON config and merges it over default_config().
nlohmann::json load_config(const std::filesystem::path& path);

// "train.epochs=50" style override. The value is parsed as JSON when
// possible and kept as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

nlohmann::json synth_to_json(const SynthConfig& cfg);
SynthConfig synth_from_json(const nlohmann::json& j);

}  // namespace ultraad
