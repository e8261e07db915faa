#include "ultraad/config.hpp"

#include "ultraad/error.hpp"
#include "ultraad/metrics_eval.hpp"
#include "ultraad/model.hpp"
#include "ultraad/training.hpp"

#include <fstream>

namespace ultraad {

nlohmann::json synth_to_json(const SynthConfig& c) {
  return {{"dim", c.dim},
          {"num_classes", c.num_classes},
          {"grid_h", c.grid_h},
          {"grid_w", c.grid_w},
          {"height", c.height},
          {"width", c.width},
          {"num_layers", c.num_layers},
          {"samples_per_class", c.samples_per_class},
          {"blob_radius_min", c.blob_radius_min},
          {"blob_radius_max", c.blob_radius_max},
          {"signal_strength", c.signal_strength},
          {"noise_sigma", c.noise_sigma},
          {"prompt_noise", c.prompt_noise},
          {"seed", c.seed}};
}

SynthConfig synth_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.dim = j.value("dim", c.dim);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.grid_h = j.value("grid_h", c.grid_h);
  c.grid_w = j.value("grid_w", c.grid_w);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
  c.blob_radius_min = j.value("blob_radius_min", c.blob_radius_min);
  c.blob_radius_max = j.value("blob_radius_max", c.blob_radius_max);
  c.signal_strength = j.value("signal_strength", c.signal_strength);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.prompt_noise = j.value("prompt_noise", c.prompt_noise);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json default_config() {
  ExperimentConfig exp;
  return {{"data", ""},
          {"checkpoint", ""},
          {"synth", synth_to_json(SynthConfig{})},
          {"model", ModelConfig{}.to_json()},
          {"train", TrainConfig{}.to_json()},
          {"experiment",
           {{"seeds", exp.seeds},
            {"shots", exp.shots},
            {"variants", {"full", "no_domain_prompts", "no_cls_loss", "no_pif"}}}},
          {"eval", {{"export_maps", true}}},
          {"gradcheck", {{"threshold", 1e-4}, {"epsilon", 1e-4}, {"coordinates", 20}, {"trained_steps", 0}}}};
}

nlohmann::json load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config: " + path.string());
  nlohmann::json user;
  try {
    user = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad config " + path.string() + ": " + e.what());
  }
  nlohmann::json merged = default_config();
  merged.merge_patch(user);
  return merged;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("override must look like key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("override: empty key segment in '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace ultraad
