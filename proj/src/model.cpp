#include "ultraad/model.hpp"

#include "ultraad/error.hpp"
#include "ultraad/framing.hpp"

#include <random>

namespace ultraad {
namespace {

constexpr std::string_view kCheckpointMagic = "UTM1";

const char* score_source_name(ImageScoreSource s) { return s == ImageScoreSource::memory ? "memory" : "prompt"; }

std::vector<std::pair<std::string, const Matrix*>> frozen_tensors(const TrainedModel& m, Matrix& normal,
                                                                  Matrix& abnormal) {
  normal = m.prompt.normal;
  abnormal = m.prompt.abnormal;
  return {{"prompt.normal", &normal},
          {"prompt.abnormal", &abnormal},
          {"memory.prompts", &m.bank.prompts},
          {"memory.labels", &m.bank.labels}};
}

}  // namespace

nlohmann::json ModelConfig::to_json() const {
  return {{"tau", tau},
          {"heads", heads},
          {"attention_scale", attention_scale},
          {"attention_out_proj", attention_out_proj},
          {"attention_residual", attention_residual},
          {"use_fusion", use_fusion},
          {"alpha", classifier.alpha},
          {"beta", classifier.beta},
          {"image_score", score_source_name(image_score)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.tau = j.value("tau", c.tau);
  c.heads = j.value("heads", c.heads);
  c.attention_scale = j.value("attention_scale", c.attention_scale);
  c.attention_out_proj = j.value("attention_out_proj", c.attention_out_proj);
  c.attention_residual = j.value("attention_residual", c.attention_residual);
  c.use_fusion = j.value("use_fusion", c.use_fusion);
  c.classifier.alpha = j.value("alpha", c.classifier.alpha);
  c.classifier.beta = j.value("beta", c.classifier.beta);
  const std::string source = j.value("image_score", std::string("memory"));
  if (source == "memory") {
    c.image_score = ImageScoreSource::memory;
  } else if (source == "prompt") {
    c.image_score = ImageScoreSource::prompt;
  } else {
    throw ValidationError("model config: unknown image_score source '" + source + "'");
  }
  if (!(c.tau > 0.0)) throw ValidationError("model config: tau must be positive");
  return c;
}

TrainedModel init_model(const Dataset& support, const PromptSet& prompts, const ModelConfig& config,
                        std::uint64_t seed) {
  if (support.bundles.empty()) throw ValidationError("init_model: empty support set");
  if (!(config.tau > 0.0)) throw ValidationError("init_model: tau must be positive");
  const auto& first = support.bundles.front();
  const int dim = first.dim;
  if (prompts.normal.size() != dim) throw ValidationError("init_model: prompt dim does not match embeddings");

  std::mt19937_64 rng(seed);
  TrainedModel m;
  m.config = config;
  m.mini_net = MiniNetParams::identity_init(dim, rng);
  m.prompt = PromptState::init(prompts.normal, prompts.abnormal);
  m.fusion = FusionParams::init(dim, config.heads, rng);
  m.fusion.scale_scores = config.attention_scale;
  m.fusion.out_proj = config.attention_out_proj;
  m.fusion.residual = config.attention_residual;
  if (!m.fusion.residual) m.fusion.w_o = Matrix::Identity(dim, dim);
  m.adapters = AdapterParams::identity(static_cast<int>(first.num_layers()), dim);
  m.bank = build_memory(support, prompts.class_prompts);
  for (const auto& b : support.bundles) m.support_ids.push_back(b.image_id);
  return m;
}

std::vector<ParamRef> trainable_parameters(TrainedModel& m) {
  std::vector<ParamRef> out{{"mini_net.w1", &m.mini_net.w1},  {"mini_net.b1", &m.mini_net.b1},
                            {"mini_net.w2", &m.mini_net.w2},  {"mini_net.b2", &m.mini_net.b2},
                            {"prompt.u", &m.prompt.u},        {"prompt.cond_w", &m.prompt.cond_w},
                            {"prompt.cond_b", &m.prompt.cond_b}, {"fusion.w_q", &m.fusion.w_q},
                            {"fusion.w_k", &m.fusion.w_k},    {"fusion.w_v", &m.fusion.w_v},
                            {"fusion.w_o", &m.fusion.w_o}};
  for (std::size_t l = 0; l < m.adapters.weights.size(); ++l) {
    out.push_back({"adapter." + std::to_string(l) + ".weight", &m.adapters.weights[l]});
    out.push_back({"adapter." + std::to_string(l) + ".bias", &m.adapters.biases[l]});
  }
  out.push_back({"memory.features", &m.bank.features});
  return out;
}

ModelVars bind_model(ad::Tape& tape, const TrainedModel& model) {
  ModelVars v;
  for (const auto& ref : trainable_parameters(const_cast<TrainedModel&>(model))) {
    ad::Var var = tape.parameter(*ref.value);
    v.vars.emplace(ref.name, var);
    v.trainable.push_back(var);
  }
  Matrix base(2, model.dim());
  base.row(0) = model.prompt.normal;
  base.row(1) = model.prompt.abnormal;
  v.vars.emplace("prompt.base", tape.constant(std::move(base)));
  v.vars.emplace("memory.prompts", tape.constant(model.bank.prompts));
  return v;
}

ForwardPass run_forward(ad::Tape& tape, const ModelVars& v, const TrainedModel& model,
                        const EmbeddingBundle& bundle) {
  if (bundle.dim != model.dim()) throw ValidationError("forward: bundle D does not match model");
  if (static_cast<int>(bundle.num_layers()) != model.num_layers()) {
    throw ValidationError("forward: bundle layer count does not match model adapters");
  }
  const double tau = model.config.tau;
  ForwardPass pass;
  ad::Var f = tape.constant(Matrix(normalized(bundle.class_token_vector())));
  pass.f_prime = graph::mini_net(f, v.at("mini_net.w1"), v.at("mini_net.b1"), v.at("mini_net.w2"),
                                 v.at("mini_net.b2"));
  pass.class_scores = graph::classify(pass.f_prime, v.at("memory.features"), v.at("memory.prompts"),
                                      model.bank.labels, model.config.classifier);
  ad::Var conditioned = graph::condition_prompts(v.at("prompt.base"), v.at("prompt.u"), v.at("prompt.cond_w"),
                                                 v.at("prompt.cond_b"), pass.f_prime);
  pass.prototypes = graph::ensemble_prototypes(conditioned, model.bank.prompts);

  for (int l = 0; l < model.num_layers(); ++l) {
    const std::string key = "adapter." + std::to_string(l);
    ad::Var patches = tape.constant(normalized_rows(bundle.patch_matrix(static_cast<std::size_t>(l))));
    ad::Var adapted = graph::adapter_project(patches, v.at(key + ".weight"), v.at(key + ".bias"));
    ad::Var y1 = graph::score_map(pass.prototypes, adapted, tau);
    pass.y1.push_back(y1);
    if (model.config.use_fusion) {
      ad::Var fused = graph::cross_attention_fuse(pass.prototypes, patches, v.at("fusion.w_q"), v.at("fusion.w_k"),
                                                  v.at("fusion.w_v"), v.at("fusion.w_o"), model.fusion);
      pass.y2.push_back(graph::score_map(fused, patches, tau));
    } else {
      pass.y2.push_back(y1);
    }
  }
  pass.image_score = graph::score_map(pass.prototypes, f, tau);
  return pass;
}

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path) {
  std::vector<framing::NamedTensor> tensors;
  for (const auto& ref : trainable_parameters(const_cast<TrainedModel&>(model))) {
    tensors.push_back({ref.name, *ref.value});
  }
  Matrix normal, abnormal;
  for (const auto& [name, value] : frozen_tensors(model, normal, abnormal)) tensors.push_back({name, *value});
  nlohmann::json meta{{"format", "UTM1"},
                      {"dim", model.dim()},
                      {"classes", model.num_classes()},
                      {"layers", model.num_layers()},
                      {"model_config", model.config.to_json()},
                      {"train_config", model.train_config},
                      {"support_ids", model.support_ids}};
  framing::write_tensor_file(path, kCheckpointMagic, meta, tensors, framing::DType::f64);
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
  auto file = framing::read_tensor_file(path, kCheckpointMagic);
  TrainedModel m;
  try {
    m.config = ModelConfig::from_json(file.meta.at("model_config"));
    m.train_config = file.meta.value("train_config", nlohmann::json::object());
    m.support_ids = file.meta.value("support_ids", std::vector<std::string>{});
    const int layers = file.meta.at("layers").get<int>();
    m.adapters.weights.resize(static_cast<std::size_t>(layers));
    m.adapters.biases.resize(static_cast<std::size_t>(layers));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
  }
  for (auto& ref : trainable_parameters(m)) *ref.value = file.at(ref.name);
  m.prompt.normal = file.at("prompt.normal").row(0);
  m.prompt.abnormal = file.at("prompt.abnormal").row(0);
  m.bank.prompts = file.at("memory.prompts");
  m.bank.labels = file.at("memory.labels");
  m.bank.validate();
  m.fusion.heads = m.config.heads;
  m.fusion.scale_scores = m.config.attention_scale;
  m.fusion.out_proj = m.config.attention_out_proj;
  m.fusion.residual = m.config.attention_residual;
  for (const auto& ref : trainable_parameters(m)) {
    if (!ref.value->allFinite()) throw FormatError("checkpoint: non-finite values in " + ref.name);
  }
  return m;
}

}  // namespace ultraad
