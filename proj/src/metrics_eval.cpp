#include "ultraad/metrics_eval.hpp"

#include "ultraad/error.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace ultraad {
namespace {

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return idx;
}

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("metric: scores and labels differ in length");
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValidationError("metric: labels must be 0 or 1");
  }
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  const auto order = order_by_score(scores, false);
  double wins = 0.0, ties = 0.0, neg_below = 0.0, n_pos = 0.0, n_neg = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos : neg) += 1.0;
      ++j;
    }
    wins += pos * neg_below;
    ties += pos * neg;
    neg_below += neg;
    n_pos += pos;
    n_neg += neg;
    i = j;
  }
  if (n_pos == 0.0 || n_neg == 0.0) throw ValidationError("auroc: undefined without both classes");
  return (wins + 0.5 * ties) / (n_pos * n_neg);
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  const double n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  if (n_pos == 0.0) throw ValidationError("auprc: undefined without positives");
  const auto order = order_by_score(scores, true);
  double ap = 0.0;
  std::size_t tp = 0, fp = 0, tp_prev = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tp : fp) += 1;
      ++j;
    }
    const double recall_step = static_cast<double>(tp - tp_prev) / n_pos;
    ap += recall_step * (static_cast<double>(tp) / static_cast<double>(tp + fp));
    tp_prev = tp;
    i = j;
  }
  return ap;
}

double multiclass_auroc(const std::vector<RowVector>& probabilities, std::span<const int> labels) {
  if (probabilities.size() != labels.size()) throw ValidationError("multiclass_auroc: length mismatch");
  if (probabilities.empty()) throw ValidationError("multiclass_auroc: no samples");
  const auto C = probabilities.front().size();
  double total = 0.0;
  int used = 0;
  for (Eigen::Index c = 0; c < C; ++c) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.push_back(probabilities[i][c]);
      y.push_back(labels[i] == c ? 1 : 0);
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == static_cast<long>(y.size())) continue;
    total += auroc(s, y);
    ++used;
  }
  if (used == 0) throw ValidationError("multiclass_auroc: fewer than two classes present");
  return total / used;
}

Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::full;
  if (name == "no_domain_prompts") return Variant::no_domain_prompts;
  if (name == "no_cls_loss") return Variant::no_cls_loss;
  if (name == "no_pif") return Variant::no_pif;
  throw ValidationError("unknown ablation variant '" + name + "'");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_domain_prompts: return "no_domain_prompts";
    case Variant::no_cls_loss: return "no_cls_loss";
    case Variant::no_pif: return "no_pif";
  }
  return "full";
}

EvalScores collect_scores(const TrainedModel& model, const Dataset& query) {
  EvalScores out;
  for (const auto& b : query.bundles) {
    if (!b.label) throw ValidationError("evaluate: unlabeled query bundle " + b.image_id);
    Inference inf = infer(b, model);
    out.image_ids.push_back(b.image_id);
    out.labels.push_back(*b.label);
    out.detection.push_back(inf.detection_score);
    out.probabilities.push_back(inf.class_probabilities);
    if (b.gt_mask) {
      ++out.images_with_masks;
      const Matrix& map = inf.map.combined;
      out.pixel_scores.insert(out.pixel_scores.end(), map.data(), map.data() + map.size());
      out.pixel_labels.insert(out.pixel_labels.end(), b.gt_mask->begin(), b.gt_mask->end());
    }
  }
  return out;
}

EvalMetrics compute_metrics(const EvalScores& scores, const EvalOptions& opts) {
  EvalMetrics m;
  if (opts.classification_metrics) {
    std::vector<int> binary;
    for (int l : scores.labels) binary.push_back(l != 0 ? 1 : 0);
    m.image_auroc_binary = auroc(scores.detection, binary);
    m.image_auroc_multiclass = multiclass_auroc(scores.probabilities, scores.labels);
  }
  if (scores.images_with_masks > 0 && std::count(scores.pixel_labels.begin(), scores.pixel_labels.end(), 1) > 0) {
    m.pixel_auroc = auroc(scores.pixel_scores, scores.pixel_labels);
    m.pixel_auprc = auprc(scores.pixel_scores, scores.pixel_labels);
  }
  return m;
}

EvalReport evaluate(const TrainedModel& model, const Dataset& query, const EvalOptions& opts) {
  if (query.bundles.empty()) throw ValidationError("evaluate: empty query set");
  EvalReport r;
  const EvalScores scores = collect_scores(model, query);
  r.metrics = compute_metrics(scores, opts);
  r.pixel_metrics_skipped = !r.metrics.pixel_auroc.has_value();
  r.dataset = query.domain_tag;
  r.fingerprint = config_fingerprint({{"model", model.config.to_json()}, {"train", model.train_config}});
  return r;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"seeds", seeds},
          {"shots", shots},
          {"model", model.to_json()},
          {"train", train.to_json()},
          {"classification_metrics", classification_metrics},
          {"variant", variant}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.seeds = j.value("seeds", c.seeds);
  c.shots = j.value("shots", c.shots);
  c.model = ModelConfig::from_json(j.value("model", nlohmann::json::object()));
  c.train = TrainConfig::from_json(j.value("train", nlohmann::json::object()));
  c.classification_metrics = j.value("classification_metrics", c.classification_metrics);
  c.variant = j.value("variant", c.variant);
  return c;
}

namespace {

std::optional<double> mean_of(const std::vector<SeedResult>& rows, std::optional<double> EvalMetrics::*field) {
  double total = 0.0;
  for (const auto& r : rows) {
    if (!(r.metrics.*field)) return std::nullopt;
    total += *(r.metrics.*field);
  }
  if (rows.empty()) return std::nullopt;
  return total / static_cast<double>(rows.size());
}

}  // namespace

std::vector<EvalReport> run_experiment(const Dataset& dataset, const PromptSet& prompts,
                                       const ExperimentConfig& cfg) {
  if (cfg.seeds.empty() || cfg.shots.empty()) throw ValidationError("experiment: need seeds and shots");
  std::vector<EvalReport> reports;
  const std::string fingerprint = config_fingerprint(cfg.to_json());
  for (int shots : cfg.shots) {
    EvalReport agg;
    agg.shots = shots;
    agg.variant = cfg.variant;
    agg.dataset = dataset.domain_tag;
    agg.fingerprint = fingerprint;
    for (std::uint64_t seed : cfg.seeds) {
      auto [support, query] = build_fewshot_split(dataset, shots, seed);
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      TrainedModel model = tc.epochs == 0 ? init_model(support, prompts, cfg.model, seed)
                                          : train(support, prompts, cfg.model, tc).model;
      if (tc.epochs == 0) model.train_config = tc.to_json();
      EvalReport r = evaluate(model, query, {cfg.classification_metrics});
      agg.pixel_metrics_skipped = agg.pixel_metrics_skipped || r.pixel_metrics_skipped;
      agg.per_seed.push_back({seed, r.metrics});
    }
    agg.metrics.image_auroc_binary = mean_of(agg.per_seed, &EvalMetrics::image_auroc_binary);
    agg.metrics.image_auroc_multiclass = mean_of(agg.per_seed, &EvalMetrics::image_auroc_multiclass);
    agg.metrics.pixel_auroc = mean_of(agg.per_seed, &EvalMetrics::pixel_auroc);
    agg.metrics.pixel_auprc = mean_of(agg.per_seed, &EvalMetrics::pixel_auprc);
    reports.push_back(std::move(agg));
  }
  return reports;
}

void apply_variant(Variant variant, PromptSet& prompts, ExperimentConfig& cfg) {
  cfg.variant = variant_name(variant);
  switch (variant) {
    case Variant::full:
      break;
    case Variant::no_domain_prompts:
      if (prompts.agnostic_prompts.size() == 0) {
        throw ValidationError("no_domain_prompts: dataset provides no class-agnostic prompts");
      }
      prompts.class_prompts = prompts.agnostic_prompts;
      break;
    case Variant::no_cls_loss:
      cfg.train.lambda_cls = 0.0;
      cfg.classification_metrics = false;
      break;
    case Variant::no_pif:
      cfg.model.use_fusion = false;
      break;
  }
}

std::vector<EvalReport> run_ablation(const Dataset& dataset, const PromptSet& prompts, const ExperimentConfig& cfg,
                                     Variant variant) {
  PromptSet p = prompts;
  ExperimentConfig c = cfg;
  apply_variant(variant, p, c);
  return run_experiment(dataset, p, c);
}

std::string config_fingerprint(const nlohmann::json& config) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

nlohmann::json metrics_json(const EvalMetrics& m) {
  nlohmann::json j = nlohmann::json::object();
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("image_auroc_binary", m.image_auroc_binary);
  put("image_auroc_multiclass", m.image_auroc_multiclass);
  put("pixel_auroc", m.pixel_auroc);
  put("pixel_auprc", m.pixel_auprc);
  return j;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : per_seed) seeds.push_back({{"seed", s.seed}, {"metrics", metrics_json(s.metrics)}});
  return {{"metrics", metrics_json(metrics)},
          {"per_seed", seeds},
          {"shots", shots},
          {"variant", variant},
          {"dataset", dataset},
          {"fingerprint", fingerprint},
          {"pixel_metrics_skipped", pixel_metrics_skipped}};
}

void write_report_json(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(r.to_json());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << j.dump(2) << '\n';
}

void write_report_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "method,shots,dataset,metric,value\n" << std::setprecision(17);
  for (const auto& r : reports) {
    const std::string method = r.variant == "full" ? "ultraad" : "ultraad-" + r.variant;
    auto row = [&](const char* metric, const std::optional<double>& v) {
      if (v) os << method << ',' << r.shots << ',' << r.dataset << ',' << metric << ',' << *v << '\n';
    };
    row("image_auroc_binary", r.metrics.image_auroc_binary);
    row("image_auroc_multiclass", r.metrics.image_auroc_multiclass);
    row("pixel_auroc", r.metrics.pixel_auroc);
    row("pixel_auprc", r.metrics.pixel_auprc);
  }
}

}  // namespace ultraad
