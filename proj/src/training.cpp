#include "ultraad/training.hpp"

#include "ultraad/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace ultraad {

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("train config: epochs must be non-negative");
  if (learning_rate < 0.0) throw ValidationError("train config: learning_rate must be non-negative");
  if (focal_gamma < 0.0) throw ValidationError("train config: focal_gamma must be non-negative");
  if (focal_alpha < 0.0 || focal_alpha > 1.0) throw ValidationError("train config: focal_alpha must be in [0,1]");
  if (lambda_cls < 0.0) throw ValidationError("train config: lambda_cls must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},         {"learning_rate", learning_rate}, {"focal_gamma", focal_gamma},
          {"focal_alpha", focal_alpha}, {"lambda_cls", lambda_cls},     {"seed", seed},
          {"adam_beta1", adam_beta1}, {"adam_beta2", adam_beta2},       {"adam_eps", adam_eps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
  c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
  c.lambda_cls = j.value("lambda_cls", c.lambda_cls);
  c.seed = j.value("seed", c.seed);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.validate();
  return c;
}

double dice_loss(const Matrix& pred, const Matrix& gt, double eps) {
  ad::Tape tape(false);
  return ad::dice_loss(tape.constant(pred), gt, eps).scalar();
}

double focal_loss(const Matrix& pred, const Matrix& gt, double gamma, double alpha) {
  ad::Tape tape(false);
  return ad::focal_loss(tape.constant(pred), gt, gamma, alpha).scalar();
}

double cross_entropy(const RowVector& scores, int label) {
  if (!scores.allFinite()) throw ValidationError("cross_entropy: non-finite scores");
  ad::Tape tape(false);
  return ad::cross_entropy(tape.constant(Matrix(scores)), label).scalar();
}

Matrix downsample_mask(const EmbeddingBundle& bundle) {
  if (!bundle.gt_mask) throw ValidationError("bundle " + bundle.image_id + " has no mask");
  const int H = bundle.height, W = bundle.width, h = bundle.grid_h(), w = bundle.grid_w();
  std::vector<double> hits(static_cast<std::size_t>(h) * w, 0.0), counts(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const auto cell = static_cast<std::size_t>(y * h / H) * w + static_cast<std::size_t>(x * w / W);
      hits[cell] += (*bundle.gt_mask)[static_cast<std::size_t>(y) * W + x];
      counts[cell] += 1.0;
    }
  }
  Matrix out(static_cast<Eigen::Index>(h) * w, 1);
  for (std::size_t c = 0; c < hits.size(); ++c) {
    out(static_cast<Eigen::Index>(c), 0) = counts[c] > 0 && hits[c] / counts[c] >= 0.5 ? 1.0 : 0.0;
  }
  return out;
}

namespace graph {

LossVars total_loss(ad::Tape& tape, const ModelVars& vars, const TrainedModel& model, const EmbeddingBundle& bundle,
                    const TrainConfig& cfg) {
  if (!bundle.gt_mask || !bundle.label) {
    throw ValidationError("total_loss: bundle " + bundle.image_id + " is missing its mask or label");
  }
  const Matrix target = downsample_mask(bundle);
  ForwardPass pass = run_forward(tape, vars, model, bundle);

  const double per_layer = 1.0 / static_cast<double>(pass.y1.size());
  std::vector<ad::Var> dice_terms, focal_terms;
  for (const auto* family : {&pass.y1, &pass.y2}) {
    for (ad::Var map : *family) {
      dice_terms.push_back(ad::dice_loss(map, target));
      focal_terms.push_back(ad::focal_loss(map, target, cfg.focal_gamma, cfg.focal_alpha));
    }
  }
  auto reduce = [&](const std::vector<ad::Var>& terms) {
    ad::Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = acc + terms[i];
    return acc * per_layer;
  };
  LossVars out;
  out.dice = reduce(dice_terms);
  out.focal = reduce(focal_terms);
  out.ce = ad::cross_entropy(pass.class_scores, *bundle.label);
  out.total = out.dice + out.focal;
  if (cfg.lambda_cls != 0.0) out.total = out.total + out.ce * cfg.lambda_cls;
  return out;
}

}  // namespace graph

LossBreakdown total_loss(const EmbeddingBundle& bundle, const TrainedModel& model, const TrainConfig& cfg) {
  ad::Tape tape(false);
  ModelVars vars = bind_model(tape, model);
  auto loss = graph::total_loss(tape, vars, model, bundle, cfg);
  return {loss.dice.scalar(), loss.focal.scalar(), loss.ce.scalar(), loss.total.scalar()};
}

GradCheckReport grad_check(const TrainedModel& model, const EmbeddingBundle& bundle, const TrainConfig& cfg,
                           double epsilon, int coordinates, std::uint64_t seed) {
  ad::Tape tape(true);
  ModelVars vars = bind_model(tape, model);
  auto loss = graph::total_loss(tape, vars, model, bundle, cfg);
  tape.backward(loss.total);

  TrainedModel probe = model;
  auto refs = trainable_parameters(probe);
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t t = 0; t < refs.size(); ++t) {
    Matrix& value = *refs[t].value;
    const Matrix analytic = tape.grad(vars.trainable[t]);
    const auto size = static_cast<std::size_t>(value.size());
    std::vector<std::size_t> picks(size);
    for (std::size_t i = 0; i < size; ++i) picks[i] = i;
    if (size > static_cast<std::size_t>(coordinates)) {
      std::shuffle(picks.begin(), picks.end(), rng);
      picks.resize(static_cast<std::size_t>(coordinates));
    }
    GradCheckEntry entry{refs[t].name, picks.size(), 0.0, 0.0};
    for (std::size_t idx : picks) {
      const double original = value.data()[idx];
      value.data()[idx] = original + epsilon;
      const double up = total_loss(bundle, probe, cfg).total;
      value.data()[idx] = original - epsilon;
      const double down = total_loss(bundle, probe, cfg).total;
      value.data()[idx] = original;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic.data()[idx];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      entry.max_abs_grad = std::max(entry.max_abs_grad, std::abs(a));
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.tensors.push_back(std::move(entry));
  }
  return report;
}

namespace {

struct AdamState {
  std::vector<Matrix> m, v;
  int step = 0;
};

// Mean loss over the support set. With `grads` non-null the gradient of
// that mean is written per trainable tensor.
LossBreakdown support_loss(const TrainedModel& model, const Dataset& support, const TrainConfig& cfg,
                           std::vector<Matrix>* grads) {
  ad::Tape tape(grads != nullptr);
  ModelVars vars = bind_model(tape, model);
  LossBreakdown acc;
  std::vector<ad::Var> totals;
  for (const auto& b : support.bundles) {
    auto loss = graph::total_loss(tape, vars, model, b, cfg);
    acc.dice += loss.dice.scalar();
    acc.focal += loss.focal.scalar();
    acc.ce += loss.ce.scalar();
    acc.total += loss.total.scalar();
    totals.push_back(loss.total);
  }
  const double n = static_cast<double>(support.bundles.size());
  acc.dice /= n;
  acc.focal /= n;
  acc.ce /= n;
  acc.total /= n;
  if (grads) {
    ad::Var sum = totals.front();
    for (std::size_t i = 1; i < totals.size(); ++i) sum = sum + totals[i];
    tape.backward(sum * (1.0 / n));
    grads->clear();
    for (ad::Var p : vars.trainable) grads->push_back(tape.grad(p));
  }
  return acc;
}

}  // namespace

TrainResult train_model(TrainedModel model, const Dataset& support, const TrainConfig& cfg) {
  cfg.validate();
  if (support.bundles.empty()) throw ValidationError("train: empty support set");
  model.train_config = cfg.to_json();

  TrainResult result;
  auto refs = trainable_parameters(model);
  AdamState adam;
  for (const auto& r : refs) {
    adam.m.push_back(Matrix::Zero(r.value->rows(), r.value->cols()));
    adam.v.push_back(Matrix::Zero(r.value->rows(), r.value->cols()));
  }

  std::vector<Matrix> grads;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    LossBreakdown loss = support_loss(model, support, cfg, &grads);
    if (!std::isfinite(loss.total)) {
      std::ostringstream msg;
      msg << "train: non-finite loss at epoch " << epoch << " (dice=" << loss.dice << ", focal=" << loss.focal
          << ", ce=" << loss.ce << ")";
      throw Error(msg.str());
    }
    result.trace.push_back({epoch, loss});
    ++adam.step;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, adam.step);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, adam.step);
    for (std::size_t t = 0; t < refs.size(); ++t) {
      const Matrix& g = grads[t];
      if (!g.allFinite()) throw Error("train: non-finite gradient for " + refs[t].name + " at epoch " +
                                      std::to_string(epoch));
      adam.m[t] = cfg.adam_beta1 * adam.m[t] + (1.0 - cfg.adam_beta1) * g;
      adam.v[t] = cfg.adam_beta2 * adam.v[t] + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
      Matrix step = (adam.m[t] / c1).array() / ((adam.v[t] / c2).array().sqrt() + cfg.adam_eps);
      *refs[t].value -= cfg.learning_rate * step;
    }
  }
  result.trace.push_back({cfg.epochs, support_loss(model, support, cfg, nullptr)});
  result.model = std::move(model);
  return result;
}

TrainResult train(const Dataset& support, const PromptSet& prompts, const ModelConfig& model_cfg,
                  const TrainConfig& cfg) {
  cfg.validate();
  return train_model(init_model(support, prompts, model_cfg, cfg.seed), support, cfg);
}

void write_loss_csv(const std::vector<EpochLoss>& trace, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "epoch,dice,focal,ce,total\n" << std::setprecision(17);
  for (const auto& row : trace) {
    os << row.epoch << ',' << row.loss.dice << ',' << row.loss.focal << ',' << row.loss.ce << ','
       << row.loss.total << '\n';
  }
}

}  // namespace ultraad
