#include "ultraad/cli.hpp"

#include "CLI11.hpp"
#include "ultraad/config.hpp"
#include "ultraad/error.hpp"
#include "ultraad/metrics_eval.hpp"
#include "ultraad/model.hpp"
#include "ultraad/training.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>

namespace fs = std::filesystem;

namespace ultraad {
namespace {

// Raised for bad invocations; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct CliOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> shots;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
  int verbosity = 0;
};

struct Context {
  nlohmann::json config;
  fs::path out;
  std::ostream& log;
  int verbosity;
};

nlohmann::json resolve_config(const CliOptions& opts) {
  nlohmann::json cfg = opts.config_path.empty() ? default_config() : load_config(opts.config_path);
  for (const auto& o : opts.overrides) apply_override(cfg, o);
  if (opts.seed) {
    cfg["synth"]["seed"] = *opts.seed;
    cfg["train"]["seed"] = *opts.seed;
    cfg["experiment"]["seeds"] = {*opts.seed};
  }
  if (opts.shots) cfg["experiment"]["shots"] = {*opts.shots};
  return cfg;
}

void write_resolved(const Context& ctx) {
  fs::create_directories(ctx.out);
  std::ofstream os(ctx.out / "config.resolved.json", std::ios::trunc);
  if (!os) throw IoError("cannot write resolved config in " + ctx.out.string());
  os << ctx.config.dump(2) << '\n';
}

fs::path data_dir(const Context& ctx) {
  const std::string data = ctx.config.value("data", std::string{});
  if (data.empty()) throw UsageError("no dataset given (set \"data\" in the config or --override data=DIR)");
  if (!fs::exists(fs::path(data) / "manifest.json")) throw UsageError("dataset not found: " + data);
  return data;
}

ExperimentConfig experiment_config(const nlohmann::json& cfg) {
  ExperimentConfig exp;
  exp.model = ModelConfig::from_json(cfg.at("model"));
  exp.train = TrainConfig::from_json(cfg.at("train"));
  exp.seeds = cfg.at("experiment").at("seeds").get<std::vector<std::uint64_t>>();
  exp.shots = cfg.at("experiment").at("shots").get<std::vector<int>>();
  if (exp.seeds.empty() || exp.shots.empty()) throw UsageError("experiment needs at least one seed and shot count");
  return exp;
}

int cmd_synth(Context& ctx) {
  const SynthConfig sc = synth_from_json(ctx.config.at("synth"));
  SyntheticData data = generate_synthetic(sc);
  write_dataset(data.dataset, data.prompts, ctx.out);
  write_resolved(ctx);
  ctx.log << "wrote " << data.dataset.bundles.size() << " bundles to " << ctx.out.string() << '\n';
  return 0;
}

int cmd_train(Context& ctx) {
  const fs::path dir = data_dir(ctx);
  const ExperimentConfig exp = experiment_config(ctx.config);
  const Dataset dataset = read_dataset(dir);
  const PromptSet prompts = read_dataset_prompts(dir);
  const std::uint64_t seed = exp.seeds.front();
  auto [support, query] = build_fewshot_split(dataset, exp.shots.front(), seed);
  TrainConfig tc = exp.train;
  tc.seed = seed;
  if (ctx.verbosity > 0) {
    ctx.log << "training on " << support.bundles.size() << " support bundles for " << tc.epochs << " epochs\n";
  }
  TrainResult result = train(support, prompts, exp.model, tc);
  write_resolved(ctx);
  save_checkpoint(result.model, ctx.out / "checkpoint.utm");
  write_loss_csv(result.trace, ctx.out / "loss.csv");
  ctx.log << "initial loss " << result.trace.front().loss.total << ", final loss " << result.trace.back().loss.total
          << '\n';
  return 0;
}

int cmd_eval(Context& ctx) {
  const fs::path dir = data_dir(ctx);
  std::string ckpt = ctx.config.value("checkpoint", std::string{});
  if (ckpt.empty()) ckpt = (ctx.out / "checkpoint.utm").string();
  if (!fs::exists(ckpt)) throw UsageError("checkpoint not found: " + ckpt);
  const TrainedModel model = load_checkpoint(ckpt);
  const Dataset dataset = read_dataset(dir);

  std::set<std::string> support(model.support_ids.begin(), model.support_ids.end());
  Dataset query{{}, dataset.num_classes, dataset.class_names, dataset.domain_tag};
  for (const auto& b : dataset.bundles) {
    if (!support.count(b.image_id)) query.bundles.push_back(b);
  }
  const bool no_cls = ctx.config.at("train").value("lambda_cls", 1.0) == 0.0;
  EvalReport report = evaluate(model, query, {!no_cls});
  report.shots = model.num_classes() > 0 ? static_cast<int>(model.support_ids.size()) / model.num_classes() : 0;
  write_resolved(ctx);
  write_report_json({report}, ctx.out / "report.json");
  write_report_csv({report}, ctx.out / "report.csv");

  const bool export_maps = ctx.config.at("eval").value("export_maps", true);
  std::ofstream scores(ctx.out / "scores.csv", std::ios::trunc);
  scores << "image_id,label,abnormal_score,detection_score" << std::setprecision(17);
  for (int c = 0; c < model.num_classes(); ++c) scores << ",prob_" << c;
  scores << '\n';
  if (export_maps) fs::create_directories(ctx.out / "maps");
  std::size_t exported = 0;
  for (const auto& b : query.bundles) {
    Inference inf = infer(b, model);
    scores << b.image_id << ',' << b.label.value_or(-1) << ',' << inf.abnormal_score << ',' << inf.detection_score;
    for (Eigen::Index c = 0; c < inf.class_probabilities.size(); ++c) scores << ',' << inf.class_probabilities[c];
    scores << '\n';
    if (export_maps && b.gt_mask) {
      write_pgm_composite(inf.map.combined, b.mask_matrix(), ctx.out / "maps" / (b.image_id + ".pgm"));
      save_anomaly_map(inf.map, ctx.out / "maps" / (b.image_id + ".uam"));
      ++exported;
    }
  }
  auto fmt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("-"); };
  ctx.log << "image AUROC (binary) " << fmt(report.metrics.image_auroc_binary) << ", image AUROC (multi-class) "
          << fmt(report.metrics.image_auroc_multiclass) << ", pixel AUROC " << fmt(report.metrics.pixel_auroc)
          << ", pixel AUPRC " << fmt(report.metrics.pixel_auprc) << "; " << exported << " maps\n";
  return 0;
}

int cmd_ablate(Context& ctx) {
  const auto names = ctx.config.at("experiment").at("variants").get<std::vector<std::string>>();
  std::vector<Variant> variants;
  for (const auto& n : names) {
    try {
      variants.push_back(parse_variant(n));
    } catch (const ValidationError& e) {
      throw UsageError(e.what());
    }
  }
  const fs::path dir = data_dir(ctx);
  const ExperimentConfig exp = experiment_config(ctx.config);
  const Dataset dataset = read_dataset(dir);
  const PromptSet prompts = read_dataset_prompts(dir);
  write_resolved(ctx);
  for (Variant v : variants) {
    auto reports = run_ablation(dataset, prompts, exp, v);
    const std::string name = variant_name(v);
    write_report_json(reports, ctx.out / ("report_" + name + ".json"));
    write_report_csv(reports, ctx.out / ("report_" + name + ".csv"));
    const auto& m = reports.front().metrics;
    ctx.log << name << ": pixel AUROC " << (m.pixel_auroc ? std::to_string(*m.pixel_auroc) : "-") << '\n';
  }
  return 0;
}

int cmd_gradcheck(Context& ctx) {
  const auto& gc = ctx.config.at("gradcheck");
  const double threshold = gc.value("threshold", 1e-4);
  const double epsilon = gc.value("epsilon", 1e-4);
  const int coordinates = gc.value("coordinates", 20);
  const int trained_steps = gc.value("trained_steps", 0);
  const ExperimentConfig exp = experiment_config(ctx.config);

  Dataset dataset;
  PromptSet prompts;
  if (!ctx.config.value("data", std::string{}).empty()) {
    const fs::path dir = data_dir(ctx);
    dataset = read_dataset(dir);
    prompts = read_dataset_prompts(dir);
  } else {
    SyntheticData data = generate_synthetic(synth_from_json(ctx.config.at("synth")));
    dataset = std::move(data.dataset);
    prompts = std::move(data.prompts);
  }
  const std::uint64_t seed = exp.seeds.front();
  auto [support, query] = build_fewshot_split(dataset, exp.shots.front(), seed);
  TrainConfig tc = exp.train;
  tc.seed = seed;
  TrainedModel model = init_model(support, prompts, exp.model, seed);
  if (trained_steps > 0) {
    TrainConfig steps = tc;
    steps.epochs = trained_steps;
    model = train_model(std::move(model), support, steps).model;
  }
  const EmbeddingBundle* probe = &support.bundles.front();
  for (const auto& b : support.bundles) {
    if (b.label.value_or(0) != 0) {
      probe = &b;
      break;
    }
  }
  const GradCheckReport report = grad_check(model, *probe, tc, epsilon, coordinates, seed);
  write_resolved(ctx);

  std::ofstream table(ctx.out / "gradcheck.csv", std::ios::trunc);
  table << "tensor,coordinates,max_rel_error,max_abs_grad\n" << std::setprecision(6);
  ctx.log << std::left << std::setw(22) << "tensor" << std::setw(8) << "coords" << std::setw(16) << "max_rel_err"
          << "max_|grad|\n";
  for (const auto& t : report.tensors) {
    ctx.log << std::setw(22) << t.name << std::setw(8) << t.coordinates << std::setw(16) << std::scientific
            << t.max_rel_error << t.max_abs_grad << std::defaultfloat << '\n';
    table << t.name << ',' << t.coordinates << ',' << t.max_rel_error << ',' << t.max_abs_grad << '\n';
  }
  const bool pass = report.max_rel_error <= threshold;
  ctx.log << (pass ? "PASS" : "FAIL") << ": worst relative error " << std::scientific << report.max_rel_error
          << " (threshold " << threshold << ")" << std::defaultfloat << '\n';
  return pass ? 0 : 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot anomaly localization and classification on precomputed embeddings", "ultraad"};
  app.require_subcommand(1);
  CliOptions opts;
  auto add_common = [&opts](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", opts.seed, "seed for data generation, splitting and training");
    sub->add_option("--out", opts.out_dir, "output directory");
    sub->add_option("--shots", opts.shots, "samples per class in the support set");
    sub->add_option("--override", opts.overrides, "key=value config override (repeatable)");
    sub->add_flag("-v,--verbose", opts.verbosity, "more progress output");
  };
  std::vector<std::pair<std::string, int (*)(Context&)>> commands{{"synth", cmd_synth},
                                                                  {"train", cmd_train},
                                                                  {"eval", cmd_eval},
                                                                  {"ablate", cmd_ablate},
                                                                  {"gradcheck", cmd_gradcheck}};
  const std::vector<std::string> help{"generate a synthetic embedding dataset",
                                      "adapt a model on a few-shot split",
                                      "evaluate a checkpoint on the query split",
                                      "run the ablation variants",
                                      "compare analytic and finite-difference gradients"};
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < commands.size(); ++i) {
    subs.push_back(app.add_subcommand(commands[i].first, help[i]));
    add_common(subs.back());
  }

  std::vector<std::string> argv_store{"ultraad"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "ultraad: " << e.what() << '\n';
    return 2;
  }

  try {
    for (std::size_t i = 0; i < commands.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      Context ctx{resolve_config(opts), opts.out_dir, out, opts.verbosity};
      return commands[i].second(ctx);
    }
  } catch (const UsageError& e) {
    err << "ultraad: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "ultraad: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "ultraad: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace ultraad
