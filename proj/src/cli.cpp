#include "bwnh/cli.hpp"

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "bwnh/dataset.hpp"
#include "bwnh/manifest.hpp"
#include "bwnh/model.hpp"
#include "bwnh/net.hpp"
#include "bwnh/pipeline.hpp"
#include "bwnh/verify.hpp"

namespace bwnh {

namespace fs = std::filesystem;

namespace {

// Thrown for bad flag combinations detected after parsing.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Command {
  std::function<void()> check;    // flag validation; must not touch files
  std::function<void()> execute;
};

fs::path tensor_dir_for(const fs::path& manifest_path) {
  return manifest_path.stem().string() + ".d";
}

fs::path resolved_tensor_dir(const fs::path& manifest_path, const std::string& tensor_dir) {
  return fs::weakly_canonical(fs::absolute(manifest_path).parent_path() / tensor_dir);
}

// Refuses outputs that would overwrite the input manifest or its tensors.
void check_output(const fs::path& in, const fs::path& out) {
  if (fs::weakly_canonical(fs::absolute(in)) == fs::weakly_canonical(fs::absolute(out))) {
    throw UsageError("--out must differ from --model");
  }
  const auto in_dir = resolved_tensor_dir(in, read_manifest(in).tensor_dir);
  if (in_dir == resolved_tensor_dir(out, tensor_dir_for(out))) {
    throw UsageError("--out would write into the input model's tensor directory");
  }
}

void save_as(Model model, const fs::path& out) {
  model.manifest.tensor_dir = tensor_dir_for(out).string();
  save_model(model, out);
}

std::size_t resolve_layer(const ModelManifest& m, const std::string& ref) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].name == ref) return i;
  }
  std::size_t pos = 0;
  try {
    const auto idx = std::stoul(ref, &pos);
    if (pos == ref.size() && idx < m.layers.size()) return idx;
  } catch (const std::exception&) {
  }
  throw UsageError("no layer named or indexed '" + ref + "'");
}

const std::map<std::string, TargetFrom> kTargetFrom{{"full_precision", TargetFrom::FullPrecision},
                                                    {"binarized", TargetFrom::Binarized}};
const std::map<std::string, ReconstructFrom> kReconstructFrom{
    {"binarized", ReconstructFrom::Binarized}, {"full_precision", ReconstructFrom::FullPrecision}};
const std::map<std::string, ExecutionMode> kModes{
    {"float", ExecutionMode::Float}, {"binary", ExecutionMode::Binary}, {"mixed", ExecutionMode::Mixed}};

struct SolverFlags {
  int max_iter = 20;
  double rel_tol = 1e-6;
  unsigned threads = 1;

  void add(CLI::App* app) {
    app->add_option("--max-iter", max_iter, "outer iterations per column")->capture_default_str();
    app->add_option("--rel-tol", rel_tol, "relative objective decrease to stop at")
        ->capture_default_str();
    app->add_option("--threads", threads, "worker threads for column solves")->capture_default_str();
  }

  SolverConfig config(std::uint64_t seed) const {
    SolverConfig cfg;
    cfg.max_iter = max_iter;
    cfg.rel_tol = rel_tol;
    cfg.threads = threads;
    cfg.seed = seed;
    return cfg;
  }
};

struct BinarizeFlags {
  SolverFlags solver;
  std::size_t batch = 256;
  std::size_t col_cap = 8192;
  bool skip_first = false;
  bool skip_last = false;
  bool conv_only = false;
  std::optional<std::size_t> max_layers;
  TargetFrom target_from = TargetFrom::FullPrecision;
  ReconstructFrom reconstruct_from = ReconstructFrom::Binarized;

  void add(CLI::App* app) {
    solver.add(app);
    app->add_option("--batch", batch, "calibration images per layer")->capture_default_str();
    app->add_option("--col-cap", col_cap, "maximum featuremap columns per layer")
        ->capture_default_str();
    app->add_flag("--skip-first", skip_first, "keep the first Conv/FC layer real-valued");
    app->add_flag("--skip-last", skip_last, "keep the last Conv/FC layer real-valued");
    app->add_flag("--conv-only", conv_only, "leave fully connected layers real-valued");
    app->add_option("--max-layers", max_layers, "binarize at most this many layers");
    app->add_option("--target-from", target_from, "featuremaps for the target similarities")
        ->transform(CLI::CheckedTransformer(kTargetFrom));
    app->add_option("--reconstruct-from", reconstruct_from,
                    "featuremaps the codes are fitted against")
        ->transform(CLI::CheckedTransformer(kReconstructFrom));
  }

  BinarizeConfig config(std::uint64_t seed) const {
    BinarizeConfig cfg;
    cfg.solver = solver.config(seed);
    cfg.batch_size = batch;
    cfg.col_cap = col_cap;
    cfg.skip_first = skip_first;
    cfg.skip_last = skip_last;
    cfg.conv_only = conv_only;
    cfg.max_layers = max_layers;
    cfg.target_from = target_from;
    cfg.reconstruct_from = reconstruct_from;
    cfg.seed = seed;
    return cfg;
  }
};

struct TrainFlags {
  int iters;
  double lr;
  std::size_t batch = 32;
  int decay_steps = 0;
  double weight_decay;

  TrainFlags(int iters_, double lr_, double wd) : iters(iters_), lr(lr_), weight_decay(wd) {}

  void add(CLI::App* app) {
    app->add_option("--iters", iters, "SGD iterations")->capture_default_str();
    app->add_option("--lr", lr, "learning rate")->capture_default_str();
    app->add_option("--batch", batch, "minibatch size")->capture_default_str();
    app->add_option("--decay-steps", decay_steps, "divide lr by 10 every this many iterations")
        ->capture_default_str();
    app->add_option("--weight-decay", weight_decay, "L2 penalty on real weights")
        ->capture_default_str();
  }

  TrainConfig config(TrainConfig base, std::uint64_t seed) const {
    base.max_iters = iters;
    base.lr = lr;
    base.batch_size = batch;
    base.decay_steps = decay_steps;
    base.weight_decay = weight_decay;
    base.seed = seed;
    return base;
  }
};

void print_losses(std::ostream& out, const std::vector<double>& losses) {
  if (losses.empty()) return;
  out << "loss first=" << losses.front() << " last=" << losses.back() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Binary weight hashing for convolutional networks", "bwnh"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 42;
  app.add_option("--seed", seed, "seed for every random choice")->capture_default_str();

  std::map<CLI::App*, Command> commands;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic digit dataset");
  fs::path gen_out;
  std::size_t gen_count = 1000;
  std::uint32_t gen_side = 16;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of images")->capture_default_str();
  gen->add_option("--side", gen_side, "image side length")->capture_default_str();
  commands[gen] = {[&] {
                     if (gen_count == 0) throw UsageError("--count must be positive");
                     if (gen_side < 14) throw UsageError("--side must be at least 14");
                   },
                   [&] {
                     write_dataset(make_synthetic_digits(gen_count, seed, gen_side), gen_out);
                     out << "wrote " << gen_count << " images to " << gen_out.string() << "\n";
                   }};

  // train-baseline
  auto* train = app.add_subcommand("train-baseline", "train a real-valued model");
  std::string train_arch, train_name = "net";
  fs::path train_model, train_data, train_out;
  TrainFlags train_flags(300, 0.05, 5e-4);
  auto* arch_opt = train->add_option("--arch", train_arch, "architecture, e.g. (2x8C3)-MP2-10FC-Softmax");
  auto* model_opt = train->add_option("--model", train_model, "initial weights manifest");
  arch_opt->excludes(model_opt);
  train->add_option("--name", train_name, "model name for --arch")->capture_default_str();
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output manifest")->required();
  train_flags.add(train);
  commands[train] = {
      [&] {
        if (train_arch.empty() && train_model.empty()) throw UsageError("need --arch or --model");
        validate(train_flags.config({}, seed));
        if (!train_model.empty()) check_output(train_model, train_out);
      },
      [&] {
        const Dataset data = read_dataset(train_data);
        Model init;
        if (train_model.empty()) {
          const auto& d = data.images.dims();
          init = initialize_model(parse_architecture(train_arch, train_name, {d[1], d[2], d[3]}),
                                  seed);
        } else {
          init = load_model(train_model);
        }
        TrainReport report;
        const Model trained = train_baseline(init, data, train_flags.config({}, seed), &report);
        save_as(trained, train_out);
        print_losses(out, report.losses);
        out << "train top1=" << evaluate(trained, data, ExecutionMode::Float).top1 << "\n";
      }};

  // binarize
  auto* bin = app.add_subcommand("binarize", "binarize a trained model layer by layer");
  fs::path bin_model, bin_data, bin_out, bin_report;
  BinarizeFlags bin_flags;
  bin->add_option("--model", bin_model, "real-valued model manifest")->required();
  bin->add_option("--data", bin_data, "calibration dataset directory")->required();
  bin->add_option("--out", bin_out, "output manifest")->required();
  bin->add_option("--report", bin_report, "per-layer report (default <out>.report.json)");
  bin_flags.add(bin);
  commands[bin] = {[&] {
                     validate(bin_flags.config(seed));
                     check_output(bin_model, bin_out);
                   },
                   [&] {
                     const Model source = load_model(bin_model);
                     const Dataset data = read_dataset(bin_data);
                     const auto cfg = bin_flags.config(seed);
                     fs::path report = bin_report;
                     if (report.empty()) report = fs::path(bin_out).concat(".report.json");
                     try {
                       const BinarizeRun result = binarize_model(source, data, cfg);
                       save_as(result.target, bin_out);
                       write_run_report(result.layer_reports, report);
                       for (const auto& r : result.layer_reports) {
                         out << r.name << " objective " << r.objective_initial << " -> "
                             << r.objective_final << "\n";
                       }
                     } catch (const BinarizeError& e) {
                       write_run_report(e.partial_reports(), report);
                       throw;
                     }
                   }};

  // finetune
  auto* ft = app.add_subcommand("finetune", "fine-tune a binarized model");
  fs::path ft_model, ft_data, ft_out;
  TrainFlags ft_flags(200, 0.001, 0.0);
  bool ft_fixed = false;
  ft->add_option("--model", ft_model, "binarized model manifest")->required();
  ft->add_option("--data", ft_data, "training dataset directory")->required();
  ft->add_option("--out", ft_out, "output manifest")->required();
  ft->add_flag("--fixed-codes", ft_fixed, "train scales and real layers only");
  ft_flags.add(ft);
  commands[ft] = {[&] {
                    validate(ft_flags.config({}, seed));
                    check_output(ft_model, ft_out);
                  },
                  [&] {
                    const Model model = load_model(ft_model);
                    const Dataset data = read_dataset(ft_data);
                    FinetuneConfig cfg;
                    cfg.train = ft_flags.config(cfg.train, seed);
                    cfg.mode = ft_fixed ? FinetuneMode::FixedCodes : FinetuneMode::StraightThrough;
                    TrainReport report;
                    const Model tuned = finetune(model, data, cfg, &report);
                    save_as(tuned, ft_out);
                    print_losses(out, report.losses);
                  }};

  // eval
  auto* ev = app.add_subcommand("eval", "top-1 accuracy and loss of a model");
  fs::path ev_model, ev_data;
  std::optional<ExecutionMode> ev_mode;
  ev->add_option("--model", ev_model, "model manifest")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--mode", ev_mode, "float, binary or mixed (default mixed)")
      ->transform(CLI::CheckedTransformer(kModes));
  commands[ev] = {[] {},
                  [&] {
                    const Model model = load_model(ev_model);
                    const Dataset data = read_dataset(ev_data);
                    const auto r = evaluate(model, data, ev_mode.value_or(ExecutionMode::Mixed));
                    out << "top1=" << r.top1 << " loss=" << r.loss << "\n";
                  }};

  // verify
  auto* ver = app.add_subcommand("verify", "compare the solver against exhaustive search");
  bool ver_oracle = false;
  int ver_s_max = 12, ver_trials = 100;
  fs::path ver_report;
  SolverFlags ver_solver;
  ver->add_flag("--oracle", ver_oracle, "run the exhaustive oracle trials");
  ver->add_option("--s-max", ver_s_max, "largest code length")->capture_default_str();
  ver->add_option("--trials", ver_trials, "number of random instances")->capture_default_str();
  ver->add_option("--report", ver_report, "JSON report path");
  ver_solver.add(ver);
  commands[ver] = {[&] {
                     if (!ver_oracle) throw UsageError("verify needs --oracle");
                     if (ver_s_max < 1 || ver_s_max > kMaxEnumerationBits) {
                       throw UsageError("--s-max must be in [1, 20]");
                     }
                     if (ver_trials < 1) throw UsageError("--trials must be positive");
                     validate(ver_solver.config(seed));
                   },
                   [&] {
                     const auto summary =
                         run_oracle_trials(ver_s_max, ver_trials, seed, ver_solver.config(seed));
                     out << "oracle trials=" << summary.reports.size()
                         << " optimal=" << summary.optimal << " rate=" << summary.optimal_rate()
                         << " violations=" << summary.violations << "\n";
                     if (!ver_report.empty()) write_text(ver_report, oracle_summary_json(summary));
                   }};

  // ablate
  auto* abl = app.add_subcommand("ablate", "progressive binarization with and without scales");
  fs::path abl_model, abl_data, abl_eval, abl_report;
  BinarizeFlags abl_flags;
  abl->add_option("--model", abl_model, "real-valued model manifest")->required();
  abl->add_option("--data", abl_data, "calibration dataset directory")->required();
  abl->add_option("--eval", abl_eval, "evaluation dataset directory (default --data)");
  abl->add_option("--report", abl_report, "JSON report path");
  abl_flags.add(abl);
  commands[abl] = {[&] { validate(abl_flags.config(seed)); },
                   [&] {
                     const Model model = load_model(abl_model);
                     const Dataset calib = read_dataset(abl_data);
                     const Dataset eval = abl_eval.empty() ? calib : read_dataset(abl_eval);
                     const auto rows = ablate_scale(model, calib, eval, abl_flags.config(seed));
                     for (const auto& r : rows) {
                       out << "depth " << r.depth << " " << (r.layer.empty() ? "-" : r.layer)
                           << " scaled=" << r.scaled_top1 << " unscaled=" << r.unscaled_top1
                           << "\n";
                     }
                     if (!abl_report.empty()) write_text(abl_report, ablation_json(rows));
                   }};

  // curve
  auto* cur = app.add_subcommand("curve", "objective per iteration for one layer");
  fs::path cur_model, cur_data, cur_report;
  std::string cur_layer;
  BinarizeFlags cur_flags;
  cur->add_option("--model", cur_model, "real-valued model manifest")->required();
  cur->add_option("--data", cur_data, "calibration dataset directory")->required();
  cur->add_option("--layer", cur_layer, "layer name or index")->required();
  cur->add_option("--report", cur_report, "JSON report path");
  cur_flags.add(cur);
  commands[cur] = {[&] { validate(cur_flags.config(seed)); },
                   [&] {
                     const Model model = load_model(cur_model);
                     const Dataset data = read_dataset(cur_data);
                     const auto layer = resolve_layer(model.manifest, cur_layer);
                     if (!has_weights(model.manifest.layers[layer].kind)) {
                       throw UsageError("layer " + cur_layer + " is not a Conv/FC layer");
                     }
                     auto cfg = cur_flags.config(seed);
                     // Binarize the planned layers in front of the requested one.
                     std::size_t before = 0;
                     for (auto l : binarization_plan(model.manifest, cfg)) before += l < layer;
                     auto prefix_cfg = cfg;
                     prefix_cfg.max_layers = before;
                     const BinarizeRun prefix = binarize_model(model, data, prefix_cfg);
                     const auto series = convergence_curve(
                         build_layer_problem(prefix, layer, cfg), cfg.solver);
                     out << "initial " << series.initial << "\n";
                     for (const auto& [it, v] : series.points) out << it << " " << v << "\n";
                     if (!cur_report.empty()) write_text(cur_report, convergence_json(series));
                   }};

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  const Command* cmd = nullptr;
  CLI::App* sub = app.get_subcommands().front();
  cmd = &commands.at(sub);
  try {
    cmd->check();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n" << sub->help();
    return kExitUsage;
  }
  try {
    cmd->execute();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace bwnh
