#include "bwnh/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "bwnh/im2col.hpp"
#include "bwnh/net.hpp"

namespace bwnh {

namespace {

std::uint64_t layer_seed(std::uint64_t seed, std::size_t layer) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(layer)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

std::vector<Eigen::Index> column_subset(Eigen::Index m, std::size_t cap, std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  if (static_cast<std::size_t>(m) <= cap) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Eigen::MatrixXd take_columns(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& idx) {
  if (static_cast<Eigen::Index>(idx.size()) == x.cols()) return x;
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = x.col(idx[k]);
  return out;
}

}  // namespace

void validate(const BinarizeConfig& cfg) {
  validate(cfg.solver);
  if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (cfg.col_cap == 0) throw std::invalid_argument("column cap must be positive");
}

Tensor sample_batch(const Dataset& data, std::size_t batch_size, std::uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("cannot sample from an empty dataset");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(batch_size, data.size()));
  return data.subset(order).images;
}

Eigen::MatrixXd extract_layer_inputs(const Model& model, const Tensor& batch, std::size_t layer) {
  const auto& layers = model.manifest.layers;
  if (layer >= layers.size() || !has_weights(layers[layer].kind)) {
    throw std::invalid_argument("layer " + std::to_string(layer) + " is not a Conv/FC layer");
  }
  Model prefix;
  prefix.manifest = model.manifest;
  prefix.manifest.layers.resize(layer);
  prefix.tensors = model.tensors;

  const std::size_t n = batch.dims().at(0);
  const Shape in = layer == 0 ? input_shape_of(model.manifest) : infer_shapes(model.manifest)[layer - 1];
  Network net(prefix, ExecutionMode::Mixed);
  const FeatureMap feat = net.forward(to_feature_map(batch), false);
  if (feat.per_sample() != in.size()) {
    throw std::invalid_argument("featuremap shape mismatch at layer " + layers[layer].name);
  }

  const auto& spec = layers[layer];
  if (spec.kind == LayerKind::Conv) {
    const ConvGeometry g{static_cast<int>(in.channels), static_cast<int>(in.height),
                         static_cast<int>(in.width),    static_cast<int>(spec.kernel_h),
                         static_cast<int>(spec.kernel_w), static_cast<int>(spec.stride),
                         static_cast<int>(spec.pad)};
    return im2col(feat.values.data(), static_cast<int>(n), g);
  }
  return Eigen::Map<const Eigen::MatrixXd>(feat.values.data(),
                                           static_cast<Eigen::Index>(in.size()),
                                           static_cast<Eigen::Index>(n));
}

Eigen::MatrixXd compute_target_similarity(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w) {
  if (x.rows() != w.rows()) throw std::invalid_argument("X and W must have the same row count");
  return x.transpose() * w;
}

std::vector<std::size_t> binarization_plan(const ModelManifest& m, const BinarizeConfig& cfg) {
  std::vector<std::size_t> weight_layers;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto kind = m.layers[i].kind;
    if (kind == LayerKind::Conv || (!cfg.conv_only && kind == LayerKind::FullyConnected)) {
      weight_layers.push_back(i);
    }
  }
  std::vector<std::size_t> plan;
  for (std::size_t k = 0; k < weight_layers.size(); ++k) {
    if (cfg.skip_first && k == 0) continue;
    if (cfg.skip_last && k + 1 == weight_layers.size()) continue;
    plan.push_back(weight_layers[k]);
  }
  if (cfg.max_layers && plan.size() > *cfg.max_layers) plan.resize(*cfg.max_layers);
  return plan;
}

HashProblem build_layer_problem(const BinarizeRun& run, std::size_t layer,
                                const BinarizeConfig& cfg) {
  validate(cfg);
  const auto& spec = run.target.manifest.layers.at(layer);
  if (!has_weights(spec.kind)) throw std::invalid_argument(spec.name + " has no weights");
  for (auto earlier : binarization_plan(run.target.manifest, cfg)) {
    if (earlier >= layer) break;
    if (!run.target.manifest.layers[earlier].binarized) {
      throw std::logic_error("layer " + run.target.manifest.layers[earlier].name +
                             " must be binarized before " + spec.name);
    }
  }

  const auto seed = layer_seed(cfg.seed, layer);
  const Tensor batch = sample_batch(run.data, cfg.batch_size, seed);
  const bool need_binarized = cfg.reconstruct_from == ReconstructFrom::Binarized ||
                              cfg.target_from == TargetFrom::Binarized;
  const Eigen::MatrixXd x_full = extract_layer_inputs(run.source, batch, layer);
  const Eigen::MatrixXd x_bin_full =
      need_binarized ? extract_layer_inputs(run.target, batch, layer) : Eigen::MatrixXd();
  const auto cols = column_subset(x_full.cols(), cfg.col_cap, seed ^ 0x5DEECE66DULL);
  const Eigen::MatrixXd x = take_columns(x_full, cols);
  const Eigen::MatrixXd x_bin = need_binarized ? take_columns(x_bin_full, cols) : x;

  HashProblem problem;
  problem.w = weight_matrix(run.source, layer);
  problem.x_tilde = cfg.reconstruct_from == ReconstructFrom::Binarized ? x_bin : x;
  problem.s_target =
      compute_target_similarity(cfg.target_from == TargetFrom::FullPrecision ? x : x_bin, problem.w);
  return problem;
}

BinarySolution solve_layer_adaptive(BinarizeRun& run, std::size_t layer,
                                    const BinarizeConfig& cfg) {
  const HashProblem problem = build_layer_problem(run, layer, cfg);
  const auto& spec = run.target.manifest.layers[layer];
  BinarySolution sol = solve_layer(problem, cfg.solver);
  attach_binary(run.target, layer, sol.codes, sol.alpha);

  LayerReport rep;
  rep.layer_index = layer;
  rep.name = spec.name;
  rep.s_dim = static_cast<std::size_t>(problem.s_dim());
  rep.m_dim = static_cast<std::size_t>(problem.m_dim());
  rep.n_dim = static_cast<std::size_t>(problem.n_dim());
  rep.objective_initial = sol.total_initial();
  rep.objective_final = sol.total_final();
  for (const auto& t : sol.objective_trace) rep.iterations_max = std::max(rep.iterations_max, t.size());
  rep.alpha_stats = {sol.alpha.minCoeff(), sol.alpha.maxCoeff(), sol.alpha.mean()};
  rep.flagged_columns = sol.flagged_columns;
  run.layer_reports.push_back(rep);
  return sol;
}

BinarizeRun binarize_model(const Model& source, const Dataset& data, const BinarizeConfig& cfg,
                           const LayerCallback& on_layer) {
  validate(cfg);
  for (const auto& l : source.manifest.layers) {
    if (l.binarized) throw std::invalid_argument("source model must be real-valued");
  }
  if (data.size() == 0) throw std::invalid_argument("cannot binarize with an empty dataset");
  BinarizeRun run{source, source, data, {}};
  for (auto layer : binarization_plan(source.manifest, cfg)) {
    try {
      solve_layer_adaptive(run, layer, cfg);
    } catch (const std::exception& e) {
      throw BinarizeError("layer " + source.manifest.layers[layer].name + ": " + e.what(),
                          run.layer_reports);
    }
    if (on_layer) on_layer(run, layer);
  }
  return run;
}

std::string run_report_json(const std::vector<LayerReport>& reports) {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const auto& r : reports) {
    j["layers"].push_back({{"index", r.layer_index},
                           {"name", r.name},
                           {"S", r.s_dim},
                           {"M", r.m_dim},
                           {"N", r.n_dim},
                           {"objective_initial", r.objective_initial},
                           {"objective_final", r.objective_final},
                           {"iterations_max", r.iterations_max},
                           {"alpha", {{"min", r.alpha_stats.min},
                                      {"max", r.alpha_stats.max},
                                      {"mean", r.alpha_stats.mean}}},
                           {"flagged_columns", r.flagged_columns}});
  }
  return j.dump(2) + "\n";
}

void write_run_report(const std::vector<LayerReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << run_report_json(reports);
}

}  // namespace bwnh
