// hesskit command line: exact Hessian blocks, stochastic diagonal estimates,
// finite-difference step studies and batch-size sweeps for the toy
// transformer's additive loss. Every run writes a manifest.json holding the
// fully resolved parameters; `hesskit rerun` replays a manifest and
// reproduces the data files byte for byte.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hesskit/hesskit.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace hesskit;

namespace {

// Exit codes: 2 invalid flags/config, 3 dense cap exceeded, 4 numerical
// failure.
constexpr int kExitUsage = 2;
constexpr int kExitCap = 3;
constexpr int kExitNumerical = 4;

struct RunRequest {
  std::string command;  // exact | diag | fd-compare | batch-sweep

  ModelConfig model;
  std::string config_path;  // informational only; model holds resolved values

  std::string corpus_path;  // empty: synthetic tokens from data_seed
  std::uint64_t data_seed = 0;
  std::int64_t batch = 2;

  // subset selection (1-based indices as typed on the command line)
  std::string subset = "single-layer";
  std::int64_t layer = 1;
  std::int64_t block = 1;
  std::string kind = "q_proj";
  std::int64_t t = 25;

  std::int64_t micro_batch = 0;  // 0: whole batch in one chunk
  std::string reduction = "sum";
  std::size_t cap = 4096;
  int threads = 0;
  bool header = false;

  // diag
  std::int64_t K = 100;
  std::string dist = "rademacher";
  std::uint64_t probe_seed = 0;
  std::vector<std::int64_t> truth_rows;

  // fd-compare
  double h_min = 1e-8;
  double h_max = 1e-1;
  std::int64_t h_steps = 8;
  std::int64_t quadratic = 0;  // >0: seeded quadratic test mode of this dimension

  // batch-sweep
  std::vector<std::int64_t> b_list = {1, 2, 4};

  std::string out_dir;
};

SubsetSpec subset_from_request(const RunRequest& req) {
  if (req.subset == "single-layer") return SingleLayer{req.layer - 1, req.t};
  if (req.subset == "block") return SingleBlock{req.block - 1, req.t};
  if (req.subset == "kind-all-blocks") {
    const auto kind = parse_layer_kind(req.kind);
    if (!kind) throw std::invalid_argument("unknown layer kind '" + req.kind + "'");
    return OneKindAllBlocks{*kind, req.t};
  }
  if (req.subset == "all-layers") return AllLayers{req.t};
  throw std::invalid_argument("unknown subset '" + req.subset + "'");
}

TokenBatch batch_from_request(const RunRequest& req, std::int64_t samples) {
  if (!req.corpus_path.empty()) {
    const TokenBatch corpus = load_corpus_file(req.corpus_path, req.model);
    if (corpus.batch < samples)
      throw std::invalid_argument("corpus holds " + std::to_string(corpus.batch) +
                                  " samples, need " + std::to_string(samples));
    return corpus.rows(0, samples);
  }
  return random_batch(req.model, samples, req.data_seed);
}

AccumulationPlan plan_from_request(const RunRequest& req, std::int64_t samples, bool mean) {
  AccumulationPlan plan;
  plan.micro_batch_size = req.micro_batch > 0 ? req.micro_batch : samples;
  plan.total_samples = samples;
  plan.mean = mean;
  return plan;
}

std::vector<std::string> index_map_labels(const IndexMap& map) {
  std::vector<std::string> labels;
  labels.reserve(map.size());
  for (const Coord& c : map)
    labels.push_back("l" + std::to_string(c.layer + 1) + ":o" + std::to_string(c.offset + 1));
  return labels;
}

// --------------------------------------------------------------------------
// Manifest
// --------------------------------------------------------------------------

const char* nonlinearity_name(Nonlinearity n) {
  return n == Nonlinearity::gelu ? "gelu" : "relu";
}

json model_to_json(const ModelConfig& m) {
  return json{{"blocks", m.blocks},   {"n_heads", m.n_heads}, {"d_model", m.d_model},
              {"d_ffn", m.d_ffn},     {"vocab", m.vocab},     {"seq_len", m.seq_len},
              {"nonlinearity", nonlinearity_name(m.nonlinearity)}, {"seed", m.seed}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.blocks = j.at("blocks").get<std::int64_t>();
  m.n_heads = j.at("n_heads").get<std::int64_t>();
  m.d_model = j.at("d_model").get<std::int64_t>();
  m.d_ffn = j.at("d_ffn").get<std::int64_t>();
  m.vocab = j.at("vocab").get<std::int64_t>();
  m.seq_len = j.at("seq_len").get<std::int64_t>();
  const std::string nl = j.at("nonlinearity").get<std::string>();
  if (nl == "gelu") m.nonlinearity = Nonlinearity::gelu;
  else if (nl == "relu") m.nonlinearity = Nonlinearity::relu;
  else throw std::invalid_argument("manifest: bad nonlinearity '" + nl + "'");
  m.seed = j.at("seed").get<std::uint64_t>();
  m.validate();
  return m;
}

json request_to_json(const RunRequest& req) {
  json j;
  j["version"] = kVersion;
  j["command"] = req.command;
  j["model"] = model_to_json(req.model);
  j["data"] = {{"corpus", req.corpus_path.empty() ? json(nullptr) : json(req.corpus_path)},
               {"data_seed", req.data_seed},
               {"batch", req.batch}};
  json run;
  run["subset"] = req.subset;
  run["layer"] = req.layer;
  run["block"] = req.block;
  run["kind"] = req.kind;
  run["t"] = req.t;
  run["micro_batch"] = req.micro_batch;
  run["reduction"] = req.reduction;
  run["cap"] = req.cap;
  run["header"] = req.header;
  if (req.command == "diag") {
    run["K"] = req.K;
    run["dist"] = req.dist;
    run["probe_seed"] = req.probe_seed;
    run["truth_rows"] = req.truth_rows;
  } else if (req.command == "fd-compare") {
    run["h_min"] = req.h_min;
    run["h_max"] = req.h_max;
    run["h_steps"] = req.h_steps;
    run["quadratic"] = req.quadratic;
  } else if (req.command == "batch-sweep") {
    run["b_list"] = req.b_list;
  }
  j["run"] = run;
  j["threads"] = req.threads;
  return j;
}

RunRequest request_from_json(const json& j) {
  RunRequest req;
  req.command = j.at("command").get<std::string>();
  req.model = model_from_json(j.at("model"));
  const json& data = j.at("data");
  if (!data.at("corpus").is_null()) req.corpus_path = data.at("corpus").get<std::string>();
  req.data_seed = data.at("data_seed").get<std::uint64_t>();
  req.batch = data.at("batch").get<std::int64_t>();
  const json& run = j.at("run");
  req.subset = run.at("subset").get<std::string>();
  req.layer = run.at("layer").get<std::int64_t>();
  req.block = run.at("block").get<std::int64_t>();
  req.kind = run.at("kind").get<std::string>();
  req.t = run.at("t").get<std::int64_t>();
  req.micro_batch = run.at("micro_batch").get<std::int64_t>();
  req.reduction = run.at("reduction").get<std::string>();
  req.cap = run.at("cap").get<std::size_t>();
  req.header = run.at("header").get<bool>();
  if (req.command == "diag") {
    req.K = run.at("K").get<std::int64_t>();
    req.dist = run.at("dist").get<std::string>();
    req.probe_seed = run.at("probe_seed").get<std::uint64_t>();
    req.truth_rows = run.at("truth_rows").get<std::vector<std::int64_t>>();
  } else if (req.command == "fd-compare") {
    req.h_min = run.at("h_min").get<double>();
    req.h_max = run.at("h_max").get<double>();
    req.h_steps = run.at("h_steps").get<std::int64_t>();
    req.quadratic = run.at("quadratic").get<std::int64_t>();
  } else if (req.command == "batch-sweep") {
    req.b_list = run.at("b_list").get<std::vector<std::int64_t>>();
  }
  req.threads = j.at("threads").get<int>();
  return req;
}

void write_manifest(const RunRequest& req, json manifest, double wall_ms,
                    const std::vector<std::string>& outputs) {
  manifest["outputs"] = outputs;
  manifest["wall_clock_ms"] = wall_ms;  // volatile; ignored by rerun
  std::ofstream f(fs::path(req.out_dir) / "manifest.json", std::ios::binary);
  if (!f) throw std::invalid_argument("cannot write manifest in " + req.out_dir);
  f << manifest.dump(2) << '\n';
}

// --------------------------------------------------------------------------
// Commands
// --------------------------------------------------------------------------

void run_exact(const RunRequest& req) {
  const auto t0 = std::chrono::steady_clock::now();
  const ParamStore store = init_params(req.model);
  const SubsetSpec spec = subset_from_request(req);
  const TokenBatch batch = batch_from_request(req, req.batch);
  HessianOptions opts;
  opts.dense_cap = req.cap;
  opts.threads = req.threads;
  const HessianBlock block = accumulate_hessian(
      spec, store, batch, plan_from_request(req, req.batch, req.reduction == "mean"), opts);

  const fs::path out(req.out_dir);
  const auto labels = index_map_labels(block.index_map);
  write_csv_matrix_file((out / "hessian.csv").string(), block.H, req.header ? &labels : nullptr);
  const PgmScale scale = write_pgm_log_abs_file((out / "hessian.pgm").string(), block.H);

  json manifest = request_to_json(req);
  manifest["subset_resolved"] = subset_to_string(spec);
  manifest["dimension"] = block.dim();
  manifest["pgm_scale"] = {{"log10_lo", scale.log10_lo}, {"log10_hi", scale.log10_hi}};
  const double wall =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(req, std::move(manifest), wall, {"hessian.csv", "hessian.pgm"});
  std::cout << "wrote " << block.dim() << "x" << block.dim() << " block to " << out / "hessian.csv"
            << "\n";
}

void run_diag(const RunRequest& req) {
  const auto t0 = std::chrono::steady_clock::now();
  const ParamStore store = init_params(req.model);
  const std::int64_t l = req.layer - 1;
  if (l < 0 || l >= req.model.layer_count())
    throw std::invalid_argument("layer index out of range");
  const LayerShape shape = layer_shape(req.model, static_cast<LayerKind>(l % kKindsPerBlock));
  const std::int64_t m = shape.numel();
  const SubsetSpec spec = SingleLayer{l, m};

  const TokenBatch batch = batch_from_request(req, req.batch);
  auto [f, map] = restricted_loss(store, spec, batch);
  const auto u0 = restriction_point(store, map);

  const ProbeDistribution dist = req.dist == "gaussian" ? ProbeDistribution::gaussian
                                                        : ProbeDistribution::rademacher;
  if (req.dist != "gaussian" && req.dist != "rademacher")
    throw std::invalid_argument("unknown probe distribution '" + req.dist + "'");

  // Exact diagonal truth on the requested matrix rows, one HVP per
  // coordinate; this is the same arithmetic the dense block would do.
  std::optional<TruthSlice> truth;
  if (!req.truth_rows.empty()) {
    truth.emplace();
    CompiledFunction cf(f);
    std::vector<double> unit(static_cast<std::size_t>(m), 0.0);
    for (const std::int64_t row : req.truth_rows) {
      if (row < 1 || row > shape.rows)
        throw std::invalid_argument("truth row " + std::to_string(row) + " out of range [1," +
                                    std::to_string(shape.rows) + "]");
      for (std::int64_t c = 0; c < shape.cols; ++c) {
        const std::int64_t idx = (row - 1) * shape.cols + c;
        unit[static_cast<std::size_t>(idx)] = 1.0;
        const auto col = cf.hvp(u0, unit);
        unit[static_cast<std::size_t>(idx)] = 0.0;
        truth->indices.push_back(idx);
        truth->values.push_back(col[static_cast<std::size_t>(idx)]);
      }
    }
  }

  HutchinsonOptions opts;
  opts.threads = req.threads;
  DiagEstimate est;
  if (req.micro_batch > 0 && req.micro_batch < req.batch) {
    // chunked HVP oracle keeps engine memory at micro-batch size
    const ChunkedHvp oracle(spec, store, batch, plan_from_request(req, req.batch, false));
    est = hutchinson_diag_fn([&oracle](std::span<const double> v) { return oracle(v); }, m,
                             req.K, dist, req.probe_seed, truth ? &*truth : nullptr, opts);
  } else {
    est = hutchinson_diag(f, u0, req.K, dist, req.probe_seed, truth ? &*truth : nullptr, opts);
  }

  const fs::path out(req.out_dir);
  const Tensor diag_matrix({shape.rows, shape.cols}, est.running_mean);
  write_csv_matrix_file((out / "diag.csv").string(), diag_matrix);
  const PgmScale scale = write_pgm_log_abs_file((out / "diag.pgm").string(), diag_matrix);

  {
    std::ofstream hist(out / "history.csv", std::ios::binary);
    if (!hist) throw std::invalid_argument("cannot write history.csv");
    if (req.header)
      hist << (truth ? "k,rel_l2_diff,partial_rel_l2_loss" : "k,rel_l2_diff") << '\n';
    for (std::int64_t k = 0; k < req.K; ++k) {
      hist << (k + 1) << ',' << format_double(est.rel_diff_history[static_cast<std::size_t>(k)]);
      if (truth) hist << ',' << format_double(est.rel_loss_history[static_cast<std::size_t>(k)]);
      hist << '\n';
    }
  }

  json manifest = request_to_json(req);
  manifest["dimension"] = m;
  manifest["layer_shape"] = {shape.rows, shape.cols};
  manifest["pgm_scale"] = {{"log10_lo", scale.log10_lo}, {"log10_hi", scale.log10_hi}};
  const double wall =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(req, std::move(manifest), wall, {"diag.csv", "diag.pgm", "history.csv"});
  std::cout << "estimated " << m << " diagonal entries with K=" << req.K << " probes\n";
}

void run_fd_compare(const RunRequest& req) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!(req.h_min > 0.0) || !(req.h_max >= req.h_min) || req.h_steps < 1)
    throw std::invalid_argument("fd-compare: need 0 < h-min <= h-max and h-steps >= 1");

  ScalarFunction f;
  std::vector<double> u0;
  if (req.quadratic > 0) {
    // quadratic test mode: the four-point formula is exact up to roundoff
    Tensor A = Tensor::zeros({req.quadratic, req.quadratic});
    Rng rng(substream_seed(req.model.seed, 0x51ull));
    for (std::int64_t i = 0; i < req.quadratic; ++i)
      for (std::int64_t j = i; j < req.quadratic; ++j) {
        const double x = rng.normal();
        A.at(i, j) = x;
        A.at(j, i) = x;
      }
    f.dim = static_cast<std::size_t>(req.quadratic);
    f.build = [A](Graph& g, NodeId in) {
      const auto row = g.reshape(in, {1, A.rows()});
      return g.scale(g.sum_all(g.mul(row, g.matmul(row, g.constant(A)))), 0.5);
    };
    u0.assign(f.dim, 0.0);
  } else {
    const ParamStore store = init_params(req.model);
    const TokenBatch batch = batch_from_request(req, req.batch);
    auto [rf, map] = restricted_loss(store, SingleLayer{req.layer - 1, req.t}, batch);
    f = std::move(rf);
    u0 = restriction_point(store, map);
  }

  HessianOptions opts;
  opts.dense_cap = req.cap;
  opts.threads = req.threads;
  const Tensor exact = exact_hessian(f, u0, opts);

  // log-spaced grid from h_max down to h_min
  std::vector<double> grid;
  if (req.h_steps == 1) {
    grid.push_back(req.h_max);
  } else {
    const double step = (std::log10(req.h_max) - std::log10(req.h_min)) /
                        static_cast<double>(req.h_steps - 1);
    for (std::int64_t i = 0; i < req.h_steps; ++i)
      grid.push_back(std::pow(10.0, std::log10(req.h_max) - step * static_cast<double>(i)));
  }

  const fs::path out(req.out_dir);
  {
    std::ofstream csv(out / "fd_errors.csv", std::ios::binary);
    if (!csv) throw std::invalid_argument("cannot write fd_errors.csv");
    if (req.header) csv << "h,rel_frobenius_error\n";
    for (const double h : grid) {
      const Tensor fd = fd_hessian(f, u0, h);
      csv << format_double(h) << ',' << format_double(relative_frobenius_loss(fd, exact)) << '\n';
    }
  }

  json manifest = request_to_json(req);
  manifest["dimension"] = static_cast<std::int64_t>(f.dim);
  const double wall =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(req, std::move(manifest), wall, {"fd_errors.csv"});
  std::cout << "swept " << grid.size() << " step sizes on a " << f.dim << "-dim block\n";
}

void run_batch_sweep(const RunRequest& req) {
  const auto t0 = std::chrono::steady_clock::now();
  if (req.b_list.empty()) throw std::invalid_argument("batch-sweep: empty --b-list");
  const std::int64_t b_max = req.b_list.back();
  const ParamStore store = init_params(req.model);
  const TokenBatch corpus = batch_from_request(req, b_max);
  HessianOptions opts;
  opts.dense_cap = req.cap;
  opts.threads = req.threads;
  const auto rows = batch_sweep(SingleLayer{req.layer - 1, req.t}, store, corpus, req.b_list, opts);

  const fs::path out(req.out_dir);
  {
    std::ofstream csv(out / "batch_metrics.csv", std::ios::binary);
    if (!csv) throw std::invalid_argument("cannot write batch_metrics.csv");
    if (req.header) csv << "b,rel_l2_loss,rel_l2_diff\n";
    for (const auto& row : rows) {
      csv << row.b << ',' << format_double(row.rel_loss) << ',';
      if (row.rel_diff) csv << format_double(*row.rel_diff);
      csv << '\n';
    }
  }

  json manifest = request_to_json(req);
  manifest["dimension"] = req.t;
  const double wall =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(req, std::move(manifest), wall, {"batch_metrics.csv"});
  std::cout << "swept " << rows.size() << " batch sizes up to b=" << b_max << "\n";
}

void dispatch(const RunRequest& req) {
  fs::create_directories(req.out_dir);
  if (req.command == "exact") run_exact(req);
  else if (req.command == "diag") run_diag(req);
  else if (req.command == "fd-compare") run_fd_compare(req);
  else if (req.command == "batch-sweep") run_batch_sweep(req);
  else throw std::invalid_argument("unknown command '" + req.command + "'");
}

void add_common_options(CLI::App* cmd, RunRequest& req) {
  cmd->add_option("--config", req.config_path, "model config file (key=value lines)");
  cmd->add_option("--seed", req.model.seed, "model init seed (overrides config file)");
  cmd->add_option("--data-seed", req.data_seed, "synthetic corpus seed");
  cmd->add_option("--corpus", req.corpus_path, "token corpus file (one sample per line)");
  cmd->add_option("--batch,-b", req.batch, "number of samples")->check(CLI::PositiveNumber);
  cmd->add_option("--micro-batch", req.micro_batch, "samples per accumulation chunk (0 = all)");
  cmd->add_option("--threads", req.threads, "worker threads (0 = HESSKIT_THREADS or hardware)");
  cmd->add_option("--cap", req.cap, "dense Hessian dimension cap");
  cmd->add_flag("--header", req.header, "write CSV column headers / index labels");
  cmd->add_option("--out", req.out_dir, "output directory")->required();
}

void resolve_config_file(RunRequest& req, const CLI::App* cmd) {
  if (req.config_path.empty()) return;
  const std::uint64_t cli_seed = req.model.seed;
  req.model = parse_model_config_file(req.config_path);
  if (cmd->count("--seed") > 0) req.model.seed = cli_seed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hessian blocks, HVPs and stochastic diagonal estimates for a toy transformer"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  RunRequest req;

  CLI::App* exact = app.add_subcommand("exact", "dense Hessian block over a parameter subset");
  add_common_options(exact, req);
  exact->add_option("--subset", req.subset, "single-layer | block | kind-all-blocks | all-layers")
      ->check(CLI::IsMember({"single-layer", "block", "kind-all-blocks", "all-layers"}));
  exact->add_option("--layer", req.layer, "1-based global layer index");
  exact->add_option("--block", req.block, "1-based block index");
  exact->add_option("--kind", req.kind, "q_proj|k_proj|v_proj|out_proj|fc1|fc2");
  exact->add_option("--t", req.t, "leading entries per selected layer")->check(CLI::PositiveNumber);
  exact->add_option("--reduction", req.reduction, "sum (canonical) or mean")
      ->check(CLI::IsMember({"sum", "mean"}));

  CLI::App* diag = app.add_subcommand("diag", "Hutchinson estimate of one layer's Hessian diagonal");
  add_common_options(diag, req);
  diag->add_option("--layer", req.layer, "1-based global layer index");
  diag->add_option("--K", req.K, "number of probe vectors")->check(CLI::PositiveNumber);
  diag->add_option("--dist", req.dist, "rademacher | gaussian")
      ->check(CLI::IsMember({"rademacher", "gaussian"}));
  diag->add_option("--probe-seed", req.probe_seed, "probe stream seed");
  diag->add_option("--truth-rows", req.truth_rows,
                   "1-based matrix rows whose exact diagonal scores the estimate")
      ->delimiter(',');

  CLI::App* fdc = app.add_subcommand("fd-compare",
                                     "finite-difference step study against the exact block");
  add_common_options(fdc, req);
  fdc->add_option("--layer", req.layer, "1-based global layer index");
  fdc->add_option("--t", req.t, "leading entries of the layer")->check(CLI::PositiveNumber);
  fdc->add_option("--h-min", req.h_min, "smallest step");
  fdc->add_option("--h-max", req.h_max, "largest step");
  fdc->add_option("--h-steps", req.h_steps, "grid points (log-spaced)");
  fdc->add_option("--quadratic", req.quadratic,
                  "test mode: seeded random quadratic of this dimension instead of the model");
  fdc->get_option("--t")->default_val("8");

  CLI::App* sweep = app.add_subcommand("batch-sweep", "Hessian accuracy for growing batch sizes");
  add_common_options(sweep, req);
  sweep->add_option("--layer", req.layer, "1-based global layer index");
  sweep->add_option("--t", req.t, "leading entries of the layer")->check(CLI::PositiveNumber);
  sweep->add_option("--b-list", req.b_list, "ascending batch sizes, e.g. 1,2,4")
      ->delimiter(',')
      ->required();

  CLI::App* rerun = app.add_subcommand("rerun", "replay a run from its manifest");
  std::string manifest_path;
  std::string rerun_out;
  rerun->add_option("--manifest", manifest_path, "manifest.json of a previous run")->required();
  rerun->add_option("--out", rerun_out, "output directory for the replay")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (rerun->parsed()) {
      std::ifstream f(manifest_path);
      if (!f) throw std::invalid_argument("cannot open manifest " + manifest_path);
      json j;
      f >> j;
      RunRequest replay = request_from_json(j);
      replay.out_dir = rerun_out;
      dispatch(replay);
    } else {
      CLI::App* active = app.get_subcommands().front();
      req.command = active->get_name();
      resolve_config_file(req, active);
      req.model.validate();
      if (req.command == "batch-sweep") req.batch = req.b_list.empty() ? 0 : req.b_list.back();
      dispatch(req);
    }
  } catch (const CapExceededError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCap;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
