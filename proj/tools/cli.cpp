#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "rope_probe/dimension_analysis.hpp"
#include "rope_probe/errors.hpp"
#include "rope_probe/head_score.hpp"
#include "rope_probe/kernels.hpp"
#include "rope_probe/report.hpp"
#include "rope_probe/rng.hpp"
#include "rope_probe/snapshot_io.hpp"
#include "rope_probe/toy_task.hpp"
#include "rope_probe/utility_mask.hpp"

#ifndef ROPE_PROBE_VERSION
#define ROPE_PROBE_VERSION "0.0.0"
#endif

namespace rope_probe::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string utc_now() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(
                                                 std::chrono::system_clock::now())));
}

bool on_off(const std::string& v) { return v == "on"; }

// Written when a command starts and rewritten when it ends, so an aborted
// run still leaves a record of what was attempted.
class RunManifest {
 public:
  RunManifest(fs::path dir, std::string command, std::vector<std::string> argv, json config, std::uint64_t seed)
      : path_(dir / "manifest.json") {
    doc_["command"] = std::move(command);
    doc_["argv"] = std::move(argv);
    doc_["config"] = std::move(config);
    doc_["seed"] = seed;
    doc_["version"] = ROPE_PROBE_VERSION;
    doc_["started_at"] = utc_now();
    doc_["finished_at"] = nullptr;
    doc_["status"] = "running";
    doc_["outputs"] = json::array();
    write();
  }

  void output(const fs::path& file) { doc_["outputs"].push_back(file.filename().string()); }

  void resolve(const std::string& key, json value) {
    doc_["config"][key] = std::move(value);
    write();
  }

  void finish(const std::string& status, const std::string& error = {}) {
    doc_["finished_at"] = utc_now();
    doc_["status"] = status;
    if (!error.empty()) doc_["error"] = error;
    write();
  }

 private:
  void write() const { report::write_text(path_, doc_.dump(2) + "\n"); }

  fs::path path_;
  json doc_;
};

// Shared per-invocation state: output directory and manifest.
struct Session {
  std::vector<std::string> argv;
  std::ostream& out;
  std::ostream& err;
  fs::path dir;
  std::optional<RunManifest> manifest;

  void begin(const std::string& command, json config, std::uint64_t seed) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(fmt::format("cannot create output directory '{}': {}", dir.string(), ec.message()));
    manifest.emplace(dir, command, argv, std::move(config), seed);
  }

  fs::path emit(const std::string& name, const std::string& text) {
    const fs::path path = dir / name;
    report::write_text(path, text);
    manifest->output(path);
    return path;
  }

  fs::path emit_container(const std::string& name, const io::Container& container) {
    const fs::path path = dir / name;
    io::write_snapshots(path, container);
    manifest->output(path);
    return path;
  }
};

int resolve_threads(const std::optional<int>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("ROPE_PROBE_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 0) return n;
    } catch (const std::exception&) {
    }
    throw std::invalid_argument(fmt::format("ROPE_PROBE_THREADS='{}' is not a thread count", env));
  }
  return 0;
}

json config_json(const TaskConfig& c) {
  return {{"n", c.n},
          {"subset_size", c.subset_size},
          {"dim", c.dim},
          {"max_position", c.max_position},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"samples_per_epoch", c.samples_per_epoch},
          {"epochs", c.epochs},
          {"rope", c.rope_enabled},
          {"seed", c.seed},
          {"scale", to_string(c.scale)},
          {"rope_base", c.rope_base},
          {"layout", to_string(c.layout)},
          {"epoch_unit", c.epoch_unit == EpochUnit::kSteps ? "steps" : "episodes"},
          {"optimizer", c.optimizer == OptimizerKind::kSgd ? "sgd" : "adam"},
          {"steps_per_epoch", c.steps_per_epoch()}};
}

TaskConfig preset(const std::string& name) { return name == "desk" ? desk_preset() : full_preset(); }

// Training flags. Values start from the chosen preset; only flags given on
// the command line override it.
struct TrainFlags {
  std::string preset = "full";
  std::string rope = "on";
  std::uint64_t seed = 0;
  std::size_t epochs = 0, n = 0, dim = 0, subset = 0, batch = 0, samples = 0;
  std::int64_t max_pos = 0;
  double lr = 0.0, base = 0.0;
  std::string scale, layout, epoch_unit, optimizer;
  std::map<std::string, CLI::Option*> opts;

  void attach(CLI::App* app) {
    opts["preset"] = app->add_option("--preset", preset, "Starting values: full or desk")
                         ->check(CLI::IsMember({"full", "desk"}));
    opts["rope"] = app->add_option("--rope", rope, "Rotate keys by position")->check(CLI::IsMember({"on", "off"}));
    opts["seed"] = app->add_option("--seed", seed, "Master seed");
    opts["epochs"] = app->add_option("--epochs", epochs);
    opts["n"] = app->add_option("--n", n, "Number of (q, k, v) tuples")->check(CLI::PositiveNumber);
    opts["dim"] = app->add_option("--dim", dim, "Head dimension 2D")->check(CLI::PositiveNumber);
    opts["subset"] = app->add_option("--subset", subset, "Pairs sampled per episode")->check(CLI::PositiveNumber);
    opts["max_pos"] = app->add_option("--max-pos", max_pos, "Positions drawn from [0, max-pos)")->check(CLI::PositiveNumber);
    opts["batch"] = app->add_option("--batch", batch)->check(CLI::PositiveNumber);
    opts["lr"] = app->add_option("--lr", lr)->check(CLI::PositiveNumber);
    opts["samples"] = app->add_option("--samples-per-epoch", samples)->check(CLI::PositiveNumber);
    opts["scale"] = app->add_option("--scale", scale)->check(CLI::IsMember({"inv-sqrt", "none"}));
    opts["base"] = app->add_option("--rope-base", base)->check(CLI::PositiveNumber);
    opts["layout"] = app->add_option("--layout", layout)->check(CLI::IsMember({"adjacent", "half-split"}));
    opts["epoch_unit"] = app->add_option("--epoch-unit", epoch_unit, "Count samples-per-epoch as episodes or steps")
                             ->check(CLI::IsMember({"episodes", "steps"}));
    opts["optimizer"] = app->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  }

  bool given(const std::string& key) const { return opts.at(key)->count() > 0; }

  TaskConfig resolve() const {
    TaskConfig c = rope_probe::cli::preset(preset);
    c.rope_enabled = on_off(rope);
    c.seed = seed;
    if (given("epochs")) c.epochs = epochs;
    if (given("n")) c.n = n;
    if (given("dim")) c.dim = dim;
    if (given("subset")) c.subset_size = subset;
    if (given("max_pos")) c.max_position = max_pos;
    if (given("batch")) c.batch_size = batch;
    if (given("lr")) c.learning_rate = lr;
    if (given("samples")) c.samples_per_epoch = samples;
    if (given("scale")) c.scale = parse_scale_mode(scale);
    if (given("base")) c.rope_base = base;
    if (given("layout")) c.layout = parse_layout(layout);
    if (given("epoch_unit")) c.epoch_unit = epoch_unit == "steps" ? EpochUnit::kSteps : EpochUnit::kEpisodes;
    if (given("optimizer")) c.optimizer = optimizer == "sgd" ? OptimizerKind::kSgd : OptimizerKind::kAdam;
    c.validate();
    return c;
  }
};

TrainResult train_logged(const TaskConfig& config, std::ostream& out, const std::string& label) {
  return train(config, [&](std::size_t epoch, double loss) {
    out << fmt::format("{}epoch {}/{} mean_loss {:.6f}\n", label, epoch + 1, config.epochs, loss);
  });
}

// ---- train ----------------------------------------------------------------

void cmd_train(Session& s, const TrainFlags& flags) {
  const TaskConfig config = flags.resolve();
  json cfg = config_json(config);
  cfg["threads"] = kernels::thread_count();
  s.begin("train", cfg, config.seed);
  const auto result = train_logged(config, s.out, "");
  s.emit_container("checkpoint.rprb", io::make_embedding_container(result.store, config));
  s.emit("loss.csv", report::loss_curve_csv(result.epoch_losses));
}

// ---- analyze --------------------------------------------------------------

struct AnalyzeFlags {
  std::string checkpoint;
  std::vector<std::size_t> ablate_ns = {0, 16, 32};
  std::size_t episodes = 2000;
  std::uint64_t episode_seed = 0;
  std::string svg = "on";
  std::string target = "qk";
  std::string proj_matrix;
  std::string proj_layout = "adjacent";
};

Tensor read_matrix(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  std::vector<double> data;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    std::size_t count = 0;
    std::string tok;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        data.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw FormatError(fmt::format("{}: '{}' is not a number", path.string(), tok));
      }
      ++count;
    }
    if (count == 0) continue;
    if (cols != 0 && count != cols) {
      throw FormatError(fmt::format("{}: row {} has {} entries, expected {}", path.string(), rows + 1, count, cols));
    }
    cols = count;
    ++rows;
  }
  if (rows == 0) throw FormatError(fmt::format("{}: no matrix rows", path.string()));
  return Tensor::matrix(rows, cols, std::move(data));
}

void cmd_analyze(Session& s, const AnalyzeFlags& flags) {
  json cfg = {{"checkpoint", flags.checkpoint}, {"ablate_ns", flags.ablate_ns}, {"episodes", flags.episodes},
              {"episode_seed", flags.episode_seed}, {"svg", flags.svg}, {"target", flags.target},
              {"proj_matrix", flags.proj_matrix}, {"proj_layout", flags.proj_layout},
              {"threads", kernels::thread_count()}};
  s.begin("analyze", cfg, flags.episode_seed);

  const auto container = io::read_snapshots(flags.checkpoint).container;
  const TaskConfig config = io::checkpoint_config(container);
  const EmbeddingStore store = io::to_embedding_store(container);
  s.manifest->resolve("task", config_json(config));
  for (auto n : flags.ablate_ns) {
    if (n > config.dim) throw std::invalid_argument(fmt::format("--ablate-ns {} exceeds dim {}", n, config.dim));
  }

  const auto magnitudes = magnitude_profile(store, config.layout);
  s.emit("magnitude.csv", report::magnitude_csv(magnitudes));

  AblationPlan plan;
  plan.counts = flags.ablate_ns;
  plan.episodes = flags.episodes;
  plan.episode_seed = flags.episode_seed;
  plan.target = flags.target == "q" ? AblationTarget::kQueryOnly : AblationTarget::kQueryAndKey;
  const auto ablation = ablation_sweep(store, config, plan);
  s.emit("ablation.csv", report::ablation_csv(ablation));

  if (!flags.proj_matrix.empty()) {
    Tensor w = read_matrix(flags.proj_matrix);
    const auto layout = parse_layout(flags.proj_layout);
    if (layout != RopeLayout::kAdjacentPairs) {
      if (w.rows() % 2 != 0) throw FormatError("half-split projection needs an even row count");
      const auto ordering = DimOrdering::for_layout(layout, w.rows() / 2);
      Tensor canon = Tensor::zeros_like(w);
      for (std::size_t r = 0; r < w.rows(); ++r) {
        const auto src = w.row(r);
        std::copy(src.begin(), src.end(), canon.row(ordering.storage_to_canonical[r]).begin());
      }
      w = std::move(canon);
    }
    s.emit("l1.csv", report::l1_csv(l1_row_norms(w)));
  }

  if (on_off(flags.svg)) {
    report::Series q{"mean |q|", {}, {}}, k{"mean |k|", {}, {}};
    for (const auto& r : magnitudes) {
      q.x.push_back(double(r.dim + 1));
      q.y.push_back(r.mean_abs_q);
      k.x.push_back(double(r.dim + 1));
      k.y.push_back(r.mean_abs_k);
    }
    s.emit("magnitude.svg", report::line_chart_svg("Per-dimension magnitude", "dimension", "mean |x|", {q, k}));
    std::vector<report::Series> sides;
    for (auto side : plan.sides) {
      report::Series series{std::string(to_string(side)), {}, {}};
      for (const auto& r : ablation) {
        if (r.side != side) continue;
        series.x.push_back(double(r.removed));
        series.y.push_back(r.eval_loss);
      }
      sides.push_back(std::move(series));
    }
    s.emit("ablation.svg", report::line_chart_svg("Dimension ablation", "# removed dimensions", "eval loss", sides));
  }
}

// ---- mask-fit -------------------------------------------------------------

struct MaskFlags {
  std::vector<std::string> snapshots;
  std::string checkpoint;
  std::size_t snapshot_count = 32;
  std::optional<double> alpha;
  std::size_t steps = 2000;
  double lr = 1e-2;
  double init = 1.0;
  std::uint64_t seed = 0;
};

SnapshotHead snapshots_from_store(const EmbeddingStore& store, const TaskConfig& config, std::size_t count,
                                  std::uint64_t seed) {
  SnapshotHead head;
  head.info.model = "toy";
  head.info.dim = config.dim;
  head.info.layout = config.layout;
  head.info.rope_base = config.rope_base;
  head.info.rope = config.rope_enabled;
  head.info.scale = config.scale;
  Rng rng(derive_seed(seed, "snapshots"));
  for (std::size_t i = 0; i < count; ++i) {
    const Episode e = sample_episode(config, rng);
    AttentionSnapshot snap;
    const auto q = store.q.row(e.target);
    snap.q.assign(q.begin(), q.end());
    snap.keys = Tensor({e.subset.size(), config.dim});
    snap.values = Tensor({e.subset.size(), config.dim});
    for (std::size_t j = 0; j < e.subset.size(); ++j) {
      const auto k = store.k.row(e.subset[j]);
      const auto v = store.v.row(e.subset[j]);
      std::copy(k.begin(), k.end(), snap.keys.row(j).begin());
      std::copy(v.begin(), v.end(), snap.values.row(j).begin());
    }
    snap.positions = e.positions;
    head.snapshots.push_back(std::move(snap));
  }
  return head;
}

void cmd_mask_fit(Session& s, const MaskFlags& flags) {
  if (flags.snapshots.empty() == flags.checkpoint.empty()) {
    throw std::invalid_argument("give exactly one of --snapshots or --from-checkpoint");
  }
  MaskFitConfig fit;
  fit.alpha = flags.alpha;
  fit.steps = flags.steps;
  fit.learning_rate = flags.lr;
  fit.init = flags.init;
  fit.seed = flags.seed;
  fit.validate();

  json cfg = {{"snapshots", flags.snapshots},
              {"from_checkpoint", flags.checkpoint},
              {"snapshot_count", flags.snapshot_count},
              {"alpha", flags.alpha ? json(*flags.alpha) : json("1/(2D)")},
              {"steps", flags.steps},
              {"learning_rate", flags.lr},
              {"init", flags.init},
              {"optimizer", "adam"},
              {"threads", kernels::thread_count()}};
  s.begin("mask-fit", cfg, flags.seed);

  std::vector<SnapshotHead> heads;
  if (!flags.checkpoint.empty()) {
    if (flags.snapshot_count == 0) throw std::invalid_argument("--snapshot-count must be positive");
    const auto container = io::read_snapshots(flags.checkpoint).container;
    heads.push_back(snapshots_from_store(io::to_embedding_store(container), io::checkpoint_config(container),
                                         flags.snapshot_count, flags.seed));
  } else {
    for (const auto& path : flags.snapshots) {
      heads.push_back(io::to_snapshot_head(io::read_snapshots(path).container));
    }
  }
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i].snapshots.empty()) throw std::invalid_argument(fmt::format("head {} has no snapshots", i));
  }

  std::vector<report::HeadUtility> fitted;
  json summary = json::array();
  for (const auto& head : heads) {
    auto mask = fit_mask(head, fit, kernels::ExecPolicy::kParallel);
    s.out << fmt::format("layer {} head {}: objective {:.6g} distortion {:.3g} l1 {:.4g}\n", head.info.layer,
                         head.info.head, mask.objective, mask.distortion, mask.l1);
    summary.push_back({{"layer", head.info.layer},
                       {"head", head.info.head},
                       {"model", head.info.model},
                       {"dim", head.info.dim},
                       {"snapshots", head.snapshots.size()},
                       {"alpha", mask.alpha},
                       {"objective", mask.objective},
                       {"distortion", mask.distortion},
                       {"l1", mask.l1},
                       {"steps", mask.steps},
                       {"best_step", mask.best_step}});
    fitted.push_back({head.info.layer, head.info.head, std::move(mask)});
  }
  s.emit("utility.csv", report::utility_csv(fitted));
  s.emit("summary.json", json{{"heads", summary}}.dump(2) + "\n");
}

// ---- head-score -----------------------------------------------------------

struct HeadScoreFlags {
  std::vector<std::string> attn;
  double threshold = 0.5;
  std::string renormalize_bos = "off";
};

void cmd_head_score(Session& s, const HeadScoreFlags& flags) {
  json cfg = {{"attn", flags.attn}, {"threshold", flags.threshold}, {"renormalize_bos", flags.renormalize_bos}};
  s.begin("head-score", cfg, 0);
  std::vector<AttentionRecord> records;
  for (const auto& path : flags.attn) {
    auto result = io::read_snapshots(path);
    for (const auto& w : result.warnings) s.err << fmt::format("warning: {}: {}\n", path, w);
    auto recs = io::to_attention_records(result.container);
    records.insert(records.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  if (records.empty()) throw FormatError("no attention records in the given files");

  HeadScoreOptions options{flags.threshold, on_off(flags.renormalize_bos)};
  const auto scores = score_all_heads(records, options);
  const auto retrieval = classify_heads(scores, flags.threshold);
  s.out << fmt::format("{} heads scored, {} retrieval\n", scores.size(), retrieval.size());
  s.emit("head_scores.csv", report::head_score_csv(scores));
}

// ---- reproduce-fig1 -------------------------------------------------------

struct ReproduceFlags {
  std::string scale_preset = "desk";
  std::uint64_t seed = 0;
  std::size_t episodes = 2000;
};

struct RunAnalysis {
  std::vector<MagnitudeRow> magnitudes;
  std::vector<AblationRow> ablation;
  std::vector<AblationRow> query_only;
};

double loss_at(const std::vector<AblationRow>& rows, DimSide side, std::size_t removed) {
  for (const auto& r : rows) {
    if (r.side == side && r.removed == removed) return r.eval_loss;
  }
  throw std::logic_error("missing ablation cell");
}

void cmd_reproduce_fig1(Session& s, const ReproduceFlags& flags) {
  const TaskConfig base = preset(flags.scale_preset);
  constexpr std::size_t kBand = 16;
  if (base.dim < 2 * kBand) throw std::invalid_argument("preset dimension too small for 16-dim bands");

  TaskConfig with_rope = base, without_rope = base;
  with_rope.rope_enabled = true;
  with_rope.seed = derive_seed(flags.seed, "rope");
  without_rope.rope_enabled = false;
  without_rope.seed = derive_seed(flags.seed, "norope");
  const std::uint64_t ablation_seed = derive_seed(flags.seed, "ablation");

  json cfg = {{"scale_preset", flags.scale_preset},
              {"episodes", flags.episodes},
              {"ablation_seed", ablation_seed},
              {"runs", {{"rope", config_json(with_rope)}, {"norope", config_json(without_rope)}}},
              {"threads", kernels::thread_count()}};
  s.begin("reproduce-fig1", cfg, flags.seed);

  AblationPlan plan;
  plan.counts = {0, kBand, 2 * kBand};
  plan.episodes = flags.episodes;
  plan.episode_seed = ablation_seed;
  AblationPlan query_plan = plan;
  query_plan.counts = {0, kBand};
  query_plan.target = AblationTarget::kQueryOnly;

  std::map<std::string, RunAnalysis> runs;
  std::string loss_csv = "run,epoch,mean_loss\n";
  for (const auto& [name, config] : {std::pair{std::string("rope"), with_rope}, std::pair{std::string("norope"), without_rope}}) {
    const auto result = train_logged(config, s.out, name + " ");
    s.emit_container(fmt::format("checkpoint_{}.rprb", name), io::make_embedding_container(result.store, config));
    for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
      loss_csv += fmt::format("{},{},{}\n", name, e + 1, report::format_double(result.epoch_losses[e]));
    }
    RunAnalysis a;
    a.magnitudes = magnitude_profile(result.store, config.layout);
    a.ablation = ablation_sweep(result.store, config, plan);
    a.query_only = ablation_sweep(result.store, config, query_plan);
    runs[name] = std::move(a);
  }
  s.emit("loss.csv", loss_csv);

  std::string magnitude_csv = "run,dim,mean_abs_q,mean_abs_k,rms_q,rms_k\n";
  std::string ablation_csv = "run,target,side,n_removed,eval_loss\n";
  std::vector<report::Series> magnitude_series, ablation_series;
  for (const auto& name : {"rope", "norope"}) {
    const auto& a = runs.at(name);
    report::Series q{fmt::format("{} mean |q|", name), {}, {}}, k{fmt::format("{} mean |k|", name), {}, {}};
    for (const auto& r : a.magnitudes) {
      magnitude_csv += fmt::format("{},{},{},{},{},{}\n", name, r.dim + 1, report::format_double(r.mean_abs_q),
                                   report::format_double(r.mean_abs_k), report::format_double(r.rms_q),
                                   report::format_double(r.rms_k));
      q.x.push_back(double(r.dim + 1));
      q.y.push_back(r.mean_abs_q);
      k.x.push_back(double(r.dim + 1));
      k.y.push_back(r.mean_abs_k);
    }
    magnitude_series.push_back(std::move(q));
    magnitude_series.push_back(std::move(k));
    ablation_csv += report::ablation_rows(a.ablation, fmt::format("{},qk,", name));
    ablation_csv += report::ablation_rows(a.query_only, fmt::format("{},q,", name));
    for (auto side : plan.sides) {
      report::Series series{fmt::format("{} {}", name, to_string(side)), {}, {}};
      for (const auto& r : a.ablation) {
        if (r.side != side) continue;
        series.x.push_back(double(r.removed));
        series.y.push_back(r.eval_loss);
      }
      ablation_series.push_back(std::move(series));
    }
  }
  s.emit("magnitude.csv", magnitude_csv);
  s.emit("ablation.csv", ablation_csv);
  s.emit("magnitude.svg", report::line_chart_svg("Per-dimension magnitude", "dimension", "mean |x|", magnitude_series));
  s.emit("ablation.svg", report::line_chart_svg("Dimension ablation", "# removed dimensions", "eval loss", ablation_series));

  // Trend gates.
  const std::size_t dim = base.dim;
  auto ratios = [&](const RunAnalysis& a) {
    return std::pair{mean_abs_q(a.magnitudes, 0, kBand) / mean_abs_q(a.magnitudes, dim - kBand, dim),
                     mean_abs_k(a.magnitudes, 0, kBand) / mean_abs_k(a.magnitudes, dim - kBand, dim)};
  };
  auto increases = [&](const std::vector<AblationRow>& rows) {
    return std::pair{loss_at(rows, DimSide::kFirst, kBand) - loss_at(rows, DimSide::kFirst, 0),
                     loss_at(rows, DimSide::kLast, kBand) - loss_at(rows, DimSide::kLast, 0)};
  };
  const auto [rq, rk] = ratios(runs.at("rope"));
  const auto [nq, nk] = ratios(runs.at("norope"));
  const auto [rope_first, rope_last] = increases(runs.at("rope").ablation);
  const auto [flat_first, flat_last] = increases(runs.at("norope").ablation);
  const double rope_last32 = loss_at(runs.at("rope").ablation, DimSide::kLast, 2 * kBand);
  const double rope_last16 = loss_at(runs.at("rope").ablation, DimSide::kLast, kBand);
  const auto [query_first, query_last] = increases(runs.at("rope").query_only);

  auto within = [](double x, double lo, double hi) { return x >= lo && x <= hi; };
  const bool trend = rq < 0.8 && rk < 0.8;
  const bool flat = within(nq, 0.85, 1.15) && within(nk, 0.85, 1.15);
  const bool asymmetry = rope_first < 0.25 * rope_last && rope_last32 > rope_last16;
  const bool symmetry = flat_first > 0.0 && flat_last > 0.0 && std::max(flat_first, flat_last) < 2.0 * std::min(flat_first, flat_last);

  json verdict = {
      {"magnitude_trend_rope", trend},
      {"magnitude_flat_norope", flat},
      {"ablation_asymmetry_rope", asymmetry},
      {"ablation_symmetry_norope", symmetry},
      {"metrics",
       {{"rope_q_first16_over_last16", rq},
        {"rope_k_first16_over_last16", rk},
        {"norope_q_first16_over_last16", nq},
        {"norope_k_first16_over_last16", nk},
        {"rope_increase_first16", rope_first},
        {"rope_increase_last16", rope_last},
        {"rope_loss_last16", rope_last16},
        {"rope_loss_last32", rope_last32},
        {"norope_increase_first16", flat_first},
        {"norope_increase_last16", flat_last},
        {"rope_query_only_increase_first16", query_first},
        {"rope_query_only_increase_last16", query_last}}}};
  s.emit("verdict.json", verdict.dump(2) + "\n");
  s.out << fmt::format("magnitude trend (rope): {}\nmagnitude flat (no rope): {}\nablation asymmetry (rope): {}\n"
                       "ablation symmetry (no rope): {}\n",
                       trend ? "PASS" : "FAIL", flat ? "PASS" : "FAIL", asymmetry ? "PASS" : "FAIL",
                       symmetry ? "PASS" : "FAIL");
}

// ---- rerun ----------------------------------------------------------------

std::vector<std::string> rerun_args(const std::string& manifest_path, const std::string& out_dir) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", manifest_path));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("{}: {}", manifest_path, e.what()));
  }
  if (!doc.contains("argv") || !doc["argv"].is_array()) throw FormatError("manifest has no argv");
  std::vector<std::string> args;
  const auto& argv = doc["argv"];
  for (std::size_t i = 0; i < argv.size(); ++i) {
    const std::string a = argv[i].get<std::string>();
    if (a == "--out") {
      ++i;
      continue;
    }
    if (a.rfind("--out=", 0) == 0) continue;
    args.push_back(a);
  }
  if (args.empty() || args.front() == "rerun") throw FormatError("manifest argv does not name a command");
  args.push_back("--out");
  args.push_back(out_dir);
  return args;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Probe how rotary position embeddings shape per-dimension attention use", "rope_probe"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ROPE_PROBE_VERSION);

  std::optional<int> threads;
  std::string out_dir = "rope_probe_out";
  auto common = [&](CLI::App* sub) {
    sub->add_option("--threads", threads, "Worker thread cap (ROPE_PROBE_THREADS if unset)")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", out_dir, "Output directory");
  };

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train the toy retrieval task and write a checkpoint");
  train_flags.attach(train_cmd);
  common(train_cmd);

  AnalyzeFlags analyze_flags;
  auto* analyze_cmd = app.add_subcommand("analyze", "Per-dimension magnitudes and ablation sweep of a checkpoint");
  analyze_cmd->add_option("--checkpoint", analyze_flags.checkpoint)->required();
  analyze_cmd->add_option("--ablate-ns", analyze_flags.ablate_ns, "Dimension counts to remove")->delimiter(',');
  analyze_cmd->add_option("--episodes", analyze_flags.episodes)->check(CLI::PositiveNumber);
  analyze_cmd->add_option("--episode-seed", analyze_flags.episode_seed);
  analyze_cmd->add_option("--svg", analyze_flags.svg)->check(CLI::IsMember({"on", "off"}));
  analyze_cmd->add_option("--target", analyze_flags.target, "Zero q and k, or q only")->check(CLI::IsMember({"qk", "q"}));
  analyze_cmd->add_option("--proj-matrix", analyze_flags.proj_matrix, "Text matrix whose row L1 norms to report");
  analyze_cmd->add_option("--proj-layout", analyze_flags.proj_layout, "Row layout of --proj-matrix")
      ->check(CLI::IsMember({"adjacent", "half-split"}));
  common(analyze_cmd);

  MaskFlags mask_flags;
  auto* mask_cmd = app.add_subcommand("mask-fit", "Fit per-head query utility masks");
  mask_cmd->add_option("--snapshots", mask_flags.snapshots, "QKV containers, one head each");
  mask_cmd->add_option("--from-checkpoint", mask_flags.checkpoint, "Sample snapshots from a toy checkpoint");
  mask_cmd->add_option("--snapshot-count", mask_flags.snapshot_count);
  mask_cmd->add_option("--alpha", mask_flags.alpha, "L1 weight (default 1/(2D))")->check(CLI::NonNegativeNumber);
  mask_cmd->add_option("--steps", mask_flags.steps);
  mask_cmd->add_option("--lr", mask_flags.lr)->check(CLI::PositiveNumber);
  mask_cmd->add_option("--init", mask_flags.init)->check(CLI::Range(0.0, 1.0));
  mask_cmd->add_option("--seed", mask_flags.seed);
  common(mask_cmd);

  HeadScoreFlags score_flags;
  auto* score_cmd = app.add_subcommand("head-score", "Retrieval-head scores from attention records");
  score_cmd->add_option("--attn", score_flags.attn, "ATTN containers")->required();
  score_cmd->add_option("--threshold", score_flags.threshold);
  score_cmd->add_option("--renormalize-bos", score_flags.renormalize_bos)->check(CLI::IsMember({"on", "off"}));
  common(score_cmd);

  ReproduceFlags repro_flags;
  auto* repro_cmd = app.add_subcommand("reproduce-fig1", "Paired RoPE / no-RoPE runs with trend verdicts");
  repro_cmd->add_option("--scale-preset", repro_flags.scale_preset)->check(CLI::IsMember({"full", "desk"}));
  repro_cmd->add_option("--seed", repro_flags.seed);
  repro_cmd->add_option("--episodes", repro_flags.episodes, "Ablation episodes per cell")->check(CLI::PositiveNumber);
  common(repro_cmd);

  std::string manifest_path;
  auto* rerun_cmd = app.add_subcommand("rerun", "Repeat the command recorded in a manifest");
  rerun_cmd->add_option("--manifest", manifest_path)->required();
  rerun_cmd->add_option("--out", out_dir, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Session session{args, out, err, out_dir, std::nullopt};
  try {
    if (rerun_cmd->parsed()) return run(rerun_args(manifest_path, out_dir), out, err);
    kernels::set_thread_count(resolve_threads(threads));
    if (train_cmd->parsed()) cmd_train(session, train_flags);
    if (analyze_cmd->parsed()) cmd_analyze(session, analyze_flags);
    if (mask_cmd->parsed()) cmd_mask_fit(session, mask_flags);
    if (score_cmd->parsed()) cmd_head_score(session, score_flags);
    if (repro_cmd->parsed()) cmd_reproduce_fig1(session, repro_flags);
    if (session.manifest) session.manifest->finish("ok");
    return kExitOk;
  } catch (const std::exception& e) {
    int code = 1;
    if (dynamic_cast<const NumericError*>(&e)) {
      code = kExitNumeric;
    } else if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) {
      code = kExitIo;
    } else if (dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const std::out_of_range*>(&e)) {
      code = kExitUsage;
    }
    err << "error: " << e.what() << "\n";
    if (session.manifest) {
      try {
        session.manifest->finish("failed", e.what());
      } catch (const std::exception&) {
      }
    }
    return code;
  }
}

}  // namespace rope_probe::cli
