// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fmt/format.h>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "cli.hpp"
#include "fixtures.hpp"
#include "gradient_probes.hpp"
#include "oracles.hpp"
#include "rope_probe/head_score.hpp"
#include "rope_probe/rope.hpp"
#include "rope_probe/snapshot_io.hpp"
#include "rope_probe/toy_task.hpp"
#include "rope_probe/utility_mask.hpp"

using namespace rope_probe;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

// ---- A1 -------------------------------------------------------------------

Outcome rope_identity() {
  const RopeConfig config{.base = 10000.0, .pairs = 64, .layout = RopeLayout::kHalfSplit, .max_position = 2048};
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::int64_t> pos(0, 2048);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto q = oracle::gaussian(128, rng);
    const auto k = oracle::gaussian(128, rng);
    const std::int64_t m = pos(rng), n = pos(rng);
    const auto qm = rotate(q, m, config);
    const auto kn = rotate(k, n, config);
    const auto rel = rotate_signed(k, n - m, config);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t d = 0; d < 128; ++d) {
      lhs += qm[d] * kn[d];
      rhs += q[d] * rel[d];
    }
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return {worst < 1e-10, fmt::format("max |rot(q,m).rot(k,n) - q.rot(k,n-m)| = {:.3g} over 10000 cases", worst)};
}

// ---- A2 -------------------------------------------------------------------

Outcome gradient_fidelity() {
  double retrieval = 0.0, mask = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    retrieval = std::max({retrieval, probe::retrieval_gradient_error(seed, true),
                          probe::retrieval_gradient_error(seed, false)});
    mask = std::max(mask, probe::mask_gradient_error(seed));
  }
  return {retrieval < 1e-5 && mask < 1e-5,
          fmt::format("max relative error: retrieval loss {:.3g}, mask objective {:.3g} (100 seeds)", retrieval, mask)};
}

// ---- A3, A4, A8 -----------------------------------------------------------

// Storage index of canonical dimension c.
std::size_t storage_of(std::size_t c, const TaskConfig& config) {
  if (config.layout == RopeLayout::kAdjacentPairs) return c;
  return c / 2 + (c % 2) * (config.dim / 2);
}

double band_mean_abs(const Tensor& table, const TaskConfig& config, std::size_t begin, std::size_t end) {
  double total = 0.0;
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (std::size_t c = begin; c < end; ++c) total += std::abs(table(r, storage_of(c, config)));
  }
  return total / static_cast<double>(table.rows() * (end - begin));
}

struct Run {
  EmbeddingStore store;
  TaskConfig config;
};

Run load_run(const fs::path& path) {
  const auto container = io::read_snapshots(path).container;
  return {io::to_embedding_store(container), io::checkpoint_config(container)};
}

// Mean brute-force loss with canonical dims [begin, end) zeroed in q (and k).
double oracle_eval(const Run& run, const std::vector<Episode>& episodes, std::size_t begin, std::size_t end,
                   bool zero_keys) {
  auto q = oracle::rows_of<double>(run.store.q.data(), run.config.dim);
  auto k = oracle::rows_of<double>(run.store.k.data(), run.config.dim);
  const auto v = oracle::rows_of<double>(run.store.v.data(), run.config.dim);
  for (std::size_t c = begin; c < end; ++c) {
    const std::size_t s = storage_of(c, run.config);
    for (auto& row : q) row[s] = 0.0;
    if (zero_keys) {
      for (auto& row : k) row[s] = 0.0;
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(run.config.dim));
  const bool half = run.config.layout == RopeLayout::kHalfSplit;
  double total = 0.0;
  for (const auto& e : episodes) {
    total += oracle::retrieval_loss<double>(q, k, v, e.target, e.subset, e.positions, run.config.rope_enabled, half,
                                            run.config.rope_base, scale);
  }
  return total / static_cast<double>(episodes.size());
}

struct DeskRuns {
  bool ok = false;
  std::string error;
  json verdict;
  double rope_q = 0, rope_k = 0, flat_q = 0, flat_k = 0;
  double rope_base = 0, rope_first16 = 0, rope_last16 = 0, rope_last32 = 0;
  double flat_base = 0, flat_first16 = 0, flat_last16 = 0;
  double query_first16 = 0, query_last16 = 0;
  double seconds = 0;
};

DeskRuns reproduce_desk_runs(const fs::path& dir) {
  DeskRuns f;
  constexpr std::uint64_t kSeed = 0;
  constexpr std::size_t kEpisodes = 2000;
  const auto t0 = std::chrono::steady_clock::now();
  if (run_cli({"reproduce-fig1", "--scale-preset", "desk", "--seed", std::to_string(kSeed), "--episodes",
               std::to_string(kEpisodes), "--out", dir.string()}) != 0) {
    f.error = "reproduce-fig1 failed";
    return f;
  }
  f.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  f.verdict = json::parse(slurp(dir / "verdict.json"));

  const Run rope = load_run(dir / "checkpoint_rope.rprb");
  const Run flat = load_run(dir / "checkpoint_norope.rprb");
  const std::size_t dim = rope.config.dim;
  f.rope_q = band_mean_abs(rope.store.q, rope.config, 0, 16) / band_mean_abs(rope.store.q, rope.config, dim - 16, dim);
  f.rope_k = band_mean_abs(rope.store.k, rope.config, 0, 16) / band_mean_abs(rope.store.k, rope.config, dim - 16, dim);
  f.flat_q = band_mean_abs(flat.store.q, flat.config, 0, 16) / band_mean_abs(flat.store.q, flat.config, dim - 16, dim);
  f.flat_k = band_mean_abs(flat.store.k, flat.config, 0, 16) / band_mean_abs(flat.store.k, flat.config, dim - 16, dim);

  auto stream = [&](const TaskConfig& config) {
    Rng rng(derive_seed(kSeed, "ablation"));
    std::vector<Episode> episodes(kEpisodes);
    for (auto& e : episodes) e = sample_episode(config, rng);
    return episodes;
  };
  const auto rope_eps = stream(rope.config);
  f.rope_base = oracle_eval(rope, rope_eps, 0, 0, true);
  f.rope_first16 = oracle_eval(rope, rope_eps, 0, 16, true);
  f.rope_last16 = oracle_eval(rope, rope_eps, dim - 16, dim, true);
  f.rope_last32 = oracle_eval(rope, rope_eps, dim - 32, dim, true);
  f.query_first16 = oracle_eval(rope, rope_eps, 0, 16, false);
  f.query_last16 = oracle_eval(rope, rope_eps, dim - 16, dim, false);
  const auto flat_eps = stream(flat.config);
  f.flat_base = oracle_eval(flat, flat_eps, 0, 0, true);
  f.flat_first16 = oracle_eval(flat, flat_eps, 0, 16, true);
  f.flat_last16 = oracle_eval(flat, flat_eps, dim - 16, dim, true);
  f.ok = true;
  return f;
}

Outcome magnitude_trend(const DeskRuns& f) {
  if (!f.ok) return {false, f.error};
  const bool trend = f.rope_q < 0.8 && f.rope_k < 0.8;
  const bool flat = f.flat_q >= 0.85 && f.flat_q <= 1.15 && f.flat_k >= 0.85 && f.flat_k <= 1.15;
  const bool agrees = f.verdict["magnitude_trend_rope"] == trend && f.verdict["magnitude_flat_norope"] == flat;
  return {trend && flat && agrees,
          fmt::format("first16/last16 mean |q|, |k|: RoPE {:.3f}, {:.3f}; no RoPE {:.3f}, {:.3f}; verdict file {}; "
                      "desk run {:.1f} s",
                      f.rope_q, f.rope_k, f.flat_q, f.flat_k, agrees ? "agrees" : "DISAGREES", f.seconds)};
}

Outcome ablation_trend(const DeskRuns& f) {
  if (!f.ok) return {false, f.error};
  const double rope_first = f.rope_first16 - f.rope_base;
  const double rope_last = f.rope_last16 - f.rope_base;
  const double flat_first = f.flat_first16 - f.flat_base;
  const double flat_last = f.flat_last16 - f.flat_base;
  const bool asymmetry = rope_first < 0.25 * rope_last && f.rope_last32 > f.rope_last16;
  const bool symmetry = flat_first > 0.0 && flat_last > 0.0 &&
                        std::max(flat_first, flat_last) < 2.0 * std::min(flat_first, flat_last);
  const bool agrees =
      f.verdict["ablation_asymmetry_rope"] == asymmetry && f.verdict["ablation_symmetry_norope"] == symmetry;
  return {asymmetry && symmetry && agrees,
          fmt::format("loss increase first16 / last16: RoPE {:.3g} / {:.3g} (last32 {:.6f} > last16 {:.6f}); "
                      "no RoPE {:.3g} / {:.3g}; verdict file {}",
                      rope_first, rope_last, f.rope_last32, f.rope_last16, flat_first, flat_last,
                      agrees ? "agrees" : "DISAGREES")};
}

Outcome intervention_order(const DeskRuns& f) {
  if (!f.ok) return {false, f.error};
  const double first = f.query_first16 - f.rope_base;
  const double last = f.query_last16 - f.rope_base;
  return {first < last, fmt::format("query-only masking loss increase: first16 {:.3g} < last16 {:.3g}", first, last)};
}

// ---- A5 -------------------------------------------------------------------

Outcome utility_oracle() {
  int passed = 0, total = 0;
  double worst_distortion = 0.0, worst_dead = 0.0, worst_live = 1.0;
  for (std::size_t z : {1u, 2u, 4u}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto fx = fixture::dead_dimension_head(1000 * z + seed, z);
      MaskFitConfig config;
      config.seed = seed;
      const auto mask = fit_mask(fx.head, config, kernels::ExecPolicy::kParallel);
      bool ok = mask.distortion < 1e-6 && mask.alpha == 1.0 / static_cast<double>(fx.head.info.dim);
      for (std::size_t d = 0; d < fx.dead.size(); ++d) {
        if (fx.dead[d]) {
          ok = ok && mask.u[d] < 0.5;
          worst_dead = std::max(worst_dead, mask.u[d]);
        } else {
          ok = ok && mask.u[d] > 0.5;
          worst_live = std::min(worst_live, mask.u[d]);
        }
      }
      worst_distortion = std::max(worst_distortion, mask.distortion);
      passed += ok;
      ++total;
    }
  }
  return {passed == total,
          fmt::format("{}/{} heads exact (z in 1,2,4 x 20 seeds); max dead u {:.3g}, min live u {:.3g}, "
                      "max distortion {:.3g}",
                      passed, total, worst_dead, worst_live, worst_distortion)};
}

// ---- A6 -------------------------------------------------------------------

Outcome head_score_closed_forms() {
  const auto all_context = fixture::all_context_record(0, 0);
  const auto uniform = fixture::uniform_record(0, 1, 40, 25, 5);
  const auto bos = fixture::bos_only_record(0, 2);
  const double a = score_head(std::span(&all_context, 1)).score;
  const double u = score_head(std::span(&uniform, 1)).score;
  const double b = score_head(std::span(&bos, 1)).score;
  const bool ok = std::abs(a - 1.0) <= 1e-12 && std::abs(u - 25.0 / 40.0) <= 1e-9 && b == 0.0;
  return {ok, fmt::format("all-context {:.17g}, uniform {:.17g} (c/T = 0.625), BOS-only {:.17g}", a, u, b)};
}

// ---- A7 -------------------------------------------------------------------

// Every output file except the manifest, whose timestamps differ.
bool same_outputs(const fs::path& a, const fs::path& b, std::string& why) {
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    const auto name = entry.path().filename();
    if (name == "manifest.json") continue;
    if (!fs::exists(b / name) || slurp(entry.path()) != slurp(b / name)) {
      why = name.string();
      return false;
    }
    ++compared;
  }
  if (compared == 0) why = "no outputs";
  return compared > 0;
}

Outcome determinism(const fs::path& dir) {
  std::vector<std::string> compared;
  std::string why;
  for (const char* out : {"train_a", "train_b"}) {
    if (run_cli({"train", "--preset", "desk", "--epochs", "2", "--seed", "5", "--threads", "1", "--out",
                 (dir / out).string()}) != 0) {
      return {false, "train failed"};
    }
  }
  if (!same_outputs(dir / "train_a", dir / "train_b", why)) return {false, "train output differs: " + why};
  compared.push_back("train");

  const auto fx = fixture::dead_dimension_head(77, 2);
  io::write_snapshots(dir / "head.rprb", io::make_qkv_container(fx.head));
  for (const char* out : {"mask_a", "mask_b"}) {
    if (run_cli({"mask-fit", "--snapshots", (dir / "head.rprb").string(), "--seed", "3", "--threads", "1", "--out",
                 (dir / out).string()}) != 0) {
      return {false, "mask-fit failed"};
    }
  }
  if (!same_outputs(dir / "mask_a", dir / "mask_b", why)) return {false, "mask-fit output differs: " + why};
  for (const char* out : {"ckmask_a", "ckmask_b"}) {
    if (run_cli({"mask-fit", "--from-checkpoint", (dir / "train_a" / "checkpoint.rprb").string(), "--snapshot-count",
                 "16", "--steps", "500", "--seed", "3", "--threads", "1", "--out", (dir / out).string()}) != 0) {
      return {false, "mask-fit from checkpoint failed"};
    }
  }
  if (!same_outputs(dir / "ckmask_a", dir / "ckmask_b", why)) return {false, "mask-fit output differs: " + why};
  return {true, "train, mask-fit on snapshots, mask-fit from checkpoint: all output files byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "rope_probe_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  bool all = true;
  auto report = [&](const char* id, const char* name, const std::function<Outcome()>& check) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all = all && o.pass;
    std::cout << fmt::format("{} {} {}: {} [{:.1f} s]", id, o.pass ? "PASS" : "FAIL", name, o.detail, s) << std::endl;
  };

  report("A1", "RoPE relative-position identity", rope_identity);
  report("A2", "gradient fidelity", gradient_fidelity);
  DeskRuns runs;
  report("A3", "magnitude trend at desk scale", [&] {
    runs = reproduce_desk_runs(dir / "desk");
    return magnitude_trend(runs);
  });
  report("A4", "ablation trend at desk scale", [&] { return ablation_trend(runs); });
  report("A5", "utility-mask dead-dimension oracle", utility_oracle);
  report("A6", "head-score closed forms", head_score_closed_forms);
  report("A7", "determinism with one thread", [&] { return determinism(dir / "determinism"); });
  report("A8", "query intervention ordering", [&] { return intervention_order(runs); });
  return all ? 0 : 1;
}
