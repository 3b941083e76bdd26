#include "rope_probe/kernels.hpp"

#include <cmath>
#include <exception>
#include <fmt/format.h>
#include <omp.h>

#include "rope_probe/errors.hpp"

namespace rope_probe::kernels {

namespace {

// Exceptions must not leave an OpenMP region. Keeps the failure with the
// lowest loop index and rethrows it after the region joins.
class RegionErrors {
 public:
  template <typename F>
  void run(std::int64_t index, F&& body) noexcept {
    try {
      body();
    } catch (...) {
#pragma omp critical(rope_probe_region_errors)
      if (!error_ || index < index_) {
        error_ = std::current_exception();
        index_ = index;
      }
    }
  }

  void rethrow() const {
    if (error_) std::rethrow_exception(error_);
  }

 private:
  std::exception_ptr error_;
  std::int64_t index_ = 0;
};

}  // namespace

void set_thread_count(int threads) {
  if (threads > 0) omp_set_num_threads(threads);
}

int thread_count() { return omp_get_max_threads(); }

EpisodeContext EpisodeContext::from(const TaskConfig& config) {
  EpisodeContext ctx;
  ctx.scale = config.scale;
  if (config.rope_enabled) ctx.rope.emplace(config.rope());
  return ctx;
}

namespace {

// Everything one episode contributes to the batch gradient.
struct EpisodeGrad {
  double loss = 0.0;
  std::vector<double> gq;  // [d]
  Tensor gk;               // [s x d], row j belongs to subset[j]
  Tensor gv;               // [s x d]
  std::vector<double> p;   // softmax over all n values
  std::vector<double> a;   // attention output
};

struct Scratch {
  Tensor kr;
  std::vector<double> scores;
  std::vector<double> logits;
  std::vector<double> ga;
  std::vector<double> dkr;
};

double episode_pass(const EmbeddingStore& store, const Episode& ep, const EpisodeContext& ctx,
                    Scratch& ws, EpisodeGrad* out) {
  const std::size_t d = store.dim();
  const std::size_t n = store.size();
  const std::size_t s = ep.subset.size();
  const double c = score_scale(ctx.scale, d);
  const auto q = store.q.row(ep.target);

  if (ws.kr.rows() != s || ws.kr.cols() != d) ws.kr = Tensor({s, d});
  ws.scores.resize(s);
  for (std::size_t j = 0; j < s; ++j) {
    const auto k = store.k.row(ep.subset[j]);
    auto kr = ws.kr.row(j);
    if (ctx.rope) {
      ctx.rope->rotate_into(k, ep.positions[j], +1, kr);
    } else {
      std::copy(k.begin(), k.end(), kr.begin());
    }
    ws.scores[j] = c * dot(q, kr);
  }
  const std::vector<double> w = softmax(ws.scores);

  std::vector<double> a(d, 0.0);
  for (std::size_t j = 0; j < s; ++j) {
    const auto v = store.v.row(ep.subset[j]);
    for (std::size_t x = 0; x < d; ++x) a[x] += w[j] * v[x];
  }

  ws.logits.resize(n);
  for (std::size_t l = 0; l < n; ++l) ws.logits[l] = dot(a, store.v.row(l));
  const double lse = log_sum_exp(ws.logits);
  const double loss = lse - ws.logits[ep.target];
  if (out == nullptr) return loss;

  out->loss = loss;
  out->p.resize(n);
  for (std::size_t l = 0; l < n; ++l) out->p[l] = std::exp(ws.logits[l] - lse);

  // dL/da = sum_l (p_l - [l == target]) v_l
  ws.ga.assign(d, 0.0);
  for (std::size_t l = 0; l < n; ++l) {
    const double g = out->p[l] - (l == ep.target ? 1.0 : 0.0);
    const auto v = store.v.row(l);
    for (std::size_t x = 0; x < d; ++x) ws.ga[x] += g * v[x];
  }

  std::vector<double> dw(s);
  double inner = 0.0;
  for (std::size_t j = 0; j < s; ++j) {
    dw[j] = dot(ws.ga, store.v.row(ep.subset[j]));
    inner += w[j] * dw[j];
  }

  out->gq.assign(d, 0.0);
  if (out->gk.rows() != s || out->gk.cols() != d) {
    out->gk = Tensor({s, d});
    out->gv = Tensor({s, d});
  }
  ws.dkr.resize(d);
  for (std::size_t j = 0; j < s; ++j) {
    const double ds = w[j] * (dw[j] - inner);
    const auto kr = ws.kr.row(j);
    for (std::size_t x = 0; x < d; ++x) {
      out->gq[x] += c * ds * kr[x];
      ws.dkr[x] = c * ds * q[x];
    }
    auto gk = out->gk.row(j);
    if (ctx.rope) {
      ctx.rope->rotate_into(ws.dkr, ep.positions[j], -1, gk);
    } else {
      std::copy(ws.dkr.begin(), ws.dkr.end(), gk.begin());
    }
    auto gv = out->gv.row(j);
    for (std::size_t x = 0; x < d; ++x) gv[x] = w[j] * ws.ga[x];
  }
  out->a = std::move(a);
  return loss;
}

void check_episode(const EmbeddingStore& store, const Episode& ep) {
  if (ep.target >= store.size()) throw ShapeError(fmt::format("target {} out of range", ep.target));
  if (ep.subset.empty() || ep.subset.size() != ep.positions.size()) {
    throw ShapeError("episode subset and positions must be non-empty and aligned");
  }
  for (auto i : ep.subset) {
    if (i >= store.size()) throw ShapeError(fmt::format("subset index {} out of range", i));
  }
}

void add_row(Tensor& t, std::size_t r, std::span<const double> delta, double factor = 1.0) {
  auto row = t.row(r);
  for (std::size_t x = 0; x < row.size(); ++x) row[x] += factor * delta[x];
}

// Sparse contributions in episode order. Shared by both policies so the
// per-element summation order is fixed.
void accumulate_sparse(std::span<const Episode> episodes, const std::vector<EpisodeGrad>& grads,
                       BatchGradient& out) {
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode& ep = episodes[e];
    const EpisodeGrad& g = grads[e];
    add_row(out.q, ep.target, g.gq);
    out.q_rows[ep.target] = true;
    for (std::size_t j = 0; j < ep.subset.size(); ++j) {
      add_row(out.k, ep.subset[j], g.gk.row(j));
      add_row(out.v, ep.subset[j], g.gv.row(j));
      out.k_rows[ep.subset[j]] = true;
    }
    add_row(out.v, ep.target, g.a, -1.0);
  }
}

BatchGradient empty_gradient(const EmbeddingStore& store) {
  BatchGradient out;
  out.q = Tensor::zeros_like(store.q);
  out.k = Tensor::zeros_like(store.k);
  out.v = Tensor::zeros_like(store.v);
  out.q_rows.assign(store.size(), false);
  out.k_rows.assign(store.size(), false);
  out.v_rows.assign(store.size(), true);
  return out;
}

void finish(BatchGradient& out, const std::vector<EpisodeGrad>& grads) {
  const double inv = 1.0 / static_cast<double>(grads.size());
  double total = 0.0;
  for (const auto& g : grads) total += g.loss;
  out.mean_loss = total * inv;
  for (auto* t : {&out.q, &out.k, &out.v}) {
    for (auto& x : t->data()) x *= inv;
  }
}

BatchGradient reference_batch(const EmbeddingStore& store, std::span<const Episode> episodes,
                              const EpisodeContext& ctx) {
  std::vector<EpisodeGrad> grads(episodes.size());
  Scratch ws;
  for (std::size_t e = 0; e < episodes.size(); ++e) episode_pass(store, episodes[e], ctx, ws, &grads[e]);

  BatchGradient out = empty_gradient(store);
  accumulate_sparse(episodes, grads, out);
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    for (std::size_t l = 0; l < store.size(); ++l) add_row(out.v, l, grads[e].a, grads[e].p[l]);
  }
  finish(out, grads);
  return out;
}

BatchGradient parallel_batch(const EmbeddingStore& store, std::span<const Episode> episodes,
                             const EpisodeContext& ctx) {
  const auto count = static_cast<std::int64_t>(episodes.size());
  std::vector<EpisodeGrad> grads(episodes.size());
  RegionErrors errors;
#pragma omp parallel
  {
    Scratch ws;
#pragma omp for schedule(static)
    for (std::int64_t e = 0; e < count; ++e) {
      errors.run(e, [&] { episode_pass(store, episodes[e], ctx, ws, &grads[e]); });
    }
  }
  errors.rethrow();

  BatchGradient out = empty_gradient(store);
  accumulate_sparse(episodes, grads, out);

  // Dense V term row by row; each row still sums episodes in order.
  const auto rows = static_cast<std::int64_t>(store.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t l = 0; l < rows; ++l) {
    for (std::size_t e = 0; e < grads.size(); ++e) {
      add_row(out.v, static_cast<std::size_t>(l), grads[e].a, grads[e].p[l]);
    }
  }
  finish(out, grads);
  return out;
}

}  // namespace

double episode_loss(const EmbeddingStore& store, const Episode& episode, const EpisodeContext& ctx) {
  check_episode(store, episode);
  Scratch ws;
  return episode_pass(store, episode, ctx, ws, nullptr);
}

std::vector<double> batch_losses(const EmbeddingStore& store, std::span<const Episode> episodes,
                                 const EpisodeContext& ctx, ExecPolicy policy) {
  for (const auto& ep : episodes) check_episode(store, ep);
  std::vector<double> losses(episodes.size());
  if (policy == ExecPolicy::kSerial) {
    Scratch ws;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
      losses[e] = episode_pass(store, episodes[e], ctx, ws, nullptr);
    }
    return losses;
  }
  const auto count = static_cast<std::int64_t>(episodes.size());
  RegionErrors errors;
#pragma omp parallel
  {
    Scratch ws;
#pragma omp for schedule(static)
    for (std::int64_t e = 0; e < count; ++e) {
      errors.run(e, [&] { losses[e] = episode_pass(store, episodes[e], ctx, ws, nullptr); });
    }
  }
  errors.rethrow();
  return losses;
}

BatchGradient batch_loss_and_grad(const EmbeddingStore& store, std::span<const Episode> episodes,
                                  const EpisodeContext& ctx, ExecPolicy policy) {
  if (episodes.empty()) throw std::invalid_argument("empty batch");
  for (const auto& ep : episodes) check_episode(store, ep);
  return policy == ExecPolicy::kSerial ? reference_batch(store, episodes, ctx)
                                       : parallel_batch(store, episodes, ctx);
}

namespace {

struct SnapshotTerm {
  double distortion = 0.0;
  std::vector<double> grad;
};

SnapshotTerm snapshot_term(const PreparedHead& head, std::span<const double> thetas,
                           const PreparedSnapshot& snap, std::span<const double> u, bool with_grad) {
  const std::size_t d = head.dim;
  const std::size_t s = snap.rotated_keys.rows();
  const double c = score_scale(head.scale, d);

  std::vector<double> qm(d);
  for (std::size_t x = 0; x < d; ++x) qm[x] = snap.q[x] * u[x];
  std::vector<double> qr = qm;
  if (head.rope) rotate_signed_into(qm, snap.query_position, thetas, *head.rope, qr);

  std::vector<double> scores(s);
  for (std::size_t j = 0; j < s; ++j) scores[j] = c * dot(qr, snap.rotated_keys.row(j));
  const auto w = softmax(scores);

  std::vector<double> diff(d, 0.0);
  for (std::size_t j = 0; j < s; ++j) {
    const auto v = snap.values.row(j);
    for (std::size_t x = 0; x < d; ++x) diff[x] += w[j] * v[x];
  }
  SnapshotTerm term;
  for (std::size_t x = 0; x < d; ++x) {
    diff[x] = snap.reference[x] - diff[x];
    term.distortion += diff[x] * diff[x];
  }
  if (!with_grad) return term;

  // d/d out of ||ref - out||^2 is -2 (ref - out)
  std::vector<double> dw(s);
  double inner = 0.0;
  for (std::size_t j = 0; j < s; ++j) {
    dw[j] = -2.0 * dot(diff, snap.values.row(j));
    inner += w[j] * dw[j];
  }
  std::vector<double> dqr(d, 0.0);
  for (std::size_t j = 0; j < s; ++j) {
    const double ds = c * w[j] * (dw[j] - inner);
    const auto kr = snap.rotated_keys.row(j);
    for (std::size_t x = 0; x < d; ++x) dqr[x] += ds * kr[x];
  }
  std::vector<double> dqm = dqr;
  if (head.rope) rotate_signed_into(dqr, -snap.query_position, thetas, *head.rope, dqm);
  term.grad.resize(d);
  for (std::size_t x = 0; x < d; ++x) term.grad[x] = dqm[x] * snap.q[x];
  return term;
}

}  // namespace

MaskObjective mask_objective(const PreparedHead& head, std::span<const double> u, double alpha,
                             bool with_grad, ExecPolicy policy) {
  if (head.snapshots.empty()) throw std::invalid_argument("mask objective needs at least one snapshot");
  if (u.size() != head.dim) throw ShapeError(fmt::format("mask length {} vs head dim {}", u.size(), head.dim));
  const std::vector<double> thetas = head.rope ? frequencies(*head.rope) : std::vector<double>{};

  std::vector<SnapshotTerm> terms(head.snapshots.size());
  if (policy == ExecPolicy::kSerial) {
    for (std::size_t i = 0; i < terms.size(); ++i) {
      terms[i] = snapshot_term(head, thetas, head.snapshots[i], u, with_grad);
    }
  } else {
    const auto count = static_cast<std::int64_t>(terms.size());
    RegionErrors errors;
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < count; ++i) {
      errors.run(i, [&] { terms[i] = snapshot_term(head, thetas, head.snapshots[i], u, with_grad); });
    }
    errors.rethrow();
  }

  MaskObjective out;
  const double inv = 1.0 / static_cast<double>(terms.size());
  for (const auto& t : terms) out.distortion += t.distortion;
  out.distortion *= inv;
  for (double x : u) out.l1 += x;
  out.objective = out.distortion + alpha * out.l1;
  if (with_grad) {
    out.grad.assign(head.dim, 0.0);
    for (const auto& t : terms) {
      for (std::size_t x = 0; x < head.dim; ++x) out.grad[x] += t.grad[x];
    }
    for (auto& g : out.grad) g = g * inv + alpha;
  }
  if (!std::isfinite(out.objective)) throw NumericError("mask objective is not finite");
  return out;
}

}  // namespace rope_probe::kernels
