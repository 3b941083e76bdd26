#include "rope_probe/dimension_analysis.hpp"

#include <cmath>
#include <fmt/format.h>

#include "rope_probe/errors.hpp"
#include "rope_probe/rope.hpp"

namespace rope_probe {

std::string_view to_string(DimSide side) { return side == DimSide::kFirst ? "first" : "last"; }

DimSide parse_side(std::string_view text) {
  if (text == "first") return DimSide::kFirst;
  if (text == "last") return DimSide::kLast;
  throw std::invalid_argument(fmt::format("unknown side '{}'", text));
}

namespace {

Tensor canonical_rows(const Tensor& t, const DimOrdering& ordering) {
  Tensor out = Tensor::zeros_like(t);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto row = to_canonical(t.row(r), ordering);
    std::copy(row.begin(), row.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace

EmbeddingStore canonicalize(const EmbeddingStore& store, RopeLayout layout) {
  const auto ordering = DimOrdering::for_layout(layout, store.dim() / 2);
  return {canonical_rows(store.q, ordering), canonical_rows(store.k, ordering),
          canonical_rows(store.v, ordering)};
}

std::vector<MagnitudeRow> magnitude_profile(const EmbeddingStore& store, RopeLayout layout) {
  store.validate();
  const auto ordering = DimOrdering::for_layout(layout, store.dim() / 2);
  const std::size_t n = store.size();
  std::vector<MagnitudeRow> rows(store.dim());
  for (std::size_t k = 0; k < store.dim(); ++k) {
    MagnitudeRow& row = rows[ordering.storage_to_canonical[k]];
    row.dim = ordering.storage_to_canonical[k];
    double abs_q = 0.0, abs_k = 0.0, sq_q = 0.0, sq_k = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double qv = store.q(i, k);
      const double kv = store.k(i, k);
      abs_q += std::abs(qv);
      abs_k += std::abs(kv);
      sq_q += qv * qv;
      sq_k += kv * kv;
    }
    const double inv = 1.0 / static_cast<double>(n);
    row.mean_abs_q = abs_q * inv;
    row.mean_abs_k = abs_k * inv;
    row.rms_q = std::sqrt(sq_q * inv);
    row.rms_k = std::sqrt(sq_k * inv);
  }
  return rows;
}

namespace {

double column_mean(const std::vector<MagnitudeRow>& rows, std::size_t begin, std::size_t end,
                   double MagnitudeRow::*field) {
  if (begin >= end || end > rows.size()) throw ShapeError("empty or out-of-range dimension band");
  double acc = 0.0;
  for (std::size_t d = begin; d < end; ++d) acc += rows[d].*field;
  return acc / static_cast<double>(end - begin);
}

}  // namespace

double mean_abs_q(const std::vector<MagnitudeRow>& rows, std::size_t begin, std::size_t end) {
  return column_mean(rows, begin, end, &MagnitudeRow::mean_abs_q);
}

double mean_abs_k(const std::vector<MagnitudeRow>& rows, std::size_t begin, std::size_t end) {
  return column_mean(rows, begin, end, &MagnitudeRow::mean_abs_k);
}

EmbeddingStore ablate(const EmbeddingStore& store, RopeLayout layout, DimSide side,
                      std::size_t count, AblationTarget target) {
  const std::size_t dim = store.dim();
  if (count > dim) throw std::out_of_range(fmt::format("cannot remove {} of {} dimensions", count, dim));
  const auto ordering = DimOrdering::for_layout(layout, dim / 2);
  EmbeddingStore out = store;
  for (std::size_t k = 0; k < dim; ++k) {
    const std::size_t c = ordering.storage_to_canonical[k];
    const bool removed = side == DimSide::kFirst ? c < count : c >= dim - count;
    if (!removed) continue;
    for (std::size_t i = 0; i < store.size(); ++i) {
      out.q(i, k) = 0.0;
      if (target == AblationTarget::kQueryAndKey) out.k(i, k) = 0.0;
    }
  }
  return out;
}

std::vector<AblationRow> ablation_sweep(const EmbeddingStore& store, const TaskConfig& config,
                                        const AblationPlan& plan) {
  for (auto count : plan.counts) {
    if (count > store.dim()) {
      throw std::out_of_range(fmt::format("cannot remove {} of {} dimensions", count, store.dim()));
    }
  }
  std::vector<AblationRow> rows;
  for (auto side : plan.sides) {
    for (auto count : plan.counts) {
      const EmbeddingStore ablated = ablate(store, config.layout, side, count, plan.target);
      Rng rng(plan.episode_seed);
      rows.push_back({side, count, eval_loss(ablated, config, plan.episodes, rng)});
    }
  }
  return rows;
}

std::vector<double> l1_row_norms(const Tensor& w) {
  if (w.rank() != 2) throw ShapeError("l1_row_norms expects a matrix");
  std::vector<double> norms(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (double x : w.row(r)) norms[r] += std::abs(x);
  }
  return norms;
}

}  // namespace rope_probe
