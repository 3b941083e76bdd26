#include "rope_probe/toy_task.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "rope_probe/autodiff.hpp"
#include "rope_probe/errors.hpp"
#include "rope_probe/kernels.hpp"

namespace rope_probe {

void TaskConfig::validate() const {
  if (n == 0 || subset_size == 0 || dim == 0 || batch_size == 0 || samples_per_epoch == 0) {
    throw std::invalid_argument("task counts must be positive");
  }
  if (max_position <= 0) throw std::invalid_argument("max_position must be positive");
  if (dim % 2 != 0) throw std::invalid_argument(fmt::format("dim {} is not even", dim));
  if (subset_size > n) {
    throw std::invalid_argument(fmt::format("subset size {} exceeds tuple count {}", subset_size, n));
  }
  if (static_cast<std::int64_t>(subset_size) > max_position) {
    throw std::invalid_argument(
        fmt::format("subset size {} exceeds max position {}", subset_size, max_position));
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(rope_base > 0.0)) throw std::invalid_argument("RoPE base must be positive");
}

RopeConfig TaskConfig::rope() const {
  return RopeConfig{.base = rope_base, .pairs = dim / 2, .layout = layout, .max_position = max_position};
}

std::size_t TaskConfig::steps_per_epoch() const {
  if (epoch_unit == EpochUnit::kSteps) return samples_per_epoch;
  return std::max<std::size_t>(1, samples_per_epoch / batch_size);
}

TaskConfig full_preset() { return TaskConfig{}; }

TaskConfig desk_preset() {
  TaskConfig c;
  c.n = 500;
  c.dim = 64;
  c.subset_size = 64;
  c.epochs = 20;
  c.samples_per_epoch = 2000;
  return c;
}

void EmbeddingStore::validate() const {
  if (!q.same_shape(k) || !q.same_shape(v) || q.rank() != 2) {
    throw ShapeError("embedding tables must share one n x 2D shape");
  }
  q.check_finite("Q");
  k.check_finite("K");
  v.check_finite("V");
}

EmbeddingStore init_store(const TaskConfig& config, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config.dim)));
  auto table = [&] {
    Tensor t({config.n, config.dim});
    for (auto& x : t.data()) x = normal(rng);
    return t;
  };
  EmbeddingStore store;
  store.q = table();
  store.k = table();
  store.v = table();
  return store;
}

namespace {

// Floyd's algorithm: k distinct values from [0, range), insertion order.
std::vector<std::size_t> sample_distinct(std::size_t range, std::size_t k, Rng& rng) {
  std::vector<std::size_t> picked;
  picked.reserve(k);
  std::vector<bool> taken(range, false);
  for (std::size_t j = range - k; j < range; ++j) {
    std::uniform_int_distribution<std::size_t> pick(0, j);
    const std::size_t t = pick(rng);
    const std::size_t chosen = taken[t] ? j : t;
    taken[chosen] = true;
    picked.push_back(chosen);
  }
  return picked;
}

}  // namespace

Episode sample_episode(const TaskConfig& config, Rng& rng) {
  Episode e;
  std::uniform_int_distribution<std::size_t> pick_target(0, config.n - 1);
  e.target = pick_target(rng);

  // Others come from [0, n-1) with indices >= target shifted past it.
  auto others = sample_distinct(config.n - 1, config.subset_size - 1, rng);
  e.subset.reserve(config.subset_size);
  e.subset.push_back(e.target);
  for (auto o : others) e.subset.push_back(o >= e.target ? o + 1 : o);
  std::shuffle(e.subset.begin(), e.subset.end(), rng);

  auto positions = sample_distinct(static_cast<std::size_t>(config.max_position), config.subset_size, rng);
  std::shuffle(positions.begin(), positions.end(), rng);
  e.positions.assign(positions.begin(), positions.end());
  return e;
}

Var build_episode_loss(Graph& g, Var q, Var k, Var v, const Episode& episode, const TaskConfig& config) {
  const std::size_t n = g.value(v).rows();
  const std::size_t dim = g.value(v).cols();
  const Var qi = g.select_rows(q, {episode.target});
  Var ks = g.select_rows(k, episode.subset);
  if (config.rope_enabled) ks = g.rope_rotate(ks, episode.positions, config.rope());
  const Var vs = g.select_rows(v, episode.subset);

  const Var scores = g.scale(g.matmul_transposed(qi, ks), score_scale(config.scale, dim));
  const Var a = g.matmul(g.softmax(scores), vs);
  const Var p = g.softmax(g.matmul_transposed(a, v));

  Tensor onehot({1, n});
  onehot[episode.target] = 1.0;
  return g.scale(g.log(g.sum(g.mask(p, std::move(onehot)))), -1.0);
}

double episode_loss(const EmbeddingStore& store, const Episode& episode, const TaskConfig& config) {
  Graph g;
  const Var loss = build_episode_loss(g, g.constant(store.q), g.constant(store.k), g.constant(store.v),
                                      episode, config);
  return g.scalar(loss);
}

StoreGradient episode_loss_and_grad(const EmbeddingStore& store, const Episode& episode,
                                    const TaskConfig& config) {
  Graph g;
  const Var q = g.parameter(store.q);
  const Var k = g.parameter(store.k);
  const Var v = g.parameter(store.v);
  const Var loss = build_episode_loss(g, q, k, v, episode, config);
  auto grads = g.backward(loss);
  return {g.scalar(loss), std::move(grads[0].value), std::move(grads[1].value), std::move(grads[2].value)};
}

TrainResult train(const TaskConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  Rng rng(config.seed);
  EmbeddingStore initial = init_store(config, rng);
  return train_from(config, std::move(initial), rng, on_epoch);
}

TrainResult train_from(const TaskConfig& config, EmbeddingStore initial, Rng& rng,
                       const EpochCallback& on_epoch) {
  config.validate();
  initial.validate();
  if (initial.size() != config.n || initial.dim() != config.dim) {
    throw ShapeError("initial store does not match the task config");
  }

  TrainResult result{std::move(initial), {}};
  EmbeddingStore& store = result.store;
  const auto ctx = kernels::EpisodeContext::from(config);
  OptimizerConfig opt_config{.kind = config.optimizer, .learning_rate = config.learning_rate};
  std::vector<Tensor> params{store.q, store.k, store.v};
  Optimizer optimizer(opt_config, params);

  const std::size_t steps = config.steps_per_epoch();
  std::vector<Episode> batch(config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      for (auto& e : batch) e = sample_episode(config, rng);
      auto grad = kernels::batch_loss_and_grad(store, batch, ctx, kernels::ExecPolicy::kParallel);
      if (!std::isfinite(grad.mean_loss)) {
        throw NumericError(fmt::format("training diverged: loss {} at epoch {} step {}",
                                       grad.mean_loss, epoch, step));
      }
      params[0] = std::move(store.q);
      params[1] = std::move(store.k);
      params[2] = std::move(store.v);
      std::vector<Tensor> grads{std::move(grad.q), std::move(grad.k), std::move(grad.v)};
      std::vector<std::vector<bool>> touched{std::move(grad.q_rows), std::move(grad.k_rows),
                                             std::move(grad.v_rows)};
      optimizer.step_rows(params, grads, touched);
      store.q = std::move(params[0]);
      store.k = std::move(params[1]);
      store.v = std::move(params[2]);
      total += grad.mean_loss;
    }
    const double mean = total / static_cast<double>(steps);
    result.epoch_losses.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  store.validate();
  return result;
}

double eval_loss(const EmbeddingStore& store, const TaskConfig& config, std::size_t episodes,
                 Rng& rng) {
  if (episodes == 0) throw std::invalid_argument("eval_loss needs at least one episode");
  config.validate();
  std::vector<Episode> batch(episodes);
  for (auto& e : batch) e = sample_episode(config, rng);
  const auto ctx = kernels::EpisodeContext::from(config);
  const auto losses = kernels::batch_losses(store, batch, ctx, kernels::ExecPolicy::kParallel);
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(episodes);
}

}  // namespace rope_probe
