#include "adeptlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "adeptlab/rng.hpp"

namespace adeptlab {

namespace {

// Build the pool of tokens the generator may emit: everything in
// [0, vocab) except the neutral token and the excluded list. The key
// itself stays in the pool.
std::vector<std::size_t> token_pool(const TaskSpec& spec) {
  std::vector<std::size_t> pool;
  for (std::size_t t = 0; t < spec.vocab; ++t) {
    if (t == kNeutralToken) continue;
    if (std::find(spec.excluded_tokens.begin(), spec.excluded_tokens.end(),
                  t) != spec.excluded_tokens.end()) {
      continue;
    }
    pool.push_back(t);
  }
  return pool;
}

std::size_t argmax2(const std::vector<double>& logits) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[best]) best = c;
  return best;
}

std::size_t env_thread_cap() {
  const char* raw = std::getenv("ADEPT_LAB_THREADS");
  if (!raw) return 1;
  const long n = std::atol(raw);
  return n > 1 ? static_cast<std::size_t>(n) : 1;
}

}  // namespace

std::size_t task_label(const TaskSpec& spec,
                       const std::vector<std::size_t>& ids) {
  std::size_t count = 0;
  for (std::size_t id : ids) count += (id == spec.key) ? 1 : 0;
  const std::size_t needed =
      spec.kind == TaskKind::kKeyedPresence ? 1 : spec.threshold;
  return count >= needed ? 1 : 0;
}

Dataset generate(const TaskSpec& spec, std::size_t n) {
  if (n < 10) throw ArgumentError("generate needs at least 10 examples");
  if (n % 2 != 0 && n < 15) {
    throw ArgumentError(
        "odd example counts below 15 cannot keep every split balanced");
  }
  if (spec.key == kNeutralToken || spec.key >= spec.vocab) {
    throw ArgumentError("task key " + std::to_string(spec.key) +
                        " is reserved or out of vocab");
  }
  for (std::size_t t : spec.excluded_tokens) {
    if (t == spec.key) {
      throw ArgumentError("task key " + std::to_string(spec.key) +
                          " is also excluded");
    }
  }
  if (spec.min_len == 0 || spec.min_len > spec.max_len) {
    throw ArgumentError("bad sequence length range");
  }
  const std::vector<std::size_t> pool = token_pool(spec);
  if (pool.size() < 2) throw ArgumentError("token pool is nearly empty");

  Rng rng(spec.seed);
  const std::size_t attempt_limit = 100 * n;
  std::size_t attempts = 0;

  auto draw_with_label = [&](std::size_t want) {
    while (true) {
      if (++attempts > attempt_limit) {
        throw GenerationError("could not balance labels within " +
                              std::to_string(attempt_limit) + " attempts");
      }
      const std::size_t len =
          spec.min_len + rng.uniform_index(spec.max_len - spec.min_len + 1);
      std::vector<std::size_t> ids(len);
      for (std::size_t i = 0; i < len; ++i)
        ids[i] = pool[rng.uniform_index(pool.size())];
      if (task_label(spec, ids) == want) return Example{std::move(ids), want};
    }
  };

  // Alternating labels make every even-sized window exactly balanced.
  std::vector<Example> all;
  all.reserve(n);
  for (std::size_t i = 0; i < n; ++i) all.push_back(draw_with_label(i % 2));

  // Even-sized valid/test blocks; train absorbs the rest (and the odd
  // straggler only when it is large enough to stay within 45-55%).
  std::size_t side = 2 * std::max<std::size_t>(1, (n * 3) / 40);
  Dataset out;
  out.train.assign(all.begin(), all.end() - 2 * side);
  out.valid.assign(all.end() - 2 * side, all.end() - side);
  out.test.assign(all.end() - side, all.end());
  return out;
}

AdaptResult adapt(const BackboneModel& backbone, PeftMethod& method,
                  const Dataset& dataset, const AdaptOptions& opts) {
  if (!backbone.frozen()) {
    throw ContractError("adapt requires a frozen backbone");
  }
  if (opts.batch_size == 0) throw ArgumentError("adapt batch size is zero");
  if (opts.eval_interval == 0) throw ArgumentError("eval interval is zero");
  if (dataset.train.empty() || dataset.valid.empty()) {
    throw ArgumentError("adapt needs non-empty train and valid splits");
  }

  ParamGroups groups = trainable_tensors(method);
  std::vector<TensorPtr> all_params(groups.prompt);
  all_params.insert(all_params.end(), groups.network.begin(),
                    groups.network.end());
  for (const auto& p : all_params) p->zero_grad();

  AdaptResult result;
  auto snapshot = [&]() {
    std::vector<std::vector<double>> vals;
    for (const auto& p : all_params) vals.push_back(p->values());
    return vals;
  };
  std::vector<std::vector<double>> best = snapshot();
  double best_acc = -1.0;
  std::size_t best_step = 0;

  Rng rng(opts.seed);
  for (std::size_t step = 1; step <= opts.steps; ++step) {
    Graph g;
    TensorPtr total;
    for (std::size_t b = 0; b < opts.batch_size; ++b) {
      const Example& ex =
          dataset.train[rng.uniform_index(dataset.train.size())];
      TensorPtr e = backbone.embed(g, ex.ids);
      AppliedInput in = apply_method(g, e, method);
      std::vector<std::uint8_t> mask(ex.ids.size(), 1);
      TensorPtr logits = backbone.forward(g, concat_applied(g, in), mask);
      TensorPtr loss = g.cross_entropy(logits, {ex.label});
      total = total ? g.add(total, loss) : loss;
    }
    TensorPtr mean_loss =
        g.scale(total, 1.0 / static_cast<double>(opts.batch_size));
    const double loss_value = mean_loss->scalar();
    if (!std::isfinite(loss_value)) {
      throw TrainingError(
          "adapt loss became non-finite at step " + std::to_string(step),
          step);
    }
    g.backward(mean_loss);
    for (const auto& p : groups.prompt) {
      if (!p->has_grad()) continue;
      for (std::size_t i = 0; i < p->numel(); ++i)
        p->values()[i] -= opts.prompt_lr * p->grad()[i];
      p->zero_grad();
    }
    for (const auto& p : groups.network) {
      if (!p->has_grad()) continue;
      for (std::size_t i = 0; i < p->numel(); ++i)
        p->values()[i] -= opts.network_lr * p->grad()[i];
      p->zero_grad();
    }

    if (step % opts.eval_interval == 0 || step == opts.steps) {
      const EvalResult valid = evaluate(backbone, method, dataset.valid);
      result.history.push_back({step, loss_value, valid.accuracy});
      if (valid.accuracy > best_acc) {
        best_acc = valid.accuracy;
        best_step = step;
        best = snapshot();
      }
    }
  }

  if (opts.steps > 0) {
    for (std::size_t i = 0; i < all_params.size(); ++i)
      all_params[i]->values() = best[i];
    result.best_step = best_step;
    result.best_valid_accuracy = best_acc;
  }
  return result;
}

EvalResult evaluate(const BackboneModel& backbone, const PeftMethod& method,
                    const std::vector<Example>& split,
                    std::size_t prepend_neutral) {
  if (split.empty()) throw ArgumentError("evaluate got an empty split");

  EvalResult out;
  out.predictions.assign(split.size(), 0);

  auto predict_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      std::vector<std::size_t> ids;
      ids.reserve(split[i].ids.size() + prepend_neutral);
      ids.insert(ids.end(), prepend_neutral, kNeutralToken);
      ids.insert(ids.end(), split[i].ids.begin(), split[i].ids.end());
      Graph g;
      TensorPtr e = backbone.embed(g, ids);
      AppliedInput in = apply_method(g, e, method);
      std::vector<std::uint8_t> mask(ids.size(), 1);
      TensorPtr logits = backbone.forward(g, concat_applied(g, in), mask);
      out.predictions[i] = argmax2(logits->values());
    }
  };

  const std::size_t threads =
      std::min(env_thread_cap(), std::max<std::size_t>(1, split.size()));
  if (threads <= 1) {
    predict_range(0, split.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (split.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = t * chunk;
      const std::size_t hi = std::min(split.size(), lo + chunk);
      if (lo < hi) pool.emplace_back(predict_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  std::size_t hits = 0;
  for (std::size_t i = 0; i < split.size(); ++i)
    hits += (out.predictions[i] == split[i].label) ? 1 : 0;
  out.accuracy = static_cast<double>(hits) / static_cast<double>(split.size());
  return out;
}

}  // namespace adeptlab
