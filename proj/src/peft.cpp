#include "adeptlab/peft.hpp"

#include <cmath>

#include "adeptlab/rng.hpp"

namespace adeptlab {

namespace {

void check_content_dim(const TensorPtr& E, std::size_t width,
                       const char* what) {
  if (E->rank() != 2 || E->cols() != width) {
    throw DimensionError(std::string(what) + ": content " + E->shape_str() +
                         " does not match width " + std::to_string(width));
  }
}

}  // namespace

AppliedInput pt_apply(Graph& g, const TensorPtr& E, const SoftPrompt& m) {
  check_content_dim(E, m.prompt->cols(), "pt_apply");
  return {m.prompt, E};  // content passes through untouched
}

AppliedInput dept_apply(Graph& g, const TensorPtr& E,
                        const DecomposedPrompt& m) {
  check_content_dim(E, m.B->cols(), "dept_apply");
  const std::size_t s = m.A->rows();
  const std::size_t sp = E->rows();
  if (sp > s) {
    throw LengthError("dept_apply content length " + std::to_string(sp) +
                      " exceeds offset table length " + std::to_string(s));
  }
  TensorPtr offsets = g.matmul(m.A, m.B);
  std::vector<std::size_t> lead(sp);
  for (std::size_t i = 0; i < sp; ++i) lead[i] = i;
  TensorPtr content = g.add(E, g.row_select(offsets, lead));
  return {m.prompt, content};
}

TensorPtr adept_offset(Graph& g, const TensorPtr& E, const AdaptivePrompt& m) {
  check_content_dim(E, m.W_down->rows(), "adept_offset");
  TensorPtr hidden = g.relu(g.add(g.matmul(E, m.W_down), m.b1));
  return g.add(g.matmul(hidden, m.W_up), m.b2);
}

AppliedInput adept_apply(Graph& g, const TensorPtr& E, const AdaptivePrompt& m) {
  return {m.prompt, g.add(E, adept_offset(g, E, m))};
}

AppliedInput apply_method(Graph& g, const TensorPtr& E, const PeftMethod& m) {
  return std::visit(
      [&](const auto& method) -> AppliedInput {
        using T = std::decay_t<decltype(method)>;
        if constexpr (std::is_same_v<T, SoftPrompt>) {
          return pt_apply(g, E, method);
        } else if constexpr (std::is_same_v<T, DecomposedPrompt>) {
          return dept_apply(g, E, method);
        } else {
          return adept_apply(g, E, method);
        }
      },
      m);
}

TensorPtr concat_applied(Graph& g, const AppliedInput& in) {
  return in.prompt ? g.concat_rows(in.prompt, in.content) : in.content;
}

MethodKind method_kind(const PeftMethod& m) {
  if (std::holds_alternative<SoftPrompt>(m)) return MethodKind::kPrompt;
  if (std::holds_alternative<DecomposedPrompt>(m)) return MethodKind::kDecomposed;
  return MethodKind::kAdaptive;
}

std::size_t pt_param_count(std::size_t prompt_len, std::size_t d) {
  return prompt_len * d;
}

std::size_t dept_param_count(std::size_t prompt_len, std::size_t max_content_len,
                             std::size_t rank, std::size_t d) {
  return prompt_len * d + max_content_len * rank + rank * d;
}

std::size_t adept_param_count(std::size_t prompt_len, std::size_t rank,
                              std::size_t d) {
  return prompt_len * d + 2 * rank * d + rank + d;
}

std::size_t param_count(const PeftMethod& m) {
  std::size_t n = 0;
  ParamGroups groups = trainable_tensors(m);
  for (const auto& t : groups.prompt) n += t->numel();
  for (const auto& t : groups.network) n += t->numel();
  return n;
}

ParamGroups trainable_tensors(const PeftMethod& m) {
  ParamGroups out;
  if (const auto* pt = std::get_if<SoftPrompt>(&m)) {
    out.prompt.push_back(pt->prompt);
  } else if (const auto* dp = std::get_if<DecomposedPrompt>(&m)) {
    if (dp->prompt) out.prompt.push_back(dp->prompt);
    out.network.push_back(dp->A);
    out.network.push_back(dp->B);
  } else {
    const auto& ap = std::get<AdaptivePrompt>(m);
    if (ap.prompt) out.prompt.push_back(ap.prompt);
    out.network.push_back(ap.W_down);
    out.network.push_back(ap.b1);
    out.network.push_back(ap.W_up);
    out.network.push_back(ap.b2);
  }
  return out;
}

std::size_t solve_bottleneck(const BudgetSpec& spec) {
  const std::size_t floor_cost = spec.prompt_len * spec.embed_dim + spec.embed_dim;
  if (spec.budget < floor_cost) {
    throw BudgetError("budget " + std::to_string(spec.budget) +
                      " cannot cover prompt and bias cost " +
                      std::to_string(floor_cost));
  }
  const std::size_t r = (spec.budget - floor_cost) / (2 * spec.embed_dim + 1);
  if (r == 0) {
    throw BudgetError("budget " + std::to_string(spec.budget) +
                      " leaves no room for a bottleneck at prompt length " +
                      std::to_string(spec.prompt_len));
  }
  return r;
}

std::size_t solve_dept_rank(const BudgetSpec& spec,
                            std::size_t max_content_len) {
  const std::size_t prompt_cost = spec.prompt_len * spec.embed_dim;
  if (spec.budget < prompt_cost) {
    throw BudgetError("budget " + std::to_string(spec.budget) +
                      " cannot cover prompt cost " +
                      std::to_string(prompt_cost));
  }
  const std::size_t r =
      (spec.budget - prompt_cost) / (max_content_len + spec.embed_dim);
  if (r == 0) {
    throw BudgetError("budget " + std::to_string(spec.budget) +
                      " leaves no room for a rank at prompt length " +
                      std::to_string(spec.prompt_len));
  }
  return r;
}

PeftMethod init_method(const MethodConfig& config, const BackboneModel& backbone,
                       std::uint64_t seed) {
  const std::size_t d = backbone.config().embed_dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(seed);

  auto sample_prompt = [&](std::size_t len) -> TensorPtr {
    if (len == 0) return nullptr;
    if (len > backbone.config().max_prompt_len) {
      throw LengthError("prompt length " + std::to_string(len) + " exceeds " +
                        std::to_string(backbone.config().max_prompt_len));
    }
    std::vector<double> rows(len * d);
    const std::vector<double>& table = backbone.embedding()->values();
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t row = rng.uniform_index(backbone.config().vocab_size);
      for (std::size_t j = 0; j < d; ++j) rows[i * d + j] = table[row * d + j];
    }
    return Tensor::make({len, d}, std::move(rows), true);
  };
  auto sample_matrix = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (double& x : v) x = rng.uniform_real(-bound, bound);
    return Tensor::make({r, c}, std::move(v), true);
  };

  switch (config.kind) {
    case MethodKind::kPrompt: {
      if (config.prompt_len == 0) {
        throw ArgumentError("soft prompt needs at least one row");
      }
      return SoftPrompt{sample_prompt(config.prompt_len)};
    }
    case MethodKind::kDecomposed: {
      if (config.rank == 0) throw ArgumentError("decomposed rank is zero");
      const std::size_t s = config.max_content_len
                                ? config.max_content_len
                                : backbone.config().max_content_len;
      DecomposedPrompt m;
      m.prompt = sample_prompt(config.prompt_len);
      m.A = sample_matrix(s, config.rank);
      m.B = sample_matrix(config.rank, d);
      return m;
    }
    case MethodKind::kAdaptive: {
      if (config.rank == 0) throw ArgumentError("adaptive rank is zero");
      AdaptivePrompt m;
      m.prompt = sample_prompt(config.prompt_len);
      m.W_down = sample_matrix(d, config.rank);
      m.b1 = Tensor::zeros({config.rank}, true);
      m.W_up = sample_matrix(config.rank, d);
      m.b2 = Tensor::zeros({d}, true);
      return m;
    }
  }
  throw ArgumentError("unknown method kind");
}

}  // namespace adeptlab
