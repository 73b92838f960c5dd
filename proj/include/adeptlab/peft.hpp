#pragma once

#include <cstddef>
#include <cstdint>
#include <variant>
#include <vector>

#include "adeptlab/autograd.hpp"
#include "adeptlab/backbone.hpp"

namespace adeptlab {

enum class MethodKind { kPrompt, kDecomposed, kAdaptive };

// Plain soft prompt: trainable rows prepended to the input.
struct SoftPrompt {
  TensorPtr prompt;  // l x d, l >= 1
};

// Short prompt plus a low-rank position-indexed offset table A*B; row i
// of the product is added to content position i.
struct DecomposedPrompt {
  TensorPtr prompt;  // l x d, or null when the prompt has zero rows
  TensorPtr A;       // max_content_len x rank
  TensorPtr B;       // rank x d
};

// Short prompt plus a token-shared bottleneck network; the offset for a
// content row e is relu(e W_down + b1) W_up + b2, the same map at every
// position.
struct AdaptivePrompt {
  TensorPtr prompt;  // l x d, or null when the prompt has zero rows
  TensorPtr W_down;  // d x rank
  TensorPtr b1;      // rank
  TensorPtr W_up;    // rank x d
  TensorPtr b2;      // d
};

using PeftMethod = std::variant<SoftPrompt, DecomposedPrompt, AdaptivePrompt>;

struct MethodConfig {
  MethodKind kind = MethodKind::kPrompt;
  std::size_t prompt_len = 4;
  std::size_t rank = 0;             // decomposed / adaptive only
  std::size_t max_content_len = 0;  // decomposed only; 0 = backbone default
};

// Prompt rows (possibly null) and the updated content matrix, as graph
// nodes ready for BackboneModel::forward.
struct AppliedInput {
  TensorPtr prompt;
  TensorPtr content;
};

AppliedInput pt_apply(Graph& g, const TensorPtr& E, const SoftPrompt& m);
AppliedInput dept_apply(Graph& g, const TensorPtr& E, const DecomposedPrompt& m);
// Row-wise offsets f(E) of the adaptive network; same row count as E.
TensorPtr adept_offset(Graph& g, const TensorPtr& E, const AdaptivePrompt& m);
AppliedInput adept_apply(Graph& g, const TensorPtr& E, const AdaptivePrompt& m);
AppliedInput apply_method(Graph& g, const TensorPtr& E, const PeftMethod& m);

// [prompt; content] as one matrix (just the content when prompt is null).
TensorPtr concat_applied(Graph& g, const AppliedInput& in);

MethodKind method_kind(const PeftMethod& m);

// Trainable-parameter counts.
std::size_t pt_param_count(std::size_t prompt_len, std::size_t d);
std::size_t dept_param_count(std::size_t prompt_len, std::size_t max_content_len,
                             std::size_t rank, std::size_t d);
std::size_t adept_param_count(std::size_t prompt_len, std::size_t rank,
                              std::size_t d);
std::size_t param_count(const PeftMethod& m);

struct ParamGroups {
  std::vector<TensorPtr> prompt;   // learns at the prompt learning rate
  std::vector<TensorPtr> network;  // offset parameters, separate rate
};
ParamGroups trainable_tensors(const PeftMethod& m);

struct BudgetSpec {
  std::size_t budget;      // total trainable parameters allowed
  std::size_t embed_dim;   // d
  std::size_t prompt_len;  // l
};

// Largest adaptive bottleneck rank whose parameter count fits the
// budget: floor((budget - l*d - d) / (2*d + 1)). Throws BudgetError when
// the budget cannot even cover the prompt and biases, or when the
// resulting rank would be zero.
std::size_t solve_bottleneck(const BudgetSpec& spec);

// Largest decomposed rank with l*d + r*(s + d) <= budget.
std::size_t solve_dept_rank(const BudgetSpec& spec, std::size_t max_content_len);

// Fresh method parameters: prompt rows are copies of uniformly sampled
// backbone embedding rows, matrices are uniform(-1/sqrt(d), 1/sqrt(d)),
// biases start at zero. The same seed reproduces the same bits.
PeftMethod init_method(const MethodConfig& config, const BackboneModel& backbone,
                       std::uint64_t seed);

}  // namespace adeptlab
