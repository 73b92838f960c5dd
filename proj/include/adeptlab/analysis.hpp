#pragma once

#include <cstddef>
#include <vector>

#include "adeptlab/backbone.hpp"
#include "adeptlab/dataset.hpp"
#include "adeptlab/peft.hpp"

namespace adeptlab {

// One query's attention output over [prompt rows | content rows], split
// into the prompt's additive bias and the rescaled content-only
// attention:
//   direct = bias_term + scale * content_term,  scale = 1 - prefix_mass.
// The constructor of each report checks the identity and throws
// ContractError if the reconstruction drifts beyond 1e-10.
struct DecompositionReport {
  double prefix_mass = 0.0;  // total softmax mass on prompt keys
  double scale = 0.0;        // literally 1.0 - prefix_mass
  std::vector<double> bias_term;           // head_dim
  std::vector<double> content_term;        // head_dim
  // Decomposed-offset methods split the content term into the part fed
  // by the offsets and the part fed by the raw token embeddings; empty
  // for the other methods.
  std::vector<double> content_offset_term;
  std::vector<double> content_token_term;
  std::vector<double> reconstructed;  // bias + scale * content
  std::vector<double> direct;         // plain attention over the full input
  double max_abs_gap = 0.0;           // L-inf of reconstructed - direct
};

// Plain soft prompt: query e_i, keys/values [P | E].
DecompositionReport pt_decompose(const TensorPtr& e_i, const TensorPtr& E,
                                 const TensorPtr& P, const HeadWeights& head,
                                 bool scaled);

// Token-shared offset network: query e_i + f(e_i), keys/values
// [P | E + f(E)].
DecompositionReport adept_decompose(const TensorPtr& e_i, const TensorPtr& E,
                                    const AdaptivePrompt& ap, const TensorPtr& P,
                                    const HeadWeights& head, bool scaled);

// Position-indexed offsets: query e_i + offsets[i], keys/values
// [P | E + offsets]; the content term is reported split into its offset
// and token parts. Uses the method's own prompt.
DecompositionReport dept_decompose(const TensorPtr& e_i, std::size_t position,
                                   const TensorPtr& E,
                                   const DecomposedPrompt& dp,
                                   const HeadWeights& head, bool scaled);

// Rows rotated upward by j: row i of the result is row (i + j) mod s.
// j may be 0..s; both ends are the identity.
TensorPtr cyclic_shift(const TensorPtr& offsets, std::size_t j);

// The offsets a method would add to the given content rows (zero matrix
// for a plain prompt). Value-level; no gradients.
TensorPtr method_offsets(const PeftMethod& method, const TensorPtr& E);

struct ShiftProbeEntry {
  std::size_t shift = 0;
  double accuracy = 0.0;
  std::size_t changed_predictions = 0;
  // How far the active offset rows moved, as max L-inf / mean L2 over rows.
  double displacement_max = 0.0;
  double displacement_mean = 0.0;
};

struct ShiftProbeReport {
  double baseline_accuracy = 0.0;
  std::vector<ShiftProbeEntry> entries;
};

// Re-evaluates a split with the offset table cyclically shifted. Shift 0
// reproduces the unshifted evaluation bit-for-bit. For token-wise or
// offset-free methods a shift is defined as the identity, so every entry
// matches the baseline.
ShiftProbeReport shift_probe(const BackboneModel& backbone,
                             const PeftMethod& method,
                             const std::vector<Example>& split,
                             const std::vector<std::size_t>& shifts);

// Mean and population variance of |element|.
struct AbsStats {
  double mean = 0.0;
  double variance = 0.0;
};
AbsStats abs_stats(const std::vector<double>& elements);

struct OffsetStatsReport {
  AbsStats embeddings;  // over raw content-token embedding elements
  AbsStats offsets;     // over the method's offset elements for those rows
  std::size_t token_count = 0;
};

// Aggregates over every content token of every example in the split.
OffsetStatsReport offset_stats(const BackboneModel& backbone,
                               const PeftMethod& method,
                               const std::vector<Example>& split);

// Max row-wise L-inf difference between the offsets computed for E alone
// and the offsets the same rows receive when a prefix is glued in front.
// Exactly 0.0 for token-wise and offset-free methods; positive for
// position-indexed offsets (unless the table happens to repeat).
double prepend_probe(const PeftMethod& method, const TensorPtr& E,
                     const TensorPtr& neutral_prefix);

}  // namespace adeptlab
