#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace adeptlab {

// Vocabulary id reserved for the neutral filler token. Generators never
// emit it, so prepending it to a sequence cannot change any task label.
constexpr std::size_t kNeutralToken = 0;

enum class TaskKind { kKeyedCount, kKeyedPresence };

// A synthetic binary classification task over token sequences: the label
// is 1 iff the key token appears at least `threshold` times
// (keyed-count), or at least once (keyed-presence).
struct TaskSpec {
  TaskKind kind = TaskKind::kKeyedPresence;
  std::size_t key = 1;
  std::size_t threshold = 1;  // used by keyed-count
  std::size_t min_len = 12;
  std::size_t max_len = 12;
  std::size_t vocab = 64;
  std::uint64_t seed = 0;
  // Tokens the generator must not emit (other tasks' keys, typically),
  // so that multi-task suites stay label-consistent.
  std::vector<std::size_t> excluded_tokens;
};

struct Example {
  std::vector<std::size_t> ids;
  std::size_t label = 0;
};

// Disjoint splits, in generation-index order.
struct Dataset {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

}  // namespace adeptlab
