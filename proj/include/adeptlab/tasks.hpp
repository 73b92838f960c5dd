#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "adeptlab/backbone.hpp"
#include "adeptlab/dataset.hpp"
#include "adeptlab/peft.hpp"

namespace adeptlab {

// Deterministically generates n examples for the task, rejection-sampling
// so that labels alternate (hence every split is balanced), and carves
// train/valid/test splits in generation-index order. Throws
// GenerationError when balance cannot be met within 100*n attempts.
Dataset generate(const TaskSpec& spec, std::size_t n);

// The labeling rule on its own (exposed for generator self-checks).
std::size_t task_label(const TaskSpec& spec, const std::vector<std::size_t>& ids);

struct AdaptOptions {
  double prompt_lr = 0.5;
  double network_lr = 0.01;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t eval_interval = 100;
  std::uint64_t seed = 0;
};

struct MetricPoint {
  std::size_t step;
  double train_loss;
  double valid_accuracy;
};

struct AdaptResult {
  std::vector<MetricPoint> history;
  std::size_t best_step = 0;
  double best_valid_accuracy = 0.0;
};

// Minibatch SGD on the method parameters only; the backbone must already
// be frozen. Prompt rows and offset-network weights move at their own
// learning rates. Every eval_interval steps (and at the final step) the
// batch loss and validation accuracy are recorded; afterwards the method
// is rolled back to the checkpoint with the best validation accuracy
// (earliest step wins ties).
AdaptResult adapt(const BackboneModel& backbone, PeftMethod& method,
                  const Dataset& dataset, const AdaptOptions& opts);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
};

// Accuracy over a split. prepend_neutral extra copies of the neutral
// token are placed before each sequence (0 means evaluate as-is).
// ADEPT_LAB_THREADS caps worker threads; the default is 1 and results
// are bit-identical at any setting.
EvalResult evaluate(const BackboneModel& backbone, const PeftMethod& method,
                    const std::vector<Example>& split,
                    std::size_t prepend_neutral = 0);

}  // namespace adeptlab
