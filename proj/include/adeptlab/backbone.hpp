#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "adeptlab/autograd.hpp"
#include "adeptlab/dataset.hpp"

namespace adeptlab {

enum class PositionalMode { kNone, kLearnedAbsolute };

struct BackboneConfig {
  std::size_t vocab_size = 64;
  std::size_t embed_dim = 16;
  std::size_t heads = 2;
  std::size_t head_dim = 8;
  std::size_t layers = 2;
  std::size_t classes = 2;
  std::size_t max_content_len = 32;
  std::size_t max_prompt_len = 16;
  std::size_t ffn_hidden = 32;
  PositionalMode positional_mode = PositionalMode::kNone;

  void validate() const;  // throws ArgumentError
};

struct HeadWeights {
  TensorPtr W_Q, W_K, W_V;  // each embed_dim x head_dim
};

struct LayerWeights {
  TensorPtr ln1_gain, ln1_bias;
  std::vector<HeadWeights> heads;
  TensorPtr W_O;  // embed_dim x embed_dim
  TensorPtr ln2_gain, ln2_bias;
  TensorPtr ffn_W1, ffn_b1, ffn_W2, ffn_b2;
};

// A tiny pre-norm transformer classifier. All parameters are fp64 leaf
// tensors; freeze() turns the whole stack into a fixed feature machine
// that the adaptation methods steer from the input side only.
class BackboneModel {
 public:
  BackboneModel(BackboneConfig config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }

  // Token ids -> embedding rows (no positional signal here; that is
  // added inside forward, after any prompt rows are in place).
  TensorPtr embed(Graph& g, const std::vector<std::size_t>& token_ids) const;

  // One attention head over explicit query/key-value matrices:
  //   softmax((Q Wq)(K Wk)^T [/ sqrt(head_dim)]) (K Wv)
  TensorPtr attention_head(Graph& g, const TensorPtr& queries,
                           const TensorPtr& keys_values,
                           const HeadWeights& head, bool scaled) const;

  // Runs the full stack over [prompt rows | content rows] and returns
  // 1 x classes logits. content_mask has one entry per content row;
  // zero entries are padding: excluded from attention keys and from the
  // mean pool, but still carried through the residual stream.
  TensorPtr forward(Graph& g, const TensorPtr& updated_embeddings,
                    const std::vector<std::uint8_t>& content_mask) const;

  // Value-level convenience: plain content token ids, no prompt.
  std::vector<double> forward_logits(const std::vector<std::size_t>& token_ids) const;

  void freeze();
  bool frozen() const;

  // (name, tensor) pairs in a fixed order; this is the checkpoint order.
  std::vector<std::pair<std::string, TensorPtr>> named_tensors() const;
  // FNV-1a over the exact value bytes of all tensors, in checkpoint order.
  std::uint64_t value_checksum() const;

  const TensorPtr& embedding() const { return embedding_; }
  const LayerWeights& layer(std::size_t i) const { return layers_.at(i); }
  const TensorPtr& classifier() const { return W_cls_; }
  TensorPtr& classifier() { return W_cls_; }
  const TensorPtr& positional() const { return positional_; }

 private:
  BackboneConfig config_;
  TensorPtr embedding_;  // vocab_size x embed_dim
  std::vector<LayerWeights> layers_;
  TensorPtr final_ln_gain_, final_ln_bias_;
  TensorPtr W_cls_;      // embed_dim x classes
  TensorPtr positional_; // (max_prompt_len + max_content_len) x embed_dim, learned-absolute mode only
};

struct PretrainOptions {
  std::size_t steps = 3000;
  double lr = 0.1;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  std::vector<double> loss_history;  // one entry per step
};

// Full-parameter SGD over a suite of source tasks, drawn round-robin.
// Throws TrainingError (with the step) if the loss goes non-finite.
PretrainResult pretrain(BackboneModel& model, const std::vector<Dataset>& suite,
                        const PretrainOptions& opts);

}  // namespace adeptlab
