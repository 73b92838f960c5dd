#include "adeptlab/backbone.hpp"

#include <cmath>
#include <cstring>

#include "adeptlab/rng.hpp"

namespace adeptlab {

namespace {

constexpr double kLayerNormEps = 1e-5;

TensorPtr uniform_tensor(Rng& rng, std::vector<std::size_t> shape, double lo,
                         double hi) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform_real(lo, hi);
  return Tensor::make(std::move(shape), std::move(v), true);
}

TensorPtr fill_tensor(std::vector<std::size_t> shape, double value) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return Tensor::make(std::move(shape), std::vector<double>(n, value), true);
}

}  // namespace

void BackboneConfig::validate() const {
  if (vocab_size == 0 || embed_dim == 0 || heads == 0 || head_dim == 0 ||
      layers == 0 || classes < 2 || max_content_len == 0 || ffn_hidden == 0) {
    throw ArgumentError("backbone config has a zero-sized field");
  }
  if (heads * head_dim != embed_dim) {
    throw ArgumentError("heads * head_dim must equal embed_dim (" +
                        std::to_string(heads) + " * " +
                        std::to_string(head_dim) +
                        " != " + std::to_string(embed_dim) + ")");
  }
}

BackboneModel::BackboneModel(BackboneConfig config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config_.embed_dim));
  const std::size_t d = config_.embed_dim;

  embedding_ = uniform_tensor(rng, {config_.vocab_size, d}, -1.0, 1.0);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain = fill_tensor({d}, 1.0);
    lw.ln1_bias = fill_tensor({d}, 0.0);
    for (std::size_t h = 0; h < config_.heads; ++h) {
      HeadWeights hw;
      hw.W_Q = uniform_tensor(rng, {d, config_.head_dim}, -bound, bound);
      hw.W_K = uniform_tensor(rng, {d, config_.head_dim}, -bound, bound);
      hw.W_V = uniform_tensor(rng, {d, config_.head_dim}, -bound, bound);
      lw.heads.push_back(std::move(hw));
    }
    lw.W_O = uniform_tensor(rng, {d, d}, -bound, bound);
    lw.ln2_gain = fill_tensor({d}, 1.0);
    lw.ln2_bias = fill_tensor({d}, 0.0);
    lw.ffn_W1 = uniform_tensor(rng, {d, config_.ffn_hidden}, -bound, bound);
    lw.ffn_b1 = fill_tensor({config_.ffn_hidden}, 0.0);
    lw.ffn_W2 = uniform_tensor(rng, {config_.ffn_hidden, d}, -bound, bound);
    lw.ffn_b2 = fill_tensor({d}, 0.0);
    layers_.push_back(std::move(lw));
  }
  final_ln_gain_ = fill_tensor({d}, 1.0);
  final_ln_bias_ = fill_tensor({d}, 0.0);
  W_cls_ = uniform_tensor(rng, {d, config_.classes}, -bound, bound);
  if (config_.positional_mode == PositionalMode::kLearnedAbsolute) {
    positional_ = uniform_tensor(
        rng, {config_.max_prompt_len + config_.max_content_len, d}, -bound,
        bound);
  }
}

TensorPtr BackboneModel::embed(Graph& g,
                               const std::vector<std::size_t>& token_ids) const {
  if (token_ids.empty()) throw LengthError("embed got an empty id list");
  if (token_ids.size() > config_.max_content_len) {
    throw LengthError("sequence length " + std::to_string(token_ids.size()) +
                      " exceeds max content length " +
                      std::to_string(config_.max_content_len));
  }
  for (std::size_t id : token_ids) {
    if (id >= config_.vocab_size) {
      throw IndexError("token id " + std::to_string(id) +
                       " out of range for vocab " +
                       std::to_string(config_.vocab_size));
    }
  }
  return g.row_select(embedding_, token_ids);
}

TensorPtr BackboneModel::attention_head(Graph& g, const TensorPtr& queries,
                                        const TensorPtr& keys_values,
                                        const HeadWeights& head,
                                        bool scaled) const {
  TensorPtr q = g.matmul(queries, head.W_Q);
  TensorPtr k = g.matmul(keys_values, head.W_K);
  TensorPtr v = g.matmul(keys_values, head.W_V);
  TensorPtr logits = g.matmul(q, g.transpose(k));
  if (scaled) {
    logits = g.scale(logits,
                     1.0 / std::sqrt(static_cast<double>(config_.head_dim)));
  }
  return g.matmul(g.row_softmax(logits), v);
}

TensorPtr BackboneModel::forward(
    Graph& g, const TensorPtr& updated_embeddings,
    const std::vector<std::uint8_t>& content_mask) const {
  const std::size_t t = updated_embeddings->rows();
  if (updated_embeddings->cols() != config_.embed_dim) {
    throw DimensionError("forward expects " +
                         std::to_string(config_.embed_dim) +
                         " columns, got " + updated_embeddings->shape_str());
  }
  if (content_mask.size() > t) {
    throw DimensionError("content mask of length " +
                         std::to_string(content_mask.size()) +
                         " is longer than the " + std::to_string(t) +
                         " input rows");
  }
  if (t > config_.max_prompt_len + config_.max_content_len) {
    throw LengthError("total length " + std::to_string(t) + " exceeds " +
                      std::to_string(config_.max_prompt_len +
                                     config_.max_content_len));
  }
  const std::size_t prompt_len = t - content_mask.size();

  // attention keys: every prompt row plus the unmasked content rows
  std::vector<std::size_t> key_ids;
  // pooling: unmasked content rows only
  std::vector<std::uint8_t> pool_mask(t, 0);
  for (std::size_t i = 0; i < prompt_len; ++i) key_ids.push_back(i);
  for (std::size_t i = 0; i < content_mask.size(); ++i) {
    if (content_mask[i]) {
      key_ids.push_back(prompt_len + i);
      pool_mask[prompt_len + i] = 1;
    }
  }
  bool any_content = false;
  for (auto m : pool_mask) any_content = any_content || m;
  if (!any_content) throw ArgumentError("forward with no unmasked content");

  TensorPtr x = updated_embeddings;
  if (config_.positional_mode == PositionalMode::kLearnedAbsolute) {
    std::vector<std::size_t> pos(t);
    for (std::size_t i = 0; i < t; ++i) pos[i] = i;
    x = g.add(x, g.row_select(positional_, pos));
  }

  for (const LayerWeights& lw : layers_) {
    TensorPtr a_in = g.layer_norm(x, lw.ln1_gain, lw.ln1_bias, kLayerNormEps);
    TensorPtr keys = g.row_select(a_in, key_ids);
    std::vector<TensorPtr> head_outs;
    for (const HeadWeights& hw : lw.heads) {
      head_outs.push_back(attention_head(g, a_in, keys, hw, /*scaled=*/true));
    }
    TensorPtr att = g.matmul(g.concat_cols(head_outs), lw.W_O);
    x = g.add(x, att);
    TensorPtr f_in = g.layer_norm(x, lw.ln2_gain, lw.ln2_bias, kLayerNormEps);
    TensorPtr hidden = g.relu(g.add(g.matmul(f_in, lw.ffn_W1), lw.ffn_b1));
    TensorPtr ffn = g.add(g.matmul(hidden, lw.ffn_W2), lw.ffn_b2);
    x = g.add(x, ffn);
  }
  x = g.layer_norm(x, final_ln_gain_, final_ln_bias_, kLayerNormEps);
  TensorPtr pooled = g.mean_rows(x, pool_mask);
  return g.matmul(pooled, W_cls_);
}

std::vector<double> BackboneModel::forward_logits(
    const std::vector<std::size_t>& token_ids) const {
  Graph g;
  TensorPtr e = embed(g, token_ids);
  std::vector<std::uint8_t> mask(token_ids.size(), 1);
  return forward(g, e, mask)->values();
}

void BackboneModel::freeze() {
  for (auto& [name, t] : named_tensors()) {
    t->set_requires_grad(false);
    t->zero_grad();
  }
}

bool BackboneModel::frozen() const {
  for (const auto& [name, t] : named_tensors()) {
    if (t->requires_grad()) return false;
  }
  return true;
}

std::vector<std::pair<std::string, TensorPtr>> BackboneModel::named_tensors()
    const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  out.emplace_back("embedding", embedding_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    const LayerWeights& lw = layers_[l];
    out.emplace_back(p + "ln1.gain", lw.ln1_gain);
    out.emplace_back(p + "ln1.bias", lw.ln1_bias);
    for (std::size_t h = 0; h < lw.heads.size(); ++h) {
      const std::string hp = p + "head." + std::to_string(h) + ".";
      out.emplace_back(hp + "W_Q", lw.heads[h].W_Q);
      out.emplace_back(hp + "W_K", lw.heads[h].W_K);
      out.emplace_back(hp + "W_V", lw.heads[h].W_V);
    }
    out.emplace_back(p + "W_O", lw.W_O);
    out.emplace_back(p + "ln2.gain", lw.ln2_gain);
    out.emplace_back(p + "ln2.bias", lw.ln2_bias);
    out.emplace_back(p + "ffn.W1", lw.ffn_W1);
    out.emplace_back(p + "ffn.b1", lw.ffn_b1);
    out.emplace_back(p + "ffn.W2", lw.ffn_W2);
    out.emplace_back(p + "ffn.b2", lw.ffn_b2);
  }
  out.emplace_back("final_ln.gain", final_ln_gain_);
  out.emplace_back("final_ln.bias", final_ln_bias_);
  out.emplace_back("W_cls", W_cls_);
  if (positional_) out.emplace_back("positional", positional_);
  return out;
}

std::uint64_t BackboneModel::value_checksum() const {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  auto mix = [&h](const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : named_tensors()) {
    mix(name.data(), name.size());
    mix(t->values().data(), t->values().size() * sizeof(double));
  }
  return h;
}

PretrainResult pretrain(BackboneModel& model, const std::vector<Dataset>& suite,
                        const PretrainOptions& opts) {
  if (suite.empty()) throw ArgumentError("pretrain got an empty task suite");
  if (opts.batch_size == 0) throw ArgumentError("pretrain batch size is zero");
  for (const Dataset& d : suite) {
    if (d.train.empty()) throw ArgumentError("pretrain task has no train split");
  }

  std::vector<std::pair<std::string, TensorPtr>> params = model.named_tensors();
  Rng rng(opts.seed);
  PretrainResult result;
  result.loss_history.reserve(opts.steps);

  for (std::size_t step = 0; step < opts.steps; ++step) {
    const Dataset& task = suite[step % suite.size()];
    Graph g;
    TensorPtr total;
    for (std::size_t b = 0; b < opts.batch_size; ++b) {
      const Example& ex = task.train[rng.uniform_index(task.train.size())];
      TensorPtr e = model.embed(g, ex.ids);
      std::vector<std::uint8_t> mask(ex.ids.size(), 1);
      TensorPtr logits = model.forward(g, e, mask);
      TensorPtr loss = g.cross_entropy(logits, {ex.label});
      total = total ? g.add(total, loss) : loss;
    }
    TensorPtr mean_loss =
        g.scale(total, 1.0 / static_cast<double>(opts.batch_size));
    const double loss_value = mean_loss->scalar();
    if (!std::isfinite(loss_value)) {
      throw TrainingError("pretrain loss became non-finite at step " +
                              std::to_string(step),
                          step);
    }
    result.loss_history.push_back(loss_value);
    g.backward(mean_loss);
    for (auto& [name, t] : params) {
      if (!t->has_grad()) continue;
      for (std::size_t i = 0; i < t->numel(); ++i)
        t->values()[i] -= opts.lr * t->grad()[i];
      t->zero_grad();
    }
  }
  return result;
}

}  // namespace adeptlab
