#include "adeptlab/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <utility>

#include "adeptlab/numerics.hpp"

namespace adeptlab {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

void check_shape(const std::vector<std::size_t>& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor shape has a zero extent");
  }
}

std::string shape_to_str(const std::vector<std::size_t>& shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

TensorPtr Tensor::make(std::vector<std::size_t> shape,
                       std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (product(shape) != values.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_to_str(shape));
  }
  auto t = TensorPtr(new Tensor());
  t->shape_ = std::move(shape);
  t->values_ = std::move(values);
  t->requires_grad_ = requires_grad;
  t->needs_grad_ = requires_grad;
  return t;
}

TensorPtr Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  check_shape(shape);
  std::vector<double> values(product(shape), 0.0);
  return make(std::move(shape), std::move(values), requires_grad);
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ContractError("rows() on non-matrix " + shape_str());
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ContractError("cols() on non-matrix " + shape_str());
  return shape_[1];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return values_[r * cols() + c];
}

double Tensor::scalar() const {
  if (!is_scalar()) {
    throw ContractError("scalar() on tensor of shape " + shape_str());
  }
  return values_[0];
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  needs_grad_ = on;
}

void Tensor::accumulate(std::size_t i, double v) {
  if (grad_.empty()) grad_.assign(values_.size(), 0.0);
  grad_[i] += v;
}

std::string Tensor::shape_str() const { return shape_to_str(shape_); }

// ---------------------------------------------------------------------------
// Graph

TensorPtr Graph::emit(std::vector<std::size_t> shape,
                      std::vector<double> values,
                      const std::vector<TensorPtr>& inputs) {
  auto out = Tensor::make(std::move(shape), std::move(values), false);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->wants_grad();
  out->needs_grad_ = needs;
  tape_.push_back(out);
  return out;
}

TensorPtr Graph::constant(std::vector<std::size_t> shape,
                          std::vector<double> values) {
  return emit(std::move(shape), std::move(values), {});
}

TensorPtr Graph::matmul(const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->cols() != b->rows()) {
    throw DimensionError("matmul shapes " + a->shape_str() + " and " +
                         b->shape_str() + " are incompatible");
  }
  const std::size_t m = a->rows(), k = a->cols(), n = b->cols();
  std::vector<double> out(m * n);
  const double* av = a->values().data();
  const double* bv = b->values().data();
  ExactSum acc;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      acc.reset();
      for (std::size_t p = 0; p < k; ++p) acc.add(av[i * k + p] * bv[p * n + j]);
      out[i * n + j] = acc.result();
    }
  }
  TensorPtr out_t = emit({m, n}, std::move(out), {a, b});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [a, b, self, m, k, n]() {
      const std::vector<double>& gv = self->grad();
      const std::vector<double>& av2 = a->values();
      const std::vector<double>& bv2 = b->values();
      if (a->wants_grad()) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              s += gv[i * n + j] * bv2[p * n + j];
            a->accumulate(i * k + p, s);
          }
      }
      if (b->wants_grad()) {
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i)
              s += av2[i * k + p] * gv[i * n + j];
            b->accumulate(p * n + j, s);
          }
      }
    };
  }
  return out_t;
}

TensorPtr Graph::transpose(const TensorPtr& x) {
  if (x->rank() != 2) {
    throw DimensionError("transpose needs a matrix, got " + x->shape_str());
  }
  const std::size_t m = x->rows(), n = x->cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[j * m + i] = x->values()[i * n + j];
  TensorPtr out_t = emit({n, m}, std::move(out), {x});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [x, self, m, n]() {
      const std::vector<double>& gv = self->grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          x->accumulate(i * n + j, gv[j * m + i]);
    };
  }
  return out_t;
}

TensorPtr Graph::add(const TensorPtr& a, const TensorPtr& b) {
  const bool broadcast =
      a->rank() == 2 && b->rank() == 1 && b->shape()[0] == a->cols();
  if (!broadcast && a->shape() != b->shape()) {
    throw DimensionError("add shapes " + a->shape_str() + " and " +
                         b->shape_str() + " are incompatible");
  }
  std::vector<double> out(a->numel());
  if (broadcast) {
    const std::size_t m = a->rows(), n = a->cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] = a->values()[i * n + j] + b->values()[j];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = a->values()[i] + b->values()[i];
  }
  TensorPtr out_t = emit(a->shape(), std::move(out), {a, b});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [a, b, self, broadcast]() {
      const std::vector<double>& gv = self->grad();
      if (a->wants_grad())
        for (std::size_t i = 0; i < gv.size(); ++i) a->accumulate(i, gv[i]);
      if (b->wants_grad()) {
        if (broadcast) {
          const std::size_t n = b->numel();
          for (std::size_t i = 0; i < gv.size(); ++i)
            b->accumulate(i % n, gv[i]);
        } else {
          for (std::size_t i = 0; i < gv.size(); ++i) b->accumulate(i, gv[i]);
        }
      }
    };
  }
  return out_t;
}

TensorPtr Graph::scale(const TensorPtr& x, double c) {
  std::vector<double> out(x->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x->values()[i];
  TensorPtr out_t = emit(x->shape(), std::move(out), {x});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [x, self, c]() {
      const std::vector<double>& gv = self->grad();
      for (std::size_t i = 0; i < gv.size(); ++i) x->accumulate(i, c * gv[i]);
    };
  }
  return out_t;
}

TensorPtr Graph::relu(const TensorPtr& x) {
  std::vector<double> out(x->numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x->values()[i] > 0.0 ? x->values()[i] : 0.0;
  TensorPtr out_t = emit(x->shape(), std::move(out), {x});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    // subgradient at 0 is taken as 0
    out_t->backprop_ = [x, self]() {
      const std::vector<double>& gv = self->grad();
      for (std::size_t i = 0; i < gv.size(); ++i)
        if (x->values()[i] > 0.0) x->accumulate(i, gv[i]);
    };
  }
  return out_t;
}

TensorPtr Graph::row_softmax(const TensorPtr& x) {
  if (x->rank() != 2) {
    throw DimensionError("row_softmax needs a matrix, got " + x->shape_str());
  }
  const std::size_t m = x->rows(), n = x->cols();
  std::vector<double> out(m * n);
  ExactSum acc;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x->values().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    acc.reset();
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      acc.add(out[i * n + j]);
    }
    const double z = acc.result();
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  TensorPtr out_t = emit({m, n}, std::move(out), {x});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [x, self, m, n]() {
      const std::vector<double>& gv = self->grad();
      const std::vector<double>& y = self->values();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          dot += gv[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          x->accumulate(i * n + j, y[i * n + j] * (gv[i * n + j] - dot));
      }
    };
  }
  return out_t;
}

TensorPtr Graph::concat_rows(const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->cols() != b->cols()) {
    throw DimensionError("concat_rows shapes " + a->shape_str() + " and " +
                         b->shape_str() + " differ in column count");
  }
  const std::size_t n = a->cols(), ra = a->rows(), rb = b->rows();
  std::vector<double> out;
  out.reserve((ra + rb) * n);
  out.insert(out.end(), a->values().begin(), a->values().end());
  out.insert(out.end(), b->values().begin(), b->values().end());
  TensorPtr out_t = emit({ra + rb, n}, std::move(out), {a, b});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [a, b, self, ra, n]() {
      const std::vector<double>& gv = self->grad();
      if (a->wants_grad())
        for (std::size_t i = 0; i < ra * n; ++i) a->accumulate(i, gv[i]);
      if (b->wants_grad())
        for (std::size_t i = ra * n; i < gv.size(); ++i)
          b->accumulate(i - ra * n, gv[i]);
    };
  }
  return out_t;
}

TensorPtr Graph::concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols needs at least one part");
  const std::size_t m = parts[0]->rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->rows() != m) {
      throw DimensionError("concat_cols shapes " + parts[0]->shape_str() +
                           " and " + p->shape_str() + " differ in row count");
    }
    total += p->cols();
  }
  std::vector<double> out(m * total);
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t n = p->cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[i * total + col0 + j] = p->values()[i * n + j];
    col0 += n;
  }
  TensorPtr out_t = emit({m, total}, std::move(out), parts);
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [parts, self, m, total]() {
      const std::vector<double>& gv = self->grad();
      std::size_t col0 = 0;
      for (const auto& p : parts) {
        const std::size_t n = p->cols();
        if (p->wants_grad())
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              p->accumulate(i * n + j, gv[i * total + col0 + j]);
        col0 += n;
      }
    };
  }
  return out_t;
}

TensorPtr Graph::row_select(const TensorPtr& x,
                            const std::vector<std::size_t>& ids) {
  if (x->rank() != 2) {
    throw DimensionError("row_select needs a matrix, got " + x->shape_str());
  }
  if (ids.empty()) throw LengthError("row_select got an empty id list");
  const std::size_t n = x->cols();
  for (std::size_t id : ids) {
    if (id >= x->rows()) {
      throw IndexError("row id " + std::to_string(id) + " out of range for " +
                       x->shape_str());
    }
  }
  std::vector<double> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = x->values()[ids[i] * n + j];
  TensorPtr out_t = emit({ids.size(), n}, std::move(out), {x});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [x, self, ids, n]() {
      const std::vector<double>& gv = self->grad();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          x->accumulate(ids[i] * n + j, gv[i * n + j]);
    };
  }
  return out_t;
}

TensorPtr Graph::mean_rows(const TensorPtr& x,
                           const std::vector<std::uint8_t>& keep) {
  if (x->rank() != 2) {
    throw DimensionError("mean_rows needs a matrix, got " + x->shape_str());
  }
  if (keep.size() != x->rows()) {
    throw DimensionError("mean_rows mask length " +
                         std::to_string(keep.size()) + " does not match " +
                         x->shape_str());
  }
  std::size_t count = 0;
  for (auto k : keep) count += k ? 1 : 0;
  if (count == 0) throw ArgumentError("mean_rows with no rows kept");
  const std::size_t n = x->cols();
  std::vector<double> out(n);
  ExactSum acc;
  for (std::size_t j = 0; j < n; ++j) {
    acc.reset();
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) acc.add(x->values()[i * n + j]);
    out[j] = acc.result() / static_cast<double>(count);
  }
  TensorPtr out_t = emit({1, n}, std::move(out), {x});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [x, self, keep, n, count]() {
      const std::vector<double>& gv = self->grad();
      const double inv = 1.0 / static_cast<double>(count);
      for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i])
          for (std::size_t j = 0; j < n; ++j)
            x->accumulate(i * n + j, gv[j] * inv);
    };
  }
  return out_t;
}

TensorPtr Graph::layer_norm(const TensorPtr& x, const TensorPtr& gain,
                            const TensorPtr& bias, double eps) {
  if (x->rank() != 2) {
    throw DimensionError("layer_norm needs a matrix, got " + x->shape_str());
  }
  const std::size_t m = x->rows(), n = x->cols();
  if (gain->rank() != 1 || gain->numel() != n || bias->rank() != 1 ||
      bias->numel() != n) {
    throw DimensionError("layer_norm gain/bias must be length-" +
                         std::to_string(n) + " vectors, got " +
                         gain->shape_str() + " and " + bias->shape_str());
  }
  std::vector<double> out(m * n);
  // normalized rows and inverse stddevs are reused by the backward pass
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_sd = std::make_shared<std::vector<double>>(m);
  ExactSum acc;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x->values().data() + i * n;
    acc.reset();
    for (std::size_t j = 0; j < n; ++j) acc.add(row[j]);
    const double mean = acc.result() / static_cast<double>(n);
    acc.reset();
    for (std::size_t j = 0; j < n; ++j)
      acc.add((row[j] - mean) * (row[j] - mean));
    const double var = acc.result() / static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[i] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mean) * inv;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gain->values()[j] + bias->values()[j];
    }
  }
  TensorPtr out_t = emit({m, n}, std::move(out), {x, gain, bias});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [x, gain, bias, self, xhat, inv_sd, m, n]() {
      const std::vector<double>& gv = self->grad();
      if (gain->wants_grad())
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i)
            s += gv[i * n + j] * (*xhat)[i * n + j];
          gain->accumulate(j, s);
        }
      if (bias->wants_grad())
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += gv[i * n + j];
          bias->accumulate(j, s);
        }
      if (x->wants_grad()) {
        const double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = gv[i * n + j] * gain->values()[j];
            s1 += gh;
            s2 += gh * (*xhat)[i * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = gv[i * n + j] * gain->values()[j];
            x->accumulate(i * n + j, (*inv_sd)[i] * (gh - s1 / dn -
                                                     (*xhat)[i * n + j] * s2 / dn));
          }
        }
      }
    };
  }
  return out_t;
}

TensorPtr Graph::cross_entropy(const TensorPtr& logits,
                               const std::vector<std::size_t>& labels) {
  if (logits->rank() != 2) {
    throw DimensionError("cross_entropy needs a logits matrix, got " +
                         logits->shape_str());
  }
  const std::size_t m = logits->rows(), c = logits->cols();
  if (labels.size() != m) {
    throw DimensionError("cross_entropy got " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(m) + " rows");
  }
  for (std::size_t y : labels) {
    if (y >= c) {
      throw IndexError("label " + std::to_string(y) +
                       " out of range for " + std::to_string(c) + " classes");
    }
  }
  // per-row softmax probabilities, kept for the backward pass
  auto probs = std::make_shared<std::vector<double>>(m * c);
  ExactSum acc;
  acc.reset();
  ExactSum total;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = logits->values().data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    acc.reset();
    for (std::size_t j = 0; j < c; ++j) {
      (*probs)[i * c + j] = std::exp(row[j] - mx);
      acc.add((*probs)[i * c + j]);
    }
    const double z = acc.result();
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
    total.add(-(row[labels[i]] - mx - std::log(z)));
  }
  std::vector<double> out{total.result() / static_cast<double>(m)};
  TensorPtr out_t = emit({}, std::move(out), {logits});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [logits, self, probs, labels, m, c]() {
      const double g = self->grad()[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot = (j == labels[i]) ? 1.0 : 0.0;
          logits->accumulate(i * c + j, g * ((*probs)[i * c + j] - onehot));
        }
    };
  }
  return out_t;
}

TensorPtr Graph::sum(const TensorPtr& x) {
  std::vector<double> out{exact_sum(x->values())};
  TensorPtr out_t = emit({}, std::move(out), {x});
  if (out_t->wants_grad()) {
    Tensor* self = out_t.get();
    out_t->backprop_ = [x, self]() {
      const double g = self->grad()[0];
      for (std::size_t i = 0; i < x->numel(); ++i) x->accumulate(i, g);
    };
  }
  return out_t;
}

void Graph::backward(const TensorPtr& loss) {
  if (!loss->is_scalar()) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        loss->shape_str());
  }
  if (!loss->wants_grad()) return;  // nothing trainable upstream
  loss->accumulate(0, 1.0);
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    Tensor& node = **it;
    if (node.backprop_ && node.has_grad()) node.backprop_();
  }
}

}  // namespace adeptlab
