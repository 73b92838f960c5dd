#include "adeptlab/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "adeptlab/numerics.hpp"
#include "adeptlab/tasks.hpp"

namespace adeptlab {

namespace {

// y = x * W for one row vector x (length d), W being d x h.
std::vector<double> project_row(const double* x, const Tensor& W) {
  const std::size_t d = W.rows(), h = W.cols();
  std::vector<double> y(h);
  ExactSum acc;
  for (std::size_t j = 0; j < h; ++j) {
    acc.reset();
    for (std::size_t i = 0; i < d; ++i) acc.add(x[i] * W.values()[i * h + j]);
    y[j] = acc.result();
  }
  return y;
}

// Every row of X projected through W; X is rows x d flattened.
std::vector<std::vector<double>> project_rows(const std::vector<double>& X,
                                              std::size_t rows,
                                              const Tensor& W) {
  std::vector<std::vector<double>> out;
  out.reserve(rows);
  const std::size_t d = W.rows();
  for (std::size_t i = 0; i < rows; ++i)
    out.push_back(project_row(X.data() + i * d, W));
  return out;
}

double dot_exact(const std::vector<double>& a, const std::vector<double>& b) {
  ExactSum acc;
  for (std::size_t i = 0; i < a.size(); ++i) acc.add(a[i] * b[i]);
  return acc.result();
}

struct CoreResult {
  double prefix_mass;
  double scale;
  std::vector<double> bias;             // head_dim
  std::vector<double> content_weights;  // content-only softmax, length s
  std::vector<double> content_term;     // head_dim
  std::vector<double> direct;           // head_dim
};

// The shared arithmetic behind all three decompositions: a single query
// against prompt keys P and content keys X. Splitting the full softmax
//   direct = sum_m alpha_m v_m
// by key origin gives
//   direct = bias + (1 - prefix_mass) * softmax_content(q) X Wv
// exactly in real arithmetic; everything here is summed exactly so the
// fp64 gap stays tiny.
CoreResult decompose_core(const std::vector<double>& q_row,
                          const std::vector<double>& P, std::size_t l,
                          const std::vector<double>& X, std::size_t s,
                          const HeadWeights& head, bool scaled) {
  const std::size_t h = head.W_Q->cols();
  const double temp =
      scaled ? 1.0 / std::sqrt(static_cast<double>(h)) : 1.0;

  const std::vector<double> q = project_row(q_row.data(), *head.W_Q);
  const auto pk = project_rows(P, l, *head.W_K);
  const auto xk = project_rows(X, s, *head.W_K);
  const auto pv = project_rows(P, l, *head.W_V);
  const auto xv = project_rows(X, s, *head.W_V);

  std::vector<double> plog(l), xlog(s);
  for (std::size_t k = 0; k < l; ++k) plog[k] = dot_exact(q, pk[k]) * temp;
  for (std::size_t j = 0; j < s; ++j) xlog[j] = dot_exact(q, xk[j]) * temp;

  double mx = plog.empty() ? xlog[0] : plog[0];
  for (double v : plog) mx = std::max(mx, v);
  for (double v : xlog) mx = std::max(mx, v);

  std::vector<double> pexp(l), xexp(s);
  ExactSum zacc;
  for (std::size_t k = 0; k < l; ++k) {
    pexp[k] = std::exp(plog[k] - mx);
    zacc.add(pexp[k]);
  }
  for (std::size_t j = 0; j < s; ++j) {
    xexp[j] = std::exp(xlog[j] - mx);
    zacc.add(xexp[j]);
  }
  const double z = zacc.result();

  CoreResult out;
  out.prefix_mass = exact_sum(pexp) / z;
  out.scale = 1.0 - out.prefix_mass;

  out.bias.assign(h, 0.0);
  ExactSum acc;
  for (std::size_t jdim = 0; jdim < h; ++jdim) {
    acc.reset();
    for (std::size_t k = 0; k < l; ++k) acc.add((pexp[k] / z) * pv[k][jdim]);
    out.bias[jdim] = acc.result();
  }

  // content-only softmax, its own max subtraction
  double cmx = xlog[0];
  for (double v : xlog) cmx = std::max(cmx, v);
  std::vector<double> cexp(s);
  acc.reset();
  for (std::size_t j = 0; j < s; ++j) {
    cexp[j] = std::exp(xlog[j] - cmx);
    acc.add(cexp[j]);
  }
  const double cz = acc.result();
  out.content_weights.resize(s);
  for (std::size_t j = 0; j < s; ++j) out.content_weights[j] = cexp[j] / cz;

  out.content_term.assign(h, 0.0);
  for (std::size_t jdim = 0; jdim < h; ++jdim) {
    acc.reset();
    for (std::size_t j = 0; j < s; ++j)
      acc.add(out.content_weights[j] * xv[j][jdim]);
    out.content_term[jdim] = acc.result();
  }

  out.direct.assign(h, 0.0);
  for (std::size_t jdim = 0; jdim < h; ++jdim) {
    acc.reset();
    for (std::size_t k = 0; k < l; ++k) acc.add((pexp[k] / z) * pv[k][jdim]);
    for (std::size_t j = 0; j < s; ++j) acc.add((xexp[j] / z) * xv[j][jdim]);
    out.direct[jdim] = acc.result();
  }
  return out;
}

DecompositionReport finish_report(CoreResult core) {
  DecompositionReport r;
  r.prefix_mass = core.prefix_mass;
  r.scale = core.scale;
  r.bias_term = core.bias;
  r.content_term = core.content_term;
  r.direct = core.direct;
  const std::size_t h = core.bias.size();
  r.reconstructed.resize(h);
  double gap = 0.0;
  for (std::size_t j = 0; j < h; ++j) {
    r.reconstructed[j] = core.bias[j] + core.scale * core.content_term[j];
    gap = std::max(gap, std::fabs(r.reconstructed[j] - core.direct[j]));
  }
  r.max_abs_gap = gap;
  if (gap > 1e-10) {
    throw ContractError("attention decomposition drifted from the direct "
                        "output by " + std::to_string(gap));
  }
  return r;
}

void check_query_width(const TensorPtr& e_i, std::size_t d) {
  if (e_i->rank() != 2 || e_i->rows() != 1 || e_i->cols() != d) {
    throw DimensionError("query must be 1x" + std::to_string(d) + ", got " +
                         e_i->shape_str());
  }
}

void check_prompt(const TensorPtr& P, std::size_t d) {
  if (!P || P->rank() != 2 || P->cols() != d || P->rows() == 0) {
    throw ArgumentError("decomposition needs a non-empty prompt of width " +
                        std::to_string(d));
  }
}

}  // namespace

DecompositionReport pt_decompose(const TensorPtr& e_i, const TensorPtr& E,
                                 const TensorPtr& P, const HeadWeights& head,
                                 bool scaled) {
  const std::size_t d = head.W_Q->rows();
  check_query_width(e_i, d);
  check_prompt(P, d);
  if (E->cols() != d) {
    throw DimensionError("content width " + E->shape_str() +
                         " does not match head width " + std::to_string(d));
  }
  return finish_report(decompose_core(e_i->values(), P->values(), P->rows(),
                                      E->values(), E->rows(), head, scaled));
}

DecompositionReport adept_decompose(const TensorPtr& e_i, const TensorPtr& E,
                                    const AdaptivePrompt& ap, const TensorPtr& P,
                                    const HeadWeights& head, bool scaled) {
  const std::size_t d = head.W_Q->rows();
  check_query_width(e_i, d);
  check_prompt(P, d);

  Graph g;
  TensorPtr q_off = adept_offset(g, g.constant(e_i->shape(), e_i->values()), ap);
  TensorPtr e_off = adept_offset(g, g.constant(E->shape(), E->values()), ap);
  std::vector<double> q_row = e_i->values();
  for (std::size_t j = 0; j < q_row.size(); ++j)
    q_row[j] += q_off->values()[j];
  std::vector<double> X = E->values();
  for (std::size_t j = 0; j < X.size(); ++j) X[j] += e_off->values()[j];

  return finish_report(decompose_core(q_row, P->values(), P->rows(), X,
                                      E->rows(), head, scaled));
}

DecompositionReport dept_decompose(const TensorPtr& e_i, std::size_t position,
                                   const TensorPtr& E,
                                   const DecomposedPrompt& dp,
                                   const HeadWeights& head, bool scaled) {
  const std::size_t d = head.W_Q->rows();
  check_query_width(e_i, d);
  check_prompt(dp.prompt, d);
  const std::size_t s = E->rows();
  if (dp.A->rows() < s) {
    throw LengthError("content length " + std::to_string(s) +
                      " exceeds offset table length " +
                      std::to_string(dp.A->rows()));
  }
  if (position >= s) {
    throw IndexError("query position " + std::to_string(position) +
                     " out of range for " + std::to_string(s) + " rows");
  }

  Graph g;
  TensorPtr delta_full = g.matmul(dp.A, dp.B);
  std::vector<double> delta(delta_full->values().begin(),
                            delta_full->values().begin() + s * d);

  std::vector<double> q_row = e_i->values();
  for (std::size_t j = 0; j < d; ++j) q_row[j] += delta[position * d + j];
  std::vector<double> X = E->values();
  for (std::size_t j = 0; j < X.size(); ++j) X[j] += delta[j];

  CoreResult core = decompose_core(q_row, dp.prompt->values(),
                                   dp.prompt->rows(), X, s, head, scaled);

  // Split the content term by feeding the same content weights the
  // offset rows and the raw token rows separately.
  const auto dv = project_rows(delta, s, *head.W_V);
  const auto ev = project_rows(E->values(), s, *head.W_V);
  const std::size_t h = head.W_V->cols();
  DecompositionReport r;
  r.prefix_mass = core.prefix_mass;
  r.scale = core.scale;
  r.bias_term = core.bias;
  r.direct = core.direct;
  r.content_offset_term.assign(h, 0.0);
  r.content_token_term.assign(h, 0.0);
  ExactSum acc;
  for (std::size_t jdim = 0; jdim < h; ++jdim) {
    acc.reset();
    for (std::size_t j = 0; j < s; ++j)
      acc.add(core.content_weights[j] * dv[j][jdim]);
    r.content_offset_term[jdim] = acc.result();
    acc.reset();
    for (std::size_t j = 0; j < s; ++j)
      acc.add(core.content_weights[j] * ev[j][jdim]);
    r.content_token_term[jdim] = acc.result();
  }
  r.content_term.resize(h);
  r.reconstructed.resize(h);
  double gap = 0.0;
  for (std::size_t jdim = 0; jdim < h; ++jdim) {
    r.content_term[jdim] =
        r.content_offset_term[jdim] + r.content_token_term[jdim];
    r.reconstructed[jdim] = r.bias_term[jdim] + r.scale * r.content_term[jdim];
    gap = std::max(gap, std::fabs(r.reconstructed[jdim] - r.direct[jdim]));
  }
  r.max_abs_gap = gap;
  if (gap > 1e-10) {
    throw ContractError("attention decomposition drifted from the direct "
                        "output by " + std::to_string(gap));
  }
  return r;
}

TensorPtr cyclic_shift(const TensorPtr& offsets, std::size_t j) {
  if (offsets->rank() != 2) {
    throw DimensionError("cyclic_shift needs a matrix, got " +
                         offsets->shape_str());
  }
  const std::size_t s = offsets->rows(), d = offsets->cols();
  if (j > s) {
    throw ArgumentError("shift " + std::to_string(j) + " out of range 0.." +
                        std::to_string(s));
  }
  std::vector<double> out(s * d);
  for (std::size_t i = 0; i < s; ++i) {
    const std::size_t src = (i + j) % s;
    for (std::size_t c = 0; c < d; ++c)
      out[i * d + c] = offsets->values()[src * d + c];
  }
  return Tensor::make({s, d}, std::move(out), false);
}

TensorPtr method_offsets(const PeftMethod& method, const TensorPtr& E) {
  if (E->rank() != 2) {
    throw DimensionError("method_offsets needs a content matrix, got " +
                         E->shape_str());
  }
  Graph g;
  if (std::holds_alternative<SoftPrompt>(method)) {
    return Tensor::zeros(E->shape(), false);
  }
  if (const auto* dp = std::get_if<DecomposedPrompt>(&method)) {
    const std::size_t sp = E->rows();
    if (sp > dp->A->rows()) {
      throw LengthError("content length " + std::to_string(sp) +
                        " exceeds offset table length " +
                        std::to_string(dp->A->rows()));
    }
    TensorPtr full = g.matmul(dp->A, dp->B);
    std::vector<std::size_t> lead(sp);
    for (std::size_t i = 0; i < sp; ++i) lead[i] = i;
    return g.row_select(full, lead);
  }
  const auto& ap = std::get<AdaptivePrompt>(method);
  return adept_offset(g, g.constant(E->shape(), E->values()), ap);
}

ShiftProbeReport shift_probe(const BackboneModel& backbone,
                             const PeftMethod& method,
                             const std::vector<Example>& split,
                             const std::vector<std::size_t>& shifts) {
  ShiftProbeReport report;
  const EvalResult baseline = evaluate(backbone, method, split);
  report.baseline_accuracy = baseline.accuracy;

  const auto* dp = std::get_if<DecomposedPrompt>(&method);
  TensorPtr delta;
  std::size_t table_len = 0;
  if (dp) {
    Graph g;
    delta = g.matmul(dp->A, dp->B);
    table_len = delta->rows();
  }

  for (std::size_t j : shifts) {
    ShiftProbeEntry entry;
    entry.shift = j;
    if (!dp) {
      // shifts are defined as the identity for token-wise / offset-free
      // methods
      entry.accuracy = baseline.accuracy;
      entry.changed_predictions = 0;
      report.entries.push_back(entry);
      continue;
    }
    if (j > table_len) {
      throw ArgumentError("shift " + std::to_string(j) + " out of range 0.." +
                          std::to_string(table_len));
    }
    const std::size_t d = delta->cols();
    ExactSum l2;
    for (std::size_t i = 0; i < table_len; ++i) {
      const std::size_t src = (i + j) % table_len;
      double row_max = 0.0;
      l2.reset();
      for (std::size_t c = 0; c < d; ++c) {
        const double diff =
            delta->values()[src * d + c] - delta->values()[i * d + c];
        row_max = std::max(row_max, std::fabs(diff));
        l2.add(diff * diff);
      }
      entry.displacement_max = std::max(entry.displacement_max, row_max);
      entry.displacement_mean += std::sqrt(l2.result());
    }
    entry.displacement_mean /= static_cast<double>(table_len);

    std::size_t hits = 0;
    for (std::size_t i = 0; i < split.size(); ++i) {
      const Example& ex = split[i];
      Graph g;
      TensorPtr e = backbone.embed(g, ex.ids);
      TensorPtr full = g.matmul(dp->A, dp->B);
      std::vector<std::size_t> rows(ex.ids.size());
      for (std::size_t r = 0; r < rows.size(); ++r)
        rows[r] = (r + j) % table_len;
      TensorPtr content = g.add(e, g.row_select(full, rows));
      std::vector<std::uint8_t> mask(ex.ids.size(), 1);
      TensorPtr input = dp->prompt ? g.concat_rows(dp->prompt, content)
                                   : content;
      TensorPtr logits = backbone.forward(g, input, mask);
      std::size_t pred = 0;
      for (std::size_t c = 1; c < logits->numel(); ++c)
        if (logits->values()[c] > logits->values()[pred]) pred = c;
      if (pred != baseline.predictions[i]) ++entry.changed_predictions;
      if (pred == ex.label) ++hits;
    }
    entry.accuracy =
        static_cast<double>(hits) / static_cast<double>(split.size());
    report.entries.push_back(entry);
  }
  return report;
}

AbsStats abs_stats(const std::vector<double>& elements) {
  if (elements.empty()) throw ArgumentError("abs_stats over nothing");
  ExactSum acc;
  for (double x : elements) acc.add(std::fabs(x));
  const double mean = acc.result() / static_cast<double>(elements.size());
  acc.reset();
  for (double x : elements) {
    const double dlt = std::fabs(x) - mean;
    acc.add(dlt * dlt);
  }
  AbsStats out;
  out.mean = mean;
  out.variance = acc.result() / static_cast<double>(elements.size());
  return out;
}

OffsetStatsReport offset_stats(const BackboneModel& backbone,
                               const PeftMethod& method,
                               const std::vector<Example>& split) {
  if (split.empty()) throw ArgumentError("offset_stats got an empty split");
  std::vector<double> emb_elems, off_elems;
  for (const Example& ex : split) {
    Graph g;
    TensorPtr e = backbone.embed(g, ex.ids);
    TensorPtr off = method_offsets(method, e);
    emb_elems.insert(emb_elems.end(), e->values().begin(), e->values().end());
    off_elems.insert(off_elems.end(), off->values().begin(),
                     off->values().end());
  }
  OffsetStatsReport report;
  report.embeddings = abs_stats(emb_elems);
  report.offsets = abs_stats(off_elems);
  std::size_t tokens = 0;
  for (const Example& ex : split) tokens += ex.ids.size();
  report.token_count = tokens;
  return report;
}

double prepend_probe(const PeftMethod& method, const TensorPtr& E,
                     const TensorPtr& neutral_prefix) {
  if (E->rank() != 2 || neutral_prefix->rank() != 2 ||
      E->cols() != neutral_prefix->cols()) {
    throw DimensionError("prepend_probe needs matrices of equal width, got " +
                         E->shape_str() + " and " + neutral_prefix->shape_str());
  }
  const std::size_t p = neutral_prefix->rows();
  const std::size_t s = E->rows();
  const std::size_t d = E->cols();

  TensorPtr plain = method_offsets(method, E);

  std::vector<double> joined(neutral_prefix->values());
  joined.insert(joined.end(), E->values().begin(), E->values().end());
  TensorPtr with_prefix =
      method_offsets(method, Tensor::make({p + s, d}, std::move(joined), false));

  double worst = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = with_prefix->values()[(p + i) * d + c] -
                          plain->values()[i * d + c];
      worst = std::max(worst, std::fabs(diff));
    }
  }
  return worst;
}

}  // namespace adeptlab
