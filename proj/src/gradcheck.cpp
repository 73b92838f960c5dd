#include "adeptlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace adeptlab {

double grad_check(const std::function<TensorPtr(Graph&)>& build_loss,
                  const std::vector<TensorPtr>& params, double eps) {
  if (eps <= 0.0) throw ArgumentError("grad_check eps must be positive");

  for (const auto& p : params) p->zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    TensorPtr loss = build_loss(g);
    g.backward(loss);
    for (const auto& p : params) {
      analytic.push_back(p->has_grad() ? p->grad()
                                       : std::vector<double>(p->numel(), 0.0));
      p->zero_grad();
    }
  }

  auto eval = [&]() {
    Graph g;
    return build_loss(g)->scalar();
  };

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double saved = p.values()[i];
      p.values()[i] = saved + eps;
      const double up = eval();
      p.values()[i] = saved - eps;
      const double down = eval();
      p.values()[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel = std::fabs(a - numeric) /
                         std::max({std::fabs(a), std::fabs(numeric), 1e-12});
      worst = std::max(worst, rel);
    }
    p.zero_grad();
  }
  return worst;
}

}  // namespace adeptlab
