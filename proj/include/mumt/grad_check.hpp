#pragma once

#include <cstring>
#include <functional>
#include <utility>

#include "mumt/tensor_ops.hpp"

namespace mumt {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int64_t n_checked = 0;
};

namespace detail {

// Absolute error for small magnitudes, relative for large.
inline double rel_err(double a, double n) {
  double denom = std::max({1.0, std::fabs(a), std::fabs(n)});
  return std::fabs(a - n) / denom;
}

template <typename S>
void check_deterministic(const std::function<Tensor<S>()>& eval) {
  NoGradGuard ng;
  Tensor<S> y1 = eval();
  Tensor<S> y2 = eval();
  if (y1.numel() != y2.numel() ||
      std::memcmp(y1.data().data(), y2.data().data(), sizeof(S) * size_t(y1.numel())) != 0)
    throw ValueError(
        "finite_diff_check aborted: f is non-deterministic (two identical calls returned "
        "different values); disable dropout/stochastic paths before gradient checking");
}

}  // namespace detail

// Central-difference oracle for f: tensor -> scalar. Independent of the
// backward pass it validates: numeric side runs with the graph disabled.
template <typename S>
GradCheckReport finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                                  const Tensor<S>& x0, double eps = 1e-5, double tol = 1e-4) {
  detail::check_deterministic<S>([&] { return f(x0); });

  Tensor<S> x = x0.detach();
  x.set_requires_grad(true);
  Tensor<S> loss = f(x);
  if (loss.numel() != 1)
    throw ShapeError("finite_diff_check: f must return a scalar, got " + shape_str(loss.shape()));
  backward(loss);
  std::vector<S> analytic(x.grad().begin(), x.grad().end());

  Tensor<S> xp = x0.detach();
  GradCheckReport report;
  report.n_checked = xp.numel();
  {
    NoGradGuard ng;
    for (int64_t i = 0; i < xp.numel(); ++i) {
      S saved = xp.data_mut()[i];
      xp.data_mut()[i] = saved + S(eps);
      double fp = double(f(xp).item());
      xp.data_mut()[i] = saved - S(eps);
      double fm = double(f(xp).item());
      xp.data_mut()[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      report.max_rel_err = std::max(report.max_rel_err, detail::rel_err(double(analytic[i]), numeric));
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

// Same oracle, applied to selected elements of a parameter set: loss_fn closes
// over the parameters and is re-evaluated after in-place perturbations.
// elements are (parameter index, flat element index) pairs.
template <typename S>
GradCheckReport finite_diff_check_params(
    const std::function<Tensor<S>()>& loss_fn, const std::vector<Tensor<S>>& params,
    const std::vector<std::pair<size_t, size_t>>& elements, double eps = 1e-5,
    double tol = 1e-4) {
  detail::check_deterministic<S>(loss_fn);

  for (auto p : params) p.zero_grad();
  Tensor<S> loss = loss_fn();
  if (loss.numel() != 1)
    throw ShapeError("finite_diff_check_params: loss must be scalar, got " +
                     shape_str(loss.shape()));
  backward(loss);

  GradCheckReport report;
  report.n_checked = int64_t(elements.size());
  NoGradGuard ng;
  for (auto [pi, ei] : elements) {
    Tensor<S> p = params.at(pi);
    double analytic = p.has_grad() ? double(p.grad()[ei]) : 0.0;
    S saved = p.data_mut()[ei];
    p.data_mut()[ei] = saved + S(eps);
    double fp = double(loss_fn().item());
    p.data_mut()[ei] = saved - S(eps);
    double fm = double(loss_fn().item());
    p.data_mut()[ei] = saved;
    double numeric = (fp - fm) / (2.0 * eps);
    report.max_rel_err = std::max(report.max_rel_err, detail::rel_err(analytic, numeric));
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace mumt
