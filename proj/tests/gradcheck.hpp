#pragma once

// Central finite-difference gradient checking shared by the unit tests and
// the acceptance suite. The analytic side is the tape; the numeric side
// re-evaluates the function with perturbed inputs, so the two routes stay
// independent.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "uvp/autodiff.hpp"
#include "uvp/tensor.hpp"

namespace uvp::gradcheck {

using ScalarFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

struct Report {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  std::string worst;
};

inline double eval(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  std::vector<ad::Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(ad::leaf(t, false));
  return f(vars)->val[0];
}

// Checks d(f)/d(inputs[i][j]) for every (i, j) unless coords_per_input > 0,
// in which case a deterministic stride samples that many coordinates.
inline Report run(const ScalarFn& f, std::vector<Tensor> inputs,
                  double rel_tol = 1e-4, int64_t coords_per_input = 0,
                  double fd_step = 1e-5, double floor = 1e-6) {
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(ad::leaf(t, true));
  ad::Var root = f(vars);
  ad::backward(root);

  Report rep;
  for (size_t i = 0; i < inputs.size(); ++i) {
    int64_t n = inputs[i].numel();
    int64_t stride = 1;
    if (coords_per_input > 0 && n > coords_per_input)
      stride = n / coords_per_input;
    for (int64_t j = 0; j < n; j += stride) {
      double orig = inputs[i][j];
      double h = fd_step * std::max(1.0, std::fabs(orig));
      inputs[i][j] = orig + h;
      double fp = eval(f, inputs);
      inputs[i][j] = orig - h;
      double fm = eval(f, inputs);
      inputs[i][j] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = vars[i]->grad_alloc ? vars[i]->grad[j] : 0.0;
      double denom = std::max({std::fabs(fd), std::fabs(an), floor});
      double rel = std::fabs(fd - an) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "input " + std::to_string(i) + " coord " + std::to_string(j) +
                    " analytic=" + std::to_string(an) + " fd=" + std::to_string(fd);
      }
    }
  }
  (void)rel_tol;
  return rep;
}

}  // namespace uvp::gradcheck
