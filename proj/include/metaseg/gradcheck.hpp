#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "metaseg/errors.hpp"
#include "metaseg/tensor.hpp"

namespace metaseg {

// Central finite differences per scalar coordinate against an analytic
// GradMap. Returns the max relative error, denominator max(|a|,|n|,1e-12).
// Tight thresholds (1e-5) need Real = double.
template <typename Real>
Real grad_check(const std::function<Real(const ParamTree<Real>&)>& fn, const ParamTree<Real>& point,
                const GradMap<Real>& analytic, Real eps) {
  if (!(eps > Real(0))) throw ContractError("grad_check: eps must be positive");
  ParamTree<Real> probe = point;
  Real max_err = 0;
  for (const auto& [name, grad] : analytic) {
    auto it = probe.find(name);
    if (it == probe.end()) throw LookupError("grad_check: parameter '" + name + "' missing from point");
    Tensor<Real>& t = it->second;
    require_same_shape(t.shape, grad.shape, "grad_check");
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const Real orig = t.data[i];
      t.data[i] = orig + eps;
      const Real fp = fn(probe);
      t.data[i] = orig - eps;
      const Real fm = fn(probe);
      t.data[i] = orig;
      if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
        throw NumericError("grad_check: non-finite loss while probing '" + name + "' coordinate " +
                           std::to_string(i));
      const Real numeric = (fp - fm) / (2 * eps);
      const Real a = grad.data[i];
      const Real denom = std::max({std::abs(a), std::abs(numeric), Real(1e-12)});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace metaseg
