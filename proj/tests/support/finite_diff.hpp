#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "autodiff.hpp"

namespace rnnctp::testsupport {

// Central finite differences against reverse-mode gradients over every entry
// of every parameter in the store. `forward` must rebuild the graph from the
// current parameter values and return the scalar loss value. `analytic` is
// the gradient map from Graph::gradients. Returns the maximum relative error
// max |fd - ad| / max(1, |fd|, |ad|).
inline double max_grad_error(ad::ParameterStore& store,
                             const std::function<double()>& forward,
                             const std::map<std::string, ad::Tensor>& analytic,
                             double eps = 1e-5) {
  double worst = 0.0;
  for (uint32_t p = 0; p < store.count(); ++p) {
    ad::Tensor& t = store.tensor(p);
    const ad::Tensor& g = analytic.at(store.name(p));
    for (size_t i = 0; i < t.size(); ++i) {
      double keep = t.data[i];
      t.data[i] = keep + eps;
      double up = forward();
      t.data[i] = keep - eps;
      double down = forward();
      t.data[i] = keep;
      double fd = (up - down) / (2.0 * eps);
      double ad_g = g.data[i];
      double denom = std::max({1.0, std::abs(fd), std::abs(ad_g)});
      worst = std::max(worst, std::abs(fd - ad_g) / denom);
    }
  }
  return worst;
}

}  // namespace rnnctp::testsupport
