#include "seldist/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace seldist {

double gradcheck(const ScalarFn& f, const Tensor& x0, double h) {
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor x = x0;
    tape.watch(x);
    Tensor loss = f(x);
    analytic = tape.backward(loss).at(x).data();
  }

  // Numeric side runs with x unwatched, so no nodes are recorded anywhere.
  Tensor xp(x0.shape(), x0.data());
  double worst = 0.0;
  for (std::size_t i = 0; i < xp.size(); ++i) {
    std::vector<double>& d = xp.mutable_data();
    const double orig = d[i];
    d[i] = orig + h;
    const double fp = f(xp).value();
    xp.mutable_data()[i] = orig - h;
    const double fm = f(xp).value();
    xp.mutable_data()[i] = orig;
    const double num = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double rel =
        std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace seldist
