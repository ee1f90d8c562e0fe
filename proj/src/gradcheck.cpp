#include "wassalign/gradcheck.hpp"

#include <cmath>

namespace wassalign {

GradCheckResult check_gradients(const std::function<Var(Tape&)>& build,
                                const std::vector<Parameter*>& params, double h, double floor) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    t.backward(build(t));
  }
  GradCheckResult res;
  for (Parameter* p : params) {
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      double orig = p->value.at(i);
      p->value.set(i, orig + h);
      double up;
      {
        Tape t;
        up = build(t).item();
      }
      p->value.set(i, orig - h);
      double down;
      {
        Tape t;
        down = build(t).item();
      }
      p->value.set(i, orig);
      double fd = (up - down) / (2.0 * h);
      double analytic = p->grad.at(i);
      double denom = std::max({std::fabs(fd), std::fabs(analytic), floor});
      double rel = std::fabs(fd - analytic) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = p->name + "[" + std::to_string(i) + "]: analytic=" +
                    std::to_string(analytic) + ", fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

}  // namespace wassalign
