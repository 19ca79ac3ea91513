// Independent reference computations for the tests. Nothing here touches
// the graph engine: plain loops over nested vectors, written out the long
// way so that they share no code path with the library.

#ifndef DEINFOREG_TESTS_ORACLES_HPP
#define DEINFOREG_TESTS_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "deinforeg/pipeline.hpp"
#include "deinforeg/tensor.hpp"

namespace oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid to_grid(const deinforeg::Matrix& m) {
  Grid g(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
  }
  return g;
}

inline Grid matmul(const Grid& a, const Grid& b) {
  Grid c(a.size(), std::vector<double>(b.empty() ? 0 : b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < c[i].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  }
  return c;
}

inline Grid normalize_rows(Grid x, double eps) {
  for (auto& row : x) {
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double n = std::sqrt(ss) + eps;
    for (double& v : row) v /= n;
  }
  return x;
}

inline Grid center_columns(Grid x) {
  const std::size_t n = x.size(), c = x[0].size();
  for (std::size_t j = 0; j < c; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += x[i][j];
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) x[i][j] -= m;
  }
  return x;
}

inline Grid center_rows(Grid x) {
  for (auto& row : x) {
    double m = 0.0;
    for (double v : row) m += v;
    m /= static_cast<double>(row.size());
    for (double& v : row) v -= m;
  }
  return x;
}

/// Hinge on per-column std of already-centered embeddings.
inline double variance(const Grid& centered, double gamma, bool divide_by_n) {
  const std::size_t n = centered.size(), c = centered[0].size();
  double total = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += centered[i][j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (centered[i][j] - mean) * (centered[i][j] - mean);
    var /= static_cast<double>(n);
    const double s = std::sqrt(var + 1e-7);
    total += std::max(0.0, gamma - s);
  }
  total /= static_cast<double>(c);
  if (divide_by_n) total /= static_cast<double>(n);
  return total;
}

/// Squared difference of label and cosine similarity matrices.
// z holds unit rows already.
inline double invariance_unit(const Grid& z, const Grid& onehot, bool divide_by_n_squared) {
  const std::size_t n = z.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      double sy = 0.0, sx = 0.0;
      for (std::size_t j = 0; j < onehot[i].size(); ++j) sy += onehot[i][j] * onehot[k][j];
      for (std::size_t j = 0; j < z[i].size(); ++j) sx += z[i][j] * z[k][j];
      total += (sy - sx) * (sy - sx);
    }
  }
  const double dn = static_cast<double>(n);
  return divide_by_n_squared ? total / (dn * dn) : total / dn;
}

inline double invariance(const Grid& emb, const Grid& onehot, double eps, bool center_rows_first,
                         bool divide_by_n_squared) {
  const Grid z = normalize_rows(center_rows_first ? center_rows(emb) : emb, eps);
  return invariance_unit(z, onehot, divide_by_n_squared);
}

inline double covariance(const Grid& emb) {
  const Grid c = center_columns(emb);
  const std::size_t n = c.size(), d = c[0].size();
  double total = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) {
      if (a == b) continue;
      double cov = 0.0;
      for (std::size_t i = 0; i < n; ++i) cov += c[i][a] * c[i][b];
      cov /= static_cast<double>(n);
      total += cov * cov;
    }
  }
  return total / static_cast<double>(d);
}

inline double cross_entropy(const Grid& logits, const Grid& onehot) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double m = logits[i][0];
    for (double v : logits[i]) m = std::max(m, v);
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < logits[i].size(); ++j) total -= onehot[i][j] * (logits[i][j] - lse);
  }
  return total / static_cast<double>(logits.size());
}

inline Grid softmax(const Grid& logits) {
  Grid out = logits;
  for (auto& row : out) {
    double m = row[0];
    for (double v : row) m = std::max(m, v);
    double z = 0.0;
    for (double& v : row) z += (v = std::exp(v - m));
    for (double& v : row) v /= z;
  }
  return out;
}

// Schedules ---------------------------------------------------------------
//
// A task list with explicit precedence edges (each with a lag) and a fixed
// per-device order. Earliest start times are found by repeated relaxation
// until nothing moves, with no assumption about the order tasks are listed.

struct Task {
  std::size_t device;
  double duration;
  std::vector<std::pair<std::size_t, double>> after;  // (task, lag)
};

inline std::vector<double> earliest_starts(const std::vector<Task>& tasks,
                                           const std::vector<std::vector<std::size_t>>& device_order) {
  std::vector<double> start(tasks.size(), 0.0);
  for (bool changed = true; changed;) {
    changed = false;
    auto raise = [&](std::size_t t, double v) {
      if (v > start[t]) {
        start[t] = v;
        changed = true;
      }
    };
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      for (auto [p, lag] : tasks[t].after) raise(t, start[p] + tasks[p].duration + lag);
    }
    for (const auto& order : device_order) {
      for (std::size_t k = 1; k < order.size(); ++k) {
        raise(order[k], start[order[k - 1]] + tasks[order[k - 1]].duration);
      }
    }
  }
  return start;
}

inline double makespan(const std::vector<Task>& tasks, const std::vector<double>& start) {
  double m = 0.0;
  for (std::size_t t = 0; t < tasks.size(); ++t) m = std::max(m, start[t] + tasks[t].duration);
  return m;
}

/// Makespan of a mode's schedule built straight from its definition.
/// Modules are split contiguously, device d holding l with l*D/L == d.
inline double schedule_makespan(deinforeg::ScheduleMode mode, const deinforeg::StageCost& c,
                                std::size_t devices, std::size_t batches) {
  using deinforeg::ScheduleMode;
  const std::size_t L = c.modules.size();
  const std::size_t D = mode == ScheduleMode::Bp ? 1 : std::min(devices, L);
  auto dev = [&](std::size_t l) { return mode == ScheduleMode::Bp ? 0 : l * D / L; };
  std::vector<Task> tasks;
  std::vector<std::vector<std::size_t>> order(D);
  auto add = [&](std::size_t d, double dur, std::vector<std::pair<std::size_t, double>> after) {
    tasks.push_back({d, dur, std::move(after)});
    order[d].push_back(tasks.size() - 1);
    return tasks.size() - 1;
  };
  auto lag = [&](std::size_t from, std::size_t to) { return dev(from) == dev(to) ? 0.0 : c.transfer; };

  if (mode != ScheduleMode::DeInfoReg) {
    std::size_t prev = SIZE_MAX;
    auto chain = [&](std::size_t d, double dur, double l) {
      std::vector<std::pair<std::size_t, double>> a;
      if (prev != SIZE_MAX) a.push_back({prev, l});
      prev = add(d, dur, a);
    };
    for (std::size_t b = 0; b < batches; ++b) {
      for (std::size_t l = 0; l < L; ++l) chain(dev(l), c.modules[l].forward, l ? lag(l - 1, l) : 0.0);
      chain(dev(L - 1), c.modules[L - 1].loss, 0.0);
      for (std::size_t l = L; l-- > 0;) {
        chain(dev(l), c.modules[l].backward, l + 1 < L ? lag(l + 1, l) : 0.0);
      }
      for (std::size_t l = 0; l < L; ++l) chain(dev(l), c.modules[l].update, 0.0);
    }
  } else {
    std::vector<std::size_t> last_fw(L);
    for (std::size_t b = 0; b < batches; ++b) {
      for (std::size_t d = 0; d < D; ++d) {
        std::vector<std::size_t> mine;
        for (std::size_t l = 0; l < L; ++l) {
          if (dev(l) == d) mine.push_back(l);
        }
        for (std::size_t l : mine) {
          std::vector<std::pair<std::size_t, double>> a;
          if (l > 0) a.push_back({last_fw[l - 1], lag(l - 1, l)});
          last_fw[l] = add(d, c.modules[l].forward, a);
        }
        for (std::size_t l : mine) {
          add(d, c.modules[l].loss, {});
          add(d, c.modules[l].backward, {});
          add(d, c.modules[l].update, {});
        }
      }
    }
  }
  return makespan(tasks, earliest_starts(tasks, order));
}

}  // namespace oracle

#endif  // DEINFOREG_TESTS_ORACLES_HPP
