#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "deinforeg/autodiff.hpp"
#include "deinforeg/layers.hpp"

using namespace deinforeg;

namespace {

std::pair<double, double> column_mean_and_std(const Matrix& m, std::size_t j) {
  double mean = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) mean += m(i, j);
  mean /= static_cast<double>(m.rows());
  double var = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) var += (m(i, j) - mean) * (m(i, j) - mean);
  return {mean, std::sqrt(var / static_cast<double>(m.rows()))};
}

Matrix bn_train(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
  BatchNorm1d bn(x.cols());
  Graph g;
  return g.value(batchnorm_forward(g, bn, g.leaf(x), g.leaf(gamma), g.leaf(beta), Mode::Train));
}

}  // namespace

TEST_CASE("dense_forward examples") {
  Rng rng(2);
  const Matrix x = rng_normal(rng, 4, 3, 0, 1);
  {
    Graph g;
    NodeId out = dense_forward(g, g.leaf(x), g.leaf(Matrix::identity(3)), g.leaf(Matrix(1, 3)));
    CHECK(g.value(out) == x);
  }
  {
    Graph g;
    NodeId out = dense_forward(g, g.leaf(Matrix{{1, 1}}), g.leaf(Matrix{{1}, {1}}),
                               g.leaf(Matrix{{0.5}}));
    CHECK(g.value(out) == Matrix{{2.5}});
  }
  {
    Graph g;
    NodeId w = g.leaf(rng_normal(rng, 3, 2, 0, 1), true);
    NodeId root = g.sum_all(dense_forward(g, g.leaf(x), w, g.leaf(Matrix(1, 2), true)));
    const Matrix grad = g.backward(root)[w];
    CHECK(max_abs_diff(grad, matmul(transpose(x), Matrix(4, 2, 1.0))) <= 1e-12);
    CHECK(fd_check(g, root, w) < 1e-4);
  }
  {
    Graph g;
    CHECK_THROWS_AS((void)dense_forward(g, g.leaf(x), g.leaf(Matrix(2, 2)), g.leaf(Matrix(1, 2))),
                    ShapeError);
  }
}

TEST_CASE("batchnorm train mode normalizes columns") {
  Rng rng(9);
  const Matrix x = rng_normal(rng, 200, 3, 5.0, 2.0);
  const Matrix y = bn_train(x, Matrix(1, 3, 1.0), Matrix(1, 3, 0.0));
  for (std::size_t j = 0; j < 3; ++j) {
    auto [m, s] = column_mean_and_std(y, j);
    CHECK(std::abs(m) <= 1e-6);
    CHECK(std::abs(s - 1.0) <= 1e-3);
  }
  const Matrix z = bn_train(x, Matrix(1, 3, 0.0), Matrix(1, 3, 7.0));
  for (double v : z.values()) CHECK(v == 7.0);

  Matrix shifted = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < 3; ++j) shifted(i, j) += 2.5 - static_cast<double>(j);
  }
  CHECK(max_abs_diff(bn_train(shifted, Matrix(1, 3, 1.0), Matrix(1, 3, 0.0)),
                     bn_train(x, Matrix(1, 3, 1.0), Matrix(1, 3, 0.0))) <= 1e-6);
}

TEST_CASE("batchnorm: single-row train batch, eval mode, running stats") {
  BatchNorm1d bn(2);
  {
    Graph g;
    CHECK_THROWS_AS((void)batchnorm_forward(g, bn, g.leaf(Matrix{{1, 2}}), g.leaf(Matrix(1, 2, 1.0)),
                                            g.leaf(Matrix(1, 2)), Mode::Train),
                    DomainError);
  }
  Rng rng(4);
  for (int step = 0; step < 5; ++step) {
    Graph g;
    (void)batchnorm_forward(g, bn, g.leaf(rng_normal(rng, 8, 2, 1.0, 3.0)),
                            g.leaf(Matrix(1, 2, 1.0)), g.leaf(Matrix(1, 2)), Mode::Train);
    for (double v : bn.running_var.values()) CHECK(v >= 0.0);
  }
  const Matrix probe = rng_normal(rng, 4, 2, 0, 1);
  auto eval = [&](const Matrix& batch) {
    Graph g;
    return g.value(batchnorm_forward(g, bn, g.leaf(batch), g.leaf(Matrix(1, 2, 1.0)),
                                     g.leaf(Matrix(1, 2)), Mode::Eval));
  };
  const Matrix first = eval(probe);
  (void)eval(rng_normal(rng, 16, 2, 10.0, 5.0));
  CHECK(eval(probe) == first);
  // Row i of an eval-mode output depends on row i alone.
  Matrix single(1, 2);
  single(0, 0) = probe(2, 0);
  single(0, 1) = probe(2, 1);
  const Matrix lone = eval(single);
  CHECK(lone(0, 0) == first(2, 0));
  CHECK(lone(0, 1) == first(2, 1));
}

TEST_CASE("Block initialization") {
  Rng a(21), b(21);
  const StackSpec spec{LayerSpec::dense(8), LayerSpec::batchnorm(), LayerSpec::relu(),
                       LayerSpec::dense(4), LayerSpec::tanh()};
  Block x(spec, 3, a, "enc"), y(spec, 3, b, "enc");
  CHECK(x.params().same_values(y.params()));
  for (const auto& p : x.params()) {
    if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
      for (double v : p.value.values()) CHECK(v == 0.0);
    }
    if (p.name.ends_with(".gamma")) {
      for (double v : p.value.values()) CHECK(v == 1.0);
    }
  }
  CHECK(x.output_width() == 4);

  Rng r(3);
  Block he({LayerSpec::dense(1000), LayerSpec::relu()}, 100, r, "he");
  const Matrix& w = he.params()[0].value;
  double ss = 0.0, mean = 0.0;
  for (double v : w.values()) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w.values()) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(w.size() - 1));
  CHECK(std::abs(sd - std::sqrt(2.0 / 100.0)) <= 0.1 * std::sqrt(2.0 / 100.0));

  Block xavier({LayerSpec::dense(1000), LayerSpec::tanh()}, 100, r, "xv");
  ss = 0.0;
  for (double v : xavier.params()[0].value.values()) ss += v * v;
  CHECK(std::abs(std::sqrt(ss / 1e5) - 0.1) <= 0.01);
}

TEST_CASE("every parameter gradient through a layer stack passes fd_check") {
  Rng rng(13);
  Block block({LayerSpec::dense(5), LayerSpec::batchnorm(), LayerSpec::tanh(), LayerSpec::dense(3),
               LayerSpec::relu(), LayerSpec::dense(2)},
              4, rng, "b");
  Graph g;
  auto bound = block.bind(g);
  NodeId x = g.leaf(rng_normal(rng, 6, 4, 0, 1));
  NodeId out = block.forward(g, bound, x, Mode::Train, false);
  NodeId root = g.sum_all(g.hadamard(out, g.constant(rng_normal(rng, 6, 2, 0, 1))));
  for (NodeId p : bound) CHECK(fd_check(g, root, p) < 1e-4);
}

TEST_CASE("sgd_step") {
  auto scalar_set = [](double v) {
    ParamSet p;
    p.add("w", Matrix::scalar(v));
    return p;
  };
  {
    ParamSet p = scalar_set(0.3);
    const std::vector<Matrix> g{Matrix::scalar(0.0)};
    sgd_step(p, g, 0.1, 0.9, 0.0);
    CHECK(p[0].value.item() == 0.3);
  }
  {
    ParamSet p = scalar_set(1.0);
    const std::vector<Matrix> g{Matrix::scalar(0.5)};
    sgd_step(p, g, 0.1, 0.0, 0.0);
    CHECK(p[0].value.item() == doctest::Approx(0.95).epsilon(1e-15));
  }
  {
    ParamSet p = scalar_set(1.0);
    for (int i = 0; i < 100; ++i) {
      const std::vector<Matrix> g{Matrix::scalar(2.0 * p[0].value.item())};
      sgd_step(p, g, 0.1, 0.0, 0.0);
      CHECK(p.all_finite());
    }
    CHECK(std::abs(p[0].value.item()) < 1e-3);
  }
  {
    ParamSet p = scalar_set(1.0);
    const std::vector<Matrix> wrong{Matrix(2, 2)};
    CHECK_THROWS((void)sgd_step(p, wrong, 0.1, 0.9, 0.0));
    const std::vector<Matrix> g{Matrix::scalar(1.0)};
    CHECK_THROWS_AS(sgd_step(p, g, 0.0, 0.9, 0.0), DomainError);
    CHECK_THROWS_AS(sgd_step(p, g, 0.1, 1.0, 0.0), DomainError);
  }
}

TEST_CASE("ParamSet rejects duplicate names") {
  ParamSet p;
  p.add("a", Matrix(1, 1));
  CHECK_THROWS_AS(p.add("a", Matrix(1, 1)), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip losslessly") {
  Rng rng(55);
  Block block({LayerSpec::dense(7), LayerSpec::batchnorm(), LayerSpec::tanh()}, 3, rng, "m");
  for (auto& p : block.params()) p.value = rng_normal(rng, p.value.rows(), p.value.cols(), 0, 1);

  const auto path = std::filesystem::temp_directory_path() / "deinforeg_ckpt_test.json";
  save_params(block.params(), path);
  Rng other(1);
  Block fresh({LayerSpec::dense(7), LayerSpec::batchnorm(), LayerSpec::tanh()}, 3, other, "m");
  CHECK_FALSE(fresh.params().same_values(block.params()));
  load_params(fresh.params(), path);
  CHECK(fresh.params().same_values(block.params()));
  std::filesystem::remove(path);

  ParamSet mismatched;
  mismatched.add("m.0.weight", Matrix(2, 2));
  CHECK_THROWS(params_from_json(mismatched, params_to_json(block.params())));
}
