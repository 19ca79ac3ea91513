#include <doctest.h>

#include <set>
#include <string>

#include "deinforeg/autodiff.hpp"
#include "deinforeg/data.hpp"
#include "deinforeg/gradcheck.hpp"
#include "deinforeg/losses.hpp"

using namespace deinforeg;

TEST_CASE("forward: leaves, relu and a nested expression") {
  Graph g;
  const Matrix m{{1, -2}, {0.5, 3}};
  CHECK(g.value(g.leaf(m)) == m);

  Graph r;
  CHECK(r.value(r.relu(r.leaf(Matrix{{-1, 2}}))) == Matrix{{0, 2}});

  Rng rng(4);
  const Matrix a = rng_normal(rng, 3, 3, 0, 1), b = rng_normal(rng, 3, 3, 0, 1),
               c = rng_normal(rng, 3, 3, 0, 1);
  Graph n;
  NodeId out = n.add(n.matmul(n.leaf(a), n.leaf(b)), n.leaf(c));
  CHECK(n.value(out) == add(matmul(a, b), c));
}

TEST_CASE("forward rebinding re-evaluates every node") {
  Graph g;
  NodeId x = g.leaf(Matrix{{1, 2}}, true);
  NodeId y = g.sum_all(g.square(x));
  CHECK(g.value(y).item() == 5.0);
  g.forward({{x, Matrix{{3, 4}}}});
  CHECK(g.value(y).item() == 25.0);
}

TEST_CASE("shape violations name the node and op kind") {
  Graph g;
  NodeId a = g.leaf(Matrix(2, 3));
  NodeId b = g.leaf(Matrix(2, 3));
  try {
    (void)g.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("node 2") != std::string::npos);
    CHECK(msg.find("matmul") != std::string::npos);
  }
}

TEST_CASE("backward: hand-derived adjoints") {
  Graph g;
  NodeId x = g.leaf(Matrix(2, 2, 0.7), true);
  CHECK(g.backward(g.sum_all(x))[x] == Matrix(2, 2, 1.0));

  Graph h;
  NodeId y = h.leaf(Matrix{{3}}, true);
  CHECK(h.backward(h.sum_all(h.hadamard(y, y)))[y] == Matrix{{6}});
}

TEST_CASE("backward needs a scalar root") {
  Graph g;
  NodeId x = g.leaf(Matrix(2, 2, 1.0), true);
  CHECK_THROWS_AS((void)g.backward(g.square(x)), DomainError);
}

TEST_CASE("unused and detached leaves get exact zeros; constants get no slot") {
  Graph g;
  NodeId used = g.leaf(Matrix{{1, 2}}, true);
  NodeId unused = g.leaf(Matrix{{5, 6, 7}}, true);
  NodeId cut = g.leaf(Matrix{{3, 4}}, true);
  NodeId data = g.constant(Matrix{{1, 1}});
  NodeId root = g.sum_all(g.add(g.hadamard(used, data), g.square(g.detach(cut))));
  const GradientMap grads = g.backward(root);
  CHECK(grads[unused] == Matrix(1, 3, 0.0));
  CHECK(grads[cut] == Matrix(1, 2, 0.0));
  CHECK(grads[used] == Matrix{{1, 1}});
  CHECK_FALSE(grads.contains(data));
}

TEST_CASE("backward is deterministic") {
  Rng rng(12);
  Graph g;
  NodeId x = g.leaf(rng_normal(rng, 6, 4, 0, 1), true);
  NodeId w = g.leaf(rng_normal(rng, 4, 3, 0, 1), true);
  NodeId root = g.sum_all(g.tanh(g.matmul(x, w)));
  CHECK(g.backward(root) == g.backward(root));
}

TEST_CASE("fd_check examples") {
  Rng rng(1);
  {
    Graph g;
    NodeId x = g.leaf(rng_normal(rng, 3, 4, 0, 1), true);
    CHECK(fd_check(g, g.sum_all(g.scale(x, 3.0)), x) <= 1e-10);
  }
  {
    Graph g;
    NodeId x = g.leaf(rng_normal(rng, 4, 3, 0, 1), true);
    NodeId root = g.sum_all(g.tanh(g.scale(g.tanh(g.tanh(x)), 1.3)));
    CHECK(fd_check(g, root, x) < 1e-4);
  }
  {
    Graph g;
    NodeId x = g.leaf(rng_normal(rng, 8, 5, 0, 1), true);
    std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2, 0, 1};
    NodeId root = local_loss(g, x, one_hot(labels, 3), LossConfig{}).total;
    CHECK(fd_check(g, root, x) < 1e-4);
  }
}

TEST_CASE("every op kind passes the finite-difference check on 20 seeds") {
  std::set<std::string> covered;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (const auto& r : gradcheck_suite(seed)) {
      INFO(r.name << " seed " << seed << " N=" << r.rows << " C=" << r.cols);
      CHECK(r.error < 1e-4);
      CHECK(r.rows >= 2);
      CHECK(r.rows <= 8);
      CHECK(r.cols >= 2);
      CHECK(r.cols <= 8);
      covered.insert(r.name);
    }
  }
  for (int k = 0; k <= static_cast<int>(OpKind::SelectOffDiagonal); ++k) {
    const std::string name(op_name(static_cast<OpKind>(k)));
    INFO(name);
    CHECK(covered.count(name) == 1);
  }
}
