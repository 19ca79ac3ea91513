#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "deinforeg/data.hpp"
#include "deinforeg/network.hpp"

using namespace deinforeg;

namespace {

StackRecipe small_recipe(std::size_t depth, TrainingMode mode) {
  StackRecipe r;
  r.depth = depth;
  r.input_width = 3;
  r.width = 6;
  r.classes = 3;
  r.mode = mode;
  return r;
}

Batch random_batch(Rng& rng, std::size_t n, std::size_t d, std::size_t k) {
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % k;
  return {rng_normal(rng, n, d, 0, 1), one_hot(labels, k)};
}

bool all_zero(const Matrix& m) {
  return std::all_of(m.values().begin(), m.values().end(), [](double v) { return v == 0.0; });
}

bool any_nonzero(const Matrix& m) { return !all_zero(m); }

}  // namespace

TEST_CASE("build: minimal network, modes share initial encoders, boundary errors") {
  Rng rng(1);
  Network one(make_network_spec(small_recipe(1, TrainingMode::DeInfoReg)), rng);
  CHECK(one.depth() == 1);
  CHECK(one.module(0).encoder().params().size() == 2);
  CHECK(one.module(0).projector().is_identity());
  CHECK(one.module(0).classifier().output_width() == 3);

  Rng a(9), b(9);
  Network dein(make_network_spec(small_recipe(4, TrainingMode::DeInfoReg)), a);
  Network bp(make_network_spec(small_recipe(4, TrainingMode::Bp)), b);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(dein.module(l).encoder().params().same_values(bp.module(l).encoder().params()));
  }
  CHECK(dein.same_params(bp));

  NetworkSpec bad = make_network_spec(small_recipe(3, TrainingMode::DeInfoReg));
  bad.modules[1].classifier.back() = LayerSpec::dense(5);
  try {
    bad.validate();
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("module 2") != std::string::npos);
  }
}

TEST_CASE("stop-gradient: downstream losses give exact zeros upstream") {
  Rng rng(3);
  StackRecipe r = small_recipe(4, TrainingMode::DeInfoReg);
  r.projector = ProjectorKind::Linear;
  Network net(make_network_spec(r), rng);
  const Batch b = random_batch(rng, 12, 3, 3);

  Graph g;
  NodeId h = g.constant(b.x);
  std::vector<Module::Nodes> nodes;
  for (std::size_t l = 0; l < 4; ++l) {
    nodes.push_back(net.module(l).append_train_graph(g, l == 0 ? h : g.detach(h), b.y, false));
    h = nodes.back().hidden;
  }
  for (std::size_t l = 0; l < 4; ++l) {
    const GradientMap total = g.backward(nodes[l].total);
    for (std::size_t m = 0; m < l; ++m) {
      for (auto id : nodes[m].encoder_params) CHECK(all_zero(total[id]));
      for (auto id : nodes[m].projector_params) CHECK(all_zero(total[id]));
      for (auto id : nodes[m].classifier_params) CHECK(all_zero(total[id]));
    }
    for (auto id : nodes[l].encoder_params) CHECK(any_nonzero(total[id]));

    const GradientMap ce = g.backward(nodes[l].cross_entropy);
    for (auto id : nodes[l].encoder_params) CHECK(all_zero(ce[id]));
    for (auto id : nodes[l].projector_params) CHECK(any_nonzero(ce[id]));
    for (auto id : nodes[l].classifier_params) CHECK(any_nonzero(ce[id]));
  }
}

TEST_CASE("alpha = 0: projector and encoder adjoints come from the local loss alone") {
  for (auto kind : {ProjectorKind::Identity, ProjectorKind::Linear}) {
    Rng rng(5);
    StackRecipe r = small_recipe(1, TrainingMode::DeInfoReg);
    r.projector = kind;
    r.loss.alpha = 0.0;
    Network net(make_network_spec(r), rng);
    const Batch b = random_batch(rng, 10, 3, 3);
    Graph g;
    auto n = net.module(0).append_train_graph(g, g.constant(b.x), b.y, false);
    const GradientMap with_total = g.backward(n.total);
    const GradientMap local_only = g.backward(n.local.total);
    for (auto id : n.projector_params) CHECK(with_total[id] == local_only[id]);
    for (auto id : n.encoder_params) CHECK(with_total[id] == local_only[id]);
  }
}

TEST_CASE("single module: decoupled classifier update is alpha times the bp update") {
  auto classifier_delta = [](TrainingMode mode, double alpha) {
    Rng rng(8);
    StackRecipe r = small_recipe(1, mode);
    r.loss.alpha = alpha;
    r.optimizer.kind = OptimizerKind::Sgd;
    r.optimizer.momentum = 0.0;
    r.optimizer.lr = 0.1;
    Network net(make_network_spec(r), rng);
    const Batch b = random_batch(rng, 9, 3, 3);
    const ParamSet before = net.module(0).classifier().params();
    (void)net.train_step(b.x, b.y);
    std::vector<Matrix> out;
    for (std::size_t i = 0; i < before.size(); ++i) {
      out.push_back(sub(net.module(0).classifier().params()[i].value, before[i].value));
    }
    return out;
  };
  const auto bp = classifier_delta(TrainingMode::Bp, 0.0);
  const auto dein = classifier_delta(TrainingMode::DeInfoReg, 4.0);
  REQUIRE(bp.size() == dein.size());
  for (std::size_t i = 0; i < bp.size(); ++i) {
    CHECK(max_abs_diff(scale(bp[i], 4.0), dein[i]) <= 1e-9);
  }
}

TEST_CASE("bp: one connected graph reaches every encoder") {
  Rng rng(4);
  Network net(make_network_spec(small_recipe(4, TrainingMode::Bp)), rng);
  const Batch b = random_batch(rng, 16, 3, 3);
  const auto grads = net.encoder_gradients(b.x, b.y);
  REQUIRE(grads.size() == 4);
  for (double v : grads) {
    CHECK(v > 0.0);
    CHECK(std::isfinite(v));
  }
  CHECK_THROWS_AS((void)net.train_step_deinforeg(b.x, b.y), DomainError);
}

TEST_CASE("bp converges on separable blobs; prediction on trained Gaussians") {
  Rng data_rng(10);
  Dataset ds = gen_blobs(3, 60, 2, 12.0, data_rng);
  (void)standardize(ds);
  const Batch all = split_matrix(ds, Split::Train);

  Rng rng(11);
  StackRecipe r = small_recipe(2, TrainingMode::Bp);
  r.input_width = 2;
  r.width = 16;
  r.optimizer.lr = 0.05;
  Network net(make_network_spec(r), rng);
  double last = 0.0;
  for (int step = 0; step < 50; ++step) last = net.train_step(all.x, all.y).losses.back().cross_entropy;
  CHECK(last < 0.1);

  const auto pred = net.predict(all.x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += all.y(i, pred[i]) == 1.0;
  CHECK(static_cast<double>(hits) / static_cast<double>(pred.size()) >= 0.95);
}

TEST_CASE("argmax ties go to the lowest index") {
  CHECK(argmax_rows(Matrix{{0.1, 0.9}}) == std::vector<std::size_t>{1});
  CHECK(argmax_rows(Matrix{{0.5, 0.5}}) == std::vector<std::size_t>{0});
  CHECK(argmax_rows(Matrix{{2, 7, 7}, {-1, -1, -3}}) == std::vector<std::size_t>{1, 0});
}

TEST_CASE("gradient profile shape and the decoupled report") {
  Rng rng(6);
  Network net(make_network_spec(small_recipe(2, TrainingMode::DeInfoReg)), rng);
  const std::vector<Batch> batches{random_batch(rng, 8, 3, 3), random_batch(rng, 8, 3, 3)};
  const auto profile = encoder_gradient_profile(net, batches);
  REQUIRE(profile.size() == 2);
  for (double v : profile) {
    CHECK(v >= 0.0);
    CHECK(std::isfinite(v));
  }
  const auto rep = net.train_step(batches[0].x, batches[0].y);
  REQUIRE(rep.losses.size() == 2);
  for (const auto& l : rep.losses) {
    CHECK(l.local_total == (l.variance + l.invariance) + l.covariance);
    CHECK(l.module_total == doctest::Approx(l.local_total + 0.001 * l.cross_entropy).epsilon(1e-14));
    CHECK(l.variance >= 0.0);
    CHECK(l.invariance >= 0.0);
    CHECK(l.covariance >= 0.0);
    CHECK(l.cross_entropy >= 0.0);
  }
}

TEST_CASE("deterministic replay and checkpoint round trip") {
  auto run = [] {
    Rng rng(21);
    StackRecipe r = small_recipe(3, TrainingMode::DeInfoReg);
    r.batchnorm = true;
    r.projector = ProjectorKind::Mlp;
    r.projector_width = 4;
    Network net(make_network_spec(r), rng);
    Rng batches(2);
    for (int s = 0; s < 5; ++s) {
      const Batch b = random_batch(batches, 10, 3, 3);
      (void)net.train_step(b.x, b.y);
    }
    return net;
  };
  const Network a = run();
  const Network b = run();
  CHECK(a.same_params(b));

  const auto path = std::filesystem::temp_directory_path() / "deinforeg_network_test.json";
  a.save(path);
  const Network c = Network::load(path);
  std::filesystem::remove(path);
  CHECK(c.same_params(a));
  Rng probe(3);
  const Matrix x = rng_normal(probe, 7, 3, 0, 1);
  CHECK(c.logits(x) == a.logits(x));
  CHECK(c.spec().modules.size() == 3);
}

TEST_CASE("batch validation") {
  Rng rng(2);
  Network net(make_network_spec(small_recipe(2, TrainingMode::DeInfoReg)), rng);
  CHECK_THROWS_AS((void)net.train_step(Matrix(4, 5), one_hot({0, 1, 2, 0}, 3)), ShapeError);
  CHECK_THROWS_AS((void)net.train_step(Matrix(4, 3), one_hot({0, 1, 2}, 3)), ShapeError);
}
