#include "autodiff.hpp"

#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "rng.hpp"
#include "support/finite_diff.hpp"

using namespace rnnctp;
using namespace rnnctp::ad;
using rnnctp::testsupport::max_grad_error;

namespace {

Tensor random_tensor(std::vector<size_t> shape, Rng& rng, double bound) {
  Tensor t{std::move(shape)};
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

TEST_CASE("gaussian kernel values") {
  Graph g;
  std::vector<double> x = {0.3, -1.2, 0.5};
  NodeId nx = g.input(x);
  CHECK(g.value1(g.kernel(nx, nx, 0.7)) == doctest::Approx(1.0).epsilon(1e-15));

  std::vector<double> e1 = {1, 0, 0}, e2 = {0, 1, 0};
  NodeId a = g.input(e1), b = g.input(e2);
  double k = g.value1(g.kernel(a, b, 0.1));
  CHECK(k == doctest::Approx(std::exp(-100.0)).epsilon(1e-9));
  CHECK(k < 1e-40);

  std::vector<double> u = {1, 0}, v = {0, 0};
  double k2 = g.value1(g.kernel(g.input(u), g.input(v), 1.0));
  CHECK(k2 == doctest::Approx(0.6065306597126334).epsilon(1e-12));
}

TEST_CASE("kernel symmetry and range") {
  Rng rng = make_rng(3);
  Graph g;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(8), y(8);
    for (auto& v : x) v = rng.uniform(-2, 2);
    for (auto& v : y) v = rng.uniform(-2, 2);
    NodeId nx = g.input(x), ny = g.input(y);
    double kxy = g.value1(g.kernel(nx, ny, 0.9));
    double kyx = g.value1(g.kernel(ny, nx, 0.9));
    CHECK(kxy == kyx);
    CHECK(kxy > 0.0);
    CHECK(kxy <= 1.0);
  }
}

TEST_CASE("kernel rejects shape mismatch and bad sigma") {
  Graph g;
  std::vector<double> x = {1, 2}, y = {1, 2, 3};
  CHECK_THROWS_AS(g.kernel(g.input(x), g.input(y), 1.0), DiffError);
  CHECK_THROWS_AS(g.kernel(g.input(x), g.input(x), 0.0), DiffError);
}

TEST_CASE("softmax examples") {
  Graph g;
  std::vector<double> z = {0, 0, 0};
  auto s = g.value(g.softmax(g.input(z)));
  for (double v : s) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  std::vector<double> l = {std::log(1.0), std::log(2.0), std::log(3.0)};
  auto s2 = g.value(g.softmax(g.input(l)));
  CHECK(s2[0] == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(s2[1] == doctest::Approx(2.0 / 6).epsilon(1e-12));
  CHECK(s2[2] == doctest::Approx(3.0 / 6).epsilon(1e-12));
}

TEST_CASE("softmax shift invariance and normalization at large magnitude") {
  Rng rng = make_rng(17);
  Graph g;
  for (int t = 0; t < 1000; ++t) {
    size_t n = 2 + rng.below(6);
    double mag = (t % 3 == 0) ? 1e3 : 5.0;
    std::vector<double> v(n), shifted(n);
    double c = rng.uniform(-mag, mag);
    for (size_t i = 0; i < n; ++i) {
      v[i] = rng.uniform(-mag, mag);
      shifted[i] = v[i] + c;
    }
    auto a = g.value(g.softmax(g.input(v)));
    auto b = g.value(g.softmax(g.input(shifted)));
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
      sum += a[i];
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
      CHECK(a[i] > 0.0);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("gru with all-zero parameters halves the state") {
  ParameterStore store;
  size_t h = 4;
  GruParams p;
  p.wz = store.add("wz", Tensor{{h, h}});
  p.uz = store.add("uz", Tensor{{h, h}});
  p.bz = store.add("bz", Tensor{{h}});
  p.wr = store.add("wr", Tensor{{h, h}});
  p.ur = store.add("ur", Tensor{{h, h}});
  p.br = store.add("br", Tensor{{h}});
  p.wh = store.add("wh", Tensor{{h, h}});
  p.uh = store.add("uh", Tensor{{h, h}});
  p.bh = store.add("bh", Tensor{{h}});

  Graph g(&store);
  std::vector<double> hv = {0.5, -1.0, 2.0, 0.25}, xv = {1, 2, 3, 4};
  NodeId out = gru_cell(g, g.input(hv), g.input(xv), p);
  auto vals = g.value(out);
  for (size_t i = 0; i < h; ++i) CHECK(vals[i] == doctest::Approx(hv[i] / 2).epsilon(1e-15));
}

TEST_CASE("gru output stays in the gate convexity box") {
  Rng rng = make_rng(5);
  ParameterStore store;
  size_t h = 6;
  GruParams p;
  p.wz = store.add("wz", random_tensor({h, h}, rng, 0.8));
  p.uz = store.add("uz", random_tensor({h, h}, rng, 0.8));
  p.bz = store.add("bz", random_tensor({h}, rng, 0.5));
  p.wr = store.add("wr", random_tensor({h, h}, rng, 0.8));
  p.ur = store.add("ur", random_tensor({h, h}, rng, 0.8));
  p.br = store.add("br", random_tensor({h}, rng, 0.5));
  p.wh = store.add("wh", random_tensor({h, h}, rng, 0.8));
  p.uh = store.add("uh", random_tensor({h, h}, rng, 0.8));
  p.bh = store.add("bh", random_tensor({h}, rng, 0.5));

  for (int t = 0; t < 20; ++t) {
    Graph g(&store);
    std::vector<double> hv(h), xv(h);
    for (auto& v : hv) v = rng.uniform(-1.5, 1.5);
    for (auto& v : xv) v = rng.uniform(-2, 2);
    auto vals = g.value(gru_cell(g, g.input(hv), g.input(xv), p));
    double hmax = 1.0;
    for (double v : hv) hmax = std::max(hmax, std::abs(v));
    for (size_t i = 0; i < h; ++i) {
      // h' is a convex mix of h and tanh(..) in (-1,1)
      CHECK(vals[i] > -std::max(std::abs(hv[i]), 1.0) - 1e-12);
      CHECK(vals[i] <= hmax + 1e-12);
    }
  }
}

TEST_CASE("gru gradient matches finite differences") {
  Rng rng = make_rng(23);
  ParameterStore store;
  size_t h = 3;
  GruParams p;
  p.wz = store.add("wz", random_tensor({h, h}, rng, 0.7));
  p.uz = store.add("uz", random_tensor({h, h}, rng, 0.7));
  p.bz = store.add("bz", random_tensor({h}, rng, 0.4));
  p.wr = store.add("wr", random_tensor({h, h}, rng, 0.7));
  p.ur = store.add("ur", random_tensor({h, h}, rng, 0.7));
  p.br = store.add("br", random_tensor({h}, rng, 0.4));
  p.wh = store.add("wh", random_tensor({h, h}, rng, 0.7));
  p.uh = store.add("uh", random_tensor({h, h}, rng, 0.7));
  p.bh = store.add("bh", random_tensor({h}, rng, 0.4));
  std::vector<double> hv = {0.4, -0.6, 0.9}, xv = {1.1, -0.3, 0.2};

  auto forward = [&]() {
    Graph g(&store);
    return g.value1(g.sum(gru_cell(g, g.input(hv), g.input(xv), p)));
  };
  Graph g(&store);
  NodeId loss = g.sum(gru_cell(g, g.input(hv), g.input(xv), p));
  auto grads = g.gradients(loss);
  CHECK(max_grad_error(store, forward, grads) < 1e-4);
}

TEST_CASE("gradient of squared norm is 2x") {
  ParameterStore store;
  uint32_t x = store.add("x", Tensor::vector({1.0, -2.0, 3.0}));
  Graph g(&store);
  NodeId nx = g.param(x);
  auto grads = g.gradients(g.dot(nx, nx));
  CHECK(grads.at("x").data[0] == doctest::Approx(2.0));
  CHECK(grads.at("x").data[1] == doctest::Approx(-4.0));
  CHECK(grads.at("x").data[2] == doctest::Approx(6.0));
}

TEST_CASE("max routes gradient to the extremal element, ties to lowest index") {
  ParameterStore store;
  uint32_t a = store.add("a", Tensor::scalar(2.0));
  uint32_t b = store.add("b", Tensor::scalar(1.0));
  {
    Graph g(&store);
    std::vector<NodeId> xs = {g.param(a), g.param(b)};
    auto grads = g.gradients(g.max_list(xs));
    CHECK(grads.at("a").data[0] == 1.0);
    CHECK(grads.at("b").data[0] == 0.0);
  }
  store.tensor(b).data[0] = 2.0;  // tie
  {
    Graph g(&store);
    std::vector<NodeId> xs = {g.param(a), g.param(b)};
    NodeId m = g.max_list(xs);
    CHECK(g.chosen(m) == 0);
    auto grads = g.gradients(m);
    CHECK(grads.at("a").data[0] == 1.0);
    CHECK(grads.at("b").data[0] == 0.0);
  }
  {
    Graph g(&store);
    std::vector<NodeId> xs = {g.param(a), g.param(b)};
    NodeId m = g.min_list(xs);
    CHECK(g.chosen(m) == 0);
  }
}

TEST_CASE("three-layer composite gradient matches finite differences") {
  Rng rng = make_rng(41);
  ParameterStore store;
  store.add("w1", random_tensor({4, 3}, rng, 0.8));
  store.add("b1", random_tensor({4}, rng, 0.3));
  store.add("w2", random_tensor({4, 4}, rng, 0.8));
  store.add("b2", random_tensor({4}, rng, 0.3));
  store.add("w3", random_tensor({4}, rng, 0.8));
  std::vector<double> xv = {0.7, -0.4, 1.3};

  auto build = [&](Graph& g) {
    NodeId x = g.input(xv);
    NodeId h1 = g.tanh(g.add(g.matvec(g.param("w1"), x), g.param("b1")));
    NodeId h2 = g.sigmoid(g.add(g.matvec(g.param("w2"), h1), g.param("b2")));
    return g.dot(g.param("w3"), h2);
  };
  auto forward = [&]() {
    Graph g(&store);
    return g.value1(build(g));
  };
  Graph g(&store);
  auto grads = g.gradients(build(g));
  CHECK(max_grad_error(store, forward, grads) < 1e-4);
}

TEST_CASE("primitive op gradients match finite differences") {
  Rng rng = make_rng(77);
  ParameterStore store;
  store.add("v1", random_tensor({5}, rng, 1.0));
  store.add("v2", random_tensor({5}, rng, 1.0));
  store.add("m", random_tensor({3, 5}, rng, 0.8));
  store.add("s", Tensor::scalar(0.37));

  auto build = [&](Graph& g) {
    NodeId v1 = g.param("v1");
    NodeId v2 = g.param("v2");
    NodeId m = g.param("m");
    NodeId a = g.add(v1, v2);
    NodeId s = g.sub(v1, v2);
    NodeId mu = g.mul(a, s);
    NodeId mv = g.matvec(m, mu);          // len 3
    NodeId vm = g.vecmat(mv, m);          // len 5
    NodeId cat = g.concat(mv, vm);        // len 8
    NodeId act = g.tanh(g.scale(cat, 0.5));
    NodeId sm = g.softmax(act);
    NodeId lg = g.log(g.clamp(sm, 1e-7, 1.0 - 1e-7));
    NodeId ker = g.kernel(v1, v2, 0.8);
    NodeId lsp = g.log_softmax_pick(act, 2);
    NodeId pk = g.pick(sm, 1);
    std::vector<NodeId> parts = {g.sum(lg), ker, lsp, pk, g.param("s")};
    NodeId total = g.sum_list(parts);
    std::vector<NodeId> mm = {total, g.scale(ker, 3.0)};
    return g.add(g.min_list(mm), g.max_list(mm));
  };
  auto forward = [&]() {
    Graph g(&store);
    return g.value1(build(g));
  };
  Graph g(&store);
  auto grads = g.gradients(build(g));
  CHECK(max_grad_error(store, forward, grads) < 1e-4);
}

TEST_CASE("chain ops match brute-force enumeration and pass finite differences") {
  Rng rng = make_rng(99);
  const size_t n_pred = 3, n_const = 5, k = 4;
  ParameterStore store;
  uint32_t er = store.add("E_R", random_tensor({n_pred, k}, rng, 0.9));
  uint32_t ec = store.add("E_C", random_tensor({n_const, k}, rng, 0.9));
  uint32_t qp = store.add("q", random_tensor({k}, rng, 0.9));

  std::vector<uint32_t> fp, fs, fo;
  for (int i = 0; i < 14; ++i) {
    fp.push_back(static_cast<uint32_t>(rng.below(n_pred)));
    fs.push_back(static_cast<uint32_t>(rng.below(n_const)));
    fo.push_back(static_cast<uint32_t>(rng.below(n_const)));
  }
  FactsRef facts{fp.data(), fs.data(), fo.data(), fp.size()};
  const double sigma = 0.8;

  auto kv = [&](const Tensor& t, uint32_t r, const Tensor& u, uint32_t rr) {
    return gaussian_kernel_value({t.row_ptr(r), k}, {u.row_ptr(rr), k}, sigma);
  };
  auto kq = [&](uint32_t r) {
    return gaussian_kernel_value({store.tensor(qp).data.data(), k},
                                 {store.tensor(er).row_ptr(r), k}, sigma);
  };

  SUBCASE("chain_max equals flat enumeration") {
    Graph g(&store);
    g.set_facts(facts, er, ec);
    std::vector<NodeId> priors = {g.input(0.9), g.input(0.6)};
    std::vector<uint32_t> bindings = {1, 3};
    ChainArgs args;
    args.priors = priors;
    args.bindings = bindings;
    args.pred = g.param(qp);
    args.other = 2;
    args.exclude = 4;
    args.sigma = sigma;
    std::vector<ChainGroupOut> out;
    NodeId node = g.chain_max(args, &out);
    REQUIRE(node != kNoNode);
    auto vals = g.value(node);
    const Tensor& tec = store.tensor(ec);
    double prior_vals[2] = {0.9, 0.6};
    for (size_t i = 0; i < 2; ++i) {
      double best = -1.0;
      for (size_t f = 0; f < fp.size(); ++f) {
        if (f == 4) continue;
        double v = std::min(std::min(prior_vals[i], kq(fp[f])),
                            std::min(kv(tec, bindings[i], tec, fs[f]), kv(tec, 2, tec, fo[f])));
        best = std::max(best, v);
      }
      CHECK(vals[i] == doctest::Approx(best).epsilon(1e-14));
    }
  }

  SUBCASE("chain_join equals flat enumeration with grouping") {
    Graph g(&store);
    g.set_facts(facts, er, ec);
    std::vector<NodeId> priors = {g.input(0.8), g.input(0.5)};
    std::vector<uint32_t> bindings = {0, 2};
    ChainArgs args;
    args.priors = priors;
    args.bindings = bindings;
    args.pred = g.param(qp);
    args.sigma = sigma;
    std::vector<ChainGroupOut> out;
    NodeId node = g.chain_join(args, &out);
    REQUIRE(node != kNoNode);
    auto vals = g.value(node);
    const Tensor& tec = store.tensor(ec);
    double prior_vals[2] = {0.8, 0.5};
    std::vector<double> expect(n_const, -1.0);
    for (size_t f = 0; f < fp.size(); ++f) {
      for (size_t i = 0; i < 2; ++i) {
        double v = std::min(std::min(prior_vals[i], kq(fp[f])), kv(tec, bindings[i], tec, fs[f]));
        expect[fo[f]] = std::max(expect[fo[f]], v);
      }
    }
    REQUIRE(out.size() == g.length(node));
    for (size_t gi = 0; gi < out.size(); ++gi) {
      CHECK(vals[gi] == doctest::Approx(expect[out[gi].binding]).epsilon(1e-14));
    }
  }

  SUBCASE("chain gradients match finite differences") {
    auto build = [&](Graph& g) {
      g.set_facts(facts, er, ec);
      std::vector<NodeId> priors = {g.input(0.9), g.input(0.55)};
      std::vector<uint32_t> bindings = {1, 4};
      ChainArgs args;
      args.priors = priors;
      args.bindings = bindings;
      args.pred = g.param(qp);
      args.sigma = sigma;
      std::vector<ChainGroupOut> out;
      NodeId join = g.chain_join(args, &out);
      std::vector<NodeId> joined;
      std::vector<uint32_t> jb;
      for (size_t i = 0; i < out.size(); ++i) {
        joined.push_back(g.pick(join, i));
        jb.push_back(out[i].binding);
      }
      ChainArgs fin;
      fin.priors = joined;
      fin.bindings = jb;
      fin.pred = g.param(qp);
      fin.other = 3;
      fin.sigma = sigma;
      std::vector<ChainGroupOut> out2;
      NodeId term = g.chain_max(fin, &out2);
      return g.sum(term);
    };
    auto forward = [&]() {
      Graph g(&store);
      return g.value1(build(g));
    };
    Graph g(&store);
    auto grads = g.gradients(build(g));
    CHECK(max_grad_error(store, forward, grads) < 1e-4);
  }
}

TEST_CASE("forward pass rejects non-finite values") {
  Graph g;
  std::vector<double> neg = {-1.0};
  CHECK_THROWS_AS(g.log(g.input(neg)), DiffError);
}

TEST_CASE("parameter snapshot round-trips") {
  Rng rng = make_rng(8);
  ParameterStore store;
  store.add("alpha", random_tensor({3, 2}, rng, 1.0), ParamGroup::Prover);
  store.add("beta", random_tensor({4}, rng, 1.0), ParamGroup::Selector);
  auto path = std::filesystem::temp_directory_path() / "rnnctp_snapshot_test.bin";
  store.save(path, R"({"k": 2, "note": "test"})");

  auto [loaded, extras] = ParameterStore::load(path);
  REQUIRE(loaded.count() == store.count());
  for (uint32_t i = 0; i < store.count(); ++i) {
    CHECK(loaded.name(i) == store.name(i));
    CHECK(loaded.group(i) == store.group(i));
    CHECK(loaded.tensor(i).shape == store.tensor(i).shape);
    CHECK(loaded.tensor(i).data == store.tensor(i).data);
  }
  CHECK(extras.find("\"k\"") != std::string::npos);
}

TEST_CASE("adam converges on a quadratic") {
  ParameterStore store;
  uint32_t w = store.add("w", Tensor::vector({5.0, -3.0}));
  Adam adam(0.05);
  for (int step = 0; step < 400; ++step) {
    store.zero_grads();
    Graph g(&store);
    NodeId nw = g.param(w);
    std::vector<double> target = {1.0, 2.0};
    NodeId diff = g.sub(nw, g.input(target));
    g.backward(g.dot(diff, diff));
    adam.step(store, ParamGroup::Prover);
  }
  CHECK(store.tensor(w).data[0] == doctest::Approx(1.0).epsilon(1e-2));
  CHECK(store.tensor(w).data[1] == doctest::Approx(2.0).epsilon(1e-2));
}
