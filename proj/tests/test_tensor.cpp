#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "seqattr/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace seqattr;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool rg = false) {
  return Tensor::uniform(std::move(shape), rng, 1.0, rg);
}

}  // namespace

TEST_CASE("rng is deterministic and seed-separated") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  CHECK(Rng(42).next() != c.next());
  CHECK(subseed(1, "x") == subseed(1, "x"));
  CHECK(subseed(1, "x") != subseed(1, "y"));
  CHECK(subseed(1, "x", 0) != subseed(1, "x", 1));
}

TEST_CASE("matmul identity, hand product, zero case") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

  Tensor a = Tensor::from({1, 2}, {1, 2});
  Tensor b = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0));

  Rng rng(7);
  Tensor z = Tensor::zeros({2, 3});
  Tensor any = random_tensor({3, 4}, rng);
  Tensor zr = matmul(z, any);
  CHECK(zr.shape() == std::vector<int>{2, 4});
  for (double v : zr.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       "matmul: inner dimensions disagree: (2x3) vs (4x5)",
                       ShapeError);
}

TEST_CASE("softmax closed forms and stabilisation") {
  Tensor u = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor t = softmax(Tensor::from({2}, {std::log(2.0), 0.0}), 0);
  CHECK(t.at(0) == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(t.at(1) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor big = softmax(Tensor::from({2}, {1000.0, 0.0}), 0);
  CHECK(std::isfinite(big.at(0)));
  CHECK(big.at(0) == doctest::Approx(1.0));
  CHECK(big.at(1) == doctest::Approx(0.0));

  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 0}), 1), ShapeError);
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 5), ShapeError);
}

TEST_CASE("softmax rows sum to one on random input") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 7}, rng);
    Tensor s = softmax(x, 1);
    for (int i = 0; i < 4; ++i) {
      double total = 0.0;
      for (int j = 0; j < 7; ++j) {
        CHECK(s.at(i, j) >= 0.0);
        total += s.at(i, j);
      }
      CHECK(std::fabs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("log_softmax rows logsumexp to zero") {
  Rng rng(5);
  Tensor x = random_tensor({3, 9}, rng);
  Tensor lp = log_softmax(x, 1);
  for (int i = 0; i < 3; ++i) {
    double total = 0.0;
    for (int j = 0; j < 9; ++j) total += std::exp(lp.at(i, j));
    CHECK(std::fabs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("layer_norm closed forms") {
  Tensor g1 = Tensor::from({3}, {1, 1, 1});
  Tensor b0 = Tensor::from({3}, {0, 0, 0});
  Tensor c = layer_norm(Tensor::from({3}, {5, 5, 5}), g1, b0);
  for (double v : c.data()) CHECK(v == doctest::Approx(0.0));

  Tensor g2 = Tensor::from({2}, {1, 1});
  Tensor z2 = Tensor::from({2}, {0, 0});
  Tensor pm = layer_norm(Tensor::from({2}, {1, -1}), g2, z2);
  CHECK(pm.at(0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(pm.at(1) == doctest::Approx(-1.0).epsilon(1e-5));

  Tensor g0 = Tensor::from({2}, {0, 0});
  Tensor bc = Tensor::from({2}, {7, 7});
  Tensor k = layer_norm(Tensor::from({2}, {3, -9}), g0, bc);
  CHECK(k.at(0) == 7.0);
  CHECK(k.at(1) == 7.0);

  CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 4}), g2, z2), ShapeError);
}

TEST_CASE("self_attention exactness cases") {
  // single token: only key is itself
  Tensor q = Tensor::from({1, 2}, {0.3, -0.7});
  Tensor v = Tensor::from({1, 2}, {5.0, 6.0});
  auto r = self_attention(q, q, v, MaskMatrix::all_admissible(1));
  CHECK(r.output.at(0, 0) == 5.0);
  CHECK(r.output.at(0, 1) == 6.0);

  // identical keys -> exact mean of values
  Tensor k2 = Tensor::from({2, 2}, {1, 2, 1, 2});
  Tensor q2 = Tensor::from({2, 2}, {0.5, 0.5, -1, 3});
  Tensor v2 = Tensor::from({2, 2}, {1, 3, 5, 9});
  auto r2 = self_attention(q2, k2, v2, MaskMatrix::all_admissible(2));
  CHECK(r2.output.at(0, 0) == 3.0);
  CHECK(r2.output.at(0, 1) == 6.0);

  // mask admitting exactly one key returns that value row exactly
  Rng rng(11);
  Tensor q3 = random_tensor({3, 4}, rng);
  Tensor k3 = random_tensor({3, 4}, rng);
  Tensor v3 = random_tensor({3, 4}, rng);
  MaskMatrix only;
  only.n = 3;
  only.admissible.assign(9, 0);
  only.set(0, 2, true);
  only.set(1, 1, true);
  only.set(2, 0, true);
  auto r3 = self_attention(q3, k3, v3, only);
  for (int j = 0; j < 4; ++j) {
    CHECK(r3.output.at(0, j) == v3.at(2, j));
    CHECK(r3.output.at(1, j) == v3.at(1, j));
    CHECK(r3.output.at(2, j) == v3.at(0, j));
  }

  // all-masked row is an error
  MaskMatrix bad = MaskMatrix::all_admissible(2);
  bad.set(1, 0, false);
  bad.set(1, 1, false);
  CHECK_THROWS_AS(self_attention(q2, k2, v2, bad), Error);
}

TEST_CASE("causal row is bit-identical under future perturbation") {
  Rng rng(19);
  Tensor k = random_tensor({3, 4}, rng);
  Tensor v = random_tensor({3, 4}, rng);
  Tensor q = random_tensor({3, 4}, rng);
  MaskMatrix causal;
  causal.n = 3;
  causal.admissible.assign(9, 0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j <= i; ++j) causal.set(i, j, true);

  auto base = self_attention(q, k, v, causal);
  // perturb keys/values of positions 1 and 2
  Tensor k2 = Tensor::from({3, 4}, k.data());
  Tensor v2 = Tensor::from({3, 4}, v.data());
  for (int j = 0; j < 4; ++j) {
    k2.mut(1, j) += 10.0;
    k2.mut(2, j) -= 3.0;
    v2.mut(1, j) *= -2.0;
    v2.mut(2, j) += 1.0;
  }
  auto pert = self_attention(q, k2, v2, causal);
  for (int j = 0; j < 4; ++j)
    CHECK(base.output.at(0, j) == pert.output.at(0, j));

  // masked attention weights are exact zeros
  CHECK(base.weights.at(0, 1) == 0.0);
  CHECK(base.weights.at(0, 2) == 0.0);
  CHECK(base.weights.at(1, 2) == 0.0);
}

TEST_CASE("backward basics") {
  Tensor p = Tensor::from({2}, {1, 2}, true);
  Tensor loss = sum(p);
  backward(loss);
  CHECK(p.grad()[0] == 1.0);
  CHECK(p.grad()[1] == 1.0);

  p.zero_grad();
  Tensor loss2 = sum(mul(p, p));
  backward(loss2);
  CHECK(p.grad()[0] == doctest::Approx(2.0));
  CHECK(p.grad()[1] == doctest::Approx(4.0));

  // repeated calls accumulate
  backward(loss2);
  CHECK(p.grad()[0] == doctest::Approx(4.0));

  CHECK_THROWS_AS(backward(mul(p, p)), ShapeError);
  Tensor untracked = Tensor::scalar(1.0);
  CHECK_THROWS_AS(backward(untracked), Error);
}

TEST_CASE("gradients match finite differences on a composite graph") {
  Rng rng(23);
  ParamStore params;
  Tensor w1 = params.add("w1", random_tensor({5, 4}, rng));
  Tensor b1 = params.add("b1", random_tensor({4}, rng));
  Tensor w2 = params.add("w2", random_tensor({4, 3}, rng));
  Tensor g = params.add("ln.g", Tensor::full({4}, 1.0));
  Tensor b = params.add("ln.b", Tensor::zeros({4}));
  Tensor x = random_tensor({2, 5}, rng);

  MaskMatrix causal;
  causal.n = 2;
  causal.admissible = {1, 0, 1, 1};

  auto build = [&]() {
    Tensor h = add_rowvec(matmul(x, w1), b1);
    h = gelu(h);
    h = layer_norm(h, g, b);
    auto attn = self_attention(h, h, h, causal);
    Tensor lp = log_softmax(matmul(attn.output, w2), 1);
    Tensor pooled = mean_rows(mul(lp, lp));
    return sum(concat_cols({slice_cols(pooled, 0, 2), slice_cols(pooled, 1, 2)}));
  };
  auto rep = seqattr::testing::gradient_check(
      params, [&]() { return build().item(); }, build);
  INFO("worst ", rep.worst_param, "[", rep.worst_index, "] analytic ",
       rep.analytic, " numeric ", rep.numeric);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.checked > 0);
}

TEST_CASE("gather/concat/slice/mean gradients") {
  Rng rng(29);
  ParamStore params;
  Tensor table = params.add("table", random_tensor({6, 3}, rng));
  std::vector<int> idx = {1, 4, 1, 0};

  auto build = [&]() {
    Tensor rows = gather_rows(table, idx);
    Tensor top = slice_rows(rows, 0, 2);
    Tensor bottom = slice_rows(rows, 2, 2);
    Tensor cat = concat_rows({top, bottom, mean_rows(rows)});
    return sum(mul(cat, cat));
  };
  auto rep = seqattr::testing::gradient_check(
      params, [&]() { return build().item(); }, build);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("adam closed-form first step and determinism") {
  AdamConfig cfg;
  cfg.learning_rate = 0.1;

  ParamStore params;
  Tensor p = params.add("p", Tensor::from({1}, {1.0}));
  p.grad()[0] = 1.0;
  AdamState st = AdamState::init(params);
  adam_step(params, st, cfg);
  CHECK(st.step == 1);
  CHECK(p.data()[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));

  // zero gradient leaves parameters unchanged
  ParamStore params2;
  Tensor p2 = params2.add("p", Tensor::from({2}, {3.0, -4.0}));
  p2.grad();  // allocate zeros
  AdamState st2 = AdamState::init(params2);
  adam_step(params2, st2, cfg);
  CHECK(p2.data()[0] == 3.0);
  CHECK(p2.data()[1] == -4.0);

  // identical state + gradients -> bit-identical updates
  auto run = [&cfg]() {
    ParamStore ps;
    Tensor q = ps.add("q", Tensor::from({2}, {0.5, -0.25}));
    q.grad() = {0.1, -0.2};
    AdamState s = AdamState::init(ps);
    adam_step(ps, s, cfg);
    adam_step(ps, s, cfg);
    return ps.tensor(0).data();
  };
  CHECK(run() == run());

  // NaN gradient names the parameter
  ParamStore params3;
  Tensor p3 = params3.add("w.broken", Tensor::from({1}, {1.0}));
  p3.grad()[0] = std::nan("");
  AdamState st3 = AdamState::init(params3);
  CHECK_THROWS_WITH_AS(adam_step(params3, st3, cfg),
                       "adam_step: non-finite gradient in parameter w.broken",
                       NumericError);
}

TEST_CASE("clip_grad_norm scales gradients to the target norm") {
  ParamStore params;
  Tensor p = params.add("p", Tensor::zeros({2}));
  p.grad() = {3.0, 4.0};
  double norm = clip_grad_norm(params, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(p.grad()[0] == doctest::Approx(0.6));
  CHECK(p.grad()[1] == doctest::Approx(0.8));
}
