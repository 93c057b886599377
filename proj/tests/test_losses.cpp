#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "increcap/losses.hpp"

using namespace icap;
using namespace icap::losses;

namespace {

// ---- independent oracles (plain loops, extended precision) -----------------

long double oracle_ce_ls(const std::vector<long double>& logits, int target,
                         long double eps) {
  const std::size_t k = logits.size();
  long double mx = logits[0];
  for (long double v : logits) mx = std::max(mx, v);
  long double s = 0.0L;
  for (long double v : logits) s += std::exp(v - mx);
  const long double lse = mx + std::log(s);
  long double loss = 0.0L;
  for (std::size_t j = 0; j < k; ++j) {
    const long double t = (static_cast<int>(j) == target ? 1.0L - eps + eps / k : eps / k);
    loss -= t * (logits[j] - lse);
  }
  return loss;
}

long double oracle_supcon(const std::vector<std::vector<long double>>& z,
                          const std::vector<int>& y, long double tau) {
  const int n = static_cast<int>(z.size());
  long double total = 0.0L;
  for (int i = 0; i < n; ++i) {
    int pos = 0;
    for (int j = 0; j < n; ++j)
      if (j != i && y[j] == y[i]) ++pos;
    if (pos == 0) continue;
    long double denom = 0.0L;
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      long double d = 0.0L;
      for (std::size_t c = 0; c < z[i].size(); ++c) d += z[i][c] * z[k][c];
      denom += std::exp(d / tau);
    }
    long double inner = 0.0L;
    for (int j = 0; j < n; ++j) {
      if (j == i || y[j] != y[i]) continue;
      long double d = 0.0L;
      for (std::size_t c = 0; c < z[i].size(); ++c) d += z[i][c] * z[j][c];
      inner += std::log(std::exp(d / tau) / denom);
    }
    total += -inner / pos;
  }
  return total;
}

long double oracle_distill(const std::vector<long double>& teacher,
                           const std::vector<long double>& student, long double d) {
  const std::size_t k = teacher.size();
  auto softmax = [k](const std::vector<long double>& v, long double div) {
    std::vector<long double> out(k);
    long double mx = v[0] / div;
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, v[j] / div);
    long double s = 0.0L;
    for (std::size_t j = 0; j < k; ++j) {
      out[j] = std::exp(v[j] / div - mx);
      s += out[j];
    }
    for (auto& o : out) o /= s;
    return out;
  };
  auto pt = softmax(teacher, d);
  auto ps = softmax(student, d);
  long double loss = 0.0L;
  for (std::size_t j = 0; j < k; ++j) loss -= pt[j] * std::log(ps[j]);
  return loss;
}

// Alignment of each student row to the same-index teacher row over the
// teacher rows of that view, summed over rows, averaged over views.
long double oracle_feature_distill(const std::vector<std::vector<long double>>& s1,
                                   const std::vector<std::vector<long double>>& s2,
                                   const std::vector<std::vector<long double>>& t1,
                                   const std::vector<std::vector<long double>>& t2,
                                   long double tau) {
  auto align = [tau](const std::vector<std::vector<long double>>& t,
                     const std::vector<std::vector<long double>>& s) {
    const int n = static_cast<int>(t.size());
    long double total = 0.0L;
    for (int i = 0; i < n; ++i) {
      long double denom = 0.0L, num = 0.0L;
      for (int j = 0; j < n; ++j) {
        long double d = 0.0L;
        for (std::size_t c = 0; c < s[i].size(); ++c) d += s[i][c] * t[j][c];
        denom += std::exp(d / tau);
        if (j == i) num = std::exp(d / tau);
      }
      total += -std::log(num / denom);
    }
    return total;
  };
  return (align(t1, s1) + align(t2, s2)) / 2.0L;
}

Tensor unit_rows(std::mt19937_64& rng, int n, int d) {
  Tensor z = Tensor::randn({n, d}, rng, 1.0, true);
  Tensor u = l2_normalize_rows(z);
  return u.detach();  // plain leaf with unit rows
}

Tensor as_param(const Tensor& t) {
  auto copy = Tensor::from_data(t.shape(), t.data(), true);
  return copy;
}

}  // namespace

TEST_CASE("label_smooth basic values") {
  auto t = label_smooth(0, 2, 0.0);
  CHECK(t.probs == std::vector<double>{1.0, 0.0});
  t = label_smooth(0, 2, 0.1);
  CHECK(t.probs[0] == doctest::Approx(0.95));
  CHECK(t.probs[1] == doctest::Approx(0.05));
  t = label_smooth(3, 10, 0.1);
  CHECK(t.probs[3] == doctest::Approx(0.91));
  for (int j = 0; j < 10; ++j)
    if (j != 3) CHECK(t.probs[j] == doctest::Approx(0.01));

  CHECK_THROWS(label_smooth(2, 2, 0.1));
  CHECK_THROWS(label_smooth(0, 2, 1.0));
  CHECK_THROWS(label_smooth(0, 2, -0.1));
  CHECK_THROWS(label_smooth(0, 1, 0.1));
}

TEST_CASE("label_smooth sums to one on a randomized sweep") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> kd(2, 40);
  std::uniform_real_distribution<double> ed(0.0, 0.999);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = kd(rng);
    const double eps = ed(rng);
    std::uniform_int_distribution<int> td(0, k - 1);
    auto t = label_smooth(td(rng), k, eps);
    double s = 0.0;
    for (double p : t.probs) {
      CHECK(p >= eps / k - 1e-12);
      s += p;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("ce_with_ls values and identity with plain CE") {
  // near one-hot prediction at the target -> loss ~ 0
  Tensor sharp = Tensor::from_data({2}, {100.0, 0.0});
  CHECK(ce_with_ls(sharp, 0, 0.0).item() == doctest::Approx(0.0).epsilon(1e-9));

  // uniform over K=4 -> log 4 for any target and eps
  Tensor uniform = Tensor::from_data({4}, {0.3, 0.3, 0.3, 0.3});
  CHECK(ce_with_ls(uniform, 2, 0.0).item() == doctest::Approx(std::log(4.0)));
  CHECK(ce_with_ls(uniform, 1, 0.37).item() == doctest::Approx(std::log(4.0)));

  // DERIVED oracle instance
  Tensor lg = Tensor::from_data({2}, {2.0, 0.0});
  const double expected = static_cast<double>(oracle_ce_ls({2.0L, 0.0L}, 0, 0.1L));
  CHECK(ce_with_ls(lg, 0, 0.1).item() == doctest::Approx(expected).epsilon(1e-12));

  Tensor bad = Tensor::from_data({2}, {std::nan(""), 0.0});
  CHECK_THROWS(ce_with_ls(bad, 0, 0.0));
}

TEST_CASE("ce_with_ls matches oracle on random instances and eps=0 equals CE") {
  std::mt19937_64 rng(22);
  std::normal_distribution<double> nd(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> kd(2, 12);
    const int k = kd(rng);
    std::vector<double> logits(k);
    std::vector<long double> logits_l(k);
    for (int j = 0; j < k; ++j) {
      logits[j] = nd(rng);
      logits_l[j] = logits[j];
    }
    std::uniform_int_distribution<int> td(0, k - 1);
    const int target = td(rng);
    std::uniform_real_distribution<double> ed(0.0, 0.5);
    const double eps = ed(rng);
    Tensor t = Tensor::from_data({k}, logits);
    CHECK(ce_with_ls(t, target, eps).item() ==
          doctest::Approx(static_cast<double>(oracle_ce_ls(logits_l, target, eps)))
              .epsilon(1e-10));
    // eps = 0 equals plain CE
    double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double v : logits) s += std::exp(v - mx);
    const double plain_ce = -(logits[target] - mx - std::log(s));
    CHECK(ce_with_ls(t, target, 0.0).item() == doctest::Approx(plain_ce).epsilon(1e-9));
  }
}

TEST_CASE("ce_with_ls gradient is zero at the smoothed target distribution") {
  // softmax(logits) == T_LS  =>  gradient w.r.t. logits vanishes
  auto t = label_smooth(1, 3, 0.2);
  std::vector<double> logits(3);
  for (int j = 0; j < 3; ++j) logits[j] = std::log(t.probs[j]);
  Tensor x = Tensor::from_data({3}, logits, true);
  backward(ce_with_ls(x, 1, 0.2));
  for (double g : x.grad()) CHECK(std::abs(g) < 1e-10);
}

TEST_CASE("supcon_loss trivial and derived cases") {
  // two rows, same label -> single softmax fraction is 1 -> loss 0
  Tensor two = Tensor::from_data({2, 3}, {1, 0, 0, 0, 1, 0});
  CHECK(supcon_loss({two, {5, 5}, 1.0}).item() == doctest::Approx(0.0).epsilon(1e-12));

  // 4 mutually orthogonal unit rows, labels [a,a,b,b], tau = 1
  Tensor four = Tensor::from_data({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  std::vector<std::vector<long double>> zl = {
      {1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  const double expected = static_cast<double>(oracle_supcon(zl, {0, 0, 1, 1}, 1.0L));
  CHECK(supcon_loss({four, {0, 0, 1, 1}, 1.0}).item() ==
        doctest::Approx(expected).epsilon(1e-10));
  CHECK(expected > 0.0);

  // rejection paths
  CHECK_THROWS(supcon_loss({Tensor::from_data({2, 2}, {2, 0, 0, 1}), {0, 0}, 1.0}));
  CHECK_THROWS(supcon_loss({two, {5, 5}, 0.0}));
  CHECK_THROWS(supcon_loss({two, {5}, 1.0}));
}

TEST_CASE("supcon_loss invariances: rotation, permutation, nonnegativity") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 6, d = 4;
    Tensor z = unit_rows(rng, n, d);
    std::vector<int> labels = {0, 0, 1, 1, 2, 2};
    const double base = supcon_loss({z, labels, 0.5}).item();
    CHECK(base >= -1e-12);

    // random orthogonal matrix via Gram-Schmidt
    Tensor q = Tensor::randn({d, d}, rng, 1.0);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < i; ++j) {
        double dp = 0.0;
        for (int c = 0; c < d; ++c) dp += q.data()[i * d + c] * q.data()[j * d + c];
        for (int c = 0; c < d; ++c) q.data()[i * d + c] -= dp * q.data()[j * d + c];
      }
      double nr = 0.0;
      for (int c = 0; c < d; ++c) nr += q.data()[i * d + c] * q.data()[i * d + c];
      nr = std::sqrt(nr);
      for (int c = 0; c < d; ++c) q.data()[i * d + c] /= nr;
    }
    Tensor rotated = matmul_nt(z, q).detach();
    CHECK(supcon_loss({rotated, labels, 0.5}).item() == doctest::Approx(base).epsilon(1e-6));

    // permutation of batch rows
    std::vector<int> perm = {3, 1, 5, 0, 2, 4};
    std::vector<double> pz(z.size());
    std::vector<int> pl(n);
    for (int i = 0; i < n; ++i) {
      pl[i] = labels[perm[i]];
      for (int c = 0; c < d; ++c) pz[i * d + c] = z.data()[perm[i] * d + c];
    }
    CHECK(supcon_loss({Tensor::from_data({n, d}, pz), pl, 0.5}).item() ==
          doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("supcon_loss excludes anchors without positives") {
  std::mt19937_64 rng(24);
  Tensor z = unit_rows(rng, 5, 4);
  // label 9 appears once: that anchor must contribute nothing
  std::vector<int> labels = {0, 0, 1, 1, 9};
  const double with_lone = supcon_loss({z, labels, 0.3}).item();
  std::vector<std::vector<long double>> zl(5, std::vector<long double>(4));
  for (int i = 0; i < 5; ++i)
    for (int c = 0; c < 4; ++c) zl[i][c] = z.data()[i * 4 + c];
  CHECK(with_lone == doctest::Approx(static_cast<double>(oracle_supcon(zl, labels, 0.3L)))
                         .epsilon(1e-10));
}

TEST_CASE("supcon_loss matches oracle on random batches") {
  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> nd2(2, 5);
    const int half = nd2(rng), n = 2 * half, d = 5;
    Tensor z = unit_rows(rng, n, d);
    std::vector<int> labels(n);
    std::uniform_int_distribution<int> ld(0, 2);
    for (auto& l : labels) l = ld(rng);
    std::vector<std::vector<long double>> zl(n, std::vector<long double>(d));
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) zl[i][c] = z.data()[i * d + c];
    const double tau = 0.1 + 0.5 * (trial % 3);
    CHECK(supcon_loss({z, labels, tau}).item() ==
          doctest::Approx(static_cast<double>(oracle_supcon(zl, labels, tau)))
              .epsilon(1e-9));
  }
}

TEST_CASE("logit_distill_loss values and zero gradient at teacher match") {
  // student = teacher: loss is the softened-teacher entropy, gradient ~ 0
  Tensor t = Tensor::from_data({3}, {1.0, -0.5, 0.2});
  Tensor s = Tensor::from_data({3}, {1.0, -0.5, 0.2}, true);
  DistillPair pair{s, t, 3.0};
  Tensor loss = logit_distill_loss(pair);
  const double entropy =
      static_cast<double>(oracle_distill({1.0L, -0.5L, 0.2L}, {1.0L, -0.5L, 0.2L}, 3.0L));
  CHECK(loss.item() == doctest::Approx(entropy).epsilon(1e-12));
  backward(loss);
  for (double g : s.grad()) CHECK(std::abs(g) < 1e-8);

  // DERIVED: sharp teacher vs uniform student
  Tensor t2 = Tensor::from_data({2}, {10.0, 0.0});
  Tensor s2 = Tensor::from_data({2}, {0.0, 0.0}, true);
  CHECK(logit_distill_loss({s2, t2, 3.0}).item() ==
        doctest::Approx(static_cast<double>(oracle_distill({10.0L, 0.0L}, {0.0L, 0.0L}, 3.0L)))
            .epsilon(1e-12));

  // uniform/uniform K=2 -> log 2
  Tensor z2 = Tensor::from_data({2}, {0.0, 0.0});
  CHECK(logit_distill_loss({as_param(z2), z2, 3.0}).item() == doctest::Approx(std::log(2.0)));

  CHECK_THROWS(logit_distill_loss({Tensor::from_data({3}, {0, 0, 0}), z2, 3.0}));
  CHECK_THROWS(logit_distill_loss({as_param(z2), z2, 0.0}));
}

TEST_CASE("feature_distill_loss symmetry and derived value") {
  std::mt19937_64 rng(26);
  const int n = 2, d = 4;
  Tensor s1 = Tensor::from_data({n, d}, {1, 0, 0, 0, 0, 1, 0, 0});
  Tensor s2 = Tensor::from_data({n, d}, {0, 0, 1, 0, 0, 0, 0, 1});
  Tensor t1 = Tensor::from_data({n, d}, {0, 1, 0, 0, 1, 0, 0, 0});
  Tensor t2 = Tensor::from_data({n, d}, {0, 0, 0, 1, 0, 0, 1, 0});

  const double forward_val = feature_distill_loss(as_param(s1), as_param(s2), t1, t2, 1.0).item();
  const double swapped = feature_distill_loss(as_param(s2), as_param(s1), t2, t1, 1.0).item();
  CHECK(forward_val == doctest::Approx(swapped).epsilon(1e-12));

  std::vector<std::vector<long double>> s1l = {{1, 0, 0, 0}, {0, 1, 0, 0}};
  std::vector<std::vector<long double>> s2l = {{0, 0, 1, 0}, {0, 0, 0, 1}};
  std::vector<std::vector<long double>> t1l = {{0, 1, 0, 0}, {1, 0, 0, 0}};
  std::vector<std::vector<long double>> t2l = {{0, 0, 0, 1}, {0, 0, 1, 0}};
  CHECK(forward_val ==
        doctest::Approx(static_cast<double>(oracle_feature_distill(s1l, s2l, t1l, t2l, 1.0L)))
            .epsilon(1e-10));

  // N=1, student = teacher: one positive, no negatives -> log 1 = 0
  Tensor one = Tensor::from_data({1, 2}, {1, 0});
  CHECK(feature_distill_loss(as_param(one), as_param(one), one, one, 0.5).item() ==
        doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS(feature_distill_loss(s1, s2, t1, Tensor::from_data({1, 4}, {1, 0, 0, 0}), 1.0));
}

TEST_CASE("feature_distill_loss rotation invariance") {
  std::mt19937_64 rng(27);
  const int n = 3, d = 4;
  Tensor s1 = unit_rows(rng, n, d);
  Tensor s2 = unit_rows(rng, n, d);
  Tensor t1 = unit_rows(rng, n, d);
  Tensor t2 = unit_rows(rng, n, d);
  const double base = feature_distill_loss(as_param(s1), as_param(s2), t1, t2, 0.7).item();

  // reflection through negation is orthogonal
  auto negate = [](const Tensor& t) {
    std::vector<double> v = t.data();
    for (auto& x : v) x = -x;
    return Tensor::from_data(t.shape(), v);
  };
  const double rotated = feature_distill_loss(as_param(negate(s1)), as_param(negate(s2)),
                                              negate(t1), negate(t2), 0.7)
                             .item();
  CHECK(rotated == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("ci_total_loss blending") {
  CHECK(ci_total_loss(2.0, 4.0, 0.0) == doctest::Approx(2.0));
  CHECK(ci_total_loss(2.0, 4.0, 1.0) == doctest::Approx(4.0));
  CHECK(ci_total_loss(2.0, 4.0, 0.5) == doctest::Approx(3.0));
  CHECK_THROWS(ci_total_loss(2.0, 4.0, 1.5));
  CHECK_THROWS(ci_total_loss(std::nan(""), 4.0, 0.5));
}

TEST_CASE("loss gradients vs central finite differences") {
  std::mt19937_64 rng(28);
  for (int trial = 0; trial < 5; ++trial) {
    const int k = 6;
    Tensor logits = Tensor::randn({k}, rng, 1.5, true);
    std::uniform_int_distribution<int> td(0, k - 1);
    const int target = td(rng);
    CHECK(gradcheck::max_rel_error([&]() { return ce_with_ls(logits, target, 0.1); },
                                   {logits}) < 1e-6);

    Tensor teacher = Tensor::randn({k}, rng, 1.0);
    Tensor student = Tensor::randn({k}, rng, 1.0, true);
    CHECK(gradcheck::max_rel_error(
              [&]() { return logit_distill_loss({student, teacher, 3.0}); }, {student}) < 1e-6);

    // supcon: gradients checked on the pre-normalization embeddings
    Tensor raw = Tensor::randn({6, 4}, rng, 1.0, true);
    std::vector<int> labels = {0, 1, 2, 0, 1, 2};
    CHECK(gradcheck::max_rel_error(
              [&]() { return supcon_loss({l2_normalize_rows(raw), labels, 0.2}); },
              {raw}) < 1e-5);

    Tensor rs1 = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor rs2 = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor t1 = unit_rows(rng, 3, 4);
    Tensor t2 = unit_rows(rng, 3, 4);
    CHECK(gradcheck::max_rel_error(
              [&]() {
                return feature_distill_loss(l2_normalize_rows(rs1), l2_normalize_rows(rs2),
                                            t1, t2, 0.5);
              },
              {rs1, rs2}) < 1e-5);
  }
}
