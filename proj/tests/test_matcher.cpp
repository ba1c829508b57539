#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "gradient_suite.hpp"

using namespace prnet;
using ad::Tensor;
using prnet::test::detail::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig mc;
  mc.encoder.layer_widths = {8, 8};
  mc.encoder.knn_k = 4;
  mc.encoder.embed_dim = 8;
  mc.cocontext.heads = 2;
  mc.cocontext.ff_dim = 16;
  mc.value.widths = {8, 1};
  return mc;
}

/// Pearson chi-square statistic of `counts` against `probs`.
double chi_square(const std::vector<double>& counts, const std::vector<double>& probs) {
  double n = 0;
  for (double c : counts) n += c;
  double x2 = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = n * probs[i];
    x2 += (counts[i] - e) * (counts[i] - e) / e;
  }
  return x2;
}

// Upper 1% point of chi-square with 2 degrees of freedom: -2 ln(0.01).
const double kChi2Df2P01 = -2.0 * std::log(0.01);

std::vector<double> softmax(const std::vector<double>& z) {
  double mx = *std::max_element(z.begin(), z.end()), s = 0;
  std::vector<double> p;
  for (double v : z) s += std::exp(v - mx);
  for (double v : z) p.push_back(std::exp(v - mx) / s);
  return p;
}

}  // namespace

TEST_CASE("l2norm keypoints") {
  Rng rng(0);
  const Tensor phi({3, 1}, {3, 1, 2});
  const auto k = detect_keypoints(phi, {KeypointStrategy::Kind::kL2Norm, 2}, rng);
  CHECK(std::set<std::size_t>(k.begin(), k.end()) == std::set<std::size_t>{0, 2});
  Rng r(1);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor({30, 5}, r);
    const auto got = detect_keypoints(x, {KeypointStrategy::Kind::kL2Norm, 10}, rng);
    std::vector<std::pair<double, std::size_t>> norms;
    for (std::size_t i = 0; i < 30; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 5; ++c) s += x.at(i, c) * x.at(i, c);
      norms.push_back({-std::sqrt(s), i});
    }
    std::sort(norms.begin(), norms.end());
    for (std::size_t i = 0; i < 10; ++i) REQUIRE(got[i] == norms[i].second);
  }
  CHECK_THROWS_AS(detect_keypoints(phi, {KeypointStrategy::Kind::kL2Norm, 4}, rng), KTooLarge);
}

TEST_CASE("every strategy returns all rows when k = N") {
  Rng r(2);
  const Tensor x = random_tensor({7, 3}, r);
  for (auto kind : {KeypointStrategy::Kind::kL2Norm, KeypointStrategy::Kind::kRandom,
                    KeypointStrategy::Kind::kCentrality}) {
    const auto k = detect_keypoints(x, {kind, 7}, r);
    CHECK(std::set<std::size_t>(k.begin(), k.end()).size() == 7);
  }
  const auto rnd = detect_keypoints(random_tensor({40, 3}, r), {KeypointStrategy::Kind::kRandom, 20}, r);
  CHECK(std::set<std::size_t>(rnd.begin(), rnd.end()).size() == 20);
}

TEST_CASE("centrality picks the most central row first") {
  Rng rng(0);
  const Tensor x({3, 2}, {0, 0, 1, 1, 2, 2});
  const auto k = detect_keypoints(x, {KeypointStrategy::Kind::kCentrality, 3}, rng);
  CHECK(k.front() == 1);
}

TEST_CASE("gumbel noise") {
  CHECK(gumbel_from_uniform(0.5) == doctest::Approx(0.36651).epsilon(1e-5));
  CHECK(gumbel_from_uniform(0.5) == doctest::Approx(-std::log(std::log(2.0))));
  CHECK(std::isfinite(gumbel_from_uniform(1.0 - 1e-12)));
  CHECK(std::isfinite(gumbel_from_uniform(1.0)));
  CHECK(std::isfinite(gumbel_from_uniform(0.0)));
  Rng r(3);
  const Tensor g = sample_gumbel({1000, 1000}, r);
  CHECK_FALSE(g.requires_grad());
  double mean = 0;
  for (double v : g.values()) mean += v;
  mean /= static_cast<double>(g.numel());
  CHECK(std::abs(mean - 0.5772156649) < 0.01);
}

TEST_CASE("soft_match") {
  const Tensor same({3, 2}, {1, 2, 1, 2, 1, 2});
  const Matching u = soft_match(Tensor({2, 2}, {0.3, -1, 2, 0}), same);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) CHECK(u.weights(i, j) == doctest::Approx(1.0 / 3));
  const Matching sat = soft_match(Tensor({1, 1}, {1}), Tensor({3, 1}, {20, 0, 0}));
  CHECK(sat.weights(0, 0) > 1 - 1e-8);
  Rng r(4);
  const Matching m = soft_match(random_tensor({5, 4}, r), random_tensor({6, 4}, r));
  CHECK(m.valid(1e-12));
  CHECK_THROWS_AS(soft_match(random_tensor({5, 4}, r), random_tensor({6, 3}, r)), ad::ShapeMismatch);
}

TEST_CASE("gumbel_match forward") {
  const Tensor src({1, 1}, {1}), tgt({2, 1}, {2, 0});
  for (double lam : {0.1, 1.0, 10.0}) {
    const auto gm = gumbel_match(src, tgt, Tensor::scalar(lam), Tensor::zeros({1, 2}));
    CHECK(gm.hard.hard_targets == std::vector<std::size_t>{0});
    CHECK(gm.weights.values() == std::vector<double>{1, 0});
  }
  Rng r(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_tensor({6, 4}, r), b = random_tensor({6, 4}, r);
    const Tensor noise = sample_gumbel({6, 6}, r);
    const auto ref = gumbel_match(a, b, Tensor::scalar(1.0), noise).weights.values();
    for (double lam : {0.1, 10.0, 0.01}) CHECK(gumbel_match(a, b, Tensor::scalar(lam), noise).weights.values() == ref);
  }
  CHECK_THROWS_AS(gumbel_match(src, tgt, Tensor::scalar(0.0), Tensor::zeros({1, 2})), NonPositiveTemperature);
  CHECK_THROWS_AS(gumbel_match(src, tgt, Tensor::scalar(1.0), Tensor::zeros({2, 2})), ad::ShapeMismatch);
}

TEST_CASE("gumbel-max sampling law") {
  std::vector<std::vector<double>> logit_sets{{1, 0, -1}};
  Rng lr(6);
  for (int i = 0; i < 3; ++i) logit_sets.push_back({lr.uniform(-2, 2), lr.uniform(-2, 2), lr.uniform(-2, 2)});
  const auto p = softmax({1, 0, -1});
  CHECK(p[0] == doctest::Approx(0.6652).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(p[2] == doctest::Approx(0.0900).epsilon(1e-3));
  Rng r(7);
  for (const auto& z : logit_sets) {
    // Logits z_j = <src, tgt_j> with a 1-d source embedding of 1.
    const Tensor src({1, 1}, {1}), tgt({3, 1}, z);
    std::vector<double> counts(3, 0);
    for (int s = 0; s < 20000; ++s) {
      const auto gm = gumbel_match(src, tgt, Tensor::scalar(1.0), sample_gumbel({1, 3}, r));
      counts[gm.hard.hard_targets[0]] += 1;
    }
    CHECK(chi_square(counts, softmax(z)) < kChi2Df2P01);
  }
}

TEST_CASE("straight-through backward equals the relaxed softmax jacobian") {
  Rng r(8);
  Tensor a = random_tensor({4, 3}, r), b = random_tensor({5, 3}, r);
  Tensor lam = Tensor::scalar(0.7);
  const Tensor noise = sample_gumbel({4, 5}, r);
  const Tensor c = random_tensor({4, 5}, r);
  for (auto* t : {&a, &b, &lam}) t->set_requires_grad(true);
  const auto g1 = ad::backward(ad::reduce_sum(ad::mul(gumbel_match(a, b, lam, noise).weights, c)));
  const Tensor direct =
      ad::softmax_lastdim(ad::divide(ad::add(ad::matmul(a, ad::transpose_last2(b)), noise), lam));
  const auto g2 = ad::backward(ad::reduce_sum(ad::mul(direct, c)));
  CHECK(g1.get(a).values() == g2.get(a).values());
  CHECK(g1.get(b).values() == g2.get(b).values());
  CHECK(g1.get(lam).values() == g2.get(lam).values());
  CHECK(g1.get(lam).item() != 0.0);

  // plain_softmax differentiates softmax(logits): lambda gets nothing.
  const auto g3 = ad::backward(ad::reduce_sum(
      ad::mul(gumbel_match(a, b, lam, noise, {StBackward::kPlainSoftmax, false}).weights, c)));
  CHECK(g3.get(lam).item() == 0.0);
}

TEST_CASE("temperature modes") {
  ModelParams m = init_model(small_config(), Rng(9));
  Rng r(10);
  const Tensor px = random_tensor({8}, r), py = random_tensor({8}, r);
  CHECK(temperature(parse_temperature_mode("fixed:0.5"), px, py, m).item() == 0.5);
  const auto ann = parse_temperature_mode("annealed");
  CHECK(temperature(ann, px, py, m, 0, 10).item() == doctest::Approx(1.0));
  CHECK(temperature(ann, px, py, m, 9, 10).item() == doctest::Approx(0.05));
  CHECK(ann.annealed_at(5, 11) == doctest::Approx(std::sqrt(0.05)));
  CHECK(temperature(parse_temperature_mode("learned"), px, py, m).item() == doctest::Approx(8.0));
  CHECK(temperature(parse_temperature_mode("predicted"), px, py, m).item() == doctest::Approx(8.0));
  ad::tape().clear();
  CHECK_THROWS_AS(parse_temperature_mode("fixed:0"), NonPositiveTemperature);
  CHECK_THROWS_AS(parse_temperature_mode("fixed:x"), ConfigError);
  CHECK_THROWS_AS(parse_temperature_mode("hot"), ConfigError);
  for (const char* s : {"fixed:0.25", "annealed:2:0.1", "learned", "predicted"})
    CHECK(temperature_mode_name(parse_temperature_mode(s)) ==
          temperature_mode_name(parse_temperature_mode(temperature_mode_name(parse_temperature_mode(s)))));
}

TEST_CASE("acp_step produces rotations and identity on forced identity matching") {
  const ModelParams m = init_model(small_config(), Rng(11));
  const auto shapes = builtin_shapes(5, 32, 12);
  PairSpec spec;
  spec.n_points = 32;
  spec.n_partial = 20;
  const KeypointStrategy ks{KeypointStrategy::Kind::kL2Norm, 10};
  const TemperatureMode tm;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    spec.seed = s;
    const auto pair = make_pair(shapes[s % 5].cloud, spec);
    ad::NoGradGuard ng;
    const AcpStep step = acp_step(pair.source, pair.target, m, ks, tm, Rng(s));
    REQUIRE(step.output.transform.valid(1e-9));
    REQUIRE(step.output.diagnostics.lambda > 0.0);
    REQUIRE(step.output.diagnostics.source_keypoints.size() == 10);
  }
  const auto pair = make_pair(shapes[0].cloud, spec);
  AcpOptions opt;
  std::vector<std::size_t> identity(10);
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  opt.forced_matches = identity;
  ad::NoGradGuard ng;
  const AcpStep same = acp_step(pair.source, pair.source, m, ks, tm, Rng(1), opt);
  CHECK(same.output.diagnostics.source_keypoints == same.output.diagnostics.target_keypoints);
  CHECK((same.output.transform.rotation - Mat3::Identity()).norm() < 1e-8);
  CHECK(same.output.transform.translation.norm() < 1e-8);
  CHECK_THROWS_AS(acp_step(pair.source, pair.target, m, {KeypointStrategy::Kind::kL2Norm, 21}, tm, Rng(0)),
                  KTooLarge);
}

TEST_CASE("acp head gradient against surrogate finite differences") {
  // The end-to-end check covers acp_step inside the training loss.
  CHECK(prnet::test::end_to_end_gradient_error() < 1e-4);
}
