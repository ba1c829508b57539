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
  mc.value.widths = {8, 8, 1};
  return mc;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  ad::NoGradGuard ng;
  return ad::gather_rows(x, perm);
}

std::vector<std::size_t> random_perm(std::size_t n, Rng rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

TEST_CASE("knn_graph") {
  const Tensor line({3, 1}, {0, 1, 3});
  const auto g = knn_graph(line, 1);
  CHECK(g.index == std::vector<std::size_t>{1, 0, 1});
  const auto all = knn_graph(line, 2);
  for (std::size_t i = 0; i < 3; ++i) {
    std::set<std::size_t> row{all.at(i, 0), all.at(i, 1)};
    CHECK(row.size() == 2);
    CHECK(row.count(i) == 0);
  }
  CHECK_THROWS_AS(knn_graph(line, 3), KTooLarge);

  Rng r(1);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor({20, 4}, r);
    const auto gk = knn_graph(x, 5);
    for (std::size_t i = 0; i < 20; ++i) {
      std::vector<std::pair<double, std::size_t>> d;
      for (std::size_t j = 0; j < 20; ++j) {
        if (j == i) continue;
        double s = 0;
        for (std::size_t c = 0; c < 4; ++c) s += (x.at(i, c) - x.at(j, c)) * (x.at(i, c) - x.at(j, c));
        d.push_back({s, j});
      }
      std::sort(d.begin(), d.end());
      for (std::size_t j = 0; j < 5; ++j) REQUIRE(gk.at(i, j) == d[j].second);
    }
  }
}

TEST_CASE("edge_conv hand check on collinear points") {
  const Tensor pts({3, 3}, {0, 0, 0, 1, 0, 0, 3, 0, 0});
  const auto g = knn_graph(pts, 1);
  // Weights select the (x_j - x_i) block unchanged.
  std::vector<double> w(6 * 3, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w[(3 + c) * 3 + c] = 1.0;
  const Linear layer{Tensor({6, 3}, w), Tensor::zeros({3})};
  const Tensor out = edge_conv(pts, g, layer, {false, 0.2});
  CHECK(out.shape() == ad::Shape{3, 3});
  // Offsets x = +1, -1, -2, then leaky relu with slope 0.2.
  CHECK(out.at(0, 0) == doctest::Approx(1.0));
  CHECK(out.at(1, 0) == doctest::Approx(-0.2));
  CHECK(out.at(2, 0) == doctest::Approx(-0.4));
  CHECK(out.at(0, 1) == 0.0);
  CHECK_THROWS_AS(edge_conv(pts, g, Linear{Tensor::zeros({4, 3}), Tensor::zeros({3})}), ad::ShapeMismatch);
}

TEST_CASE("edge_conv and encode are permutation equivariant") {
  const ModelParams m = init_model(small_config(), Rng(2));
  Rng r(3);
  const Tensor x = random_tensor({16, 3}, r);
  const auto perm = random_perm(16, Rng(4));
  const Tensor xp = permute_rows(x, perm);
  ad::NoGradGuard ng;
  const Tensor e = encode(x, m), ep = encode(xp, m);
  CHECK(e.shape() == ad::Shape{16, 8});
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t c = 0; c < 8; ++c) CHECK(ep.at(i, c) == doctest::Approx(e.at(perm[i], c)).epsilon(1e-12));
  // Siamese: the same cloud given as either input encodes identically.
  const Tensor again = encode(x, m);
  CHECK(again.values() == e.values());
  CHECK_THROWS_AS(encode(random_tensor({4, 3}, r), m), KTooLarge);
}

TEST_CASE("both clouds share the encoder parameters") {
  const ModelParams m = init_model(small_config(), Rng(2));
  Rng r(5);
  const Tensor f_y = encode(random_tensor({12, 3}, r), m);
  const auto gy = ad::backward(ad::reduce_sum(ad::mul(f_y, f_y)));
  const Tensor f_x = encode(random_tensor({12, 3}, r), m);
  const auto gx = ad::backward(ad::reduce_sum(ad::mul(f_x, f_x)));
  for (const auto& l : m.encoder.edge) {
    CHECK(gx.contains(l.weight));
    CHECK(gy.contains(l.weight));
  }
}

TEST_CASE("multi_head_attention") {
  const ModelParams m = init_model(small_config(), Rng(6));
  AttentionParams p = m.cocontext.enc_self;
  Rng r(7);
  const Tensor q = random_tensor({5, 8}, r), kv = random_tensor({6, 8}, r);
  std::vector<Tensor> weights;
  {
    ad::NoGradGuard ng;
    multi_head_attention(q, kv, kv, p, &weights);
  }
  REQUIRE(weights.size() == 2);
  for (const auto& a : weights)
    for (std::size_t i = 0; i < a.dim(0); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < a.dim(1); ++j) s += a.at(i, j);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }

  // Constant key projections: every query attends uniformly, so the output
  // is the projected mean value row.
  for (auto& k : p.key) k.weight = Tensor::zeros(k.weight.shape());
  ad::NoGradGuard ng;
  const Tensor out = multi_head_attention(q, kv, kv, p);
  std::vector<Tensor> heads;
  for (const auto& v : p.value) heads.push_back(ad::mean_rows(linear(kv, v)));
  const Tensor expect = linear(ad::concat_lastdim(heads), p.output);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(i, c) == doctest::Approx(expect.at(0, c)).epsilon(1e-12));

  // One key: attention weight 1 whatever the content.
  const Tensor one = random_tensor({1, 8}, r);
  std::vector<Tensor> w1;
  multi_head_attention(q, one, one, m.cocontext.enc_self, &w1);
  for (const auto& a : w1)
    for (std::size_t i = 0; i < 5; ++i) CHECK(a.at(i, 0) == 1.0);
  CHECK_THROWS_AS(multi_head_attention(q, random_tensor({6, 4}, r), kv, p), ad::ShapeMismatch);
}

TEST_CASE("cocontext starts as the identity and mixes both clouds") {
  ModelParams m = init_model(small_config(), Rng(8));
  Rng r(9);
  Tensor f_x = random_tensor({10, 8}, r), f_y = random_tensor({7, 8}, r);
  {
    ad::NoGradGuard ng;
    const auto out = cocontext(f_x, f_y, m);
    CHECK(out.phi_x.shape() == f_x.shape());
    CHECK(out.phi_y.shape() == f_y.shape());
    CHECK(out.phi_x.values() == f_x.values());
    CHECK(out.phi_y.values() == f_y.values());
  }
  for (auto& v : m.cocontext.output.weight.data()) v = r.uniform(-0.5, 0.5);
  f_x.set_requires_grad(true);
  f_y.set_requires_grad(true);
  const Tensor c = random_tensor({10, 8}, r);
  auto loss = [&](const std::vector<Tensor>& in) {
    return ad::reduce_sum(ad::mul(cocontext(in[0], in[1], m).phi_x, c));
  };
  const auto g = ad::backward(loss({f_x, f_y}));
  double norm_y = 0;
  const Tensor gy = g.get(f_y);
  for (double v : gy.values()) norm_y += v * v;
  CHECK(norm_y > 0.0);
  CHECK(ad::gradient_check(loss, {f_x, f_y}) < 1e-6);
  CHECK_THROWS_AS(cocontext(random_tensor({3, 4}, r), f_y, m), ad::ShapeMismatch);
}

TEST_CASE("global_pool") {
  const Tensor p = global_pool(Tensor({2, 2}, {1, 3, 3, 1}));
  CHECK(p.values() == std::vector<double>{2, 2});
  const Tensor single = global_pool(Tensor({1, 3}, {4, 5, 6}));
  CHECK(single.values() == std::vector<double>{4, 5, 6});
  Rng r(10);
  const Tensor x = random_tensor({9, 4}, r);
  const auto a = global_pool(x).values();
  const auto b = global_pool(permute_rows(x, random_perm(9, Rng(11)))).values();
  for (std::size_t i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
  CHECK_THROWS_AS(global_pool(Tensor::zeros({0, 3})), EmptyInput);
}

TEST_CASE("value head") {
  ModelParams m = init_model(small_config(), Rng(12));
  Rng r(13);
  const Tensor psi_x = random_tensor({8}, r), psi_y = random_tensor({8}, r);
  // Initial temperature is the configured one.
  CHECK(value_head(psi_x, psi_y, m).item() == doctest::Approx(m.config.value.initial_lambda));
  ad::tape().clear();
  // Zero pre-activation gives softplus(0) + floor.
  m.value_head.back().bias = Tensor::zeros({1});
  CHECK(value_head(psi_x, psi_y, m).item() == doctest::Approx(std::log(2.0) + 0.01).epsilon(1e-12));
  CHECK(std::abs(std::log(2.0) + 0.01 - 0.70315) < 1e-5);
  ad::tape().clear();
  for (std::uint64_t s = 0; s < 1000; ++s) {
    ModelParams draw = init_model(small_config(), Rng(s));
    Rng w(s + 5000);
    for (auto& v : draw.value_head.back().weight.data()) v = w.uniform(-20, 20);
    for (auto& v : draw.value_head.back().bias.data()) v = w.uniform(-50, 50);
    ad::NoGradGuard ng;
    CHECK(value_head(psi_x, psi_y, draw).item() >= draw.config.value.lambda_floor);
  }
  for (auto& v : m.value_head.back().weight.data()) v = r.uniform(-1, 1);
  CHECK(ad::gradient_check([&](const std::vector<Tensor>& in) { return value_head(in[0], psi_y, m); },
                           {psi_x}) < 1e-6);
  CHECK_THROWS_AS(value_head(random_tensor({3}, r), psi_y, m), ad::ShapeMismatch);
}

TEST_CASE("model parameters are named uniquely and deterministic") {
  const ModelParams a = init_model(ModelConfig{}, Rng(1));
  const ModelParams b = init_model(ModelConfig{}, Rng(1));
  std::set<std::string> names;
  const auto na = a.named(), nb = b.named();
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(names.insert(na[i].first).second);
    CHECK(na[i].first == nb[i].first);
    CHECK(na[i].second.values() == nb[i].second.values());
  }
  CHECK(a.all_finite());
  CHECK(a.parameter_count() > 0);
  const ModelParams c = a.clone();
  CHECK_FALSE(c.encoder.project.weight.same_handle(a.encoder.project.weight));
  ModelConfig bad;
  bad.cocontext.heads = 5;
  CHECK_THROWS_AS(init_model(bad, Rng(0)), ConfigError);
}

TEST_CASE("end-to-end network gradient on the 16-point fixture") {
  CHECK(prnet::test::end_to_end_gradient_error() < 1e-5);
}
