#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace prnet;
using prnet::test::random_cloud;
using prnet::test::random_transform;

namespace {

constexpr const char* kCubeOff = R"(OFF
8 12 0
-1 -1 -1
1 -1 -1
1 1 -1
-1 1 -1
-1 -1 1
1 -1 1
1 1 1
-1 1 1
3 0 2 1
3 0 3 2
3 4 5 6
3 4 6 7
3 0 1 5
3 0 5 4
3 2 3 7
3 2 7 6
3 1 2 6
3 1 6 5
3 0 4 7
3 0 7 3
)";

Mesh uv_sphere(int rings, int segments) {
  Mesh m;
  for (int i = 0; i <= rings; ++i) {
    const double th = kPi * i / rings;
    for (int j = 0; j < segments; ++j) {
      const double ph = 2 * kPi * j / segments;
      m.vertices.emplace_back(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
    }
  }
  auto id = [&](int i, int j) { return static_cast<std::size_t>(i * segments + (j % segments)); };
  for (int i = 0; i < rings; ++i)
    for (int j = 0; j < segments; ++j) {
      m.triangles.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      m.triangles.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  return m;
}

bool same_points(const PointCloud& a, const PointCloud& b, double tol) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if ((a[i] - b[i]).norm() > tol) return false;
  return true;
}

}  // namespace

TEST_CASE("rng is deterministic and splits independently of parent draws") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a() == b());
  Rng c(42);
  const auto child_before = c.split(3)();
  for (int i = 0; i < 17; ++i) c();
  CHECK(c.split(3)() == child_before);
  CHECK(Rng(42).split(1)() != Rng(42).split(2)());
  Rng u(7);
  double mean = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double x = u.uniform();
    REQUIRE(x >= 0.0);
    REQUIRE(x < 1.0);
    mean += x;
  }
  CHECK(mean / 100000 == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("off parsing and load_point_cloud normalization") {
  std::istringstream in(kCubeOff);
  const Mesh mesh = parse_off(in);
  CHECK(mesh.vertices.size() == 8);
  CHECK(mesh.triangles.size() == 12);
  const PointCloud c = point_cloud_from_mesh(mesh, 8, Rng(3));
  CHECK(c.size() == 8);
  double max_norm = 0.0;
  for (const auto& p : c.points) max_norm = std::max(max_norm, p.norm());
  CHECK(max_norm <= 1.0 + 1e-12);
  CHECK(max_norm == doctest::Approx(1.0));
  CHECK(c.centroid().norm() < 1e-12);
}

TEST_CASE("load_point_cloud from files") {
  const auto dir = prnet::test::scratch_dir("geometry_load");
  {
    std::ofstream(dir / "cube.off") << kCubeOff;
    std::ofstream(dir / "three.xyz") << "0 0 0\n1 0 0\n0 1 0\n";
    std::ofstream(dir / "bad.off") << "OFF\n8 12\n1 2\n";
  }
  CHECK(load_point_cloud((dir / "cube.off").string(), 8, 1).size() == 8);
  CHECK_THROWS_AS(load_point_cloud((dir / "three.xyz").string(), 8, 1), TooFewPoints);
  CHECK_THROWS_AS(load_point_cloud((dir / "bad.off").string(), 8, 1), ParseError);
  CHECK_THROWS_AS(load_point_cloud((dir / "missing.off").string(), 8, 1), ParseError);
}

TEST_CASE("ascii and binary ply agree") {
  std::ostringstream ascii;
  ascii << "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n"
           "element face 2\nproperty list uchar int vertex_indices\nend_header\n"
           "0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n4 0 1 2 3\n";
  std::istringstream ain(ascii.str());
  const Mesh a = parse_ply(ain);
  CHECK(a.vertices.size() == 4);
  CHECK(a.triangles.size() == 3);  // quad fan-triangulated

  std::string bin = "ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty double x\n"
                    "property double y\nproperty double z\nelement face 1\n"
                    "property list uchar int vertex_indices\nend_header\n";
  const double v[12] = {0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0};
  bin.append(reinterpret_cast<const char*>(v), sizeof v);
  bin.push_back(static_cast<char>(3));
  const std::int32_t f[3] = {0, 1, 2};
  bin.append(reinterpret_cast<const char*>(f), sizeof f);
  std::istringstream bin_in(bin);
  const Mesh b = parse_ply(bin_in);
  REQUIRE(b.vertices.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK((a.vertices[i] - b.vertices[i]).norm() == 0.0);
  CHECK(b.triangles.size() == 1);

  std::istringstream junk("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n");
  CHECK_THROWS_AS(parse_ply(junk), ParseError);
}

TEST_CASE("fps on a sphere spreads points better than uniform subsets") {
  const Mesh sphere = uv_sphere(16, 32);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const PointCloud fps = point_cloud_from_mesh(sphere, 64, Rng(seed));
    // Oracle: random 64-subset of the same candidate pool.
    PointCloud pool = sample_surface(sphere, 256, Rng(seed).split(1));
    Rng pick(seed + 1000);
    PointCloud uni;
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), pick);
    for (std::size_t i = 0; i < 64; ++i) uni.points.push_back(pool[idx[i]]);
    CHECK(prnet::test::min_pairwise(fps) >= prnet::test::min_pairwise(normalize_unit(uni)));
  }
}

TEST_CASE("farthest_point_sample") {
  PointCloud line;
  line.points = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(10, 0, 0)};
  // Find a seed whose first pick is index 0, then check the greedy second pick.
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    const PointCloud s = farthest_point_sample(line, 2, Rng(seed));
    if (s.source_indices->front() != 0) continue;
    CHECK(*s.source_indices == std::vector<std::size_t>{0, 2});
    break;
  }
  const PointCloud cloud = random_cloud(30, Rng(1));
  const PointCloud all = farthest_point_sample(cloud, 30, Rng(2));
  std::set<std::size_t> seen(all.source_indices->begin(), all.source_indices->end());
  CHECK(seen.size() == 30);
  CHECK(all.valid());
  CHECK_THROWS_AS(farthest_point_sample(cloud, 31, Rng(0)), TooFewPoints);

  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const PointCloud c = random_cloud(100, Rng(seed));
    const double fps = prnet::test::min_pairwise(farthest_point_sample(c, 10, Rng(seed).split(1)));
    // Oracle: brute-force best of many uniform 10-subsets is rarely better.
    std::vector<std::size_t> idx(100);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng pick(seed + 77);
    std::shuffle(idx.begin(), idx.end(), pick);
    PointCloud sub;
    for (int i = 0; i < 10; ++i) sub.points.push_back(c[idx[i]]);
    if (fps >= prnet::test::min_pairwise(sub)) ++wins;
  }
  CHECK(wins >= 95);
}

TEST_CASE("random_rigid") {
  const RigidTransform z = random_rigid(0, 0, Rng(5));
  CHECK(z.rotation == Mat3::Identity());
  CHECK(z.translation == Vec3::Zero());
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const RigidTransform t = random_rigid(45, 0.5, Rng(seed));
    CHECK(std::abs(t.rotation.determinant() - 1.0) <= 1e-12);
    const auto e = euler_from_rotation(t.rotation).degrees;
    for (double a : e) {
      CHECK(a >= -1e-9);
      CHECK(a <= 45.0 + 1e-9);
    }
    CHECK(t.translation.cwiseAbs().maxCoeff() <= 0.5);
  }
  CHECK_THROWS_AS(random_rigid(-1, 0, Rng(0)), InvalidArgument);
}

TEST_CASE("apply, compose and invert") {
  PointCloud origin;
  origin.points = {Vec3::Zero()};
  RigidTransform shift;
  shift.translation = Vec3(1, 0, 0);
  CHECK(apply_transform(shift, origin)[0] == Vec3(1, 0, 0));

  const PointCloud c = random_cloud(20, Rng(9));
  CHECK(same_points(apply_transform(RigidTransform::identity(), c), c, 0.0));
  for (std::uint64_t s = 0; s < 100; ++s) {
    const RigidTransform a = random_transform(Rng(s)), b = random_transform(Rng(s + 1000));
    CHECK(same_points(apply_transform(invert(a), apply_transform(a, c)), c, 1e-12));
    CHECK(same_points(apply_transform(compose(b, a), c), apply_transform(b, apply_transform(a, c)), 1e-12));
    const RigidTransform back = compose(invert(a), a);
    CHECK((back.rotation - Mat3::Identity()).norm() <= 1e-12);
    CHECK(back.translation.norm() <= 1e-12);
    const RigidTransform twice = invert(invert(a));
    CHECK((twice.rotation - a.rotation).norm() <= 1e-12);
    CHECK((twice.translation - a.translation).norm() <= 1e-12);
    const RigidTransform inv = invert(a);
    CHECK((inv.rotation - a.rotation.transpose()).norm() == 0.0);
    CHECK((inv.translation + a.rotation.transpose() * a.translation).norm() <= 1e-15);
  }

  const RigidTransform any = random_transform(Rng(3));
  const RigidTransform ci = compose(RigidTransform::identity(), any);
  CHECK(ci.rotation == any.rotation);
  CHECK(ci.translation == any.translation);
  const RigidTransform inv_id = invert(RigidTransform::identity());
  CHECK(inv_id.rotation == Mat3::Identity());
  CHECK(inv_id.translation.norm() == 0.0);

  RigidTransform r30, r15;
  r30.rotation = rot_z(deg2rad(30));
  r15.rotation = rot_z(deg2rad(15));
  CHECK((compose(r30, r15).rotation - rot_z(deg2rad(45))).norm() <= 1e-12);

  RigidTransform u, v;
  u.translation = Vec3(1, 2, 3);
  v.translation = Vec3(-4, 0.5, 2);
  const RigidTransform uv = compose(u, v);
  CHECK(uv.rotation == Mat3::Identity());
  CHECK(uv.translation == Vec3(-3, 2.5, 5));
}

TEST_CASE("local ground truth closes the composition") {
  const RigidTransform total = random_transform(Rng(1));
  const RigidTransform same = local_ground_truth(total, RigidTransform::identity());
  CHECK((same.rotation - total.rotation).norm() <= 1e-15);
  CHECK((same.translation - total.translation).norm() <= 1e-15);
  const RigidTransform none = local_ground_truth(total, total);
  CHECK((none.rotation - Mat3::Identity()).norm() <= 1e-10);
  CHECK(none.translation.norm() <= 1e-10);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const RigidTransform t = random_transform(Rng(s)), a = random_transform(Rng(s).split(1));
    const RigidTransform closed = compose(local_ground_truth(t, a), a);
    CHECK((closed.rotation - t.rotation).norm() <= 1e-10);
    CHECK((closed.translation - t.translation).norm() <= 1e-10);
  }
}

TEST_CASE("partial views") {
  const PointCloud c = random_cloud(50, Rng(4));
  const PointCloud all = partial_view(c, 50, Rng(1));
  CHECK(std::set<std::size_t>(all.source_indices->begin(), all.source_indices->end()).size() == 50);

  PointCloud clusters;
  for (int i = 0; i < 10; ++i) clusters.points.emplace_back(0.01 * i, 0, 0);
  for (int i = 0; i < 10; ++i) clusters.points.emplace_back(10 + 0.01 * i, 0, 0);
  const PointCloud a = partial_view_from(clusters, 10, Vec3(-1, 0, 0));
  for (std::size_t i = 0; i < 10; ++i) CHECK((*a.source_indices)[i] == i);

  for (std::uint64_t s = 0; s < 20; ++s) {
    const Vec3 vp = random_viewpoint(c, Rng(s));
    CHECK((vp - c.centroid()).norm() == doctest::Approx(2.0));
    const PointCloud v = partial_view_from(c, 12, vp);
    // Oracle: full scan, sort by distance.
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t i = 0; i < c.size(); ++i) d.push_back({(c[i] - vp).squaredNorm(), i});
    std::sort(d.begin(), d.end());
    std::set<std::size_t> expect;
    for (int i = 0; i < 12; ++i) expect.insert(d[i].second);
    CHECK(std::set<std::size_t>(v.source_indices->begin(), v.source_indices->end()) == expect);
  }
  CHECK_THROWS_AS(partial_view(c, 51, Rng(0)), TooFewPoints);
}

TEST_CASE("noise statistics and clamp") {
  const PointCloud c = random_cloud(100, Rng(2));
  CHECK(same_points(add_noise(c, 0.0, 0.05, Rng(1)), c, 0.0));
  PointCloud zeros;
  zeros.points.assign(33334, Vec3::Zero());
  const PointCloud n = add_noise(zeros, 0.01, 0.05, Rng(11));
  double sum = 0, sq = 0;
  std::size_t count = 0;
  for (const auto& p : n.points)
    for (int k = 0; k < 3; ++k) {
      sum += p[k];
      sq += p[k] * p[k];
      ++count;
    }
  const double mean = sum / count;
  const double sd = std::sqrt(sq / count - mean * mean);
  CHECK(sd >= 0.009);
  CHECK(sd <= 0.011);
  const PointCloud wide = add_noise(zeros, 1.0, 0.05, Rng(12));
  for (const auto& p : wide.points) CHECK(p.cwiseAbs().maxCoeff() <= 0.05);
}

TEST_CASE("make_pair") {
  const PointCloud shape = random_cloud(80, Rng(8));
  PairSpec zero;
  zero.n_points = 40;
  zero.n_partial = 40;
  zero.rot_range_deg = 0;
  zero.trans_range = 0;
  zero.seed = 3;
  const RegistrationPair p0 = make_pair(shape, zero);
  CHECK(p0.ground_truth.rotation == Mat3::Identity());
  CHECK(p0.ground_truth.translation == Vec3::Zero());
  // Same full cloud and a full-size crop keeps every point.
  CHECK(same_points(p0.full_source, p0.full_target, 0.0));
  CHECK(same_points(p0.source, p0.target, 0.0));
  std::set<std::size_t> si(p0.source.source_indices->begin(), p0.source.source_indices->end());
  CHECK(si.size() == 40);

  PairSpec spec;
  spec.n_points = 64;
  spec.n_partial = 48;
  spec.seed = 17;
  const RegistrationPair p = make_pair(shape, spec);
  CHECK(p.source.size() == 48);
  CHECK(p.target.size() == 48);
  CHECK(same_points(apply_transform(p.ground_truth, p.full_source), p.full_target, 0.0));
  const RegistrationPair again = make_pair(shape, spec);
  CHECK(same_points(again.source, p.source, 0.0));
  CHECK(same_points(again.target, p.target, 0.0));

  spec.noise_sigma = 0.01;
  const RegistrationPair noisy = make_pair(shape, spec);
  CHECK(same_points(apply_transform(noisy.ground_truth, noisy.full_source), noisy.full_target, 0.0));
  CHECK_FALSE(same_points(noisy.source, p.source, 0.0));

  spec.n_points = 81;
  CHECK_THROWS_AS(make_pair(shape, spec), TooFewPoints);
}

TEST_CASE("euler extraction") {
  const auto id = euler_from_rotation(Mat3::Identity()).degrees;
  for (double a : id) CHECK(a == 0.0);
  const auto z = euler_from_rotation(rot_z(deg2rad(30))).degrees;
  CHECK(std::abs(z[0] - 30) <= 1e-9);
  CHECK(std::abs(z[1]) <= 1e-9);
  CHECK(std::abs(z[2]) <= 1e-9);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Mat3 r = random_transform(Rng(s)).rotation;
    const auto e = euler_from_rotation(r);
    CHECK_FALSE(e.gimbal_lock);
    const Mat3 back = rotation_from_euler_zyx(e.degrees[0], e.degrees[1], e.degrees[2]);
    CHECK((back - r).norm() < 1e-9);
  }
  const auto lock = euler_from_rotation(rotation_from_euler_zyx(20, 90, 0));
  CHECK(lock.gimbal_lock);
  CHECK((rotation_from_euler_zyx(lock.degrees[0], lock.degrees[1], lock.degrees[2]) -
         rotation_from_euler_zyx(20, 90, 0))
            .norm() < 1e-6);
}

TEST_CASE("metrics") {
  std::vector<RigidTransform> truth;
  for (std::uint64_t s = 0; s < 5; ++s) truth.push_back(random_rigid(45, 0.5, Rng(s)));
  const MetricsReport exact = compute_metrics(truth, truth);
  CHECK(exact.rotation.mse == 0.0);
  CHECK(exact.rotation.rmse == 0.0);
  CHECK(exact.rotation.mae == 0.0);
  CHECK(exact.rotation.r2 == 1.0);
  CHECK(exact.translation.r2 == 1.0);
  CHECK(exact.count == 5);

  RigidTransform gt;
  gt.rotation = rotation_from_euler_zyx(10, 20, 30);
  RigidTransform pred = gt;
  pred.rotation = rotation_from_euler_zyx(13, 20, 30);
  const MetricsReport off = compute_metrics({pred}, {gt});
  CHECK(off.rotation.mae == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(off.rotation.mse == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(std::abs(off.rotation.rmse - std::sqrt(off.rotation.mse)) <= 1e-12);
  // Translation truth has zero variance and zero residual.
  CHECK(off.degenerate_variance);
  CHECK(off.translation.r2 == 1.0);

  RigidTransform moved = gt;
  moved.translation = Vec3(0.1, 0, 0);
  const MetricsReport bad = compute_metrics({moved}, {gt});
  CHECK(std::isinf(bad.translation.r2));
  CHECK(bad.translation.r2 < 0);

  Rng r(5);
  std::vector<RigidTransform> preds;
  for (const auto& t : truth) {
    RigidTransform p = t;
    p.translation += Vec3(r.uniform(-0.1, 0.1), r.uniform(-0.1, 0.1), r.uniform(-0.1, 0.1));
    preds.push_back(p);
  }
  const MetricsReport m = compute_metrics(preds, truth);
  CHECK(m.translation.mae <= m.translation.rmse);
  CHECK(std::abs(m.translation.rmse - std::sqrt(m.translation.mse)) <= 1e-12);
  CHECK_THROWS_AS(compute_metrics({}, {}), EmptyInput);
  CHECK_THROWS_AS(compute_metrics(preds, {gt}), DimensionMismatch);
}

TEST_CASE("builtin shapes are deterministic and normalized") {
  const auto a = builtin_shapes(6, 64, 3);
  const auto b = builtin_shapes(6, 64, 3);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(same_points(a[i].cloud, b[i].cloud, 0.0));
    CHECK(a[i].cloud.size() == 64);
    CHECK(a[i].cloud.centroid().norm() < 1e-12);
  }
}
