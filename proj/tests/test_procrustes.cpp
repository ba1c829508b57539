#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "test_util.hpp"

using namespace prnet;
using prnet::test::random_cloud;
using prnet::test::random_transform;

namespace {

double rot_err(const Mat3& a, const Mat3& b) { return (a - b).norm(); }

// Procrustes from an independent formulation: quaternion method (Horn),
// largest eigenvector of the 4x4 symmetric matrix built from H.
Mat3 horn_rotation(const Mat3& h) {
  const double sxx = h(0, 0), sxy = h(0, 1), sxz = h(0, 2), syx = h(1, 0), syy = h(1, 1), syz = h(1, 2),
               szx = h(2, 0), szy = h(2, 1), szz = h(2, 2);
  Eigen::Matrix4d n;
  n << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,  //
      syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,   //
      szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,  //
      sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(n);
  const Eigen::Vector4d q = es.eigenvectors().col(3);
  return Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
}

}  // namespace

TEST_CASE("mapped_targets") {
  const PointCloud t = random_cloud(5, Rng(1));
  const PointCloud m = mapped_targets(Matching::identity(5), t);
  for (std::size_t i = 0; i < 5; ++i) CHECK(m[i] == t[i]);

  PointCloud two;
  two.points = {Vec3(0, 0, 0), Vec3(2, 0, 0)};
  Eigen::MatrixXd w(1, 2);
  w << 0.5, 0.5;
  CHECK(mapped_targets(Matching::soft(w), two)[0] == Vec3(1, 0, 0));

  const std::vector<std::size_t> idx{3, 0, 4, 4, 1};
  Eigen::MatrixXd oh = Eigen::MatrixXd::Zero(5, 5);
  for (int i = 0; i < 5; ++i) oh(i, static_cast<Eigen::Index>(idx[i])) = 1.0;
  const PointCloud hard = mapped_targets(Matching::hard(idx, 5), t);
  const PointCloud soft = mapped_targets(Matching::soft(oh), t);
  for (std::size_t i = 0; i < 5; ++i) CHECK(hard[i] == soft[i]);
  CHECK_THROWS_AS(mapped_targets(Matching::hard({7}, 5), t), DimensionMismatch);
}

TEST_CASE("cross covariance") {
  PointCloud s;
  s.points = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ(), Vec3::Zero()};
  const Mat3 h = cross_covariance(s, s);
  // Oracle: direct summation of centered outer products.
  const Vec3 c(0.25, 0.25, 0.25);
  Mat3 expect = Mat3::Zero();
  for (const auto& p : s.points) expect += (p - c) * (p - c).transpose();
  CHECK((h - expect).norm() < 1e-15);
  CHECK((h - h.transpose()).norm() == 0.0);
  CHECK(Eigen::SelfAdjointEigenSolver<Mat3>(h).eigenvalues().minCoeff() >= -1e-15);

  PointCloud one;
  one.points = {Vec3(1, 2, 3)};
  PointCloud other;
  other.points = {Vec3(-1, 5, 0)};
  CHECK(cross_covariance(one, other).norm() == 0.0);

  const PointCloud a = random_cloud(10, Rng(2)), b = random_cloud(10, Rng(3));
  RigidTransform shift;
  shift.translation = Vec3(3, -2, 1);
  CHECK((cross_covariance(a, b) - cross_covariance(apply_transform(shift, a), b)).norm() < 1e-12);
  CHECK((cross_covariance(a, b) - cross_covariance(a, apply_transform(shift, b))).norm() < 1e-12);
  CHECK_THROWS_AS(cross_covariance(a, random_cloud(9, Rng(0))), DimensionMismatch);
}

TEST_CASE("svd3") {
  const Svd3 id = svd3(Mat3::Identity());
  CHECK((id.s - Vec3(1, 1, 1)).norm() < 1e-12);
  const Svd3 d = svd3(Vec3(3, 2, 1).asDiagonal());
  CHECK((d.s - Vec3(3, 2, 1)).norm() < 1e-12);
  CHECK((d.u.cwiseAbs() - Mat3::Identity()).norm() < 1e-12);
  CHECK((d.v.cwiseAbs() - Mat3::Identity()).norm() < 1e-12);
  Rng r(4);
  for (int i = 0; i < 1000; ++i) {
    Mat3 h;
    for (int k = 0; k < 9; ++k) h.data()[k] = r.uniform(-2, 2);
    if (i % 10 == 0) h.col(2) = h.col(0) * 0.5 + h.col(1);  // rank 2
    if (i % 10 == 1) h = h.col(0) * h.row(1);              // rank 1
    const Svd3 s = svd3(h);
    const double scale = std::max(1.0, h.norm());
    CHECK((s.u * s.s.asDiagonal() * s.v.transpose() - h).norm() < 1e-9 * scale);
    CHECK((s.u.transpose() * s.u - Mat3::Identity()).norm() < 1e-9);
    CHECK((s.v.transpose() * s.v - Mat3::Identity()).norm() < 1e-9);
    CHECK(s.s[0] >= s.s[1]);
    CHECK(s.s[1] >= s.s[2]);
    CHECK(s.s[2] >= 0.0);
  }
}

TEST_CASE("solve_procrustes recovers constructed motions") {
  const PointCloud s = random_cloud(10, Rng(5));
  const auto self = solve_procrustes(s, s, Matching::identity(10));
  CHECK(rot_err(self.transform.rotation, Mat3::Identity()) < 1e-10);
  CHECK(self.transform.translation.norm() < 1e-10);

  RigidTransform gt;
  gt.rotation = rot_z(deg2rad(90));
  gt.translation = Vec3(1, 2, 3);
  const auto sol = solve_procrustes(s, apply_transform(gt, s), Matching::identity(10));
  CHECK(rot_err(sol.transform.rotation, gt.rotation) < 1e-9);
  CHECK((sol.transform.translation - gt.translation).norm() < 1e-9);
  CHECK_FALSE(sol.degenerate);

  PointCloud same;
  same.points.assign(5, Vec3(1, 1, 1));
  CHECK(solve_procrustes(same, same, Matching::identity(5)).degenerate);
  CHECK_THROWS_AS(solve_procrustes(random_cloud(2, Rng(0)), s, Matching::identity(2)), InvalidArgument);
}

TEST_CASE("solve_procrustes agrees with the quaternion method") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const PointCloud s = random_cloud(12, Rng(seed));
    const PointCloud t = add_noise(apply_transform(random_transform(Rng(seed).split(1)), s), 0.05, 1.0,
                                   Rng(seed).split(2));
    const auto sol = solve_procrustes(s, t, Matching::identity(12));
    CHECK(rot_err(sol.transform.rotation, horn_rotation(cross_covariance(s, t))) < 1e-9);
  }
}

TEST_CASE("objective is minimized by the closed form") {
  PointCloud x, y;
  x.points = {Vec3::Zero()};
  y.points = {Vec3(1, 0, 0)};
  CHECK(alignment_objective(x, y, RigidTransform::identity(), Matching::identity(1)) == 1.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const PointCloud s = random_cloud(15, Rng(seed));
    const PointCloud t = random_cloud(15, Rng(seed + 100));
    Rng mr(seed + 200);
    std::vector<std::size_t> idx(15);
    for (auto& i : idx) i = mr.below(15);
    const Matching m = Matching::hard(idx, 15);
    const auto sol = solve_procrustes(s, t, m);
    const double best = alignment_objective(s, t, sol.transform, m);
    for (std::uint64_t p = 0; p < 100; ++p) {
      RigidTransform probe = random_transform(Rng(seed * 1000 + p));
      CHECK(best <= alignment_objective(s, t, probe, m) + 1e-12);
    }
    const PointCloud aligned = apply_transform(sol.transform, s);
    CHECK(alignment_objective(aligned, t, RigidTransform::identity(), m) == doctest::Approx(best));
  }
}

TEST_CASE("equivariance under source pre-rotation") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const PointCloud s = random_cloud(10, Rng(seed));
    const PointCloud t = apply_transform(random_transform(Rng(seed).split(1)), s);
    RigidTransform q;
    q.rotation = random_transform(Rng(seed).split(2)).rotation;
    const Mat3 r = solve_procrustes(s, t, Matching::identity(10)).transform.rotation;
    const Mat3 rq = solve_procrustes(apply_transform(q, s), t, Matching::identity(10)).transform.rotation;
    CHECK(rot_err(rq, r * q.rotation.transpose()) < 1e-9);
  }
}

TEST_CASE("reflection-inducing near-planar clouds give proper rotations") {
  int corrected = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(seed);
    PointCloud s;
    for (int i = 0; i < 20; ++i) s.points.emplace_back(r.uniform(-1, 1), r.uniform(-1, 1), r.uniform(-1e-3, 1e-3));
    // Mirror through the plane: the best orthogonal map is a reflection.
    PointCloud t = s;
    for (auto& p : t.points) p[2] = -p[2] + r.uniform(-1e-3, 1e-3);
    const auto sol = solve_procrustes(s, t, Matching::identity(20));
    CHECK(sol.transform.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sol.transform.valid());
    corrected += sol.reflection_corrected ? 1 : 0;
  }
  CHECK(corrected > 0);
}

TEST_CASE("one-hot soft matching equals hard matching") {
  const PointCloud s = random_cloud(8, Rng(7)), t = random_cloud(8, Rng(8));
  const std::vector<std::size_t> idx{1, 3, 5, 7, 0, 2, 4, 6};
  Eigen::MatrixXd oh = Eigen::MatrixXd::Zero(8, 8);
  for (int i = 0; i < 8; ++i) oh(i, static_cast<Eigen::Index>(idx[i])) = 1.0;
  const auto a = solve_procrustes(s, t, Matching::hard(idx, 8)).transform;
  const auto b = solve_procrustes(s, t, Matching::soft(oh)).transform;
  CHECK(rot_err(a.rotation, b.rotation) < 1e-12);
  CHECK((a.translation - b.translation).norm() < 1e-12);
}
