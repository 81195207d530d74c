#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "gsbi/error.hpp"
#include "gsbi/ratio_net.hpp"

using namespace gsbi;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.grid_n = 12;
  c.channels = {2, 3, 4, 5};
  c.embedding = 6;
  c.hidden = 8;
  return c;
}

TsdfGrid random_grid(int n, Rng& rng) {
  TsdfGrid g(n, 0.3, Vec3(-0.15, -0.15, 0.0));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : g.mutable_values()) v = u(rng);
  for (auto& w : g.mutable_weights()) w = 1.0;
  return g;
}

Vec4 random_unit(Rng& rng) {
  std::normal_distribution<double> n;
  Vec4 q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized();
}

RatioEnsemble random_ensemble(const NetworkConfig& cfg, std::uint64_t seed, bool zero_output = false) {
  RatioEnsemble e;
  for (int i = 0; i < kEnsembleSize; ++i) {
    Rng rng(seed + i);
    e.members.push_back(init_classifier(cfg, rng, zero_output));
    e.members.back().pose_mean = Eigen::Vector4f(0.01f, -0.02f, 0.1f, 0.3f);
    e.members.back().pose_scale = Eigen::Vector4f(0.05f, 0.05f, 0.02f, 0.9f);
  }
  return e;
}

double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

std::vector<EpisodeRecord> toy_episodes(const NetworkConfig& cfg, int n, std::uint64_t seed) {
  // Success iff the hand sits in the +x half of the box: learnable from u alone.
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<EpisodeRecord> eps;
  const std::size_t voxels = static_cast<std::size_t>(cfg.grid_n) * cfg.grid_n * cfg.grid_n;
  for (int i = 0; i < n; ++i) {
    EpisodeRecord e;
    e.id = static_cast<std::uint64_t>(i);
    e.grid_n = cfg.grid_n;
    e.grid_size = 0.3;
    e.voxels.resize(voxels);
    for (auto& v : e.voxels) v = static_cast<float>(u(rng));
    e.pose.centroid = Vec3(u(rng), u(rng), 0.1);
    e.pose.yaw = u(rng);
    e.aabb.low = Vec3(-0.05, -0.05, 0.05);
    e.aabb.high = Vec3(0.05, 0.05, 0.15);
    for (int k = 0; k < 10; ++k) {
      GraspAttempt g;
      g.hand.position = Vec3(0.05 * u(rng), 0.05 * u(rng), 0.1 + 0.05 * u(rng));
      g.hand.orientation = UnitQuaternion::from_unit(random_unit(rng));
      g.success = g.hand.position.x() > 0.0;
      e.grasps.push_back(g);
    }
    eps.push_back(std::move(e));
  }
  return eps;
}

}  // namespace

TEST_CASE("network shapes") {
  NetworkConfig c;
  CHECK(c.stage_side(0) == 20);
  CHECK(c.stage_side(1) == 10);
  CHECK(c.stage_side(2) == 5);
  CHECK(c.stage_side(3) == 3);
  CHECK(c.flat_size() == 128 * 27);
  CHECK(c.head_inputs() == 76);
  Rng rng(1);
  const auto p = init_classifier(c, rng);
  CHECK(p.all_finite());
  CHECK(p.layers.conv_w[1].rows() == 32);
  CHECK(p.layers.conv_w[1].cols() == 27 * 16);
  CHECK(p.layers.hidden_w[0].cols() == 76);
  CHECK(p.layers.out_w.norm() == 0.0);
  NetworkConfig bad = c;
  bad.hidden = 0;
  CHECK_THROWS_AS(init_classifier(bad, rng), Error);
}

TEST_CASE("encoder") {
  NetworkConfig cfg = small_config();
  cfg.grid_n = 40;
  Rng rng(2);
  const auto p = init_classifier(cfg, rng);
  const auto g = random_grid(40, rng);
  const Eigen::VectorXd e1 = encode_voxels(p, g);
  const Eigen::VectorXd e2 = encode_voxels(p, g);
  CHECK(e1.size() == cfg.embedding);
  CHECK(e1 == e2);
  for (int i = 0; i < 1000; ++i) {
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> v(64000);
    for (auto& x : v) x = u(rng);
    CHECK(encode_voxels(p, v).allFinite());
  }
  CHECK_THROWS_AS(encode_voxels(p, random_grid(20, rng)), Error);
}

TEST_CASE("forward and log ratio") {
  const NetworkConfig cfg = small_config();
  Rng rng(3);
  const auto zero = init_classifier(cfg, rng);
  const auto g = random_grid(cfg.grid_n, rng);
  const Eigen::VectorXd e = encode_voxels(zero, g);
  HeadInput in;
  in.u = Vec3(0.2, -0.4, 0.9);
  in.q = random_unit(rng);
  CHECK(forward(zero, e, in) == 0.5);
  CHECK(log_ratio(zero, e, in) == 0.0);

  in.u = Vec3(1.5, 0, 0);
  CHECK_THROWS_AS(forward(zero, e, in), Error);

  const auto p = init_classifier(cfg, rng, false);
  const Eigen::VectorXd ep = encode_voxels(p, g);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    in.u = Vec3(u(rng), u(rng), u(rng));
    in.q = random_unit(rng);
    in.success = i % 2 == 0;
    const double d = forward(p, ep, in);
    CHECK(d > 0.0);
    CHECK(d < 1.0);
    CHECK(std::abs(log_ratio(p, ep, in) - logit(d)) <= 1e-9);
  }
  CHECK(logit(0.5) == 0.0);
  CHECK_THROWS_AS(logit(1.0), Error);
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("log-mean-exp ensemble combination") {
  const double v = -0.731;
  const std::vector<double> same{v, v, v, v};
  CHECK(log_mean_exp(same) == v);
  const std::vector<double> mixed{0.0, 0.0, 0.0, std::log(3.0)};
  CHECK(std::abs(log_mean_exp(mixed) - std::log(1.5)) <= 1e-12);
  std::vector<double> r{2.0, -1.0, 0.5, 7.0};
  const double base = log_mean_exp(r);
  CHECK(base >= -1.0);
  CHECK(base <= 7.0);
  std::sort(r.begin(), r.end());
  do {
    CHECK(log_mean_exp(r) == base);
  } while (std::next_permutation(r.begin(), r.end()));
  const std::vector<double> huge{1000.0, 1000.0};
  CHECK(log_mean_exp(huge) == 1000.0);
  CHECK_THROWS_AS(log_mean_exp(std::vector<double>{}), Error);
}

TEST_CASE("observation ratio matches the direct path and the identity ensemble") {
  const NetworkConfig cfg = small_config();
  const RatioEnsemble ens = random_ensemble(cfg, 40);
  Rng rng(4);
  const auto g = random_grid(cfg.grid_n, rng);
  PoseFeature4D pose;
  pose.centroid = Vec3(0.02, 0.01, 0.09);
  pose.yaw = 0.4;
  const PositionPrior box(Vec3(-0.03, -0.02, 0.05), Vec3(0.05, 0.04, 0.12));
  const ObservationRatio obs(ens, g, pose, box);

  ProductPoint h{Vec3(0.01, 0.0, 0.08), UnitQuaternion::from_unit(random_unit(rng))};
  HeadInput in;
  in.u = inverse_box_bijection(h.position, box);
  in.q = h.orientation.coeffs();
  in.pose = pose.as_vector();
  std::vector<double> direct;
  for (const auto& m : ens.members) {
    in.success = true;
    direct.push_back(log_ratio(m, encode_voxels(m, g), in));
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(obs.member_log_ratio(i, true, h) - direct[i]) < 1e-10);
  CHECK(std::abs(obs.log_ratio(true, h) - log_mean_exp(direct)) < 1e-10);

  RatioEnsemble same;
  for (int i = 0; i < 4; ++i) same.members.push_back(ens.members[0]);
  const ObservationRatio obs_same(same, g, pose, box);
  CHECK(obs_same.log_ratio(false, h) == obs_same.member_log_ratio(0, false, h));

  h.position = Vec3(0.2, 0, 0.08);
  CHECK_THROWS_AS(obs.log_ratio(true, h), Error);

  for (int i = 0; i < 10000; ++i) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const ProductPoint r{box.low + (box.high - box.low).cwiseProduct(Vec3(u(rng), u(rng), u(rng))),
                         UnitQuaternion::from_unit(random_unit(rng))};
    const double a = obs.member_log_ratio(static_cast<std::size_t>(i % 4), i % 3 == 0, r);
    CHECK(sigmoid(a) > 0.0);
    CHECK(sigmoid(a) < 1.0);
  }
}

TEST_CASE("grad_wrt_hand against central differences") {
  const NetworkConfig cfg = small_config();
  const RatioEnsemble ens = random_ensemble(cfg, 90);
  Rng rng(5);
  const auto g = random_grid(cfg.grid_n, rng);
  PoseFeature4D pose;
  pose.centroid = Vec3(0.0, 0.01, 0.1);
  const PositionPrior box(Vec3(-0.04, -0.03, 0.05), Vec3(0.04, 0.05, 0.13));
  const ObservationRatio obs(ens, g, pose, box);
  const double step = 1e-5;
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Vec3 x = box_bijection(Vec3(u(rng), u(rng), u(rng)), box);
    const Vec4 q = random_unit(rng);
    const bool s = i % 2 == 0;
    const auto r = obs.grad_wrt_hand(s, x, q);
    CHECK(r.value == obs.log_ratio(s, x, q));
    Eigen::Matrix<double, 7, 1> analytic, fd;
    analytic << r.gradient.position, r.gradient.orientation;
    for (int k = 0; k < 3; ++k) {
      Vec3 a = x, b = x;
      a[k] += step;
      b[k] -= step;
      fd[k] = (obs.log_ratio(s, a, q) - obs.log_ratio(s, b, q)) / (2 * step);
    }
    for (int k = 0; k < 4; ++k) {
      Vec4 a = q, b = q;
      a[k] += step;
      b[k] -= step;
      fd[3 + k] = (obs.log_ratio(s, x, a) - obs.log_ratio(s, x, b)) / (2 * step);
    }
    worst = std::max(worst, relative_error(analytic, fd));
  }
  MESSAGE("worst relative hand-gradient error " << worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("grad_wrt_hand special cases") {
  const NetworkConfig cfg = small_config();
  Rng rng(6);
  const auto g = random_grid(cfg.grid_n, rng);
  PoseFeature4D pose;
  const PositionPrior box(Vec3(-0.02, -0.02, 0.05), Vec3(0.02, 0.02, 0.09));
  const Vec4 q = random_unit(rng);
  const Vec3 x(0.005, -0.01, 0.06);

  const ObservationRatio zero(random_ensemble(cfg, 7, true), g, pose, box);
  const auto z = zero.grad_wrt_hand(true, x, q);
  CHECK(z.value == 0.0);
  CHECK(z.gradient.position == Vec3::Zero());
  CHECK(z.gradient.orientation == Vec4::Zero());

  // Same scaled input under a box twice as wide: position gradient halves.
  const RatioEnsemble ens = random_ensemble(cfg, 8);
  const PositionPrior wide(box.center() - 2 * box.half_width(), box.center() + 2 * box.half_width());
  const ObservationRatio narrow_obs(ens, g, pose, box), wide_obs(ens, g, pose, wide);
  const Vec3 xw = box_bijection(inverse_box_bijection(x, box), wide);
  const auto gn = narrow_obs.grad_wrt_hand(false, x, q);
  const auto gw = wide_obs.grad_wrt_hand(false, xw, q);
  CHECK(gw.value == doctest::Approx(gn.value).epsilon(1e-12));
  for (int k = 0; k < 3; ++k) CHECK(gw.gradient.position[k] == doctest::Approx(0.5 * gn.gradient.position[k]).epsilon(1e-12));
  CHECK((gw.gradient.orientation - gn.gradient.orientation).norm() <= 1e-12 * gn.gradient.orientation.norm());
}

TEST_CASE("parameter gradients against central differences") {
  const NetworkConfig cfg = small_config();
  Rng rng(9);
  ClassifierParams p = init_classifier(cfg, rng, false);
  p.pose_mean = Eigen::Vector4f(0.1f, 0.0f, 0.05f, 0.0f);
  p.pose_scale = Eigen::Vector4f(0.2f, 0.2f, 0.1f, 1.0f);
  std::vector<std::vector<float>> vox(3);
  std::uniform_real_distribution<float> uf(-1.0f, 1.0f);
  TrainingBatch batch;
  for (auto& v : vox) {
    v.resize(static_cast<std::size_t>(cfg.grid_n * cfg.grid_n * cfg.grid_n));
    for (auto& x : v) x = uf(rng);
    batch.voxels.push_back(v);
    batch.poses.push_back(Eigen::Vector4d(uf(rng), uf(rng), uf(rng), uf(rng)));
  }
  for (int t = 0; t < 24; ++t) {
    TrainingExample ex;
    ex.scene = static_cast<std::size_t>(t % 3);
    ex.success = t % 2 == 0;
    ex.u = Vec3(uf(rng), uf(rng), uf(rng));
    ex.q = random_unit(rng);
    ex.label = t % 4 < 2;
    batch.examples.push_back(ex);
  }
  Layers<double> grad;
  loss_and_gradient(p, batch, &grad);

  // Perturb the float weights through a double copy by evaluating the loss on
  // params whose tensors are shifted by +-h; float storage would swamp the
  // difference, so use a step large enough to be exact in float.
  const double h = 1.0 / 1024;
  auto refs = p.layers.flatten_refs();
  auto grefs = grad.flatten_refs();
  double worst = 0.0;
  for (std::size_t t = 0; t < refs.size(); ++t) {
    auto& w = *refs[t];
    for (int trial = 0; trial < 4; ++trial) {
      const Eigen::Index idx = std::uniform_int_distribution<Eigen::Index>(0, w.size() - 1)(rng);
      const float orig = w.data()[idx];
      w.data()[idx] = orig + static_cast<float>(h);
      const double lp = loss_and_gradient(p, batch, nullptr);
      w.data()[idx] = orig - static_cast<float>(h);
      const double lm = loss_and_gradient(p, batch, nullptr);
      w.data()[idx] = orig;
      const double fd = (lp - lm) / (static_cast<double>(orig + static_cast<float>(h)) -
                                     static_cast<double>(orig - static_cast<float>(h)));
      const double an = grefs[t]->data()[idx];
      const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
      worst = std::max(worst, err);
    }
  }
  MESSAGE("worst relative parameter-gradient error " << worst);
  CHECK(worst <= 1e-3);
}

TEST_CASE("derangements and negatives") {
  Rng rng(10);
  for (std::size_t n = 2; n < 30; ++n) {
    const auto p = derangement(n, rng);
    REQUIRE(p.size() == n);
    std::set<std::size_t> seen(p.begin(), p.end());
    CHECK(seen.size() == n);
    for (std::size_t i = 0; i < n; ++i) CHECK(p[i] != i);
  }
  CHECK(derangement(1, rng).empty());

  std::vector<std::vector<GraspAttempt>> scenes(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int s = 0; s < 3; ++s) {
    const int n = s == 1 ? 1 : 8;
    for (int i = 0; i < n; ++i) {
      GraspAttempt g;
      g.hand.position = Vec3(u(rng), u(rng), u(rng));
      g.success = i % 3 == 0;
      scenes[s].push_back(g);
    }
  }
  const auto neg = make_negatives(scenes, rng);
  CHECK(neg.skipped_scenes == 1);
  CHECK(neg.tuples.size() == 16);
  std::size_t offset = 0;
  for (int s : {0, 2}) {
    std::multiset<double> before, after;
    for (std::size_t i = 0; i < 8; ++i) {
      const auto& t = neg.tuples[offset + i];
      CHECK(t.success == scenes[s][i].success);
      CHECK(t.hand.position != scenes[s][i].hand.position);
      before.insert(scenes[s][i].hand.position.x());
      after.insert(t.hand.position.x());
    }
    CHECK(before == after);
    offset += 8;
  }
}

TEST_CASE("training separates joint from marginal and is deterministic") {
  NetworkConfig cfg = small_config();
  cfg.grid_n = 8;
  const auto eps = toy_episodes(cfg, 160, 1);
  TrainConfig tc;
  tc.epochs = 12;
  tc.batch_size = 64;
  tc.learning_rate = 3e-3;
  int callbacks = 0;
  const auto a = train(eps, cfg, tc, 77, [&](const EpochLog&) { ++callbacks; });
  CHECK(callbacks == 4 * 12);
  REQUIRE(a.members.size() == 4);
  CHECK(a.log.size() == 48);
  CHECK(a.validation_scenes == 16);
  double best = 1e9;
  for (const auto& l : a.log) best = std::min(best, l.validation_loss);
  MESSAGE("best validation loss " << best);
  CHECK(best < std::log(2.0) - 0.05);

  const auto b = train(eps, cfg, tc, 77);
  for (int m = 0; m < 4; ++m) {
    const auto ra = a.members[m].layers.flatten_refs();
    const auto rb = b.members[m].layers.flatten_refs();
    for (std::size_t t = 0; t < ra.size(); ++t) CHECK(*ra[t] == *rb[t]);
  }
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) CHECK((a.members[i].layers.hidden_w[0] - a.members[j].layers.hidden_w[0]).norm() > 0);

  auto single = eps;
  single[0].grasps.resize(1);
  const auto c = train(single, cfg, TrainConfig{1, 1, 64}, 77);
  CHECK(c.skipped_scenes == 1);

  auto bad = eps;
  bad[3].voxels.pop_back();
  CHECK_THROWS_AS(train(bad, cfg, tc, 1), Error);
}

TEST_CASE("weight files round-trip") {
  const NetworkConfig cfg = small_config();
  const RatioEnsemble ens = random_ensemble(cfg, 21);
  std::stringstream ss;
  write_ensemble(ss, ens);
  const std::string bytes = ss.str();
  const RatioEnsemble back = read_ensemble(ss);
  REQUIRE(back.members.size() == 4);
  Rng rng(11);
  const auto g = random_grid(cfg.grid_n, rng);
  PoseFeature4D pose;
  pose.yaw = 0.3;
  const PositionPrior box(Vec3(-0.02, -0.02, 0.05), Vec3(0.02, 0.02, 0.09));
  const ObservationRatio a(ens, g, pose, box), b(back, g, pose, box);
  for (int i = 0; i < 20; ++i) {
    const Vec3 x(0.001 * i, -0.001 * i, 0.06);
    const Vec4 q = random_unit(rng);
    CHECK(a.log_ratio(true, x, q) == b.log_ratio(true, x, q));
  }
  std::stringstream again;
  write_ensemble(again, back);
  CHECK(again.str() == bytes);

  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(read_ensemble(truncated), Error);
  std::string corrupt = bytes;
  corrupt[0] = 'X';
  std::stringstream cs(corrupt);
  CHECK_THROWS_AS(read_ensemble(cs), Error);

  RatioEnsemble three = ens;
  three.members.pop_back();
  std::stringstream ts;
  write_ensemble(ts, three);
  CHECK_THROWS_AS(read_ensemble(ts), Error);
}
