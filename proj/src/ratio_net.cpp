#include "gsbi/ratio_net.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <atomic>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "gsbi/binary_io.hpp"
#include "gsbi/error.hpp"

namespace gsbi {

namespace {

constexpr std::uint32_t kNetVersion = 1;
constexpr std::uint32_t kEnsembleVersion = 1;
constexpr int kKernel = 27;
// Seed indices for the split and the fixed validation negatives, kept clear
// of the per-member indices.
constexpr std::uint64_t kSplitIndex = 1ull << 32;
constexpr std::uint64_t kValidationIndex = (1ull << 32) + 1;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename Derived>
auto sigmoid_of(const Eigen::ArrayBase<Derived>& z) {
  using T = typename Derived::Scalar;
  return (T(1) + (-z).exp()).inverse();
}

template <typename T>
Mat<T> silu(const Mat<T>& z) {
  return (z.array() * sigmoid_of(z.array())).matrix();
}

template <typename T>
Mat<T> silu_grad(const Mat<T>& z) {
  const auto s = sigmoid_of(z.array()).eval();
  return (s * (T(1) + z.array() * (T(1) - s))).matrix();
}

template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

struct ConvGeometry {
  int in_side = 0;
  int out_side = 0;
  int in_channels = 0;
  int out_channels = 0;
  std::vector<int> gather;  // out_pos * 27 + k -> input position, -1 for padding
};

std::vector<ConvGeometry> conv_geometry(const NetworkConfig& cfg) {
  std::vector<ConvGeometry> out(4);
  int side = cfg.grid_n;
  int channels = 1;
  for (int s = 0; s < 4; ++s) {
    ConvGeometry& g = out[s];
    g.in_side = side;
    g.out_side = cfg.stage_side(s);
    g.in_channels = channels;
    g.out_channels = cfg.channels[s];
    const int no = g.out_side;
    g.gather.assign(static_cast<std::size_t>(no) * no * no * kKernel, -1);
    for (int oz = 0; oz < no; ++oz)
      for (int oy = 0; oy < no; ++oy)
        for (int ox = 0; ox < no; ++ox) {
          const int p = ox + no * (oy + no * oz);
          for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = 2 * ox - 1 + kx, iy = 2 * oy - 1 + ky, iz = 2 * oz - 1 + kz;
                if (ix < 0 || iy < 0 || iz < 0 || ix >= side || iy >= side || iz >= side) continue;
                g.gather[static_cast<std::size_t>(p) * kKernel + kx + 3 * (ky + 3 * kz)] =
                    ix + side * (iy + side * iz);
              }
        }
    side = g.out_side;
    channels = g.out_channels;
  }
  return out;
}

template <typename T>
Mat<T> im2col(const Mat<T>& a, const ConvGeometry& g) {
  const int positions = g.out_side * g.out_side * g.out_side;
  const int c = g.in_channels;
  Mat<T> col = Mat<T>::Zero(kKernel * c, positions);
  const T* src = a.data();
  T* dst = col.data();
  for (int p = 0; p < positions; ++p) {
    const int* idx = &g.gather[static_cast<std::size_t>(p) * kKernel];
    T* out = dst + static_cast<std::size_t>(p) * kKernel * c;
    for (int k = 0; k < kKernel; ++k) {
      if (idx[k] < 0) continue;
      const T* in = src + static_cast<std::size_t>(idx[k]) * c;
      std::copy(in, in + c, out + k * c);
    }
  }
  return col;
}

template <typename T>
Mat<T> col2im(const Mat<T>& col, const ConvGeometry& g) {
  const int c = g.in_channels;
  Mat<T> a = Mat<T>::Zero(c, g.in_side * g.in_side * g.in_side);
  const T* src = col.data();
  T* dst = a.data();
  for (Eigen::Index p = 0; p < col.cols(); ++p) {
    const int* idx = &g.gather[static_cast<std::size_t>(p) * kKernel];
    const T* in = src + static_cast<std::size_t>(p) * kKernel * c;
    for (int k = 0; k < kKernel; ++k) {
      if (idx[k] < 0) continue;
      T* out = dst + static_cast<std::size_t>(idx[k]) * c;
      for (int i = 0; i < c; ++i) out[i] += in[k * c + i];
    }
  }
  return a;
}

template <typename T>
struct EncoderCache {
  std::array<Mat<T>, 4> col, z, a;
  Mat<T> flat, ze, e;
};

template <typename T>
class Engine {
 public:
  Engine(const NetworkConfig& cfg, const Layers<T>& layers)
      : cfg_(cfg), layers_(layers), geometry_(conv_geometry(cfg)) {}

  Vec<T> encode(std::span<const float> voxels, EncoderCache<T>* cache) const {
    const std::size_t expected = static_cast<std::size_t>(cfg_.grid_n) * cfg_.grid_n * cfg_.grid_n;
    if (voxels.size() != expected) {
      fail(ErrorKind::InvalidInput, "encode_voxels: grid has " + std::to_string(voxels.size()) +
                                        " voxels, network expects " + std::to_string(expected));
    }
    Mat<T> a(1, static_cast<Eigen::Index>(expected));
    for (std::size_t i = 0; i < expected; ++i) a(0, static_cast<Eigen::Index>(i)) = T(voxels[i]);
    for (int s = 0; s < 4; ++s) {
      Mat<T> col = im2col(a, geometry_[s]);
      Mat<T> z = layers_.conv_w[s] * col;
      z.colwise() += layers_.conv_b[s].col(0);
      a = silu(z);
      if (cache) {
        cache->col[s] = std::move(col);
        cache->z[s] = std::move(z);
        cache->a[s] = a;
      }
    }
    Mat<T> flat = Eigen::Map<const Mat<T>>(a.data(), a.size(), 1);
    Mat<T> ze = layers_.embed_w * flat + layers_.embed_b;
    Mat<T> e = silu(ze);
    if (cache) {
      cache->flat = std::move(flat);
      cache->ze = ze;
      cache->e = e;
    }
    return e.col(0);
  }

  void encode_backward(const EncoderCache<T>& c, const Vec<T>& de, Layers<T>& g) const {
    const Mat<T> dze = (de.array() * silu_grad<T>(c.ze).col(0).array()).matrix();
    g.embed_w.noalias() += dze * c.flat.transpose();
    g.embed_b += dze;
    Mat<T> dflat = layers_.embed_w.transpose() * dze;
    Mat<T> da = Eigen::Map<const Mat<T>>(dflat.data(), c.a[3].rows(), c.a[3].cols());
    for (int s = 3; s >= 0; --s) {
      const Mat<T> dz = (da.array() * silu_grad<T>(c.z[s]).array()).matrix();
      g.conv_w[s].noalias() += dz * c.col[s].transpose();
      g.conv_b[s] += dz.rowwise().sum();
      if (s > 0) da = col2im<T>(layers_.conv_w[s].transpose() * dz, geometry_[s]);
    }
  }

  /// Mean BCE over the batch; fills `grad` (accumulating) when non-null.
  T batch_loss(const TrainingBatch& batch, const Eigen::Vector4f& pose_mean,
               const Eigen::Vector4f& pose_scale, Layers<T>* grad) const {
    const std::size_t n_scenes = batch.voxels.size();
    const int n = static_cast<int>(batch.examples.size());
    if (n == 0) fail(ErrorKind::InvalidInput, "empty training batch");
    std::vector<EncoderCache<T>> caches(grad ? n_scenes : 0);
    std::vector<Vec<T>> emb(n_scenes);
    for (std::size_t s = 0; s < n_scenes; ++s) {
      emb[s] = encode(batch.voxels[s], grad ? &caches[s] : nullptr);
    }
    const int e_dim = cfg_.embedding;
    Mat<T> x(cfg_.head_inputs(), n);
    Vec<T> y(n);
    for (int t = 0; t < n; ++t) {
      const TrainingExample& ex = batch.examples[t];
      const Eigen::Vector4d& p = batch.poses[ex.scene];
      x.col(t).head(e_dim) = emb[ex.scene];
      for (int i = 0; i < 4; ++i) x(e_dim + i, t) = T((p[i] - pose_mean[i]) / pose_scale[i]);
      x(e_dim + 4, t) = ex.success ? T(1) : T(0);
      for (int i = 0; i < 3; ++i) x(e_dim + 5 + i, t) = T(ex.u[i]);
      for (int i = 0; i < 4; ++i) x(e_dim + 8 + i, t) = T(ex.q[i]);
      y[t] = ex.label ? T(1) : T(0);
    }
    Mat<T> z1 = layers_.hidden_w[0] * x;
    z1.colwise() += layers_.hidden_b[0].col(0);
    const Mat<T> a1 = silu(z1);
    Mat<T> z2 = layers_.hidden_w[1] * a1;
    z2.colwise() += layers_.hidden_b[1].col(0);
    const Mat<T> a2 = silu(z2);
    Mat<T> out = layers_.out_w * a2;
    out.array() += layers_.out_b(0, 0);

    T loss = 0;
    Mat<T> dout(1, n);
    for (int t = 0; t < n; ++t) {
      const T a = out(0, t);
      loss += y[t] > T(0.5) ? softplus(-a) : softplus(a);
      dout(0, t) = (T(1) / (T(1) + std::exp(-a)) - y[t]) / T(n);
    }
    loss /= T(n);
    if (!grad) return loss;

    Layers<T>& g = *grad;
    g.out_w.noalias() += dout * a2.transpose();
    g.out_b(0, 0) += dout.sum();
    const Mat<T> dz2 = ((layers_.out_w.transpose() * dout).array() * silu_grad<T>(z2).array()).matrix();
    g.hidden_w[1].noalias() += dz2 * a1.transpose();
    g.hidden_b[1] += dz2.rowwise().sum();
    const Mat<T> dz1 =
        ((layers_.hidden_w[1].transpose() * dz2).array() * silu_grad<T>(z1).array()).matrix();
    g.hidden_w[0].noalias() += dz1 * x.transpose();
    g.hidden_b[0] += dz1.rowwise().sum();
    const Mat<T> dx = layers_.hidden_w[0].leftCols(e_dim).transpose() * dz1;
    std::vector<Vec<T>> de(n_scenes, Vec<T>::Zero(e_dim));
    for (int t = 0; t < n; ++t) de[batch.examples[t].scene] += dx.col(t);
    for (std::size_t s = 0; s < n_scenes; ++s) encode_backward(caches[s], de[s], g);
    return loss;
  }

 private:
  const NetworkConfig& cfg_;
  const Layers<T>& layers_;
  std::vector<ConvGeometry> geometry_;
};

std::vector<float> grid_as_float(const TsdfGrid& grid) {
  const auto v = grid.values();
  return std::vector<float>(v.begin(), v.end());
}

Layers<float> shaped_layers(const NetworkConfig& cfg) {
  Layers<float> l;
  int in = 1;
  for (int s = 0; s < 4; ++s) {
    l.conv_w[s] = Mat<float>::Zero(cfg.channels[s], kKernel * in);
    l.conv_b[s] = Mat<float>::Zero(cfg.channels[s], 1);
    in = cfg.channels[s];
  }
  l.embed_w = Mat<float>::Zero(cfg.embedding, cfg.flat_size());
  l.embed_b = Mat<float>::Zero(cfg.embedding, 1);
  l.hidden_w[0] = Mat<float>::Zero(cfg.hidden, cfg.head_inputs());
  l.hidden_b[0] = Mat<float>::Zero(cfg.hidden, 1);
  l.hidden_w[1] = Mat<float>::Zero(cfg.hidden, cfg.hidden);
  l.hidden_b[1] = Mat<float>::Zero(cfg.hidden, 1);
  l.out_w = Mat<float>::Zero(1, cfg.hidden);
  l.out_b = Mat<float>::Zero(1, 1);
  return l;
}

// Prepared training scene: voxels shared with the episode, inputs scaled.
struct PreparedScene {
  std::span<const float> voxels;
  Eigen::Vector4d pose;
  std::vector<Vec3> u;
  std::vector<Vec4> q;
  std::vector<bool> success;
};

PreparedScene prepare(const EpisodeRecord& ep) {
  PreparedScene s;
  s.voxels = ep.voxels;
  s.pose = ep.pose.as_vector();
  for (const GraspAttempt& g : ep.grasps) {
    s.u.push_back(scaled_position(ep, g.hand.position));
    s.q.push_back(g.hand.orientation.coeffs());
    s.success.push_back(g.success);
  }
  return s;
}

void append_scene(TrainingBatch& batch, const PreparedScene& s, const std::vector<std::size_t>& perm) {
  const std::size_t idx = batch.voxels.size();
  batch.voxels.push_back(s.voxels);
  batch.poses.push_back(s.pose);
  for (std::size_t i = 0; i < s.u.size(); ++i) {
    batch.examples.push_back({idx, s.success[i], s.u[i], s.q[i], true});
    batch.examples.push_back({idx, s.success[i], s.u[perm[i]], s.q[perm[i]], false});
  }
}

struct Adam {
  Layers<float> m, v;
  long step = 0;
};

void adam_update(Layers<float>& params, const Layers<float>& grad, Adam& state,
                 const TrainConfig& cfg) {
  ++state.step;
  const double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const float lr = static_cast<float>(cfg.learning_rate * std::sqrt(b2t) / b1t);
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float eps = static_cast<float>(cfg.epsilon * std::sqrt(b2t));
  auto p = params.flatten_refs();
  auto g = grad.flatten_refs();
  auto m = state.m.flatten_refs();
  auto v = state.v.flatten_refs();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i]->array() = b1 * m[i]->array() + (1.0f - b1) * g[i]->array();
    v[i]->array() = b2 * v[i]->array() + (1.0f - b2) * g[i]->array().square();
    p[i]->array() -= lr * m[i]->array() / (v[i]->array().sqrt() + eps);
  }
}

double scenes_loss(const ClassifierParams& params, const std::vector<const PreparedScene*>& scenes,
                   const std::vector<std::vector<std::size_t>>& perms, int batch_size) {
  const Engine<float> engine(params.config, params.layers);
  double total = 0.0;
  std::size_t count = 0;
  std::size_t i = 0;
  while (i < scenes.size()) {
    TrainingBatch batch;
    while (i < scenes.size() && static_cast<int>(batch.examples.size()) < batch_size) {
      append_scene(batch, *scenes[i], perms[i]);
      ++i;
    }
    const double l = engine.batch_loss(batch, params.pose_mean, params.pose_scale, nullptr);
    total += l * static_cast<double>(batch.examples.size());
    count += batch.examples.size();
  }
  return count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

void write_u32(std::ostream& os, std::uint32_t v) { io::write<std::uint32_t>(os, v); }
std::uint32_t read_u32(std::istream& is) { return io::read<std::uint32_t>(is); }

struct TensorEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
};

std::vector<TensorEntry> tensor_table(const ClassifierParams& p) {
  std::vector<TensorEntry> table;
  p.layers.visit([&](const std::string& name, const Mat<float>& m) {
    if (m.cols() == 1 && name.ends_with(".bias")) {
      table.push_back({name, {static_cast<std::uint32_t>(m.rows())}});
    } else {
      table.push_back({name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}});
    }
  });
  table.push_back({"pose.mean", {4}});
  table.push_back({"pose.scale", {4}});
  return table;
}

// Row-major f32 blob.
void write_matrix(std::ostream& os, const Mat<float>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) io::write<float>(os, m(r, c));
}

void read_matrix(std::istream& is, Mat<float>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = io::read<float>(is);
}

}  // namespace

// ---------------------------------------------------------------------------

int NetworkConfig::stage_side(int stage) const {
  int side = grid_n;
  for (int s = 0; s <= stage; ++s) side = (side - 1) / 2 + 1;  // k3 s2 p1
  return side;
}

int NetworkConfig::flat_size() const {
  const int side = stage_side(3);
  return channels[3] * side * side * side;
}

void NetworkConfig::validate() const {
  if (grid_n < 2) fail(ErrorKind::InvalidInput, "network grid size must be >= 2");
  for (int c : channels) {
    if (c < 1) fail(ErrorKind::InvalidInput, "conv channels must be positive");
  }
  if (embedding < 1 || hidden < 1) fail(ErrorKind::InvalidInput, "layer widths must be positive");
}

bool ClassifierParams::all_finite() const {
  bool ok = pose_mean.allFinite() && pose_scale.allFinite();
  layers.visit([&](const std::string&, const Mat<float>& m) { ok = ok && m.allFinite(); });
  return ok;
}

std::size_t ClassifierParams::parameter_count() const {
  std::size_t n = 0;
  layers.visit([&](const std::string&, const Mat<float>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

ClassifierParams init_classifier(const NetworkConfig& config, Rng& rng, bool zero_output) {
  config.validate();
  ClassifierParams p;
  p.config = config;
  p.layers = shaped_layers(config);
  auto fill = [&](Mat<float>& w, Mat<float>& b, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(dist(rng));
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<float>(dist(rng));
  };
  for (int s = 0; s < 4; ++s) {
    fill(p.layers.conv_w[s], p.layers.conv_b[s], static_cast<int>(p.layers.conv_w[s].cols()));
  }
  fill(p.layers.embed_w, p.layers.embed_b, config.flat_size());
  fill(p.layers.hidden_w[0], p.layers.hidden_b[0], config.head_inputs());
  fill(p.layers.hidden_w[1], p.layers.hidden_b[1], config.hidden);
  if (zero_output) {
    p.layers.out_w.setZero();
    p.layers.out_b.setZero();
  } else {
    fill(p.layers.out_w, p.layers.out_b, config.hidden);
  }
  return p;
}

Eigen::VectorXd encode_voxels(const ClassifierParams& params, std::span<const float> voxels) {
  const Layers<double> layers = params.layers.cast<double>();
  const Engine<double> engine(params.config, layers);
  return engine.encode(voxels, nullptr);
}

Eigen::VectorXd encode_voxels(const ClassifierParams& params, const TsdfGrid& grid) {
  if (grid.n() != params.config.grid_n) {
    fail(ErrorKind::InvalidInput, "encode_voxels: grid resolution " + std::to_string(grid.n()) +
                                      " does not match the network (" +
                                      std::to_string(params.config.grid_n) + ")");
  }
  return encode_voxels(params, grid_as_float(grid));
}

double head_logit(const ClassifierParams& params, const Eigen::VectorXd& embedding,
                  const HeadInput& in) {
  const NetworkConfig& cfg = params.config;
  if (embedding.size() != cfg.embedding) fail(ErrorKind::InvalidInput, "embedding has the wrong size");
  if (!in.u.allFinite() || (in.u.array().abs() > 1.0 + 1e-9).any()) {
    fail(ErrorKind::InvalidInput, "hand position must be scaled into [-1, 1]^3");
  }
  if (!in.q.allFinite() || !in.pose.allFinite()) fail(ErrorKind::InvalidInput, "non-finite head input");
  Eigen::VectorXd x(cfg.head_inputs());
  x.head(cfg.embedding) = embedding;
  for (int i = 0; i < 4; ++i) x[cfg.embedding + i] = (in.pose[i] - params.pose_mean[i]) / params.pose_scale[i];
  x[cfg.embedding + 4] = in.success ? 1.0 : 0.0;
  x.segment<3>(cfg.embedding + 5) = in.u;
  x.segment<4>(cfg.embedding + 8) = in.q;
  const auto& l = params.layers;
  const Mat<double> a1 = silu<double>(l.hidden_w[0].cast<double>() * x + l.hidden_b[0].cast<double>());
  const Mat<double> a2 = silu<double>(l.hidden_w[1].cast<double>() * a1 + l.hidden_b[1].cast<double>());
  return (l.out_w.cast<double>() * a2)(0, 0) + static_cast<double>(l.out_b(0, 0));
}

double sigmoid(double a) {
  if (a >= 0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

double logit(double x) {
  if (!(x > 0.0 && x < 1.0)) fail(ErrorKind::Domain, "logit: argument must lie in (0, 1)");
  return std::log(x) - std::log1p(-x);
}

double forward(const ClassifierParams& params, const Eigen::VectorXd& embedding,
               const HeadInput& in) {
  return sigmoid(head_logit(params, embedding, in));
}

double log_ratio(const ClassifierParams& params, const Eigen::VectorXd& embedding,
                 const HeadInput& in) {
  // logit(sigmoid(a)) = a; returning a avoids the round trip through (0, 1).
  return head_logit(params, embedding, in);
}

double log_mean_exp(std::span<const double> values) {
  if (values.empty()) fail(ErrorKind::InvalidInput, "log_mean_exp of an empty set");
  const double m = *std::max_element(values.begin(), values.end());
  if (std::isnan(m)) return m;
  if (std::isinf(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s / static_cast<double>(values.size()));
}

void RatioEnsemble::validate() const {
  if (members.size() != static_cast<std::size_t>(kEnsembleSize)) {
    fail(ErrorKind::InvalidInput, "ensemble must have exactly " + std::to_string(kEnsembleSize) +
                                      " members, got " + std::to_string(members.size()));
  }
  for (const auto& m : members) {
    if (!m.all_finite()) fail(ErrorKind::Numeric, "ensemble member has non-finite weights");
  }
}

// ---------------------------------------------------------------------------

ObservationRatio::ObservationRatio(const RatioEnsemble& ensemble, const TsdfGrid& grid,
                                   const PoseFeature4D& pose, const PositionPrior& box)
    : box_(box) {
  if (ensemble.members.empty()) fail(ErrorKind::InvalidInput, "empty ensemble");
  for (const auto& m : ensemble.members) {
    if (!m.all_finite()) fail(ErrorKind::Numeric, "ensemble member has non-finite weights");
  }
  const std::vector<float> voxels = grid.n() == ensemble.members[0].config.grid_n
                                        ? grid_as_float(grid)
                                        : std::vector<float>{};
  for (const ClassifierParams& p : ensemble.members) {
    if (grid.n() != p.config.grid_n) fail(ErrorKind::InvalidInput, "grid resolution does not match the network");
    const NetworkConfig& cfg = p.config;
    const Layers<double> l = p.layers.cast<double>();
    const Engine<double> engine(cfg, l);
    const Eigen::VectorXd e = engine.encode(voxels, nullptr);
    Eigen::Vector4d ps;
    for (int i = 0; i < 4; ++i) ps[i] = (pose.as_vector()[i] - p.pose_mean[i]) / p.pose_scale[i];
    Member m;
    const Eigen::MatrixXd& w0 = l.hidden_w[0];
    const Eigen::VectorXd base = w0.leftCols(cfg.embedding) * e +
                                 w0.middleCols(cfg.embedding, 4) * ps + l.hidden_b[0].col(0);
    m.bias0[0] = base;
    m.bias0[1] = base + w0.col(cfg.embedding + 4);
    m.hand_w = w0.middleCols(cfg.embedding + 5, 7);
    m.w1 = l.hidden_w[1];
    m.b1 = l.hidden_b[1].col(0);
    m.w_out = l.out_w.row(0).transpose();
    m.b_out = l.out_b(0, 0);
    members_.push_back(std::move(m));
  }
}

Eigen::Matrix<double, 7, 1> ObservationRatio::hand_input(const Vec3& position, const Vec4& q) const {
  const Vec3 u = inverse_box_bijection(position, box_);
  if (!u.allFinite() || (u.array().abs() > 1.0 + 1e-9).any()) {
    fail(ErrorKind::InvalidInput, "hand position outside the object box");
  }
  Eigen::Matrix<double, 7, 1> x;
  x.head<3>() = u;
  if (!q.allFinite()) fail(ErrorKind::InvalidInput, "non-finite quaternion");
  x.tail<4>() = q;
  return x;
}

double ObservationRatio::eval(const Member& m, bool success, const Eigen::Matrix<double, 7, 1>& x,
                              Eigen::Matrix<double, 7, 1>* grad) const {
  const Eigen::VectorXd z1 = m.bias0[success ? 1 : 0] + m.hand_w * x;
  const Eigen::VectorXd a1 = silu<double>(z1);
  const Eigen::VectorXd z2 = m.w1 * a1 + m.b1;
  const Eigen::VectorXd a2 = silu<double>(z2);
  const double out = m.w_out.dot(a2) + m.b_out;
  if (grad) {
    const Eigen::VectorXd g2 = (m.w_out.array() * silu_grad<double>(z2).col(0).array()).matrix();
    const Eigen::VectorXd g1 = ((m.w1.transpose() * g2).array() * silu_grad<double>(z1).col(0).array()).matrix();
    *grad = m.hand_w.transpose() * g1;
  }
  return out;
}

double ObservationRatio::member_log_ratio(std::size_t i, bool success, const ProductPoint& h) const {
  return eval(members_.at(i), success, hand_input(h.position, h.orientation.coeffs()), nullptr);
}

double ObservationRatio::log_ratio(bool success, const ProductPoint& h) const {
  return log_ratio(success, h.position, h.orientation.coeffs());
}

ObservationRatio::Result ObservationRatio::grad_wrt_hand(bool success, const ProductPoint& h) const {
  return grad_wrt_hand(success, h.position, h.orientation.coeffs());
}

double ObservationRatio::log_ratio(bool success, const Vec3& position, const Vec4& q) const {
  const auto x = hand_input(position, q);
  std::array<double, 16> buf{};
  std::vector<double> heap;
  std::span<double> v;
  if (members_.size() <= buf.size()) {
    v = std::span<double>(buf.data(), members_.size());
  } else {
    heap.resize(members_.size());
    v = heap;
  }
  for (std::size_t i = 0; i < members_.size(); ++i) v[i] = eval(members_[i], success, x, nullptr);
  return log_mean_exp(v);
}

ObservationRatio::Result ObservationRatio::grad_wrt_hand(bool success, const Vec3& position,
                                                         const Vec4& q) const {
  const auto x = hand_input(position, q);
  std::vector<double> v(members_.size());
  std::vector<Eigen::Matrix<double, 7, 1>> g(members_.size());
  for (std::size_t i = 0; i < members_.size(); ++i) v[i] = eval(members_[i], success, x, &g[i]);
  Result r;
  r.value = log_mean_exp(v);
  Eigen::Matrix<double, 7, 1> total = Eigen::Matrix<double, 7, 1>::Zero();
  const double inv = 1.0 / static_cast<double>(members_.size());
  for (std::size_t i = 0; i < members_.size(); ++i) total += std::exp(v[i] - r.value) * inv * g[i];
  // u = (x - c) / w, so d/dx = d/du / w.
  r.gradient.position = total.head<3>().cwiseQuotient(box_.half_width());
  r.gradient.orientation = total.tail<4>();
  return r;
}

// ---------------------------------------------------------------------------

double loss_and_gradient(const ClassifierParams& params, const TrainingBatch& batch,
                         Layers<double>* grad) {
  const Layers<double> layers = params.layers.cast<double>();
  const Engine<double> engine(params.config, layers);
  if (grad) *grad = layers.zeros_like();
  return engine.batch_loss(batch, params.pose_mean, params.pose_scale, grad);
}

std::vector<std::size_t> derangement(std::size_t n, Rng& rng) {
  if (n < 2) return {};
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  // Sattolo's algorithm draws a uniform n-cycle, which has no fixed point.
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(p[i], p[j]);
  }
  return p;
}

NegativeBatch make_negatives(std::span<const std::vector<GraspAttempt>> scenes, Rng& rng) {
  NegativeBatch out;
  for (const auto& grasps : scenes) {
    if (grasps.size() < 2) {
      ++out.skipped_scenes;
      continue;
    }
    const auto perm = derangement(grasps.size(), rng);
    for (std::size_t i = 0; i < grasps.size(); ++i) {
      out.tuples.push_back({grasps[perm[i]].hand, grasps[i].success});
    }
  }
  return out;
}

Vec3 scaled_position(const EpisodeRecord& episode, const Vec3& position) {
  return inverse_box_bijection(position, PositionPrior(episode.aabb.low, episode.aabb.high));
}

double evaluate_loss(const ClassifierParams& params, std::span<const EpisodeRecord> episodes,
                     Rng& rng) {
  std::vector<PreparedScene> prepared;
  for (const auto& ep : episodes) {
    if (ep.grasps.size() >= 2) prepared.push_back(prepare(ep));
  }
  std::vector<const PreparedScene*> ptrs;
  std::vector<std::vector<std::size_t>> perms;
  for (const auto& s : prepared) {
    ptrs.push_back(&s);
    perms.push_back(derangement(s.u.size(), rng));
  }
  return scenes_loss(params, ptrs, perms, 256);
}

TrainResult train(std::span<const EpisodeRecord> episodes, const NetworkConfig& net,
                  const TrainConfig& config, std::uint64_t master_seed, const EpochCallback& on_epoch) {
  net.validate();
  if (config.members < 1 || config.epochs < 1 || config.batch_size < 2) {
    fail(ErrorKind::InvalidInput, "train: members, epochs and batch size must be positive");
  }
  if (!(config.validation_fraction >= 0.0 && config.validation_fraction < 1.0)) {
    fail(ErrorKind::InvalidInput, "train: validation fraction must lie in [0, 1)");
  }
  const std::size_t voxels = static_cast<std::size_t>(net.grid_n) * net.grid_n * net.grid_n;
  TrainResult result;
  std::vector<PreparedScene> scenes;
  for (const auto& ep : episodes) {
    if (ep.grid_n != net.grid_n || ep.voxels.size() != voxels) {
      fail(ErrorKind::Schema, "episode " + std::to_string(ep.id) + ": grid does not match the network");
    }
    if (ep.grasps.size() < 2) {
      ++result.skipped_scenes;
      continue;
    }
    scenes.push_back(prepare(ep));
  }
  if (scenes.size() < 2) fail(ErrorKind::InvalidInput, "train: need at least two usable episodes");

  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  {
    Rng split = make_rng(master_seed, Stream::TrainShuffle, kSplitIndex);
    std::shuffle(order.begin(), order.end(), split);
  }
  std::size_t n_val = static_cast<std::size_t>(std::llround(config.validation_fraction * scenes.size()));
  if (config.validation_fraction > 0.0) n_val = std::clamp<std::size_t>(n_val, 1, scenes.size() - 1);
  std::vector<const PreparedScene*> train_set, val_set;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < order.size() - n_val ? train_set : val_set).push_back(&scenes[order[i]]);
  }
  result.train_scenes = train_set.size();
  result.validation_scenes = val_set.size();

  Eigen::Vector4d mean = Eigen::Vector4d::Zero(), sq = Eigen::Vector4d::Zero();
  for (const auto* s : train_set) {
    mean += s->pose;
    sq += s->pose.cwiseAbs2();
  }
  mean /= static_cast<double>(train_set.size());
  Eigen::Vector4d scale = (sq / static_cast<double>(train_set.size()) - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  for (int i = 0; i < 4; ++i) {
    if (!(scale[i] > 1e-9)) scale[i] = 1.0;
  }

  std::vector<std::vector<std::size_t>> val_perms;
  {
    Rng vr = make_rng(master_seed, Stream::TrainShuffle, kValidationIndex);
    for (const auto* s : val_set) val_perms.push_back(derangement(s->u.size(), vr));
  }

  result.members.resize(static_cast<std::size_t>(config.members));
  std::vector<std::vector<EpochLog>> logs(result.members.size());
  std::mutex callback_mutex;

  auto run_member = [&](int member) {
    Rng init = make_rng(master_seed, Stream::TrainInit, static_cast<std::uint64_t>(member));
    Rng shuffle = make_rng(master_seed, Stream::TrainShuffle, static_cast<std::uint64_t>(member));
    ClassifierParams params = init_classifier(net, init);
    params.pose_mean = mean.cast<float>();
    params.pose_scale = scale.cast<float>();
    Adam adam{params.layers.zeros_like(), params.layers.zeros_like(), 0};
    ClassifierParams best = params;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<const PreparedScene*> epoch_order = train_set;
    Layers<float> grad = params.layers.zeros_like();
    const Engine<float> engine(params.config, params.layers);  // sees the updates in place

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::shuffle(epoch_order.begin(), epoch_order.end(), shuffle);
      double total = 0.0;
      std::size_t count = 0;
      std::size_t i = 0;
      while (i < epoch_order.size()) {
        TrainingBatch batch;
        while (i < epoch_order.size() && static_cast<int>(batch.examples.size()) < config.batch_size) {
          append_scene(batch, *epoch_order[i], derangement(epoch_order[i]->u.size(), shuffle));
          ++i;
        }
        grad.visit([](const std::string&, Mat<float>& m) { m.setZero(); });
        const double l = engine.batch_loss(batch, params.pose_mean, params.pose_scale, &grad);
        if (!std::isfinite(l)) {
          fail(ErrorKind::Divergence, "member " + std::to_string(member) + " epoch " +
                                          std::to_string(epoch) + ": training loss is not finite");
        }
        adam_update(params.layers, grad, adam, config);
        total += l * static_cast<double>(batch.examples.size());
        count += batch.examples.size();
      }
      EpochLog entry;
      entry.member = member;
      entry.epoch = epoch;
      entry.train_loss = total / static_cast<double>(count);
      entry.validation_loss = val_set.empty() ? entry.train_loss
                                              : scenes_loss(params, val_set, val_perms, config.batch_size);
      if (!params.all_finite() || !std::isfinite(entry.validation_loss)) {
        fail(ErrorKind::Divergence, "member " + std::to_string(member) + " epoch " +
                                        std::to_string(epoch) + ": weights or loss diverged");
      }
      if (val_set.empty() || entry.validation_loss < best_val) {
        best_val = entry.validation_loss;
        best = params;
      }
      logs[static_cast<std::size_t>(member)].push_back(entry);
      if (on_epoch) {
        std::lock_guard<std::mutex> lock(callback_mutex);
        on_epoch(entry);
      }
    }
    result.members[static_cast<std::size_t>(member)] = std::move(best);
  };

  const int threads = std::clamp(config.threads, 1, config.members);
  if (threads == 1) {
    for (int m = 0; m < config.members; ++m) run_member(m);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(config.members));
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (int m = next++; m < config.members; m = next++) {
          try {
            run_member(m);
          } catch (...) {
            errors[static_cast<std::size_t>(m)] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (auto& l : logs) result.log.insert(result.log.end(), l.begin(), l.end());
  return result;
}

// ---------------------------------------------------------------------------

void write_classifier(std::ostream& os, const ClassifierParams& params) {
  const NetworkConfig& c = params.config;
  io::write_magic(os, "GSBI-NET");
  write_u32(os, kNetVersion);
  write_u32(os, static_cast<std::uint32_t>(c.grid_n));
  for (int ch : c.channels) write_u32(os, static_cast<std::uint32_t>(ch));
  write_u32(os, static_cast<std::uint32_t>(c.embedding));
  write_u32(os, static_cast<std::uint32_t>(c.hidden));
  const auto table = tensor_table(params);
  write_u32(os, static_cast<std::uint32_t>(table.size()));
  for (const auto& t : table) {
    write_u32(os, static_cast<std::uint32_t>(t.name.size()));
    io::write_magic(os, t.name);
    write_u32(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) write_u32(os, d);
  }
  params.layers.visit([&](const std::string&, const Mat<float>& m) { write_matrix(os, m); });
  for (int i = 0; i < 4; ++i) io::write<float>(os, params.pose_mean[i]);
  for (int i = 0; i < 4; ++i) io::write<float>(os, params.pose_scale[i]);
}

ClassifierParams read_classifier(std::istream& is) {
  io::expect_magic(is, "GSBI-NET");
  const auto version = read_u32(is);
  if (version != kNetVersion) fail(ErrorKind::Schema, "unsupported network file version " + std::to_string(version));
  NetworkConfig c;
  c.grid_n = static_cast<int>(read_u32(is));
  for (int& ch : c.channels) ch = static_cast<int>(read_u32(is));
  c.embedding = static_cast<int>(read_u32(is));
  c.hidden = static_cast<int>(read_u32(is));
  if (c.grid_n > 1024 || c.embedding > 1 << 16 || c.hidden > 1 << 16 ||
      std::any_of(c.channels.begin(), c.channels.end(), [](int ch) { return ch > 1 << 14; })) {
    fail(ErrorKind::Schema, "network file: implausible layer sizes");
  }
  c.validate();
  ClassifierParams p;
  p.config = c;
  p.layers = shaped_layers(c);
  const auto expected = tensor_table(p);
  const auto count = read_u32(is);
  if (count != expected.size()) fail(ErrorKind::Schema, "network file: unexpected tensor count");
  for (const auto& t : expected) {
    const auto len = read_u32(is);
    if (len > 256) fail(ErrorKind::Schema, "network file: tensor name too long");
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) fail(ErrorKind::Io, "unexpected end of file");
    const auto rank = read_u32(is);
    if (name != t.name || rank != t.dims.size()) {
      fail(ErrorKind::Schema, "network file: expected tensor " + t.name + ", found " + name);
    }
    for (auto d : t.dims) {
      if (read_u32(is) != d) fail(ErrorKind::Schema, "network file: tensor " + t.name + " has wrong shape");
    }
  }
  p.layers.visit([&](const std::string&, Mat<float>& m) { read_matrix(is, m); });
  for (int i = 0; i < 4; ++i) p.pose_mean[i] = io::read<float>(is);
  for (int i = 0; i < 4; ++i) p.pose_scale[i] = io::read<float>(is);
  if (!p.all_finite()) fail(ErrorKind::Schema, "network file contains non-finite weights");
  return p;
}

void write_ensemble(std::ostream& os, const RatioEnsemble& ensemble) {
  std::vector<std::string> blobs;
  for (const auto& m : ensemble.members) {
    std::ostringstream ss(std::ios::binary);
    write_classifier(ss, m);
    blobs.push_back(std::move(ss).str());
  }
  io::write_magic(os, "GSBI-ENS");
  write_u32(os, kEnsembleVersion);
  write_u32(os, static_cast<std::uint32_t>(blobs.size()));
  std::uint64_t offset = 8 + 4 + 4 + 16 * blobs.size();
  for (const auto& b : blobs) {
    io::write<std::uint64_t>(os, offset);
    io::write<std::uint64_t>(os, b.size());
    offset += b.size();
  }
  for (const auto& b : blobs) {
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!os) fail(ErrorKind::Io, "write failed");
  }
}

RatioEnsemble read_ensemble(std::istream& is) {
  const std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::istringstream hs(data, std::ios::binary);
  io::expect_magic(hs, "GSBI-ENS");
  const auto version = read_u32(hs);
  if (version != kEnsembleVersion) fail(ErrorKind::Schema, "unsupported ensemble file version " + std::to_string(version));
  const auto count = read_u32(hs);
  if (count == 0 || count > 64) fail(ErrorKind::Schema, "ensemble file: implausible member count");
  RatioEnsemble ens;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto offset = io::read<std::uint64_t>(hs);
    const auto size = io::read<std::uint64_t>(hs);
    if (offset > data.size() || size > data.size() - offset) {
      fail(ErrorKind::Schema, "ensemble file: member " + std::to_string(i) + " lies outside the file");
    }
    std::istringstream ms(data.substr(offset, size), std::ios::binary);
    ens.members.push_back(read_classifier(ms));
  }
  ens.validate();
  return ens;
}

void save_ensemble(const std::string& path, const RatioEnsemble& ensemble) {
  const std::string tmp = path + ".partial";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::Io, "cannot open " + tmp + " for writing");
    write_ensemble(os, ensemble);
    os.flush();
    if (!os) fail(ErrorKind::Io, "write to " + tmp + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename " + tmp + ": " + ec.message());
}

RatioEnsemble load_ensemble(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open " + path);
  return read_ensemble(is);
}

}  // namespace gsbi
