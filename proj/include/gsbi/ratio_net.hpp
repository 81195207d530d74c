#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gsbi/distributions.hpp"
#include "gsbi/episode.hpp"
#include "gsbi/manifold.hpp"
#include "gsbi/random.hpp"
#include "gsbi/tsdf.hpp"

namespace gsbi {

/// Classifier d(S, h, p, V): a 3D conv encoder of V (four stride-2 stages and
/// one dense projection) feeding a two-layer head with the pose feature, the
/// outcome bit, the scaled position and the raw quaternion.
struct NetworkConfig {
  int grid_n = 40;
  std::array<int, 4> channels{16, 32, 64, 128};
  int embedding = 64;
  int hidden = 256;

  /// Spatial side length after conv stage `stage` (0-based).
  int stage_side(int stage) const;
  int flat_size() const;
  /// embedding | pose (4) | S (1) | u (3) | q (4)
  int head_inputs() const { return embedding + 12; }
  void validate() const;
};

inline constexpr int kEnsembleSize = 4;

/// Weight tensors in declaration order. Conv weights are (out x 27 in), with
/// the 27 kernel offsets as the slow index.
template <typename T>
struct Layers {
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

  std::array<Matrix, 4> conv_w, conv_b;
  Matrix embed_w, embed_b;
  std::array<Matrix, 2> hidden_w, hidden_b;
  Matrix out_w, out_b;

  template <typename F>
  void visit(F&& f) {
    for (int i = 0; i < 4; ++i) {
      f("conv" + std::to_string(i) + ".weight", conv_w[i]);
      f("conv" + std::to_string(i) + ".bias", conv_b[i]);
    }
    f(std::string("embed.weight"), embed_w);
    f(std::string("embed.bias"), embed_b);
    for (int i = 0; i < 2; ++i) {
      f("hidden" + std::to_string(i) + ".weight", hidden_w[i]);
      f("hidden" + std::to_string(i) + ".bias", hidden_b[i]);
    }
    f(std::string("out.weight"), out_w);
    f(std::string("out.bias"), out_b);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<Layers*>(this)->visit([&](const std::string& name, Matrix& m) {
      f(name, static_cast<const Matrix&>(m));
    });
  }

  template <typename U>
  Layers<U> cast() const {
    Layers<U> out;
    auto src = this->flatten_refs();
    auto dst = out.flatten_refs();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
    return out;
  }

  Layers zeros_like() const {
    Layers out = *this;
    out.visit([](const std::string&, Matrix& m) { m.setZero(); });
    return out;
  }

  std::vector<Matrix*> flatten_refs() {
    std::vector<Matrix*> refs;
    visit([&](const std::string&, Matrix& m) { refs.push_back(&m); });
    return refs;
  }
  std::vector<const Matrix*> flatten_refs() const {
    std::vector<const Matrix*> refs;
    visit([&](const std::string&, const Matrix& m) { refs.push_back(&m); });
    return refs;
  }
};

struct ClassifierParams {
  NetworkConfig config;
  Layers<float> layers;
  // Pose feature standardization fitted on the training set.
  Eigen::Vector4f pose_mean = Eigen::Vector4f::Zero();
  Eigen::Vector4f pose_scale = Eigen::Vector4f::Ones();

  bool all_finite() const;
  std::size_t parameter_count() const;
};

/// Fan-in uniform initialization; the output layer starts at zero unless
/// `zero_output` is false.
ClassifierParams init_classifier(const NetworkConfig& config, Rng& rng, bool zero_output = true);

struct HeadInput {
  bool success = true;
  Vec3 u = Vec3::Zero();  // position scaled into [-1, 1]^3
  Vec4 q = Vec4(0, 0, 0, 1);
  Eigen::Vector4d pose = Eigen::Vector4d::Zero();  // raw pose feature
};

Eigen::VectorXd encode_voxels(const ClassifierParams& params, std::span<const float> voxels);
Eigen::VectorXd encode_voxels(const ClassifierParams& params, const TsdfGrid& grid);

/// Pre-sigmoid activation a; d = sigmoid(a) and log r = a.
double head_logit(const ClassifierParams& params, const Eigen::VectorXd& embedding,
                  const HeadInput& in);
double forward(const ClassifierParams& params, const Eigen::VectorXd& embedding,
               const HeadInput& in);
double log_ratio(const ClassifierParams& params, const Eigen::VectorXd& embedding,
                 const HeadInput& in);

double sigmoid(double a);
/// log(x / (1 - x)) for x in (0, 1).
double logit(double x);
double log_mean_exp(std::span<const double> values);

struct RatioEnsemble {
  std::vector<ClassifierParams> members;

  void validate() const;
};

/// Ensemble bound to a single observation (V, p) and its position box;
/// embeddings and the head's observation-dependent terms are precomputed.
class ObservationRatio {
 public:
  ObservationRatio(const RatioEnsemble& ensemble, const TsdfGrid& grid,
                   const PoseFeature4D& pose, const PositionPrior& box);

  struct Result {
    double value = 0.0;
    HandGradient gradient;  // with respect to workspace position and raw q
  };

  std::size_t size() const { return members_.size(); }
  const PositionPrior& box() const { return box_; }

  double member_log_ratio(std::size_t i, bool success, const ProductPoint& h) const;
  /// log of the mean member ratio.
  double log_ratio(bool success, const ProductPoint& h) const;
  Result grad_wrt_hand(bool success, const ProductPoint& h) const;
  // The network sees the raw quaternion; these accept any q.
  double log_ratio(bool success, const Vec3& position, const Vec4& q) const;
  Result grad_wrt_hand(bool success, const Vec3& position, const Vec4& q) const;

 private:
  struct Member {
    std::array<Eigen::VectorXd, 2> bias0;  // first hidden pre-activation minus hand terms, per S
    Eigen::MatrixXd hand_w;                // hidden x 7 (u then q)
    Eigen::MatrixXd w1;
    Eigen::VectorXd b1;
    Eigen::VectorXd w_out;
    double b_out = 0.0;
  };

  Eigen::Matrix<double, 7, 1> hand_input(const Vec3& position, const Vec4& q) const;
  double eval(const Member& m, bool success, const Eigen::Matrix<double, 7, 1>& x,
              Eigen::Matrix<double, 7, 1>* grad) const;

  std::vector<Member> members_;
  PositionPrior box_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingExample {
  std::size_t scene = 0;  // index into TrainingBatch::voxels
  bool success = false;
  Vec3 u = Vec3::Zero();
  Vec4 q = Vec4(0, 0, 0, 1);
  bool label = false;  // joint (true) or marginal (false)
};

struct TrainingBatch {
  std::vector<std::span<const float>> voxels;
  std::vector<Eigen::Vector4d> poses;
  std::vector<TrainingExample> examples;
};

/// Mean binary cross-entropy over the batch and, when `grad` is non-null, its
/// gradient with respect to every layer. Computed in double.
double loss_and_gradient(const ClassifierParams& params, const TrainingBatch& batch,
                         Layers<double>* grad);

/// Within-scene derangement: grasp i keeps its outcome and receives the hand
/// of grasp perm[i] != i. Empty when fewer than two grasps are given.
std::vector<std::size_t> derangement(std::size_t n, Rng& rng);

struct NegativeBatch {
  std::vector<GraspAttempt> tuples;
  std::size_t skipped_scenes = 0;
};

/// Marginal tuples for a list of scenes' grasps, one per input grasp.
NegativeBatch make_negatives(std::span<const std::vector<GraspAttempt>> scenes, Rng& rng);

struct TrainConfig {
  int members = kEnsembleSize;
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double validation_fraction = 0.1;
  int threads = 1;
};

struct EpochLog {
  int member = 0;
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainResult {
  std::vector<ClassifierParams> members;
  std::vector<EpochLog> log;
  std::size_t skipped_scenes = 0;
  std::size_t train_scenes = 0;
  std::size_t validation_scenes = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains `members` classifiers with independent init and shuffling seeds.
/// Each member keeps its best-validation weights.
TrainResult train(std::span<const EpisodeRecord> episodes, const NetworkConfig& net,
                  const TrainConfig& config, std::uint64_t master_seed,
                  const EpochCallback& on_epoch = {});

/// Mean cross-entropy of one classifier on joint/marginal tuples built from
/// the episodes, negatives drawn with `rng`.
double evaluate_loss(const ClassifierParams& params, std::span<const EpisodeRecord> episodes,
                     Rng& rng);

/// Scaled position of a grasp relative to the episode's object bounds.
Vec3 scaled_position(const EpisodeRecord& episode, const Vec3& position);

// Weight files: "GSBI-NET" u32 version, config, tensor table (name, rank,
// dims), then f32 blobs in table order. Ensembles: "GSBI-ENS" u32 version,
// u32 count, count x (u64 offset, u64 size), then the member files.
void write_classifier(std::ostream& os, const ClassifierParams& params);
ClassifierParams read_classifier(std::istream& is);
void write_ensemble(std::ostream& os, const RatioEnsemble& ensemble);
RatioEnsemble read_ensemble(std::istream& is);
void save_ensemble(const std::string& path, const RatioEnsemble& ensemble);
RatioEnsemble load_ensemble(const std::string& path);

}  // namespace gsbi
