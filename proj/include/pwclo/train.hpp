#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pwclo/kittio.hpp"
#include "pwclo/net.hpp"
#include "pwclo/tensor.hpp"

namespace pwclo::train {

inline constexpr const char* kSxName = "loss/s_x";
inline constexpr const char* kSqName = "loss/s_q";

struct LossParams {
  double s_x_init = 0.0;
  double s_q_init = -2.5;
  std::vector<double> alphas{1.6, 0.8, 0.4, 0.2};  ///< alphas[0] weights the finest level
  bool finest_first = true;  ///< false applies alphas[0] to the coarsest level instead

  /// Weights for `levels` output poses ordered finest first. A single pose gets alphas[0].
  std::vector<double> weights(std::size_t levels) const;
};

/// Registers the scalar s_x, s_q parameters.
void init_loss_parameters(ad::ParameterStore& store, const LossParams& lp);

/// |t_gt - t|_1 exp(-s_x) + s_x + |q_gt - canon(q)/|q||_2 exp(-s_q) + s_q.
ad::Var level_loss(const head::PoseVar& pred, const geom::Pose& gt, ad::Var s_x, ad::Var s_q);

struct LossBreakdown {
  ad::Var total;
  std::vector<ad::Var> levels;  ///< finest first, unweighted
};

/// Weighted multi-level sum with shared s_x, s_q drawn from `store`.
/// Throws std::invalid_argument if `alphas` does not match the pose count.
LossBreakdown total_loss(ad::Tape& tape, const ad::ParameterStore& store, const net::NetOutput& out,
                         const geom::Pose& gt, std::span<const double> alphas);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lr = 1e-3;
  std::uint64_t decay_steps = 200000;
  double decay_rate = 0.7;
  double lr_floor = 1e-5;
};

double learning_rate(const AdamOptions& opts, std::uint64_t step);

struct OptimState {
  AdamOptions options;
  std::uint64_t step = 0;  ///< completed updates
  ad::ParameterStore m;
  ad::ParameterStore v;
};

struct StepStatus {
  bool applied = true;
  std::string message;
};

/// Bias-corrected Adam update of every trainable parameter in `grads`.
/// A non-finite gradient rejects the whole step and leaves everything unchanged.
StepStatus optimizer_step(ad::ParameterStore& params, const ad::GradientMap& grads, OptimState& state);

struct TrainOptions {
  std::size_t batch_size = 8;
  std::uint64_t steps = 1000;  ///< stop once state.step reaches this
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  ///< 0: only at the end
  std::string checkpoint_path;          ///< empty: no checkpoints
  bool augment = false;
  kitti::AugmentSigmas sigmas;
  bool random_fps = true;
  LossParams loss;
};

struct StepRecord {
  std::uint64_t step = 0;  ///< 1-based
  double lr = 0;
  double total = 0;
  std::vector<double> levels;  ///< finest first
  double s_x = 0;
  double s_q = 0;
};

inline constexpr const char* kLogHeader = "step,lr,loss,loss_l1,loss_l2,loss_l3,loss_l4,s_x,s_q";
/// Missing levels are written as empty fields.
void write_log_row(std::ostream& out, const StepRecord& r);

struct TrainResult {
  std::uint64_t steps_run = 0;
  std::uint64_t rejected = 0;
  std::vector<StepRecord> records;
};

/// Deterministic 64-bit mix of a seed and a few integers.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

/// Resamples both clouds to `n` points (and optionally augments).
kitti::FramePair prepare_pair(const kitti::FramePair& pair, std::size_t n, std::uint64_t seed, bool augment,
                              const kitti::AugmentSigmas& sigmas);

/// Index into the dataset for batch element `b` of step `step`: epoch-wise
/// seeded permutations, so the order depends only on (seed, step).
std::size_t sample_index(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed, std::uint64_t step,
                         std::size_t b);

/// Forward, loss and averaged gradients for one batch.
struct BatchResult {
  double total = 0;
  std::vector<double> levels;
  ad::GradientMap grads;
};

BatchResult compute_batch(const net::Network& network, const ad::ParameterStore& store,
                          std::span<const kitti::FramePair> dataset, const TrainOptions& opts, std::uint64_t step);

/// Runs until state.step == opts.steps. Log rows go to `log` (header not written).
/// Rejected steps are reported on `incidents`.
TrainResult train_loop(const net::Network& network, ad::ParameterStore& store, OptimState& state,
                       std::span<const kitti::FramePair> dataset, const TrainOptions& opts, std::ostream* log = nullptr,
                       std::ostream* incidents = nullptr);

// Checkpoint: parameters plus optimizer moments and step, written atomically.
void save_checkpoint(const std::string& path, const ad::ParameterStore& store, const OptimState& state);
void load_checkpoint(const std::string& path, ad::ParameterStore& store, OptimState& state);

/// Rotation (degrees) and translation (meters) error of every output level on one pair.
struct PairErrors {
  std::vector<double> rot_deg;  ///< finest first
  std::vector<double> trans_m;
};

PairErrors evaluate_pair(const net::Network& network, const ad::ParameterStore& store, const kitti::FramePair& pair,
                         std::uint64_t seed);

}  // namespace pwclo::train
