#pragma once

#include <optional>
#include <ostream>
#include <random>

#include "pwclo/costvol.hpp"
#include "pwclo/geom.hpp"
#include "pwclo/layers.hpp"
#include "pwclo/pcops.hpp"

namespace pwclo::head {

/// Pose on the tape: q is (1,4) unit-norm, t is (1,3).
struct PoseVar {
  ad::Var q;
  ad::Var t;

  geom::Pose value() const;
};

PoseVar pose_constant(ad::Tape& tape, const geom::Pose& pose);

/// softmax over points of mlp(E + prior + F). Columns sum to one.
ad::Var make_mask(ad::Tape& tape, const ad::ParameterStore& store, ad::Var embedding, ad::Var features,
                  std::optional<ad::Var> prior, const Mlp& mlp);

/// Pooled embedding: sum_i e_i * m_i, or the per-channel mean when `mask` is empty.
ad::Var pool_embedding(ad::Var embedding, std::optional<ad::Var> mask);

/// Quaternion and translation FC stacks applied to the pooled embedding. The
/// quaternion is divided by its norm.
PoseVar pose_head(ad::Tape& tape, const ad::ParameterStore& store, ad::Var embedding, std::optional<ad::Var> mask,
                  const Mlp& fc_q, const Mlp& fc_t);

/// x' = R(q) x + t for every row of (n,3) `xyz`.
ad::Var warp_points(const PoseVar& pose, ad::Var xyz);

/// q = dq q_coarse; t = dq t_coarse dq^-1 + dt.
PoseVar compose(const PoseVar& delta, const PoseVar& coarse);

/// Everything known at one pyramid level.
struct LevelState {
  pc::CloudVar pc1;  ///< coordinates and pyramid features F1
  pc::CloudVar pc2;
  ad::Var embedding;
  ad::Var mask;  ///< unset when the mask is disabled
  bool has_mask = false;
  PoseVar pose;
};

struct RefineOptions {
  bool warp = true;               ///< warp PC1 by the coarse pose before re-association
  bool mask_enabled = true;       ///< false: average-pool embeddings in the head
  bool mask_optimization = true;  ///< false: the mask ignores the propagated coarse mask
};

/// Parameter blocks of one warp-refinement level.
struct WarpRefineBlock {
  std::size_t upconv_k = 4;
  Mlp up_embed_gather, up_embed_fuse;
  Mlp up_mask_gather, up_mask_fuse;
  cv::CostVolume cost_volume;
  Mlp refine;  ///< CE + RE + F -> E
  Mlp mask;    ///< E + CM + F -> M logits
  Mlp fc_q, fc_t;

  static WarpRefineBlock make(const std::string& prefix, std::size_t coarse_width, std::size_t feature_width,
                              std::size_t width, std::size_t mlp_layers, std::size_t fc1, std::size_t fc2,
                              std::size_t k1, std::size_t k2, std::size_t upconv_k, cv::Variant variant,
                              bool mask_prior);
  void init(ad::ParameterStore& store, std::mt19937_64& rng) const;
  void validate(const ad::ParameterStore& store) const;
};

/// FC stacks for pose regression: two hidden layers then a linear output.
Mlp make_fc(const std::string& prefix, std::size_t in, std::size_t fc1, std::size_t fc2, std::size_t out);
/// Registers a pose head initialised near the identity pose.
void init_pose_fc(ad::ParameterStore& store, std::mt19937_64& rng, const Mlp& fc_q, const Mlp& fc_t);

struct RefineTrace {
  ad::Var warped_xyz;
  ad::Var coarse_embedding;
  ad::Var coarse_mask;
  PoseVar residual;
};

/// Refines the level l+1 state `coarse` on the level l clouds.
LevelState warp_refine(ad::Tape& tape, const ad::ParameterStore& store, const LevelState& coarse,
                       const pc::CloudVar& pc1, const pc::CloudVar& pc2, const WarpRefineBlock& block,
                       const RefineOptions& options, RefineTrace* trace = nullptr);

/// Per-point mask export: "x y z weight" rows, weight summed over channels.
void write_mask_table(std::ostream& out, const ad::Tensor& coords, const ad::Tensor& mask);

}  // namespace pwclo::head
