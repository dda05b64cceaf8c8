#pragma once

#include <random>
#include <string>

#include "pwclo/layers.hpp"
#include "pwclo/pcops.hpp"

namespace pwclo::cv {

enum class Variant {
  kAttentive,  ///< per-channel softmax attention over neighbours
  kUniform,    ///< equal weights over neighbours (ablation)
};

/// Width of the pair encoding fed to u and v: relative position (3),
/// Euclidean distance (1), center features, neighbour features.
inline std::size_t pair_encoding_width(std::size_t center_width, std::size_t neighbor_width) {
  return 4 + center_width + neighbor_width;
}

/// Parameter blocks and neighbour counts of a two-stage attentive cost volume.
struct CostVolume {
  std::size_t k1 = 4;  ///< neighbours of each PC1 point in PC2
  std::size_t k2 = 4;  ///< neighbours of each PC1 point within PC1
  Variant variant = Variant::kAttentive;
  Mlp u1, v1, u2, v2;

  /// Blocks named `<prefix>/u1` etc. `feature_width` is the pyramid width of
  /// both clouds, `out_width` the embedding width.
  static CostVolume make(const std::string& prefix, std::size_t feature_width, std::size_t out_width,
                         std::size_t mlp_layers, std::size_t k1, std::size_t k2, Variant variant);

  std::size_t out_width() const { return v2.out_width(); }
  void init(ad::ParameterStore& store, std::mt19937_64& rng) const;
  void validate(const ad::ParameterStore& store) const;
};

/// Builds [rel, |rel|, f_center, f_neighbor] rows. Inputs are row-aligned.
ad::Var pair_encoding(ad::Var relative, ad::Var center_features, ad::Var neighbor_features);

/// Attention logits u(.) for aligned (center, neighbour) rows.
ad::Var attention_encode_u(ad::Tape& tape, const ad::ParameterStore& store, ad::Var relative, ad::Var center_features,
                           ad::Var neighbor_features, const Mlp& u);
/// Feature encoding v(.) for aligned (center, neighbour) rows.
ad::Var feature_encode_v(ad::Tape& tape, const ad::ParameterStore& store, ad::Var relative, ad::Var center_features,
                         ad::Var neighbor_features, const Mlp& v);

/// One attention stage: for every query row, softmax-weighted (per channel)
/// sum over its `k` neighbours of the v-encodings. Returns (n_query x c).
/// When `weights_out` is given it receives the (n_query, k, c) attention weights.
ad::Var attentive_aggregate(ad::Tape& tape, const ad::ParameterStore& store, ad::Var query_xyz,
                            ad::Var query_features, ad::Var reference_xyz, ad::Var reference_features,
                            std::size_t k, const Mlp& u, const Mlp& v, Variant variant,
                            ad::Tensor* weights_out = nullptr);

struct CostVolumeTrace {
  ad::Tensor stage1_weights;
  ad::Tensor stage2_weights;
};

/// Embedding features located at PC1 (row order of pc1).
ad::Var attentive_cost_volume(ad::Tape& tape, const ad::ParameterStore& store, const pc::CloudVar& pc1,
                              const pc::CloudVar& pc2, const CostVolume& params, CostVolumeTrace* trace = nullptr);

}  // namespace pwclo::cv
