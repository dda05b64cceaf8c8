#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pwclo/costvol.hpp"
#include "pwclo/headmask.hpp"
#include "pwclo/pcops.hpp"

namespace pwclo::net {

inline constexpr std::size_t kLevels = 4;

enum class FirstEmbedding { kPenultimate, kLast };

/// Architecture and ablation switches. Index 0 of the per-level arrays is the
/// finest level (l = 1).
struct NetConfig {
  std::size_t num_points = 8192;
  std::array<std::size_t, kLevels> level_points{2048, 1024, 256, 64};
  std::array<std::size_t, kLevels> widths{32, 64, 128, 256};
  std::size_t setconv_k = 16;
  std::size_t costvol_k1 = 16;
  std::size_t costvol_k2 = 16;
  std::size_t upconv_k = 8;
  std::size_t mlp_layers = 2;
  std::size_t fc_hidden1 = 256;
  std::size_t fc_hidden2 = 128;
  FirstEmbedding first_embedding = FirstEmbedding::kPenultimate;
  bool mask_enabled = true;
  bool mask_optimization = true;
  bool warp_enabled = true;
  bool refinement_enabled = true;
  cv::Variant costvol_variant = cv::Variant::kAttentive;
  /// Feed raw coordinates as first-layer point features (null features otherwise).
  bool xyz_input_features = false;

  static NetConfig full();
  static NetConfig desk();
  static NetConfig preset(const std::string& name);

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  /// Sets one field from its textual key/value; unknown keys throw.
  void set(const std::string& key, const std::string& value);
  /// Every key in canonical order with its current value.
  std::vector<std::pair<std::string, std::string>> entries() const;

  std::size_t embedding_level() const { return first_embedding == FirstEmbedding::kPenultimate ? 2 : 3; }
};

/// Parses `key = value` lines ('#' comments, blank lines allowed) on top of `base`.
NetConfig parse_config(std::istream& in, NetConfig base);
NetConfig load_config(const std::string& path, NetConfig base);
void write_config(std::ostream& out, const NetConfig& config);

struct LevelOutput {
  ad::Tensor coords;     ///< PC1 points of the level
  ad::Tensor embedding;  ///< n x c
  std::optional<ad::Tensor> mask;
};

/// Tape-resident outputs. `poses[0]` is the finest level; with refinement
/// disabled only the initial pose is present.
struct NetOutput {
  std::vector<head::PoseVar> poses;
  std::vector<LevelOutput> levels;  ///< same order as poses

  std::vector<geom::Pose> pose_values() const;
};

struct ForwardOptions {
  /// FPS start indices are drawn from this seed; deterministic start 0 when unset.
  std::optional<std::uint64_t> fps_seed;
};

/// The full network: siamese pyramid, initial embedding/mask/pose, warp-refinement levels.
class Network {
 public:
  explicit Network(NetConfig config);

  const NetConfig& config() const { return config_; }

  /// Registers every parameter with seeded initialization.
  ad::ParameterStore init_parameters(std::uint64_t seed) const;
  /// Checks that `store` has every parameter with the expected shape.
  void validate(const ad::ParameterStore& store) const;

  /// pc1 and pc2 must already hold config.num_points rows.
  NetOutput forward(ad::Tape& tape, const ad::ParameterStore& store, const pc::PointCloud& pc1,
                    const pc::PointCloud& pc2, const ForwardOptions& options = {}) const;

 private:
  NetConfig config_;
  std::array<Mlp, kLevels> pyramid_;
  cv::CostVolume first_cv_;
  std::optional<Mlp> carry_;  ///< set conv lifting the first embedding to the coarsest level
  Mlp init_mask_;
  Mlp init_fc_q_, init_fc_t_;
  std::vector<head::WarpRefineBlock> refine_;  ///< refine_[i] refines level i (0 finest)
};

/// Total trainable scalar count.
std::size_t count_parameters(const ad::ParameterStore& store);

}  // namespace pwclo::net
