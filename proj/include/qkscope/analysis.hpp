#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qkscope/encoder.hpp"
#include "qkscope/interaction.hpp"
#include "qkscope/matrix.hpp"

namespace qkscope {

// ---- mask and label downscaling -------------------------------------------------

/// Mean-pools a pixel mask onto the token grid; pixel (y, x) belongs to token
/// (floor(y * rows / H), floor(x * cols / W)).
MatrixD pool_mask(const MatrixD& pixel_mask, TokenGrid grid);

/// Token-resolution target/distractor/background maps that partition unity.
struct MaskSet {
  MatrixD target;
  MatrixD distractor;
  MatrixD background;
};

/// Background = 1 − target − distractor clipped to [0, 1]; each token's triple is
/// renormalized to sum to 1.
MaskSet make_mask_set(const MatrixD& target, const MatrixD& distractor);

/// Row-major index of the maximum of the pooled mask; smallest index on ties.
std::size_t select_token(const MatrixD& pixel_mask, TokenGrid grid);

struct LabelMap {
  Matrix<std::int32_t> labels;       // token resolution
  std::vector<std::int32_t> objects;  // ascending ids present in `labels`
  std::vector<std::size_t> areas;     // token count per entry of `objects`
};

/// Majority vote per token over the pixels it covers; smallest label on ties.
LabelMap pool_labels(const Matrix<std::int32_t>& pixel_labels, TokenGrid grid);

// ---- attention preference -------------------------------------------------------

struct PreferenceRecord {
  std::string image_id;
  std::size_t layer = 0;
  std::size_t head = 0;
  double tt = 0, td = 0, tb = 0;  // target query on target / distractor / background
  double dt = 0, dd = 0, db = 0;  // distractor query on target / distractor / background

  double same_objects() const noexcept { return 0.5 * (tt + dd); }
  double different_objects() const noexcept { return 0.5 * (td + dt); }
  double background() const noexcept { return 0.5 * (tb + db); }
};

PreferenceRecord preference_ratios(const MatrixD& target_map, const MatrixD& distractor_map,
                                   const MaskSet& masks);

// ---- mode projections -----------------------------------------------------------

struct ModeMap {
  MatrixD qmap;  // ⟨x_t, u_n⟩ over spatial tokens
  MatrixD kmap;  // ⟨x_t, v_n⟩
  std::size_t mode_index = 0;
};

ModeMap mode_maps(const MatrixF& embeddings, const SingularMode& mode, TokenGrid grid,
                  std::size_t prefix_tokens);

/// max_t qmap · max_t kmap over spatial tokens (signed maxima).
double image_mode_score(const MatrixF& embeddings, const SingularMode& mode, TokenGrid grid,
                        std::size_t prefix_tokens);
double image_mode_score(const ModeMap& maps);

struct RankedImage {
  std::string image_id;
  double score = 0.0;
};

/// Images by descending score, ties in ascending id order, truncated to k.
std::vector<RankedImage> rank_images(std::vector<RankedImage> scored, std::size_t k);

std::vector<RankedImage> mine_top_images(std::span<const EmbeddingStack> stacks, std::size_t layer,
                                         const SingularMode& mode, std::size_t k);

/// Indices of the top-k modes by σ_n · image_mode_score (smaller index on ties).
std::vector<std::size_t> rank_modes_for_image(const MatrixF& embeddings, const HeadModes& modes,
                                              std::size_t k, TokenGrid grid,
                                              std::size_t prefix_tokens);

// ---- anisotropy ---------------------------------------------------------------

/// Spatial index (floor(rows / 2), floor(cols / 2)) offset by the prefix tokens.
std::size_t center_token(TokenGrid grid, std::size_t prefix_tokens);

/// Mean cosine over unordered image pairs of layer-`layer` center-token embeddings.
double anisotropy_baseline(std::span<const EmbeddingStack> stacks, std::size_t layer);
double anisotropy_baseline(std::span<const EmbeddingStack* const> stacks, std::size_t layer);

double relative_cosine(double weighted_cosine, double baseline);

// ---- same-object probability ----------------------------------------------------

struct LabeledEmbedding {
  const EmbeddingStack* stack = nullptr;
  const LabelMap* labels = nullptr;
};

/// Object whose mean per-token projection is largest; smallest id on ties.
std::int32_t best_object(const MatrixD& map, const LabelMap& labels);

struct SameObjectResult {
  double probability = 0.0;               // σ-weighted over modes
  std::vector<double> mode_probability;   // mean indicator per mode
  std::vector<std::vector<int>> indicators;
};

/// `mined[n]` holds the labeled top images of mode n.
SameObjectResult same_object_probability(const HeadModes& modes,
                                         std::span<const std::vector<LabeledEmbedding>> mined);

}  // namespace qkscope
