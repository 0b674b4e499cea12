#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "qkscope/checkpoint.hpp"
#include "qkscope/image.hpp"
#include "qkscope/matrix.hpp"

namespace qkscope {

struct TokenGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t area() const noexcept { return rows * cols; }
  bool operator==(const TokenGrid&) const = default;
};

/// Per-layer attention inputs (outputs of the pre-attention layer norm), each L x d.
struct EmbeddingStack {
  std::vector<MatrixF> layers;
  TokenGrid grid;
  std::size_t prefix_tokens = 0;
  std::string model_id;
  std::string image_id;

  std::size_t token_count() const noexcept { return grid.area() + prefix_tokens; }
  std::size_t byte_size() const noexcept;
};

/// Scaled scores q_iᵀk_j / sqrt(d_k), indexed [layer][head], each L x L.
struct AttentionScores {
  std::vector<std::vector<MatrixF>> scores;
  std::size_t head_dim = 0;

  const MatrixF& at(std::size_t layer, std::size_t head) const;
};

struct ForwardResult {
  EmbeddingStack embeddings;
  AttentionScores scores;  // empty unless requested
};

/// Pre-norm ViT forward pass in f32. Weights are pre-transposed once at construction.
class VitEncoder {
 public:
  explicit VitEncoder(const ModelWeights& weights);

  const MappingConfig& config() const noexcept { return weights_.config; }
  TokenGrid grid() const noexcept;

  MatrixF patchify_embed(const ImageTensor& image) const;
  ForwardResult forward(const ImageTensor& image, bool collect_scores = true) const;

 private:
  struct LayerCache {
    MatrixF q_t, k_t, v_t, out_t, fc1_t, fc2_t;  // in x out
  };
  const ModelWeights& weights_;
  MatrixF patch_t_;
  std::vector<LayerCache> cache_;
};

MatrixF patchify_embed(const ImageTensor& image, const ModelWeights& weights);
ForwardResult forward_collect(const ImageTensor& image, const ModelWeights& weights);

/// Softmax over the full row of `token` (prefix included), prefix mass dropped,
/// spatial entries renormalized and reshaped row-major to the token grid.
MatrixD attention_map(const AttentionScores& scores, std::size_t layer, std::size_t head,
                      std::size_t token, TokenGrid grid, std::size_t prefix_tokens);
MatrixD attention_map_from_row(std::span<const float> score_row, TokenGrid grid,
                               std::size_t prefix_tokens);

/// Embedding dump: tensors "layer{i}.ln_input" plus a "meta" JSON string in the
/// container metadata: {grid: [rows, cols], prefix_tokens, num_layers, model_id, image_id}.
void save_embedding_dump(const std::filesystem::path& path, const EmbeddingStack& stack);
EmbeddingStack load_embedding_dump(const std::filesystem::path& path);
std::string embedding_layer_name(std::size_t layer);

}  // namespace qkscope
