#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qkscope/matrix.hpp"
#include "qkscope/tensor_container.hpp"

namespace qkscope {

enum class QkvRole { Query, Key, Value };
using QkvOrder = std::array<QkvRole, 3>;

enum class Activation { Gelu, QuickGelu };

/// Architecture description plus the tensor-name templates of one checkpoint family.
/// Templates use "{layer}" as the layer-index placeholder.
struct MappingConfig {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t head_dim = 0;   // d_k
  std::size_t embed_dim = 0;  // d
  std::size_t value_dim = 0;  // d_v, per head
  std::size_t prefix_tokens = 1;
  std::size_t patch_size = 16;
  std::size_t image_size = 224;
  bool fused_qkv = false;
  QkvOrder qkv_order{QkvRole::Query, QkvRole::Key, QkvRole::Value};
  bool pre_norm = true;
  double ln_eps = 1e-6;
  Activation activation = Activation::Gelu;
  std::array<float, 3> image_mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> image_std{0.5f, 0.5f, 0.5f};
  std::string model_id;
  std::map<std::string, std::string> names;

  std::size_t grid_side() const noexcept { return image_size / patch_size; }
  std::size_t token_count() const noexcept { return grid_side() * grid_side() + prefix_tokens; }
  /// Template for `role` with the layer substituted; nullopt when the role is not mapped.
  std::optional<std::string> tensor_name(const std::string& role, std::size_t layer = 0) const;

  /// Throws InvalidConfig when dimensions are inconsistent.
  void validate() const;
};

MappingConfig parse_mapping_config(const std::string& json_text);
MappingConfig load_mapping_config(const std::filesystem::path& path);
std::string mapping_config_to_json(const MappingConfig& config);

struct QkvSplit {
  MatrixF query;
  MatrixF key;
  MatrixF value;
};

/// Splits a (3n x d) fused projection into equal slabs laid out in `order`.
QkvSplit split_fused_qkv(const MatrixF& fused, const QkvOrder& order);

struct LayerWeights {
  MatrixF q_weight, k_weight, v_weight;  // (heads * d_k) x d, (heads * d_v) x d
  std::vector<float> q_bias, k_bias, v_bias;
  MatrixF out_weight;  // d x (heads * d_v)
  std::vector<float> out_bias;
  std::vector<float> norm1_weight, norm1_bias;
  std::vector<float> norm2_weight, norm2_bias;
  MatrixF fc1_weight;  // mlp x d
  std::vector<float> fc1_bias;
  MatrixF fc2_weight;  // d x mlp
  std::vector<float> fc2_bias;
  std::vector<float> layer_scale1, layer_scale2;  // empty when the family has none
};

struct ModelWeights {
  MappingConfig config;
  std::vector<LayerWeights> layers;
  MatrixF patch_weight;  // d x (3 * p * p), flattened (channel, row, col)
  std::vector<float> patch_bias;
  MatrixF position_embedding;  // L x d
  MatrixF prefix_embedding;    // prefix_tokens x d
  std::vector<float> embed_norm_weight, embed_norm_bias;  // empty unless mapped

  /// Rows [h * d_k, (h + 1) * d_k) of W_q, widened to f64.
  MatrixD query_head(std::size_t layer, std::size_t head) const;
  MatrixD key_head(std::size_t layer, std::size_t head) const;
};

ModelWeights load_model(const TensorContainer& container, const MappingConfig& config);

}  // namespace qkscope
