#include "qkscope/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "qkscope/error.hpp"
#include "qkscope/linalg.hpp"
#include "qkscope/tensor_container.hpp"

namespace qkscope {

namespace {

void layer_norm_rows(const MatrixF& x, std::span<const float> gamma, std::span<const float> beta,
                     double eps, MatrixF& out) {
  const std::size_t d = x.cols();
  out = MatrixF(x.rows(), d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const auto inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    const auto m = static_cast<float>(mean);
    auto o = out.row(r);
    for (std::size_t i = 0; i < d; ++i) o[i] = (row[i] - m) * inv * gamma[i] + beta[i];
  }
}

MatrixF linear(const MatrixF& x, const MatrixF& w_t, std::span<const float> bias) {
  MatrixF y = linalg::matmul(x, w_t);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] += bias[i];
  }
  return y;
}

MatrixF columns(const MatrixF& m, std::size_t begin, std::size_t count) {
  MatrixF out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r)
    std::copy_n(m.row(r).data() + begin, count, out.row(r).data());
  return out;
}

void softmax_rows(MatrixF& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const float peak = *std::max_element(row.begin(), row.end());
    float sum = 0.0f;
    for (auto& v : row) {
      v = std::exp(v - peak);
      sum += v;
    }
    const float inv = 1.0f / sum;
    for (auto& v : row) v *= inv;
  }
}

float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f)); }
float quick_gelu(float x) { return x / (1.0f + std::exp(-1.702f * x)); }

void check_finite(const MatrixF& x, std::size_t layer, const char* where) {
  if (!all_finite(x)) {
    throw Error(ErrorKind::NonFiniteActivation,
                std::string("non-finite activation in layer ") + std::to_string(layer) + " (" +
                    where + ")");
  }
}

}  // namespace

std::size_t EmbeddingStack::byte_size() const noexcept {
  std::size_t bytes = 0;
  for (const auto& l : layers) bytes += l.size() * sizeof(float);
  return bytes;
}

const MatrixF& AttentionScores::at(std::size_t layer, std::size_t head) const {
  if (layer >= scores.size() || head >= scores[layer].size()) {
    throw Error(ErrorKind::IndexOutOfRange, "attention scores: layer/head out of range");
  }
  return scores[layer][head];
}

VitEncoder::VitEncoder(const ModelWeights& weights) : weights_(weights) {
  if (!weights.config.pre_norm) {
    throw Error(ErrorKind::InvalidConfig, "only pre-norm ViT encoders are supported");
  }
  patch_t_ = weights.patch_weight.transposed();
  cache_.reserve(weights.layers.size());
  for (const auto& lw : weights.layers) {
    cache_.push_back({lw.q_weight.transposed(), lw.k_weight.transposed(), lw.v_weight.transposed(),
                      lw.out_weight.transposed(), lw.fc1_weight.transposed(),
                      lw.fc2_weight.transposed()});
  }
}

TokenGrid VitEncoder::grid() const noexcept {
  return {config().grid_side(), config().grid_side()};
}

MatrixF VitEncoder::patchify_embed(const ImageTensor& image) const {
  const auto& c = config();
  if (image.height != c.image_size || image.width != c.image_size ||
      image.rgb.size() != image.height * image.width * 3) {
    throw Error(ErrorKind::ShapeMismatch, "patchify_embed: image is " +
                                              std::to_string(image.height) + "x" +
                                              std::to_string(image.width) + ", model expects " +
                                              std::to_string(c.image_size));
  }
  const std::size_t p = c.patch_size;
  const std::size_t side = c.grid_side();
  MatrixF patches(side * side, 3 * p * p);
  for (std::size_t gy = 0; gy < side; ++gy) {
    for (std::size_t gx = 0; gx < side; ++gx) {
      auto out = patches.row(gy * side + gx);
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t ky = 0; ky < p; ++ky)
          for (std::size_t kx = 0; kx < p; ++kx) {
            const float v = image.at(gy * p + ky, gx * p + kx, ch);
            out[(ch * p + ky) * p + kx] = (v - c.image_mean[ch]) / c.image_std[ch];
          }
    }
  }
  const MatrixF projected = linear(patches, patch_t_, weights_.patch_bias);
  const std::size_t d = c.embed_dim;
  MatrixF tokens(c.token_count(), d);
  for (std::size_t t = 0; t < c.prefix_tokens; ++t)
    std::copy_n(weights_.prefix_embedding.row(t).data(), d, tokens.row(t).data());
  for (std::size_t t = 0; t < projected.rows(); ++t)
    std::copy_n(projected.row(t).data(), d, tokens.row(c.prefix_tokens + t).data());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    tokens.data()[i] += weights_.position_embedding.data()[i];
  if (!weights_.embed_norm_weight.empty()) {
    MatrixF normed;
    layer_norm_rows(tokens, weights_.embed_norm_weight, weights_.embed_norm_bias, c.ln_eps, normed);
    tokens = std::move(normed);
  }
  return tokens;
}

ForwardResult VitEncoder::forward(const ImageTensor& image, bool collect_scores) const {
  const auto& c = config();
  ForwardResult result;
  result.embeddings.grid = grid();
  result.embeddings.prefix_tokens = c.prefix_tokens;
  result.embeddings.model_id = c.model_id;
  result.embeddings.image_id = image.id;
  result.scores.head_dim = c.head_dim;

  MatrixF x = patchify_embed(image);
  check_finite(x, 0, "embedding");
  const std::size_t tokens = x.rows();
  const float scale = 1.0f / std::sqrt(static_cast<float>(c.head_dim));
  for (std::size_t l = 0; l < weights_.layers.size(); ++l) {
    const LayerWeights& lw = weights_.layers[l];
    const LayerCache& lc = cache_[l];
    MatrixF h;
    layer_norm_rows(x, lw.norm1_weight, lw.norm1_bias, c.ln_eps, h);
    check_finite(h, l, "attention input");

    const MatrixF q = linear(h, lc.q_t, lw.q_bias);
    const MatrixF k = linear(h, lc.k_t, lw.k_bias);
    const MatrixF v = linear(h, lc.v_t, lw.v_bias);
    MatrixF context(tokens, c.num_heads * c.value_dim);
    if (collect_scores) result.scores.scores.emplace_back();
    for (std::size_t hd = 0; hd < c.num_heads; ++hd) {
      const MatrixF qh = columns(q, hd * c.head_dim, c.head_dim);
      const MatrixF kh_t = columns(k, hd * c.head_dim, c.head_dim).transposed();
      MatrixF s = linalg::matmul(qh, kh_t);
      s *= scale;
      if (collect_scores) result.scores.scores.back().push_back(s);
      softmax_rows(s);
      const MatrixF mixed = linalg::matmul(s, columns(v, hd * c.value_dim, c.value_dim));
      for (std::size_t r = 0; r < tokens; ++r)
        std::copy_n(mixed.row(r).data(), c.value_dim, context.row(r).data() + hd * c.value_dim);
    }
    MatrixF attn = linear(context, lc.out_t, lw.out_bias);
    for (std::size_t r = 0; r < tokens; ++r) {
      auto xr = x.row(r);
      const auto ar = attn.row(r);
      for (std::size_t i = 0; i < xr.size(); ++i)
        xr[i] += lw.layer_scale1.empty() ? ar[i] : lw.layer_scale1[i] * ar[i];
    }

    MatrixF h2;
    layer_norm_rows(x, lw.norm2_weight, lw.norm2_bias, c.ln_eps, h2);
    MatrixF hidden = linear(h2, lc.fc1_t, lw.fc1_bias);
    for (auto& val : hidden.data())
      val = c.activation == Activation::Gelu ? gelu(val) : quick_gelu(val);
    const MatrixF mlp = linear(hidden, lc.fc2_t, lw.fc2_bias);
    for (std::size_t r = 0; r < tokens; ++r) {
      auto xr = x.row(r);
      const auto mr = mlp.row(r);
      for (std::size_t i = 0; i < xr.size(); ++i)
        xr[i] += lw.layer_scale2.empty() ? mr[i] : lw.layer_scale2[i] * mr[i];
    }
    check_finite(x, l, "residual stream");
    result.embeddings.layers.push_back(std::move(h));
  }
  return result;
}

MatrixF patchify_embed(const ImageTensor& image, const ModelWeights& weights) {
  return VitEncoder(weights).patchify_embed(image);
}

ForwardResult forward_collect(const ImageTensor& image, const ModelWeights& weights) {
  return VitEncoder(weights).forward(image, true);
}

MatrixD attention_map_from_row(std::span<const float> score_row, TokenGrid grid,
                               std::size_t prefix_tokens) {
  if (score_row.size() != grid.area() + prefix_tokens) {
    throw Error(ErrorKind::GridMismatch, "attention_map: score row length " +
                                             std::to_string(score_row.size()) +
                                             " does not match grid + prefix tokens");
  }
  double peak = -std::numeric_limits<double>::infinity();
  for (float s : score_row) peak = std::max(peak, static_cast<double>(s));
  std::vector<double> weights(score_row.size());
  double total = 0.0;
  for (std::size_t j = 0; j < score_row.size(); ++j) {
    weights[j] = std::exp(static_cast<double>(score_row[j]) - peak);
    total += weights[j];
  }
  double spatial = 0.0;
  for (std::size_t j = prefix_tokens; j < score_row.size(); ++j) {
    weights[j] /= total;
    spatial += weights[j];
  }
  MatrixD map(grid.rows, grid.cols);
  for (std::size_t t = 0; t < grid.area(); ++t) map.data()[t] = weights[prefix_tokens + t] / spatial;
  return map;
}

MatrixD attention_map(const AttentionScores& scores, std::size_t layer, std::size_t head,
                      std::size_t token, TokenGrid grid, std::size_t prefix_tokens) {
  const MatrixF& s = scores.at(layer, head);
  if (token < prefix_tokens || token >= grid.area() + prefix_tokens || token >= s.rows()) {
    throw Error(ErrorKind::IndexOutOfRange,
                "attention_map: token " + std::to_string(token) + " is not a spatial token");
  }
  return attention_map_from_row(s.row(token), grid, prefix_tokens);
}

std::string embedding_layer_name(std::size_t layer) {
  return "layer" + std::to_string(layer) + ".ln_input";
}

void save_embedding_dump(const std::filesystem::path& path, const EmbeddingStack& stack) {
  std::map<std::string, TensorBlob> tensors;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const auto& m = stack.layers[l];
    tensors.emplace(embedding_layer_name(l),
                    make_f32_blob({static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())},
                                  m.data()));
  }
  nlohmann::ordered_json meta;
  meta["grid"] = {stack.grid.rows, stack.grid.cols};
  meta["prefix_tokens"] = stack.prefix_tokens;
  meta["num_layers"] = stack.layers.size();
  meta["model_id"] = stack.model_id;
  meta["image_id"] = stack.image_id;
  write_container(path, tensors, {{"meta", meta.dump()}});
}

EmbeddingStack load_embedding_dump(const std::filesystem::path& path) {
  const TensorContainer container = parse_container(path);
  auto it = container.metadata().find("meta");
  if (it == container.metadata().end()) {
    throw Error(ErrorKind::MalformedHeader,
                "embedding dump '" + path.string() + "' has no 'meta' metadata entry");
  }
  nlohmann::json meta;
  EmbeddingStack stack;
  std::size_t num_layers = 0;
  try {
    meta = nlohmann::json::parse(it->second);
    const auto grid = meta.at("grid").get<std::vector<std::size_t>>();
    if (grid.size() != 2) throw Error(ErrorKind::MalformedHeader, "meta.grid must have two entries");
    stack.grid = {grid[0], grid[1]};
    stack.prefix_tokens = meta.at("prefix_tokens").get<std::size_t>();
    stack.model_id = meta.value("model_id", std::string{});
    stack.image_id = meta.value("image_id", std::string{});
    if (meta.contains("num_layers")) {
      num_layers = meta.at("num_layers").get<std::size_t>();
    } else {
      for (const auto& [name, e] : container.entries()) {
        if (name.rfind("layer", 0) == 0 && name.size() > 14 &&
            name.compare(name.size() - 9, 9, ".ln_input") == 0) {
          num_layers = std::max(num_layers, std::stoul(name.substr(5, name.size() - 14)) + 1);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedHeader, std::string("embedding dump meta: ") + e.what());
  }
  std::string missing;
  for (std::size_t l = 0; l < num_layers; ++l)
    if (!container.contains(embedding_layer_name(l))) missing += " " + embedding_layer_name(l);
  if (!missing.empty()) {
    throw Error(ErrorKind::MissingTensor, "embedding dump '" + path.string() + "' lacks" + missing);
  }
  const std::size_t tokens = stack.token_count();
  for (std::size_t l = 0; l < num_layers; ++l) {
    const auto name = embedding_layer_name(l);
    const auto& e = container.entry(name);
    if (e.shape.size() != 2 || static_cast<std::size_t>(e.shape[0]) != tokens) {
      throw Error(ErrorKind::GridMismatch, "embedding dump tensor '" + name +
                                               "' row count does not equal grid area + prefix tokens");
    }
    stack.layers.emplace_back(tokens, static_cast<std::size_t>(e.shape[1]), container.read_f32(name));
  }
  return stack;
}

}  // namespace qkscope
