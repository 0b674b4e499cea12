#include "qkscope/checkpoint.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "json.hpp"
#include "qkscope/error.hpp"
#include "qkscope/io.hpp"

namespace qkscope {

namespace {

const std::set<std::string>& known_roles() {
  static const std::set<std::string> roles = {
      "patch_weight", "patch_bias", "position_embedding", "cls_token", "dist_token",
      "embed_norm_weight", "embed_norm_bias", "norm1_weight", "norm1_bias", "norm2_weight",
      "norm2_bias", "q_weight", "q_bias", "k_weight", "k_bias", "v_weight", "v_bias",
      "qkv_weight", "qkv_bias", "out_weight", "out_bias", "fc1_weight", "fc1_bias",
      "fc2_weight", "fc2_bias", "layer_scale1", "layer_scale2"};
  return roles;
}

[[noreturn]] void invalid(const std::string& why) {
  throw Error(ErrorKind::InvalidConfig, "invalid mapping config: " + why);
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<std::int64_t> squeeze_leading(std::vector<std::int64_t> shape) {
  while (shape.size() > 1 && shape.front() == 1) shape.erase(shape.begin());
  return shape;
}

QkvRole parse_role(const std::string& s) {
  if (s == "q") return QkvRole::Query;
  if (s == "k") return QkvRole::Key;
  if (s == "v") return QkvRole::Value;
  invalid("qkv_order entries must be 'q', 'k' or 'v', got '" + s + "'");
}

const char* role_letter(QkvRole r) {
  switch (r) {
    case QkvRole::Query: return "q";
    case QkvRole::Key: return "k";
    case QkvRole::Value: return "v";
  }
  return "?";
}

// Reads tensors by role and checks shapes against expectations.
class Reader {
 public:
  Reader(const TensorContainer& container, const MappingConfig& config)
      : container_(container), config_(config) {}

  std::vector<float> tensor(const std::string& name, const std::vector<std::int64_t>& expected) {
    const auto& e = container_.entry(name);
    if (squeeze_leading(e.shape) != squeeze_leading(expected)) {
      throw Error(ErrorKind::ShapeMismatch, "tensor '" + name + "' has shape " +
                                                shape_string(e.shape) + ", expected " +
                                                shape_string(expected));
    }
    auto values = container_.read_f32(name);
    if (!all_finite<float>(values)) {
      throw Error(ErrorKind::NonFiniteInput, "tensor '" + name + "' contains NaN or Inf");
    }
    return values;
  }

  MatrixF matrix(const std::string& role, std::size_t layer, std::size_t rows, std::size_t cols) {
    const std::string name = *config_.tensor_name(role, layer);
    return MatrixF(rows, cols,
                   tensor(name, {static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)}));
  }

  // Returns zeros (or empty when `empty_if_absent`) when the role is not mapped.
  std::vector<float> vector(const std::string& role, std::size_t layer, std::size_t n,
                            bool empty_if_absent = false) {
    const auto name = config_.tensor_name(role, layer);
    if (!name) return empty_if_absent ? std::vector<float>{} : std::vector<float>(n, 0.0f);
    return tensor(*name, {static_cast<std::int64_t>(n)});
  }

 private:
  const TensorContainer& container_;
  const MappingConfig& config_;
};

std::vector<std::string> required_roles(const MappingConfig& config) {
  std::vector<std::string> roles = {"norm1_weight", "norm1_bias", "norm2_weight", "norm2_bias",
                                    "out_weight", "fc1_weight", "fc2_weight"};
  if (config.fused_qkv) {
    roles.push_back("qkv_weight");
  } else {
    roles.insert(roles.end(), {"q_weight", "k_weight", "v_weight"});
  }
  return roles;
}

}  // namespace

std::optional<std::string> MappingConfig::tensor_name(const std::string& role,
                                                      std::size_t layer) const {
  auto it = names.find(role);
  if (it == names.end()) return std::nullopt;
  std::string out = it->second;
  const std::string placeholder = "{layer}";
  const std::string index = std::to_string(layer);
  for (std::size_t pos = out.find(placeholder); pos != std::string::npos;
       pos = out.find(placeholder, pos + index.size())) {
    out.replace(pos, placeholder.size(), index);
  }
  return out;
}

void MappingConfig::validate() const {
  if (num_layers == 0 || num_heads == 0 || head_dim == 0 || embed_dim == 0 || value_dim == 0) {
    invalid("num_layers, num_heads, head_dim, embed_dim and value_dim must be positive");
  }
  if (embed_dim != num_heads * head_dim) {
    invalid("embed_dim " + std::to_string(embed_dim) + " != num_heads x head_dim (" +
            std::to_string(num_heads) + " x " + std::to_string(head_dim) + ")");
  }
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    invalid("image_size must be a positive multiple of patch_size");
  }
  if (prefix_tokens > 2) invalid("at most two prefix tokens (cls, dist) are supported");
  std::set<QkvRole> seen(qkv_order.begin(), qkv_order.end());
  if (seen.size() != 3) invalid("qkv_order must be a permutation of q, k, v");
  for (const auto& [role, tmpl] : names) {
    if (!known_roles().count(role)) invalid("unknown tensor role '" + role + "'");
  }
  auto need = [&](const std::string& role) {
    if (!names.count(role)) invalid("missing name template for role '" + role + "'");
  };
  for (const auto& role : required_roles(*this)) need(role);
  need("patch_weight");
  need("position_embedding");
  if (prefix_tokens >= 1) need("cls_token");
  if (prefix_tokens >= 2) need("dist_token");
  for (float s : image_std)
    if (!(s > 0.0f)) invalid("image_std entries must be positive");
}

MappingConfig parse_mapping_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    invalid(std::string("not valid JSON: ") + e.what());
  }
  MappingConfig c;
  try {
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.value_dim = j.value("value_dim", c.head_dim);
    c.prefix_tokens = j.value("prefix_tokens", std::size_t{1});
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.image_size = j.at("image_size").get<std::size_t>();
    c.fused_qkv = j.value("fused_qkv", false);
    if (j.contains("qkv_order")) {
      const auto order = j.at("qkv_order").get<std::vector<std::string>>();
      if (order.size() != 3) invalid("qkv_order must have three entries");
      for (std::size_t i = 0; i < 3; ++i) c.qkv_order[i] = parse_role(order[i]);
    }
    c.pre_norm = j.value("pre_norm", true);
    c.ln_eps = j.value("ln_eps", 1e-6);
    const std::string act = j.value("activation", std::string("gelu"));
    if (act == "gelu") {
      c.activation = Activation::Gelu;
    } else if (act == "quick_gelu") {
      c.activation = Activation::QuickGelu;
    } else {
      invalid("activation must be 'gelu' or 'quick_gelu'");
    }
    if (j.contains("image_mean")) c.image_mean = j.at("image_mean").get<std::array<float, 3>>();
    if (j.contains("image_std")) c.image_std = j.at("image_std").get<std::array<float, 3>>();
    c.model_id = j.value("model_id", std::string{});
    c.names = j.at("names").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    invalid(e.what());
  }
  c.validate();
  return c;
}

MappingConfig load_mapping_config(const std::filesystem::path& path) {
  return parse_mapping_config(read_text_file(path));
}

std::string mapping_config_to_json(const MappingConfig& c) {
  nlohmann::ordered_json j;
  j["model_id"] = c.model_id;
  j["num_layers"] = c.num_layers;
  j["num_heads"] = c.num_heads;
  j["head_dim"] = c.head_dim;
  j["embed_dim"] = c.embed_dim;
  j["value_dim"] = c.value_dim;
  j["prefix_tokens"] = c.prefix_tokens;
  j["patch_size"] = c.patch_size;
  j["image_size"] = c.image_size;
  j["fused_qkv"] = c.fused_qkv;
  j["qkv_order"] = {role_letter(c.qkv_order[0]), role_letter(c.qkv_order[1]),
                    role_letter(c.qkv_order[2])};
  j["pre_norm"] = c.pre_norm;
  j["ln_eps"] = c.ln_eps;
  j["activation"] = c.activation == Activation::Gelu ? "gelu" : "quick_gelu";
  j["image_mean"] = c.image_mean;
  j["image_std"] = c.image_std;
  j["names"] = c.names;
  return j.dump(2) + "\n";
}

QkvSplit split_fused_qkv(const MatrixF& fused, const QkvOrder& order) {
  if (fused.rows() == 0 || fused.rows() % 3 != 0) {
    throw Error(ErrorKind::ShapeError, "fused QKV first dimension " +
                                           std::to_string(fused.rows()) +
                                           " is not a positive multiple of 3");
  }
  const std::size_t slab = fused.rows() / 3;
  QkvSplit out;
  for (std::size_t i = 0; i < 3; ++i) {
    MatrixF block = fused.row_block(i * slab, slab);
    switch (order[i]) {
      case QkvRole::Query: out.query = std::move(block); break;
      case QkvRole::Key: out.key = std::move(block); break;
      case QkvRole::Value: out.value = std::move(block); break;
    }
  }
  return out;
}

MatrixD ModelWeights::query_head(std::size_t layer, std::size_t head) const {
  if (layer >= layers.size() || head >= config.num_heads) {
    throw Error(ErrorKind::IndexOutOfRange, "layer/head index out of range");
  }
  return layers[layer].q_weight.row_block(head * config.head_dim, config.head_dim).cast<double>();
}

MatrixD ModelWeights::key_head(std::size_t layer, std::size_t head) const {
  if (layer >= layers.size() || head >= config.num_heads) {
    throw Error(ErrorKind::IndexOutOfRange, "layer/head index out of range");
  }
  return layers[layer].k_weight.row_block(head * config.head_dim, config.head_dim).cast<double>();
}

ModelWeights load_model(const TensorContainer& container, const MappingConfig& config) {
  config.validate();

  std::vector<std::string> missing;
  auto check = [&](const std::string& role, std::size_t layer) {
    if (auto name = config.tensor_name(role, layer); name && !container.contains(*name)) {
      if (std::find(missing.begin(), missing.end(), *name) == missing.end()) missing.push_back(*name);
    }
  };
  for (const char* role : {"patch_weight", "patch_bias", "position_embedding", "cls_token",
                           "dist_token", "embed_norm_weight", "embed_norm_bias"}) {
    if (std::string(role) == "cls_token" && config.prefix_tokens < 1) continue;
    if (std::string(role) == "dist_token" && config.prefix_tokens < 2) continue;
    check(role, 0);
  }
  const std::vector<std::string> per_layer = {
      "norm1_weight", "norm1_bias", "norm2_weight", "norm2_bias", "q_weight", "q_bias",
      "k_weight", "k_bias", "v_weight", "v_bias", "qkv_weight", "qkv_bias", "out_weight",
      "out_bias", "fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias", "layer_scale1",
      "layer_scale2"};
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    for (const auto& role : per_layer) {
      const bool is_fused_role = role.rfind("qkv_", 0) == 0;
      const bool is_split_role = role.size() > 1 && role[1] == '_' &&
                                 (role[0] == 'q' || role[0] == 'k' || role[0] == 'v');
      if (config.fused_qkv && is_split_role) continue;
      if (!config.fused_qkv && is_fused_role) continue;
      check(role, l);
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing tensors:";
    for (const auto& m : missing) msg += " " + m;
    throw Error(ErrorKind::MissingTensor, msg);
  }

  const std::size_t d = config.embed_dim;
  const std::size_t qk_rows = config.num_heads * config.head_dim;
  const std::size_t v_rows = config.num_heads * config.value_dim;
  const auto sd = static_cast<std::int64_t>(d);
  Reader reader(container, config);
  ModelWeights w;
  w.config = config;

  const std::size_t p = config.patch_size;
  const auto sp = static_cast<std::int64_t>(p);
  w.patch_weight = MatrixF(d, 3 * p * p, reader.tensor(*config.tensor_name("patch_weight"),
                                                       {sd, 3, sp, sp}));
  w.patch_bias = reader.vector("patch_bias", 0, d);
  const std::size_t tokens = config.token_count();
  const std::string pos_name = *config.tensor_name("position_embedding");
  const auto& pos_entry = container.entry(pos_name);
  const auto pos_shape = squeeze_leading(pos_entry.shape);
  if (pos_shape.size() == 2 && pos_shape[1] == sd &&
      static_cast<std::size_t>(pos_shape[0]) != tokens) {
    throw Error(ErrorKind::ShapeMismatch,
                "positional embedding '" + pos_name + "' has " + std::to_string(pos_shape[0]) +
                    " tokens but (image_size / patch_size)^2 + prefix_tokens = " +
                    std::to_string(tokens));
  }
  w.position_embedding =
      MatrixF(tokens, d, reader.tensor(pos_name, {static_cast<std::int64_t>(tokens), sd}));
  w.prefix_embedding = MatrixF(config.prefix_tokens, d);
  for (std::size_t t = 0; t < config.prefix_tokens; ++t) {
    const auto token = reader.tensor(*config.tensor_name(t == 0 ? "cls_token" : "dist_token"), {sd});
    std::copy(token.begin(), token.end(), w.prefix_embedding.row(t).begin());
  }
  w.embed_norm_weight = reader.vector("embed_norm_weight", 0, d, true);
  w.embed_norm_bias = reader.vector("embed_norm_bias", 0, d, true);
  if (!w.embed_norm_weight.empty() && w.embed_norm_bias.empty()) {
    w.embed_norm_bias.assign(d, 0.0f);
  }

  w.layers.resize(config.num_layers);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights& lw = w.layers[l];
    if (config.fused_qkv) {
      const std::size_t fused_rows = 2 * qk_rows + v_rows;
      if (qk_rows != v_rows) {
        invalid("fused QKV requires value_dim == head_dim");
      }
      MatrixF fused = reader.matrix("qkv_weight", l, fused_rows, d);
      auto split = split_fused_qkv(fused, config.qkv_order);
      lw.q_weight = std::move(split.query);
      lw.k_weight = std::move(split.key);
      lw.v_weight = std::move(split.value);
      const auto bias = reader.vector("qkv_bias", l, fused_rows);
      auto bias_split = split_fused_qkv(MatrixF(fused_rows, 1, bias), config.qkv_order);
      lw.q_bias = bias_split.query.storage();
      lw.k_bias = bias_split.key.storage();
      lw.v_bias = bias_split.value.storage();
    } else {
      lw.q_weight = reader.matrix("q_weight", l, qk_rows, d);
      lw.k_weight = reader.matrix("k_weight", l, qk_rows, d);
      lw.v_weight = reader.matrix("v_weight", l, v_rows, d);
      lw.q_bias = reader.vector("q_bias", l, qk_rows);
      lw.k_bias = reader.vector("k_bias", l, qk_rows);
      lw.v_bias = reader.vector("v_bias", l, v_rows);
    }
    lw.out_weight = reader.matrix("out_weight", l, d, v_rows);
    lw.out_bias = reader.vector("out_bias", l, d);
    lw.norm1_weight = reader.vector("norm1_weight", l, d);
    lw.norm1_bias = reader.vector("norm1_bias", l, d);
    lw.norm2_weight = reader.vector("norm2_weight", l, d);
    lw.norm2_bias = reader.vector("norm2_bias", l, d);
    const auto& fc1 = container.entry(*config.tensor_name("fc1_weight", l));
    if (fc1.shape.size() != 2) {
      throw Error(ErrorKind::ShapeMismatch, "tensor '" + *config.tensor_name("fc1_weight", l) +
                                                "' must be two-dimensional");
    }
    const auto mlp = static_cast<std::size_t>(fc1.shape[0]);
    lw.fc1_weight = reader.matrix("fc1_weight", l, mlp, d);
    lw.fc1_bias = reader.vector("fc1_bias", l, mlp);
    lw.fc2_weight = reader.matrix("fc2_weight", l, d, mlp);
    lw.fc2_bias = reader.vector("fc2_bias", l, d);
    lw.layer_scale1 = reader.vector("layer_scale1", l, d, true);
    lw.layer_scale2 = reader.vector("layer_scale2", l, d, true);
  }
  return w;
}

}  // namespace qkscope
