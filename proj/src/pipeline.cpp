#include "qkscope/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "qkscope/analysis.hpp"
#include "qkscope/error.hpp"
#include "qkscope/image.hpp"
#include "qkscope/interaction.hpp"
#include "qkscope/io.hpp"
#include "qkscope/linalg.hpp"
#include "qkscope/tensor_container.hpp"

namespace fs = std::filesystem;

namespace qkscope {

// ---- selectors and threads -----------------------------------------------------------

namespace {

std::size_t parse_index(const std::string& token, const std::string& what) {
  std::size_t value = 0;
  const char* first = token.data();
  const char* last = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (token.empty() || ec != std::errc{} || ptr != last) {
    throw Error(ErrorKind::InvalidArgument, "bad " + what + " selector entry '" + token + "'");
  }
  return value;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::size_t> parse_selector(const std::string& text, std::size_t bound,
                                        const std::string& what) {
  const std::string spec = trim(text);
  std::vector<std::size_t> out;
  if (spec.empty() || spec == "all") {
    for (std::size_t i = 0; i < bound; ++i) out.push_back(i);
    return out;
  }
  std::set<std::size_t> chosen;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    const auto dash = part.find('-');
    std::size_t lo = 0, hi = 0;
    if (dash == std::string::npos) {
      lo = hi = parse_index(part, what);
    } else {
      lo = parse_index(trim(part.substr(0, dash)), what);
      hi = parse_index(trim(part.substr(dash + 1)), what);
      if (hi < lo) throw Error(ErrorKind::InvalidArgument, "empty " + what + " range '" + part + "'");
    }
    if (hi >= bound) {
      throw Error(ErrorKind::IndexOutOfRange, what + " index " + std::to_string(hi) +
                                                  " out of range (count " + std::to_string(bound) + ")");
    }
    for (std::size_t i = lo; i <= hi; ++i) chosen.insert(i);
  }
  return {chosen.begin(), chosen.end()};
}

std::size_t resolve_threads(std::size_t requested) noexcept {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(resolve_threads(threads), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  std::size_t first_index = n;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    while (!failed.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (i < first_index) {
          first_index = i;
          first_error = std::current_exception();
        }
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---- datasets ------------------------------------------------------------------------

namespace {

bool is_image_ext(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

fs::path existing(const fs::path& p) { return fs::is_regular_file(p) ? p : fs::path{}; }

fs::path find_image(const fs::path& dir) {
  for (const char* name : {"image.png", "image.jpg", "image.jpeg"}) {
    if (fs::is_regular_file(dir / name)) return dir / name;
  }
  return {};
}

}  // namespace

std::vector<Sample> scan_dataset(const fs::path& images, const fs::path& masks,
                                 const fs::path& labels) {
  if (images.empty()) throw Error(ErrorKind::InvalidArgument, "no --images directory given");
  if (!fs::is_directory(images)) {
    throw Error(ErrorKind::Io, "images directory '" + images.string() + "' does not exist");
  }
  std::map<std::string, Sample> found;
  for (const auto& entry : fs::directory_iterator(images)) {
    const fs::path& p = entry.path();
    if (entry.is_directory()) {
      Sample s;
      s.id = p.filename().string();
      s.image = find_image(p);
      s.dump = existing(p / "embeddings.safetensors");
      s.target = existing(p / "target.png");
      s.distractor = existing(p / "distractor.png");
      s.labels = existing(p / "labels.png");
      if (s.image.empty() && s.dump.empty()) continue;
      found[s.id] = std::move(s);
    } else if (entry.is_regular_file()) {
      const std::string id = p.stem().string();
      if (is_image_ext(p)) {
        auto& s = found[id];
        s.id = id;
        s.image = p;
      } else if (p.extension() == ".safetensors") {
        auto& s = found[id];
        s.id = id;
        s.dump = p;
      }
    }
  }
  std::vector<Sample> out;
  for (auto& [id, s] : found) {
    if (!masks.empty()) {
      if (s.target.empty()) s.target = existing(masks / id / "target.png");
      if (s.distractor.empty()) s.distractor = existing(masks / id / "distractor.png");
    }
    if (!labels.empty() && s.labels.empty()) {
      s.labels = existing(labels / (id + ".png"));
      if (s.labels.empty()) s.labels = existing(labels / id / "labels.png");
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) {
    throw Error(ErrorKind::EmptyCollection, "no samples found under '" + images.string() + "'");
  }
  return out;
}

// ---- model and embeddings ------------------------------------------------------------

LoadedModel load_checkpoint(const fs::path& checkpoint, const fs::path& mapping) {
  if (checkpoint.empty()) throw Error(ErrorKind::InvalidArgument, "no --checkpoint given");
  if (mapping.empty()) throw Error(ErrorKind::InvalidArgument, "no --mapping given");
  const auto bytes = read_file_bytes(checkpoint);
  const std::string mapping_text = read_text_file(mapping);
  LoadedModel model;
  model.config = parse_mapping_config(mapping_text);
  model.checkpoint_sha256 = sha256_hex(std::span<const std::byte>(bytes));
  model.mapping_sha256 = sha256_hex(mapping_text);
  const TensorContainer container = parse_container_bytes(bytes);
  model.weights = load_model(container, model.config);
  return model;
}

EmbeddingStore::EmbeddingStore(const LoadedModel& model, fs::path cache_dir, std::size_t cap_bytes)
    : model_(model), encoder_(model.weights), cache_dir_(std::move(cache_dir)), cap_bytes_(cap_bytes) {}

std::string EmbeddingStore::key_for(const Sample& sample) const {
  const fs::path& source = sample.image.empty() ? sample.dump : sample.image;
  return sha256_hex(model_.checkpoint_sha256 + ":" + model_.mapping_sha256 + ":" + sha256_file(source));
}

fs::path EmbeddingStore::cache_path(const Sample& sample) const {
  if (cache_dir_.empty()) return {};
  return cache_dir_ / (key_for(sample) + ".safetensors");
}

std::shared_ptr<const EmbeddingStack> EmbeddingStore::get(const Sample& sample) {
  const std::string key = key_for(sample);
  {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      order_.splice(order_.begin(), order_, it->second.second);
      return it->second.first;
    }
  }
  std::shared_ptr<EmbeddingStack> stack;
  const fs::path cached = cache_dir_.empty() ? fs::path{} : cache_dir_ / (key + ".safetensors");
  if (!sample.dump.empty() && sample.image.empty()) {
    stack = std::make_shared<EmbeddingStack>(load_embedding_dump(sample.dump));
  } else if (!cached.empty() && fs::is_regular_file(cached)) {
    stack = std::make_shared<EmbeddingStack>(load_embedding_dump(cached));
  } else if (!sample.dump.empty()) {
    stack = std::make_shared<EmbeddingStack>(load_embedding_dump(sample.dump));
  } else {
    const RgbImage rgb = read_image(sample.image);
    const ImageTensor tensor = make_image_tensor(rgb, model_.config, sample.id);
    stack = std::make_shared<EmbeddingStack>(encoder_.forward(tensor, false).embeddings);
    {
      std::lock_guard lock(mutex_);
      ++computed_;
    }
    if (!cached.empty()) save_embedding_dump(cached, *stack);
  }
  stack->image_id = sample.id;
  if (stack->layers.size() != model_.config.num_layers ||
      stack->grid.rows != model_.config.grid_side() || stack->grid.cols != model_.config.grid_side() ||
      stack->prefix_tokens != model_.config.prefix_tokens) {
    throw Error(ErrorKind::GridMismatch, "embeddings of '" + sample.id + "' do not match the model layout");
  }
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key);
  if (it != entries_.end()) return it->second.first;
  insert_locked(key, stack);
  return stack;
}

void EmbeddingStore::insert_locked(const std::string& key, std::shared_ptr<const EmbeddingStack> stack) {
  bytes_ += stack->byte_size();
  order_.push_front(key);
  entries_.emplace(key, std::make_pair(std::move(stack), order_.begin()));
  while (bytes_ > cap_bytes_ && order_.size() > 1) {
    const std::string victim = order_.back();
    order_.pop_back();
    auto it = entries_.find(victim);
    bytes_ -= it->second.first->byte_size();
    entries_.erase(it);
  }
}

std::size_t EmbeddingStore::resident_bytes() const {
  std::lock_guard lock(mutex_);
  return bytes_;
}

std::size_t EmbeddingStore::computed() const {
  std::lock_guard lock(mutex_);
  return computed_;
}

std::vector<float> attention_score_row(const ModelWeights& weights, const MatrixF& embeddings,
                                       std::size_t layer, std::size_t head, std::size_t token) {
  const auto& cfg = weights.config;
  if (layer >= weights.layers.size() || head >= cfg.num_heads || token >= embeddings.rows()) {
    throw Error(ErrorKind::IndexOutOfRange, "attention_score_row: index out of range");
  }
  const LayerWeights& lw = weights.layers[layer];
  const std::size_t dk = cfg.head_dim;
  const std::size_t d = cfg.embed_dim;
  const std::size_t base = head * dk;
  std::vector<double> q(dk);
  const auto x = embeddings.row(token);
  for (std::size_t a = 0; a < dk; ++a) {
    double acc = lw.q_bias.empty() ? 0.0 : lw.q_bias[base + a];
    const auto w = lw.q_weight.row(base + a);
    for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(w[c]) * x[c];
    q[a] = acc;
  }
  // Fold the query into the key projection: s_j = (W_kᵀq)·x_j + q·b_k.
  std::vector<double> folded(d, 0.0);
  double offset = 0.0;
  for (std::size_t a = 0; a < dk; ++a) {
    const auto w = lw.k_weight.row(base + a);
    for (std::size_t c = 0; c < d; ++c) folded[c] += q[a] * w[c];
    if (!lw.k_bias.empty()) offset += q[a] * lw.k_bias[base + a];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<float> row(embeddings.rows());
  for (std::size_t j = 0; j < embeddings.rows(); ++j) {
    const auto xj = embeddings.row(j);
    double acc = offset;
    for (std::size_t c = 0; c < d; ++c) acc += folded[c] * xj[c];
    row[j] = static_cast<float>(acc * scale);
  }
  return row;
}

// ---- runs ----------------------------------------------------------------------------

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"modes",     "cosine-trend", "preference",
                                              "mode-maps", "mine",         "anisotropy",
                                              "same-object", "verify"};
  return names;
}

namespace {

struct HeadRef {
  std::size_t layer;
  std::size_t head;
};

std::string default_mode_selector(const std::string& command) {
  return command == "same-object" ? "all" : "0";
}

std::string mode_selector(const RunConfig& c) {
  return c.mode.empty() ? default_mode_selector(c.command) : c.mode;
}

std::vector<HeadRef> selected_heads(const RunConfig& c, const MappingConfig& m) {
  std::vector<HeadRef> out;
  const auto layers = parse_selector(c.layer, m.num_layers, "layer");
  const auto heads = parse_selector(c.head, m.num_heads, "head");
  for (auto l : layers)
    for (auto h : heads) out.push_back({l, h});
  return out;
}

std::vector<HeadModes> decompose_selected(const LoadedModel& model, const std::vector<HeadRef>& refs,
                                          std::size_t threads) {
  std::vector<HeadModes> out(refs.size());
  parallel_for(refs.size(), threads, [&](std::size_t i) {
    out[i] = decompose_head(make_interaction_head(model.weights, refs[i].layer, refs[i].head));
  });
  return out;
}

std::string path_string(const fs::path& p) { return p.generic_string(); }

/// Writes artifacts and tracks their digests for the manifest.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  void text(const std::string& rel, const std::string& content) {
    write_text_file(root_ / rel, content);
    digests_[rel] = sha256_hex(content);
  }
  void png(const std::string& rel, const RgbImage& image) {
    const auto bytes = encode_png(image);
    write_file_bytes(root_ / rel, std::as_bytes(std::span<const std::uint8_t>(bytes)));
    digests_[rel] = sha256_hex(std::as_bytes(std::span<const std::uint8_t>(bytes)));
  }
  void json(const std::string& rel, const Json& j) { text(rel, j.dump(2) + "\n"); }
  const std::map<std::string, std::string>& digests() const noexcept { return digests_; }
  const fs::path& root() const noexcept { return root_; }

 private:
  fs::path root_;
  std::map<std::string, std::string> digests_;
};

struct Inputs {
  Json entries = Json::array();
  void add(const std::string& role, const fs::path& path, const std::string& digest) {
    entries.push_back({{"role", role}, {"path", path_string(path)}, {"sha256", digest}});
  }
  void add_file(const std::string& role, const fs::path& path) {
    if (!path.empty()) add(role, path, sha256_file(path));
  }
};

void add_sample_inputs(Inputs& inputs, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    inputs.add_file("image:" + s.id, s.image);
    inputs.add_file("dump:" + s.id, s.dump);
    inputs.add_file("target:" + s.id, s.target);
    inputs.add_file("distractor:" + s.id, s.distractor);
    inputs.add_file("labels:" + s.id, s.labels);
  }
}

Json config_json(const RunConfig& c) {
  Json j;
  j["command"] = c.command;
  j["checkpoint"] = path_string(c.checkpoint);
  j["mapping"] = path_string(c.mapping);
  j["images"] = path_string(c.images);
  j["masks"] = path_string(c.masks);
  j["labels"] = path_string(c.labels);
  j["layer"] = c.layer;
  j["head"] = c.head;
  j["mode"] = mode_selector(c);
  j["top_k"] = c.top_k;
  j["seed"] = c.seed;
  j["negative"] = c.negative;
  j["confidence"] = c.confidence;
  j["null_samples"] = c.null_samples;
  return j;
}

void write_manifest(const RunConfig& c, ArtifactWriter& writer, const Inputs& inputs, Json extra) {
  Json m;
  m["tool"] = kToolName;
  m["version"] = kToolVersion;
  m["command"] = c.command;
  m["seed"] = c.seed;
  m["config"] = config_json(c);
  m["inputs"] = inputs.entries;
  Json artifacts = Json::array();
  for (const auto& [name, digest] : writer.digests()) {
    artifacts.push_back({{"path", name}, {"sha256", digest}});
  }
  m["artifacts"] = std::move(artifacts);
  if (!extra.is_null()) m["details"] = std::move(extra);
  m["rerun"] = rerun_command_line(c);
  write_text_file(writer.root() / "manifest.json", m.dump(2) + "\n");
}

std::size_t cap_bytes(const RunConfig& c) { return c.cache_mb * std::size_t{1} << 20; }

// ---- modes / cosine-trend ---------------------------------------------------------------

void cmd_modes(const RunConfig& c) {
  const LoadedModel model = load_checkpoint(c.checkpoint, c.mapping);
  const auto refs = selected_heads(c, model.config);
  const auto modes = decompose_selected(model, refs, c.threads);
  ArtifactWriter w(c.out);
  w.json("modes.json", emit_modes_report(model.config, modes, DecomposeOptions{}.degeneracy_tol));
  Inputs in;
  in.add("checkpoint", c.checkpoint, model.checkpoint_sha256);
  in.add("mapping", c.mapping, model.mapping_sha256);
  write_manifest(c, w, in, {});
}

void cmd_cosine_trend(const RunConfig& c) {
  const LoadedModel model = load_checkpoint(c.checkpoint, c.mapping);
  const auto refs = selected_heads(c, model.config);
  const auto modes = decompose_selected(model, refs, c.threads);
  std::vector<TrendRecord> records;
  for (const auto& h : modes) records.push_back({h.layer, h.head, h.weighted_cosine});
  const NullInterval null = null_interval(model.config.embed_dim, c.confidence, c.seed, c.null_samples);
  ArtifactWriter w(c.out);
  w.text("cosine_trend.csv", emit_trend(records, model.config.num_layers, null));
  Inputs in;
  in.add("checkpoint", c.checkpoint, model.checkpoint_sha256);
  in.add("mapping", c.mapping, model.mapping_sha256);
  Json extra;
  extra["null_interval"] = {{"dim", model.config.embed_dim}, {"lo", null.lo}, {"hi", null.hi}};
  write_manifest(c, w, in, extra);
}

// ---- preference --------------------------------------------------------------------------

void cmd_preference(const RunConfig& c) {
  const LoadedModel model = load_checkpoint(c.checkpoint, c.mapping);
  const auto refs = selected_heads(c, model.config);
  auto samples = scan_dataset(c.images, c.masks, c.labels);
  std::erase_if(samples, [](const Sample& s) { return s.target.empty() || s.distractor.empty(); });
  if (samples.empty()) {
    throw Error(ErrorKind::EmptyCollection, "no samples with both target and distractor masks");
  }
  EmbeddingStore store(model, c.cache, cap_bytes(c));
  const TokenGrid grid{model.config.grid_side(), model.config.grid_side()};
  const std::size_t prefix = model.config.prefix_tokens;
  std::vector<std::vector<PreferenceRecord>> per_sample(samples.size());
  parallel_for(samples.size(), c.threads, [&](std::size_t i) {
    const Sample& s = samples[i];
    const MatrixD target_px = read_mask(s.target);
    const MatrixD distractor_px = read_mask(s.distractor);
    const MaskSet masks = make_mask_set(pool_mask(target_px, grid), pool_mask(distractor_px, grid));
    const std::size_t t_tok = prefix + select_token(target_px, grid);
    const std::size_t d_tok = prefix + select_token(distractor_px, grid);
    const auto stack = store.get(s);
    for (const auto& r : refs) {
      const MatrixF& x = stack->layers[r.layer];
      const auto t_row = attention_score_row(model.weights, x, r.layer, r.head, t_tok);
      const auto d_row = attention_score_row(model.weights, x, r.layer, r.head, d_tok);
      PreferenceRecord rec = preference_ratios(attention_map_from_row(t_row, grid, prefix),
                                               attention_map_from_row(d_row, grid, prefix), masks);
      rec.image_id = s.id;
      rec.layer = r.layer;
      rec.head = r.head;
      per_sample[i].push_back(std::move(rec));
    }
  });
  std::vector<PreferenceRecord> records;
  for (auto& v : per_sample)
    for (auto& r : v) records.push_back(std::move(r));
  ArtifactWriter w(c.out);
  w.text("preference.csv", emit_preferences(records));
  w.text("preference_summary.csv", emit_preference_summary(records, model.config.num_layers));
  Inputs in;
  in.add("checkpoint", c.checkpoint, model.checkpoint_sha256);
  in.add("mapping", c.mapping, model.mapping_sha256);
  add_sample_inputs(in, samples);
  Json extra;
  extra["query_token"] = "argmax of the pooled mask";
  write_manifest(c, w, in, extra);
}

// ---- mining helpers ----------------------------------------------------------------------

struct ModeRef {
  std::size_t head;  // index into the decomposed heads
  std::size_t mode;
  Orientation orientation;
};

std::vector<ModeRef> selected_modes(const RunConfig& c, const std::vector<HeadModes>& heads,
                                    bool both_orientations) {
  std::vector<ModeRef> out;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    for (auto n : parse_selector(mode_selector(c), heads[h].modes.size(), "mode")) {
      out.push_back({h, n, Orientation::Positive});
      if (both_orientations) out.push_back({h, n, Orientation::Negative});
    }
  }
  return out;
}

SingularMode oriented(const SingularMode& m, Orientation o) {
  return o == Orientation::Positive ? m : opposite_orientation(m);
}

/// scores[image][mode ref]
std::vector<std::vector<double>> score_images(const std::vector<Sample>& samples, EmbeddingStore& store,
                                              const std::vector<HeadModes>& heads,
                                              const std::vector<ModeRef>& refs, TokenGrid grid,
                                              std::size_t prefix, std::size_t threads) {
  std::vector<SingularMode> modes;
  for (const auto& r : refs) modes.push_back(oriented(heads[r.head].modes[r.mode], r.orientation));
  std::vector<std::vector<double>> scores(samples.size(), std::vector<double>(refs.size()));
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto stack = store.get(samples[i]);
    for (std::size_t j = 0; j < refs.size(); ++j) {
      scores[i][j] = image_mode_score(stack->layers[heads[refs[j].head].layer], modes[j], grid, prefix);
    }
  });
  return scores;
}

std::vector<RankedImage> top_for(const std::vector<Sample>& samples,
                                 const std::vector<std::vector<double>>& scores, std::size_t j,
                                 std::size_t k) {
  std::vector<RankedImage> scored;
  for (std::size_t i = 0; i < samples.size(); ++i) scored.push_back({samples[i].id, scores[i][j]});
  return rank_images(std::move(scored), k);
}

const char* orientation_name(Orientation o) { return o == Orientation::Positive ? "+" : "-"; }

Json mode_header(const HeadModes& h, const SingularMode& m) {
  Json j;
  j["layer"] = h.layer;
  j["head"] = h.head;
  j["mode"] = m.index;
  j["sigma"] = m.sigma;
  j["cosine"] = m.cosine;
  j["degenerate"] = m.degenerate;
  return j;
}

std::map<std::string, std::size_t> index_by_id(const std::vector<Sample>& samples) {
  std::map<std::string, std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].id] = i;
  return out;
}

// ---- mine / mode-maps ----------------------------------------------------------------

void cmd_mine(const RunConfig& c) {
  const LoadedModel model = load_checkpoint(c.checkpoint, c.mapping);
  const auto heads = decompose_selected(model, selected_heads(c, model.config), c.threads);
  const auto samples = scan_dataset(c.images, c.masks, c.labels);
  if (c.top_k == 0) throw Error(ErrorKind::InvalidArgument, "--top-k must be positive");
  const auto refs = selected_modes(c, heads, c.negative);
  EmbeddingStore store(model, c.cache, cap_bytes(c));
  const TokenGrid grid{model.config.grid_side(), model.config.grid_side()};
  const auto scores = score_images(samples, store, heads, refs, grid, model.config.prefix_tokens, c.threads);
  Json list = Json::array();
  for (std::size_t j = 0; j < refs.size(); ++j) {
    const auto& h = heads[refs[j].head];
    Json e = mode_header(h, h.modes[refs[j].mode]);
    e["orientation"] = orientation_name(refs[j].orientation);
    Json top = Json::array();
    std::size_t rank = 0;
    for (const auto& r : top_for(samples, scores, j, c.top_k)) {
      top.push_back({{"rank", rank++}, {"image", r.image_id}, {"score", r.score}});
    }
    e["top"] = std::move(top);
    list.push_back(std::move(e));
  }
  Json report;
  report["model_id"] = model.config.model_id;
  report["num_images"] = samples.size();
  report["score"] = "max_t qmap * max_t kmap (signed)";
  report["modes"] = std::move(list);
  ArtifactWriter w(c.out);
  w.json("mining.json", report);
  Inputs in;
  in.add("checkpoint", c.checkpoint, model.checkpoint_sha256);
  in.add("mapping", c.mapping, model.mapping_sha256);
  add_sample_inputs(in, samples);
  write_manifest(c, w, in, {});
}

ImageTensor overlay_base(const Sample& s, const MappingConfig& cfg) {
  if (s.image.empty()) {
    ImageTensor blank;
    blank.height = blank.width = cfg.image_size;
    blank.rgb.assign(blank.height * blank.width * 3, 0.0f);
    blank.id = s.id;
    return blank;
  }
  return make_image_tensor(read_image(s.image), cfg, s.id);
}

void cmd_mode_maps(const RunConfig& c) {
  const LoadedModel model = load_checkpoint(c.checkpoint, c.mapping);
  const auto heads = decompose_selected(model, selected_heads(c, model.config), c.threads);
  const auto samples = scan_dataset(c.images, c.masks, c.labels);
  if (c.top_k == 0) throw Error(ErrorKind::InvalidArgument, "--top-k must be positive");
  const auto refs = selected_modes(c, heads, c.negative);
  EmbeddingStore store(model, c.cache, cap_bytes(c));
  const TokenGrid grid{model.config.grid_side(), model.config.grid_side()};
  const std::size_t prefix = model.config.prefix_tokens;
  const auto scores = score_images(samples, store, heads, refs, grid, prefix, c.threads);
  const auto by_id = index_by_id(samples);

  struct Job {
    std::size_t ref;
    std::size_t rank;
    RankedImage image;
    std::string file;
  };
  std::vector<Job> jobs;
  Json list = Json::array();
  for (std::size_t j = 0; j < refs.size(); ++j) {
    const auto& h = heads[refs[j].head];
    const auto& m = h.modes[refs[j].mode];
    Json e = mode_header(h, m);
    e["orientation"] = orientation_name(refs[j].orientation);
    Json imgs = Json::array();
    std::size_t rank = 0;
    for (const auto& r : top_for(samples, scores, j, c.top_k)) {
      const std::string file = "overlays/L" + std::to_string(h.layer) + "_H" + std::to_string(h.head) +
                               "_M" + std::to_string(m.index) +
                               (refs[j].orientation == Orientation::Positive ? "_pos" : "_neg") + "/rank" +
                               std::to_string(rank) + "_" + r.image_id + ".png";
      imgs.push_back({{"rank", rank}, {"image", r.image_id}, {"score", r.score}, {"file", file}});
      jobs.push_back({j, rank, r, file});
      ++rank;
    }
    e["images"] = std::move(imgs);
    list.push_back(std::move(e));
  }

  std::vector<RgbImage> rendered(jobs.size());
  parallel_for(jobs.size(), c.threads, [&](std::size_t i) {
    const Job& job = jobs[i];
    const ModeRef& ref = refs[job.ref];
    const auto& h = heads[ref.head];
    const Sample& s = samples[by_id.at(job.image.image_id)];
    const auto stack = store.get(s);
    const ModeMap maps = mode_maps(stack->layers[h.layer], h.modes[ref.mode], grid, prefix);
    rendered[i] = render_overlay(overlay_base(s, model.config), maps, ref.orientation);
  });

  // Per-image strongest modes of every selected head.
  Json per_image = Json::array();
  std::vector<std::vector<std::vector<std::size_t>>> top_modes(samples.size());
  parallel_for(samples.size(), c.threads, [&](std::size_t i) {
    const auto stack = store.get(samples[i]);
    for (const auto& h : heads) {
      top_modes[i].push_back(rank_modes_for_image(stack->layers[h.layer], h,
                                                  std::min(c.top_k, h.modes.size()), grid, prefix));
    }
  });
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Json e;
    e["image"] = samples[i].id;
    Json hs = Json::array();
    for (std::size_t h = 0; h < heads.size(); ++h) {
      hs.push_back({{"layer", heads[h].layer}, {"head", heads[h].head}, {"top_modes", top_modes[i][h]}});
    }
    e["heads"] = std::move(hs);
    per_image.push_back(std::move(e));
  }

  ArtifactWriter w(c.out);
  for (std::size_t i = 0; i < jobs.size(); ++i) w.png(jobs[i].file, rendered[i]);
  Json report;
  report["model_id"] = model.config.model_id;
  report["colors"] = {{"query", "red"}, {"key", "cyan"}};
  report["modes"] = std::move(list);
  report["image_top_modes"] = std::move(per_image);
  w.json("mode_maps.json", report);
  Inputs in;
  in.add("checkpoint", c.checkpoint, model.checkpoint_sha256);
  in.add("mapping", c.mapping, model.mapping_sha256);
  add_sample_inputs(in, samples);
  write_manifest(c, w, in, {});
}

// ---- anisotropy ---------------------------------------------------------------------------

void cmd_anisotropy(const RunConfig& c) {
  const LoadedModel model = load_checkpoint(c.checkpoint, c.mapping);
  const auto heads = decompose_selected(model, selected_heads(c, model.config), c.threads);
  const auto samples = scan_dataset(c.images, c.masks, c.labels);
  if (samples.size() < 2) throw Error(ErrorKind::TooFewImages, "anisotropy needs at least two images");
  EmbeddingStore store(model, c.cache, cap_bytes(c));
  const std::size_t prefix = model.config.prefix_tokens;
  const TokenGrid grid{model.config.grid_side(), model.config.grid_side()};
  const std::size_t centre = center_token(grid, prefix);
  // Only center tokens are needed; keep them instead of whole stacks.
  std::vector<EmbeddingStack> centers(samples.size());
  parallel_for(samples.size(), c.threads, [&](std::size_t i) {
    const auto stack = store.get(samples[i]);
    EmbeddingStack slim;
    slim.grid = TokenGrid{1, 1};
    slim.prefix_tokens = 0;
    for (const auto& x : stack->layers) slim.layers.push_back(x.row_block(centre, 1));
    centers[i] = std::move(slim);
  });
  std::map<std::size_t, double> baseline;
  for (const auto& h : heads) {
    if (!baseline.count(h.layer)) baseline[h.layer] = anisotropy_baseline(centers, h.layer);
  }
  std::ostringstream os;
  os << "layer,head,norm_layer,weighted_cos,baseline,relative_cos\n";
  for (const auto& h : heads) {
    const double b = baseline[h.layer];
    std::optional<double> rel;
    if (h.weighted_cosine) rel = relative_cosine(*h.weighted_cosine, b);
    os << h.layer << ',' << h.head << ',' << format_double(normalized_layer(h.layer, model.config.num_layers))
       << ',' << format_optional(h.weighted_cosine) << ',' << format_double(b) << ','
       << format_optional(rel) << '\n';
  }
  ArtifactWriter w(c.out);
  w.text("anisotropy.csv", os.str());
  Inputs in;
  in.add("checkpoint", c.checkpoint, model.checkpoint_sha256);
  in.add("mapping", c.mapping, model.mapping_sha256);
  add_sample_inputs(in, samples);
  Json extra;
  extra["baseline"] = "mean pairwise cosine of center-token attention inputs";
  extra["center_token"] = centre;
  write_manifest(c, w, in, extra);
}

// ---- same-object --------------------------------------------------------------------------

void cmd_same_object(const RunConfig& c) {
  const LoadedModel model = load_checkpoint(c.checkpoint, c.mapping);
  const auto heads = decompose_selected(model, selected_heads(c, model.config), c.threads);
  auto samples = scan_dataset(c.images, c.masks, c.labels);
  std::erase_if(samples, [](const Sample& s) { return s.labels.empty(); });
  if (samples.empty()) throw Error(ErrorKind::EmptyCollection, "no samples with label maps");
  if (c.top_k == 0) throw Error(ErrorKind::InvalidArgument, "--top-k must be positive");
  const TokenGrid grid{model.config.grid_side(), model.config.grid_side()};
  const std::size_t prefix = model.config.prefix_tokens;
  std::vector<LabelMap> labels(samples.size());
  parallel_for(samples.size(), c.threads,
               [&](std::size_t i) { labels[i] = pool_labels(read_label_png(samples[i].labels), grid); });
  const auto refs = selected_modes(c, heads, false);
  EmbeddingStore store(model, c.cache, cap_bytes(c));
  const auto scores = score_images(samples, store, heads, refs, grid, prefix, c.threads);
  const auto by_id = index_by_id(samples);

  // Stacks needed by the mined images, loaded once each.
  std::set<std::size_t> needed;
  std::vector<std::vector<RankedImage>> mined(refs.size());
  for (std::size_t j = 0; j < refs.size(); ++j) {
    mined[j] = top_for(samples, scores, j, c.top_k);
    for (const auto& r : mined[j]) needed.insert(by_id.at(r.image_id));
  }
  std::vector<std::shared_ptr<const EmbeddingStack>> stacks(samples.size());
  const std::vector<std::size_t> need_list(needed.begin(), needed.end());
  parallel_for(need_list.size(), c.threads,
               [&](std::size_t i) { stacks[need_list[i]] = store.get(samples[need_list[i]]); });

  std::ostringstream csv;
  csv << "layer,head,norm_layer,probability,modes,top_k\n";
  Json per_head = Json::array();
  for (std::size_t h = 0; h < heads.size(); ++h) {
    HeadModes subset = heads[h];
    subset.modes.clear();
    std::vector<std::vector<LabeledEmbedding>> lists;
    std::vector<std::vector<std::string>> ids;
    for (std::size_t j = 0; j < refs.size(); ++j) {
      if (refs[j].head != h) continue;
      subset.modes.push_back(heads[h].modes[refs[j].mode]);
      std::vector<LabeledEmbedding> list;
      std::vector<std::string> names;
      for (const auto& r : mined[j]) {
        const std::size_t i = by_id.at(r.image_id);
        list.push_back({stacks[i].get(), &labels[i]});
        names.push_back(r.image_id);
      }
      lists.push_back(std::move(list));
      ids.push_back(std::move(names));
    }
    const SameObjectResult res = same_object_probability(subset, lists);
    csv << subset.layer << ',' << subset.head << ','
        << format_double(normalized_layer(subset.layer, model.config.num_layers)) << ','
        << format_double(res.probability) << ',' << subset.modes.size() << ',' << c.top_k << '\n';
    Json e;
    e["layer"] = subset.layer;
    e["head"] = subset.head;
    e["probability"] = res.probability;
    Json modes = Json::array();
    for (std::size_t n = 0; n < subset.modes.size(); ++n) {
      Json m = mode_header(subset, subset.modes[n]);
      m["probability"] = res.mode_probability[n];
      m["images"] = ids[n];
      m["same_object"] = res.indicators[n];
      modes.push_back(std::move(m));
    }
    e["modes"] = std::move(modes);
    per_head.push_back(std::move(e));
  }
  Json report;
  report["model_id"] = model.config.model_id;
  report["metadata"] = {{"object_score", "mean_projection_per_token"},
                        {"weighting", "sigma"},
                        {"top_k", c.top_k},
                        {"label_zero", "ordinary object"}};
  report["heads"] = std::move(per_head);
  ArtifactWriter w(c.out);
  w.text("same_object.csv", csv.str());
  w.json("same_object.json", report);
  Inputs in;
  in.add("checkpoint", c.checkpoint, model.checkpoint_sha256);
  in.add("mapping", c.mapping, model.mapping_sha256);
  add_sample_inputs(in, samples);
  write_manifest(c, w, in, {});
}

// ---- verify ---------------------------------------------------------------------------------

struct CheckLog {
  Json list = Json::array();
  bool all_passed = true;
  void add(const std::string& name, double value, double tolerance, bool passed) {
    list.push_back({{"name", name}, {"value", value}, {"tolerance", tolerance}, {"passed", passed}});
    all_passed = all_passed && passed;
  }
  void add_at_most(const std::string& name, double value, double tolerance) {
    add(name, value, tolerance, std::isfinite(value) && value <= tolerance);
  }
};

MatrixD gaussian(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixD m(rows, cols);
  for (auto& v : m.data()) v = n(rng);
  return m;
}

MatrixD reconstruct(const HeadModes& modes, std::size_t d) {
  MatrixD m(d, d);
  for (const auto& mode : modes.modes)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) m(i, j) += mode.sigma * mode.u[i] * mode.v[j];
  return m;
}

void verify_head(CheckLog& log, const InteractionHead& head, std::mt19937_64& rng,
                 const std::string& tag) {
  const HeadModes modes = decompose_head(head);
  const std::size_t d = head.embed_dim();
  const double norm = std::max(1.0, linalg::frobenius_norm(head.interaction));
  MatrixD residual = reconstruct(modes, d);
  for (std::size_t i = 0; i < residual.size(); ++i) residual.data()[i] -= head.interaction.data()[i];
  log.add_at_most(tag + ".reconstruction", linalg::frobenius_norm(residual) / norm, 1e-9);
  std::size_t violations = 0;
  for (std::size_t n = 1; n < modes.modes.size(); ++n)
    if (modes.modes[n].sigma > modes.modes[n - 1].sigma) ++violations;
  log.add(tag + ".ordering", static_cast<double>(violations), 0.0, violations == 0);

  // Decomposition-sum identity on random token pairs.
  double worst = 0.0;
  const double sigma1 = modes.modes.empty() ? 0.0 : modes.modes.front().sigma;
  for (int t = 0; t < 20; ++t) {
    const MatrixD x = gaussian(rng, d, 1);
    const MatrixD y = gaussian(rng, d, 1);
    const auto dec = score_decomposition(x.data(), y.data(), modes);
    double direct = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) direct += x.data()[i] * head.interaction(i, j) * y.data()[j];
    const double scale = std::max(1e-300, linalg::norm2<double>(x.data()) *
                                              linalg::norm2<double>(y.data()) * sigma1);
    worst = std::max(worst, std::abs(dec.total - direct) / scale);
  }
  log.add_at_most(tag + ".decomposition_sum", worst, 1e-8);

  if (modes.weighted_cosine) {
    const double wc = *modes.weighted_cosine;
    log.add(tag + ".weighted_cosine_bounds", wc, 1.0, wc >= -1.0 && wc <= 1.0);
    InteractionHead scaled = head;
    for (auto& v : scaled.w_query.data()) v *= 3.5;
    scaled.interaction = interaction_matrix(scaled.w_query, scaled.w_key);
    const auto sm = decompose_head(scaled);
    log.add_at_most(tag + ".scale_invariance", std::abs(*sm.weighted_cosine - wc), 1e-10);
  }

  // Basis change with a well-conditioned A.
  const std::size_t dk = head.head_dim();
  MatrixD a = gaussian(rng, dk, dk);
  for (std::size_t i = 0; i < dk; ++i) a(i, i) += 3.0 * std::sqrt(static_cast<double>(dk));
  if (linalg::condition_number(a) < 10.0) {
    const BasisChange bc = apply_basis_change(head, a);
    const double rel = linalg::max_abs_diff(bc.head.interaction, head.interaction) / norm;
    log.add_at_most(tag + ".basis_change_scores", rel, 1e-9);
  }
}

void cmd_verify(const RunConfig& c) {
  CheckLog log;
  std::mt19937_64 rng(c.seed);
  Inputs in;
  std::optional<LoadedModel> model;
  if (!c.checkpoint.empty()) {
    model = load_checkpoint(c.checkpoint, c.mapping);
    in.add("checkpoint", c.checkpoint, model->checkpoint_sha256);
    in.add("mapping", c.mapping, model->mapping_sha256);
    for (const auto& r : selected_heads(c, model->config)) {
      verify_head(log, make_interaction_head(model->weights, r.layer, r.head), rng,
                  "model.L" + std::to_string(r.layer) + ".H" + std::to_string(r.head));
    }
  }
  for (int t = 0; t < 4; ++t) {
    const std::size_t d = 12, dk = 4;
    verify_head(log, make_interaction_head(0, static_cast<std::size_t>(t), gaussian(rng, dk, d), gaussian(rng, dk, d)),
                rng, "synthetic.H" + std::to_string(t));
  }

  // Preference partition on random maps and masks.
  {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
      const TokenGrid g{5, 7};
      MatrixD tmap(g.rows, g.cols), dmap(g.rows, g.cols), tm(g.rows, g.cols), dm(g.rows, g.cols);
      double ts = 0, ds = 0;
      for (std::size_t i = 0; i < tmap.size(); ++i) {
        tmap.data()[i] = u(rng);
        dmap.data()[i] = u(rng);
        ts += tmap.data()[i];
        ds += dmap.data()[i];
        const double a = u(rng);
        tm.data()[i] = a;
        dm.data()[i] = (1.0 - a) * u(rng);
      }
      for (auto& v : tmap.data()) v /= ts;
      for (auto& v : dmap.data()) v /= ds;
      const auto r = preference_ratios(tmap, dmap, make_mask_set(tm, dm));
      worst = std::max({worst, std::abs(r.tt + r.td + r.tb - 1.0), std::abs(r.dt + r.dd + r.db - 1.0)});
    }
    log.add_at_most("preference.partition", worst, 1e-6);
  }

  // Null interval symmetry for the model width (or 768).
  {
    const std::size_t d = model ? model->config.embed_dim : 768;
    const NullInterval ni = null_interval(d, 0.95, c.seed, 200'000);
    const double expected = 1.959963984540054 / std::sqrt(static_cast<double>(d));
    log.add("null_interval.contains_zero", ni.hi - ni.lo, 0.0, ni.lo < 0.0 && ni.hi > 0.0);
    log.add_at_most("null_interval.symmetry", std::abs(ni.lo + ni.hi), 0.1 * expected);
  }

  // Container round trip.
  {
    std::map<std::string, TensorBlob> tensors;
    const std::vector<float> values{1.5f, -2.0f, 0.25f, 3.0f, 1e-3f, -7.5f};
    tensors["a"] = make_f32_blob({2, 3}, values);
    tensors["b"] = make_f32_blob({6}, values);
    const auto bytes = serialize_container(tensors, {{"k", "v"}});
    const auto parsed = parse_container_bytes(bytes);
    const bool ok = parsed.read_f32("a") == values && parsed.read_f32("b") == values &&
                    parsed.metadata().at("k") == "v";
    log.add("container.round_trip", ok ? 0.0 : 1.0, 0.0, ok);
  }

  // Dataset checks.
  if (!c.images.empty()) {
    const auto samples = scan_dataset(c.images, c.masks, c.labels);
    add_sample_inputs(in, samples);
    const TokenGrid grid = model ? TokenGrid{model->config.grid_side(), model->config.grid_side()}
                                 : TokenGrid{4, 4};
    for (const auto& s : samples) {
      if (!s.target.empty() && !s.distractor.empty()) {
        const MaskSet m = make_mask_set(pool_mask(read_mask(s.target), grid), pool_mask(read_mask(s.distractor), grid));
        double worst = 0.0;
        for (std::size_t i = 0; i < m.target.size(); ++i) {
          worst = std::max(worst, std::abs(m.target.data()[i] + m.distractor.data()[i] +
                                           m.background.data()[i] - 1.0));
        }
        log.add_at_most("dataset." + s.id + ".mask_partition", worst, 1e-12);
      }
      if (!s.labels.empty()) {
        const LabelMap lm = pool_labels(read_label_png(s.labels), grid);
        std::size_t total = 0;
        for (auto a : lm.areas) total += a;
        log.add("dataset." + s.id + ".label_areas", static_cast<double>(total),
                static_cast<double>(grid.area()), total == grid.area());
      }
    }
    if (model) {
      EmbeddingStore store(*model, {}, cap_bytes(c));
      const auto stack = store.get(samples.front());
      const auto bytes = [&] {
        const fs::path tmp = fs::path(c.out) / ".verify_dump.safetensors";
        save_embedding_dump(tmp, *stack);
        auto loaded = load_embedding_dump(tmp);
        fs::remove(tmp);
        return loaded;
      }();
      double worst = 0.0;
      for (std::size_t l = 0; l < stack->layers.size(); ++l)
        worst = std::max(worst, static_cast<double>(linalg::max_abs_diff(stack->layers[l], bytes.layers[l])));
      log.add("embedding_dump.round_trip", worst, 0.0, worst == 0.0);
      bool finite = true;
      for (const auto& x : stack->layers) finite = finite && all_finite(x);
      log.add("forward.finite", finite ? 0.0 : 1.0, 0.0, finite);
    }
  }

  Json report;
  report["passed"] = log.all_passed;
  report["checks"] = log.list;
  ArtifactWriter w(c.out);
  w.json("verify.json", report);
  write_manifest(c, w, in, {});
  if (!log.all_passed) {
    std::size_t failed = 0;
    for (const auto& e : log.list)
      if (!e["passed"].get<bool>()) ++failed;
    throw Error(ErrorKind::VerificationFailed, std::to_string(failed) + " check(s) failed; see verify.json");
  }
}

}  // namespace

std::string rerun_command_line(const RunConfig& c) {
  std::ostringstream os;
  auto quote = [](const std::string& s) {
    if (!s.empty() && s.find_first_of(" \t'\"\\$") == std::string::npos) return s;
    std::string q = "'";
    for (char ch : s) {
      if (ch == '\'') q += "'\\''";
      else q += ch;
    }
    return q + "'";
  };
  os << kToolName << ' ' << c.command;
  auto flag = [&](const char* name, const fs::path& p) {
    if (!p.empty()) os << " --" << name << ' ' << quote(path_string(p));
  };
  flag("checkpoint", c.checkpoint);
  flag("mapping", c.mapping);
  flag("images", c.images);
  flag("masks", c.masks);
  flag("labels", c.labels);
  os << " --layer " << quote(c.layer) << " --head " << quote(c.head) << " --mode "
     << quote(mode_selector(c)) << " --top-k " << c.top_k << " --seed " << c.seed
     << " --confidence " << format_double(c.confidence) << " --null-samples " << c.null_samples;
  if (c.negative) os << " --negative";
  os << " --out .";
  return os.str();
}

void run_command(const RunConfig& config) {
  if (config.out.empty()) throw Error(ErrorKind::InvalidArgument, "no --out directory given");
  const std::string& cmd = config.command;
  if (cmd == "modes") return cmd_modes(config);
  if (cmd == "cosine-trend") return cmd_cosine_trend(config);
  if (cmd == "preference") return cmd_preference(config);
  if (cmd == "mode-maps") return cmd_mode_maps(config);
  if (cmd == "mine") return cmd_mine(config);
  if (cmd == "anisotropy") return cmd_anisotropy(config);
  if (cmd == "same-object") return cmd_same_object(config);
  if (cmd == "verify") return cmd_verify(config);
  throw Error(ErrorKind::InvalidArgument, "unknown command '" + cmd + "'");
}

int run(const RunConfig& config, std::ostream& err) {
  try {
    run_command(config);
    return 0;
  } catch (const Error& e) {
    err << "error: " << error_kind_name(e.kind()) << ": " << e.what() << '\n';
    return e.kind() == ErrorKind::VerificationFailed ? 1 : 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: Io: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: Internal: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace qkscope
