#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "qkscope/encoder.hpp"
#include "qkscope/report.hpp"

namespace qkscope {

inline constexpr const char* kToolName = "qkscope";
inline constexpr const char* kToolVersion = "0.1.0";

/// Everything a run depends on. Selectors are "all" or comma lists of 0-based
/// indices and inclusive ranges ("0,2,5-7"); an empty mode selector means the
/// command's default.
struct RunConfig {
  std::string command;
  std::filesystem::path checkpoint;
  std::filesystem::path mapping;
  std::filesystem::path images;
  std::filesystem::path masks;
  std::filesystem::path labels;
  std::string layer = "all";
  std::string head = "all";
  std::string mode;
  std::size_t top_k = 5;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0 = available cores
  std::filesystem::path out;
  std::filesystem::path cache;
  std::size_t cache_mb = 512;
  bool negative = false;
  double confidence = 0.95;
  std::size_t null_samples = 1'000'000;
};

/// Expands a selector against [0, bound); throws IndexOutOfRange or InvalidArgument.
std::vector<std::size_t> parse_selector(const std::string& text, std::size_t bound,
                                        const std::string& what);

std::size_t resolve_threads(std::size_t requested) noexcept;

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
/// (lowest index) is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// ---- datasets -------------------------------------------------------------------

struct Sample {
  std::string id;
  std::filesystem::path image;  // empty for dump-only samples
  std::filesystem::path dump;   // precomputed embedding dump, optional
  std::filesystem::path target;
  std::filesystem::path distractor;
  std::filesystem::path labels;
};

/// Either one subdirectory per sample (image.{png,jpg,jpeg}, embeddings.safetensors,
/// target.png, distractor.png, labels.png) or a flat directory of images and dumps
/// named by sample id. `masks` and `labels` optionally hold the same files in
/// parallel trees (<id>/target.png, <id>/distractor.png, <id>.png). Sorted by id.
std::vector<Sample> scan_dataset(const std::filesystem::path& images,
                                 const std::filesystem::path& masks = {},
                                 const std::filesystem::path& labels = {});

// ---- model and embeddings ---------------------------------------------------------

struct LoadedModel {
  MappingConfig config;
  ModelWeights weights;
  std::string checkpoint_sha256;
  std::string mapping_sha256;
};

LoadedModel load_checkpoint(const std::filesystem::path& checkpoint,
                            const std::filesystem::path& mapping);

/// Embedding stacks on demand: memory LRU bounded by bytes, backed by an optional
/// on-disk cache of embedding dumps keyed by model and image digests.
class EmbeddingStore {
 public:
  EmbeddingStore(const LoadedModel& model, std::filesystem::path cache_dir, std::size_t cap_bytes);

  std::shared_ptr<const EmbeddingStack> get(const Sample& sample);
  std::size_t resident_bytes() const;
  std::size_t computed() const;  // forward passes run so far

  /// Cache file for a sample (empty without a cache directory).
  std::filesystem::path cache_path(const Sample& sample) const;

 private:
  std::string key_for(const Sample& sample) const;
  void insert_locked(const std::string& key, std::shared_ptr<const EmbeddingStack> stack);

  const LoadedModel& model_;
  VitEncoder encoder_;
  std::filesystem::path cache_dir_;
  std::size_t cap_bytes_;
  mutable std::mutex mutex_;
  std::list<std::string> order_;  // front = most recent
  std::map<std::string, std::pair<std::shared_ptr<const EmbeddingStack>, std::list<std::string>::iterator>> entries_;
  std::size_t bytes_ = 0;
  std::size_t computed_ = 0;
};

/// Scaled attention scores of `token` against every token, recomputed from the
/// layer's attention input: (W_q x + b_q)ᵀ(W_k x_j + b_k) / sqrt(d_k).
std::vector<float> attention_score_row(const ModelWeights& weights, const MatrixF& embeddings,
                                       std::size_t layer, std::size_t head, std::size_t token);

// ---- runs -------------------------------------------------------------------------

/// Executes one command and writes its artifacts plus manifest.json into
/// config.out. Throws qkscope::Error.
void run_command(const RunConfig& config);

/// run_command with error reporting: prints "error: <Kind>: <message>" on one line
/// and returns nonzero on failure.
int run(const RunConfig& config, std::ostream& err);

/// Command line that reproduces a run, with the output directory given as ".".
std::string rerun_command_line(const RunConfig& config);

const std::vector<std::string>& command_names();

}  // namespace qkscope
