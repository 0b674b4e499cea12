#include "qkscope/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "qkscope/error.hpp"
#include "qkscope/linalg.hpp"

namespace qkscope {

namespace {

void require_grid(TokenGrid grid) {
  if (grid.rows == 0 || grid.cols == 0) {
    throw Error(ErrorKind::GridMismatch, "token grid must be non-empty");
  }
}

std::size_t token_of(std::size_t pixel, std::size_t pixels, std::size_t tokens) {
  return pixel * tokens / pixels;
}

std::size_t center_pixel(std::size_t token, std::size_t tokens, std::size_t pixels) {
  return std::min(pixels - 1, (2 * token + 1) * pixels / (2 * tokens));
}

void require_embeddings(const MatrixF& x, std::size_t dim, TokenGrid grid, std::size_t prefix) {
  if (x.rows() != grid.area() + prefix) {
    throw Error(ErrorKind::ShapeMismatch, "embedding has " + std::to_string(x.rows()) +
                                              " tokens, grid + prefix is " +
                                              std::to_string(grid.area() + prefix));
  }
  if (x.cols() != dim) {
    throw Error(ErrorKind::ShapeMismatch, "embedding dimension " + std::to_string(x.cols()) +
                                              " does not match mode dimension " +
                                              std::to_string(dim));
  }
}

double project(std::span<const float> x, const std::vector<double>& direction) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * direction[i];
  return acc;
}

double max_entry(const MatrixD& m) {
  return *std::max_element(m.data().begin(), m.data().end());
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

}  // namespace

MatrixD pool_mask(const MatrixD& pixel_mask, TokenGrid grid) {
  require_grid(grid);
  const std::size_t h = pixel_mask.rows();
  const std::size_t w = pixel_mask.cols();
  if (h == 0 || w == 0) throw Error(ErrorKind::ShapeMismatch, "pool_mask: empty mask");
  MatrixD sum(grid.rows, grid.cols);
  Matrix<std::size_t> count(grid.rows, grid.cols);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t r = token_of(y, h, grid.rows);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t c = token_of(x, w, grid.cols);
      sum(r, c) += pixel_mask(y, x);
      ++count(r, c);
    }
  }
  MatrixD pooled(grid.rows, grid.cols);
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      pooled(r, c) = count(r, c) > 0
                         ? sum(r, c) / static_cast<double>(count(r, c))
                         : pixel_mask(center_pixel(r, grid.rows, h), center_pixel(c, grid.cols, w));
    }
  }
  return pooled;
}

MaskSet make_mask_set(const MatrixD& target, const MatrixD& distractor) {
  if (target.rows() != distractor.rows() || target.cols() != distractor.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "make_mask_set: target and distractor grids differ");
  }
  MaskSet out{target, distractor, MatrixD(target.rows(), target.cols())};
  for (std::size_t i = 0; i < target.size(); ++i) {
    double t = std::clamp(target.data()[i], 0.0, 1.0);
    double d = std::clamp(distractor.data()[i], 0.0, 1.0);
    double b = std::clamp(1.0 - t - d, 0.0, 1.0);
    const double total = t + d + b;
    out.target.data()[i] = t / total;
    out.distractor.data()[i] = d / total;
    out.background.data()[i] = b / total;
  }
  return out;
}

std::size_t select_token(const MatrixD& pixel_mask, TokenGrid grid) {
  const MatrixD pooled = pool_mask(pixel_mask, grid);
  std::size_t best = 0;
  for (std::size_t i = 1; i < pooled.size(); ++i)
    if (pooled.data()[i] > pooled.data()[best]) best = i;
  if (!(pooled.data()[best] > 0.0)) {
    throw Error(ErrorKind::EmptyMask, "select_token: mask is empty");
  }
  return best;
}

LabelMap pool_labels(const Matrix<std::int32_t>& pixel_labels, TokenGrid grid) {
  require_grid(grid);
  const std::size_t h = pixel_labels.rows();
  const std::size_t w = pixel_labels.cols();
  if (h == 0 || w == 0) throw Error(ErrorKind::ShapeMismatch, "pool_labels: empty label map");
  std::vector<std::map<std::int32_t, std::size_t>> votes(grid.area());
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t r = token_of(y, h, grid.rows);
    for (std::size_t x = 0; x < w; ++x) {
      ++votes[r * grid.cols + token_of(x, w, grid.cols)][pixel_labels(y, x)];
    }
  }
  LabelMap out;
  out.labels = Matrix<std::int32_t>(grid.rows, grid.cols);
  std::map<std::int32_t, std::size_t> areas;
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const auto& v = votes[r * grid.cols + c];
      std::int32_t label;
      if (v.empty()) {
        label = pixel_labels(center_pixel(r, grid.rows, h), center_pixel(c, grid.cols, w));
      } else {
        // map iterates ascending, so strict '>' keeps the smallest label on ties
        label = v.begin()->first;
        std::size_t best = 0;
        for (const auto& [id, n] : v) {
          if (n > best) {
            best = n;
            label = id;
          }
        }
      }
      out.labels(r, c) = label;
      ++areas[label];
    }
  }
  for (const auto& [id, n] : areas) {
    out.objects.push_back(id);
    out.areas.push_back(n);
  }
  return out;
}

PreferenceRecord preference_ratios(const MatrixD& target_map, const MatrixD& distractor_map,
                                   const MaskSet& masks) {
  const auto same_shape = [](const MatrixD& a, const MatrixD& b) {
    return a.rows() == b.rows() && a.cols() == b.cols();
  };
  if (!same_shape(target_map, distractor_map) || !same_shape(target_map, masks.target) ||
      !same_shape(target_map, masks.distractor) || !same_shape(target_map, masks.background)) {
    throw Error(ErrorKind::ShapeMismatch, "preference_ratios: maps and masks must share a grid");
  }
  auto inner = [](const MatrixD& a, const MatrixD& b) { return linalg::dot<double>(a.data(), b.data()); };
  PreferenceRecord r;
  r.tt = inner(target_map, masks.target);
  r.td = inner(target_map, masks.distractor);
  r.tb = inner(target_map, masks.background);
  r.dt = inner(distractor_map, masks.target);
  r.dd = inner(distractor_map, masks.distractor);
  r.db = inner(distractor_map, masks.background);
  return r;
}

ModeMap mode_maps(const MatrixF& embeddings, const SingularMode& mode, TokenGrid grid,
                  std::size_t prefix_tokens) {
  require_grid(grid);
  require_embeddings(embeddings, mode.u.size(), grid, prefix_tokens);
  ModeMap out{MatrixD(grid.rows, grid.cols), MatrixD(grid.rows, grid.cols), mode.index};
  for (std::size_t t = 0; t < grid.area(); ++t) {
    const auto x = embeddings.row(prefix_tokens + t);
    out.qmap.data()[t] = project(x, mode.u);
    out.kmap.data()[t] = project(x, mode.v);
  }
  return out;
}

double image_mode_score(const ModeMap& maps) { return max_entry(maps.qmap) * max_entry(maps.kmap); }

double image_mode_score(const MatrixF& embeddings, const SingularMode& mode, TokenGrid grid,
                        std::size_t prefix_tokens) {
  return image_mode_score(mode_maps(embeddings, mode, grid, prefix_tokens));
}

std::vector<RankedImage> rank_images(std::vector<RankedImage> scored, std::size_t k) {
  if (scored.empty()) throw Error(ErrorKind::EmptyCollection, "no images to rank");
  if (k == 0) throw Error(ErrorKind::InvalidArgument, "top-k must be at least 1");
  std::sort(scored.begin(), scored.end(), [](const RankedImage& a, const RankedImage& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image_id < b.image_id;
  });
  scored.resize(std::min(k, scored.size()));
  return scored;
}

std::vector<RankedImage> mine_top_images(std::span<const EmbeddingStack> stacks, std::size_t layer,
                                         const SingularMode& mode, std::size_t k) {
  if (stacks.empty()) throw Error(ErrorKind::EmptyCollection, "mine_top_images: no images");
  std::vector<RankedImage> scored;
  scored.reserve(stacks.size());
  for (const auto& s : stacks) {
    if (layer >= s.layers.size()) {
      throw Error(ErrorKind::IndexOutOfRange, "mine_top_images: layer out of range");
    }
    scored.push_back({s.image_id, image_mode_score(s.layers[layer], mode, s.grid, s.prefix_tokens)});
  }
  return rank_images(std::move(scored), k);
}

std::vector<std::size_t> rank_modes_for_image(const MatrixF& embeddings, const HeadModes& modes,
                                              std::size_t k, TokenGrid grid,
                                              std::size_t prefix_tokens) {
  if (modes.modes.empty()) throw Error(ErrorKind::EmptyCollection, "rank_modes_for_image: no modes");
  std::vector<double> stat(modes.modes.size());
  for (std::size_t n = 0; n < modes.modes.size(); ++n) {
    const auto& m = modes.modes[n];
    stat[n] = m.sigma * image_mode_score(embeddings, m, grid, prefix_tokens);
  }
  std::vector<std::size_t> order(stat.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return stat[a] > stat[b]; });
  order.resize(std::min(k, order.size()));
  return order;
}

std::size_t center_token(TokenGrid grid, std::size_t prefix_tokens) {
  return prefix_tokens + (grid.rows / 2) * grid.cols + grid.cols / 2;
}

double anisotropy_baseline(std::span<const EmbeddingStack* const> stacks, std::size_t layer) {
  if (stacks.size() < 2) {
    throw Error(ErrorKind::TooFewImages, "anisotropy_baseline: need at least two images");
  }
  std::vector<std::span<const float>> centers;
  for (const auto* s : stacks) {
    if (layer >= s->layers.size()) {
      throw Error(ErrorKind::IndexOutOfRange, "anisotropy_baseline: layer out of range");
    }
    centers.push_back(s->layers[layer].row(center_token(s->grid, s->prefix_tokens)));
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    for (std::size_t j = i + 1; j < centers.size(); ++j) {
      total += cosine(centers[i], centers[j]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

double anisotropy_baseline(std::span<const EmbeddingStack> stacks, std::size_t layer) {
  std::vector<const EmbeddingStack*> ptrs;
  for (const auto& s : stacks) ptrs.push_back(&s);
  return anisotropy_baseline(std::span<const EmbeddingStack* const>(ptrs), layer);
}

double relative_cosine(double weighted_cosine, double baseline) { return weighted_cosine - baseline; }

std::int32_t best_object(const MatrixD& map, const LabelMap& labels) {
  if (labels.objects.empty()) throw Error(ErrorKind::NoLabeledObjects, "label map has no objects");
  if (map.rows() != labels.labels.rows() || map.cols() != labels.labels.cols()) {
    throw Error(ErrorKind::GridMismatch, "label map grid differs from projection grid");
  }
  std::map<std::int32_t, double> sums;
  for (std::size_t t = 0; t < map.size(); ++t) sums[labels.labels.data()[t]] += map.data()[t];
  std::int32_t best = labels.objects.front();
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < labels.objects.size(); ++i) {
    const double score = sums[labels.objects[i]] / static_cast<double>(labels.areas[i]);
    if (score > best_score) {
      best_score = score;
      best = labels.objects[i];
    }
  }
  return best;
}

SameObjectResult same_object_probability(const HeadModes& modes,
                                         std::span<const std::vector<LabeledEmbedding>> mined) {
  if (mined.size() != modes.modes.size()) {
    throw Error(ErrorKind::ShapeMismatch, "same_object_probability: one mined list per mode required");
  }
  double sigma_total = 0.0;
  for (const auto& m : modes.modes) sigma_total += m.sigma;
  if (!(sigma_total > 0.0)) {
    throw Error(ErrorKind::AllZeroSpectrum, "same_object_probability: all singular values are zero");
  }
  SameObjectResult out;
  out.mode_probability.resize(modes.modes.size());
  out.indicators.resize(modes.modes.size());
  for (std::size_t n = 0; n < modes.modes.size(); ++n) {
    const auto& mode = modes.modes[n];
    if (mined[n].empty()) {
      throw Error(ErrorKind::EmptyCollection,
                  "same_object_probability: mode " + std::to_string(n) + " has no mined images");
    }
    for (const auto& item : mined[n]) {
      const auto& stack = *item.stack;
      if (modes.layer >= stack.layers.size()) {
        throw Error(ErrorKind::IndexOutOfRange, "same_object_probability: layer out of range");
      }
      const ModeMap maps = mode_maps(stack.layers[modes.layer], mode, stack.grid, stack.prefix_tokens);
      const int same = best_object(maps.qmap, *item.labels) == best_object(maps.kmap, *item.labels);
      out.indicators[n].push_back(same);
    }
    const auto& ind = out.indicators[n];
    out.mode_probability[n] =
        static_cast<double>(std::accumulate(ind.begin(), ind.end(), 0)) / static_cast<double>(ind.size());
    out.probability += (mode.sigma / sigma_total) * out.mode_probability[n];
  }
  return out;
}

}  // namespace qkscope
