#include "qkscope/report.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "qkscope/error.hpp"
#include "qkscope/io.hpp"

namespace qkscope {

namespace {

MatrixD normalized_positive(const MatrixD& map, Orientation orientation) {
  MatrixD out = map;
  double peak = 0.0;
  for (auto& v : out.data()) {
    if (orientation == Orientation::Negative) v = -v;
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak <= 1e-12) return MatrixD(map.rows(), map.cols());
  for (auto& v : out.data()) v /= peak;
  return out;
}

std::uint8_t blend(double lum, double value) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(0.5 * lum + 0.5 * 255.0 * value, 0.0, 255.0)));
}

struct Sixfold {
  double v[6] = {0, 0, 0, 0, 0, 0};
  void add(const PreferenceRecord& r) {
    v[0] += r.tt; v[1] += r.td; v[2] += r.tb; v[3] += r.dt; v[4] += r.dd; v[5] += r.db;
  }
  void add(const Sixfold& o) {
    for (int i = 0; i < 6; ++i) v[i] += o.v[i];
  }
  Sixfold scaled(double s) const {
    Sixfold out = *this;
    for (auto& x : out.v) x *= s;
    return out;
  }
};

}  // namespace

RgbImage render_overlay(const ImageTensor& image, const ModeMap& maps, Orientation orientation) {
  const std::size_t rows = maps.qmap.rows();
  const std::size_t cols = maps.qmap.cols();
  if (maps.kmap.rows() != rows || maps.kmap.cols() != cols || rows == 0 || cols == 0 ||
      image.height < rows || image.width < cols ||
      image.rgb.size() != image.height * image.width * 3) {
    throw Error(ErrorKind::ShapeMismatch, "render_overlay: maps do not fit the image");
  }
  const MatrixD q = normalized_positive(maps.qmap, orientation);
  const MatrixD k = normalized_positive(maps.kmap, orientation);
  RgbImage out;
  out.width = image.width;
  out.height = image.height;
  out.pixels.resize(image.width * image.height * 3);
  for (std::size_t y = 0; y < image.height; ++y) {
    const std::size_t r = y * rows / image.height;
    for (std::size_t x = 0; x < image.width; ++x) {
      const std::size_t c = x * cols / image.width;
      // integer weights keep gray sources exact
      const double lum = 255.0 * (299.0 * image.at(y, x, 0) + 587.0 * image.at(y, x, 1) +
                                  114.0 * image.at(y, x, 2)) / 1000.0;
      const std::uint8_t red = blend(lum, q(r, c));
      const std::uint8_t cyan = blend(lum, k(r, c));
      auto* px = &out.pixels[(y * image.width + x) * 3];
      px[0] = red;
      px[1] = cyan;
      px[2] = cyan;
    }
  }
  return out;
}

double normalized_layer(std::size_t layer, std::size_t num_layers) {
  if (num_layers <= 1) return 0.0;
  return static_cast<double>(layer) / static_cast<double>(num_layers - 1);
}

std::string format_optional(const std::optional<double>& value) {
  return value ? format_double(*value) : std::string{};
}

std::string emit_trend(std::span<const TrendRecord> records, std::size_t num_layers,
                       NullInterval null) {
  std::map<std::size_t, std::vector<const TrendRecord*>> by_layer;
  for (const auto& r : records) by_layer[r.layer].push_back(&r);
  std::ostringstream os;
  os << kTrendHeader << '\n';
  const std::string lo = format_double(null.lo);
  const std::string hi = format_double(null.hi);
  for (auto& [layer, rows] : by_layer) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const TrendRecord* a, const TrendRecord* b) { return a->head < b->head; });
    const std::string norm = format_double(normalized_layer(layer, num_layers));
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto* r : rows) {
      os << layer << ',' << r->head << ',' << norm << ',' << format_optional(r->weighted_cosine)
         << ',' << lo << ',' << hi << '\n';
      if (r->weighted_cosine) {
        sum += *r->weighted_cosine;
        ++n;
      }
    }
    const std::optional<double> mean =
        n > 0 ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt;
    os << layer << ",mean," << norm << ',' << format_optional(mean) << ',' << lo << ',' << hi << '\n';
  }
  return os.str();
}

Json emit_spectrum(const HeadModes& modes) {
  Json j;
  j["layer"] = modes.layer;
  j["head"] = modes.head;
  j["head_dim"] = modes.head_dim;
  j["weighted_cosine"] = modes.weighted_cosine ? Json(*modes.weighted_cosine) : Json(nullptr);
  Json index = Json::array(), sigma = Json::array(), cosine = Json::array(),
       group = Json::array(), degenerate = Json::array();
  for (const auto& m : modes.modes) {
    index.push_back(m.index);
    sigma.push_back(m.sigma);
    cosine.push_back(m.cosine);
    group.push_back(m.degenerate_group);
    degenerate.push_back(m.degenerate);
  }
  j["index"] = std::move(index);
  j["sigma"] = std::move(sigma);
  j["cosine"] = std::move(cosine);
  j["degenerate_group"] = std::move(group);
  j["degenerate"] = std::move(degenerate);
  return j;
}

Json emit_modes_report(const MappingConfig& config, std::span<const HeadModes> heads,
                       double degeneracy_tol) {
  Json j;
  j["model_id"] = config.model_id;
  j["num_layers"] = config.num_layers;
  j["num_heads"] = config.num_heads;
  j["embed_dim"] = config.embed_dim;
  j["head_dim"] = config.head_dim;
  j["degeneracy_tol"] = degeneracy_tol;
  Json list = Json::array();
  for (const auto& h : heads) list.push_back(emit_spectrum(h));
  j["heads"] = std::move(list);
  return j;
}

std::string emit_preferences(std::span<const PreferenceRecord> records) {
  std::ostringstream os;
  os << kPreferenceHeader << '\n';
  for (const auto& r : records) {
    os << r.image_id << ',' << r.layer << ',' << r.head << ',' << format_double(r.tt) << ','
       << format_double(r.td) << ',' << format_double(r.tb) << ',' << format_double(r.dt) << ','
       << format_double(r.dd) << ',' << format_double(r.db) << '\n';
  }
  return os.str();
}

std::string emit_preference_summary(std::span<const PreferenceRecord> records,
                                    std::size_t num_layers) {
  // layer -> image -> sum over heads, and layer -> head -> sum over images
  std::map<std::size_t, std::map<std::string, std::pair<Sixfold, std::size_t>>> by_image;
  std::map<std::size_t, std::map<std::size_t, std::pair<Sixfold, std::size_t>>> by_head;
  for (const auto& r : records) {
    auto& a = by_image[r.layer][r.image_id];
    a.first.add(r);
    ++a.second;
    auto& b = by_head[r.layer][r.head];
    b.first.add(r);
    ++b.second;
  }
  std::ostringstream os;
  os << "layer,norm_layer,order,tt,td,tb,dt,dd,db,same_objects,different_objects,background\n";
  auto write_row = [&](std::size_t layer, const char* order, const Sixfold& s) {
    os << layer << ',' << format_double(normalized_layer(layer, num_layers)) << ',' << order;
    for (double v : s.v) os << ',' << format_double(v);
    os << ',' << format_double(0.5 * (s.v[0] + s.v[4])) << ','
       << format_double(0.5 * (s.v[1] + s.v[3])) << ',' << format_double(0.5 * (s.v[2] + s.v[5]))
       << '\n';
  };
  for (const auto& [layer, images] : by_image) {
    Sixfold heads_first;
    for (const auto& [id, acc] : images)
      heads_first.add(acc.first.scaled(1.0 / static_cast<double>(acc.second)));
    write_row(layer, "heads_then_images", heads_first.scaled(1.0 / static_cast<double>(images.size())));
    Sixfold images_first;
    const auto& heads = by_head[layer];
    for (const auto& [head, acc] : heads)
      images_first.add(acc.first.scaled(1.0 / static_cast<double>(acc.second)));
    write_row(layer, "images_then_heads", images_first.scaled(1.0 / static_cast<double>(heads.size())));
  }
  return os.str();
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace qkscope
