#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qkscope/analysis.hpp"
#include "qkscope/image.hpp"
#include "qkscope/interaction.hpp"

namespace qkscope {

using Json = nlohmann::ordered_json;

enum class Orientation { Positive, Negative };

/// Red carries the query map, green and blue the key map, blended half-and-half with
/// the source luminance; overlap of both maps reads as white.
RgbImage render_overlay(const ImageTensor& image, const ModeMap& maps, Orientation orientation);

struct TrendRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::optional<double> weighted_cosine;
};

inline constexpr const char* kTrendHeader = "layer,head,norm_layer,weighted_cos,null_lo,null_hi";

double normalized_layer(std::size_t layer, std::size_t num_layers);

/// One row per (layer, head) followed by a "mean" row per layer.
std::string emit_trend(std::span<const TrendRecord> records, std::size_t num_layers,
                       NullInterval null);

/// Per-mode spectrum of one head: index, sigma, cosine, degenerate_group, degenerate.
Json emit_spectrum(const HeadModes& modes);
Json emit_modes_report(const MappingConfig& config, std::span<const HeadModes> heads,
                       double degeneracy_tol);

inline constexpr const char* kPreferenceHeader = "image,layer,head,tt,td,tb,dt,dd,db";
std::string emit_preferences(std::span<const PreferenceRecord> records);
/// Layer aggregates in both orders: heads then images, and images then heads.
std::string emit_preference_summary(std::span<const PreferenceRecord> records,
                                    std::size_t num_layers);

/// Minimal CSV reader for the files above (no quoting).
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

std::string format_optional(const std::optional<double>& value);

}  // namespace qkscope
