#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "qkscope/encoder.hpp"
#include "qkscope/interaction.hpp"
#include "qkscope/pipeline.hpp"
#include "reference_vit.hpp"
#include "test_util.hpp"
#include "toy_model.hpp"

using namespace qkscope;
using qkscope::testing::error_kind_of;
using qkscope::testing::TempDir;

namespace {

ImageTensor scene_tensor(const ModelWeights& w, std::uint64_t seed) {
  const auto scene = toy::make_scene(w.config.image_size, w.config.image_size, seed);
  return make_image_tensor(scene.image, w.config, "scene" + std::to_string(seed));
}

double max_diff(const MatrixF& a, const MatrixD& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) worst = std::max(worst, std::abs(a(i, j) - b(i, j)));
  return worst;
}

std::vector<double> softmax_f32(std::span<const float> row) {
  float peak = row[0];
  for (float v : row) peak = std::max(peak, v);
  std::vector<float> e(row.size());
  float total = 0;
  for (std::size_t j = 0; j < row.size(); ++j) total += e[j] = std::exp(row[j] - peak);
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = e[j] / total;
  return out;
}

void set_identity_norms(ModelWeights& w) {
  for (auto& lw : w.layers) {
    std::fill(lw.norm1_weight.begin(), lw.norm1_weight.end(), 1.0f);
    std::fill(lw.norm1_bias.begin(), lw.norm1_bias.end(), 0.0f);
  }
}

}  // namespace

TEST_SUITE("encoder") {
  TEST_CASE("token count for a 224 / 16 layout") {
    toy::ToySpec spec;
    spec.heads = 1;
    spec.layers = 1;
    spec.image = 224;
    spec.patch = 16;
    const auto w = toy_weights(spec);
    const VitEncoder enc(w);
    CHECK(enc.grid() == TokenGrid{14, 14});
    const auto x = enc.patchify_embed(scene_tensor(w, 1));
    CHECK(x.rows() == 197);
    CHECK(x.cols() == 4);
  }

  TEST_CASE("zero patch projection yields the position embedding") {
    toy::ToySpec spec;
    auto w = toy_weights(spec);
    w.patch_weight *= 0.0f;
    std::fill(w.patch_bias.begin(), w.patch_bias.end(), 0.0f);
    w.prefix_embedding *= 0.0f;
    ImageTensor zero;
    zero.height = zero.width = spec.image;
    zero.rgb.assign(spec.image * spec.image * 3, 0.0f);
    const auto x = patchify_embed(zero, w);
    REQUIRE(x.rows() == w.position_embedding.rows());
    CHECK(x == w.position_embedding);
  }

  TEST_CASE("patch embedding matches the reference layout") {
    toy::ToySpec spec;
    const auto w = toy_weights(spec);
    const auto img = scene_tensor(w, 3);
    const auto x = patchify_embed(img, w);
    const std::size_t p = spec.patch, side = w.config.grid_side();
    for (std::size_t gy = 0; gy < side; ++gy)
      for (std::size_t gx = 0; gx < side; ++gx)
        for (std::size_t o = 0; o < spec.embed_dim(); ++o) {
          double s = w.patch_bias[o] + w.position_embedding(1 + gy * side + gx, o);
          for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t ky = 0; ky < p; ++ky)
              for (std::size_t kx = 0; kx < p; ++kx)
                s += w.patch_weight(o, (ch * p + ky) * p + kx) *
                     ((img.at(gy * p + ky, gx * p + kx, ch) - 0.5) / 0.5);
          CHECK(x(1 + gy * side + gx, o) == doctest::Approx(s).epsilon(1e-5));
        }
  }

  TEST_CASE("forward matches the double-precision reference") {
    for (int variant = 0; variant < 4; ++variant) {
      CAPTURE(variant);
      toy::ToySpec spec;
      spec.layers = 3;
      spec.heads = 3;
      spec.fused = variant == 1;
      spec.layer_scale = variant == 2;
      spec.seed = 11 + variant;
      auto w = toy_weights(spec);
      if (variant == 3) {
        w.config.activation = Activation::QuickGelu;
        w.embed_norm_weight.assign(spec.embed_dim(), 1.3f);
        w.embed_norm_bias.assign(spec.embed_dim(), -0.2f);
      }
      const auto img = scene_tensor(w, 5 + variant);
      const auto got = VitEncoder(w).forward(img, true);
      const auto ref = oracle::reference_forward(img, w);
      REQUIRE(got.embeddings.layers.size() == spec.layers);
      for (std::size_t l = 0; l < spec.layers; ++l) {
        CHECK(max_diff(got.embeddings.layers[l], ref.ln_inputs[l]) < 1e-4);
        for (std::size_t h = 0; h < spec.heads; ++h)
          CHECK(max_diff(got.scores.at(l, h), ref.scores[l][h]) < 1e-4);
      }
    }
  }

  TEST_CASE("zero-update model keeps the attention input fixed across layers") {
    toy::ToySpec spec;
    spec.layers = 4;
    spec.zero_update = true;
    auto w = toy_weights(spec);
    set_identity_norms(w);
    const auto r = VitEncoder(w).forward(scene_tensor(w, 2), false);
    REQUIRE(r.embeddings.layers.size() == 4);
    for (std::size_t l = 1; l < 4; ++l) CHECK(r.embeddings.layers[l] == r.embeddings.layers[0]);
    CHECK(r.scores.scores.empty());
  }

  TEST_CASE("softmax rows sum to one") {
    toy::ToySpec spec;
    const auto w = toy_weights(spec);
    const auto r = forward_collect(scene_tensor(w, 4), w);
    for (std::size_t l = 0; l < spec.layers; ++l)
      for (std::size_t h = 0; h < spec.heads; ++h) {
        const auto& s = r.scores.at(l, h);
        for (std::size_t i = 0; i < s.rows(); ++i) {
          double total = 0;
          for (double v : softmax_f32(s.row(i))) total += v;
          CHECK(std::abs(total - 1.0) < 1e-6);
        }
      }
  }

  TEST_CASE("scores are consistent with the layer projections") {
    toy::ToySpec spec;
    spec.seed = 21;
    const auto w = toy_weights(spec);
    const auto r = forward_collect(scene_tensor(w, 6), w);
    const double scale = std::sqrt(static_cast<double>(spec.head_dim));
    for (std::size_t l = 0; l < spec.layers; ++l) {
      const auto x = r.embeddings.layers[l].cast<double>();
      const auto& lw = w.layers[l];
      for (std::size_t h = 0; h < spec.heads; ++h) {
        const auto& s = r.scores.at(l, h);
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.rows(); ++j) {
            double acc = 0;
            for (std::size_t a = 0; a < spec.head_dim; ++a) {
              const std::size_t row = h * spec.head_dim + a;
              double qi = lw.q_bias[row], kj = lw.k_bias[row];
              for (std::size_t c = 0; c < x.cols(); ++c) {
                qi += lw.q_weight(row, c) * x(i, c);
                kj += lw.k_weight(row, c) * x(j, c);
              }
              acc += qi * kj;
            }
            CHECK(std::abs(s(i, j) - acc / scale) < 1e-4);
          }
      }
    }
  }

  TEST_CASE("bias-free scores equal the interaction-mode decomposition") {
    toy::ToySpec spec;
    spec.seed = 23;
    auto w = toy_weights(spec);
    for (auto& lw : w.layers) {
      std::fill(lw.q_bias.begin(), lw.q_bias.end(), 0.0f);
      std::fill(lw.k_bias.begin(), lw.k_bias.end(), 0.0f);
    }
    const auto r = forward_collect(scene_tensor(w, 7), w);
    const double scale = std::sqrt(static_cast<double>(spec.head_dim));
    for (std::size_t l = 0; l < spec.layers; ++l)
      for (std::size_t h = 0; h < spec.heads; ++h) {
        const auto modes = decompose_head(make_interaction_head(w, l, h));
        const auto x = r.embeddings.layers[l].cast<double>();
        for (std::size_t i = 0; i < x.rows(); i += 3)
          for (std::size_t j = 0; j < x.rows(); j += 2) {
            const auto dec = score_decomposition(x.row(i), x.row(j), modes);
            CHECK(std::abs(r.scores.at(l, h)(i, j) * scale - dec.total) < 1e-3);
          }
      }
  }

  TEST_CASE("scores recomputed from embeddings match the forward pass") {
    toy::ToySpec spec;
    const auto w = toy_weights(spec);
    const auto r = forward_collect(scene_tensor(w, 8), w);
    for (std::size_t l = 0; l < spec.layers; ++l)
      for (std::size_t h = 0; h < spec.heads; ++h)
        for (std::size_t t : {0ul, 5ul, 16ul}) {
          const auto row = attention_score_row(w, r.embeddings.layers[l], l, h, t);
          const auto expect = r.scores.at(l, h).row(t);
          REQUIRE(row.size() == expect.size());
          for (std::size_t j = 0; j < row.size(); ++j) CHECK(std::abs(row[j] - expect[j]) < 1e-4);
        }
  }

  TEST_CASE("attention map from uniform scores") {
    const std::vector<float> row(5, 0.0f);
    const auto m = attention_map_from_row(row, TokenGrid{2, 2}, 1);
    REQUIRE(m.rows() == 2);
    REQUIRE(m.cols() == 2);
    for (double v : m.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }

  TEST_CASE("attention map for scores ln2 and 0") {
    const std::vector<float> row{static_cast<float>(std::log(2.0)), 0.0f};
    const auto m = attention_map_from_row(row, TokenGrid{1, 2}, 0);
    CHECK(m(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-7));
    CHECK(m(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
  }

  TEST_CASE("attention map drops prefix mass and renormalizes") {
    std::mt19937_64 rng(31);
    std::normal_distribution<float> g(0.0f, 3.0f);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t prefix = trial % 3;
      const TokenGrid grid{3, 4};
      std::vector<float> row(grid.area() + prefix);
      for (auto& v : row) v = g(rng);
      const auto m = attention_map_from_row(row, grid, prefix);
      double total = 0;
      for (double v : m.data()) total += v;
      CHECK(std::abs(total - 1.0) < 1e-9);
      double denom = 0;
      for (std::size_t j = prefix; j < row.size(); ++j) denom += std::exp(static_cast<double>(row[j]));
      for (std::size_t j = 0; j < grid.area(); ++j)
        CHECK(m(j / grid.cols, j % grid.cols) ==
              doctest::Approx(std::exp(static_cast<double>(row[prefix + j])) / denom).epsilon(1e-9));
    }
  }

  TEST_CASE("attention map argument errors") {
    const std::vector<float> row(6, 0.0f);
    CHECK(error_kind_of([&] { attention_map_from_row(row, TokenGrid{2, 2}, 1); }) == ErrorKind::GridMismatch);
    toy::ToySpec spec;
    const auto w = toy_weights(spec);
    const auto r = forward_collect(scene_tensor(w, 9), w);
    const TokenGrid grid{4, 4};
    CHECK(error_kind_of([&] { attention_map(r.scores, 0, 0, 17, grid, 1); }) == ErrorKind::IndexOutOfRange);
    CHECK(error_kind_of([&] { attention_map(r.scores, 2, 0, 3, grid, 1); }) == ErrorKind::IndexOutOfRange);
    CHECK(error_kind_of([&] { attention_map(r.scores, 0, 2, 3, grid, 1); }) == ErrorKind::IndexOutOfRange);
    const auto m = attention_map(r.scores, 1, 1, 3, grid, 1);
    const auto direct = attention_map_from_row(r.scores.at(1, 1).row(3), grid, 1);
    CHECK(m == direct);
  }

  TEST_CASE("image of the wrong size is rejected") {
    toy::ToySpec spec;
    const auto w = toy_weights(spec);
    ImageTensor bad;
    bad.height = 12;
    bad.width = 16;
    bad.rgb.assign(12 * 16 * 3, 0.5f);
    CHECK(error_kind_of([&] { patchify_embed(bad, w); }) == ErrorKind::ShapeMismatch);
  }

  TEST_CASE("overflowing activations are reported") {
    toy::ToySpec spec;
    auto w = toy_weights(spec);
    for (float& v : w.position_embedding.data()) v = 3e38f;
    for (float& v : w.prefix_embedding.data()) v = 3e38f;
    CHECK(error_kind_of([&] { forward_collect(scene_tensor(w, 1), w); }) == ErrorKind::NonFiniteActivation);
  }

  TEST_CASE("embedding dump round trip") {
    TempDir dir("dump");
    toy::ToySpec spec;
    const auto w = toy_weights(spec);
    auto stack = forward_collect(scene_tensor(w, 3), w).embeddings;
    stack.image_id = "scene3";
    save_embedding_dump(dir / "d.safetensors", stack);
    const auto back = load_embedding_dump(dir / "d.safetensors");
    CHECK(back.grid == stack.grid);
    CHECK(back.prefix_tokens == stack.prefix_tokens);
    CHECK(back.model_id == stack.model_id);
    CHECK(back.image_id == "scene3");
    REQUIRE(back.layers.size() == stack.layers.size());
    for (std::size_t l = 0; l < stack.layers.size(); ++l) CHECK(back.layers[l] == stack.layers[l]);
    CHECK(stack.byte_size() == stack.layers.size() * 17 * 8 * sizeof(float));
  }

  TEST_CASE("embedding dump errors") {
    TempDir dir("dumperr");
    const auto meta = [](std::size_t layers) {
      return std::string(R"({"grid":[2,2],"prefix_tokens":1,"num_layers":)") + std::to_string(layers) +
             R"(,"model_id":"m","image_id":"i"})";
    };
    std::vector<float> ok(5 * 3, 0.25f), short_rows(4 * 3, 0.25f);
    {
      std::map<std::string, TensorBlob> t;
      t[embedding_layer_name(0)] = make_f32_blob({5, 3}, ok);
      write_container(dir / "missing.safetensors", t, {{"meta", meta(2)}});
      CHECK(error_kind_of([&] { load_embedding_dump(dir / "missing.safetensors"); }) == ErrorKind::MissingTensor);
    }
    {
      std::map<std::string, TensorBlob> t;
      t[embedding_layer_name(0)] = make_f32_blob({4, 3}, short_rows);
      write_container(dir / "rows.safetensors", t, {{"meta", meta(1)}});
      CHECK(error_kind_of([&] { load_embedding_dump(dir / "rows.safetensors"); }) == ErrorKind::GridMismatch);
    }
    {
      std::map<std::string, TensorBlob> t;
      t[embedding_layer_name(0)] = make_f32_blob({5, 3}, ok);
      write_container(dir / "nometa.safetensors", t, {});
      CHECK(error_kind_of([&] { load_embedding_dump(dir / "nometa.safetensors"); }) == ErrorKind::MalformedHeader);
    }
  }

  TEST_CASE("shipped dumps agree with the shipped checkpoint") {
    const auto dir = qkscope::testing::fixture_dir();
    const auto cfg = load_mapping_config(dir / "toy.mapping.json");
    const auto container = parse_container(dir / "toy.safetensors");
    const auto w = load_model(container, cfg);
    const VitEncoder enc(w);
    for (std::size_t i = 0; i < toy::kFixtureSamples; ++i) {
      const std::string id = "s" + std::to_string(i);
      const auto img = make_image_tensor(read_image(dir / "o3" / id / "image.png"), cfg, id);
      const auto dump = load_embedding_dump(dir / "dumps" / (id + ".safetensors"));
      const auto fresh = enc.forward(img, false).embeddings;
      REQUIRE(dump.layers.size() == fresh.layers.size());
      for (std::size_t l = 0; l < dump.layers.size(); ++l)
        CHECK(linalg::max_abs_diff(dump.layers[l].cast<double>(), fresh.layers[l].cast<double>()) < 1e-3);
    }
  }
}
