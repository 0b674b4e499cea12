#include "qkscope/interaction.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "qkscope/error.hpp"

namespace qkscope {

MatrixD interaction_matrix(const MatrixD& w_query, const MatrixD& w_key) {
  if (w_query.rows() != w_key.rows() || w_query.cols() != w_key.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "interaction_matrix: W_q is " +
                                              std::to_string(w_query.rows()) + "x" +
                                              std::to_string(w_query.cols()) + " but W_k is " +
                                              std::to_string(w_key.rows()) + "x" +
                                              std::to_string(w_key.cols()));
  }
  return linalg::matmul_at_b(w_query, w_key);
}

InteractionHead make_interaction_head(std::size_t layer, std::size_t head, MatrixD w_query,
                                      MatrixD w_key) {
  InteractionHead h;
  h.layer = layer;
  h.head = head;
  h.interaction = interaction_matrix(w_query, w_key);
  h.w_query = std::move(w_query);
  h.w_key = std::move(w_key);
  return h;
}

InteractionHead make_interaction_head(const ModelWeights& weights, std::size_t layer,
                                      std::size_t head) {
  return make_interaction_head(layer, head, weights.query_head(layer, head),
                               weights.key_head(layer, head));
}

void canonicalize_sign(SingularMode& mode) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < mode.u.size(); ++i)
    if (std::abs(mode.u[i]) > std::abs(mode.u[best])) best = i;
  if (!mode.u.empty() && mode.u[best] < 0.0) {
    for (auto& x : mode.u) x = -x;
    for (auto& x : mode.v) x = -x;
  }
}

SingularMode opposite_orientation(const SingularMode& mode) {
  SingularMode out = mode;
  for (auto& x : out.u) x = -x;
  for (auto& x : out.v) x = -x;
  return out;
}

double weighted_cosine(std::span<const SingularMode> modes) {
  double total = 0.0;
  for (const auto& m : modes) total += m.sigma;
  if (!(total > 0.0)) {
    throw Error(ErrorKind::AllZeroSpectrum, "weighted_cosine: all singular values are zero");
  }
  double acc = 0.0;
  for (const auto& m : modes) acc += (m.sigma / total) * m.cosine;
  return std::clamp(acc, -1.0, 1.0);
}

HeadModes decompose_head(const InteractionHead& head, const DecomposeOptions& options) {
  if (!all_finite(head.interaction)) {
    throw Error(ErrorKind::NonFiniteInput, "decompose_head: interaction matrix is not finite");
  }
  const std::size_t d = head.interaction.rows();
  const std::size_t dk = head.head_dim();
  SvdRoute route = options.route;
  if (route == SvdRoute::Auto) route = dk < d ? SvdRoute::Factored : SvdRoute::Full;
  if (route == SvdRoute::Factored && dk > d) route = SvdRoute::Full;

  MatrixD u;
  MatrixD v;
  std::vector<double> sigma;
  if (route == SvdRoute::Factored) {
    const auto qq = linalg::thin_qr(head.w_query.transposed());
    const auto qk = linalg::thin_qr(head.w_key.transposed());
    const auto core = linalg::svd(linalg::matmul_a_bt(qq.r, qk.r));
    u = linalg::matmul(qq.q, core.u);
    v = linalg::matmul(qk.q, core.v);
    sigma = core.sigma;
  } else {
    auto full = linalg::svd(head.interaction);
    u = std::move(full.u);
    v = std::move(full.v);
    sigma = std::move(full.sigma);
  }

  HeadModes out;
  out.layer = head.layer;
  out.head = head.head;
  out.embed_dim = d;
  out.head_dim = dk;
  out.modes.resize(sigma.size());
  const double zero_floor = sigma.empty() ? 0.0 : 1e-10 * sigma.front();
  std::size_t group = 0;
  for (std::size_t n = 0; n < sigma.size(); ++n) {
    SingularMode& m = out.modes[n];
    m.index = n;
    m.sigma = sigma[n];
    m.u = u.column(n);
    m.v = v.column(n);
    canonicalize_sign(m);
    m.cosine = std::clamp(linalg::dot<double>(m.u, m.v), -1.0, 1.0);
    if (n > 0) {
      const double prev = sigma[n - 1];
      const bool both_zero = prev <= zero_floor && sigma[n] <= zero_floor;
      const bool close = (prev - sigma[n]) < options.degeneracy_tol * prev;
      if (!(both_zero || close)) ++group;
    }
    m.degenerate_group = group;
  }
  for (std::size_t n = 0; n < out.modes.size(); ++n) {
    const bool with_prev = n > 0 && out.modes[n - 1].degenerate_group == out.modes[n].degenerate_group;
    const bool with_next = n + 1 < out.modes.size() &&
                           out.modes[n + 1].degenerate_group == out.modes[n].degenerate_group;
    out.modes[n].degenerate = with_prev || with_next;
  }
  double total = 0.0;
  for (double s : sigma) total += s;
  if (total > 0.0) out.weighted_cosine = weighted_cosine(out.modes);
  return out;
}

ScoreDecomposition score_decomposition(std::span<const double> query_token,
                                       std::span<const double> key_token,
                                       const HeadModes& modes) {
  if (query_token.size() != modes.embed_dim || key_token.size() != modes.embed_dim) {
    throw Error(ErrorKind::ShapeMismatch, "score_decomposition: token dimension " +
                                              std::to_string(query_token.size()) +
                                              " does not match embedding dimension " +
                                              std::to_string(modes.embed_dim));
  }
  ScoreDecomposition out;
  out.contributions.reserve(modes.modes.size());
  for (const auto& m : modes.modes) {
    const double c = linalg::dot<double>(query_token, m.u) * m.sigma *
                     linalg::dot<double>(m.v, key_token);
    out.contributions.push_back(c);
    out.total += c;
  }
  return out;
}

BasisChange apply_basis_change(const InteractionHead& head, const MatrixD& a) {
  const std::size_t dk = head.head_dim();
  if (a.rows() != dk || a.cols() != dk) {
    throw Error(ErrorKind::ShapeMismatch, "apply_basis_change: A must be d_k x d_k");
  }
  BasisChange out;
  out.condition_number = linalg::condition_number(a);
  if (!std::isfinite(out.condition_number) || out.condition_number > 1e14) {
    throw Error(ErrorKind::SingularMatrix, "apply_basis_change: A is singular (condition " +
                                               std::to_string(out.condition_number) + ")");
  }
  MatrixD a_inv;
  try {
    a_inv = linalg::inverse(a);
  } catch (const Error&) {
    throw Error(ErrorKind::SingularMatrix, "apply_basis_change: A is singular");
  }
  out.head = make_interaction_head(head.layer, head.head, linalg::matmul_at_b(a, head.w_query),
                                   linalg::matmul(a_inv, head.w_key));
  return out;
}

NullInterval null_interval(std::size_t d, double confidence, std::uint64_t seed,
                           std::size_t samples) {
  if (d < 2) throw Error(ErrorKind::InvalidArgument, "null_interval: d must be >= 2");
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "null_interval: confidence must lie in (0, 1)");
  }
  if (samples < 2) throw Error(ErrorKind::InvalidArgument, "null_interval: need >= 2 samples");
  // The cosine of two independent isotropic Gaussians is distributed as the first
  // coordinate of a uniform unit vector: t = ±sqrt(g1 / (g1 + g2)) with
  // g1 ~ Gamma(1/2), g2 ~ Gamma((d - 1) / 2).
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> head_dist(0.5, 1.0);
  std::gamma_distribution<double> tail_dist(0.5 * static_cast<double>(d - 1), 1.0);
  std::vector<double> draws(samples);
  for (auto& t : draws) {
    const double g1 = head_dist(rng);
    const double g2 = tail_dist(rng);
    const double sign = (rng() & 1u) ? 1.0 : -1.0;
    const double sum = g1 + g2;
    t = sum > 0.0 ? sign * std::sqrt(g1 / sum) : 0.0;
  }
  std::sort(draws.begin(), draws.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(samples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, samples - 1);
    const double frac = pos - static_cast<double>(lo);
    return draws[lo] + frac * (draws[hi] - draws[lo]);
  };
  const double tail = 0.5 * (1.0 - confidence);
  return {quantile(tail), quantile(1.0 - tail)};
}

}  // namespace qkscope
