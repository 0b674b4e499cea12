#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "qkscope/checkpoint.hpp"
#include "qkscope/linalg.hpp"
#include "qkscope/matrix.hpp"

namespace qkscope {

/// One attention head's query/key factors and their product M = W_qᵀ W_k (d x d).
/// Biases never enter: they do not depend on the token embedding.
struct InteractionHead {
  std::size_t layer = 0;
  std::size_t head = 0;
  MatrixD w_query;  // d_k x d
  MatrixD w_key;    // d_k x d
  MatrixD interaction;

  std::size_t head_dim() const noexcept { return w_query.rows(); }
  std::size_t embed_dim() const noexcept { return w_query.cols(); }
};

MatrixD interaction_matrix(const MatrixD& w_query, const MatrixD& w_key);

InteractionHead make_interaction_head(std::size_t layer, std::size_t head, MatrixD w_query,
                                      MatrixD w_key);
InteractionHead make_interaction_head(const ModelWeights& weights, std::size_t layer,
                                      std::size_t head);

/// Singular mode n: query direction u attends to key direction v with strength sigma.
struct SingularMode {
  std::size_t index = 0;
  std::vector<double> u;
  double sigma = 0.0;
  std::vector<double> v;
  double cosine = 0.0;
  std::size_t degenerate_group = 0;
  bool degenerate = false;  // shares its group with another mode
};

struct HeadModes {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t embed_dim = 0;
  std::size_t head_dim = 0;
  std::vector<SingularMode> modes;         // sigma non-increasing
  std::optional<double> weighted_cosine;   // absent for an all-zero spectrum
};

enum class SvdRoute {
  Auto,      // factored when d_k < d, else full
  Full,      // Jacobi SVD of the d x d product
  Factored,  // QR of both factors, SVD of the d_k x d_k core
};

struct DecomposeOptions {
  double degeneracy_tol = 1e-6;
  SvdRoute route = SvdRoute::Auto;
};

HeadModes decompose_head(const InteractionHead& head, const DecomposeOptions& options = {});

/// Canonical orientation: the largest-magnitude entry of u is positive (first index on ties).
void canonicalize_sign(SingularMode& mode);
/// The (−u, −v) orientation of a mode; cosine unchanged.
SingularMode opposite_orientation(const SingularMode& mode);

struct ScoreDecomposition {
  double total = 0.0;
  std::vector<double> contributions;
};

ScoreDecomposition score_decomposition(std::span<const double> query_token,
                                       std::span<const double> key_token,
                                       const HeadModes& modes);

/// Σ (σ_i / Σσ_j) cos_i; throws AllZeroSpectrum.
double weighted_cosine(std::span<const SingularMode> modes);

struct BasisChange {
  InteractionHead head;
  double condition_number = 0.0;
};

/// W_q -> Aᵀ W_q and W_k -> A⁻¹ W_k for invertible A (d_k x d_k).
BasisChange apply_basis_change(const InteractionHead& head, const MatrixD& a);

struct NullInterval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Quantile interval of the cosine between two independent isotropic Gaussian
/// d-vectors, estimated from `samples` seeded draws.
NullInterval null_interval(std::size_t d, double confidence, std::uint64_t seed,
                           std::size_t samples = 1'000'000);

}  // namespace qkscope
