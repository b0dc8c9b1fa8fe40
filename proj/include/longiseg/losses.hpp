#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "longiseg/ops.hpp"
#include "longiseg/tensor.hpp"

namespace longiseg {

/// Objective weights and regulariser constants.
struct LossWeights {
  double lambda_sim = 1.0;
  double alpha_rec = 10.0;
  double mu_std = 1e-3;
  double gamma_cov = 1e-3;
  double beta_orth = 100.0;
  double eta = 1.0;      // standard-deviation hinge threshold
  double epsilon = 1e-4; // variance stabiliser
  double cs_weight = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Smoothing added to numerator and denominator of every soft Dice.
inline constexpr double kDiceSmooth = 1e-5;

/// All objectives below take [rows, dims] matrices or [N, C, ...] probability
/// maps and return the value with d(value)/d(argument) in argument order.
/// Arguments that are never differentiated get an empty gradient tensor.

/// Symmetric negative cosine, mean over rows:
///   1/M sum_m ( -1/2 cos(p1_m, z2_m) - 1/2 cos(p2_m, z1_m) ).
/// Gradients: {p1, (none), p2, (none)}; the z arguments are stop-gradient targets.
template <typename T>
LossValue<T> sim_pair(const BasicTensor<T>& p1, const BasicTensor<T>& z1, const BasicTensor<T>& p2,
                      const BasicTensor<T>& z2);

/// Mean of per-layer similarity terms.
double sim_total(std::span<const double> per_layer_terms);

/// Mean row-wise cosine between encoder and decoder projections (or the mean
/// squared cosine when `squared`).
template <typename T>
LossValue<T> orth_loss(const BasicTensor<T>& z_enc, const BasicTensor<T>& z_dec, bool squared = false);

/// Hinge on per-dimension standard deviation across rows, averaged over
/// dimensions and then over layers. Needs at least two rows per layer.
template <typename T>
LossValue<T> std_loss(const std::vector<const BasicTensor<T>*>& layers, double eta, double epsilon);

/// Squared off-diagonal sample covariance (divisor rows - 1), divided by the
/// embedding width, averaged over layers.
template <typename T>
LossValue<T> cov_loss(const std::vector<const BasicTensor<T>*>& layers);

/// Mean squared error; gradients {output, (none)}.
template <typename T>
LossValue<T> rec_loss(const BasicTensor<T>& output, const BasicTensor<T>& target);

/// 1 - soft Dice between two channel-normalised probability maps, averaged
/// over foreground channels (1..C-1).
template <typename T>
LossValue<T> cs_loss(const BasicTensor<T>& prob_j, const BasicTensor<T>& prob_k);

/// (1 - mean foreground soft Dice against one-hot labels) + mean voxelwise
/// cross-entropy. `labels` holds N*W*H*D class indices. Gradient {prob}.
template <typename T>
LossValue<T> sup_loss(const BasicTensor<T>& prob, std::span<const std::uint16_t> labels);

struct PretrainParts {
  double sim = 0.0;
  double rec = 0.0;
  double std = 0.0;
  double cov = 0.0;
  double orth = 0.0;
};

/// lambda*sim + alpha*rec + mu*std + gamma*cov + beta*orth.
double pretrain_total(const PretrainParts& parts, const LossWeights& w);

/// sup + cs_weight * cs.
double finetune_total(double sup, double cs, const LossWeights& w);

}  // namespace longiseg
