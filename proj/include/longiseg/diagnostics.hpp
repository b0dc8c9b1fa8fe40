#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "longiseg/network.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

/// Eval-mode forward of one volume; returns the [C_l, W_l, H_l, D_l] feature
/// of a layer as per-position rows [W_l*H_l*D_l, C_l] (row-major over w, h, d).
Tensor layer_features(Model& model, const Volume& vol, int layer_id);

/// Per-position embeddings of a layer: projector output (without the optional
/// final normalisation) when the model has a head for the layer, raw features otherwise.
Tensor layer_embeddings(Model& model, const Volume& vol, int layer_id);

/// Cosine similarity between the embedding at `query` in vol_q and every
/// position of vol_k, as a single-channel volume of the layer's extent.
Volume similarity_map(Model& model, const Volume& vol_q, const Volume& vol_k, const Index3& query, int layer_id);

/// Singular values (descending, length W_l*H_l) of C = 1/c sum_i (z_i - zbar)(z_i - zbar)^T
/// where z_i is channel i of the axial slice d = `slice` (default middle)
/// flattened over (w, h) and zbar is the mean over channels.
std::vector<double> covariance_spectrum(Model& model, const Volume& vol, int layer_id, int slice = -1);

/// Same spectrum from an explicit [positions, channels] matrix.
std::vector<double> covariance_spectrum(const Tensor& features);

/// Number of values above rel_threshold * max.
int effective_rank(const std::vector<double>& sv, double rel_threshold = 1e-2);

/// Per layer: mean over embedding dimensions of sqrt(var + eps) across positions.
std::map<int, double> projection_std(Model& model, const Volume& vol, const std::vector<int>& layer_ids,
                                     double eps = 1e-4);
double projection_std(const Tensor& embeddings, double eps = 1e-4);

/// Loss log with empty fields as nullopt.
struct LossCurve {
  std::vector<std::string> columns;
  std::vector<std::vector<std::optional<double>>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

LossCurve read_loss_csv(const std::filesystem::path& path);

/// First logged step whose `column` value is <= threshold.
std::optional<int> first_step_at_or_below(const LossCurve& curve, const std::string& column, double threshold);

}  // namespace longiseg
