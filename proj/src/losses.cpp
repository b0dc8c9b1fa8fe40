#include "longiseg/losses.hpp"

#include <cmath>

#include "longiseg/error.hpp"

namespace longiseg {

namespace {

constexpr double kNormFloor = 1e-12;

template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* what) {
  require(t.rank() == 2, ErrorKind::shape, std::string(what) + ": expected a [rows, dims] matrix");
}

// cos(a_r, b_r) with gradient contributions scale * dcos/da and scale * dcos/db.
template <typename T>
double row_cosine(const BasicTensor<T>& a, const BasicTensor<T>& b, int r, double scale, T* grad_a,
                  T* grad_b) {
  const int n = a.dim(1);
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (int c = 0; c < n; ++c) {
    const double x = a.at(r, c), y = b.at(r, c);
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  const double na = std::max(std::sqrt(aa), kNormFloor);
  const double nb = std::max(std::sqrt(bb), kNormFloor);
  const double cos = ab / (na * nb);
  if (grad_a) {
    const bool floored = std::sqrt(aa) <= kNormFloor;
    for (int c = 0; c < n; ++c) {
      const double g = b.at(r, c) / (na * nb) - (floored ? 0.0 : cos * a.at(r, c) / (na * na));
      grad_a[c] += static_cast<T>(scale * g);
    }
  }
  if (grad_b) {
    const bool floored = std::sqrt(bb) <= kNormFloor;
    for (int c = 0; c < n; ++c) {
      const double g = a.at(r, c) / (na * nb) - (floored ? 0.0 : cos * b.at(r, c) / (nb * nb));
      grad_b[c] += static_cast<T>(scale * g);
    }
  }
  return cos;
}

template <typename T>
void check_probabilities(const BasicTensor<T>& p, const char* what) {
  require(p.rank() >= 2 && p.dim(1) >= 2, ErrorKind::shape,
          std::string(what) + ": expected [N, C>=2, ...] probabilities");
  const int N = p.dim(0), C = p.dim(1);
  const std::size_t S = spatial_size(p.shape());
  for (int n = 0; n < N; ++n) {
    for (std::size_t s = 0; s < S; ++s) {
      double sum = 0.0;
      for (int c = 0; c < C; ++c) {
        const double v = p[(static_cast<std::size_t>(n) * C + c) * S + s];
        require(v >= -1e-6, ErrorKind::invalid, std::string(what) + ": negative probability");
        sum += v;
      }
      require(std::abs(sum - 1.0) <= 1e-3, ErrorKind::invalid,
              std::string(what) + ": channels do not sum to one");
    }
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {lambda_sim, alpha_rec, mu_std, gamma_cov, beta_orth, cs_weight}) {
    require(v >= 0.0, ErrorKind::config, "loss weights must be non-negative");
  }
  require(eta > 0.0 && epsilon > 0.0, ErrorKind::config, "eta and epsilon must be positive");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda_sim", w.lambda_sim}, {"alpha_rec", w.alpha_rec}, {"mu_std", w.mu_std},
                     {"gamma_cov", w.gamma_cov},   {"beta_orth", w.beta_orth}, {"eta", w.eta},
                     {"epsilon", w.epsilon},       {"cs_weight", w.cs_weight}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.lambda_sim = j.value("lambda_sim", w.lambda_sim);
  w.alpha_rec = j.value("alpha_rec", w.alpha_rec);
  w.mu_std = j.value("mu_std", w.mu_std);
  w.gamma_cov = j.value("gamma_cov", w.gamma_cov);
  w.beta_orth = j.value("beta_orth", w.beta_orth);
  w.eta = j.value("eta", w.eta);
  w.epsilon = j.value("epsilon", w.epsilon);
  w.cs_weight = j.value("cs_weight", w.cs_weight);
  w.validate();
}

template <typename T>
LossValue<T> sim_pair(const BasicTensor<T>& p1, const BasicTensor<T>& z1, const BasicTensor<T>& p2,
                      const BasicTensor<T>& z2) {
  require_matrix(p1, "sim_pair");
  require_same_shape(p1.shape(), z1.shape(), "sim_pair p1/z1");
  require_same_shape(p1.shape(), p2.shape(), "sim_pair p1/p2");
  require_same_shape(p1.shape(), z2.shape(), "sim_pair p1/z2");
  const int M = p1.dim(0), n = p1.dim(1);
  require(M >= 1, ErrorKind::invalid, "sim_pair: no rows");
  LossValue<T> out;
  out.grads = {BasicTensor<T>(p1.shape()), BasicTensor<T>(), BasicTensor<T>(p2.shape()), BasicTensor<T>()};
  const double scale = -0.5 / M;
  double total = 0.0;
  for (int m = 0; m < M; ++m) {
    T* g1 = out.grads[0].data() + static_cast<std::size_t>(m) * n;
    T* g2 = out.grads[2].data() + static_cast<std::size_t>(m) * n;
    total += -0.5 * row_cosine(p1, z2, m, scale, g1, static_cast<T*>(nullptr));
    total += -0.5 * row_cosine(p2, z1, m, scale, g2, static_cast<T*>(nullptr));
  }
  out.value = total / M;
  return out;
}

double sim_total(std::span<const double> per_layer_terms) {
  require(!per_layer_terms.empty(), ErrorKind::invalid, "sim_total: no layers");
  double s = 0.0;
  for (double v : per_layer_terms) s += v;
  return s / static_cast<double>(per_layer_terms.size());
}

template <typename T>
LossValue<T> orth_loss(const BasicTensor<T>& z_enc, const BasicTensor<T>& z_dec, bool squared) {
  require_matrix(z_enc, "orth_loss");
  require_same_shape(z_enc.shape(), z_dec.shape(), "orth_loss");
  const int M = z_enc.dim(0), n = z_enc.dim(1);
  require(M >= 1, ErrorKind::invalid, "orth_loss: no rows");
  LossValue<T> out;
  out.grads = {BasicTensor<T>(z_enc.shape()), BasicTensor<T>(z_dec.shape())};
  double total = 0.0;
  for (int m = 0; m < M; ++m) {
    T* ge = out.grads[0].data() + static_cast<std::size_t>(m) * n;
    T* gd = out.grads[1].data() + static_cast<std::size_t>(m) * n;
    if (!squared) {
      total += row_cosine(z_enc, z_dec, m, 1.0 / M, ge, gd);
    } else {
      // Two passes: the chain factor 2*cos needs the cosine first.
      const double cos = row_cosine<T>(z_enc, z_dec, m, 0.0, nullptr, nullptr);
      row_cosine(z_enc, z_dec, m, 2.0 * cos / M, ge, gd);
      total += cos * cos;
    }
  }
  out.value = total / M;
  return out;
}

template <typename T>
LossValue<T> std_loss(const std::vector<const BasicTensor<T>*>& layers, double eta, double epsilon) {
  require(!layers.empty(), ErrorKind::invalid, "std_loss: no layers");
  LossValue<T> out;
  const double k = static_cast<double>(layers.size());
  double total = 0.0;
  for (const auto* z : layers) {
    require_matrix(*z, "std_loss");
    const int M = z->dim(0), n = z->dim(1);
    require(M >= 2, ErrorKind::invalid, "std_loss: needs at least two samples");
    BasicTensor<T> g(z->shape());
    double layer = 0.0;
    for (int j = 0; j < n; ++j) {
      double mean = 0.0;
      for (int m = 0; m < M; ++m) mean += z->at(m, j);
      mean /= M;
      double ss = 0.0;
      for (int m = 0; m < M; ++m) {
        const double d = z->at(m, j) - mean;
        ss += d * d;
      }
      const double S = std::sqrt(ss / (M - 1) + epsilon);
      const double hinge = eta - S;
      if (hinge > 0.0) {
        layer += hinge;
        const double coeff = -1.0 / ((M - 1) * S) / (n * k);
        for (int m = 0; m < M; ++m) g.at(m, j) = static_cast<T>(coeff * (z->at(m, j) - mean));
      }
    }
    total += layer / n;
    out.grads.push_back(std::move(g));
  }
  out.value = total / k;
  return out;
}

template <typename T>
LossValue<T> cov_loss(const std::vector<const BasicTensor<T>*>& layers) {
  require(!layers.empty(), ErrorKind::invalid, "cov_loss: no layers");
  LossValue<T> out;
  const double k = static_cast<double>(layers.size());
  double total = 0.0;
  for (const auto* z : layers) {
    require_matrix(*z, "cov_loss");
    const int M = z->dim(0), n = z->dim(1);
    require(M >= 2, ErrorKind::invalid, "cov_loss: needs at least two samples");
    std::vector<double> centered(static_cast<std::size_t>(M) * n);
    for (int j = 0; j < n; ++j) {
      double mean = 0.0;
      for (int m = 0; m < M; ++m) mean += z->at(m, j);
      mean /= M;
      for (int m = 0; m < M; ++m) centered[static_cast<std::size_t>(m) * n + j] = z->at(m, j) - mean;
    }
    std::vector<double> cov(static_cast<std::size_t>(n) * n, 0.0);
    for (int m = 0; m < M; ++m) {
      const double* row = &centered[static_cast<std::size_t>(m) * n];
      for (int u = 0; u < n; ++u) {
        const double ru = row[u];
        double* cu = &cov[static_cast<std::size_t>(u) * n];
        for (int v = u + 1; v < n; ++v) cu[v] += ru * row[v];
      }
    }
    double off = 0.0;
    for (int u = 0; u < n; ++u)
      for (int v = u + 1; v < n; ++v) {
        double& c = cov[static_cast<std::size_t>(u) * n + v];
        c /= (M - 1);
        cov[static_cast<std::size_t>(v) * n + u] = c;
        off += 2.0 * c * c;
      }
    total += off / n;
    // d/dz_m = 4 / (n (M-1) k) * C_off z_c,m  (row means of z_c vanish).
    const double coeff = 4.0 / (n * (M - 1.0) * k);
    BasicTensor<T> g(z->shape());
    for (int m = 0; m < M; ++m) {
      const double* row = &centered[static_cast<std::size_t>(m) * n];
      for (int u = 0; u < n; ++u) {
        const double* cu = &cov[static_cast<std::size_t>(u) * n];
        double acc = 0.0;
        for (int v = 0; v < n; ++v) acc += cu[v] * row[v];
        g.at(m, u) = static_cast<T>(coeff * acc);
      }
    }
    out.grads.push_back(std::move(g));
  }
  out.value = total / k;
  return out;
}

template <typename T>
LossValue<T> rec_loss(const BasicTensor<T>& output, const BasicTensor<T>& target) {
  require_same_shape(output.shape(), target.shape(), "rec_loss");
  require(output.size() > 0, ErrorKind::invalid, "rec_loss: empty input");
  LossValue<T> out;
  out.grads = {BasicTensor<T>(output.shape()), BasicTensor<T>()};
  const double inv = 1.0 / static_cast<double>(output.size());
  double total = 0.0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double d = static_cast<double>(output[i]) - target[i];
    total += d * d;
    out.grads[0][i] = static_cast<T>(2.0 * d * inv);
  }
  out.value = total * inv;
  return out;
}

template <typename T>
LossValue<T> cs_loss(const BasicTensor<T>& prob_j, const BasicTensor<T>& prob_k) {
  require_same_shape(prob_j.shape(), prob_k.shape(), "cs_loss");
  check_probabilities(prob_j, "cs_loss");
  check_probabilities(prob_k, "cs_loss");
  const int N = prob_j.dim(0), C = prob_j.dim(1);
  const std::size_t S = spatial_size(prob_j.shape());
  const int F = C - 1;
  LossValue<T> out;
  out.grads = {BasicTensor<T>(prob_j.shape()), BasicTensor<T>(prob_k.shape())};
  double dice_sum = 0.0;
  for (int c = 1; c < C; ++c) {
    double I = 0.0, P = 0.0, Q = 0.0;
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const double p = prob_j[base + s], q = prob_k[base + s];
        I += p * q;
        P += p * p;
        Q += q * q;
      }
    }
    const double num = 2.0 * I + kDiceSmooth;
    const double den = P + Q + kDiceSmooth;
    dice_sum += num / den;
    const double scale = -1.0 / F;
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const double p = prob_j[base + s], q = prob_k[base + s];
        out.grads[0][base + s] = static_cast<T>(scale * (2.0 * q * den - num * 2.0 * p) / (den * den));
        out.grads[1][base + s] = static_cast<T>(scale * (2.0 * p * den - num * 2.0 * q) / (den * den));
      }
    }
  }
  out.value = 1.0 - dice_sum / F;
  return out;
}

template <typename T>
LossValue<T> sup_loss(const BasicTensor<T>& prob, std::span<const std::uint16_t> labels) {
  check_probabilities(prob, "sup_loss");
  const int N = prob.dim(0), C = prob.dim(1);
  const std::size_t S = spatial_size(prob.shape());
  require(labels.size() == static_cast<std::size_t>(N) * S, ErrorKind::shape,
          "sup_loss: label count does not match prediction");
  for (auto y : labels) {
    require(y < C, ErrorKind::invalid, "sup_loss: label " + std::to_string(y) + " out of range");
  }
  const int F = C - 1;
  LossValue<T> out;
  out.grads = {BasicTensor<T>(prob.shape())};
  auto& g = out.grads[0];

  double dice_sum = 0.0;
  for (int c = 1; c < C; ++c) {
    double I = 0.0, P = 0.0, Y = 0.0;
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const double p = prob[base + s];
        const double y = labels[static_cast<std::size_t>(n) * S + s] == c ? 1.0 : 0.0;
        I += p * y;
        P += p * p;
        Y += y;
      }
    }
    const double num = 2.0 * I + kDiceSmooth;
    const double den = P + Y + kDiceSmooth;
    dice_sum += num / den;
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const double p = prob[base + s];
        const double y = labels[static_cast<std::size_t>(n) * S + s] == c ? 1.0 : 0.0;
        g[base + s] += static_cast<T>(-(2.0 * y * den - num * 2.0 * p) / (den * den) / F);
      }
    }
  }

  const double inv = 1.0 / (static_cast<double>(N) * S);
  double ce = 0.0;
  for (int n = 0; n < N; ++n) {
    for (std::size_t s = 0; s < S; ++s) {
      const int y = labels[static_cast<std::size_t>(n) * S + s];
      const std::size_t i = (static_cast<std::size_t>(n) * C + y) * S + s;
      const double p = std::max(static_cast<double>(prob[i]), kNormFloor);
      ce -= std::log(p);
      g[i] += static_cast<T>(-inv / p);
    }
  }
  out.value = (1.0 - dice_sum / F) + ce * inv;
  return out;
}

double pretrain_total(const PretrainParts& parts, const LossWeights& w) {
  return w.lambda_sim * parts.sim + w.alpha_rec * parts.rec + w.mu_std * parts.std +
         w.gamma_cov * parts.cov + w.beta_orth * parts.orth;
}

double finetune_total(double sup, double cs, const LossWeights& w) { return sup + w.cs_weight * cs; }

#define LONGISEG_INSTANTIATE(T)                                                                    \
  template LossValue<T> sim_pair(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template LossValue<T> orth_loss(const BasicTensor<T>&, const BasicTensor<T>&, bool);             \
  template LossValue<T> std_loss(const std::vector<const BasicTensor<T>*>&, double, double);       \
  template LossValue<T> cov_loss(const std::vector<const BasicTensor<T>*>&);                       \
  template LossValue<T> rec_loss(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template LossValue<T> cs_loss(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template LossValue<T> sup_loss(const BasicTensor<T>&, std::span<const std::uint16_t>);

LONGISEG_INSTANTIATE(float)
LONGISEG_INSTANTIATE(double)

#undef LONGISEG_INSTANTIATE

}  // namespace longiseg
