#pragma once

#include <map>

#include "pco/dataset.hpp"
#include "pco/model.hpp"
#include "pco/tape.hpp"

namespace pco::loss {

struct LossError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LossConfig {
  double lambda_d = 5.0;  // weight of the phonemic distinction term
  double lambda_o = 0.1;  // weight of the ordinal tightness term
  double margin = 1.0;    // m_c, multiplies inter-center distances
  bool normalize_features = true;

  void validate() const;
};

struct CenterEntry {
  ad::Tensor center;  // (d_model)
  int count = 0;      // tokens contributing
};

// phoneme_id -> center; only categories with count >= 1 appear. Ordered map
// so iteration (and therefore arithmetic) order is deterministic.
using CenterMap = std::map<int, CenterEntry>;

struct LossBreakdown {
  double l_mse = 0.0;
  double l_pd = 0.0;
  double l_ot = 0.0;
  double l_pco = 0.0;
  int category_count = 0;  // M
  int token_count = 0;     // N, unmasked phone tokens
  ad::Tensor mse, pd, ot;
  ad::Tensor total;  // l_pco as a tape scalar, for backward
};

// Mean over the 9 granularity x aspect pairs of the per-pair mean squared
// error over valid elements.
ad::Tensor mse_loss(const model::ForwardOutput& out, const data::Batch& batch);

// Per-category means of the (optionally unit-normalized) token embeddings.
// Gradients flow through the centers into the embeddings.
CenterMap compute_centers(const ad::Tensor& embeddings, const ad::IntTensor& phoneme_ids,
                          const ad::Tensor& mask, bool normalize);

// -(1/(M(M-1))) * sum over ordered center pairs of ||h_ci - h_cj|| * margin.
// Exactly 0 (with no gradient) when fewer than two centers exist.
ad::Tensor phonemic_distinction(const CenterMap& centers, double margin);

// (1/N) * sum over unmasked tokens of ||h_i - h_{c_i}|| * y_i. Embeddings are
// taken as given; pass the same (normalized) view the centers were built from.
ad::Tensor ordinal_tightness(const ad::Tensor& embeddings, const ad::IntTensor& phoneme_ids,
                             const ad::Tensor& phone_scores, const ad::Tensor& mask,
                             const CenterMap& centers);

// l_pco = l_mse + lambda_d * l_pd + lambda_o * l_ot, with the parts exposed.
LossBreakdown pco_loss(const model::ForwardOutput& out, const data::Batch& batch,
                       const LossConfig& config);

}  // namespace pco::loss
