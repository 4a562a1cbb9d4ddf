#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pco/dataset.hpp"
#include "pco/tape.hpp"

namespace pco::model {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int d_model = 24;
  int n_blocks = 3;
  int n_heads = 1;
  int ff_dim = 96;
  int max_len = 50;
  int input_dim = data::kGopDim;
  int n_utt_aspects = data::kUttAspects;
  int n_word_aspects = data::kWordAspects;

  void validate() const;  // throws ModelError
};

struct AffineHead {
  ad::Tensor w;  // (d_model, 1)
  ad::Tensor b;  // (1)
};

struct BlockParams {
  ad::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Tensor ln1_gamma, ln1_beta;
  ad::Tensor w1, b1, w2, b2;
  ad::Tensor ln2_gamma, ln2_beta;
};

// All trainable tensors. Tensors are plain values; bind() re-registers them
// on a tape for a training step.
struct ModelParams {
  ModelConfig config;
  ad::Tensor input_w;       // (input_dim, d_model)
  ad::Tensor input_b;       // (d_model)
  ad::Tensor pos_table;     // (max_len, d_model)
  ad::Tensor aspect_table;  // (n_utt_aspects, d_model)
  std::vector<BlockParams> blocks;
  std::vector<AffineHead> utt_heads;   // accuracy, completeness, fluency, prosody, total
  std::vector<AffineHead> word_heads;  // accuracy, stress, total
  AffineHead phone_head;

  // Stable canonical enumeration; also the checkpoint and optimizer order.
  void visit(const std::function<void(const std::string&, const ad::Tensor&)>& f) const;
  void visit_mut(const std::function<void(const std::string&, ad::Tensor&)>& f);

  std::int64_t parameter_count() const;
  ModelParams bind(ad::Tape& tape) const;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

struct ForwardOutput {
  ad::Tensor h_utt;    // (B, n_utt_aspects, d_model)
  ad::Tensor h_phone;  // (B, max_len, d_model)
  std::vector<ad::Tensor> utt_pred;   // n_utt_aspects tensors of shape (B)
  std::vector<ad::Tensor> word_pred;  // n_word_aspects tensors of shape (B, max_len)
  ad::Tensor phone_pred;              // (B, max_len)
};

// Full encoder pass. Attention treats padded positions as unattendable, so
// masked inputs cannot influence any real position.
ForwardOutput forward(const ModelParams& params, const data::Batch& batch);

struct PhoneEmbedding {
  int sample_index = 0;
  std::string utt_id;
  int position = 0;
  int phoneme_id = 0;
  double score = 0.0;
  std::vector<double> embedding;  // d_model, pre-head h_phone row
};

// One record per unmasked phone token, in batch order.
std::vector<PhoneEmbedding> extract_phone_embeddings(const ModelParams& params,
                                                     const data::Batch& batch);

// Binary checkpoint: config manifest + flat name -> (shape, f64 LE payload)
// map. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

}  // namespace pco::model
