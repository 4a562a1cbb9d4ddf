#include "pco/model.hpp"

#include <cmath>

#include "pco/rng.hpp"

namespace pco::model {

namespace {

// Additive attention bias; -1e30 empties a softmax slot exactly after the
// max-subtraction (exp underflows to 0), keeping padded keys invisible.
constexpr double kMaskedScore = -1e30;

}  // namespace

void ModelConfig::validate() const {
  if (d_model < 1 || n_blocks < 1 || n_heads < 1 || ff_dim < 1 || max_len < 1 || input_dim < 1 ||
      n_utt_aspects < 1 || n_word_aspects < 1) {
    throw ModelError("model config: all extents must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ModelError("model config: d_model " + std::to_string(d_model) +
                     " not divisible by n_heads " + std::to_string(n_heads));
  }
}

void ModelParams::visit(const std::function<void(const std::string&, const ad::Tensor&)>& f) const {
  const_cast<ModelParams*>(this)->visit_mut(
      [&f](const std::string& name, ad::Tensor& t) { f(name, t); });
}

void ModelParams::visit_mut(const std::function<void(const std::string&, ad::Tensor&)>& f) {
  f("input.w", input_w);
  f("input.b", input_b);
  f("pos_table", pos_table);
  f("aspect_table", aspect_table);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    BlockParams& b = blocks[i];
    f(p + "wq", b.wq);
    f(p + "bq", b.bq);
    f(p + "wk", b.wk);
    f(p + "bk", b.bk);
    f(p + "wv", b.wv);
    f(p + "bv", b.bv);
    f(p + "wo", b.wo);
    f(p + "bo", b.bo);
    f(p + "ln1.gamma", b.ln1_gamma);
    f(p + "ln1.beta", b.ln1_beta);
    f(p + "ff.w1", b.w1);
    f(p + "ff.b1", b.b1);
    f(p + "ff.w2", b.w2);
    f(p + "ff.b2", b.b2);
    f(p + "ln2.gamma", b.ln2_gamma);
    f(p + "ln2.beta", b.ln2_beta);
  }
  for (std::size_t i = 0; i < utt_heads.size(); ++i) {
    f("utt_head" + std::to_string(i) + ".w", utt_heads[i].w);
    f("utt_head" + std::to_string(i) + ".b", utt_heads[i].b);
  }
  for (std::size_t i = 0; i < word_heads.size(); ++i) {
    f("word_head" + std::to_string(i) + ".w", word_heads[i].w);
    f("word_head" + std::to_string(i) + ".b", word_heads[i].b);
  }
  f("phone_head.w", phone_head.w);
  f("phone_head.b", phone_head.b);
}

std::int64_t ModelParams::parameter_count() const {
  std::int64_t n = 0;
  visit([&n](const std::string&, const ad::Tensor& t) { n += t.size(); });
  return n;
}

ModelParams ModelParams::bind(ad::Tape& tape) const {
  ModelParams bound = *this;
  bound.visit_mut([&tape](const std::string&, ad::Tensor& t) { t = tape.leaf(t); });
  return bound;
}

namespace {

ad::Tensor uniform_fan_in(rng::Engine& eng, int fan_in, ad::Shape shape) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(static_cast<std::size_t>(ad::shape_numel(shape)));
  for (double& x : v) x = rng::uniform_range(eng, -bound, bound);
  return ad::Tensor(std::move(shape), std::move(v));
}

ad::Tensor gaussian(rng::Engine& eng, double stddev, ad::Shape shape) {
  std::vector<double> v(static_cast<std::size_t>(ad::shape_numel(shape)));
  for (double& x : v) x = stddev * rng::normal(eng);
  return ad::Tensor(std::move(shape), std::move(v));
}

}  // namespace

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto eng = rng::make_engine(seed);
  const int d = config.d_model;

  ModelParams p;
  p.config = config;
  p.input_w = uniform_fan_in(eng, config.input_dim, {config.input_dim, d});
  p.input_b = ad::Tensor::zeros({d});
  p.pos_table = gaussian(eng, 0.02, {config.max_len, d});
  p.aspect_table = gaussian(eng, 0.02, {config.n_utt_aspects, d});
  for (int i = 0; i < config.n_blocks; ++i) {
    BlockParams b;
    b.wq = uniform_fan_in(eng, d, {d, d});
    b.bq = ad::Tensor::zeros({d});
    b.wk = uniform_fan_in(eng, d, {d, d});
    b.bk = ad::Tensor::zeros({d});
    b.wv = uniform_fan_in(eng, d, {d, d});
    b.bv = ad::Tensor::zeros({d});
    b.wo = uniform_fan_in(eng, d, {d, d});
    b.bo = ad::Tensor::zeros({d});
    b.ln1_gamma = ad::Tensor::full({d}, 1.0);
    b.ln1_beta = ad::Tensor::zeros({d});
    b.w1 = uniform_fan_in(eng, d, {d, config.ff_dim});
    b.b1 = ad::Tensor::zeros({config.ff_dim});
    b.w2 = uniform_fan_in(eng, config.ff_dim, {config.ff_dim, d});
    b.b2 = ad::Tensor::zeros({d});
    b.ln2_gamma = ad::Tensor::full({d}, 1.0);
    b.ln2_beta = ad::Tensor::zeros({d});
    p.blocks.push_back(std::move(b));
  }
  auto make_head = [&eng, d]() {
    return AffineHead{uniform_fan_in(eng, d, {d, 1}), ad::Tensor::zeros({1})};
  };
  for (int i = 0; i < config.n_utt_aspects; ++i) p.utt_heads.push_back(make_head());
  for (int i = 0; i < config.n_word_aspects; ++i) p.word_heads.push_back(make_head());
  p.phone_head = make_head();
  return p;
}

namespace {

ad::Tensor attention_bias(const data::Batch& batch, int n_aspects) {
  const int b_count = batch.size;
  const int t_len = batch.max_len;
  const int s_len = n_aspects + t_len;
  std::vector<double> bias(static_cast<std::size_t>(b_count) * s_len * s_len, 0.0);
  const auto mask = batch.mask.data();
  for (int b = 0; b < b_count; ++b) {
    for (int j = 0; j < t_len; ++j) {
      if (mask[static_cast<std::size_t>(b) * t_len + j] != 0.0) continue;
      // key j+n_aspects is padding: unattendable from every query
      for (int i = 0; i < s_len; ++i) {
        bias[(static_cast<std::size_t>(b) * s_len + i) * s_len + n_aspects + j] = kMaskedScore;
      }
    }
  }
  return ad::Tensor({b_count, s_len, s_len}, std::move(bias));
}

ad::Tensor apply_head(const ad::Tensor& h, const AffineHead& head) {
  // (..., d) . (d, 1) + (1), squeezed to (...)
  ad::Tensor y = ad::add(ad::matmul(h, head.w), head.b);
  ad::Shape out(h.shape().begin(), h.shape().end() - 1);
  return ad::reshape(y, std::move(out));
}

}  // namespace

ForwardOutput forward(const ModelParams& params, const data::Batch& batch) {
  const ModelConfig& cfg = params.config;
  if (batch.max_len != cfg.max_len) {
    throw ModelError("forward: batch max_len " + std::to_string(batch.max_len) +
                     " does not match model max_len " + std::to_string(cfg.max_len));
  }
  if (batch.features.shape().back() != cfg.input_dim) {
    throw ModelError("forward: feature dim " + std::to_string(batch.features.shape().back()) +
                     " does not match model input_dim " + std::to_string(cfg.input_dim));
  }
  const int b_count = batch.size;
  const int t_len = batch.max_len;
  const int n_asp = cfg.n_utt_aspects;
  const int d = cfg.d_model;

  // phone tokens: projected GOP features + learned positions
  ad::Tensor proj = ad::add(ad::matmul(batch.features, params.input_w), params.input_b);
  proj = ad::add(proj, params.pos_table);

  // prepend the aspect tokens (identity embeddings, no positions)
  std::vector<int> aspect_ids(static_cast<std::size_t>(b_count) * n_asp);
  for (int b = 0; b < b_count; ++b) {
    for (int a = 0; a < n_asp; ++a) aspect_ids[static_cast<std::size_t>(b) * n_asp + a] = a;
  }
  ad::Tensor aspects =
      ad::embedding_lookup(params.aspect_table, ad::IntTensor({b_count, n_asp}, aspect_ids));
  ad::Tensor x = ad::concat(aspects, proj, 1);

  const ad::Tensor bias = attention_bias(batch, n_asp);
  const int dh = d / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (const BlockParams& blk : params.blocks) {
    ad::Tensor q = ad::add(ad::matmul(x, blk.wq), blk.bq);
    ad::Tensor k = ad::add(ad::matmul(x, blk.wk), blk.bk);
    ad::Tensor v = ad::add(ad::matmul(x, blk.wv), blk.bv);

    ad::Tensor ctx;
    for (int h = 0; h < cfg.n_heads; ++h) {
      ad::Tensor qh = cfg.n_heads == 1 ? q : ad::slice(q, 2, h * dh, dh);
      ad::Tensor kh = cfg.n_heads == 1 ? k : ad::slice(k, 2, h * dh, dh);
      ad::Tensor vh = cfg.n_heads == 1 ? v : ad::slice(v, 2, h * dh, dh);
      ad::Tensor scores = ad::add(ad::scale(ad::bmm_nt(qh, kh), att_scale), bias);
      ad::Tensor attn = ad::softmax_last(scores);
      ad::Tensor head_ctx = ad::bmm(attn, vh);
      ctx = h == 0 ? head_ctx : ad::concat(ctx, head_ctx, 2);
    }
    ad::Tensor attn_out = ad::add(ad::matmul(ctx, blk.wo), blk.bo);
    x = ad::layer_norm(ad::add(x, attn_out), blk.ln1_gamma, blk.ln1_beta);

    ad::Tensor ff = ad::gelu(ad::add(ad::matmul(x, blk.w1), blk.b1));
    ff = ad::add(ad::matmul(ff, blk.w2), blk.b2);
    x = ad::layer_norm(ad::add(x, ff), blk.ln2_gamma, blk.ln2_beta);
  }

  ForwardOutput out;
  out.h_utt = ad::slice(x, 1, 0, n_asp);
  out.h_phone = ad::slice(x, 1, n_asp, t_len);
  for (int a = 0; a < n_asp; ++a) {
    // (B,1,d) -> head -> (B,1) -> (B)
    ad::Tensor pred = apply_head(ad::slice(out.h_utt, 1, a, 1), params.utt_heads[a]);
    out.utt_pred.push_back(ad::reshape(pred, {b_count}));
  }
  for (int a = 0; a < cfg.n_word_aspects; ++a) {
    out.word_pred.push_back(apply_head(out.h_phone, params.word_heads[a]));
  }
  out.phone_pred = apply_head(out.h_phone, params.phone_head);
  return out;
}

std::vector<PhoneEmbedding> extract_phone_embeddings(const ModelParams& params,
                                                     const data::Batch& batch) {
  const ForwardOutput out = forward(params, batch);
  const int d = params.config.d_model;
  const auto h = out.h_phone.data();
  const auto mask = batch.mask.data();
  const auto scores = batch.phone_targets.data();

  std::vector<PhoneEmbedding> records;
  for (int b = 0; b < batch.size; ++b) {
    for (int t = 0; t < batch.max_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(b) * batch.max_len + t;
      if (mask[row] == 0.0) continue;
      PhoneEmbedding rec;
      rec.sample_index = batch.sample_indices[static_cast<std::size_t>(b)];
      rec.utt_id = batch.utt_ids[static_cast<std::size_t>(b)];
      rec.position = t;
      rec.phoneme_id = batch.phoneme_ids.data[row];
      rec.score = scores[row];
      rec.embedding.assign(h.begin() + static_cast<std::ptrdiff_t>(row) * d,
                           h.begin() + static_cast<std::ptrdiff_t>(row + 1) * d);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace pco::model
