#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "pco/gradcheck.hpp"
#include "pco/loss.hpp"
#include "pco/model.hpp"

#include "test_helpers.hpp"

using namespace pco;
using ad::Tensor;

namespace {

bool params_equal(const model::ModelParams& a, const model::ModelParams& b) {
  bool equal = true;
  std::vector<const Tensor*> ta, tb;
  a.visit([&ta](const std::string&, const Tensor& t) { ta.push_back(&t); });
  b.visit([&tb](const std::string&, const Tensor& t) { tb.push_back(&t); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->shape() != tb[i]->shape()) return false;
    equal = equal && std::memcmp(ta[i]->data().data(), tb[i]->data().data(),
                                 sizeof(double) * static_cast<std::size_t>(ta[i]->size())) == 0;
  }
  return equal;
}

model::ModelConfig toy_config() {
  model::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_blocks = 1;
  cfg.n_heads = 1;
  cfg.ff_dim = 16;
  cfg.max_len = 6;
  return cfg;
}

std::vector<data::UtteranceSample> small_samples(int count, int max_phones, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  return helpers::random_samples(eng, count, max_phones, 3);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("seeded initialization is deterministic with zero biases") {
  const model::ModelConfig cfg;
  const auto a = model::init_params(cfg, 11);
  const auto b = model::init_params(cfg, 11);
  CHECK(params_equal(a, b));
  const auto c = model::init_params(cfg, 12);
  CHECK_FALSE(params_equal(a, c));

  for (const auto* bias : {&a.input_b, &a.blocks[0].bq, &a.blocks[0].b1, &a.phone_head.b}) {
    for (double v : bias->data()) CHECK(v == 0.0);
  }
  for (double v : a.blocks[0].ln1_gamma.data()) CHECK(v == 1.0);
}

TEST_CASE("parameter count matches the closed-form tally") {
  const model::ModelConfig cfg;
  const auto params = model::init_params(cfg, 1);

  // independent tally from the documented shapes
  const std::int64_t d = cfg.d_model, ff = cfg.ff_dim;
  const std::int64_t input = cfg.input_dim * d + d;
  const std::int64_t tables = cfg.max_len * d + cfg.n_utt_aspects * d;
  const std::int64_t attn = 4 * (d * d + d);
  const std::int64_t norms = 4 * d;
  const std::int64_t ffn = d * ff + ff + ff * d + d;
  const std::int64_t heads = 9 * (d + 1);
  const std::int64_t expected = input + tables + cfg.n_blocks * (attn + norms + ffn) + heads;

  CHECK(expected == 25257);
  CHECK(params.parameter_count() == 25257);
}

TEST_CASE("forward shapes mirror the batch") {
  const model::ModelConfig cfg;
  const auto params = model::init_params(cfg, 3);
  const auto samples = small_samples(2, 8, 5);
  const auto batch = data::make_batches(samples, 2, cfg.max_len, std::nullopt).front();
  const auto out = model::forward(params, batch);

  CHECK(out.h_phone.shape() == ad::Shape{2, 50, 24});
  CHECK(out.h_utt.shape() == ad::Shape{2, 5, 24});
  REQUIRE(out.utt_pred.size() == 5);
  for (const auto& p : out.utt_pred) CHECK(p.shape() == ad::Shape{2});
  REQUIRE(out.word_pred.size() == 3);
  for (const auto& p : out.word_pred) CHECK(p.shape() == ad::Shape{2, 50});
  CHECK(out.phone_pred.shape() == ad::Shape{2, 50});

  for (double v : out.h_phone.data()) CHECK(std::isfinite(v));
}

TEST_CASE("multi-head attention changes nothing structural") {
  model::ModelConfig cfg = toy_config();
  cfg.n_heads = 2;
  const auto params = model::init_params(cfg, 3);
  const auto samples = small_samples(2, 4, 6);
  const auto batch = data::make_batches(samples, 2, cfg.max_len, std::nullopt).front();
  const auto out = model::forward(params, batch);
  CHECK(out.h_phone.shape() == ad::Shape{2, cfg.max_len, cfg.d_model});
}

TEST_CASE("batch max_len must match the model") {
  const auto params = model::init_params(toy_config(), 1);
  const auto samples = small_samples(1, 3, 7);
  const auto batch = data::make_batches(samples, 1, 9, std::nullopt).front();
  CHECK_THROWS_AS(model::forward(params, batch), model::ModelError);
}

TEST_CASE("permuting utterances permutes outputs without mixing") {
  const auto cfg = toy_config();
  const auto params = model::init_params(cfg, 9);
  const auto samples = small_samples(2, 5, 8);
  const std::vector<data::UtteranceSample> swapped = {samples[1], samples[0]};

  const auto b1 = data::make_batches(samples, 2, cfg.max_len, std::nullopt).front();
  const auto b2 = data::make_batches(swapped, 2, cfg.max_len, std::nullopt).front();
  const auto o1 = model::forward(params, b1);
  const auto o2 = model::forward(params, b2);

  const int row = cfg.max_len * cfg.d_model;
  CHECK(std::memcmp(o1.h_phone.data().data(), o2.h_phone.data().data() + row,
                    sizeof(double) * static_cast<std::size_t>(row)) == 0);
  CHECK(std::memcmp(o1.h_phone.data().data() + row, o2.h_phone.data().data(),
                    sizeof(double) * static_cast<std::size_t>(row)) == 0);
  CHECK(o1.utt_pred[0].data()[0] == o2.utt_pred[0].data()[1]);
  CHECK(o1.utt_pred[0].data()[1] == o2.utt_pred[0].data()[0]);
}

TEST_CASE("masked positions cannot influence real ones") {
  const auto cfg = toy_config();
  const auto params = model::init_params(cfg, 13);
  const auto samples = small_samples(2, 4, 21);  // lengths < max_len guarantee padding
  auto batch = data::make_batches(samples, 2, cfg.max_len, std::nullopt).front();

  // perturb features and targets at every padded slot
  data::Batch tampered = batch;
  {
    std::vector<double> f(batch.features.data().begin(), batch.features.data().end());
    std::vector<double> pt(batch.phone_targets.data().begin(), batch.phone_targets.data().end());
    const auto mask = batch.mask.data();
    for (int b = 0; b < batch.size; ++b) {
      for (int t = 0; t < batch.max_len; ++t) {
        const std::size_t row = static_cast<std::size_t>(b) * batch.max_len + t;
        if (mask[row] != 0.0) continue;
        for (int j = 0; j < data::kGopDim; ++j) {
          f[row * data::kGopDim + static_cast<std::size_t>(j)] = 123.0 + j;
        }
        pt[row] = 17.0;
      }
    }
    tampered.features = Tensor(batch.features.shape(), std::move(f));
    tampered.phone_targets = Tensor(batch.phone_targets.shape(), std::move(pt));
  }

  const auto o1 = model::forward(params, batch);
  const auto o2 = model::forward(params, tampered);

  const auto mask = batch.mask.data();
  const int d = cfg.d_model;
  for (int b = 0; b < batch.size; ++b) {
    for (int t = 0; t < batch.max_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(b) * batch.max_len + t;
      if (mask[row] == 0.0) continue;
      for (int j = 0; j < d; ++j) {
        CHECK(o1.h_phone.data()[row * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] ==
              o2.h_phone.data()[row * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)]);
      }
      CHECK(o1.phone_pred.data()[row] == o2.phone_pred.data()[row]);
    }
  }
  for (int a = 0; a < 5; ++a) {
    for (int b = 0; b < batch.size; ++b) {
      CHECK(o1.utt_pred[a].data()[b] == o2.utt_pred[a].data()[b]);
    }
  }

  // loss values are untouched by padded content (mask targets use the original batch)
  loss::LossConfig lc;
  const auto lb1 = loss::pco_loss(o1, batch, lc);
  const auto lb2 = loss::pco_loss(o2, tampered, lc);
  CHECK(lb1.l_pco == lb2.l_pco);
  CHECK(lb1.l_mse == lb2.l_mse);
}

TEST_CASE("phone embedding extraction is exhaustive and deterministic") {
  const auto cfg = toy_config();
  const auto params = model::init_params(cfg, 31);
  const auto samples = small_samples(3, 5, 77);
  const auto batch = data::make_batches(samples, 3, cfg.max_len, std::nullopt).front();

  const auto recs = model::extract_phone_embeddings(params, batch);
  std::size_t expected = 0;
  for (double m : batch.mask.data()) expected += m != 0.0 ? 1u : 0u;
  CHECK(recs.size() == expected);

  const auto again = model::extract_phone_embeddings(params, batch);
  REQUIRE(again.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].embedding == again[i].embedding);
    CHECK(recs[i].phoneme_id == again[i].phoneme_id);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const auto cfg = toy_config();
  const auto params = model::init_params(cfg, 55);
  const std::string path =
      (std::filesystem::temp_directory_path() / "pco_test.ckpt").string();
  model::save_checkpoint(path, params);
  const auto loaded = model::load_checkpoint(path);
  CHECK(params_equal(params, loaded));
  CHECK(loaded.config.d_model == cfg.d_model);
  CHECK(loaded.config.max_len == cfg.max_len);

  CHECK_THROWS_AS(model::load_checkpoint("/nonexistent/pco.ckpt"), model::CheckpointError);

  // corrupting the magic is detected
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOTACKPT";
  }
  CHECK_THROWS_AS(model::load_checkpoint(path), model::CheckpointError);
}

TEST_CASE("every parameter gradient of the combined loss passes a finite-difference check") {
  const auto cfg = toy_config();
  const auto params = model::init_params(cfg, 77);
  std::mt19937_64 eng(78);
  const auto samples = helpers::random_samples(eng, 2, 4, 3);
  const auto batch = data::make_batches(samples, 2, cfg.max_len, std::nullopt).front();

  std::vector<Tensor> flat;
  params.visit([&flat](const std::string&, const Tensor& t) { flat.push_back(t); });

  loss::LossConfig lc;
  lc.lambda_d = 5.0;
  lc.lambda_o = 0.1;
  auto f = [&](const std::vector<Tensor>& p) {
    model::ModelParams probe = params;
    std::size_t i = 0;
    probe.visit_mut([&p, &i](const std::string&, Tensor& t) { t = p[i++]; });
    const auto out = model::forward(probe, batch);
    return loss::pco_loss(out, batch, lc).total;
  };
  CHECK(ad::finite_difference_check(f, flat, 1e-5) <= 1e-4);
}

}  // TEST_SUITE
