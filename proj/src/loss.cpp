#include "pco/loss.hpp"

#include <cmath>
#include <set>

namespace pco::loss {

namespace {

using ad::Tensor;

// Mean of squared masked differences: sum((pred - target) * mask)^2 / count.
// With an empty mask argument every element is valid.
Tensor masked_mse_pair(const Tensor& pred, const Tensor& target, const Tensor* mask) {
  Tensor diff = ad::sub(pred, target);
  double count = 0.0;
  if (mask) {
    diff = ad::mul(diff, *mask);
    for (double m : mask->data()) count += m;
  } else {
    count = static_cast<double>(pred.size());
  }
  if (!(count > 0.0)) throw LossError("mse pair has no valid elements");
  return ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / count);
}

// Column `a` of a (B, A) constant tensor as a (B) constant.
Tensor column(const Tensor& t, int a) {
  const int b_count = t.shape()[0];
  const int width = t.shape()[1];
  std::vector<double> v(static_cast<std::size_t>(b_count));
  const auto tv = t.data();
  for (int b = 0; b < b_count; ++b) {
    v[static_cast<std::size_t>(b)] = tv[static_cast<std::size_t>(b) * width + a];
  }
  return Tensor({b_count}, std::move(v));
}

int count_unmasked(const Tensor& mask) {
  int n = 0;
  for (double m : mask.data()) {
    if (m != 0.0) ++n;
  }
  return n;
}

}  // namespace

void LossConfig::validate() const {
  if (lambda_d < 0.0 || lambda_o < 0.0) throw LossError("loss config: lambdas must be >= 0");
  if (!(margin > 0.0)) throw LossError("loss config: margin must be > 0");
}

Tensor mse_loss(const model::ForwardOutput& out, const data::Batch& batch) {
  const int n_utt = static_cast<int>(out.utt_pred.size());
  const int n_word = static_cast<int>(out.word_pred.size());

  Tensor acc;
  auto accumulate = [&acc](Tensor pair) {
    acc = acc.empty() ? std::move(pair) : ad::add(acc, pair);
  };
  for (int a = 0; a < n_utt; ++a) {
    accumulate(masked_mse_pair(out.utt_pred[a], column(batch.utterance_targets, a), nullptr));
  }
  for (int a = 0; a < n_word; ++a) {
    accumulate(masked_mse_pair(out.word_pred[a], batch.word_targets[a], &batch.mask));
  }
  accumulate(masked_mse_pair(out.phone_pred, batch.phone_targets, &batch.mask));
  return ad::scale(acc, 1.0 / static_cast<double>(n_utt + n_word + 1));
}

CenterMap compute_centers(const Tensor& embeddings, const ad::IntTensor& phoneme_ids,
                          const Tensor& mask, bool normalize) {
  const std::size_t rows = phoneme_ids.data.size();
  if (embeddings.rank() < 2 ||
      embeddings.size() / embeddings.shape().back() != static_cast<std::int64_t>(rows) ||
      mask.size() != static_cast<std::int64_t>(rows)) {
    throw LossError("compute_centers: embeddings/ids/mask shapes do not conform");
  }
  const auto mv = mask.data();

  std::map<int, int> counts;
  for (std::size_t r = 0; r < rows; ++r) {
    if (mv[r] != 0.0) ++counts[phoneme_ids.data[r]];
  }
  if (counts.empty()) throw LossError("compute_centers: batch has no unmasked tokens");

  const Tensor view = normalize ? ad::normalize_rows(embeddings) : embeddings;
  CenterMap centers;
  for (const auto& [cat, count] : counts) {
    std::vector<double> w(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      if (mv[r] != 0.0 && phoneme_ids.data[r] == cat) w[r] = 1.0;
    }
    Tensor weights(mask.shape(), std::move(w));
    centers.emplace(cat, CenterEntry{ad::masked_mean(view, weights), count});
  }
  return centers;
}

Tensor phonemic_distinction(const CenterMap& centers, double margin) {
  const int m_count = static_cast<int>(centers.size());
  if (m_count < 2) return Tensor::scalar(0.0);  // no inter-category signal

  Tensor acc;
  for (auto i = centers.begin(); i != centers.end(); ++i) {
    for (auto j = std::next(i); j != centers.end(); ++j) {
      Tensor dist = ad::l2_norm_last(ad::sub(i->second.center, j->second.center));
      acc = acc.empty() ? std::move(dist) : ad::add(acc, dist);
    }
  }
  // each unordered pair appears twice in the ordered double sum
  const double factor = -2.0 * margin / (static_cast<double>(m_count) * (m_count - 1));
  return ad::scale(acc, factor);
}

Tensor ordinal_tightness(const Tensor& embeddings, const ad::IntTensor& phoneme_ids,
                         const Tensor& phone_scores, const Tensor& mask,
                         const CenterMap& centers) {
  const std::size_t rows = phoneme_ids.data.size();
  if (embeddings.rank() < 2 ||
      embeddings.size() / embeddings.shape().back() != static_cast<std::int64_t>(rows) ||
      mask.size() != static_cast<std::int64_t>(rows) ||
      phone_scores.size() != static_cast<std::int64_t>(rows)) {
    throw LossError("ordinal_tightness: embeddings/ids/scores/mask shapes do not conform");
  }
  const int d = embeddings.shape().back();
  const auto mv = mask.data();
  const auto sv = phone_scores.data();

  const int n_tokens = count_unmasked(mask);
  if (n_tokens == 0) throw LossError("ordinal_tightness: batch has no unmasked tokens");

  // Stack the centers into an (M, d) matrix and gather one row per token, so
  // a single norm covers every token-to-center distance.
  std::map<int, int> compact;
  Tensor stacked;
  for (const auto& [cat, entry] : centers) {
    compact.emplace(cat, static_cast<int>(compact.size()));
    Tensor row = ad::reshape(entry.center, {1, d});
    stacked = stacked.empty() ? std::move(row) : ad::concat(stacked, row, 0);
  }

  std::vector<int> token_center(rows, 0);
  std::vector<double> weights(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (mv[r] == 0.0) continue;
    auto it = compact.find(phoneme_ids.data[r]);
    if (it == compact.end()) {
      throw LossError("ordinal_tightness: no center for phoneme category " +
                      std::to_string(phoneme_ids.data[r]));
    }
    token_center[r] = it->second;
    weights[r] = sv[r];
  }

  Tensor gathered = ad::embedding_lookup(stacked, ad::IntTensor(mask.shape(), token_center));
  gathered = ad::reshape(gathered, embeddings.shape());
  Tensor dist = ad::l2_norm_last(ad::sub(embeddings, gathered));
  Tensor weighted = ad::mul(dist, Tensor(mask.shape(), std::move(weights)));
  return ad::scale(ad::sum(weighted), 1.0 / static_cast<double>(n_tokens));
}

LossBreakdown pco_loss(const model::ForwardOutput& out, const data::Batch& batch,
                       const LossConfig& config) {
  config.validate();

  auto tagged = [](const char* term, auto&& fn) -> Tensor {
    try {
      return fn();
    } catch (const ad::NonFiniteError& e) {
      throw ad::NonFiniteError(std::string("while computing ") + term + ": " + e.what());
    }
  };

  LossBreakdown lb;
  lb.token_count = count_unmasked(batch.mask);

  lb.mse = tagged("l_mse", [&] { return mse_loss(out, batch); });

  CenterMap centers;
  Tensor normalized;
  lb.pd = tagged("l_pd", [&] {
    normalized = config.normalize_features ? ad::normalize_rows(out.h_phone) : out.h_phone;
    centers = compute_centers(normalized, batch.phoneme_ids, batch.mask, false);
    return phonemic_distinction(centers, config.margin);
  });
  lb.category_count = static_cast<int>(centers.size());

  lb.ot = tagged("l_ot", [&] {
    return ordinal_tightness(normalized, batch.phoneme_ids, batch.phone_targets, batch.mask,
                             centers);
  });

  lb.total = tagged("l_pco", [&] {
    return ad::add(ad::add(lb.mse, ad::scale(lb.pd, config.lambda_d)),
                   ad::scale(lb.ot, config.lambda_o));
  });

  lb.l_mse = lb.mse.item();
  lb.l_pd = lb.pd.item();
  lb.l_ot = lb.ot.item();
  lb.l_pco = lb.total.item();
  return lb;
}

}  // namespace pco::loss
