#include "pco/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "pco/tape.hpp"
#include "pco/util.hpp"

namespace pco::metrics {

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw MetricError("pearson: sequence lengths differ");
  const std::size_t n = xs.size();
  if (n < 2) throw MetricError("pearson: needs at least two points");
  bool x_const = true, y_const = true;
  for (std::size_t i = 1; i < n; ++i) {
    x_const = x_const && xs[i] == xs[0];
    y_const = y_const && ys[i] == ys[0];
  }
  if (x_const || y_const) {
    throw MetricError("pearson: undefined for a constant sequence");
  }

  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);

  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw MetricError("pearson: undefined for a constant sequence");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<SampleOutput> run_model(const model::ModelParams& params,
                                    const std::vector<data::UtteranceSample>& samples,
                                    int batch_size) {
  if (samples.empty()) throw MetricError("run_model: empty dataset");
  std::vector<SampleOutput> outputs(samples.size());
  const auto batches =
      data::make_batches(samples, batch_size, params.config.max_len, std::nullopt);
  for (const data::Batch& batch : batches) {
    const model::ForwardOutput out = model::forward(params, batch);
    const auto phone = out.phone_pred.data();
    for (int b = 0; b < batch.size; ++b) {
      SampleOutput& so = outputs[static_cast<std::size_t>(batch.sample_indices[static_cast<std::size_t>(b)])];
      const int len = batch.lengths[static_cast<std::size_t>(b)];
      const std::size_t base = static_cast<std::size_t>(b) * batch.max_len;
      so.phone_pred.assign(phone.begin() + static_cast<std::ptrdiff_t>(base),
                           phone.begin() + static_cast<std::ptrdiff_t>(base) + len);
      for (std::size_t a = 0; a < data::kWordAspects; ++a) {
        const auto wp = out.word_pred[a].data();
        so.word_pred[a].assign(wp.begin() + static_cast<std::ptrdiff_t>(base),
                               wp.begin() + static_cast<std::ptrdiff_t>(base) + len);
      }
      for (std::size_t a = 0; a < data::kUttAspects; ++a) {
        so.utt_pred[a] = out.utt_pred[a].data()[static_cast<std::size_t>(b)];
      }
    }
  }
  return outputs;
}

EvalReport evaluate_outputs(const std::vector<SampleOutput>& outputs,
                            const std::vector<data::UtteranceSample>& samples) {
  if (outputs.size() != samples.size()) {
    throw MetricError("evaluate: outputs/samples size mismatch");
  }
  if (samples.empty()) throw MetricError("evaluate: empty dataset");

  std::vector<double> phone_pred, phone_true;
  std::array<std::vector<double>, data::kWordAspects> word_pred, word_true;
  std::array<std::vector<double>, data::kUttAspects> utt_pred, utt_true;

  for (std::size_t s = 0; s < samples.size(); ++s) {
    const data::UtteranceSample& sample = samples[s];
    const SampleOutput& so = outputs[s];
    const std::size_t len = sample.phones.size();
    if (so.phone_pred.size() != len) {
      throw MetricError("evaluate: prediction length mismatch for \"" + sample.utt_id + "\"");
    }
    for (std::size_t t = 0; t < len; ++t) {
      phone_pred.push_back(so.phone_pred[t]);
      phone_true.push_back(sample.phones[t].accuracy);
    }
    // word prediction = mean of member-phone positions
    for (std::size_t a = 0; a < data::kWordAspects; ++a) {
      std::vector<double> acc(sample.words.size(), 0.0);
      std::vector<int> cnt(sample.words.size(), 0);
      for (std::size_t t = 0; t < len; ++t) {
        const auto w = static_cast<std::size_t>(sample.phones[t].word_index);
        acc[w] += so.word_pred[a][t];
        ++cnt[w];
      }
      for (std::size_t w = 0; w < sample.words.size(); ++w) {
        word_pred[a].push_back(acc[w] / cnt[w]);
        const data::WordScores& ws = sample.words[w];
        word_true[a].push_back(a == 0 ? ws.accuracy : (a == 1 ? ws.stress : ws.total));
      }
    }
    const data::UtteranceScores& u = sample.utterance;
    const double truths[data::kUttAspects] = {u.accuracy, u.completeness, u.fluency, u.prosody,
                                              u.total};
    for (std::size_t a = 0; a < data::kUttAspects; ++a) {
      utt_pred[a].push_back(so.utt_pred[a]);
      utt_true[a].push_back(truths[a]);
    }
  }

  EvalReport report;
  double mse = 0.0;
  for (std::size_t i = 0; i < phone_pred.size(); ++i) {
    const double d = phone_pred[i] - phone_true[i];
    mse += d * d;
  }
  report.phone_mse = mse / static_cast<double>(phone_pred.size());
  report.phone_pcc = pearson(phone_pred, phone_true);
  for (std::size_t a = 0; a < data::kWordAspects; ++a) {
    report.word_pcc[a] = pearson(word_pred[a], word_true[a]);
  }
  for (std::size_t a = 0; a < data::kUttAspects; ++a) {
    report.utt_pcc[a] = pearson(utt_pred[a], utt_true[a]);
  }
  return report;
}

EvalReport evaluate(const model::ModelParams& params,
                    const std::vector<data::UtteranceSample>& samples) {
  return evaluate_outputs(run_model(params, samples), samples);
}

GeometryReport geometry(const model::ModelParams& params,
                        const std::vector<data::UtteranceSample>& samples) {
  if (samples.empty()) throw MetricError("geometry: empty dataset");
  std::vector<model::PhoneEmbedding> records;
  const auto batches = data::make_batches(samples, 32, params.config.max_len, std::nullopt);
  for (const data::Batch& batch : batches) {
    for (auto& rec : model::extract_phone_embeddings(params, batch)) {
      records.push_back(std::move(rec));
    }
  }
  return geometry_from_records(records, params.config.d_model);
}

GeometryReport geometry_from_records(const std::vector<model::PhoneEmbedding>& records,
                                     int d_model) {
  if (records.empty()) throw MetricError("geometry: no phone records");
  const int d = d_model;

  struct TokenRecord {
    int category;
    double score;
    std::vector<double> unit;  // normalized embedding
  };
  std::vector<TokenRecord> tokens;
  for (const model::PhoneEmbedding& rec : records) {
    TokenRecord tr;
    tr.category = rec.phoneme_id;
    tr.score = rec.score;
    tr.unit.resize(static_cast<std::size_t>(d));
    double norm_sq = ad::kNormEps;
    for (double v : rec.embedding) norm_sq += v * v;
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (int j = 0; j < d; ++j) {
      tr.unit[static_cast<std::size_t>(j)] = rec.embedding[static_cast<std::size_t>(j)] * inv;
    }
    tokens.push_back(std::move(tr));
  }

  std::map<int, std::pair<std::vector<double>, int>> sums;  // category -> (sum, count)
  for (const TokenRecord& tr : tokens) {
    auto& [sum, count] = sums[tr.category];
    if (sum.empty()) sum.assign(static_cast<std::size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) sum[static_cast<std::size_t>(j)] += tr.unit[static_cast<std::size_t>(j)];
    ++count;
  }
  std::map<int, std::vector<double>> centers;
  for (auto& [cat, sc] : sums) {
    std::vector<double> c = sc.first;
    for (double& v : c) v /= sc.second;
    centers.emplace(cat, std::move(c));
  }

  auto distance = [d](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = ad::kNormEps;
    for (int j = 0; j < d; ++j) {
      const double c = a[static_cast<std::size_t>(j)] - b[static_cast<std::size_t>(j)];
      acc += c * c;
    }
    return std::sqrt(acc);
  };

  GeometryReport report;
  report.category_count = static_cast<int>(centers.size());
  report.token_count = static_cast<int>(tokens.size());

  double pair_sum = 0.0;
  int pair_count = 0;
  for (auto i = centers.begin(); i != centers.end(); ++i) {
    for (auto j = std::next(i); j != centers.end(); ++j) {
      pair_sum += distance(i->second, j->second);
      ++pair_count;
    }
  }
  report.mean_inter_center_distance = pair_count > 0 ? pair_sum / pair_count : 0.0;

  double weighted = 0.0;
  std::array<double, 3> bucket_sum{};
  for (const TokenRecord& tr : tokens) {
    const double dist = distance(tr.unit, centers.at(tr.category));
    weighted += dist * tr.score;
    const int bucket = std::clamp(static_cast<int>(std::lround(tr.score)), 0, 2);
    bucket_sum[static_cast<std::size_t>(bucket)] += dist;
    ++report.bucket_counts[static_cast<std::size_t>(bucket)];
  }
  report.score_weighted_scatter = weighted / static_cast<double>(tokens.size());
  for (std::size_t b = 0; b < 3; ++b) {
    report.bucket_scatter[b] =
        report.bucket_counts[b] > 0 ? bucket_sum[b] / report.bucket_counts[b] : 0.0;
  }
  return report;
}

std::vector<std::pair<std::string, double>> report_rows(const EvalReport& r) {
  return {{"phone_mse", r.phone_mse},
          {"phone_pcc", r.phone_pcc},
          {"word_accuracy_pcc", r.word_pcc[0]},
          {"word_stress_pcc", r.word_pcc[1]},
          {"word_total_pcc", r.word_pcc[2]},
          {"utt_accuracy_pcc", r.utt_pcc[0]},
          {"utt_completeness_pcc", r.utt_pcc[1]},
          {"utt_fluency_pcc", r.utt_pcc[2]},
          {"utt_prosody_pcc", r.utt_pcc[3]},
          {"utt_total_pcc", r.utt_pcc[4]}};
}

std::vector<std::pair<std::string, double>> report_rows(const GeometryReport& r) {
  return {{"mean_inter_center_distance", r.mean_inter_center_distance},
          {"score_weighted_scatter", r.score_weighted_scatter},
          {"scatter_score0", r.bucket_scatter[0]},
          {"scatter_score1", r.bucket_scatter[1]},
          {"scatter_score2", r.bucket_scatter[2]},
          {"category_count", static_cast<double>(r.category_count)},
          {"token_count", static_cast<double>(r.token_count)}};
}

std::string format_table(const std::vector<std::pair<std::string, double>>& rows) {
  std::size_t width = 0;
  for (const auto& [k, v] : rows) width = std::max(width, k.size());
  std::string out;
  for (const auto& [k, v] : rows) {
    out += k;
    out.append(width - k.size() + 2, ' ');
    out += util::fmt_double(v);
    out += '\n';
  }
  return out;
}

}  // namespace pco::metrics
