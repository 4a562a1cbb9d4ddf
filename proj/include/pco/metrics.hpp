#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "pco/dataset.hpp"
#include "pco/model.hpp"

namespace pco::metrics {

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Sample Pearson correlation coefficient, clamped to [-1, 1]. Errors on
// fewer than two points or a constant sequence (undefined correlation).
double pearson(std::span<const double> xs, std::span<const double> ys);

struct EvalReport {
  double phone_mse = 0.0;
  double phone_pcc = 0.0;
  std::array<double, data::kWordAspects> word_pcc{};  // accuracy, stress, total
  std::array<double, data::kUttAspects> utt_pcc{};    // accuracy, completeness,
                                                      // fluency, prosody, total
};

// Raw per-utterance model outputs, aligned with the source sample.
struct SampleOutput {
  std::vector<double> phone_pred;                                  // length L
  std::array<std::vector<double>, data::kWordAspects> word_pred;   // per aspect, length L
  std::array<double, data::kUttAspects> utt_pred{};
};

// Runs the model over the whole set (no shuffling; pooling is batch-order
// independent because attention never crosses samples).
std::vector<SampleOutput> run_model(const model::ModelParams& params,
                                    const std::vector<data::UtteranceSample>& samples,
                                    int batch_size = 32);

// Pools phone tokens globally, words globally (word prediction = mean of its
// member-phone head outputs), and utterances per aspect.
EvalReport evaluate_outputs(const std::vector<SampleOutput>& outputs,
                            const std::vector<data::UtteranceSample>& samples);
EvalReport evaluate(const model::ModelParams& params,
                    const std::vector<data::UtteranceSample>& samples);

struct GeometryReport {
  // mean pairwise L2 distance between per-category centers of the normalized
  // phone embeddings over the full set
  double mean_inter_center_distance = 0.0;
  // mean over tokens of ||h_i - h_{c_i}|| * y_i
  double score_weighted_scatter = 0.0;
  // mean token-to-center distance per score bucket (scores rounded to 0/1/2)
  std::array<double, 3> bucket_scatter{};
  std::array<int, 3> bucket_counts{};
  int category_count = 0;
  int token_count = 0;
};

// Quantified embedding geometry; centers follow the same unit-normalization
// and epsilon conventions as the loss module.
GeometryReport geometry(const model::ModelParams& params,
                        const std::vector<data::UtteranceSample>& samples);
// Same computation over already-extracted phone records.
GeometryReport geometry_from_records(const std::vector<model::PhoneEmbedding>& records,
                                     int d_model);

// Flat key -> value views for reports.
std::vector<std::pair<std::string, double>> report_rows(const EvalReport& report);
std::vector<std::pair<std::string, double>> report_rows(const GeometryReport& report);
std::string format_table(const std::vector<std::pair<std::string, double>>& rows);

}  // namespace pco::metrics
