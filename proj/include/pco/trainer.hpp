#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pco/loss.hpp"
#include "pco/metrics.hpp"
#include "pco/model.hpp"

namespace pco::train {

// Raised when a training step produces a non-finite value; the message names
// the seed, epoch, step, and offending term.
struct TrainAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 25;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  loss::LossConfig loss;
  // Step decay: every `lr_decay_every_epochs` epochs multiply the rate by
  // `lr_decay_factor`. 0 means a constant rate.
  int lr_decay_every_epochs = 0;
  double lr_decay_factor = 1.0;
  int parallel_seeds = 1;

  void validate() const;
};

struct TrainLogRow {
  std::uint64_t seed = 0;
  int epoch = 0;
  int step = 0;  // global step index within the trial, 1-based
  double l_mse = 0.0;
  double l_pd = 0.0;
  double l_ot = 0.0;
  double l_pco = 0.0;
  double wall_ms = 0.0;
};

inline constexpr const char* kLogCsvHeader = "seed,epoch,step,l_mse,l_pd,l_ot,l_pco,wall_ms";
std::string log_row_csv(const TrainLogRow& row);

struct SeedResult {
  std::uint64_t seed = 0;
  model::ModelParams params;
  metrics::EvalReport eval;
  metrics::GeometryReport geometry;
  std::vector<TrainLogRow> log;
};

// The full protocol: per seed, seeded init + per-epoch seeded shuffling +
// Adam steps on the combined loss, then evaluation and geometry on the eval
// set. Deterministic given (seed, config, data). Seeds may run in parallel.
std::vector<SeedResult> train(const std::vector<data::UtteranceSample>& train_set,
                              const std::vector<data::UtteranceSample>& eval_set,
                              const model::ModelConfig& model_config,
                              const TrainConfig& config);

enum class SweepParameter { kLambdaD, kLambdaO };

struct SweepRow {
  double value = 0.0;
  std::uint64_t seed = 0;
  loss::LossConfig effective_loss;
  metrics::EvalReport eval;
  metrics::GeometryReport geometry;
};

// Trains once per value with everything else fixed. The lambda_d sweep holds
// lambda_o at 0; the lambda_o sweep holds lambda_d at 5.
std::vector<SweepRow> sweep(SweepParameter parameter, const std::vector<double>& values,
                            const std::vector<data::UtteranceSample>& train_set,
                            const std::vector<data::UtteranceSample>& eval_set,
                            const model::ModelConfig& model_config, const TrainConfig& base);

// Adam with bias correction. Slot = stable tensor index; state is allocated
// on first use.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps);

  void begin_step();  // advances the shared timestep
  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

  // One update for the tensor in `slot`; returns the new values.
  std::vector<double> update(std::size_t slot, std::span<const double> values,
                             std::span<const double> grad);

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace pco::train
