#include "pco/trainer.hpp"

#include <chrono>
#include <cmath>
#include <thread>

#include "pco/rng.hpp"
#include "pco/util.hpp"

namespace pco::train {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("train config: learning_rate must be > 0");
  }
  if (seeds.empty()) throw std::invalid_argument("train config: seed list is empty");
  if (parallel_seeds < 1) throw std::invalid_argument("train config: parallel_seeds must be >= 1");
  loss.validate();
}

std::string log_row_csv(const TrainLogRow& row) {
  std::string out = std::to_string(row.seed);
  out += ',';
  out += std::to_string(row.epoch);
  out += ',';
  out += std::to_string(row.step);
  out += ',';
  out += util::fmt_double(row.l_mse);
  out += ',';
  out += util::fmt_double(row.l_pd);
  out += ',';
  out += util::fmt_double(row.l_ot);
  out += ',';
  out += util::fmt_double(row.l_pco);
  out += ',';
  out += util::fmt_double(row.wall_ms);
  return out;
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::begin_step() { ++t_; }

std::vector<double> Adam::update(std::size_t slot, std::span<const double> values,
                                 std::span<const double> grad) {
  if (values.size() != grad.size()) throw TrainAbort("adam: value/gradient size mismatch");
  if (slot >= m_.size()) {
    m_.resize(slot + 1);
    v_.resize(slot + 1);
  }
  auto& m = m_[slot];
  auto& v = v_[slot];
  if (m.empty()) {
    m.assign(values.size(), 0.0);
    v.assign(values.size(), 0.0);
  }
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);

  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
    v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    out[i] = values[i] - lr_ * mhat / (std::sqrt(vhat) + eps_);
  }
  return out;
}

namespace {

SeedResult run_seed(std::uint64_t seed, const std::vector<data::UtteranceSample>& train_set,
                    const std::vector<data::UtteranceSample>& eval_set,
                    const model::ModelConfig& model_config, const TrainConfig& config) {
  SeedResult result;
  result.seed = seed;
  result.params = model::init_params(model_config, rng::derive_seed(seed, "init"));
  Adam adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps);

  int step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.lr_decay_every_epochs > 0 && epoch > 1 &&
        (epoch - 1) % config.lr_decay_every_epochs == 0) {
      adam.set_learning_rate(adam.learning_rate() * config.lr_decay_factor);
    }
    const auto batches = data::make_batches(train_set, config.batch_size, model_config.max_len,
                                            rng::derive_seed(seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    for (const data::Batch& batch : batches) {
      ++step;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        ad::Tape tape;
        const model::ModelParams bound = result.params.bind(tape);
        model::ForwardOutput out;
        try {
          out = model::forward(bound, batch);
        } catch (const ad::NonFiniteError& e) {
          throw ad::NonFiniteError(std::string("while computing forward pass: ") + e.what());
        }
        const loss::LossBreakdown lb = loss::pco_loss(out, batch, config.loss);
        const ad::GradMap grads = tape.backward(lb.total);

        adam.begin_step();
        std::size_t slot = 0;
        std::vector<std::pair<const ad::Tensor*, ad::Shape>> bound_tensors;
        bound.visit([&bound_tensors](const std::string&, const ad::Tensor& t) {
          bound_tensors.emplace_back(&t, t.shape());
        });
        result.params.visit_mut([&](const std::string&, ad::Tensor& t) {
          const ad::Tensor g = grads.at(*bound_tensors[slot].first);
          t = ad::Tensor(t.shape(), adam.update(slot, t.data(), g.data()));
          ++slot;
        });

        const auto t1 = std::chrono::steady_clock::now();
        TrainLogRow row;
        row.seed = seed;
        row.epoch = epoch;
        row.step = step;
        row.l_mse = lb.l_mse;
        row.l_pd = lb.l_pd;
        row.l_ot = lb.l_ot;
        row.l_pco = lb.l_pco;
        row.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        result.log.push_back(row);
      } catch (const ad::AdError& e) {
        throw TrainAbort("seed " + std::to_string(seed) + " epoch " + std::to_string(epoch) +
                         " step " + std::to_string(step) + ": " + e.what());
      }
    }
  }

  result.eval = metrics::evaluate(result.params, eval_set);
  result.geometry = metrics::geometry(result.params, eval_set);
  return result;
}

}  // namespace

std::vector<SeedResult> train(const std::vector<data::UtteranceSample>& train_set,
                              const std::vector<data::UtteranceSample>& eval_set,
                              const model::ModelConfig& model_config, const TrainConfig& config) {
  config.validate();
  model_config.validate();
  if (train_set.empty()) throw TrainAbort("train: training set is empty");
  if (eval_set.empty()) throw TrainAbort("train: eval set is empty");

  std::vector<SeedResult> results(config.seeds.size());
  if (config.parallel_seeds <= 1 || config.seeds.size() <= 1) {
    for (std::size_t i = 0; i < config.seeds.size(); ++i) {
      results[i] = run_seed(config.seeds[i], train_set, eval_set, model_config, config);
    }
    return results;
  }

  // Seeds are independent; fan them out in fixed-size waves.
  std::vector<std::exception_ptr> errors(config.seeds.size());
  std::size_t next = 0;
  while (next < config.seeds.size()) {
    std::vector<std::thread> pool;
    const std::size_t wave =
        std::min<std::size_t>(static_cast<std::size_t>(config.parallel_seeds),
                              config.seeds.size() - next);
    for (std::size_t k = 0; k < wave; ++k) {
      const std::size_t idx = next + k;
      pool.emplace_back([&, idx]() {
        try {
          results[idx] = run_seed(config.seeds[idx], train_set, eval_set, model_config, config);
        } catch (...) {
          errors[idx] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    next += wave;
  }
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  return results;
}

std::vector<SweepRow> sweep(SweepParameter parameter, const std::vector<double>& values,
                            const std::vector<data::UtteranceSample>& train_set,
                            const std::vector<data::UtteranceSample>& eval_set,
                            const model::ModelConfig& model_config, const TrainConfig& base) {
  if (values.empty()) throw TrainAbort("sweep: value list is empty");

  std::vector<SweepRow> rows;
  for (double value : values) {
    TrainConfig config = base;
    if (parameter == SweepParameter::kLambdaD) {
      config.loss.lambda_d = value;
      config.loss.lambda_o = 0.0;  // ordinal tightness removed for this sweep
    } else {
      config.loss.lambda_o = value;
      config.loss.lambda_d = 5.0;  // held fixed for this sweep
    }
    const auto results = train(train_set, eval_set, model_config, config);
    for (const SeedResult& r : results) {
      SweepRow row;
      row.value = value;
      row.seed = r.seed;
      row.effective_loss = config.loss;
      row.eval = r.eval;
      row.geometry = r.geometry;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace pco::train
