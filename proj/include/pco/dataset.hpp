#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pco/tensor.hpp"

namespace pco::data {

inline constexpr int kGopDim = 84;
inline constexpr int kUttAspects = 5;   // accuracy, completeness, fluency, prosody, total
inline constexpr int kWordAspects = 3;  // accuracy, stress, total
// Raw utterance/word scores on the 0-10 scale map to [0,2] by dividing by 5.
inline constexpr double kRawScoreDivisor = 5.0;

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Phone {
  int phoneme_id = 0;
  std::vector<double> gop;  // exactly kGopDim entries
  double accuracy = 0.0;    // in [0, 2]
  int word_index = 0;
};

struct WordScores {
  double accuracy = 0.0;
  double stress = 0.0;
  double total = 0.0;
};

struct UtteranceScores {
  double accuracy = 0.0;
  double completeness = 0.0;
  double fluency = 0.0;
  double prosody = 0.0;
  double total = 0.0;
};

struct UtteranceSample {
  std::string utt_id;
  std::vector<Phone> phones;
  std::vector<WordScores> words;
  UtteranceScores utterance;
};

// Throws DataError on dimension, range, or word-index violations.
void validate_sample(const UtteranceSample& sample);

// JSON Lines loader. With normalize=true, utterance and word scores are
// expected on the raw 0-10 scale and divided by kRawScoreDivisor; phone
// scores are on the 0-2 scale either way. Files carrying raw scores start
// with the header line {"score_scale": "0-10"}.
std::vector<UtteranceSample> load_dataset(const std::string& path, bool normalize);

// Reads the header line (if any) to decide whether to normalize.
std::vector<UtteranceSample> load_dataset_auto(const std::string& path);

// Writes normalized (0-2) samples, one JSON object per line, no header.
void write_dataset(const std::string& path, const std::vector<UtteranceSample>& samples);
std::string dataset_to_jsonl(const std::vector<UtteranceSample>& samples);

struct SyntheticSpec {
  int phoneme_count = 10;  // P, >= 2
  double center_scale = 4.0;
  double noise_scale = 0.25;  // > 0
  int utterances = 100;
  int min_phones = 4;
  int max_phones = 12;
  std::uint64_t seed = 1;
};

void validate_spec(const SyntheticSpec& spec);

// Geometry-controlled generator. Each phoneme category p gets a fixed unit
// prototype direction mu_p; a token with latent quality q ~ U[0,2] is placed
// at center_scale * mu_p * (q/2) plus isotropic Gaussian noise, its accuracy
// is q quantized to {0,1,2} by thirds, and word/utterance scores are means
// of their members. Deterministic given spec.seed.
std::vector<UtteranceSample> generate_synthetic(const SyntheticSpec& spec);

// The prototype directions the generator would use (for tests and analyses).
std::vector<std::vector<double>> synthetic_prototypes(const SyntheticSpec& spec);

struct Batch {
  int size = 0;     // B
  int max_len = 0;  // T
  ad::Tensor features;                            // (B, T, 84), zeros at padding
  ad::IntTensor phoneme_ids;                      // (B, T), 0 at padding
  ad::Tensor mask;                                // (B, T), 1 = real phone
  ad::Tensor phone_targets;                       // (B, T), -1 at padding
  std::array<ad::Tensor, kWordAspects> word_targets;  // (B, T), word score broadcast to
                                                      // member positions, -1 at padding
  ad::Tensor utterance_targets;                   // (B, 5)
  ad::IntTensor word_index;                       // (B, T), -1 at padding
  std::vector<int> sample_indices;                // row -> index into the source list
  std::vector<std::string> utt_ids;
  std::vector<int> lengths;
};

// Pads and stacks samples. Order is the input order, or a seeded permutation
// when shuffle_seed is set; the final partial batch is kept.
std::vector<Batch> make_batches(const std::vector<UtteranceSample>& samples, int batch_size,
                                int max_len, std::optional<std::uint64_t> shuffle_seed);

}  // namespace pco::data
