#include "pco/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pco/rng.hpp"

namespace pco::data {

namespace {

using nlohmann::json;

void check_range(double v, double lo, double hi, const std::string& what) {
  if (!(v >= lo && v <= hi)) {
    throw DataError(what + " score " + std::to_string(v) + " outside [" + std::to_string(lo) +
                    "," + std::to_string(hi) + "]");
  }
}

UtteranceSample sample_from_json(const json& j, bool normalize) {
  UtteranceSample s;
  s.utt_id = j.at("utt_id").get<std::string>();
  const double div = normalize ? kRawScoreDivisor : 1.0;
  const double hi = normalize ? 10.0 : 2.0;

  for (const auto& jp : j.at("phones")) {
    Phone p;
    p.phoneme_id = jp.at("phoneme_id").get<int>();
    p.gop = jp.at("gop").get<std::vector<double>>();
    p.accuracy = jp.at("score").get<double>();
    check_range(p.accuracy, 0.0, 2.0, "phone");
    p.word_index = jp.at("word_index").get<int>();
    s.phones.push_back(std::move(p));
  }
  for (const auto& jw : j.at("words")) {
    WordScores w;
    w.accuracy = jw.at("accuracy").get<double>();
    w.stress = jw.at("stress").get<double>();
    w.total = jw.at("total").get<double>();
    for (double v : {w.accuracy, w.stress, w.total}) check_range(v, 0.0, hi, "word");
    w.accuracy /= div;
    w.stress /= div;
    w.total /= div;
    s.words.push_back(w);
  }
  const auto& ju = j.at("utterance");
  UtteranceScores& u = s.utterance;
  u.accuracy = ju.at("accuracy").get<double>();
  u.completeness = ju.at("completeness").get<double>();
  u.fluency = ju.at("fluency").get<double>();
  u.prosody = ju.at("prosody").get<double>();
  u.total = ju.at("total").get<double>();
  for (double v : {u.accuracy, u.completeness, u.fluency, u.prosody, u.total}) {
    check_range(v, 0.0, hi, "utterance");
  }
  u.accuracy /= div;
  u.completeness /= div;
  u.fluency /= div;
  u.prosody /= div;
  u.total /= div;
  return s;
}

json sample_to_json(const UtteranceSample& s) {
  json phones = json::array();
  for (const Phone& p : s.phones) {
    phones.push_back({{"phoneme_id", p.phoneme_id},
                      {"gop", p.gop},
                      {"score", p.accuracy},
                      {"word_index", p.word_index}});
  }
  json words = json::array();
  for (const WordScores& w : s.words) {
    words.push_back({{"accuracy", w.accuracy}, {"stress", w.stress}, {"total", w.total}});
  }
  return json{{"utt_id", s.utt_id},
              {"phones", phones},
              {"words", words},
              {"utterance",
               {{"accuracy", s.utterance.accuracy},
                {"completeness", s.utterance.completeness},
                {"fluency", s.utterance.fluency},
                {"prosody", s.utterance.prosody},
                {"total", s.utterance.total}}}};
}

std::vector<UtteranceSample> load_lines(const std::string& path, std::optional<bool> normalize) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file: " + path);

  std::vector<UtteranceSample> samples;
  std::string line;
  int line_no = 0;
  bool raw_header = false;
  bool first_content_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      if (!first_content_seen && j.is_object() && j.contains("score_scale")) {
        const auto scale = j.at("score_scale").get<std::string>();
        if (scale != "0-10") {
          throw DataError("unsupported score_scale \"" + scale + "\"");
        }
        raw_header = true;
        first_content_seen = true;
        continue;
      }
      first_content_seen = true;
      const bool do_normalize = normalize.value_or(raw_header);
      UtteranceSample s = sample_from_json(j, do_normalize);
      validate_sample(s);
      samples.push_back(std::move(s));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": malformed line: " + e.what());
    }
  }
  return samples;
}

}  // namespace

void validate_sample(const UtteranceSample& s) {
  if (s.phones.empty()) throw DataError("utterance \"" + s.utt_id + "\" has no phones");
  int prev = -1;
  for (std::size_t i = 0; i < s.phones.size(); ++i) {
    const Phone& p = s.phones[i];
    if (static_cast<int>(p.gop.size()) != kGopDim) {
      throw DataError("utterance \"" + s.utt_id + "\" phone " + std::to_string(i) + " gop has " +
                      std::to_string(p.gop.size()) + " dims, expected " + std::to_string(kGopDim));
    }
    if (p.phoneme_id < 0) {
      throw DataError("utterance \"" + s.utt_id + "\" phone " + std::to_string(i) +
                      " has negative phoneme_id");
    }
    check_range(p.accuracy, 0.0, 2.0, "phone");
    // word_index must be contiguous non-decreasing starting at 0
    if (p.word_index != prev && p.word_index != prev + 1) {
      throw DataError("utterance \"" + s.utt_id + "\" has non-contiguous word_index at phone " +
                      std::to_string(i));
    }
    prev = p.word_index;
  }
  if (prev + 1 != static_cast<int>(s.words.size())) {
    throw DataError("utterance \"" + s.utt_id + "\" references " + std::to_string(prev + 1) +
                    " words but carries " + std::to_string(s.words.size()) + " word score sets");
  }
  for (const WordScores& w : s.words) {
    for (double v : {w.accuracy, w.stress, w.total}) check_range(v, 0.0, 2.0, "word");
  }
  const UtteranceScores& u = s.utterance;
  for (double v : {u.accuracy, u.completeness, u.fluency, u.prosody, u.total}) {
    check_range(v, 0.0, 2.0, "utterance");
  }
}

std::vector<UtteranceSample> load_dataset(const std::string& path, bool normalize) {
  return load_lines(path, normalize);
}

std::vector<UtteranceSample> load_dataset_auto(const std::string& path) {
  return load_lines(path, std::nullopt);
}

std::string dataset_to_jsonl(const std::vector<UtteranceSample>& samples) {
  std::string out;
  for (const UtteranceSample& s : samples) {
    out += sample_to_json(s).dump();
    out += '\n';
  }
  return out;
}

void write_dataset(const std::string& path, const std::vector<UtteranceSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset file: " + path);
  out << dataset_to_jsonl(samples);
  if (!out) throw DataError("write failed: " + path);
}

void validate_spec(const SyntheticSpec& spec) {
  if (spec.phoneme_count < 2) throw DataError("synthetic spec: phoneme_count must be >= 2");
  if (!(spec.noise_scale > 0.0)) throw DataError("synthetic spec: noise_scale must be > 0");
  if (spec.utterances < 1) throw DataError("synthetic spec: utterances must be >= 1");
  if (spec.min_phones < 1 || spec.max_phones < spec.min_phones) {
    throw DataError("synthetic spec: need 1 <= min_phones <= max_phones");
  }
  if (!(spec.center_scale > 0.0)) throw DataError("synthetic spec: center_scale must be > 0");
}

std::vector<std::vector<double>> synthetic_prototypes(const SyntheticSpec& spec) {
  validate_spec(spec);
  auto eng = rng::make_engine(rng::derive_seed(spec.seed, "synthetic-prototypes"));
  std::vector<std::vector<double>> protos;
  protos.reserve(static_cast<std::size_t>(spec.phoneme_count));
  for (int p = 0; p < spec.phoneme_count; ++p) {
    std::vector<double> v(kGopDim);
    double norm_sq = 0.0;
    for (double& x : v) {
      x = rng::normal(eng);
      norm_sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : v) x *= inv;
    protos.push_back(std::move(v));
  }
  return protos;
}

std::vector<UtteranceSample> generate_synthetic(const SyntheticSpec& spec) {
  validate_spec(spec);
  const auto protos = synthetic_prototypes(spec);

  // Draw order per utterance: length, word split, then per phone
  // (category, quality, 84 noise values).
  auto eng = rng::make_engine(rng::derive_seed(spec.seed, "synthetic-samples"));
  std::vector<UtteranceSample> samples;
  samples.reserve(static_cast<std::size_t>(spec.utterances));
  for (int ui = 0; ui < spec.utterances; ++ui) {
    UtteranceSample s;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "synth-%06d", ui);
      s.utt_id = buf;
    }
    const int len = spec.min_phones +
                    static_cast<int>(rng::uniform_int(
                        eng, static_cast<std::uint64_t>(spec.max_phones - spec.min_phones + 1)));

    // Split the phone sequence into words of 1..3 phones.
    std::vector<int> word_of(static_cast<std::size_t>(len));
    int word_count = 0;
    for (int pos = 0; pos < len;) {
      int wl = 1 + static_cast<int>(rng::uniform_int(eng, 3));
      wl = std::min(wl, len - pos);
      for (int k = 0; k < wl; ++k) word_of[static_cast<std::size_t>(pos + k)] = word_count;
      pos += wl;
      ++word_count;
    }

    for (int pos = 0; pos < len; ++pos) {
      Phone p;
      p.word_index = word_of[static_cast<std::size_t>(pos)];
      p.phoneme_id = static_cast<int>(
          rng::uniform_int(eng, static_cast<std::uint64_t>(spec.phoneme_count)));
      const double q = rng::uniform_range(eng, 0.0, 2.0);
      p.accuracy = q < 2.0 / 3.0 ? 0.0 : (q < 4.0 / 3.0 ? 1.0 : 2.0);
      p.gop.resize(kGopDim);
      const auto& mu = protos[static_cast<std::size_t>(p.phoneme_id)];
      const double along = spec.center_scale * (q / 2.0);
      for (int j = 0; j < kGopDim; ++j) {
        p.gop[static_cast<std::size_t>(j)] =
            along * mu[static_cast<std::size_t>(j)] + spec.noise_scale * rng::normal(eng);
      }
      s.phones.push_back(std::move(p));
    }

    s.words.resize(static_cast<std::size_t>(word_count));
    std::vector<int> member_count(static_cast<std::size_t>(word_count), 0);
    for (const Phone& p : s.phones) {
      s.words[static_cast<std::size_t>(p.word_index)].accuracy += p.accuracy;
      ++member_count[static_cast<std::size_t>(p.word_index)];
    }
    double utt_sum = 0.0;
    for (int w = 0; w < word_count; ++w) {
      WordScores& ws = s.words[static_cast<std::size_t>(w)];
      ws.accuracy /= member_count[static_cast<std::size_t>(w)];
      ws.stress = ws.accuracy;
      ws.total = ws.accuracy;
      utt_sum += ws.accuracy;
    }
    const double utt_mean = utt_sum / word_count;
    s.utterance = {utt_mean, utt_mean, utt_mean, utt_mean, utt_mean};
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Batch> make_batches(const std::vector<UtteranceSample>& samples, int batch_size,
                                int max_len, std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size < 1) throw DataError("make_batches: batch_size must be >= 1");
  if (max_len < 1) throw DataError("make_batches: max_len must be >= 1");
  for (const UtteranceSample& s : samples) {
    if (static_cast<int>(s.phones.size()) > max_len) {
      throw DataError("utterance \"" + s.utt_id + "\" has " + std::to_string(s.phones.size()) +
                      " phones, exceeding max_len " + std::to_string(max_len));
    }
  }

  std::vector<int> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  if (shuffle_seed) {
    auto eng = rng::make_engine(*shuffle_seed);
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng::uniform_int(eng, i));
      std::swap(order[i - 1], order[j]);
    }
  }

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const int b_count =
        static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                               order.size() - start));
    Batch b;
    b.size = b_count;
    b.max_len = max_len;
    const std::size_t bt = static_cast<std::size_t>(b_count) * static_cast<std::size_t>(max_len);
    std::vector<double> features(bt * kGopDim, 0.0);
    std::vector<int> ids(bt, 0);
    std::vector<double> mask(bt, 0.0);
    std::vector<double> phone_targets(bt, -1.0);
    std::array<std::vector<double>, kWordAspects> word_targets;
    word_targets.fill(std::vector<double>(bt, -1.0));
    std::vector<double> utt_targets(static_cast<std::size_t>(b_count) * kUttAspects, 0.0);
    std::vector<int> word_index(bt, -1);

    for (int r = 0; r < b_count; ++r) {
      const int src = order[start + static_cast<std::size_t>(r)];
      const UtteranceSample& s = samples[static_cast<std::size_t>(src)];
      b.sample_indices.push_back(src);
      b.utt_ids.push_back(s.utt_id);
      b.lengths.push_back(static_cast<int>(s.phones.size()));
      for (std::size_t t = 0; t < s.phones.size(); ++t) {
        const Phone& p = s.phones[t];
        const std::size_t row = static_cast<std::size_t>(r) * max_len + t;
        std::copy(p.gop.begin(), p.gop.end(), features.begin() + row * kGopDim);
        ids[row] = p.phoneme_id;
        mask[row] = 1.0;
        phone_targets[row] = p.accuracy;
        const WordScores& w = s.words[static_cast<std::size_t>(p.word_index)];
        word_targets[0][row] = w.accuracy;
        word_targets[1][row] = w.stress;
        word_targets[2][row] = w.total;
        word_index[row] = p.word_index;
      }
      const UtteranceScores& u = s.utterance;
      const std::size_t ub = static_cast<std::size_t>(r) * kUttAspects;
      utt_targets[ub + 0] = u.accuracy;
      utt_targets[ub + 1] = u.completeness;
      utt_targets[ub + 2] = u.fluency;
      utt_targets[ub + 3] = u.prosody;
      utt_targets[ub + 4] = u.total;
    }

    b.features = ad::Tensor({b_count, max_len, kGopDim}, std::move(features));
    b.phoneme_ids = ad::IntTensor({b_count, max_len}, std::move(ids));
    b.mask = ad::Tensor({b_count, max_len}, std::move(mask));
    b.phone_targets = ad::Tensor({b_count, max_len}, std::move(phone_targets));
    for (int a = 0; a < kWordAspects; ++a) {
      b.word_targets[static_cast<std::size_t>(a)] =
          ad::Tensor({b_count, max_len}, std::move(word_targets[static_cast<std::size_t>(a)]));
    }
    b.utterance_targets = ad::Tensor({b_count, kUttAspects}, std::move(utt_targets));
    b.word_index = ad::IntTensor({b_count, max_len}, std::move(word_index));
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace pco::data
