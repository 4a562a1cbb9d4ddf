#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "pco/model.hpp"

namespace pco::model {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'C', 'O', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CheckpointError("checkpoint file truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

json config_to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},       {"n_blocks", c.n_blocks},
              {"n_heads", c.n_heads},       {"ff_dim", c.ff_dim},
              {"max_len", c.max_len},       {"input_dim", c.input_dim},
              {"n_utt_aspects", c.n_utt_aspects}, {"n_word_aspects", c.n_word_aspects}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_blocks = j.at("n_blocks").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.n_utt_aspects = j.at("n_utt_aspects").get<int>();
  c.n_word_aspects = j.at("n_word_aspects").get<int>();
  return c;
}

// Zero-valued parameter set with the canonical shapes for `config`.
ModelParams skeleton(const ModelConfig& config) {
  ModelParams p = init_params(config, 0);
  p.visit_mut([](const std::string&, ad::Tensor& t) { t = ad::Tensor::zeros(t.shape()); });
  return p;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  const std::string manifest = config_to_json(params.config).dump();
  put_u32(out, static_cast<std::uint32_t>(manifest.size()));
  out += manifest;

  std::uint32_t count = 0;
  params.visit([&count](const std::string&, const ad::Tensor&) { ++count; });
  put_u32(out, count);

  params.visit([&out](const std::string& name, const ad::Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) put_f64(out, v);
  });

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("checkpoint write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw CheckpointError("not a checkpoint file: " + path);
  }
  const std::uint32_t manifest_len = r.u32();
  ModelConfig config;
  try {
    config = config_from_json(json::parse(r.bytes(manifest_len)));
    config.validate();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint manifest: ") + e.what());
  } catch (const ModelError& e) {
    throw CheckpointError(std::string("bad checkpoint manifest: ") + e.what());
  }

  std::map<std::string, ad::Tensor> tensors;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    ad::Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int>(r.u32()));
    const std::int64_t n = ad::shape_numel(shape);
    std::vector<double> values(static_cast<std::size_t>(n));
    for (double& v : values) v = r.f64();
    if (!tensors.emplace(name, ad::Tensor(std::move(shape), std::move(values))).second) {
      throw CheckpointError("duplicate tensor \"" + name + "\" in checkpoint");
    }
  }

  ModelParams params = skeleton(config);
  std::size_t used = 0;
  params.visit_mut([&tensors, &used, &path](const std::string& name, ad::Tensor& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      throw CheckpointError("checkpoint " + path + " is missing tensor \"" + name + "\"");
    }
    if (it->second.shape() != t.shape()) {
      throw CheckpointError("checkpoint tensor \"" + name + "\" has shape " +
                            ad::shape_str(it->second.shape()) + ", expected " +
                            ad::shape_str(t.shape()));
    }
    t = it->second;
    ++used;
  });
  if (used != tensors.size()) {
    throw CheckpointError("checkpoint carries " + std::to_string(tensors.size()) +
                          " tensors, expected " + std::to_string(used));
  }
  return params;
}

}  // namespace pco::model
