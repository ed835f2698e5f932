#include "mtask/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mtask {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'T', 'A', 'S', 'K', 'C', 'P', '1'};
constexpr uint32_t kVersion = 1;

uint64_t fnv1a(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

json arch_to_json(const ArchSpec& a) {
  return json{{"image_size", a.image_size},
              {"in_channels", a.in_channels},
              {"conv_channels", a.conv_channels},
              {"feature_dim", a.feature_dim},
              {"n_classes", a.n_classes},
              {"portion_scale", a.portion_scale}};
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  a.image_size = j.at("image_size").get<int>();
  a.in_channels = j.at("in_channels").get<int>();
  a.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  a.feature_dim = j.at("feature_dim").get<int>();
  a.n_classes = j.at("n_classes").get<int>();
  a.portion_scale = j.at("portion_scale").get<double>();
  return a;
}

json fusion_to_json(const FusionConfig& f) {
  return json{{"detach_xc", f.detach_xc},
              {"ln_placement", f.ln_placement == LnPlacement::PreConcat ? "pre_concat" : "post_concat"},
              {"norm_order", f.norm_order == NormOrder::LnThenBn ? "ln_then_bn" : "bn_then_ln"},
              {"epsilon", f.epsilon},
              {"momentum", f.momentum}};
}

FusionConfig fusion_from_json(const json& j) {
  FusionConfig f;
  f.detach_xc = j.at("detach_xc").get<bool>();
  std::string place = j.at("ln_placement").get<std::string>();
  if (place == "pre_concat") f.ln_placement = LnPlacement::PreConcat;
  else if (place == "post_concat") f.ln_placement = LnPlacement::PostConcat;
  else throw ConfigError("fusion: unknown ln_placement '" + place + "'");
  std::string order = j.at("norm_order").get<std::string>();
  if (order == "ln_then_bn") f.norm_order = NormOrder::LnThenBn;
  else if (order == "bn_then_ln") f.norm_order = NormOrder::BnThenLn;
  else throw ConfigError("fusion: unknown norm_order '" + order + "'");
  f.epsilon = j.at("epsilon").get<double>();
  f.momentum = j.at("momentum").get<double>();
  return f;
}

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

struct Reader {
  const std::string& bytes;
  size_t pos = 0;

  void read(void* dst, size_t len, const char* what) {
    if (pos + len > bytes.size())
      throw DataError(std::string("checkpoint: truncated while reading ") + what);
    std::memcpy(dst, bytes.data() + pos, len);
    pos += len;
  }
  uint32_t u32(const char* what) {
    uint32_t v = 0;
    read(&v, 4, what);
    return v;
  }
  uint64_t u64(const char* what) {
    uint64_t v = 0;
    read(&v, 8, what);
    return v;
  }
  std::string str(uint64_t len, const char* what) {
    std::string s(len, '\0');
    read(s.data(), len, what);
    return s;
  }
};

std::vector<ParamRef> all_tensors(const TwinModel& model) {
  std::vector<ParamRef> tensors = model.parameters();
  std::vector<ParamRef> state = model.norm_state();
  tensors.insert(tensors.end(), state.begin(), state.end());
  return tensors;
}

}  // namespace

std::string model_config_to_json(const TwinModelConfig& cfg) {
  json j{{"arch", arch_to_json(cfg.arch)},
         {"mode", mode_to_string(cfg.mode)},
         {"fusion", fusion_to_json(cfg.fusion)},
         {"shared_layer_fraction", cfg.shared_layer_fraction}};
  return j.dump();
}

TwinModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model config: invalid JSON: ") + e.what());
  }
  TwinModelConfig cfg;
  cfg.arch = arch_from_json(j.at("arch"));
  cfg.mode = mode_from_string(j.at("mode").get<std::string>());
  cfg.fusion = fusion_from_json(j.at("fusion"));
  cfg.shared_layer_fraction = j.at("shared_layer_fraction").get<double>();
  return cfg;
}

void save_checkpoint(const TwinModel& model, const std::string& path) {
  std::string payload;
  std::string cfg = model_config_to_json(model.config());
  put_u64(payload, cfg.size());
  payload += cfg;

  std::vector<ParamRef> tensors = all_tensors(model);
  put_u32(payload, static_cast<uint32_t>(tensors.size()));
  for (const ParamRef& p : tensors) {
    put_u64(payload, p.name.size());
    payload += p.name;
    put_u32(payload, static_cast<uint32_t>(p.tensor->shape.size()));
    for (int d : p.tensor->shape) put_u32(payload, static_cast<uint32_t>(d));
    payload.append(reinterpret_cast<const char*>(p.tensor->values.data()),
                   p.tensor->values.size() * sizeof(double));
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, 8);
  uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  uint64_t checksum = fnv1a(payload);
  out.write(reinterpret_cast<const char*>(&checksum), 8);
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw DataError("checkpoint: write to '" + path + "' failed");
}

TwinModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw DataError("checkpoint: bad magic in '" + path + "'");
  uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  if (version != kVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + 12, 8);
  std::string payload = bytes.substr(20);
  if (fnv1a(payload) != stored)
    throw DataError("checkpoint: checksum mismatch in '" + path + "'");

  Reader r{payload};
  uint64_t cfg_len = r.u64("config length");
  std::string cfg_text = r.str(cfg_len, "config");
  TwinModel model(model_config_from_json(cfg_text), 0);

  std::vector<ParamRef> tensors = all_tensors(model);
  uint32_t count = r.u32("tensor count");
  if (count != tensors.size())
    throw DataError("checkpoint: expected " + std::to_string(tensors.size()) + " tensors, found " +
                    std::to_string(count));
  for (ParamRef& p : tensors) {
    uint64_t name_len = r.u64("tensor name length");
    std::string name = r.str(name_len, "tensor name");
    if (name != p.name)
      throw DataError("checkpoint: tensor '" + name + "' does not match expected '" + p.name + "'");
    uint32_t ndim = r.u32("tensor rank");
    Shape shape(ndim);
    for (uint32_t i = 0; i < ndim; ++i) shape[i] = static_cast<int>(r.u32("tensor dim"));
    if (shape != p.tensor->shape)
      throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) +
                      ", expected " + shape_str(p.tensor->shape));
    r.read(p.tensor->values.data(), p.tensor->values.size() * sizeof(double), "tensor data");
  }
  if (r.pos != payload.size()) throw DataError("checkpoint: trailing bytes in '" + path + "'");
  return model;
}

}  // namespace mtask
