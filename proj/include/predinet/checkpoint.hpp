#pragma once

// PNET1 checkpoints.
//
//   "PNET1"  u32 version
//   u32 text_len, text            key=value lines: model config + run state
//   u32 tensor_count, then per tensor:
//     u32 name_len, name, u32 rank, u32 dims[rank], f32 data[numel]
//   u32 crc32 of every preceding byte
//
// Parameters are stored under their own names; Adam moments under
// "adam.m/<name>" and "adam.v/<name>". All integers and floats little-endian.

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "predinet/binary_io.hpp"
#include "predinet/config.hpp"
#include "predinet/nets.hpp"
#include "predinet/protocol.hpp"

namespace predinet {

inline constexpr char kCheckpointMagic[5] = {'P', 'N', 'E', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "[model]\n"
     << "arch = " << to_string(c.arch) << "\n"
     << "heads = " << c.heads << "\n"
     << "relations = " << c.relations << "\n"
     << "key_size = " << c.key_size << "\n"
     << "label_arity = " << c.label_arity << "\n"
     << "task_id_width = " << c.task_id_width << "\n"
     << "image_size = " << c.image_size << "\n"
     << "image_channels = " << c.image_channels << "\n"
     << "cnn_channels = " << c.cnn_channels << "\n"
     << "cnn_filter = " << c.cnn_filter << "\n"
     << "cnn_stride = " << c.cnn_stride << "\n"
     << "output_hidden = " << c.output_hidden << "\n"
     << "mlp2_hidden = " << c.mlp2_hidden << "\n"
     << "rn_hidden = " << c.rn_hidden << "\n"
     << "coordinates = " << to_string(c.coordinates) << "\n";
  char gain[32];
  std::snprintf(gain, sizeof gain, "%.17g", c.init_gain);
  os << "init_gain = " << gain << "\n";
  return os.str();
}

/// Reads `model.*` keys; absent keys keep their defaults.
inline ModelConfig model_config_from(const Config& cfg) {
  ModelConfig c;
  if (cfg.has("model.arch")) c.arch = parse_arch(cfg.get("model.arch"));
  auto num = [&](const char* key, std::size_t& field) { field = cfg.number<std::size_t>(std::string("model.") + key, field); };
  num("heads", c.heads);
  num("relations", c.relations);
  num("key_size", c.key_size);
  num("label_arity", c.label_arity);
  num("task_id_width", c.task_id_width);
  num("image_size", c.image_size);
  num("image_channels", c.image_channels);
  num("cnn_channels", c.cnn_channels);
  num("cnn_filter", c.cnn_filter);
  num("cnn_stride", c.cnn_stride);
  num("output_hidden", c.output_hidden);
  num("mlp2_hidden", c.mlp2_hidden);
  num("rn_hidden", c.rn_hidden);
  if (cfg.has("model.coordinates")) c.coordinates = parse_coordinates(cfg.get("model.coordinates"));
  c.init_gain = cfg.number<double>("model.init_gain", c.init_gain);
  c.validate();
  return c;
}

inline std::vector<std::uint8_t> encode_checkpoint(const TrainState<float>& st) {
  std::ostringstream text;
  text << model_config_text(st.model.config());
  text << "[state]\n"
       << "seed = " << st.seed << "\n"
       << "stream = " << st.stream << "\n"
       << "batch = " << st.batch << "\n";
  std::string tasks;
  for (const auto& t : st.tasks) tasks += (tasks.empty() ? "" : ",") + rg::to_string(t);
  text << "tasks = " << tasks << "\n";
  std::string frozen;
  for (auto g : {ParamGroup::cnn, ParamGroup::central, ParamGroup::output}) {
    for (const auto& p : st.model.params().entries())
      if (p.group == g && !p.tensor.requires_grad()) {
        frozen += (frozen.empty() ? "" : ",") + to_string(g);
        break;
      }
  }
  text << "frozen = " << frozen << "\n";
  const auto& opt = st.optimizer;
  char lr[32];
  std::snprintf(lr, sizeof lr, "%.9g", static_cast<double>(opt.learning_rate));
  text << "[optimizer]\n"
       << "kind = " << to_string(opt.kind) << "\n"
       << "learning_rate = " << lr << "\n"
       << "step = " << opt.step << "\n";

  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (const auto& p : st.model.params().entries()) tensors.emplace_back(p.name, &p.tensor);
  if (opt.kind == OptimizerKind::adam && !opt.first_moment.empty()) {
    std::vector<std::string> names;
    for (const auto& p : st.model.params().entries())
      if (p.tensor.requires_grad()) names.push_back(p.name);
    if (names.size() != opt.first_moment.size()) throw UsageError("checkpoint: optimizer moments do not match trainable parameters");
    for (std::size_t i = 0; i < names.size(); ++i) tensors.emplace_back("adam.m/" + names[i], &opt.first_moment[i]);
    for (std::size_t i = 0; i < names.size(); ++i) tensors.emplace_back("adam.v/" + names[i], &opt.second_moment[i]);
  }

  io::Writer w;
  w.bytes(kCheckpointMagic, 5);
  w.u32(kCheckpointVersion);
  const auto t = text.str();
  w.u32(static_cast<std::uint32_t>(t.size()));
  w.str(t);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.str(name);
    w.u32(static_cast<std::uint32_t>(tensor->rank()));
    for (auto d : tensor->shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(tensor->data().data(), tensor->size());
  }
  const auto crc = io::crc32_of(w.data().data(), w.size());
  w.u32(crc);
  return w.data();
}

/// Decodes into a fresh state; throws FormatError (with the failing byte
/// offset) before anything is returned.
inline TrainState<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::Reader r(bytes);
  const auto* magic = r.take(5, "magic");
  if (!std::equal(magic, magic + 5, kCheckpointMagic)) throw FormatError("not a PNET1 checkpoint", 0);
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 5);
  if (bytes.size() < 4 + r.offset()) throw FormatError("truncated file reading checksum", bytes.size());
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);

  const auto text_len = r.u32("text length");
  const auto text_at = r.offset();
  const auto text = r.str(text_len, "config text");
  Config cfg;
  try {
    cfg = Config::parse_string(text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad config block: ") + e.what(), text_at);
  }

  TrainState<float> st;
  std::vector<std::string> frozen;
  try {
    Rng unused = derive_rng(0);
    st.model = Model<float>(model_config_from(cfg), unused);
    st.seed = cfg.number<std::uint64_t>("state.seed");
    st.stream = cfg.number<std::uint64_t>("state.stream");
    st.batch = cfg.number<std::uint64_t>("state.batch");
    frozen = cfg.list("state.frozen");
    for (const auto& t : cfg.list("state.tasks")) st.tasks.push_back(rg::parse_task(t));
    st.optimizer.kind = parse_optimizer(cfg.get("optimizer.kind"));
    st.optimizer.learning_rate = cfg.number<float>("optimizer.learning_rate");
    st.optimizer.step = cfg.number<std::uint64_t>("optimizer.step");
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad config block: ") + e.what(), text_at);
  }
  for (const auto& f : frozen) {
    if (f == "cnn") st.model.params().set_trainable(ParamGroup::cnn, false);
    else if (f == "central") st.model.params().set_trainable(ParamGroup::central, false);
    else if (f == "output") st.model.params().set_trainable(ParamGroup::output, false);
    else throw FormatError("unknown frozen group " + f, text_at);
  }

  const auto count = r.u32("tensor count");
  std::vector<std::pair<std::string, Tensor<float>>> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = r.offset();
    const auto name_len = r.u32("tensor name length");
    auto name = r.str(name_len, "tensor name");
    const auto rank = r.u32("tensor rank");
    if (rank == 0 || rank > 8) throw FormatError("bad tensor rank for " + name, at);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.u32("tensor dims");
      if (d == 0 || n > (std::size_t{1} << 34) / d) throw FormatError("bad tensor dims for " + name, at);
      shape.push_back(d);
      n *= d;
    }
    std::vector<float> data(n);
    r.f32s(data.data(), n, "tensor data");
    loaded.emplace_back(std::move(name), Tensor<float>(shape, std::move(data)));
  }
  const auto crc_at = r.offset();
  const auto computed = io::crc32_of(bytes.data(), crc_at);
  r.u32("checksum");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checksum", r.offset());
  if (computed != stored) throw FormatError("checksum mismatch", crc_at);

  std::size_t params = 0;
  std::vector<Tensor<float>> m1, m2;
  for (auto& [name, t] : loaded) {
    if (name.rfind("adam.m/", 0) == 0) {
      m1.push_back(std::move(t));
      continue;
    }
    if (name.rfind("adam.v/", 0) == 0) {
      m2.push_back(std::move(t));
      continue;
    }
    auto* dst = st.model.params().find(name);
    if (!dst) throw FormatError("unknown tensor " + name, crc_at);
    if (dst->shape() != t.shape()) {
      throw FormatError("tensor " + name + " has shape " + to_string(t.shape()) + ", model expects " + to_string(dst->shape()), crc_at);
    }
    std::copy(t.data().begin(), t.data().end(), dst->data().begin());
    ++params;
  }
  if (params != st.model.params().entries().size()) throw FormatError("checkpoint is missing parameters", crc_at);
  if (m1.size() != m2.size()) throw FormatError("unpaired Adam moments", crc_at);
  if (!m1.empty()) {
    if (m1.size() != trainable(st.model).size()) throw FormatError("Adam moments do not match trainable parameters", crc_at);
    st.optimizer.first_moment = std::move(m1);
    st.optimizer.second_moment = std::move(m2);
  }
  return st;
}

inline void save_checkpoint(const TrainState<float>& st, const std::string& path) {
  io::write_file(path, encode_checkpoint(st));
}

inline TrainState<float> load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace predinet
