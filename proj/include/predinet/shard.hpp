#pragma once

// RGV1 dataset shards.
//
//   "RGV1"  u32 task_id  u32 object_set  u32 count
//   count records:
//     f32 image[36*36*3]  u8 label  u8 object_count
//     object_count x { u8 shape, u8 colour, u8 row, u8 col }
//
// Little-endian throughout. The task id is TaskSpec::id().

#include <cstdint>
#include <string>
#include <vector>

#include "predinet/binary_io.hpp"
#include "predinet/random.hpp"
#include "predinet/relations_game.hpp"

namespace predinet {

inline constexpr char kShardMagic[4] = {'R', 'G', 'V', '1'};

struct Shard {
  rg::TaskSpec task;
  rg::ObjectSetId object_set = rg::ObjectSetId::train_pentominoes;
  std::vector<rg::LabeledExample> examples;
};

inline std::vector<std::uint8_t> encode_shard(const Shard& s) {
  io::Writer w;
  w.bytes(kShardMagic, 4);
  w.u32(static_cast<std::uint32_t>(s.task.id()));
  w.u32(static_cast<std::uint32_t>(s.object_set));
  w.u32(static_cast<std::uint32_t>(s.examples.size()));
  for (const auto& ex : s.examples) {
    if (ex.image.size() != rg::kImageFloats) throw DimensionError("encode_shard: image must hold 3888 floats");
    if (ex.objects.size() > 255) throw DataError("encode_shard: too many objects");
    w.f32s(ex.image.data().data(), rg::kImageFloats);
    w.u8(static_cast<std::uint8_t>(ex.label));
    w.u8(static_cast<std::uint8_t>(ex.objects.size()));
    for (const auto& o : ex.objects) {
      w.u8(o.shape);
      w.u8(o.colour);
      w.u8(o.row);
      w.u8(o.col);
    }
  }
  return w.data();
}

inline Shard decode_shard(const std::vector<std::uint8_t>& bytes) {
  io::Reader r(bytes);
  const auto* magic = r.take(4, "magic");
  if (!std::equal(magic, magic + 4, kShardMagic)) throw FormatError("not an RGV1 shard", 0);
  Shard s;
  const auto task_at = r.offset();
  const auto task_id = r.u32("task id");
  try {
    s.task = rg::TaskSpec::from_id(task_id);
  } catch (const std::exception&) {
    throw FormatError("unknown task id " + std::to_string(task_id), task_at);
  }
  const auto set = r.u32("object set");
  if (set > 2) throw FormatError("unknown object set " + std::to_string(set), task_at + 4);
  s.object_set = static_cast<rg::ObjectSetId>(set);
  const auto count = r.u32("count");
  for (std::uint32_t i = 0; i < count; ++i) {
    rg::LabeledExample ex;
    ex.task = s.task;
    ex.object_set = s.object_set;
    ex.label_arity = s.task.label_arity();
    ex.image = Tensor<float>({rg::kImageSize, rg::kImageSize, rg::kChannels});
    r.f32s(ex.image.data().data(), rg::kImageFloats, "image");
    const auto label_at = r.offset();
    ex.label = r.u8("label");
    if (ex.label >= ex.label_arity) throw FormatError("label out of range", label_at);
    const auto n = r.u8("object count");
    for (std::uint8_t k = 0; k < n; ++k) {
      rg::ObjectSpec o;
      o.shape = r.u8("object");
      o.colour = r.u8("object");
      o.row = r.u8("object");
      o.col = r.u8("object");
      ex.objects.push_back(o);
    }
    s.examples.push_back(std::move(ex));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last record", r.offset());
  return s;
}

/// `count` examples drawn from derive_rng(seed, 0).
inline Shard generate_shard(const rg::TaskSpec& task, rg::ObjectSetId set, std::size_t count, std::uint64_t seed) {
  Shard s{task, set, {}};
  Rng rng = derive_rng(seed, 0);
  const auto& objects = rg::object_set(set);
  for (std::size_t i = 0; i < count; ++i) s.examples.push_back(rg::sample_example(task, objects, rng));
  return s;
}

inline void save_shard(const Shard& s, const std::string& path) { io::write_file(path, encode_shard(s)); }
inline Shard load_shard(const std::string& path) { return decode_shard(io::read_file(path)); }

}  // namespace predinet
