// On-disk formats: checkpoints, shards, config files, PNG.

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include <unistd.h>

#include "predinet/checkpoint.hpp"
#include "predinet/config.hpp"
#include "predinet/png.hpp"
#include "predinet/shard.hpp"

using namespace predinet;
namespace fs = std::filesystem;

namespace {

ModelConfig small(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.heads = 2;
  c.relations = 3;
  c.key_size = 4;
  c.cnn_channels = 3;
  c.output_hidden = 4;
  c.mlp2_hidden = 6;
  c.rn_hidden = 5;
  c.task_id_width = 2;
  return c;
}

TrainState<float> state(Arch arch, OptimizerKind kind, std::uint64_t seed = 3) {
  Rng rng = derive_rng(seed, 0x1717);
  TrainState<float> st{Model<float>(small(arch), rng), {}, seed, 11, 42, {rg::parse_task("same"), rg::parse_task("between")}};
  st.optimizer = kind == OptimizerKind::sgd ? OptimizerState<float>::sgd(0.01f) : OptimizerState<float>::adam(3e-4f);
  st.optimizer.step = 42;
  if (kind == OptimizerKind::adam) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (const auto* p : trainable(st.model)) {
      Tensor<float> m(p->shape()), v(p->shape());
      for (auto& x : m.data()) x = u(rng) - 0.5f;
      for (auto& x : v.data()) x = u(rng);
      st.optimizer.first_moment.push_back(m);
      st.optimizer.second_moment.push_back(v);
    }
  }
  return st;
}

template <class T>
std::vector<float> values(const T& t) {
  return {t.data().begin(), t.data().end()};
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("predinet_io_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

template <class F>
std::size_t format_error_offset(F&& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return SIZE_MAX;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExactForEveryArchitecture) {
  for (auto arch : {Arch::predinet, Arch::mlp1, Arch::mlp2, Arch::rn, Arch::mha}) {
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
      auto st = state(arch, kind);
      st.model.params().set_trainable(ParamGroup::cnn, false);
      if (kind == OptimizerKind::adam) {
        st.optimizer.first_moment.clear();
        st.optimizer.second_moment.clear();
        for (const auto* p : trainable(st.model)) {
          st.optimizer.first_moment.emplace_back(p->shape());
          st.optimizer.second_moment.emplace_back(p->shape());
          st.optimizer.second_moment.back().data()[0] = 0.25f;
        }
      }
      const auto bytes = encode_checkpoint(st);
      const auto back = decode_checkpoint(bytes);
      EXPECT_EQ(encode_checkpoint(back), bytes) << to_string(arch);
      EXPECT_EQ(back.seed, st.seed);
      EXPECT_EQ(back.stream, st.stream);
      EXPECT_EQ(back.batch, st.batch);
      EXPECT_EQ(back.optimizer.step, st.optimizer.step);
      EXPECT_EQ(back.optimizer.kind, kind);
      ASSERT_EQ(back.tasks.size(), 2u);
      EXPECT_EQ(back.tasks[1].id(), st.tasks[1].id());
      EXPECT_EQ(back.model.config().arch, arch);
      EXPECT_EQ(back.model.config().coordinates, st.model.config().coordinates);
      EXPECT_EQ(back.model.config().init_gain, st.model.config().init_gain);
      for (const auto& p : st.model.params().entries()) {
        const auto* q = back.model.params().find(p.name);
        ASSERT_NE(q, nullptr) << p.name;
        EXPECT_EQ(values(*q), values(p.tensor)) << p.name;
        EXPECT_EQ(q->requires_grad(), p.tensor.requires_grad()) << p.name;
      }
    }
  }
}

TEST(Checkpoint, SaveAndLoadThroughTheFilesystem) {
  auto st = state(Arch::predinet, OptimizerKind::adam);
  const auto path = scratch("rt.pnet").string();
  save_checkpoint(st, path);
  EXPECT_FALSE(fs::exists(path + ".tmp"));
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), encode_checkpoint(st));
  fs::remove(path);
}

TEST(Checkpoint, EveryTruncationIsAFormatError) {
  const auto bytes = encode_checkpoint(state(Arch::mlp1, OptimizerKind::sgd));
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    try {
      decode_checkpoint(cut);
      ADD_FAILURE() << "prefix of " << n << " bytes decoded";
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), n);
    } catch (const std::exception& e) {
      ADD_FAILURE() << "prefix " << n << ": " << e.what();
    }
  }
}

TEST(Checkpoint, CorruptionIsReportedWithAnOffset) {
  const auto bytes = encode_checkpoint(state(Arch::predinet, OptimizerKind::sgd));

  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(format_error_offset([&] { decode_checkpoint(magic); }), 0u);

  auto version = bytes;
  version[5] = 9;
  EXPECT_EQ(format_error_offset([&] { decode_checkpoint(version); }), 5u);

  // Flip a byte in the last tensor's data: only the checksum notices.
  auto flipped = bytes;
  flipped[bytes.size() - 10] ^= 0x40;
  EXPECT_EQ(format_error_offset([&] { decode_checkpoint(flipped); }), bytes.size() - 4);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_NE(format_error_offset([&] { decode_checkpoint(trailing); }), SIZE_MAX);
}

TEST(Checkpoint, BadConfigBlockIsAFormatError) {
  io::Writer w;
  w.bytes(kCheckpointMagic, 5);
  w.u32(kCheckpointVersion);
  const std::string text = "[model]\narch = nonsense\n";
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.str(text);
  w.u32(0);
  w.u32(io::crc32_of(w.data().data(), w.size()));
  EXPECT_EQ(format_error_offset([&] { decode_checkpoint(w.data()); }), 13u);
}

TEST(Checkpoint, ModelConfigTextRoundTrips) {
  auto c = small(Arch::rn);
  c.coordinates = Coordinates::unit;
  c.init_gain = 0.7;
  const auto back = model_config_from(Config::parse_string(model_config_text(c)));
  EXPECT_EQ(back.arch, c.arch);
  EXPECT_EQ(back.rn_hidden, c.rn_hidden);
  EXPECT_EQ(back.coordinates, Coordinates::unit);
  EXPECT_EQ(back.init_gain, 0.7);
}

TEST(Shard, RoundTripKeepsEveryField) {
  for (const char* task : {"same", "colour_shape", "row_pattern:ABA"}) {
    const auto s = generate_shard(rg::parse_task(task), rg::ObjectSetId::holdout_hexominoes, 7, 5);
    const auto back = decode_shard(encode_shard(s));
    EXPECT_EQ(back.task.id(), s.task.id());
    EXPECT_EQ(back.object_set, s.object_set);
    ASSERT_EQ(back.examples.size(), 7u);
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_EQ(values(back.examples[i].image), values(s.examples[i].image));
      EXPECT_EQ(back.examples[i].label, s.examples[i].label);
      ASSERT_EQ(back.examples[i].objects.size(), s.examples[i].objects.size());
      for (std::size_t k = 0; k < s.examples[i].objects.size(); ++k) {
        EXPECT_EQ(back.examples[i].objects[k].shape, s.examples[i].objects[k].shape);
        EXPECT_EQ(back.examples[i].objects[k].colour, s.examples[i].objects[k].colour);
        EXPECT_EQ(back.examples[i].objects[k].row, s.examples[i].objects[k].row);
        EXPECT_EQ(back.examples[i].objects[k].col, s.examples[i].objects[k].col);
      }
    }
    EXPECT_EQ(encode_shard(back), encode_shard(s));
  }
}

TEST(Shard, GenerationIsAFunctionOfTheSeed) {
  const auto task = rg::parse_task("occurs");
  EXPECT_EQ(encode_shard(generate_shard(task, rg::ObjectSetId::train_pentominoes, 20, 9)),
            encode_shard(generate_shard(task, rg::ObjectSetId::train_pentominoes, 20, 9)));
  EXPECT_NE(encode_shard(generate_shard(task, rg::ObjectSetId::train_pentominoes, 20, 9)),
            encode_shard(generate_shard(task, rg::ObjectSetId::train_pentominoes, 20, 10)));
}

TEST(Shard, MalformedInputsAreRejected) {
  const auto bytes = encode_shard(generate_shard(rg::parse_task("same"), rg::ObjectSetId::train_pentominoes, 3, 1));
  for (std::size_t n = 0; n < bytes.size(); n += 97) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(decode_shard(cut), FormatError) << n;
  }
  auto magic = bytes;
  magic[3] = '2';
  EXPECT_EQ(format_error_offset([&] { decode_shard(magic); }), 0u);
  auto task = bytes;
  task[4] = 200;
  EXPECT_EQ(format_error_offset([&] { decode_shard(task); }), 4u);
  auto set = bytes;
  set[8] = 3;
  EXPECT_EQ(format_error_offset([&] { decode_shard(set); }), 8u);
  auto label = bytes;
  label[16 + rg::kImageFloats * 4] = 2;
  EXPECT_EQ(format_error_offset([&] { decode_shard(label); }), 16 + rg::kImageFloats * 4);
  auto trailing = bytes;
  trailing.push_back(1);
  EXPECT_EQ(format_error_offset([&] { decode_shard(trailing); }), bytes.size());
}

TEST(Config, SectionsCommentsAndWhitespace) {
  const auto c = Config::parse_string(
      "top = 1\n"
      "# comment\n"
      "  [train]  \n"
      "  batches =  20000  ; trailing comment\n"
      "tasks = same, between,,occurs\n"
      "[model]\n"
      "arch=predinet\n");
  EXPECT_EQ(c.get("top"), "1");
  EXPECT_EQ(c.number<std::size_t>("train.batches"), 20000u);
  EXPECT_EQ(c.list("train.tasks"), (std::vector<std::string>{"same", "between", "occurs"}));
  EXPECT_EQ(c.get("model.arch"), "predinet");
  EXPECT_EQ(c.get("model.heads", "32"), "32");
  EXPECT_EQ(c.number<double>("train.lr", 0.5), 0.5);
}

TEST(Config, ErrorsNameTheLine) {
  auto message = [](const std::string& text) {
    try {
      Config::parse_string(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("a = 1\n\n[s]\na = 2\na = 3\n").find(":5:"), std::string::npos);
  EXPECT_NE(message("[s\n").find(":1:"), std::string::npos);
  EXPECT_NE(message("x = 1\nnot a pair\n").find(":2:"), std::string::npos);
  EXPECT_NE(message("[]\n").find("empty section"), std::string::npos);
  EXPECT_NE(message(" = 4\n").find("empty key"), std::string::npos);
  EXPECT_THROW(Config::load("/nonexistent/x.cfg"), ConfigError);
}

TEST(Config, NumbersAreStrict) {
  const auto c = Config::parse_string("a = 12x\nb = -3\nc = 0.25\n");
  EXPECT_THROW(c.number<int>("a"), ConfigError);
  EXPECT_THROW(c.number<std::size_t>("b"), ConfigError);
  EXPECT_EQ(c.number<int>("b"), -3);
  EXPECT_EQ(c.number<double>("c"), 0.25);
  EXPECT_THROW(c.get("missing"), ConfigError);
}

TEST(Config, DumpParsesBackToTheSameValues) {
  auto c = Config::parse_string("z = 1\n[b]\nk = v\n[a]\nx = 1, 2\n");
  c.set("b.extra", "q");
  const auto again = Config::parse_string(c.dump());
  EXPECT_EQ(again.values(), c.values());
  EXPECT_EQ(again.dump(), c.dump());
}

TEST(Config, UnusedKeysAreReported) {
  const auto c = Config::parse_string("[train]\nbatches = 3\nbtaches = 4\n");
  c.get("train.batches");
  EXPECT_EQ(c.unused(), std::vector<std::string>{"train.btaches"});
}

TEST(Png, RoundTripAtByteResolution) {
  Rng rng = derive_rng(4);
  const auto ex = rg::sample_example(rg::parse_task("between"), rg::object_set(rg::ObjectSetId::train_pentominoes), rng);
  const auto path = scratch("img.png").string();
  png::write(path, ex.image);
  const auto back = png::read_rgb(path);
  ASSERT_EQ(back.shape(), ex.image.shape());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(png::to_byte(back[i]), png::to_byte(ex.image[i]));

  const auto big = png::upscale(ex.image, 3);
  ASSERT_EQ(big.shape(), (Shape{108, 108, 3}));
  EXPECT_EQ(big[((5 * 3 + 2) * 108 + 7 * 3 + 1) * 3 + 2], ex.image[(5 * 36 + 7) * 3 + 2]);

  EXPECT_THROW(png::write(path, Tensor<float>({4, 4, 2})), DimensionError);
  EXPECT_THROW(png::read_rgb(scratch("missing.png").string()), DataError);
  fs::remove(path);
}

TEST(BinaryIo, ReaderStopsAtTheEnd) {
  io::Writer w;
  w.u32(7);
  w.u64(9);
  w.str("abc");
  io::Reader r(w.data());
  EXPECT_EQ(r.u32("a"), 7u);
  EXPECT_EQ(r.u64("b"), 9u);
  EXPECT_EQ(r.str(3, "c"), "abc");
  EXPECT_EQ(r.remaining(), 0u);
  try {
    r.u8("d");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 15u);
  }
  float f[2];
  io::Reader huge(w.data());
  EXPECT_THROW(huge.f32s(f, SIZE_MAX / 2, "x"), FormatError);
}

TEST(BinaryIo, Crc32MatchesTheKnownCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(io::crc32_of(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), 0xCBF43926u);
}
