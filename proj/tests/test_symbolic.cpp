// Prolog export: grammar conformance, fact counts and values.

#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "predinet/symbolic.hpp"
#include "prolog_grammar.hpp"

using namespace predinet;
using namespace grammar;

namespace {

Model<float> predinet_model(std::size_t heads, std::size_t relations, std::uint64_t seed) {
  ModelConfig c;
  c.heads = heads;
  c.relations = relations;
  c.key_size = 8;
  c.cnn_channels = 8;
  Rng rng = derive_rng(seed, 0x1717);
  return Model<float>(c, rng);
}

Tensor<float> image(const char* task, std::uint64_t seed) {
  Rng rng = derive_rng(seed);
  return rg::sample_example(rg::parse_task(task), rg::object_set(rg::ObjectSetId::train_pentominoes), rng).image;
}

}  // namespace

TEST(Grammar, RecogniserRejectsNearMisses) {
  EXPECT_TRUE(parse_program("% c\nprop(rel_1, -0.1234, ob_1, ob_2).\npos(ob_1, 0.5000, 1.0000).\n").ok);
  for (const char* bad : {"prop(rel_0, 0.1234, ob_1, ob_2).\n", "prop(rel_1, 0.123, ob_1, ob_2).\n",
                          "prop(rel_1,0.1234, ob_1, ob_2).\n", "prop(rel_1, 0.1234, ob_01, ob_2).\n",
                          "prop(rel_1, 0.1234, Ob_1, ob_2).\n", "pos(ob_1, 0.5000).\n", "prop(rel_1, 0.1234, ob_1, ob_2)\n",
                          "% ok\nprop(rel_1, 1.0000, ob_1, ob_1)."})
    EXPECT_FALSE(parse_program(bad).ok) << bad;
}

TEST(Export, EightByEightGivesSixtyFourFactsMatchingRStar) {
  auto m = predinet_model(8, 8, 4);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto img = image("between", s);
    const auto scene = symbolic::extract(m, img);
    const auto text = symbolic::emit_prolog(scene);
    const auto p = parse_program(text);
    ASSERT_TRUE(p.ok) << p.error;
    ASSERT_EQ(p.props.size(), 64u);
    const std::size_t w = m.config().head_width();
    ASSERT_EQ(scene.r_star.size(), 8 * w);
    for (std::size_t f = 0; f < 64; ++f) {
      const std::size_t h = f / 8, i = f % 8;
      EXPECT_EQ(p.props[f].relation, i + 1);
      // Printed with 4 decimals: off by at most half a unit in the last place.
      EXPECT_LE(std::abs(p.props[f].value - scene.r_star[h * w + i]), 0.5e-4 + 1e-12) << f;
      EXPECT_EQ(symbolic::format_value(scene.r_star[h * w + i]), symbolic::format_value(p.props[f].value));
    }
    // Every referenced object is declared by exactly one pos fact.
    const std::set<std::string> declared(p.pos_objects.begin(), p.pos_objects.end());
    EXPECT_EQ(declared.size(), p.pos_objects.size());
    EXPECT_EQ(declared.size(), scene.clustering.clusters.size());
    for (const auto& f : p.props) {
      EXPECT_TRUE(declared.count(f.subject)) << f.subject;
      EXPECT_TRUE(declared.count(f.object)) << f.object;
    }
    EXPECT_EQ(std::count(p.comments.begin(), p.comments.end(), "% heads: 8"), 1);
    EXPECT_EQ(std::count(p.comments.begin(), p.comments.end(), "% head 8"), 1);
  }
}

TEST(Export, FactCountIsHeadsTimesRelations) {
  for (auto [k, j] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {3, 5}, {4, 2}}) {
    auto m = predinet_model(k, j, 7);
    const auto p = parse_program(symbolic::emit_prolog(symbolic::extract(m, image("same", 1))));
    ASSERT_TRUE(p.ok) << p.error;
    EXPECT_EQ(p.props.size(), k * j);
  }
}

TEST(Export, IdenticalQueriesGiveSelfRelationsWithZeroValue) {
  auto m = predinet_model(4, 3, 2);
  m.params().at("predinet.w_q2") = m.params().at("predinet.w_q1");
  const auto p = parse_program(symbolic::emit_prolog(symbolic::extract(m, image("occurs", 3))));
  ASSERT_TRUE(p.ok) << p.error;
  for (const auto& f : p.props) {
    EXPECT_EQ(f.subject, f.object);
    EXPECT_EQ(f.value, 0.0);
  }
}

TEST(Export, UniformAttentionCollapsesWithAWarning) {
  auto m = predinet_model(4, 3, 2);
  auto& wk = m.params().at("predinet.w_k");
  std::fill(wk.data().begin(), wk.data().end(), 0.0f);
  const auto scene = symbolic::extract(m, image("between", 2));
  EXPECT_EQ(scene.clustering.clusters.size(), 1u);
  ASSERT_EQ(scene.warnings.size(), 1u);
  const auto text = symbolic::emit_prolog(scene);
  EXPECT_NE(text.find("% warning: degenerate clustering"), std::string::npos);
  const auto p = parse_program(text);
  ASSERT_TRUE(p.ok) << p.error;
  // Uniform masks sit at the grid centre.
  EXPECT_NE(text.find("pos(ob_1, 0.0000, 0.0000)."), std::string::npos);
}

TEST(Export, FormatValue) {
  EXPECT_EQ(symbolic::format_value(-0.00001), "0.0000");
  EXPECT_EQ(symbolic::format_value(-0.0), "0.0000");
  EXPECT_EQ(symbolic::format_value(1.23456), "1.2346");
  EXPECT_EQ(symbolic::format_value(-2.5), "-2.5000");
  EXPECT_EQ(symbolic::format_value(12.0), "12.0000");
}

TEST(Export, Contracts) {
  ModelConfig c;
  c.arch = Arch::mha;
  c.cnn_channels = 4;
  Rng rng = derive_rng(1);
  Model<float> mha(c, rng);
  EXPECT_THROW(symbolic::extract(mha, image("same", 1)), UsageError);
  auto m = predinet_model(2, 2, 1);
  EXPECT_THROW(symbolic::extract(m, Tensor<float>({36, 36})), DimensionError);
  EXPECT_THROW(symbolic::extract(m, image("same", 1), -1.0), ConfigError);
}
