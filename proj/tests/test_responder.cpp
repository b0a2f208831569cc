// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "mgilab/error.hpp"
#include "mgilab/mgi.hpp"
#include "mgilab/responder.hpp"
#include "mgilab/rng.hpp"
#include "mgilab/synthetic.hpp"
#include "oracles.hpp"

using namespace mgilab;

namespace {

const std::vector<OutlierSample>& pool() {
  static const auto p = [] {
    PoolConfig c;
    c.count = 300;
    c.seed = 21;
    return generate_pool(c);
  }();
  return p;
}

std::size_t first_with_task(TaskAttribute task) {
  for (std::size_t i = 0; i < pool().size(); ++i) {
    if (pool()[i].task == task) return i;
  }
  return 0;
}

}  // namespace

TEST(ScriptedResponder, AnswersWithMostAttendedCell) {
  const auto e = assemble_episode(pool(), 2, first_with_task(TaskAttribute::color), Modality::multimodal, 0);
  const auto t = tokenize_episode(e);
  auto trace = synthetic::uniform_trace(8, 4, t.spans);
  const int pos = synthetic::cell_position(t.spans.query_image, e.query.scene.grid,
                                           e.query.scene.objects[e.query.scene.color_outlier].cell);
  const std::pair<int, float> peak[] = {{pos, 1.0f}};
  for (int h = 0; h < 4; ++h) synthetic::plant_row(trace, 7, h, t.spans.query_last, peak);
  const int answer = scripted_responder(t, trace, ResponderRule{});
  EXPECT_EQ(answer, vocab::word_id(e.query.label));
  EXPECT_EQ(answer, vocab::color_token(e.query.scene.objects[e.query.scene.color_outlier].color));
}

TEST(ScriptedResponder, UniformAttentionPicksLowestCell) {
  OutlierSample q;
  q.id = 10000;
  q.task = TaskAttribute::shape;
  q.label = "star";
  q.question = std::string(kQuestion);
  q.scene.objects = {{Shape::triangle, Color::red, {0, 0}},
                     {Shape::triangle, Color::blue, {0, 1}},
                     {Shape::triangle, Color::red, {1, 1}},
                     {Shape::star, Color::red, {2, 2}}};
  q.scene.shape_outlier = 3;
  q.scene.color_outlier = 1;
  std::vector<OutlierSample> support(pool().begin(), pool().end());
  const auto e = assemble_episode(support, q, 2, Modality::multimodal, 0);
  const auto t = tokenize_episode(e);
  const auto trace = synthetic::uniform_trace(8, 4, t.spans);
  EXPECT_EQ(scripted_responder(t, trace, ResponderRule{}), vocab::shape_token(Shape::triangle));
  ResponderRule color_rule;
  color_rule.answer_source = AnswerSource::color;
  EXPECT_EQ(scripted_responder(t, trace, color_rule), vocab::color_token(Color::red));
}

TEST(ScriptedResponder, EmptyCellAnswersUnknown) {
  const auto e = assemble_episode(pool(), 2, 0, Modality::multimodal, 0);
  const auto t = tokenize_episode(e);
  auto trace = synthetic::uniform_trace(8, 4, t.spans);
  int empty_cell = -1;
  const CellGrid g = render_image(e.query);
  for (int j = 0; j < static_cast<int>(g.cells.size()); ++j) {
    if (g.cells[j].empty()) empty_cell = j;
  }
  ASSERT_GE(empty_cell, 0);
  const std::pair<int, float> peak[] = {{t.spans.query_image.begin + empty_cell, 0.9f}};
  for (int h = 0; h < 4; ++h) synthetic::plant_row(trace, 7, h, t.spans.query_last, peak);
  EXPECT_EQ(scripted_responder(t, trace, ResponderRule{}), vocab::kUnknown);
}

TEST(ScriptedResponder, TextOnlyRejected) {
  const auto t = tokenize_episode(assemble_episode(pool(), 2, 0, Modality::text, 0));
  const auto trace = synthetic::uniform_trace(8, 4, t.spans);
  EXPECT_THROW(scripted_responder(t, trace, ResponderRule{}), ConfigError);
}

TEST(ScriptedResponder, MatchesArgmaxOracleUnderUas) {
  Rng rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    const auto e = assemble_episode(pool(), 1 + static_cast<int>(rng.below(3)),
                                    rng.below(pool().size()), Modality::multimodal, trial);
    const auto t = tokenize_episode(e);
    auto trace = synthetic::random_trace(8, 4, t.spans, 1000 + trial, 2.0);
    InterventionSpec uas;
    uas.mode = InterventionMode::uas;
    apply_hook_to_trace(trace, *build_intervention_hook(uas, nullptr, t.spans, 8));

    std::vector<double> mass(t.spans.query_image.size(), 0.0);
    for (int j = 0; j < t.spans.query_image.size(); ++j) {
      for (int h = 0; h < 4; ++h) mass[j] += trace.at(7, h, t.spans.query_last, t.spans.query_image.begin + j);
    }
    const int cell_token = t.tokens[t.spans.query_image.begin + oracle::argmax(mass)];
    int expected = vocab::kUnknown;
    if (cell_token != vocab::kEmptyCell) {
      const int code = cell_token - vocab::kFirstCellCode;
      expected = e.task() == TaskAttribute::shape
                     ? vocab::shape_token(static_cast<Shape>(code / kNumColors))
                     : vocab::color_token(static_cast<Color>(code % kNumColors));
    }
    ASSERT_EQ(scripted_responder(t, trace, ResponderRule{}), expected) << "trial " << trial;
  }
}
