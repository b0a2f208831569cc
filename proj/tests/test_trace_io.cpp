// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "mgilab/error.hpp"
#include "mgilab/mgi.hpp"
#include "mgilab/synthetic.hpp"
#include "mgilab/trace_io.hpp"

using namespace mgilab;
namespace fs = std::filesystem;

namespace {

struct TraceIoTest : ::testing::Test {
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("mgilab_trace_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    PoolConfig c;
    c.count = 60;
    pool = generate_pool(c);
    episode = assemble_episode(pool, 3, 0, Modality::multimodal, 1);
    tokens = tokenize_episode(episode);
  }
  void TearDown() override { fs::remove_all(dir); }

  fs::path dir;
  std::vector<OutlierSample> pool;
  Episode episode;
  TokenizedEpisode tokens;
};

}  // namespace

TEST_F(TraceIoTest, RoundTripIsBitExact) {
  const auto trace = synthetic::random_trace(4, 2, tokens.spans, 5, 2.0);
  TraceAnnotations notes;
  for (const auto& d : episode.demonstrations) notes.demo_masks.push_back(build_evidence_mask(d));
  notes.query_mask = build_evidence_mask(episode.query);
  notes.outcome = "error_pred";
  notes.task = episode.task();
  write_trace(dir / "t.json", trace, notes);
  EXPECT_TRUE(fs::exists(dir / "t.bin"));
  EXPECT_EQ(fs::file_size(dir / "t.bin"), trace.data().size() * 4);

  const TraceFile back = read_trace(dir / "t.json");
  ASSERT_EQ(back.trace.data().size(), trace.data().size());
  EXPECT_EQ(std::memcmp(back.trace.data().data(), trace.data().data(), trace.data().size() * 4), 0);
  EXPECT_EQ(back.trace.spans(), trace.spans());
  EXPECT_EQ(back.annotations.demo_masks, notes.demo_masks);
  EXPECT_EQ(back.annotations.query_mask, notes.query_mask);
  EXPECT_EQ(back.annotations.outcome, "error_pred");
  EXPECT_EQ(back.annotations.task, episode.task());
}

TEST_F(TraceIoTest, PayloadIsLittleEndianF32) {
  write_f32_le(dir / "v.bin", std::vector<float>{1.0f, -2.5f});
  std::ifstream in(dir / "v.bin", std::ios::binary);
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  // 1.0f = 0x3f800000, -2.5f = 0xc0200000
  EXPECT_EQ(b[0], 0x00);
  EXPECT_EQ(b[3], 0x3f);
  EXPECT_EQ(b[2], 0x80);
  EXPECT_EQ(b[7], 0xc0);
  EXPECT_EQ(b[6], 0x20);
  EXPECT_EQ(read_f32_le(dir / "v.bin"), (std::vector<float>{1.0f, -2.5f}));
}

TEST_F(TraceIoTest, MalformedManifestNamesPath) {
  std::ofstream(dir / "bad.json") << "{\"format\": \"mgilab-trace\", \"L\": ";
  try {
    read_trace(dir / "bad.json");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json"), std::string::npos);
  }
}

TEST_F(TraceIoTest, TruncatedPayloadRejected) {
  const auto trace = synthetic::uniform_trace(2, 2, tokens.spans);
  write_trace(dir / "t.json", trace);
  fs::resize_file(dir / "t.bin", fs::file_size(dir / "t.bin") - 8);
  EXPECT_THROW(read_trace(dir / "t.json"), DataError);
}

TEST_F(TraceIoTest, TaskMappingExport) {
  auto trace = synthetic::uniform_trace(4, 2, tokens.spans);
  synthetic::plant_label_grounding(trace, episode, 2, 1.0f);
  const TaskMapping m = estimate_task_mapping(trace, tokens.spans);
  write_task_mapping(dir / "mapping.json", m);
  const auto values = read_f32_le(dir / "mapping.bin");
  EXPECT_EQ(values.size(), 3u * 2u * 16u);
  std::ifstream in(dir / "mapping.json");
  const auto manifest = nlohmann::json::parse(in);
  EXPECT_EQ(manifest.at("peak_layer"), 2);
}

TEST_F(TraceIoTest, AtomicWriteLeavesNoTemporary) {
  write_file_atomic(dir / "out.txt", "hello");
  int files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1);
}
