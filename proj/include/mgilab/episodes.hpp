// SPDX-License-Identifier: Apache-2.0
//
// Controlled outlier-detection dataset: scene generation, text and grid
// renderings, evidence-region masks, and n-shot episode assembly.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mgilab {

enum class Shape : std::uint8_t { circle, triangle, square, star };
enum class Color : std::uint8_t {
  yellow, blue, green, red, black, orange, purple, pink, brown, gray
};
enum class TaskAttribute : std::uint8_t { shape, color };
enum class Modality : std::uint8_t { text, multimodal };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 10;

std::string_view to_string(Shape s);
std::string_view to_string(Color c);
std::string_view to_string(TaskAttribute t);
std::string_view to_string(Modality m);
std::optional<Shape> parse_shape(std::string_view word);
std::optional<Color> parse_color(std::string_view word);
TaskAttribute parse_task(std::string_view s);
Modality parse_modality(std::string_view s);

// The fixed label vocabularies, lower case.
std::span<const std::string_view> shape_words();
std::span<const std::string_view> color_words();

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct GridSize {
  int width = 4;
  int height = 4;
  int cells() const { return width * height; }
  int index(Cell c) const { return c.row * width + c.col; }
  friend bool operator==(const GridSize&, const GridSize&) = default;
};

struct ObjectSpec {
  Shape shape = Shape::circle;
  Color color = Color::yellow;
  Cell cell;
  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

struct SceneImage {
  GridSize grid;
  std::vector<ObjectSpec> objects;  // row-major cell order
  std::size_t shape_outlier = 0;
  std::size_t color_outlier = 0;

  // Throws mgilab::Error if a scene invariant is broken.
  void validate() const;
  friend bool operator==(const SceneImage&, const SceneImage&) = default;
};

struct OutlierSample {
  int id = 0;
  SceneImage scene;
  TaskAttribute task = TaskAttribute::shape;
  std::string label;
  std::string question;

  const ObjectSpec& target() const;      // outlier on the task attribute
  const ObjectSpec& distractor() const;  // outlier on the other attribute
  friend bool operator==(const OutlierSample&, const OutlierSample&) = default;
};

inline constexpr std::string_view kQuestion = "Which object is the odd one out?";

struct PoolConfig {
  int count = 2000;
  double shape_fraction = 0.5;
  GridSize grid;
  int min_objects = 4;
  int max_objects = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

std::vector<OutlierSample> generate_pool(const PoolConfig& config);

// "Objects: <color> <shape>, ...\nQuestion: <question>" in row-major order.
std::string render_text(const OutlierSample& sample);
// render_text plus "\nAnswer: <label>".
std::string render_demonstration_text(const OutlierSample& sample);
// Inverse of the object listing in render_text.
std::vector<std::pair<Shape, Color>> parse_text_objects(std::string_view text);

// One cell of a rendered grid; shape/color are -1 for an empty cell.
struct CellCode {
  int shape = -1;
  int color = -1;
  bool empty() const { return shape < 0; }
  friend bool operator==(const CellCode&, const CellCode&) = default;
};

struct CellGrid {
  GridSize grid;
  std::vector<CellCode> cells;  // row-major, grid.cells() entries
};

CellGrid render_image(const OutlierSample& sample);

enum class Evidence : std::uint8_t { irrelevant = 0, correct = 1, false_evidence = 2 };

struct EvidenceMask {
  std::vector<Evidence> cells;  // row-major over the grid
  int count(Evidence e) const;
  friend bool operator==(const EvidenceMask&, const EvidenceMask&) = default;
};

EvidenceMask build_evidence_mask(const OutlierSample& sample);

struct Episode {
  std::vector<OutlierSample> demonstrations;
  OutlierSample query;
  Modality modality = Modality::multimodal;

  int shots() const { return static_cast<int>(demonstrations.size()); }
  TaskAttribute task() const { return query.task; }
  void validate() const;
};

// Draws n same-task demonstrations from `pool` (excluding the query) without
// replacement. The draw order is a deterministic function of (seed, query
// id), so a smaller n yields a prefix of a larger n. Throws
// "pool exhausted" when too few candidates exist.
Episode assemble_episode(std::span<const OutlierSample> pool, int n,
                         std::size_t query_index, Modality modality,
                         std::uint64_t seed);
Episode assemble_episode(std::span<const OutlierSample> support,
                         const OutlierSample& query, int n, Modality modality,
                         std::uint64_t seed);

struct PoolSplit {
  std::vector<OutlierSample> support;
  std::vector<OutlierSample> test;
};

// Disjoint random split into support_size and test_size samples.
PoolSplit split_pool(std::span<const OutlierSample> pool, int support_size,
                     int test_size, std::uint64_t seed);

// Query set of `per_category` samples per task attribute; the remainder of the
// pool becomes the support set.
PoolSplit split_per_category(std::span<const OutlierSample> pool,
                             int per_category, std::uint64_t seed);

}  // namespace mgilab
