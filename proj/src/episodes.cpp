// SPDX-License-Identifier: Apache-2.0
#include "mgilab/episodes.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mgilab/error.hpp"
#include "mgilab/rng.hpp"

namespace mgilab {

namespace {

constexpr std::array<std::string_view, kNumShapes> kShapeWords = {
    "circle", "triangle", "square", "star"};
constexpr std::array<std::string_view, kNumColors> kColorWords = {
    "yellow", "blue", "green", "red", "black",
    "orange", "purple", "pink", "brown", "gray"};

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string_view to_string(Shape s) { return kShapeWords[static_cast<int>(s)]; }
std::string_view to_string(Color c) { return kColorWords[static_cast<int>(c)]; }
std::string_view to_string(TaskAttribute t) {
  return t == TaskAttribute::shape ? "shape" : "color";
}
std::string_view to_string(Modality m) {
  return m == Modality::text ? "text" : "multimodal";
}

std::optional<Shape> parse_shape(std::string_view word) {
  for (int i = 0; i < kNumShapes; ++i) {
    if (kShapeWords[i] == word) return static_cast<Shape>(i);
  }
  return std::nullopt;
}

std::optional<Color> parse_color(std::string_view word) {
  for (int i = 0; i < kNumColors; ++i) {
    if (kColorWords[i] == word) return static_cast<Color>(i);
  }
  return std::nullopt;
}

TaskAttribute parse_task(std::string_view s) {
  if (s == "shape") return TaskAttribute::shape;
  if (s == "color") return TaskAttribute::color;
  throw ConfigError("unknown task attribute '" + std::string(s) + "'");
}

Modality parse_modality(std::string_view s) {
  if (s == "text") return Modality::text;
  if (s == "multimodal") return Modality::multimodal;
  throw ConfigError("unknown modality '" + std::string(s) + "'");
}

std::span<const std::string_view> shape_words() { return kShapeWords; }
std::span<const std::string_view> color_words() { return kColorWords; }

void SceneImage::validate() const {
  if (grid.width <= 0 || grid.height <= 0) throw Error("invalid grid");
  if (objects.size() < 4) throw Error("scene needs at least 4 objects");
  std::vector<int> occupied(grid.cells(), 0);
  for (const auto& o : objects) {
    if (o.cell.row < 0 || o.cell.row >= grid.height || o.cell.col < 0 ||
        o.cell.col >= grid.width) {
      throw Error("object outside grid");
    }
    if (occupied[grid.index(o.cell)]++) throw Error("two objects in one cell");
  }
  if (shape_outlier >= objects.size() || color_outlier >= objects.size()) {
    throw Error("outlier index out of range");
  }
  if (shape_outlier == color_outlier) throw Error("outliers must be distinct objects");
  const auto& majority_ref = objects[shape_outlier == 0 ? 1 : 0];
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const bool shape_major = objects[i].shape == majority_ref.shape;
    if (i == shape_outlier ? shape_major : !shape_major) throw Error("shape outlier is not unique");
  }
  const auto& color_ref = objects[color_outlier == 0 ? 1 : 0];
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const bool color_major = objects[i].color == color_ref.color;
    if (i == color_outlier ? color_major : !color_major) throw Error("color outlier is not unique");
  }
}

const ObjectSpec& OutlierSample::target() const {
  return scene.objects[task == TaskAttribute::shape ? scene.shape_outlier
                                                    : scene.color_outlier];
}

const ObjectSpec& OutlierSample::distractor() const {
  return scene.objects[task == TaskAttribute::shape ? scene.color_outlier
                                                    : scene.shape_outlier];
}

void PoolConfig::validate() const {
  if (count < 2) throw ConfigError("pool count must be >= 2");
  if (!(shape_fraction >= 0.0 && shape_fraction <= 1.0)) {
    throw ConfigError("shape_fraction must lie in [0, 1]");
  }
  if (grid.width <= 0 || grid.height <= 0) throw ConfigError("grid overflow");
  if (min_objects < 4 || max_objects < min_objects) {
    throw ConfigError("object count range must satisfy 4 <= min <= max");
  }
  if (max_objects > grid.cells()) throw ConfigError("grid overflow");
}

namespace {

OutlierSample make_sample(const PoolConfig& config, int id, TaskAttribute task) {
  Rng rng(config.seed, static_cast<std::uint64_t>(id));
  const int n = rng.uniform_int(config.min_objects, config.max_objects);

  std::vector<int> cells(config.grid.cells());
  std::iota(cells.begin(), cells.end(), 0);
  rng.shuffle(std::span<int>(cells));
  cells.resize(n);
  std::sort(cells.begin(), cells.end());

  const auto major_shape = static_cast<Shape>(rng.below(kNumShapes));
  auto minor_shape = static_cast<Shape>(rng.below(kNumShapes - 1));
  if (minor_shape >= major_shape) minor_shape = static_cast<Shape>(static_cast<int>(minor_shape) + 1);
  const auto major_color = static_cast<Color>(rng.below(kNumColors));
  auto minor_color = static_cast<Color>(rng.below(kNumColors - 1));
  if (minor_color >= major_color) minor_color = static_cast<Color>(static_cast<int>(minor_color) + 1);

  const auto shape_idx = static_cast<std::size_t>(rng.below(n));
  auto color_idx = static_cast<std::size_t>(rng.below(n - 1));
  if (color_idx >= shape_idx) ++color_idx;

  OutlierSample s;
  s.id = id;
  s.task = task;
  s.question = std::string(kQuestion);
  s.scene.grid = config.grid;
  s.scene.shape_outlier = shape_idx;
  s.scene.color_outlier = color_idx;
  for (int i = 0; i < n; ++i) {
    ObjectSpec o;
    o.cell = Cell{cells[i] / config.grid.width, cells[i] % config.grid.width};
    o.shape = static_cast<std::size_t>(i) == shape_idx ? minor_shape : major_shape;
    o.color = static_cast<std::size_t>(i) == color_idx ? minor_color : major_color;
    s.scene.objects.push_back(o);
  }
  s.label = std::string(task == TaskAttribute::shape ? to_string(minor_shape)
                                                     : to_string(minor_color));
  return s;
}

}  // namespace

std::vector<OutlierSample> generate_pool(const PoolConfig& config) {
  config.validate();
  const int shape_count = static_cast<int>(std::llround(config.count * config.shape_fraction));
  std::vector<TaskAttribute> tasks(config.count, TaskAttribute::color);
  std::fill_n(tasks.begin(), shape_count, TaskAttribute::shape);
  Rng order(config.seed, 0xfeedULL);
  order.shuffle(std::span<TaskAttribute>(tasks));

  std::vector<OutlierSample> pool;
  pool.reserve(config.count);
  for (int i = 0; i < config.count; ++i) pool.push_back(make_sample(config, i, tasks[i]));
  return pool;
}

std::string render_text(const OutlierSample& sample) {
  std::string out = "Objects:";
  bool first = true;
  for (const auto& o : sample.scene.objects) {
    out += first ? " " : ", ";
    first = false;
    out += to_string(o.color);
    out += ' ';
    out += to_string(o.shape);
  }
  out += "\nQuestion: ";
  out += sample.question;
  return out;
}

std::string render_demonstration_text(const OutlierSample& sample) {
  return render_text(sample) + "\nAnswer: " + sample.label;
}

std::vector<std::pair<Shape, Color>> parse_text_objects(std::string_view text) {
  constexpr std::string_view kPrefix = "Objects:";
  const auto start = text.find(kPrefix);
  if (start == std::string_view::npos) throw Error("no object listing");
  std::string_view rest = text.substr(start + kPrefix.size());
  rest = rest.substr(0, rest.find('\n'));

  std::vector<std::pair<Shape, Color>> objects;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view item = trim(rest.substr(0, comma));
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    if (item.empty()) continue;
    const auto space = item.find(' ');
    if (space == std::string_view::npos) throw Error("malformed object '" + std::string(item) + "'");
    const auto color = parse_color(trim(item.substr(0, space)));
    const auto shape = parse_shape(trim(item.substr(space + 1)));
    if (!color || !shape) throw Error("malformed object '" + std::string(item) + "'");
    objects.emplace_back(*shape, *color);
  }
  return objects;
}

CellGrid render_image(const OutlierSample& sample) {
  CellGrid g;
  g.grid = sample.scene.grid;
  g.cells.assign(g.grid.cells(), CellCode{});
  for (const auto& o : sample.scene.objects) {
    g.cells[g.grid.index(o.cell)] = CellCode{static_cast<int>(o.shape), static_cast<int>(o.color)};
  }
  return g;
}

int EvidenceMask::count(Evidence e) const {
  return static_cast<int>(std::count(cells.begin(), cells.end(), e));
}

EvidenceMask build_evidence_mask(const OutlierSample& sample) {
  const auto& grid = sample.scene.grid;
  EvidenceMask mask;
  mask.cells.assign(grid.cells(), Evidence::irrelevant);
  mask.cells[grid.index(sample.distractor().cell)] = Evidence::false_evidence;
  mask.cells[grid.index(sample.target().cell)] = Evidence::correct;
  return mask;
}

void Episode::validate() const {
  for (const auto& d : demonstrations) {
    if (d.task != query.task) throw Error("demonstrations must share the query task");
    if (d.id == query.id) throw Error("query appears among demonstrations");
  }
}

Episode assemble_episode(std::span<const OutlierSample> support,
                         const OutlierSample& query, int n, Modality modality,
                         std::uint64_t seed) {
  if (n < 0) throw ConfigError("shot count must be >= 0");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < support.size(); ++i) {
    if (support[i].task == query.task && support[i].id != query.id) candidates.push_back(i);
  }
  if (candidates.size() < static_cast<std::size_t>(n)) throw Error("pool exhausted");
  Rng rng(seed, static_cast<std::uint64_t>(query.id) + 0x51ed27ULL);
  rng.shuffle(std::span<std::size_t>(candidates));

  Episode e;
  e.query = query;
  e.modality = modality;
  for (int i = 0; i < n; ++i) e.demonstrations.push_back(support[candidates[i]]);
  return e;
}

Episode assemble_episode(std::span<const OutlierSample> pool, int n,
                         std::size_t query_index, Modality modality,
                         std::uint64_t seed) {
  if (query_index >= pool.size()) throw ConfigError("query index out of range");
  return assemble_episode(pool, pool[query_index], n, modality, seed);
}

PoolSplit split_pool(std::span<const OutlierSample> pool, int support_size,
                     int test_size, std::uint64_t seed) {
  if (support_size < 0 || test_size < 0 ||
      static_cast<std::size_t>(support_size) + test_size > pool.size()) {
    throw ConfigError("split larger than pool");
  }
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, 0x5911ULL);
  rng.shuffle(std::span<std::size_t>(idx));
  PoolSplit s;
  for (int i = 0; i < support_size; ++i) s.support.push_back(pool[idx[i]]);
  for (int i = 0; i < test_size; ++i) s.test.push_back(pool[idx[support_size + i]]);
  return s;
}

PoolSplit split_per_category(std::span<const OutlierSample> pool,
                             int per_category, std::uint64_t seed) {
  if (per_category < 0) throw ConfigError("per-category size must be >= 0");
  std::vector<std::size_t> by_task[2];
  for (std::size_t i = 0; i < pool.size(); ++i) by_task[static_cast<int>(pool[i].task)].push_back(i);
  std::vector<bool> in_test(pool.size(), false);
  Rng rng(seed, 0xca7ULL);
  for (auto& group : by_task) {
    if (group.size() < static_cast<std::size_t>(per_category)) {
      throw ConfigError("split larger than pool");
    }
    rng.shuffle(std::span<std::size_t>(group));
    for (int i = 0; i < per_category; ++i) in_test[group[i]] = true;
  }
  PoolSplit s;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    (in_test[i] ? s.test : s.support).push_back(pool[i]);
  }
  return s;
}

}  // namespace mgilab
