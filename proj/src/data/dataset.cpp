// SPDX-License-Identifier: Apache-2.0
#include "dprob/data/dataset.hpp"

#include "json.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace dprob {

using nlohmann::json;
namespace fs = std::filesystem;

int ProtocolSpec::total_classes() const {
  int m = 0;
  for (const auto& g : class_groups)
    for (int c : g) m = std::max(m, c + 1);
  return m;
}

void ProtocolSpec::validate() const {
  scene.validate();
  if (class_groups.empty()) throw std::invalid_argument("protocol.class_groups must not be empty");
  std::set<int> seen;
  for (const auto& g : class_groups) {
    if (g.empty()) throw std::invalid_argument("protocol.class_groups: empty class group");
    for (int c : g) {
      if (c < 0) throw std::invalid_argument("protocol.class_groups: negative class id");
      if (!seen.insert(c).second) throw std::invalid_argument("protocol.class_groups: class " + std::to_string(c) + " appears in two groups");
    }
  }
  std::set<int> styled;
  for (const auto& s : scene.classes) styled.insert(s.class_id);
  if (styled != seen) throw std::invalid_argument("protocol: scene classes must equal the union of class groups");
  if (train_scenes < 0 || val_scenes < 0 || test_scenes < 0) throw std::invalid_argument("protocol: scene counts must be >= 0");
}

std::vector<TaskSpec> build_task_splits(const ProtocolSpec& protocol) {
  protocol.validate();
  std::vector<TaskSpec> tasks;
  std::vector<int> known;
  const int num_tasks = static_cast<int>(protocol.class_groups.size());
  for (int t = 1; t <= num_tasks; ++t) {
    TaskSpec task;
    task.task_id = t;
    task.previous_classes = known;
    task.introduced_classes = protocol.class_groups[static_cast<std::size_t>(t - 1)];
    std::sort(task.introduced_classes.begin(), task.introduced_classes.end());
    known.insert(known.end(), task.introduced_classes.begin(), task.introduced_classes.end());
    std::sort(known.begin(), known.end());
    task.known_classes = known;
    for (int u = t + 1; u <= num_tasks; ++u)
      for (int c : protocol.class_groups[static_cast<std::size_t>(u - 1)]) task.unknown_classes.push_back(c);
    std::sort(task.unknown_classes.begin(), task.unknown_classes.end());

    auto make = [&](const char* split, int split_index, int count, bool filter) {
      std::vector<Scene> out;
      for (int i = 0; i < count; ++i) {
        Scene s;
        for (std::uint64_t retry = 0;; ++retry) {
          s = generate_scene(protocol.scene, derive_seed(protocol.seed, static_cast<std::uint64_t>(t),
                                                         static_cast<std::uint64_t>(split_index),
                                                         static_cast<std::uint64_t>(i) + (retry << 32)));
          if (!filter) break;
          std::erase_if(s.annotations, [&](const Annotation& a) {
            return !std::binary_search(task.introduced_classes.begin(), task.introduced_classes.end(), a.class_id);
          });
          if (!s.annotations.empty()) break;
          if (retry > 10000) throw std::runtime_error("build_task_splits: no scene with an introduced class");
        }
        char id[64];
        std::snprintf(id, sizeof id, "t%d_%s_%04d", t, split, i);
        s.scene_id = id;
        out.push_back(std::move(s));
      }
      return out;
    };
    task.train = make("train", 0, protocol.train_scenes, true);
    task.val = make("val", 1, protocol.val_scenes, false);
    task.test = make("test", 2, protocol.test_scenes, false);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

const TaskSpec& Dataset::task(int task_id) const {
  for (const auto& t : tasks)
    if (t.task_id == task_id) return t;
  throw DataError("dataset has no task " + std::to_string(task_id));
}

// ---------------------------------------------------------------------------
// PNG and checksums

void write_png_gray(const fs::path& path, const Matrix<float>& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.cols());
  img.height = static_cast<png_uint_32>(image.rows());
  img.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> bytes(static_cast<std::size_t>(image.size()));
  for (Index y = 0; y < image.rows(); ++y)
    for (Index x = 0; x < image.cols(); ++x)
      bytes[static_cast<std::size_t>(y * image.cols() + x)] =
          static_cast<png_byte>(std::lround(std::clamp(image(y, x), 0.0f, 1.0f) * 255.0f));
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    throw std::runtime_error("cannot write " + path.string() + ": " + img.message);
}

Matrix<float> read_png_gray(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing image file " + path.string());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw DataError("cannot read " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr))
    throw DataError("cannot decode " + path.string() + ": " + img.message);
  Matrix<float> m(img.height, img.width);
  for (Index y = 0; y < m.rows(); ++y)
    for (Index x = 0; x < m.cols(); ++x)
      m(y, x) = static_cast<float>(bytes[static_cast<std::size_t>(y * m.cols() + x)]) / 255.0f;
  return m;
}

std::uint32_t crc32_bytes(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

std::uint32_t crc32_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return crc32_bytes(ss.str());
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json protocol_json(const ProtocolSpec& p) {
  json classes = json::array();
  for (const auto& c : p.scene.classes) classes.push_back({{"class", c.class_id}, {"shape", to_string(c.shape)}});
  return {{"class_groups", p.class_groups},
          {"train_scenes", p.train_scenes},
          {"val_scenes", p.val_scenes},
          {"test_scenes", p.test_scenes},
          {"seed", p.seed},
          {"scene",
           {{"image_size", p.scene.image_size},
            {"classes", classes},
            {"min_size", p.scene.min_size},
            {"max_size", p.scene.max_size},
            {"min_count", p.scene.min_count},
            {"max_count", p.scene.max_count},
            {"noise", p.scene.noise},
            {"min_intensity", p.scene.min_intensity},
            {"max_iou", p.scene.max_iou},
            {"max_attempts", p.scene.max_attempts}}}};
}

ProtocolSpec protocol_from_json(const json& j) {
  ProtocolSpec p;
  p.class_groups = j.at("class_groups").get<std::vector<std::vector<int>>>();
  p.train_scenes = j.at("train_scenes").get<int>();
  p.val_scenes = j.at("val_scenes").get<int>();
  p.test_scenes = j.at("test_scenes").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  const json& s = j.at("scene");
  p.scene.image_size = s.at("image_size").get<int>();
  p.scene.classes.clear();
  for (const auto& c : s.at("classes")) p.scene.classes.push_back({c.at("class").get<int>(), shape_from_string(c.at("shape").get<std::string>())});
  p.scene.min_size = s.at("min_size").get<int>();
  p.scene.max_size = s.at("max_size").get<int>();
  p.scene.min_count = s.at("min_count").get<int>();
  p.scene.max_count = s.at("max_count").get<int>();
  p.scene.noise = s.at("noise").get<double>();
  p.scene.min_intensity = s.at("min_intensity").get<double>();
  p.scene.max_iou = s.at("max_iou").get<double>();
  p.scene.max_attempts = s.at("max_attempts").get<int>();
  return p;
}

std::string record_line(const Scene& s, const std::string& image_rel) {
  json objects = json::array();
  for (const auto& a : s.annotations)
    objects.push_back({{"class", a.class_id}, {"box", {a.box(0), a.box(1), a.box(2), a.box(3)}}});
  json rec = {{"scene_id", s.scene_id}, {"image", image_rel}, {"objects", objects}, {"seed", s.seed}};
  return rec.dump();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSplits[] = {"train", "val", "test"};

std::vector<Scene>& split_of(TaskSpec& t, int i) { return i == 0 ? t.train : i == 1 ? t.val : t.test; }
const std::vector<Scene>& split_of(const TaskSpec& t, int i) { return i == 0 ? t.train : i == 1 ? t.val : t.test; }

}  // namespace

void write_dataset(const ProtocolSpec& protocol, const std::vector<TaskSpec>& tasks, const fs::path& root) {
  fs::create_directories(root);
  json top = {{"format", "shapeworld-1"}, {"protocol", protocol_json(protocol)}, {"tasks", json::array()}};
  for (const auto& task : tasks) {
    const std::string dir = "task" + std::to_string(task.task_id);
    fs::create_directories(root / dir / "images");
    json files = json::object();
    json splits = json::object();
    for (int i = 0; i < 3; ++i) {
      std::string lines;
      for (const auto& s : split_of(task, i)) {
        const std::string rel = "images/" + s.scene_id + ".png";
        write_png_gray(root / dir / rel, s.image);
        files[rel] = hex32(crc32_file(root / dir / rel));
        lines += record_line(s, rel) + "\n";
      }
      const std::string name = std::string(kSplits[i]) + ".jsonl";
      write_text(root / dir / name, lines);
      files[name] = hex32(crc32_bytes(lines));
      splits[kSplits[i]] = {{"annotations", name}, {"scenes", split_of(task, i).size()}};
    }
    json manifest = {{"task_id", task.task_id},
                     {"known_classes", task.known_classes},
                     {"introduced_classes", task.introduced_classes},
                     {"previous_classes", task.previous_classes},
                     {"unknown_classes", task.unknown_classes},
                     {"splits", splits},
                     {"checksums", files}};
    write_text(root / dir / "manifest.json", manifest.dump(2) + "\n");
    top["tasks"].push_back(dir + "/manifest.json");
  }
  write_text(root / "manifest.json", top.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& root) {
  const fs::path top_path = root / "manifest.json";
  if (!fs::exists(top_path)) throw DataError("missing manifest: " + top_path.string());
  Dataset ds;
  json top;
  try {
    top = json::parse(read_text(top_path));
    ds.protocol = protocol_from_json(top.at("protocol"));
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + top_path.string() + ": " + e.what());
  }
  const int total_classes = ds.protocol.total_classes();
  std::string hash_input;
  for (const auto& rel : top.at("tasks")) {
    const fs::path mpath = root / rel.get<std::string>();
    if (!fs::exists(mpath)) throw DataError("missing manifest: " + mpath.string());
    const std::string mtext = read_text(mpath);
    hash_input += mtext;
    const fs::path dir = mpath.parent_path();
    TaskSpec task;
    json m;
    try {
      m = json::parse(mtext);
      task.task_id = m.at("task_id").get<int>();
      task.known_classes = m.at("known_classes").get<std::vector<int>>();
      task.introduced_classes = m.at("introduced_classes").get<std::vector<int>>();
      task.previous_classes = m.at("previous_classes").get<std::vector<int>>();
      task.unknown_classes = m.at("unknown_classes").get<std::vector<int>>();
    } catch (const json::exception& e) {
      throw DataError("malformed manifest " + mpath.string() + ": " + e.what());
    }
    const json& sums = m.at("checksums");
    auto expect = [&](const std::string& name, std::uint32_t actual) {
      if (!sums.contains(name)) throw DataError(mpath.string() + ": no checksum for " + name);
      if (sums.at(name).get<std::string>() != hex32(actual))
        throw DataError("checksum mismatch for " + (dir / name).string());
    };
    for (int i = 0; i < 3; ++i) {
      const std::string name = m.at("splits").at(kSplits[i]).at("annotations").get<std::string>();
      if (!fs::exists(dir / name)) throw DataError("missing annotation file " + (dir / name).string());
      const std::string text = read_text(dir / name);
      expect(name, crc32_bytes(text));
      std::istringstream lines(text);
      std::string line;
      int line_no = 0;
      auto& scenes = split_of(task, i);
      while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = (dir / name).string() + ":" + std::to_string(line_no);
        Scene s;
        std::string image_rel;
        try {
          const json rec = json::parse(line);
          s.scene_id = rec.at("scene_id").get<std::string>();
          image_rel = rec.at("image").get<std::string>();
          s.seed = rec.value("seed", std::uint64_t{0});
          for (const auto& o : rec.at("objects")) {
            const auto box = o.at("box").get<std::vector<double>>();
            if (box.size() != 4) throw DataError(where + " (scene " + s.scene_id + "): box needs 4 numbers");
            Annotation a{o.at("class").get<int>(), Box(box[0], box[1], box[2], box[3])};
            validate_annotation(a, total_classes, where + " (scene " + s.scene_id + ")");
            s.annotations.push_back(a);
          }
        } catch (const json::exception& e) {
          throw DataError("malformed record " + where + ": " + e.what());
        } catch (const std::invalid_argument& e) {
          throw DataError(std::string("invalid record ") + e.what());
        }
        const fs::path img = dir / image_rel;
        if (!fs::exists(img)) throw DataError("missing image file " + img.string() + " (scene " + s.scene_id + ")");
        expect(image_rel, crc32_file(img));
        s.image = read_png_gray(img);
        scenes.push_back(std::move(s));
      }
    }
    ds.tasks.push_back(std::move(task));
  }
  ds.hash = hex32(crc32_bytes(hash_input));
  return ds;
}

}  // namespace dprob
