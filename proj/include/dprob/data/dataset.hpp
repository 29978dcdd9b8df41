// SPDX-License-Identifier: Apache-2.0
//
// Incremental task splits over shape-world scenes, and their on-disk form:
// 8-bit PNG images, JSON-lines annotations and one manifest per task.
#pragma once

#include "dprob/data/shapeworld.hpp"
#include "dprob/model/detection.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dprob {

struct ProtocolSpec {
  /// Classes introduced at task 1, 2, ...
  std::vector<std::vector<int>> class_groups = {{0, 1}, {2, 3}, {4, 5}};
  int train_scenes = 600;
  int val_scenes = 100;
  int test_scenes = 200;
  std::uint64_t seed = 0;
  SceneSpec scene = default_scene_spec();

  int total_classes() const;
  void validate() const;
};

struct TaskSpec {
  int task_id = 1;
  std::vector<int> known_classes;       ///< K^t, ascending
  std::vector<int> introduced_classes;  ///< new at task t
  std::vector<int> previous_classes;    ///< K^{t-1}
  std::vector<int> unknown_classes;     ///< U^t
  std::vector<Scene> train, val, test;

  TaskView view(int total_classes) const { return TaskView{known_classes, total_classes}; }
};

/// Builds every task: train annotations keep only the introduced classes and
/// every train scene holds at least one of them; val and test keep everything.
std::vector<TaskSpec> build_task_splits(const ProtocolSpec& protocol);

struct Dataset {
  ProtocolSpec protocol;
  std::vector<TaskSpec> tasks;
  /// CRC-32 over every task manifest, hex.
  std::string hash;

  const TaskSpec& task(int task_id) const;
};

void write_dataset(const ProtocolSpec& protocol, const std::vector<TaskSpec>& tasks, const std::filesystem::path& root);

/// Throws DataError on a missing manifest, malformed record, missing image or
/// checksum mismatch.
Dataset load_dataset(const std::filesystem::path& root);

void write_png_gray(const std::filesystem::path& path, const Matrix<float>& image);
Matrix<float> read_png_gray(const std::filesystem::path& path);

std::uint32_t crc32_file(const std::filesystem::path& path);
std::uint32_t crc32_bytes(const std::string& bytes);
std::string hex32(std::uint32_t v);

/// Annotations on the unknown classes of a task view.
inline bool is_unknown_class(const TaskView& view, int class_id) { return view.column_of(class_id) < 0; }

}  // namespace dprob
