#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "uvp/common.hpp"
#include "uvp/tensor.hpp"

namespace uvp {

// The six perception tasks plus the reserved generative-pretraining prompt.
enum class Task : int {
  Depth = 0,
  Normal = 1,
  Segmentation = 2,
  Semantics = 3,
  Kp2d = 4,
  Kp3d = 5,
  Generate = 6,
};

inline constexpr int kPerceptionTaskCount = 6;
inline constexpr int kTaskCount = 7;  // including "generate"

inline const std::array<std::string, kTaskCount>& task_names() {
  static const std::array<std::string, kTaskCount> names = {
      "depth", "normal", "segmentation", "semantics", "kp2d", "kp3d", "generate"};
  return names;
}

inline const std::string& task_name(Task t) {
  return task_names()[static_cast<size_t>(t)];
}

inline Task parse_task(const std::string& name) {
  const auto& names = task_names();
  for (int i = 0; i < kTaskCount; ++i)
    if (names[static_cast<size_t>(i)] == name) return static_cast<Task>(i);
  std::string valid;
  for (int i = 0; i < kTaskCount; ++i) valid += (i ? ", " : "") + names[static_cast<size_t>(i)];
  throw ConfigError("unknown task '" + name + "'; valid tasks: " + valid);
}

inline bool is_dense(Task t) {
  return t == Task::Depth || t == Task::Normal || t == Task::Segmentation ||
         t == Task::Semantics;
}

inline bool is_keypoint(Task t) { return t == Task::Kp2d || t == Task::Kp3d; }

inline std::vector<Task> perception_tasks() {
  return {Task::Depth, Task::Normal, Task::Segmentation, Task::Semantics,
          Task::Kp2d, Task::Kp3d};
}

// Dense tasks in the unified 3-channel ambient representation.
struct ModalityVideo {
  Task task = Task::Depth;
  Tensor values;  // T,H,W,3 in [0,1]
  // depth only: the per-video disparity min/max used for normalization
  double disp_min = 0.0, disp_max = 1.0;
};

enum class KeypointSpace { NormalizedImage, RootRelativeCamera };

struct KeypointSet {
  Task task = Task::Kp2d;
  KeypointSpace space = KeypointSpace::NormalizedImage;
  Tensor coords;                 // T,K,2 or T,K,3
  std::vector<uint8_t> visibility;  // T*K; 2d only, empty otherwise

  int64_t frames() const { return coords.dim(0); }
  int64_t joints() const { return coords.dim(1); }
};

// What a model (or the gt-backed oracle) produces for one clip and task.
struct PredictOutput {
  std::optional<ModalityVideo> video;
  std::optional<KeypointSet> keypoints;
};

}  // namespace uvp
