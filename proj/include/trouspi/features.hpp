#pragma once

// Feature encoders: skeleton sequences become pseudo-images and pairwise
// joint-distance matrices; bounding boxes and ego speed become standardized
// context streams.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "trouspi/tensor.hpp"

namespace trouspi {

// A pose track clip: `frames` time steps of `joints` key-points with `dims`
// coordinates each, normalized to [0,1] by the frame dimensions.
struct PoseSequence {
  std::size_t frames{0};
  std::size_t joints{0};
  std::size_t dims{0};
  std::vector<double> values;  // [t][j][c] row-major

  double at(std::size_t t, std::size_t j, std::size_t c) const {
    return values[(t * joints + j) * dims + c];
  }
  double& at(std::size_t t, std::size_t j, std::size_t c) {
    return values[(t * joints + j) * dims + c];
  }
};

inline PoseSequence make_pose(std::size_t frames, std::size_t joints,
                              std::size_t dims) {
  PoseSequence p;
  p.frames = frames;
  p.joints = joints;
  p.dims = dims;
  p.values.assign(frames * joints * dims, 0.0);
  return p;
}

inline void validate_pose(const PoseSequence& p) {
  require(p.frames > 0 && p.joints > 0 && p.dims > 0,
          "pose sequence has empty axes (frames=", p.frames,
          ", joints=", p.joints, ", dims=", p.dims, ")");
  require(p.values.size() == p.frames * p.joints * p.dims,
          "pose sequence value buffer has ", p.values.size(),
          " entries, expected ", p.frames * p.joints * p.dims);
  for (double v : p.values)
    require(std::isfinite(v), "pose sequence contains a non-finite coordinate");
}

// Identity re-layout of the pose clip into a frames x joints x dims tensor:
// rows are time, columns are key-points, channels are coordinates.
inline Tensor encode_pseudo_image(const PoseSequence& p) {
  validate_pose(p);
  return Tensor::from({p.frames, p.joints, p.dims}, p.values);
}

// Inverse of encode_pseudo_image; the pair is a bijection.
inline PoseSequence decode_pseudo_image(const Tensor& img) {
  require(img.ndim() == 3, "pseudo-image must be 3-D, got shape ",
          shape_str(img.shape()));
  PoseSequence p;
  p.frames = img.shape()[0];
  p.joints = img.shape()[1];
  p.dims = img.shape()[2];
  p.values = img.data();
  return p;
}

// Channels-first view (dims x frames x joints) for convolution stacks.
inline Tensor pseudo_image_channels_first(const PoseSequence& p) {
  validate_pose(p);
  std::vector<double> out(p.values.size());
  for (std::size_t c = 0; c < p.dims; ++c)
    for (std::size_t t = 0; t < p.frames; ++t)
      for (std::size_t j = 0; j < p.joints; ++j)
        out[(c * p.frames + t) * p.joints + j] = p.at(t, j, c);
  return Tensor::from({p.dims, p.frames, p.joints}, out);
}

inline std::size_t jcd_pair_count(std::size_t joints) {
  return joints * (joints - 1) / 2;
}

// Per-frame pairwise Euclidean distances between key-points, pairs ordered
// lexicographically (j < k). Shape: frames x C(joints, 2).
inline Tensor jcd(const PoseSequence& p) {
  validate_pose(p);
  std::size_t pairs = jcd_pair_count(p.joints);
  std::vector<double> out(p.frames * pairs);
  for (std::size_t t = 0; t < p.frames; ++t) {
    std::size_t col = 0;
    for (std::size_t j = 0; j < p.joints; ++j)
      for (std::size_t k = j + 1; k < p.joints; ++k, ++col) {
        double acc = 0.0;
        for (std::size_t c = 0; c < p.dims; ++c) {
          double d = p.at(t, j, c) - p.at(t, k, c);
          acc += d * d;
        }
        out[t * pairs + col] = std::sqrt(acc);
      }
  }
  return Tensor::from({p.frames, pairs}, out);
}

// Per-frame scene context: pedestrian bounding box corners (normalized) and
// optional ego-vehicle speed.
struct ContextFeatures {
  std::size_t frames{0};
  std::vector<double> boxes;  // frames x 4: x1, y1, x2, y2
  std::vector<double> speed;  // frames x 1 when speed_present
  bool speed_present{true};
};

inline void validate_context(const ContextFeatures& c) {
  require(c.frames > 0, "context features have zero frames");
  require(c.boxes.size() == c.frames * 4, "context boxes buffer has ",
          c.boxes.size(), " entries, expected ", c.frames * 4);
  for (double v : c.boxes)
    require(std::isfinite(v), "context boxes contain a non-finite value");
  for (std::size_t t = 0; t < c.frames; ++t) {
    require(c.boxes[t * 4 + 0] <= c.boxes[t * 4 + 2],
            "box corner order violated at frame ", t, ": x1 > x2");
    require(c.boxes[t * 4 + 1] <= c.boxes[t * 4 + 3],
            "box corner order violated at frame ", t, ": y1 > y2");
  }
  if (c.speed_present) {
    require(c.speed.size() == c.frames, "context speed buffer has ",
            c.speed.size(), " entries, expected ", c.frames);
    for (double v : c.speed)
      require(std::isfinite(v), "context speed contains a non-finite value");
  }
}

// Train-split statistics for z-scoring the standardized context features.
struct ContextStats {
  double speed_mean{0.0};
  double speed_std{1.0};
};

// Z-scores the speed stream with train-split statistics; boxes stay in
// normalized coordinates. Absent speed passes through untouched.
inline ContextFeatures standardize_context(const ContextFeatures& c,
                                           const ContextStats& stats) {
  validate_context(c);
  ContextFeatures out = c;
  if (!c.speed_present) return out;
  require(stats.speed_std > 0.0,
          "standardize_context: feature 'speed' has non-positive std (",
          stats.speed_std, ")");
  for (auto& v : out.speed) v = (v - stats.speed_mean) / stats.speed_std;
  return out;
}

inline Tensor boxes_tensor(const ContextFeatures& c) {
  return Tensor::from({c.frames, 4}, c.boxes);
}

inline Tensor speed_tensor(const ContextFeatures& c) {
  require(c.speed_present, "speed stream requested but marked absent");
  return Tensor::from({c.frames, 1}, c.speed);
}

}  // namespace trouspi
