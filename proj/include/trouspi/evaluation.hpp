#pragma once

// Classification metrics with an exact trapezoidal AUC, the benchmark
// observation-window protocol, and eval-mode dataset evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trouspi/data.hpp"
#include "trouspi/model.hpp"

namespace trouspi {

struct Metrics {
  std::int64_t tp{0}, fp{0}, tn{0}, fn{0};
  double acc{0}, precision{0}, recall{0}, f1{0};
  std::optional<double> auc;  // unset when only one class is present
};

// Exact area under the ROC curve: integer trapezoid accumulation over the
// distinct-threshold sweep, which equals the pairwise ranking statistic
// (ties counted half) with no floating-point drift.
inline double auc_exact(std::vector<std::pair<double, int>> scores) {
  std::int64_t total_pos = 0, total_neg = 0;
  for (const auto& [p, y] : scores) (y ? total_pos : total_neg)++;
  require(total_pos > 0 && total_neg > 0,
          "AUC undefined: input contains only one class (", total_pos,
          " positive, ", total_neg, " negative)");

  std::sort(scores.begin(), scores.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  // Sweep thresholds from high to low; each group of tied scores contributes
  // one ROC segment. twice_area accumulates delta_fp * (tp_before + tp_after).
  std::int64_t twice_area = 0, tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < scores.size()) {
    std::size_t j = i;
    std::int64_t gp = 0, gn = 0;
    while (j < scores.size() && scores[j].first == scores[i].first) {
      (scores[j].second ? gp : gn)++;
      ++j;
    }
    twice_area += gn * (2 * tp + gp);
    tp += gp;
    fp += gn;
    i = j;
  }
  return static_cast<double>(twice_area) /
         (2.0 * static_cast<double>(total_pos) * static_cast<double>(total_neg));
}

// Thresholded counts plus ranking AUC. Scores are (probability, label) pairs;
// predictions use p >= threshold. With a single class present every other
// metric is still computed and auc is left unset (auc_exact raises instead).
inline Metrics metrics(const std::vector<std::pair<double, int>>& scores,
                       double threshold = 0.5) {
  require(!scores.empty(), "metrics: empty score list");
  Metrics m;
  for (const auto& [p, y] : scores) {
    bool pred = p >= threshold;
    if (pred && y == 1)
      m.tp++;
    else if (pred && y == 0)
      m.fp++;
    else if (!pred && y == 0)
      m.tn++;
    else
      m.fn++;
  }
  double total = static_cast<double>(scores.size());
  m.acc = static_cast<double>(m.tp + m.tn) / total;
  m.precision =
      m.tp + m.fp > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall =
      m.tp + m.fn > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  bool both = (m.tp + m.fn) > 0 && (m.fp + m.tn) > 0;
  if (both) m.auc = auc_exact(scores);
  return m;
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
  nlohmann::json j{{"acc", m.acc},     {"f1", m.f1}, {"precision", m.precision},
                   {"recall", m.recall}, {"tp", m.tp}, {"fp", m.fp},
                   {"tn", m.tn},         {"fn", m.fn}};
  if (m.auc)
    j["auc"] = *m.auc;
  else
    j["auc"] = nullptr;
  return j;
}

// Observation-window protocol: windows of m frames whose last frame falls
// 1-2 seconds before the crossing event (event tracks), or stride-spaced
// windows ending at least m frames before track end (non-event tracks).
struct WindowSpec {
  double fps{30.0};
  std::size_t m{16};
  double tte_min_s{1.0};
  double tte_max_s{2.0};
  std::size_t stride{8};
};

inline void validate_window_spec(const WindowSpec& s) {
  require(s.m >= 1, "window spec: m must be >= 1");
  require(s.fps > 0, "window spec: fps must be positive");
  require(s.tte_min_s < s.tte_max_s,
          "window spec: tte_min must be below tte_max");
  require(s.stride >= 1, "window spec: stride must be >= 1");
}

inline nlohmann::json window_spec_to_json(const WindowSpec& s) {
  return nlohmann::json{{"fps", s.fps},
                        {"m", s.m},
                        {"tte_min_s", s.tte_min_s},
                        {"tte_max_s", s.tte_max_s},
                        {"stride", s.stride}};
}

inline WindowSpec window_spec_from_json(const nlohmann::json& j) {
  WindowSpec s;
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  get("fps", s.fps);
  get("m", s.m);
  get("tte_min_s", s.tte_min_s);
  get("tte_max_s", s.tte_max_s);
  get("stride", s.stride);
  validate_window_spec(s);
  return s;
}

namespace detail {

inline WindowSample cut_window(const TrackRecord& t, std::size_t t_last,
                               std::size_t m) {
  WindowSample s;
  std::size_t n = t.frames[0].keypoints.size();
  std::size_t start = t_last + 1 - m;
  s.pose = make_pose(m, n, 2);
  s.context.frames = m;
  s.context.boxes.resize(m * 4);
  s.context.speed_present = true;
  for (std::size_t f = 0; f < m; ++f) {
    const FrameRecord& fr = t.frames[start + f];
    for (std::size_t j = 0; j < n; ++j) {
      s.pose.at(f, j, 0) = fr.keypoints[j][0];
      s.pose.at(f, j, 1) = fr.keypoints[j][1];
    }
    for (int c = 0; c < 4; ++c) s.context.boxes[f * 4 + c] = fr.bbox[c];
    if (!fr.ego_speed) s.context.speed_present = false;
  }
  if (s.context.speed_present) {
    s.context.speed.resize(m);
    for (std::size_t f = 0; f < m; ++f)
      s.context.speed[f] = *t.frames[start + f].ego_speed;
  }
  s.label = t.label;
  return s;
}

}  // namespace detail

inline std::vector<WindowSample> sample_windows(const TrackRecord& t,
                                                const WindowSpec& spec) {
  validate_window_spec(spec);
  std::vector<WindowSample> out;
  std::size_t m = spec.m;
  std::size_t len = t.frames.size();
  if (len < m) return out;  // too short: logged by callers, not fatal

  if (t.label == 1) {
    require(t.event_frame.has_value(), "windows: event track '", t.track_id,
            "' lacks an event frame");
    auto e = static_cast<long>(*t.event_frame);
    long tte_min = std::lround(spec.fps * spec.tte_min_s);
    long tte_max = std::lround(spec.fps * spec.tte_max_s);
    long lo = std::max(static_cast<long>(m) - 1, e - tte_max);
    long hi = std::min(static_cast<long>(len) - 1, e - tte_min);
    for (long t_last = lo; t_last <= hi;
         t_last += static_cast<long>(spec.stride))
      out.push_back(detail::cut_window(t, static_cast<std::size_t>(t_last), m));
  } else {
    long hi = static_cast<long>(len) - 1 - static_cast<long>(m);
    for (long t_last = static_cast<long>(m) - 1; t_last <= hi;
         t_last += static_cast<long>(spec.stride))
      out.push_back(detail::cut_window(t, static_cast<std::size_t>(t_last), m));
  }
  return out;
}

inline std::vector<WindowSample> sample_windows(
    const std::vector<TrackRecord>& tracks, const WindowSpec& spec) {
  std::vector<WindowSample> out;
  for (const auto& t : tracks) {
    auto w = sample_windows(t, spec);
    out.insert(out.end(), std::make_move_iterator(w.begin()),
               std::make_move_iterator(w.end()));
  }
  return out;
}

// Eval-mode scores for a window set, batched for throughput.
inline std::vector<std::pair<double, int>> score_windows(
    TrouSPINet& net, const std::vector<WindowSample>& windows,
    std::size_t batch_size = 32) {
  require(batch_size >= 1, "score_windows: batch_size must be >= 1");
  std::vector<std::pair<double, int>> scores;
  scores.reserve(windows.size());
  for (std::size_t lo = 0; lo < windows.size(); lo += batch_size) {
    std::size_t hi = std::min(windows.size(), lo + batch_size);
    EncodedBatch b =
        encode_batch(windows, lo, hi, net.config, net.context_stats);
    Tensor out = forward(net, b, Mode::eval);
    for (std::size_t i = 0; i < out.size(); ++i)
      scores.emplace_back(out.data()[i], windows[lo + i].label);
  }
  return scores;
}

inline Metrics evaluate(TrouSPINet& net, const std::vector<WindowSample>& windows,
                        std::size_t batch_size = 32) {
  require(!windows.empty(), "evaluate: no windows to score");
  return metrics(score_windows(net, windows, batch_size));
}

inline Metrics evaluate(TrouSPINet& net, const std::vector<TrackRecord>& tracks,
                        const WindowSpec& spec, std::size_t batch_size = 32) {
  return evaluate(net, sample_windows(tracks, spec), batch_size);
}

}  // namespace trouspi
