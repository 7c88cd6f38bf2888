#pragma once

// On-disk track format (line-delimited JSON), deterministic hash splits, and
// a seeded synthetic pedestrian-scenario generator for desk-scale training.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trouspi/common.hpp"
#include "trouspi/features.hpp"

namespace trouspi {

struct FrameRecord {
  std::vector<std::array<double, 2>> keypoints;  // normalized [0,1]
  std::array<double, 4> bbox{};                  // x1, y1, x2, y2 normalized
  std::optional<double> ego_speed;
};

struct TrackRecord {
  std::string track_id;
  double fps{30.0};
  std::vector<FrameRecord> frames;
  int label{0};
  std::optional<std::size_t> event_frame;
};

inline void validate_track(const TrackRecord& t) {
  require(!t.track_id.empty(), "field track_id: empty");
  require(t.fps > 0, "field fps: must be positive, got ", t.fps);
  require(!t.frames.empty(), "field frames: empty");
  require(t.label == 0 || t.label == 1, "field label: must be 0 or 1, got ",
          t.label);
  std::size_t n = t.frames[0].keypoints.size();
  require(n > 0, "field frames[0].keypoints: empty");
  for (std::size_t f = 0; f < t.frames.size(); ++f) {
    const FrameRecord& fr = t.frames[f];
    require(fr.keypoints.size() == n, "field frames[", f, "].keypoints: has ",
            fr.keypoints.size(), " key-points, expected ", n);
    for (std::size_t j = 0; j < n; ++j)
      for (int c = 0; c < 2; ++c) {
        double v = fr.keypoints[j][c];
        require(std::isfinite(v) && v >= 0.0 && v <= 1.0, "field frames[", f,
                "].keypoints[", j, "]: coordinate ", v, " outside [0,1]");
      }
    for (double v : fr.bbox)
      require(std::isfinite(v) && v >= 0.0 && v <= 1.0, "field frames[", f,
              "].bbox: value ", v, " outside [0,1]");
    require(fr.bbox[0] <= fr.bbox[2] && fr.bbox[1] <= fr.bbox[3],
            "field frames[", f, "].bbox: corner order violated");
    if (fr.ego_speed)
      require(std::isfinite(*fr.ego_speed), "field frames[", f,
              "].ego_speed: non-finite");
  }
  if (t.label == 1)
    require(t.event_frame.has_value(),
            "field event_frame: required when label=1");
  if (t.event_frame)
    require(*t.event_frame < t.frames.size(), "field event_frame: index ",
            *t.event_frame, " outside track of ", t.frames.size(), " frames");
}

namespace detail {

inline nlohmann::json track_to_json(const TrackRecord& t) {
  nlohmann::json j;
  j["track_id"] = t.track_id;
  j["fps"] = t.fps;
  j["label"] = t.label;
  if (t.event_frame) j["event_frame"] = *t.event_frame;
  nlohmann::json frames = nlohmann::json::array();
  for (const FrameRecord& fr : t.frames) {
    nlohmann::json f;
    nlohmann::json kps = nlohmann::json::array();
    for (const auto& kp : fr.keypoints) kps.push_back({kp[0], kp[1]});
    f["keypoints"] = std::move(kps);
    f["bbox"] = {fr.bbox[0], fr.bbox[1], fr.bbox[2], fr.bbox[3]};
    if (fr.ego_speed) f["ego_speed"] = *fr.ego_speed;
    frames.push_back(std::move(f));
  }
  j["frames"] = std::move(frames);
  return j;
}

inline TrackRecord track_from_json(const nlohmann::json& j) {
  TrackRecord t;
  t.track_id = j.at("track_id").get<std::string>();
  t.fps = j.at("fps").get<double>();
  t.label = j.at("label").get<int>();
  if (j.contains("event_frame") && !j["event_frame"].is_null())
    t.event_frame = j["event_frame"].get<std::size_t>();
  for (const auto& f : j.at("frames")) {
    FrameRecord fr;
    for (const auto& kp : f.at("keypoints")) {
      require(kp.is_array() && kp.size() == 2,
              "field keypoints: entry is not an [x,y] pair");
      fr.keypoints.push_back({kp[0].get<double>(), kp[1].get<double>()});
    }
    const auto& bb = f.at("bbox");
    require(bb.is_array() && bb.size() == 4,
            "field bbox: expected 4 values, got ", bb.size());
    for (int c = 0; c < 4; ++c) fr.bbox[c] = bb[c].get<double>();
    if (f.contains("ego_speed") && !f["ego_speed"].is_null())
      fr.ego_speed = f["ego_speed"].get<double>();
    t.frames.push_back(std::move(fr));
  }
  return t;
}

}  // namespace detail

// Reads one JSON track record per line; every rejection carries the line
// number and the offending field.
inline std::vector<TrackRecord> load_tracks(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open track file: ", path);
  std::vector<TrackRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      TrackRecord t = detail::track_from_json(nlohmann::json::parse(line));
      validate_track(t);
      out.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      fail(path, " line ", line_no, ": ", e.what());
    } catch (const Error& e) {
      fail(path, " line ", line_no, ": ", e.what());
    }
  }
  return out;
}

// Writes the whole file via a temporary then renames it into place, so a
// failure never leaves partial output behind.
inline void write_text_atomic(const std::string& path,
                              const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(out.good(), "cannot open file for writing: ", tmp);
    out << content;
    out.flush();
    require(out.good(), "write failed: ", tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0,
          "cannot move temporary file into place: ", path);
}

inline void save_tracks(const std::string& path,
                        const std::vector<TrackRecord>& tracks) {
  for (const auto& t : tracks) validate_track(t);
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    require(out.good(), "cannot open file for writing: ", tmp);
    for (const auto& t : tracks) out << detail::track_to_json(t).dump() << "\n";
    require(out.good(), "write failed: ", tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0,
          "cannot move temporary file into place: ", path);
}

struct SplitFractions {
  double train{0.7};
  double val{0.15};
  double test{0.15};
};

struct SplitResult {
  std::vector<TrackRecord> train, val, test;
};

// Deterministic partition by hashing (track_id, seed); independent of the
// input ordering, so all windows of a track always share one split.
inline SplitResult split(const std::vector<TrackRecord>& tracks,
                         const SplitFractions& f, std::uint64_t seed) {
  require(!tracks.empty(), "split: empty track list");
  require(f.train >= 0 && f.val >= 0 && f.test >= 0,
          "split: fractions must be non-negative");
  require(std::fabs(f.train + f.val + f.test - 1.0) < 1e-9,
          "split: fractions must sum to 1, got ", f.train + f.val + f.test);
  SplitResult r;
  for (const auto& t : tracks) {
    double u = hash_unit(t.track_id, seed);
    if (u < f.train)
      r.train.push_back(t);
    else if (u < f.train + f.val)
      r.val.push_back(t);
    else
      r.test.push_back(t);
  }
  return r;
}

// Synthetic scenario generator configuration.
//
// The predictive structure is deliberately placed where the observation
// windows can see it, in two layers of difficulty:
//
//  - Posture: crossing pedestrians carry a static anticipatory upper-body
//    lean toward the road whose magnitude overlaps the ordinary postural
//    sway of non-crossers. It is a first-order (mean-readable) cue in the
//    key-point streams, strong enough to learn quickly but deliberately too
//    noisy to classify with on its own.
//  - Cadence: every walker carries a whole-body vertical bounce, and
//    crossers bounce at one shared tempo while the rest draw an off-tempo
//    period from flanking bands. The bounce shifts all key-points of a
//    frame equally, so pairwise joint distances cancel it and the bounding
//    box (a smoothed tracker) does not ride it — only the raw key-point
//    stream carries it. Telling the tempos apart requires comparing frames
//    several steps apart, which rewards temporal receptive fields wider
//    than a single frame step; this layer is what separates architectures
//    with and without the parallel dilated branches.
//
// The overt motion cues — lateral kick toward the road, gait speed-up,
// heading turn, ego braking — all start inside the final second before the
// event, after the latest frame an observation window may contain, so they
// never leak the label into training windows; they exist to make whole
// tracks look like plausible crossing scenes.
struct SyntheticConfig {
  std::size_t n_tracks{2000};
  std::uint64_t seed{7};
  double noise_std{0.004};
  double fps{30.0};
  double positive_fraction{0.5};
  // Gait dynamics.
  double step_freq_min{1.4};   // Hz
  double step_freq_max{2.2};   // Hz
  double step_amp_min{0.12};   // leg swing, fraction of body scale
  double step_amp_max{0.20};
  // Vertical bounce cadence. Periods are in frames; amplitude is a fraction
  // of body scale. Crossing walkers bounce at cadence_period_cross; walking
  // non-crossers draw from [band_lo_min, band_lo_max] or
  // [band_hi_min, band_hi_max] with equal probability. Standing tracks do
  // not bounce at all.
  double cadence_period_cross{8.0};
  double cadence_band_lo_min{6.3};
  double cadence_band_lo_max{7.2};
  double cadence_band_hi_min{8.9};
  double cadence_band_hi_max{10.2};
  double cadence_amp_min{0.12};
  double cadence_amp_max{0.20};
  // Anticipatory posture. Crossing pedestrians carry an upper-body lean
  // toward their crossing direction, drawn once per track from
  // N(lean_mu, lean_sigma); walking non-crossers sway around upright,
  // N(0, lean_sigma), with no preferred side; standers hold upright. The
  // shear is static within a track, so unlike the late kick it is visible
  // inside every observation window.
  double lean_mu{0.25};
  double lean_sigma{0.12};
  // Scenario timing (frames).
  std::size_t event_frame_min{105};
  std::size_t event_frame_max{115};
  std::size_t event_tail_max{6};
  std::size_t nonevent_len_min{36};
  std::size_t nonevent_len_max{52};
  // Frames before the event at which the visible cues begin. Both defaults
  // sit under the 30-frame minimum time-to-event, keeping the cues out of
  // every observation window.
  std::size_t cue_lead{20};
  double brake_lead{18.0};
  // Motion magnitudes (normalized units per frame).
  double cross_speed_min{0.003};
  double cross_speed_max{0.008};
  double walker_drift_std{0.0006};
  double standing_fraction{0.3};
};

inline void validate_synthetic_config(const SyntheticConfig& c) {
  std::vector<std::string> bad;
  if (c.n_tracks < 2) bad.push_back("n_tracks must be >= 2");
  if (c.noise_std < 0) bad.push_back("noise_std must be >= 0");
  if (c.fps <= 0) bad.push_back("fps must be positive");
  if (c.positive_fraction < 0 || c.positive_fraction > 1)
    bad.push_back("positive_fraction must lie in [0,1]");
  if (c.step_freq_min <= 0 || c.step_freq_max < c.step_freq_min)
    bad.push_back("step frequency range invalid");
  if (c.step_amp_min < 0 || c.step_amp_max < c.step_amp_min)
    bad.push_back("step amplitude range invalid");
  if (c.cadence_period_cross <= 0) bad.push_back("cadence period must be positive");
  if (c.cadence_band_lo_min <= 0 || c.cadence_band_lo_max < c.cadence_band_lo_min)
    bad.push_back("cadence low band invalid");
  if (c.cadence_band_hi_min <= 0 || c.cadence_band_hi_max < c.cadence_band_hi_min)
    bad.push_back("cadence high band invalid");
  if (c.cadence_amp_min < 0 || c.cadence_amp_max < c.cadence_amp_min)
    bad.push_back("cadence amplitude range invalid");
  if (c.lean_sigma < 0) bad.push_back("lean_sigma must be >= 0");
  if (c.event_frame_max < c.event_frame_min)
    bad.push_back("event frame range invalid");
  if (c.cue_lead < 1) bad.push_back("cue_lead must be at least 1 frame");
  if (c.brake_lead < 0) bad.push_back("brake_lead must be >= 0");
  if (c.nonevent_len_max < c.nonevent_len_min || c.nonevent_len_min < 1)
    bad.push_back("non-event length range invalid");
  if (c.cross_speed_max < c.cross_speed_min || c.cross_speed_min < 0)
    bad.push_back("crossing speed range invalid");
  if (c.walker_drift_std < 0) bad.push_back("walker_drift_std must be >= 0");
  if (c.standing_fraction < 0 || c.standing_fraction > 1)
    bad.push_back("standing_fraction must lie in [0,1]");
  if (!bad.empty()) {
    std::string msg = "invalid generator config:";
    for (const auto& b : bad) msg += "\n  - " + b;
    fail(msg);
  }
}

inline nlohmann::json synthetic_config_to_json(const SyntheticConfig& c) {
  return nlohmann::json{{"n_tracks", c.n_tracks},
                        {"seed", c.seed},
                        {"noise_std", c.noise_std},
                        {"fps", c.fps},
                        {"positive_fraction", c.positive_fraction},
                        {"step_freq_min", c.step_freq_min},
                        {"step_freq_max", c.step_freq_max},
                        {"step_amp_min", c.step_amp_min},
                        {"step_amp_max", c.step_amp_max},
                        {"cadence_period_cross", c.cadence_period_cross},
                        {"cadence_band_lo_min", c.cadence_band_lo_min},
                        {"cadence_band_lo_max", c.cadence_band_lo_max},
                        {"cadence_band_hi_min", c.cadence_band_hi_min},
                        {"cadence_band_hi_max", c.cadence_band_hi_max},
                        {"cadence_amp_min", c.cadence_amp_min},
                        {"cadence_amp_max", c.cadence_amp_max},
                        {"lean_mu", c.lean_mu},
                        {"lean_sigma", c.lean_sigma},
                        {"event_frame_min", c.event_frame_min},
                        {"event_frame_max", c.event_frame_max},
                        {"event_tail_max", c.event_tail_max},
                        {"nonevent_len_min", c.nonevent_len_min},
                        {"nonevent_len_max", c.nonevent_len_max},
                        {"cue_lead", c.cue_lead},
                        {"brake_lead", c.brake_lead},
                        {"cross_speed_min", c.cross_speed_min},
                        {"cross_speed_max", c.cross_speed_max},
                        {"walker_drift_std", c.walker_drift_std},
                        {"standing_fraction", c.standing_fraction}};
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  get("n_tracks", c.n_tracks);
  get("seed", c.seed);
  get("noise_std", c.noise_std);
  get("fps", c.fps);
  get("positive_fraction", c.positive_fraction);
  get("step_freq_min", c.step_freq_min);
  get("step_freq_max", c.step_freq_max);
  get("step_amp_min", c.step_amp_min);
  get("step_amp_max", c.step_amp_max);
  get("cadence_period_cross", c.cadence_period_cross);
  get("cadence_band_lo_min", c.cadence_band_lo_min);
  get("cadence_band_lo_max", c.cadence_band_lo_max);
  get("cadence_band_hi_min", c.cadence_band_hi_min);
  get("cadence_band_hi_max", c.cadence_band_hi_max);
  get("cadence_amp_min", c.cadence_amp_min);
  get("cadence_amp_max", c.cadence_amp_max);
  get("lean_mu", c.lean_mu);
  get("lean_sigma", c.lean_sigma);
  get("event_frame_min", c.event_frame_min);
  get("event_frame_max", c.event_frame_max);
  get("event_tail_max", c.event_tail_max);
  get("nonevent_len_min", c.nonevent_len_min);
  get("nonevent_len_max", c.nonevent_len_max);
  get("cue_lead", c.cue_lead);
  get("brake_lead", c.brake_lead);
  get("cross_speed_min", c.cross_speed_min);
  get("cross_speed_max", c.cross_speed_max);
  get("walker_drift_std", c.walker_drift_std);
  get("standing_fraction", c.standing_fraction);
  validate_synthetic_config(c);
  return c;
}

namespace detail {

// 18-joint skeleton template: per-joint (x, y) offsets from the body center
// in units of body scale; x spreads are scaled by the heading factor
// (profile ≈ 0.35 … frontal = 1). Layout: nose, neck, shoulders, elbows,
// wrists, hips, knees, ankles, eyes, ears.
struct JointTemplate {
  double x, y;
  bool swings_leg;   // knees/ankles: swing with gait phase
  bool swings_arm;   // elbows/wrists: counter-swing
  int side;          // -1 right, +1 left, 0 midline
};

inline const std::array<JointTemplate, 18>& skeleton_template() {
  static const std::array<JointTemplate, 18> t{{
      {0.000, -0.42, false, false, 0},   // nose
      {0.000, -0.33, false, false, 0},   // neck
      {-0.085, -0.31, false, false, -1}, // right shoulder
      {-0.100, -0.18, false, true, -1},  // right elbow
      {-0.105, -0.05, false, true, -1},  // right wrist
      {0.085, -0.31, false, false, 1},   // left shoulder
      {0.100, -0.18, false, true, 1},    // left elbow
      {0.105, -0.05, false, true, 1},    // left wrist
      {-0.055, 0.00, false, false, -1},  // right hip
      {-0.060, 0.22, true, false, -1},   // right knee
      {-0.065, 0.45, true, false, -1},   // right ankle
      {0.055, 0.00, false, false, 1},    // left hip
      {0.060, 0.22, true, false, 1},     // left knee
      {0.065, 0.45, true, false, 1},     // left ankle
      {-0.020, -0.44, false, false, -1}, // right eye
      {0.020, -0.44, false, false, 1},   // left eye
      {-0.045, -0.43, false, false, -1}, // right ear
      {0.045, -0.43, false, false, 1},   // left ear
  }};
  return t;
}

}  // namespace detail

inline std::vector<TrackRecord> synth_generate(const SyntheticConfig& cfg) {
  validate_synthetic_config(cfg);
  Rng rng(cfg.seed);
  std::size_t n_pos = static_cast<std::size_t>(
      std::llround(cfg.positive_fraction * static_cast<double>(cfg.n_tracks)));

  std::vector<TrackRecord> tracks;
  tracks.reserve(cfg.n_tracks);
  for (std::size_t i = 0; i < cfg.n_tracks; ++i) {
    bool crossing = i < n_pos;

    TrackRecord t;
    {
      std::ostringstream id;
      id << "track_";
      id.fill('0');
      id.width(6);
      id << i;
      t.track_id = id.str();
    }
    t.fps = cfg.fps;
    t.label = crossing ? 1 : 0;

    std::size_t length;
    std::size_t event = 0;
    if (crossing) {
      event = cfg.event_frame_min +
              rng.index(cfg.event_frame_max - cfg.event_frame_min + 1);
      length = event + 1 + rng.index(cfg.event_tail_max + 1);
      t.event_frame = event;
    } else {
      length = cfg.nonevent_len_min +
               rng.index(cfg.nonevent_len_max - cfg.nonevent_len_min + 1);
    }

    // Body placement and gait draws.
    double scale = rng.uniform(0.20, 0.24);
    double cx = rng.uniform(0.42, 0.58);
    double cy = rng.uniform(0.55 * scale + 0.05, 1.0 - 0.55 * scale - 0.05);
    double freq = rng.uniform(cfg.step_freq_min, cfg.step_freq_max);
    double amp = rng.uniform(cfg.step_amp_min, cfg.step_amp_max);
    double phase = rng.uniform(0.0, 6.283185307179586);

    bool standing = !crossing && rng.uniform() < cfg.standing_fraction;
    double cross_speed =
        crossing ? rng.uniform(cfg.cross_speed_min, cfg.cross_speed_max) : 0.0;
    double cross_dir = cx < 0.5 ? 1.0 : -1.0;  // drift toward frame interior
    double walker_drift = standing ? 0.0 : rng.normal(0.0, cfg.walker_drift_std);
    double heading_base = 0.35;
    double heading_jitter_amp = standing ? 0.0 : rng.uniform(0.0, 0.04);
    double heading_jitter_rate = rng.uniform(0.2, 0.8);  // cycles over track
    double heading_jitter_phase = rng.uniform(0.0, 6.283185307179586);

    // Bounce cadence: crossers share one tempo, walking non-crossers draw an
    // off-tempo period from one of the flanking bands; standers are rigid.
    double cadence_period = cfg.cadence_period_cross;
    if (!crossing)
      cadence_period =
          rng.uniform() < 0.5
              ? rng.uniform(cfg.cadence_band_lo_min, cfg.cadence_band_lo_max)
              : rng.uniform(cfg.cadence_band_hi_min, cfg.cadence_band_hi_max);
    double cadence_amp =
        standing ? 0.0 : rng.uniform(cfg.cadence_amp_min, cfg.cadence_amp_max);
    double cadence_phase = rng.uniform(0.0, 6.283185307179586);

    // Static upper-body lean (see the config comment). The bounding box is
    // computed from the un-leaned silhouette below, so only the key-point
    // streams carry the posture.
    double lean = 0.0;
    if (!standing)
      lean = crossing ? cross_dir * rng.normal(cfg.lean_mu, cfg.lean_sigma)
                      : rng.normal(0.0, cfg.lean_sigma);

    double speed = rng.uniform(4.0, 12.0);
    double x_pos = cx;

    t.frames.reserve(length);
    const auto& tmpl = detail::skeleton_template();
    for (std::size_t f = 0; f < length; ++f) {
      // Motion cues ramp in only during the final second before the event;
      // every observation window ends earlier, so inside the windows the
      // classes differ only in posture lean and bounce cadence.
      double cue = 0.0;
      if (crossing && f + cfg.cue_lead > event)
        cue = std::min(1.0, static_cast<double>(f + cfg.cue_lead - event) /
                                static_cast<double>(cfg.cue_lead));

      // Lateral motion: everyone drifts; crossers add a late kick.
      double vx = walker_drift + cross_dir * cross_speed * cue;
      if (f > 0) x_pos += vx;

      // Gait frequency rises with the kick.
      double f_now = standing ? 0.0 : freq * (1.0 + 0.4 * cue);
      if (f > 0) phase += 6.283185307179586 * f_now / cfg.fps;

      // Heading: everyone wanders around a profile view; crossers turn
      // frontal with the kick.
      double heading_wander =
          heading_base +
          heading_jitter_amp *
              std::sin(6.283185307179586 * heading_jitter_rate * f /
                           std::max<std::size_t>(length, 1) +
                       heading_jitter_phase);
      double heading = heading_wander + (1.0 - heading_wander) * cue;

      double swing = standing ? 0.0 : amp * std::sin(phase);
      double bounce =
          cadence_amp *
          std::sin(6.283185307179586 * static_cast<double>(f) / cadence_period +
                   cadence_phase);

      FrameRecord fr;
      fr.keypoints.resize(18);
      double x_min = 2.0, x_max = -1.0, y_min = 2.0, y_max = -1.0;
      for (std::size_t j = 0; j < 18; ++j) {
        const auto& jt = tmpl[j];
        double jx = jt.x * heading;
        if (jt.swings_leg) jx += jt.side * swing * 0.13;
        if (jt.swings_arm) jx -= jt.side * swing * 0.09;
        double px = x_pos + jx * scale;
        double py = cy + jt.y * scale;
        if (cfg.noise_std > 0) {
          px += rng.normal(0.0, cfg.noise_std);
          py += rng.normal(0.0, cfg.noise_std);
        }
        // The bounding box follows the un-bounced silhouette: box trackers
        // are temporally smoothed and do not ride the per-frame bounce.
        x_min = std::min(x_min, px);
        x_max = std::max(x_max, px);
        y_min = std::min(y_min, py);
        y_max = std::max(y_max, py);
        if (jt.y < 0.0) px += lean * (-jt.y) * scale;  // shear above the hips
        px = std::min(1.0, std::max(0.0, px));
        py = std::min(1.0, std::max(0.0, py - bounce * scale));
        fr.keypoints[j] = {px, py};
      }
      // Constant margin wide enough to keep the bounced joints inside the
      // box; it uses the config-level amplitude cap, never per-track state,
      // so box geometry carries no cadence information.
      double margin = (0.02 + cfg.cadence_amp_max) * scale;
      fr.bbox = {std::max(0.0, x_min - margin), std::max(0.0, y_min - margin),
                 std::min(1.0, x_max + margin), std::min(1.0, y_max + margin)};

      // Ego speed: smooth random walk; the driver eases off only once the
      // crosser commits, inside the final second.
      if (f > 0) speed = std::max(0.0, speed + rng.normal(0.0, 0.05));
      double braking =
          crossing && static_cast<double>(event) > cfg.brake_lead &&
                  static_cast<double>(f) + cfg.brake_lead >
                      static_cast<double>(event)
              ? 1.0 - 0.010 * (static_cast<double>(f) -
                               (static_cast<double>(event) - cfg.brake_lead))
              : 1.0;
      fr.ego_speed = speed * std::max(0.2, braking);

      t.frames.push_back(std::move(fr));
    }
    validate_track(t);
    tracks.push_back(std::move(t));
  }
  return tracks;
}

// Per-track mean lateral velocity of the bounding-box center over the final
// second — the linear probe used to calibrate generator separability (the
// crossing kick lives inside that trailing stretch).
inline double trailing_lateral_velocity(const TrackRecord& t) {
  if (t.frames.size() < 2) return 0.0;
  auto center = [](const FrameRecord& f) { return 0.5 * (f.bbox[0] + f.bbox[2]); };
  std::size_t span = std::min<std::size_t>(
      t.frames.size() - 1, static_cast<std::size_t>(std::lround(t.fps)));
  std::size_t first = t.frames.size() - 1 - span;
  double total = center(t.frames.back()) - center(t.frames[first]);
  return total / static_cast<double>(span);
}

}  // namespace trouspi
