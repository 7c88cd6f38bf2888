#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "trouspi/data.hpp"
#include "trouspi/evaluation.hpp"

using namespace trouspi;

namespace {

std::string temp_path(const std::string& name) {
  return std::string("/tmp/trouspi_test_") + name;
}

std::string serialize_all(const std::vector<TrackRecord>& tracks) {
  std::string out;
  for (const auto& t : tracks) out += detail::track_to_json(t).dump() + "\n";
  return out;
}

// Brute-force pairwise ranking statistic (ties counted half).
double pairwise_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0.0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

TrackRecord tiny_track(const std::string& id, int label) {
  TrackRecord t;
  t.track_id = id;
  t.fps = 30.0;
  t.label = label;
  if (label == 1) t.event_frame = 1;
  for (int f = 0; f < 2; ++f) {
    FrameRecord fr;
    fr.keypoints.assign(3, {0.5, 0.5});
    fr.bbox = {0.4, 0.4, 0.6, 0.6};
    fr.ego_speed = 5.0 + f;
    t.frames.push_back(fr);
  }
  return t;
}

}  // namespace

TEST_CASE("track validation pinpoints the offending field", "[data]") {
  TrackRecord t = tiny_track("a", 1);

  SECTION("valid track passes") { REQUIRE_NOTHROW(validate_track(t)); }

  SECTION("coordinate outside [0,1]") {
    t.frames[1].keypoints[2][0] = 1.5;
    try {
      validate_track(t);
      FAIL("expected error");
    } catch (const Error& e) {
      REQUIRE(std::string(e.what()).find("frames[1].keypoints[2]") !=
              std::string::npos);
    }
  }

  SECTION("keypoint count mismatch names the frame") {
    t.frames[1].keypoints.pop_back();
    try {
      validate_track(t);
      FAIL("expected error");
    } catch (const Error& e) {
      REQUIRE(std::string(e.what()).find("frames[1]") != std::string::npos);
    }
  }

  SECTION("event frame required for label 1") {
    t.event_frame.reset();
    REQUIRE_THROWS_AS(validate_track(t), Error);
  }

  SECTION("event frame must lie inside the track") {
    t.event_frame = 99;
    REQUIRE_THROWS_AS(validate_track(t), Error);
  }

  SECTION("bbox corner order") {
    t.frames[0].bbox = {0.7, 0.4, 0.6, 0.6};
    REQUIRE_THROWS_AS(validate_track(t), Error);
  }
}

TEST_CASE("track file round trip", "[data]") {
  std::string path = temp_path("roundtrip.jsonl");

  SECTION("write-then-read preserves all values bit-exactly") {
    SyntheticConfig cfg;
    cfg.n_tracks = 6;
    cfg.seed = 41;
    auto tracks = synth_generate(cfg);
    save_tracks(path, tracks);
    auto loaded = load_tracks(path);
    REQUIRE(loaded.size() == tracks.size());
    for (std::size_t i = 0; i < tracks.size(); ++i) {
      REQUIRE(loaded[i].track_id == tracks[i].track_id);
      REQUIRE(loaded[i].fps == tracks[i].fps);
      REQUIRE(loaded[i].label == tracks[i].label);
      REQUIRE(loaded[i].event_frame == tracks[i].event_frame);
      REQUIRE(loaded[i].frames.size() == tracks[i].frames.size());
      for (std::size_t f = 0; f < tracks[i].frames.size(); ++f) {
        REQUIRE(loaded[i].frames[f].keypoints == tracks[i].frames[f].keypoints);
        REQUIRE(loaded[i].frames[f].bbox == tracks[i].frames[f].bbox);
        REQUIRE(loaded[i].frames[f].ego_speed == tracks[i].frames[f].ego_speed);
      }
    }
    std::remove(path.c_str());
  }

  SECTION("empty file loads as an empty list") {
    { std::ofstream out(path); }
    REQUIRE(load_tracks(path).empty());
    std::remove(path.c_str());
  }

  SECTION("missing file raises") {
    REQUIRE_THROWS_AS(load_tracks("/tmp/trouspi_no_such_file.jsonl"), Error);
  }

  SECTION("malformed line reports its line number") {
    {
      std::ofstream out(path);
      out << detail::track_to_json(tiny_track("ok", 0)).dump() << "\n";
      out << "{not json\n";
    }
    try {
      load_tracks(path);
      FAIL("expected error");
    } catch (const Error& e) {
      REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }
    std::remove(path.c_str());
  }

  SECTION("invariant violation reports line and field") {
    TrackRecord bad = tiny_track("bad", 0);
    bad.frames[1].keypoints.pop_back();
    {
      std::ofstream out(path);
      out << detail::track_to_json(tiny_track("ok", 0)).dump() << "\n";
      out << detail::track_to_json(bad).dump() << "\n";
    }
    try {
      load_tracks(path);
      FAIL("expected error");
    } catch (const Error& e) {
      std::string msg = e.what();
      REQUIRE(msg.find("line 2") != std::string::npos);
      REQUIRE(msg.find("frames[1]") != std::string::npos);
    }
    std::remove(path.c_str());
  }
}

TEST_CASE("deterministic hash split", "[data]") {
  std::vector<TrackRecord> tracks;
  for (int i = 0; i < 1000; ++i)
    tracks.push_back(tiny_track("t" + std::to_string(i), i % 2));
  SplitFractions f{0.7, 0.15, 0.15};

  SECTION("same seed twice gives identical partitions") {
    SplitResult a = split(tracks, f, 5);
    SplitResult b = split(tracks, f, 5);
    REQUIRE(serialize_all(a.train) == serialize_all(b.train));
    REQUIRE(serialize_all(a.val) == serialize_all(b.val));
    REQUIRE(serialize_all(a.test) == serialize_all(b.test));
  }

  SECTION("splits partition the input") {
    SplitResult r = split(tracks, f, 5);
    REQUIRE(r.train.size() + r.val.size() + r.test.size() == tracks.size());
    std::set<std::string> seen;
    for (const auto* part : {&r.train, &r.val, &r.test})
      for (const auto& t : *part) REQUIRE(seen.insert(t.track_id).second);
    REQUIRE(seen.size() == tracks.size());
  }

  SECTION("sizes stay within three percent of expectation") {
    SplitResult r = split(tracks, f, 5);
    REQUIRE(std::fabs(static_cast<double>(r.train.size()) - 700.0) <= 30.0);
    REQUIRE(std::fabs(static_cast<double>(r.val.size()) - 150.0) <= 30.0);
    REQUIRE(std::fabs(static_cast<double>(r.test.size()) - 150.0) <= 30.0);
  }

  SECTION("membership is invariant to input ordering") {
    SplitResult a = split(tracks, f, 5);
    std::vector<TrackRecord> shuffled = tracks;
    Rng rng(9);
    rng.shuffle(shuffled);
    SplitResult b = split(shuffled, f, 5);
    auto ids = [](const std::vector<TrackRecord>& v) {
      std::set<std::string> s;
      for (const auto& t : v) s.insert(t.track_id);
      return s;
    };
    REQUIRE(ids(a.train) == ids(b.train));
    REQUIRE(ids(a.val) == ids(b.val));
    REQUIRE(ids(a.test) == ids(b.test));
  }

  SECTION("empty input raises") {
    REQUIRE_THROWS_AS(split({}, f, 5), Error);
  }

  SECTION("fractions must sum to one") {
    REQUIRE_THROWS_AS(split(tracks, SplitFractions{0.5, 0.1, 0.1}, 5), Error);
  }
}

TEST_CASE("synthetic generator", "[data]") {
  SECTION("same config and seed give byte-identical output") {
    SyntheticConfig cfg;
    cfg.n_tracks = 20;
    cfg.seed = 99;
    REQUIRE(serialize_all(synth_generate(cfg)) ==
            serialize_all(synth_generate(cfg)));
  }

  SECTION("different seeds differ") {
    SyntheticConfig a, b;
    a.n_tracks = b.n_tracks = 4;
    a.seed = 1;
    b.seed = 2;
    REQUIRE(serialize_all(synth_generate(a)) != serialize_all(synth_generate(b)));
  }

  SECTION("generated tracks satisfy the record invariants across configs") {
    Rng meta(31);
    for (int trial = 0; trial < 4; ++trial) {
      SyntheticConfig cfg;
      cfg.n_tracks = 8;
      cfg.seed = 100 + trial;
      cfg.noise_std = meta.uniform(0.0, 0.02);
      cfg.positive_fraction = meta.uniform(0.3, 0.7);
      auto tracks = synth_generate(cfg);
      REQUIRE(tracks.size() == cfg.n_tracks);
      std::size_t pos = 0;
      for (const auto& t : tracks) {
        REQUIRE_NOTHROW(validate_track(t));
        REQUIRE(t.frames[0].keypoints.size() == 18);
        pos += t.label;
      }
      REQUIRE(pos == static_cast<std::size_t>(std::llround(
                         cfg.positive_fraction * cfg.n_tracks)));
    }
  }

  SECTION("crossing tracks leave room for 1-2s observation windows") {
    SyntheticConfig cfg;
    cfg.n_tracks = 10;
    cfg.seed = 55;
    for (const auto& t : synth_generate(cfg)) {
      if (t.label != 1) continue;
      REQUIRE(*t.event_frame >= 2 * cfg.fps + 15);
      REQUIRE(*t.event_frame < t.frames.size());
    }
  }

  SECTION("noiseless standing non-crossers have a frozen skeleton") {
    SyntheticConfig cfg;
    cfg.n_tracks = 6;
    cfg.seed = 77;
    cfg.noise_std = 0.0;
    cfg.positive_fraction = 0.5;
    cfg.standing_fraction = 1.0;  // every non-crosser stands
    auto tracks = synth_generate(cfg);
    bool saw_standing = false;
    for (const auto& t : tracks) {
      if (t.label != 0) continue;
      saw_standing = true;
      PoseSequence p = make_pose(t.frames.size(), 18, 2);
      for (std::size_t f = 0; f < t.frames.size(); ++f)
        for (std::size_t j = 0; j < 18; ++j) {
          p.at(f, j, 0) = t.frames[f].keypoints[j][0];
          p.at(f, j, 1) = t.frames[f].keypoints[j][1];
        }
      Tensor m = jcd(p);
      std::size_t cols = m.shape()[1];
      for (std::size_t f = 1; f < t.frames.size(); ++f)
        for (std::size_t c = 0; c < cols; ++c)
          REQUIRE(m.at({f, c}) == m.at({0, c}));
    }
    REQUIRE(saw_standing);
  }

  SECTION("trailing lateral velocity separates the classes at AUC >= 0.7") {
    SyntheticConfig cfg;
    cfg.n_tracks = 400;
    cfg.seed = 11;
    auto tracks = synth_generate(cfg);
    std::vector<double> pos, neg;
    for (const auto& t : tracks)
      (t.label == 1 ? pos : neg)
          .push_back(std::fabs(trailing_lateral_velocity(t)));
    REQUIRE(!pos.empty());
    REQUIRE(!neg.empty());
    REQUIRE(pairwise_auc(pos, neg) >= 0.7);
  }

  SECTION("observation windows carry no overt cue: in-window bbox drift and "
          "ego-speed trends match across classes") {
    SyntheticConfig cfg;
    cfg.n_tracks = 400;
    cfg.seed = 19;
    // Walking tracks only: standers legitimately drift less than walkers,
    // which is a realism feature, not a late-cue leak.
    cfg.standing_fraction = 0.0;
    auto tracks = synth_generate(cfg);
    WindowSpec spec;
    auto windows = sample_windows(tracks, spec);
    // Per-window trend of the bbox center x and of ego speed; if the late
    // cues leaked into observation windows these would separate the classes.
    std::vector<double> pos_box, neg_box, pos_sp, neg_sp;
    for (const auto& w : windows) {
      std::size_t last = w.context.frames - 1;
      double box_trend =
          0.5 * (w.context.boxes[last * 4 + 0] + w.context.boxes[last * 4 + 2]) -
          0.5 * (w.context.boxes[0] + w.context.boxes[2]);
      double sp_trend = w.context.speed[last] - w.context.speed[0];
      (w.label == 1 ? pos_box : neg_box).push_back(std::fabs(box_trend));
      (w.label == 1 ? pos_sp : neg_sp).push_back(-sp_trend);
    }
    REQUIRE(!pos_box.empty());
    REQUIRE(!neg_box.empty());
    REQUIRE(pairwise_auc(pos_box, neg_box) < 0.62);
    REQUIRE(pairwise_auc(pos_sp, neg_sp) < 0.62);
  }

  SECTION("invalid configs are rejected with the reasons listed") {
    SyntheticConfig cfg;
    cfg.n_tracks = 1;
    cfg.noise_std = -1.0;
    try {
      validate_synthetic_config(cfg);
      FAIL("expected error");
    } catch (const Error& e) {
      std::string msg = e.what();
      REQUIRE(msg.find("n_tracks") != std::string::npos);
      REQUIRE(msg.find("noise_std") != std::string::npos);
    }
  }

  SECTION("config survives a JSON round trip") {
    SyntheticConfig cfg;
    cfg.n_tracks = 123;
    cfg.seed = 9;
    cfg.noise_std = 0.007;
    cfg.positive_fraction = 0.4;
    SyntheticConfig back =
        synthetic_config_from_json(synthetic_config_to_json(cfg));
    REQUIRE(synthetic_config_to_json(back) == synthetic_config_to_json(cfg));
  }
}
