#pragma once

// Class-weighted binary cross-entropy, the Ranger optimizer (rectified Adam
// wrapped in Lookahead), the deterministic training loop, and the ablation
// harness that trains and compares the architecture variants.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "trouspi/evaluation.hpp"
#include "trouspi/model.hpp"

namespace trouspi {

struct ClassWeights {
  double w_neg{1.0};
  double w_pos{1.0};
};

// Inverse-frequency weights: w_c = n_total / (2 * n_c).
inline ClassWeights class_weights(const std::vector<int>& labels) {
  std::size_t pos = 0;
  for (int y : labels) pos += y == 1 ? 1 : 0;
  std::size_t neg = labels.size() - pos;
  require(pos > 0 && neg > 0, "class_weights: need both classes, got ", pos,
          " positive / ", neg, " negative");
  double total = static_cast<double>(labels.size());
  return {total / (2.0 * static_cast<double>(neg)),
          total / (2.0 * static_cast<double>(pos))};
}

constexpr double kProbClamp = 1e-7;

// Mean class-weighted BCE over a batch of probabilities (clamped to
// [1e-7, 1-1e-7] so the loss stays finite for any p in [0,1]).
inline Tensor weighted_bce(const Tensor& probs, const std::vector<double>& labels,
                           const ClassWeights& w) {
  require(probs.ndim() == 1, "weighted_bce: probabilities must be rank-1, got ",
          shape_str(probs.shape()));
  require(probs.size() == labels.size(), "weighted_bce: ", probs.size(),
          " probabilities vs ", labels.size(), " labels");
  std::size_t n = labels.size();
  std::vector<double> y(n), wv(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] == 0.0 || labels[i] == 1.0,
            "weighted_bce: label ", i, " must be 0 or 1, got ", labels[i]);
    y[i] = labels[i];
    wv[i] = labels[i] == 1.0 ? w.w_pos : w.w_neg;
  }
  Tensor yt = Tensor::from({n}, y);
  Tensor wt = Tensor::from({n}, wv);
  Tensor p = clamp(probs, kProbClamp, 1.0 - kProbClamp);
  Tensor per = wt * (yt * log(p) + (1.0 - yt) * log(1.0 - p));
  return 0.0 - mean_all(per);
}

// ---------------------------------------------------------------------------
// Rectified Adam
// ---------------------------------------------------------------------------

struct RAdamConfig {
  double lr{5e-5};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
};

class RAdam {
 public:
  RAdam(ParamStore& store, RAdamConfig cfg) : store_(store), cfg_(cfg) {
    for (const auto& e : store.entries())
      if (e.trainable) {
        params_.push_back(e.tensor);
        m_.emplace_back(e.tensor.size(), 0.0);
        v_.emplace_back(e.tensor.size(), 0.0);
      }
  }

  std::size_t step_count() const { return t_; }
  ParamStore& store() { return store_; }
  const std::vector<Tensor>& params() const { return params_; }

  // One update from the gradients accumulated on the trainable leaves.
  // A missing gradient buffer counts as zero; a non-finite gradient aborts
  // before any state is touched.
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      for (double g : params_[i].grad())
        if (!std::isfinite(g))
          fail("optimizer: non-finite gradient in '", name_of(i),
               "'; no update applied");
    }
    ++t_;
    double b1 = cfg_.beta1, b2 = cfg_.beta2;
    double b1t = std::pow(b1, static_cast<double>(t_));
    double b2t = std::pow(b2, static_cast<double>(t_));
    double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    double rho_t =
        rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);
    bool rectified = rho_t > 4.0;
    double r_t = 1.0;
    if (rectified)
      r_t = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                      ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));

    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      const double* g = p.has_grad() ? p.grad().data() : nullptr;
      auto& w = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        double gj = g ? g[j] : 0.0;
        m[j] = b1 * m[j] + (1.0 - b1) * gj;
        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
        double m_hat = m[j] / (1.0 - b1t);
        if (rectified) {
          double v_hat = std::sqrt(v[j] / (1.0 - b2t));
          w[j] -= cfg_.lr * r_t * m_hat / (v_hat + cfg_.eps);
        } else {
          w[j] -= cfg_.lr * m_hat;
        }
      }
    }
  }

 private:
  std::string name_of(std::size_t trainable_index) const {
    std::size_t k = 0;
    for (const auto& e : store_.entries())
      if (e.trainable && k++ == trainable_index) return e.name;
    return "?";
  }

  ParamStore& store_;
  RAdamConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_{0};
};

// ---------------------------------------------------------------------------
// Lookahead wrapper: slow weights interpolate toward the fast weights every
// k steps, then the fast weights restart from the slow ones.
// ---------------------------------------------------------------------------

class Ranger {
 public:
  Ranger(ParamStore& store, RAdamConfig cfg, std::size_t k = 6,
         double alpha = 0.5)
      : radam_(store, cfg), k_(k), alpha_(alpha) {
    require(k_ >= 1, "lookahead: k must be >= 1");
    for (const auto& p : radam_.params()) {
      fast_.push_back(p);  // handle to the live parameter
      slow_.push_back(p.data());
    }
  }

  std::size_t step_count() const { return radam_.step_count(); }
  const std::vector<std::vector<double>>& slow_weights() const { return slow_; }

  void step() {
    radam_.step();
    if (radam_.step_count() % k_ == 0) sync();
  }

  // slow += alpha * (fast - slow); fast = slow.
  void sync() {
    for (std::size_t i = 0; i < fast_.size(); ++i) {
      auto& fast = fast_[i].mutable_data();
      auto& slow = slow_[i];
      for (std::size_t j = 0; j < fast.size(); ++j) {
        slow[j] += alpha_ * (fast[j] - slow[j]);
        fast[j] = slow[j];
      }
    }
  }

  // Copies the slow weights into the live parameters (used for evaluation);
  // returns the previous fast weights so they can be restored.
  std::vector<std::vector<double>> swap_in_slow() {
    std::vector<std::vector<double>> saved;
    saved.reserve(fast_.size());
    for (std::size_t i = 0; i < fast_.size(); ++i) {
      saved.push_back(fast_[i].data());
      fast_[i].mutable_data() = slow_[i];
    }
    return saved;
  }

  void restore_fast(const std::vector<std::vector<double>>& saved) {
    for (std::size_t i = 0; i < fast_.size(); ++i)
      fast_[i].mutable_data() = saved[i];
  }

 private:
  RAdam radam_;
  std::size_t k_;
  double alpha_;
  std::vector<Tensor> fast_;
  std::vector<std::vector<double>> slow_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs{80};
  std::size_t batch_size{8};
  double lr{5e-5};  // 5.0e-05 PIE-style; 5.0e-06 JAAD-style
  std::uint64_t seed{0};
  std::optional<ClassWeights> weights;  // computed from the data when unset
  double val_fraction{0.15};
  std::size_t eval_batch_size{32};
  bool lookahead{true};  // false = plain rectified Adam (no slow weights)
  WindowSpec window;
};

inline void validate_train_config(const TrainConfig& c) {
  require(c.epochs >= 1, "train config: epochs must be >= 1");
  require(c.batch_size >= 1, "train config: batch_size must be >= 1");
  require(c.lr > 0, "train config: lr must be positive");
  require(c.val_fraction >= 0 && c.val_fraction < 1,
          "train config: val_fraction must lie in [0,1)");
  if (c.weights)
    require(c.weights->w_neg > 0 && c.weights->w_pos > 0,
            "train config: class weights must be positive");
  validate_window_spec(c.window);
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j{{"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"lr", c.lr},
                   {"seed", c.seed},
                   {"val_fraction", c.val_fraction},
                   {"eval_batch_size", c.eval_batch_size},
                   {"lookahead", c.lookahead},
                   {"window", window_spec_to_json(c.window)}};
  if (c.weights)
    j["weights"] = {{"w_neg", c.weights->w_neg}, {"w_pos", c.weights->w_pos}};
  else
    j["weights"] = nullptr;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("lr", c.lr);
  get("seed", c.seed);
  get("val_fraction", c.val_fraction);
  get("eval_batch_size", c.eval_batch_size);
  get("lookahead", c.lookahead);
  if (j.contains("weights") && !j["weights"].is_null())
    c.weights = ClassWeights{j["weights"].at("w_neg").get<double>(),
                             j["weights"].at("w_pos").get<double>()};
  if (j.contains("window")) c.window = window_spec_from_json(j["window"]);
  validate_train_config(c);
  return c;
}

struct EpochLog {
  std::size_t epoch{0};
  double train_loss{0};
  double val_acc{std::nan("")};
  double val_auc{std::nan("")};
  double val_f1{std::nan("")};
};

struct TrainResult {
  std::vector<EpochLog> logs;
  ClassWeights weights;
  std::size_t train_windows{0};
  std::size_t val_windows{0};
};

// Returning false from the callback stops training after that epoch (the
// terminal slow-weight sync still runs).
using EpochCallback = std::function<bool(const EpochLog&)>;

// Core loop over pre-sampled windows. Fully deterministic given the seed:
// seeded epoch shuffles, sequential batches, Ranger updates, validation on
// the Lookahead slow weights each epoch.
inline TrainResult train_on_windows(TrouSPINet& net,
                                    std::vector<WindowSample> train_windows,
                                    const std::vector<WindowSample>& val_windows,
                                    const TrainConfig& cfg,
                                    const EpochCallback& on_epoch = {}) {
  validate_train_config(cfg);
  require(!train_windows.empty(), "train: no training windows");

  TrainResult result;
  {
    std::vector<int> labels;
    labels.reserve(train_windows.size());
    for (const auto& w : train_windows) labels.push_back(w.label);
    result.weights = cfg.weights ? *cfg.weights : class_weights(labels);
  }
  result.train_windows = train_windows.size();
  result.val_windows = val_windows.size();

  RAdamConfig opt_cfg{cfg.lr, 0.9, 0.999, 1e-8};
  std::optional<Ranger> ranger;
  std::optional<RAdam> radam;
  if (cfg.lookahead)
    ranger.emplace(net.store, opt_cfg);
  else
    radam.emplace(net.store, opt_cfg);
  Rng shuffle_rng(splitmix64(cfg.seed ^ 0x5e5e5e5e5e5e5e5eULL));
  Rng dropout_rng(splitmix64(cfg.seed ^ 0xd40d40d40d40d40dULL));

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(train_windows);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < train_windows.size(); lo += cfg.batch_size) {
      std::size_t hi = std::min(train_windows.size(), lo + cfg.batch_size);
      EncodedBatch batch =
          encode_batch(train_windows, lo, hi, net.config, net.context_stats);
      net.store.zero_grad();
      Tensor probs = forward(net, batch, Mode::train, &dropout_rng);
      Tensor loss = weighted_bce(probs, batch.labels, result.weights);
      if (net.config.l2_final > 0)
        loss = loss + net.config.l2_final * sum_all(net.head.w * net.head.w);
      double loss_val = loss.data()[0];
      require(std::isfinite(loss_val), "training diverged at epoch ", epoch,
              ", step ", batches + 1, ": loss is non-finite");
      backward(loss);
      if (ranger)
        ranger->step();
      else
        radam->step();
      loss_sum += loss_val;
      ++batches;
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(batches);
    if (!val_windows.empty()) {
      // With Lookahead, validation runs on the slow weights.
      std::vector<std::vector<double>> saved;
      if (ranger) saved = ranger->swap_in_slow();
      Metrics m = evaluate(net, val_windows, cfg.eval_batch_size);
      if (ranger) ranger->restore_fast(saved);
      log.val_acc = m.acc;
      log.val_auc = m.auc ? *m.auc : std::nan("");
      log.val_f1 = m.f1;
    }
    result.logs.push_back(log);
    if (on_epoch && !on_epoch(log)) break;
  }

  // With Lookahead the final weights are the slow weights after a terminal sync.
  if (ranger) ranger->sync();
  return result;
}

// Full pipeline from raw tracks: carve a validation slice by track hash,
// sample observation windows, fit the speed statistics on the train slice,
// then run the core loop.
inline TrainResult train(TrouSPINet& net, const std::vector<TrackRecord>& tracks,
                         const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  validate_train_config(cfg);
  require(!tracks.empty(), "train: empty dataset");

  std::vector<TrackRecord> train_tracks, val_tracks;
  for (const auto& t : tracks) {
    double u = hash_unit(t.track_id, splitmix64(cfg.seed ^ 0x7a117a117a117a11ULL));
    (u < cfg.val_fraction ? val_tracks : train_tracks).push_back(t);
  }
  require(!train_tracks.empty(), "train: no tracks left for training");

  std::vector<WindowSample> train_windows = sample_windows(train_tracks, cfg.window);
  std::vector<WindowSample> val_windows = sample_windows(val_tracks, cfg.window);
  require(!train_windows.empty(), "train: no training windows (tracks shorter than ",
          cfg.window.m, " frames?)");

  if (net.config.streams.speed) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& w : train_windows) {
      require(w.context.speed_present,
              "train: stream 'speed' enabled but a window lacks speed data");
      for (double v : w.context.speed) {
        sum += v;
        sq += v * v;
        ++n;
      }
    }
    double mean = sum / static_cast<double>(n);
    double var = sq / static_cast<double>(n) - mean * mean;
    double sd = std::sqrt(std::max(var, 0.0));
    require(sd > 0, "train: feature 'speed' has zero variance on the train split");
    net.context_stats = {mean, sd};
  }

  return train_on_windows(net, std::move(train_windows), val_windows, cfg,
                          on_epoch);
}

// ---------------------------------------------------------------------------
// Ablation harness: trains and evaluates every architecture variant with a
// shared seed and reports the comparison.
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string name;
  std::size_t params{0};
  Metrics val;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out << "variant,params,acc,auc,f1,precision,recall\n";
    for (const auto& r : rows) {
      out << r.name << "," << r.params << "," << r.val.acc << ",";
      if (r.val.auc)
        out << *r.val.auc;
      else
        out << "nan";
      out << "," << r.val.f1 << "," << r.val.precision << "," << r.val.recall
          << "\n";
    }
    return out.str();
  }
};

using VariantCallback =
    std::function<void(const std::string&, const EpochLog&)>;

inline AblationTable ablate(const std::vector<TrackRecord>& tracks,
                            const ModelConfig& base, const TrainConfig& cfg,
                            const VariantCallback& progress = {}) {
  AblationTable table;
  for (const auto& name : ablation_suite()) {
    ModelConfig vc = variant_config(name, base);
    vc.seed = base.seed;  // shared init seed across variants
    TrouSPINet net = build(vc);
    TrainResult res =
        train(net, tracks, cfg, [&](const EpochLog& log) {
          if (progress) progress(name, log);
          return true;
        });

    // Re-evaluate the final (slow) weights on the validation slice.
    std::vector<TrackRecord> val_tracks;
    for (const auto& t : tracks)
      if (hash_unit(t.track_id,
                    splitmix64(cfg.seed ^ 0x7a117a117a117a11ULL)) <
          cfg.val_fraction)
        val_tracks.push_back(t);
    Metrics m = evaluate(net, val_tracks, cfg.window, cfg.eval_batch_size);
    table.rows.push_back({name, param_count(net), m});
  }
  return table;
}

}  // namespace trouspi
