#pragma once

// Model assembly: parallel atrous-convolution branches over the pseudo-image,
// recurrent towers with temporal attention over the JCD/bbox/speed streams,
// modality-attention fusion, and the sigmoid head. Also: the profiler
// (params/FLOPS/weight memory), checkpoint I/O, and ablation variant configs.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trouspi/features.hpp"
#include "trouspi/layers.hpp"

namespace trouspi {

enum class AttentionKind { cbam, se, none };
enum class RecurrentKind { ugru, bigru, gru };

inline std::string to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::cbam: return "cbam";
    case AttentionKind::se: return "se";
    default: return "none";
  }
}
inline std::string to_string(RecurrentKind k) {
  switch (k) {
    case RecurrentKind::ugru: return "ugru";
    case RecurrentKind::bigru: return "bigru";
    default: return "gru";
  }
}
inline AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "cbam") return AttentionKind::cbam;
  if (s == "se") return AttentionKind::se;
  if (s == "none") return AttentionKind::none;
  fail("unknown attention kind: '", s, "' (expected cbam|se|none)");
}
inline RecurrentKind parse_recurrent_kind(const std::string& s) {
  if (s == "ugru") return RecurrentKind::ugru;
  if (s == "bigru") return RecurrentKind::bigru;
  if (s == "gru") return RecurrentKind::gru;
  fail("unknown recurrent kind: '", s, "' (expected ugru|bigru|gru)");
}

struct StreamFlags {
  bool pseudo_image{true};
  bool jcd{true};
  bool bbox{true};
  bool speed{true};
};

struct ModelConfig {
  std::vector<std::pair<std::size_t, std::size_t>> branches{{1, 1}, {2, 1}, {3, 1}};
  std::size_t blocks_per_branch{3};
  std::size_t feature_maps{64};
  AttentionKind attention_kind{AttentionKind::cbam};
  RecurrentKind recurrent_kind{RecurrentKind::ugru};
  std::size_t recurrent_blocks_per_stream{2};
  std::size_t hidden{64};
  StreamFlags streams;
  double dropout{0.5};
  double l2_final{0.001};
  std::uint64_t seed{0};
  // Input geometry.
  std::size_t frames{16};
  std::size_t joints{18};
  std::size_t coord_dims{2};
};

inline std::vector<std::string> model_config_violations(const ModelConfig& c) {
  std::vector<std::string> bad;
  if (!c.streams.pseudo_image && !c.streams.jcd && !c.streams.bbox &&
      !c.streams.speed)
    bad.push_back("at least one stream must be enabled");
  if (c.streams.pseudo_image) {
    if (c.branches.empty())
      bad.push_back("pseudo-image stream enabled but no branches configured");
    for (std::size_t i = 0; i < c.branches.size(); ++i) {
      auto [r1, r2] = c.branches[i];
      if (r1 < 1 || r1 > 3)
        bad.push_back("branch " + std::to_string(i) +
                      ": dilation r1 must lie in {1,2,3}");
      if (r2 != 1)
        bad.push_back("branch " + std::to_string(i) + ": dilation r2 must be 1");
    }
    if (c.blocks_per_branch < 1) bad.push_back("blocks_per_branch must be >= 1");
    if (c.feature_maps < 1) bad.push_back("feature_maps must be >= 1");
    if (c.feature_maps != c.hidden)
      bad.push_back(
          "feature_maps must equal hidden so the summed branch vector matches "
          "the recurrent stream width");
    std::size_t h = c.frames, w = c.joints;
    for (std::size_t s = 0; s < c.blocks_per_branch; ++s) {
      if (h < 2 || w < 2) {
        bad.push_back("pseudo-image collapses below 2x2 before pooling stage " +
                      std::to_string(s));
        break;
      }
      h /= 2;
      w /= 2;
    }
  }
  if (c.streams.jcd || c.streams.bbox || c.streams.speed) {
    if (c.recurrent_blocks_per_stream < 1)
      bad.push_back("recurrent_blocks_per_stream must be >= 1");
  }
  if (c.hidden < 1) bad.push_back("hidden must be >= 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0))
    bad.push_back("dropout must lie in [0,1)");
  if (c.l2_final < 0) bad.push_back("l2_final must be >= 0");
  if (c.frames < 1) bad.push_back("frames must be >= 1");
  if (c.joints < 2) bad.push_back("joints must be >= 2");
  if (c.coord_dims < 1) bad.push_back("coord_dims must be >= 1");
  return bad;
}

inline void validate_model_config(const ModelConfig& c) {
  auto bad = model_config_violations(c);
  if (!bad.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& b : bad) msg += "\n  - " + b;
    fail(msg);
  }
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json branches = nlohmann::json::array();
  for (auto [r1, r2] : c.branches) branches.push_back({r1, r2});
  return nlohmann::json{
      {"branches", branches},
      {"blocks_per_branch", c.blocks_per_branch},
      {"feature_maps", c.feature_maps},
      {"attention_kind", to_string(c.attention_kind)},
      {"recurrent_kind", to_string(c.recurrent_kind)},
      {"recurrent_blocks_per_stream", c.recurrent_blocks_per_stream},
      {"hidden", c.hidden},
      {"streams",
       {{"pseudo_image", c.streams.pseudo_image},
        {"jcd", c.streams.jcd},
        {"bbox", c.streams.bbox},
        {"speed", c.streams.speed}}},
      {"dropout", c.dropout},
      {"l2_final", c.l2_final},
      {"seed", c.seed},
      {"frames", c.frames},
      {"joints", c.joints},
      {"coord_dims", c.coord_dims}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("branches")) {
    c.branches.clear();
    for (const auto& b : j["branches"]) {
      require(b.is_array() && b.size() == 2,
              "config branches: each entry must be a [r1, r2] pair");
      c.branches.emplace_back(b[0].get<std::size_t>(), b[1].get<std::size_t>());
    }
  }
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  get("blocks_per_branch", c.blocks_per_branch);
  get("feature_maps", c.feature_maps);
  if (j.contains("attention_kind"))
    c.attention_kind = parse_attention_kind(j["attention_kind"].get<std::string>());
  if (j.contains("recurrent_kind"))
    c.recurrent_kind = parse_recurrent_kind(j["recurrent_kind"].get<std::string>());
  get("recurrent_blocks_per_stream", c.recurrent_blocks_per_stream);
  get("hidden", c.hidden);
  if (j.contains("streams")) {
    const auto& s = j["streams"];
    auto flag = [&](const char* key, bool& slot) {
      if (s.contains(key)) slot = s.at(key).get<bool>();
    };
    flag("pseudo_image", c.streams.pseudo_image);
    flag("jcd", c.streams.jcd);
    flag("bbox", c.streams.bbox);
    flag("speed", c.streams.speed);
  }
  get("dropout", c.dropout);
  get("l2_final", c.l2_final);
  get("seed", c.seed);
  get("frames", c.frames);
  get("joints", c.joints);
  get("coord_dims", c.coord_dims);
  validate_model_config(c);
  return c;
}

// One conv-branch stage: atrous conv, batch norm, LeakyReLU, optional
// attention block, then 2x2 max pooling at the call site.
struct BranchStage {
  ConvParams conv;
  std::optional<CBAMParams> cbam_params;
  std::optional<SEParams> se_params;
  BatchNormState bn;
};

struct Branch {
  std::vector<BranchStage> stages;
};

struct RecurrentBlock {
  RecurrentKind kind{RecurrentKind::ugru};
  std::optional<UGRUParams> ugru;
  std::optional<BiGRUParams> bigru;
  std::optional<GRUCellParams> gru;
};

struct StreamTower {
  std::vector<RecurrentBlock> blocks;
  TemporalAttentionParams attn;
};

struct TrouSPINet {
  ModelConfig config;
  ParamStore store;
  std::vector<Branch> branches;
  std::optional<StreamTower> jcd_tower;
  std::optional<StreamTower> bbox_tower;
  std::optional<StreamTower> speed_tower;
  ModalityAttentionParams fusion;
  DenseParams head;
  // Train-split statistics used to standardize the speed stream.
  ContextStats context_stats;
};

namespace detail {

inline RecurrentBlock make_recurrent_block(ParamStore& store,
                                           const std::string& prefix,
                                           RecurrentKind kind, std::size_t in,
                                           std::size_t hidden, Rng& rng) {
  RecurrentBlock b;
  b.kind = kind;
  switch (kind) {
    case RecurrentKind::ugru:
      b.ugru = make_ugru(store, prefix, in, hidden, rng);
      break;
    case RecurrentKind::bigru:
      b.bigru = make_bigru(store, prefix, in, hidden, rng);
      break;
    case RecurrentKind::gru:
      b.gru = make_gru(store, prefix, in, hidden, rng);
      break;
  }
  return b;
}

inline StreamTower make_tower(ParamStore& store, const std::string& prefix,
                              const ModelConfig& c, std::size_t in_dim,
                              Rng& rng) {
  StreamTower tower;
  for (std::size_t b = 0; b < c.recurrent_blocks_per_stream; ++b) {
    std::size_t in = b == 0 ? in_dim : c.hidden;
    tower.blocks.push_back(make_recurrent_block(
        store, prefix + ".block" + std::to_string(b), c.recurrent_kind, in,
        c.hidden, rng));
  }
  tower.attn =
      make_temporal_attention(store, prefix + ".attn", c.hidden, c.hidden, rng);
  return tower;
}

}  // namespace detail

inline TrouSPINet build(const ModelConfig& config) {
  validate_model_config(config);
  TrouSPINet net;
  net.config = config;
  Rng rng(config.seed);

  if (config.streams.pseudo_image) {
    for (std::size_t bi = 0; bi < config.branches.size(); ++bi) {
      auto [r1, r2] = config.branches[bi];
      Branch branch;
      for (std::size_t s = 0; s < config.blocks_per_branch; ++s) {
        std::string prefix =
            "branch" + std::to_string(bi) + ".stage" + std::to_string(s);
        BranchStage stage{
            make_conv(net.store, prefix + ".conv",
                      s == 0 ? config.coord_dims : config.feature_maps,
                      config.feature_maps, 3, 3, r1, r2, rng),
            std::nullopt, std::nullopt,
            make_batch_norm(net.store, prefix + ".bn", config.feature_maps)};
        if (config.attention_kind == AttentionKind::cbam)
          stage.cbam_params =
              make_cbam(net.store, prefix + ".cbam", config.feature_maps, rng);
        else if (config.attention_kind == AttentionKind::se)
          stage.se_params =
              make_se(net.store, prefix + ".se", config.feature_maps, rng);
        branch.stages.push_back(std::move(stage));
      }
      net.branches.push_back(std::move(branch));
    }
  }

  if (config.streams.jcd)
    net.jcd_tower = detail::make_tower(net.store, "jcd", config,
                                       jcd_pair_count(config.joints), rng);
  if (config.streams.bbox)
    net.bbox_tower = detail::make_tower(net.store, "bbox", config, 4, rng);
  if (config.streams.speed)
    net.speed_tower = detail::make_tower(net.store, "speed", config, 1, rng);

  net.fusion = make_modality_attention(net.store, "fusion", config.hidden,
                                       config.hidden, rng);
  net.head = make_dense(net.store, "head", config.hidden, 1, rng,
                        /*init_scale=*/0.0);
  return net;
}

// One observation window paired with its label.
struct WindowSample {
  PoseSequence pose;
  ContextFeatures context;
  int label{0};
};

// Batched stream tensors for a set of windows.
struct EncodedBatch {
  std::size_t size{0};
  Tensor image;  // B x coord_dims x frames x joints
  Tensor jcd;    // B x frames x pairs
  Tensor boxes;  // B x frames x 4
  Tensor speed;  // B x frames x 1
  bool has_image{false}, has_jcd{false}, has_boxes{false}, has_speed{false};
  std::vector<double> labels;
};

// Encodes samples [lo, hi) into batch tensors for the enabled streams,
// standardizing speed with the supplied train-split statistics.
inline EncodedBatch encode_batch(const std::vector<WindowSample>& samples,
                                 std::size_t lo, std::size_t hi,
                                 const ModelConfig& config,
                                 const ContextStats& stats) {
  require(lo < hi && hi <= samples.size(), "encode_batch: bad range [", lo, ",",
          hi, ") over ", samples.size(), " samples");
  std::size_t b_n = hi - lo;
  std::size_t m = config.frames, n = config.joints, d = config.coord_dims;
  std::size_t pairs = jcd_pair_count(n);

  EncodedBatch batch;
  batch.size = b_n;
  std::vector<double> image_buf, jcd_buf, box_buf, speed_buf;
  if (config.streams.pseudo_image) image_buf.reserve(b_n * d * m * n);
  if (config.streams.jcd) jcd_buf.reserve(b_n * m * pairs);
  if (config.streams.bbox) box_buf.reserve(b_n * m * 4);
  if (config.streams.speed) speed_buf.reserve(b_n * m);

  for (std::size_t i = lo; i < hi; ++i) {
    const WindowSample& s = samples[i];
    require(s.pose.frames == m && s.pose.joints == n && s.pose.dims == d,
            "sample ", i, ": pose is ", s.pose.frames, "x", s.pose.joints, "x",
            s.pose.dims, ", model expects ", m, "x", n, "x", d);
    if (config.streams.pseudo_image) {
      Tensor img = pseudo_image_channels_first(s.pose);
      image_buf.insert(image_buf.end(), img.data().begin(), img.data().end());
    }
    if (config.streams.jcd) {
      Tensor j = jcd(s.pose);
      jcd_buf.insert(jcd_buf.end(), j.data().begin(), j.data().end());
    }
    if (config.streams.bbox || config.streams.speed) {
      require(s.context.frames == m, "sample ", i, ": context has ",
              s.context.frames, " frames, model expects ", m);
      if (config.streams.bbox)
        box_buf.insert(box_buf.end(), s.context.boxes.begin(),
                       s.context.boxes.end());
      if (config.streams.speed) {
        require(s.context.speed_present,
                "sample ", i, ": stream 'speed' enabled but speed data absent");
        ContextFeatures std_ctx = standardize_context(s.context, stats);
        speed_buf.insert(speed_buf.end(), std_ctx.speed.begin(),
                         std_ctx.speed.end());
      }
    }
    batch.labels.push_back(static_cast<double>(s.label));
  }

  if (config.streams.pseudo_image) {
    batch.image = Tensor::from({b_n, d, m, n}, std::move(image_buf));
    batch.has_image = true;
  }
  if (config.streams.jcd) {
    batch.jcd = Tensor::from({b_n, m, pairs}, std::move(jcd_buf));
    batch.has_jcd = true;
  }
  if (config.streams.bbox) {
    batch.boxes = Tensor::from({b_n, m, 4}, std::move(box_buf));
    batch.has_boxes = true;
  }
  if (config.streams.speed) {
    batch.speed = Tensor::from({b_n, m, 1}, std::move(speed_buf));
    batch.has_speed = true;
  }
  return batch;
}

inline EncodedBatch encode_batch(const std::vector<WindowSample>& samples,
                                 const ModelConfig& config,
                                 const ContextStats& stats) {
  return encode_batch(samples, 0, samples.size(), config, stats);
}

namespace detail {

inline Tensor apply_recurrent_block(const Tensor& x, const RecurrentBlock& b) {
  switch (b.kind) {
    case RecurrentKind::ugru: return ugru_block(x, *b.ugru);
    case RecurrentKind::bigru: return bigru_block(x, *b.bigru);
    default: return gru_layer(x, *b.gru, Direction::forward);
  }
}

inline Tensor run_tower(const Tensor& x, const StreamTower& tower) {
  Tensor h = x;
  for (const auto& block : tower.blocks) h = apply_recurrent_block(h, block);
  return temporal_attention(h, tower.attn);
}

inline Tensor global_avg_pool(const Tensor& x) {
  // B x C x H x W -> B x C
  return reduce_mean(reduce_mean(x, 3), 2);
}

}  // namespace detail

// Batched forward pass. Returns one probability per sample, shape {B}.
// Train mode uses batch-norm batch statistics and live dropout (rng
// required when dropout > 0); eval mode is deterministic.
inline Tensor forward(TrouSPINet& net, const EncodedBatch& batch, Mode mode,
                      Rng* rng = nullptr) {
  const ModelConfig& c = net.config;
  require(batch.size > 0, "forward: empty batch");

  std::vector<Tensor> modal;
  if (c.streams.pseudo_image) {
    require(batch.has_image,
            "forward: stream 'pseudo_image' enabled but batch has no image data");
    Tensor summed;
    bool first = true;
    for (auto& branch : net.branches) {
      Tensor h = batch.image;
      for (auto& stage : branch.stages) {
        // Conv -> BN -> activation: normalizing the pre-activations centers
        // every channel at zero, so the activation genuinely rectifies
        // oscillatory responses and their energy survives the later global
        // average; activation-before-BN would leave mostly-positive maps
        // where the nonlinearity acts linearly and periodic structure
        // cancels out of the pooled features.
        h = atrous_conv2d(h, stage.conv, Activation::identity);
        h = batch_norm(h, stage.bn, mode);
        h = leaky_relu(h, kLeakySlope);
        if (stage.cbam_params) h = cbam(h, *stage.cbam_params);
        if (stage.se_params) h = se_block(h, *stage.se_params);
        h = max_pool2d(h);
      }
      Tensor vec = detail::global_avg_pool(h);
      summed = first ? vec : summed + vec;
      first = false;
    }
    modal.push_back(summed);
  }
  if (c.streams.jcd) {
    require(batch.has_jcd,
            "forward: stream 'jcd' enabled but batch has no JCD data");
    modal.push_back(detail::run_tower(batch.jcd, *net.jcd_tower));
  }
  if (c.streams.bbox) {
    require(batch.has_boxes,
            "forward: stream 'bbox' enabled but batch has no box data");
    modal.push_back(detail::run_tower(batch.boxes, *net.bbox_tower));
  }
  if (c.streams.speed) {
    require(batch.has_speed,
            "forward: stream 'speed' enabled but batch has no speed data");
    modal.push_back(detail::run_tower(batch.speed, *net.speed_tower));
  }

  Tensor fused = modality_attention(modal, net.fusion);
  if (mode == Mode::train && c.dropout > 0) {
    require(rng != nullptr, "forward: train mode with dropout needs an rng");
    fused = dropout(fused, c.dropout, mode, *rng);
  }
  Tensor out = dense(fused, net.head, Activation::sigmoid_act);
  return reshape(out, {batch.size});
}

// ---------------------------------------------------------------------------
// Profiler
// ---------------------------------------------------------------------------

struct ProfileRow {
  std::string name;
  std::size_t params{0};
  std::size_t flops{0};
};

struct ProfileReport {
  std::vector<ProfileRow> rows;
  std::size_t total_params{0};
  std::size_t total_flops{0};
  std::size_t weight_bytes{0};

  std::string to_csv() const {
    std::ostringstream out;
    out << "name,params,flops\n";
    for (const auto& r : rows)
      out << r.name << "," << r.params << "," << r.flops << "\n";
    out << "total," << total_params << "," << total_flops << "\n";
    return out.str();
  }
};

namespace detail {

// FLOP counting conventions (per single window, eval-mode forward):
//   conv: 2*K*C*kh*kw*H_out*W_out; dense: 2*in*out + out;
//   GRU cell: 3*(2*in*h + 2*h^2 + 3*h) per step;
//   attention and elementwise ops: 1 FLOP per scalar operation.
inline std::size_t dense_flops(std::size_t in, std::size_t out) {
  return 2 * in * out + out;
}

inline std::size_t gru_cell_flops(std::size_t in, std::size_t h) {
  return 3 * (2 * in * h + 2 * h * h + 3 * h);
}

inline std::size_t cbam_flops(std::size_t C, std::size_t H, std::size_t W) {
  std::size_t r = std::max<std::size_t>(1, C / kAttentionReduction);
  std::size_t plane = H * W;
  std::size_t mlp = dense_flops(C, r) + r + dense_flops(r, C);  // dense,relu,dense
  std::size_t channel = 2 * C * plane        // avg + max descriptors
                        + 2 * mlp + C        // shared MLP on both, summed
                        + C                  // sigmoid
                        + C * plane;         // gate applied
  std::size_t spatial = 2 * C * plane              // channel mean + max maps
                        + 2 * 1 * 2 * 49 * plane   // 7x7 conv, 2->1 channels
                        + plane                    // sigmoid
                        + C * plane;               // gate applied
  return channel + spatial;
}

inline std::size_t se_flops(std::size_t C, std::size_t H, std::size_t W) {
  std::size_t r = std::max<std::size_t>(1, C / kAttentionReduction);
  std::size_t plane = H * W;
  return C * plane + dense_flops(C, r) + r + dense_flops(r, C) + C + C * plane;
}

inline std::size_t temporal_attention_flops(std::size_t m, std::size_t F,
                                            std::size_t A) {
  return m * 2 * F * A   // keys W1*h_t
         + 2 * F * A     // query W2*h_m
         + m * 2 * A     // add query + bias
         + m * A         // tanh
         + m * 2 * A     // score dot with v
         + 3 * m         // softmax (exp, sum, divide)
         + 2 * m * F;    // weighted sum
}

inline std::size_t modality_attention_flops(std::size_t k, std::size_t F,
                                            std::size_t A) {
  return k * (2 * F * A + A + A + 2 * A) + 3 * k + 2 * k * F;
}

inline std::size_t recurrent_block_params(const RecurrentBlock& b,
                                          std::size_t in, std::size_t h) {
  std::size_t cell = 3 * (in * h + h * h + h);
  switch (b.kind) {
    case RecurrentKind::ugru:
      return cell + 3 * ((h + in) * h + h * h + h);
    case RecurrentKind::bigru:
      return 2 * cell;
    default:
      return cell;
  }
}

inline std::size_t recurrent_block_flops(const RecurrentBlock& b, std::size_t m,
                                         std::size_t in, std::size_t h) {
  switch (b.kind) {
    case RecurrentKind::ugru:
      return m * gru_cell_flops(in, h) + m * gru_cell_flops(h + in, h);
    case RecurrentKind::bigru:
      return 2 * m * gru_cell_flops(in, h) + m * h;  // both sweeps + sum merge
    default:
      return m * gru_cell_flops(in, h);
  }
}

}  // namespace detail

inline ProfileReport profile(const TrouSPINet& net) {
  const ModelConfig& c = net.config;
  ProfileReport rep;
  auto add = [&](const std::string& name, std::size_t params, std::size_t flops) {
    rep.rows.push_back({name, params, flops});
    rep.total_params += params;
    rep.total_flops += flops;
  };

  if (c.streams.pseudo_image) {
    for (std::size_t bi = 0; bi < net.branches.size(); ++bi) {
      std::size_t h = c.frames, w = c.joints;
      for (std::size_t s = 0; s < net.branches[bi].stages.size(); ++s) {
        std::string prefix =
            "branch" + std::to_string(bi) + ".stage" + std::to_string(s);
        std::size_t in_ch = s == 0 ? c.coord_dims : c.feature_maps;
        std::size_t k = c.feature_maps;
        std::size_t r = std::max<std::size_t>(1, k / kAttentionReduction);
        std::size_t mlp_params = k * r + r + r * k + k;
        add(prefix + ".conv", k * in_ch * 9 + k,
            2 * k * in_ch * 9 * h * w + k * h * w);  // conv + activation
        if (c.attention_kind == AttentionKind::cbam)
          add(prefix + ".cbam", mlp_params + (2 * 49 + 1),
              detail::cbam_flops(k, h, w));
        else if (c.attention_kind == AttentionKind::se)
          add(prefix + ".se", mlp_params, detail::se_flops(k, h, w));
        add(prefix + ".bn", 2 * k, 2 * k * h * w);
        h /= 2;
        w /= 2;
        add(prefix + ".pool", 0, 3 * k * h * w);
      }
      add("branch" + std::to_string(bi) + ".gap", 0, c.feature_maps * h * w);
    }
    if (net.branches.size() > 1)
      add("branch_sum", 0, (net.branches.size() - 1) * c.feature_maps);
  }

  auto add_tower = [&](const std::string& name, const StreamTower& tower,
                       std::size_t in_dim) {
    for (std::size_t b = 0; b < tower.blocks.size(); ++b) {
      std::size_t in = b == 0 ? in_dim : c.hidden;
      add(name + ".block" + std::to_string(b),
          detail::recurrent_block_params(tower.blocks[b], in, c.hidden),
          detail::recurrent_block_flops(tower.blocks[b], c.frames, in, c.hidden));
    }
    add(name + ".attn", 2 * c.hidden * c.hidden + 2 * c.hidden,
        detail::temporal_attention_flops(c.frames, c.hidden, c.hidden));
  };
  if (net.jcd_tower) add_tower("jcd", *net.jcd_tower, jcd_pair_count(c.joints));
  if (net.bbox_tower) add_tower("bbox", *net.bbox_tower, 4);
  if (net.speed_tower) add_tower("speed", *net.speed_tower, 1);

  std::size_t k_modal = (c.streams.pseudo_image ? 1 : 0) +
                        (c.streams.jcd ? 1 : 0) + (c.streams.bbox ? 1 : 0) +
                        (c.streams.speed ? 1 : 0);
  add("fusion", c.hidden * c.hidden + 2 * c.hidden,
      detail::modality_attention_flops(k_modal, c.hidden, c.hidden));
  add("head", c.hidden + 1, detail::dense_flops(c.hidden, 1));

  rep.weight_bytes = rep.total_params * 4;
  return rep;
}

inline std::size_t param_count(const TrouSPINet& net) {
  return net.store.trainable_scalar_count();
}

inline std::size_t flops_count(const TrouSPINet& net) {
  return profile(net).total_flops;
}

inline std::size_t memory_estimate(const TrouSPINet& net) {
  return param_count(net) * 4;
}

// ---------------------------------------------------------------------------
// Checkpoints: line 1 is a JSON manifest (format, config, context stats,
// entry table), followed by the raw little-endian IEEE-754 double blob of all
// parameter values in store order.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const TrouSPINet& net, const std::string& path) {
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : net.store.entries()) {
    entries.push_back({{"name", e.name},
                       {"shape", e.tensor.shape()},
                       {"offset", offset},
                       {"trainable", e.trainable}});
    offset += e.tensor.size();
  }
  nlohmann::json manifest{
      {"format", "trouspi-checkpoint"},
      {"version", 1},
      {"config", model_config_to_json(net.config)},
      {"context_stats",
       {{"speed_mean", net.context_stats.speed_mean},
        {"speed_std", net.context_stats.speed_std}}},
      {"entries", entries},
      {"total_values", offset}};

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(out.good(), "cannot open checkpoint for writing: ", tmp);
    out << manifest.dump() << "\n";
    for (const auto& e : net.store.entries()) {
      const auto& d = e.tensor.data();
      out.write(reinterpret_cast<const char*>(d.data()),
                static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
    require(out.good(), "checkpoint write failed: ", tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0,
          "cannot move checkpoint into place: ", path);
}

inline TrouSPINet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint: ", path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)),
          "corrupt checkpoint (empty file): ", path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail("corrupt checkpoint (bad manifest): ", path, ": ", e.what());
  }
  require(manifest.value("format", "") == "trouspi-checkpoint",
          "corrupt checkpoint (unrecognized format): ", path);
  require(manifest.value("version", -1) == 1,
          "unsupported checkpoint version in ", path);

  TrouSPINet net = build(model_config_from_json(manifest.at("config")));
  if (manifest.contains("context_stats")) {
    net.context_stats.speed_mean =
        manifest["context_stats"].value("speed_mean", 0.0);
    net.context_stats.speed_std =
        manifest["context_stats"].value("speed_std", 1.0);
  }

  const auto& entries = manifest.at("entries");
  require(entries.size() == net.store.entries().size(),
          "checkpoint entry count mismatch: file has ", entries.size(),
          ", model expects ", net.store.entries().size());
  std::size_t total = manifest.at("total_values").get<std::size_t>();

  std::vector<double> blob(total);
  in.read(reinterpret_cast<char*>(blob.data()),
          static_cast<std::streamsize>(total * sizeof(double)));
  require(static_cast<std::size_t>(in.gcount()) == total * sizeof(double),
          "corrupt checkpoint (truncated blob): ", path);

  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& spec = entries[i];
    const auto& e = net.store.entries()[i];
    require(spec.at("name").get<std::string>() == e.name,
            "checkpoint entry ", i, " name mismatch: file has '",
            spec.at("name").get<std::string>(), "', model expects '", e.name,
            "'");
    Shape shape = spec.at("shape").get<Shape>();
    require(shape == e.tensor.shape(), "checkpoint entry '", e.name,
            "' shape mismatch: file has ", shape_str(shape), ", model expects ",
            shape_str(e.tensor.shape()));
    std::size_t off = spec.at("offset").get<std::size_t>();
    require(off + e.tensor.size() <= total,
            "corrupt checkpoint (entry '", e.name, "' overruns blob)");
    auto& dst = const_cast<Tensor&>(e.tensor).mutable_data();
    std::copy(blob.begin() + off, blob.begin() + off + e.tensor.size(),
              dst.begin());
  }
  return net;
}

// ---------------------------------------------------------------------------
// Ablation variants
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& ablation_suite() {
  static const std::vector<std::string> names{
      "default",       "no-jcd", "no-parallel-branches", "gru",
      "bigru",         "no-attention", "se-attention"};
  return names;
}

inline ModelConfig variant_config(const std::string& name,
                                  ModelConfig base = ModelConfig{}) {
  ModelConfig c = base;
  if (name == "default") return c;
  if (name == "no-jcd") {
    c.streams.jcd = false;
    return c;
  }
  if (name == "no-parallel-branches") {
    c.branches = {{1, 1}};
    return c;
  }
  if (name == "gru") {
    c.recurrent_kind = RecurrentKind::gru;
    return c;
  }
  if (name == "bigru") {
    c.recurrent_kind = RecurrentKind::bigru;
    return c;
  }
  if (name == "no-attention") {
    c.attention_kind = AttentionKind::none;
    return c;
  }
  if (name == "se-attention") {
    c.attention_kind = AttentionKind::se;
    return c;
  }
  fail("unknown ablation variant: '", name, "'");
}

}  // namespace trouspi
