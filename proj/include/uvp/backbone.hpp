#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "uvp/autodiff.hpp"
#include "uvp/io.hpp"
#include "uvp/optim.hpp"
#include "uvp/rng.hpp"
#include "uvp/tasks.hpp"
#include "uvp/tensor.hpp"

// The diffusion transformer. Latent tokens carry 3D rotary positions split
// across time/height/width; the task prompt is a learned embedding injected
// both as a prepended attended token and through adaptive layer-norm together
// with the timestep; per-frame learnable query tokens ride along for the
// keypoint heads.
namespace uvp::dit {

inline constexpr uint32_t kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// 3D RoPE

struct RoPEAngles {
  std::vector<double> angles;  // [temporal slots | height slots | width slots]
  int d_t = 0, d_h = 0, d_w = 0;
};

struct RoPEConfig {
  double base = 10000.0;
  std::array<int, 3> split{2, 1, 1};  // pair-slot ratio t:h:w

  int slot_unit(int head_dim) const {
    int total = split[0] + split[1] + split[2];
    if (head_dim % 2 != 0 || (head_dim / 2) % total != 0)
      throw ConfigError("head_dim " + std::to_string(head_dim) +
                        " must split into " + std::to_string(total) + " rope slot groups");
    return head_dim / 2 / total;
  }
};

// Angle for pair i of axis a: pos_a * base^(-2 i / d_a).
inline RoPEAngles rope3d_angles(double t_pos, double h_pos, double w_pos, int head_dim,
                                const RoPEConfig& rc = {}) {
  int u = rc.slot_unit(head_dim);
  RoPEAngles out;
  out.d_t = rc.split[0] * u;
  out.d_h = rc.split[1] * u;
  out.d_w = rc.split[2] * u;
  out.angles.reserve(static_cast<size_t>(head_dim / 2));
  auto axis = [&](double pos, int d) {
    for (int i = 0; i < d; ++i)
      out.angles.push_back(pos * std::pow(rc.base, -2.0 * i / static_cast<double>(d)));
  };
  axis(t_pos, out.d_t);
  axis(h_pos, out.d_h);
  axis(w_pos, out.d_w);
  return out;
}

// Plain-vector rotation; the model uses the tape op, tests use this directly.
inline std::vector<double> apply_rope(const std::vector<double>& token,
                                      const RoPEAngles& ang) {
  check_shape(token.size() == 2 * ang.angles.size(),
              "apply_rope: token width must be twice the angle count");
  std::vector<double> out(token.size());
  for (size_t p = 0; p < ang.angles.size(); ++p) {
    double c = std::cos(ang.angles[p]), s = std::sin(ang.angles[p]);
    double a = token[2 * p], b = token[2 * p + 1];
    out[2 * p] = a * c - b * s;
    out[2 * p + 1] = a * s + b * c;
  }
  return out;
}

// frame -> fractional latent position: frame * (T_latent-1)/(T-1)
inline double interp_temporal_position(int64_t frame, int64_t frames, int64_t latent_frames) {
  check(frames >= 2 && latent_frames >= 1, "interp_temporal_position: T >= 2, T' >= 1");
  check(frame >= 0 && frame < frames, "interp_temporal_position: frame out of range");
  if (latent_frames == 1) return 0.0;
  return static_cast<double>(frame) * static_cast<double>(latent_frames - 1) /
         static_cast<double>(frames - 1);
}

// ---------------------------------------------------------------------------
// backbone

struct BackboneConfig {
  int blocks = 2;
  int width = 128;
  int heads = 4;
  int mlp_ratio = 4;
  int head_hidden = 0;  // keypoint-head hidden width; 0 means 2x width
  int latent_channels = 8;
  int64_t frames = 17;  // source frames T = query token count
  int64_t latent_frames = 5, latent_height = 8, latent_width = 8;
  int joints = 16;
  RoPEConfig rope;

  int head_dim() const { return width / heads; }
  int kp_hidden() const { return head_hidden > 0 ? head_hidden : 2 * width; }

  void validate() const {
    if (width % heads != 0) throw ConfigError("backbone width must divide into heads");
    rope.slot_unit(head_dim());
    if (blocks < 1) throw ConfigError("backbone needs at least one block");
    if (frames < 2) throw ConfigError("backbone needs frames >= 2");
  }
};

struct ForwardFlags {
  bool use_queries = true;
  bool mask_query_tokens = true;  // video/prompt tokens cannot attend to queries
};

struct ForwardOut {
  ad::Var v_pred;     // [T'*H'*W', C]
  ad::Var query_out;  // [T, width] when queries ran, null otherwise
};

class Backbone {
public:
  explicit Backbone(BackboneConfig cfg = {}) : cfg_(cfg) { build(); }

  const BackboneConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  int64_t forward_count() const { return forward_count_->load(); }
  void reset_forward_count() { forward_count_->store(0); }

  // zero_final gives identity blocks and zero v_pred at init; gradcheck uses
  // all-random weights instead
  void init_weights(Rng& rng, bool zero_final = true) {
    for (auto& p : params_.all()) {
      Tensor& t = p->value();
      bool zero = p->name.find(".b") != std::string::npos;
      bool ada = p->name.find("ada") != std::string::npos;
      bool final_out = p->name == "final.out.w";
      if (zero || (zero_final && (ada || final_out))) {
        std::fill(t.v.begin(), t.v.end(), 0.0);
        continue;
      }
      if (p->name == "query.pos_h") {
        for (int64_t i = 0; i < t.numel(); ++i)
          t[i] = rng.uniform(0.0, static_cast<double>(cfg_.latent_height - 1));
        continue;
      }
      if (p->name == "query.pos_w") {
        for (int64_t i = 0; i < t.numel(); ++i)
          t[i] = rng.uniform(0.0, static_cast<double>(cfg_.latent_width - 1));
        continue;
      }
      int64_t fan_in = t.rank() >= 2 ? t.dim(0) : t.numel();
      double s = (zero_final ? 1.0 : 0.5) / std::sqrt(static_cast<double>(fan_in));
      for (auto& x : t.v) x = s * rng.gaussian();
    }
  }

  ad::Var prompt_embedding(Task task) const {
    return ad::gather_rows(params_.find("prompt.table")->var,
                           {static_cast<int64_t>(task)});
  }

  ForwardOut forward(const ad::Var& latents, Task task, double t,
                     const ForwardFlags& flags = {}) const {
    check(t >= 0.0 && t <= 1.0, "forward: timestep must lie in [0,1]");
    check_shape(latents->val.rank() == 4 && latents->val.dim(3) == cfg_.latent_channels,
                "forward expects [T',H',W',C] latents, got " + latents->val.shape_str());
    ++*forward_count_;

    const int64_t Tl = latents->val.dim(0), Hl = latents->val.dim(1), Wl = latents->val.dim(2);
    const int64_t N = Tl * Hl * Wl;
    const int64_t D = cfg_.width;
    const int hd = cfg_.head_dim();
    const int64_t Tq = flags.use_queries ? cfg_.frames : 0;
    const int64_t S = 1 + N + Tq;

    // token embedding
    ad::Var vid = ad::reshape(latents, {N, cfg_.latent_channels});
    vid = ad::add_rowvec(ad::matmul(vid, params_.find("in.w")->var),
                         params_.find("in.b")->var);

    ad::Var prompt_tok = prompt_embedding(task);

    // rope angle rows: [S, hd/2]; constant for prompt+video, learnable spatial
    // positions for the queries
    const int64_t slots = hd / 2;
    Tensor const_ang({1 + N, slots});
    for (int64_t n = 0; n < N; ++n) {
      int64_t tp = n / (Hl * Wl), hp = (n / Wl) % Hl, wp = n % Wl;
      RoPEAngles a = rope3d_angles(static_cast<double>(tp), static_cast<double>(hp),
                                   static_cast<double>(wp), hd, cfg_.rope);
      for (int64_t p = 0; p < slots; ++p) const_ang[(1 + n) * slots + p] = a.angles[p];
    }
    ad::Var angles = ad::constant(const_ang);
    ad::Var x;
    if (Tq > 0) {
      ad::Var qtok = params_.find("query.tokens")->var;
      x = ad::concat_rows({prompt_tok, vid, qtok});

      int u = cfg_.rope.slot_unit(hd);
      int d_t = cfg_.rope.split[0] * u, d_h = cfg_.rope.split[1] * u, d_w = cfg_.rope.split[2] * u;
      Tensor tq_ang({Tq, d_t});
      for (int64_t f = 0; f < Tq; ++f) {
        double tp = interp_temporal_position(f, cfg_.frames, Tl);
        for (int i = 0; i < d_t; ++i)
          tq_ang[f * d_t + i] = tp * std::pow(cfg_.rope.base, -2.0 * i / static_cast<double>(d_t));
      }
      Tensor fh({d_h}), fw({d_w});
      for (int i = 0; i < d_h; ++i) fh[i] = std::pow(cfg_.rope.base, -2.0 * i / static_cast<double>(d_h));
      for (int i = 0; i < d_w; ++i) fw[i] = std::pow(cfg_.rope.base, -2.0 * i / static_cast<double>(d_w));
      ad::Var q_ang = ad::concat_rows(
          {ad::transpose2d(ad::constant(tq_ang)),
           ad::transpose2d(ad::outer_const(params_.find("query.pos_h")->var, fh)),
           ad::transpose2d(ad::outer_const(params_.find("query.pos_w")->var, fw))});
      angles = ad::concat_rows({angles, ad::transpose2d(q_ang)});
    } else {
      x = ad::concat_rows({prompt_tok, vid});
    }

    // conditioning vector: timestep mlp plus the prompt embedding
    ad::Var cond = timestep_embedding(t);
    cond = ad::add_rowvec(ad::matmul(cond, params_.find("tmlp1.w")->var),
                          params_.find("tmlp1.b")->var);
    cond = ad::silu(cond);
    cond = ad::add_rowvec(ad::matmul(cond, params_.find("tmlp2.w")->var),
                          params_.find("tmlp2.b")->var);
    cond = ad::add(cond, prompt_tok);
    ad::Var cond_act = ad::silu(cond);

    // attention mask: rows outside the query range cannot see query columns
    std::optional<Tensor> mask;
    if (Tq > 0 && flags.mask_query_tokens) {
      Tensor m = Tensor::zeros({S, S});
      double ninf = -std::numeric_limits<double>::infinity();
      for (int64_t r = 0; r < 1 + N; ++r)
        for (int64_t c = 1 + N; c < S; ++c) m[r * S + c] = ninf;
      mask = std::move(m);
    }

    for (int b = 0; b < cfg_.blocks; ++b) {
      std::string pre = "block" + std::to_string(b) + ".";
      ad::Var ada = ad::add_rowvec(ad::matmul(cond_act, params_.find(pre + "ada.w")->var),
                                   params_.find(pre + "ada.b")->var);
      ada = ad::reshape(ada, {6, D});
      auto chunk = [&](int64_t i) { return ad::slice_rows(ada, i, i + 1); };

      ad::Var h = ad::layer_norm(x);
      h = ad::add_rowvec(ad::mul_rowvec(h, ad::add_const(chunk(0), 1.0)), chunk(1));
      ad::Var attn = attention(pre, h, angles, mask ? &*mask : nullptr, S);
      x = ad::add(x, ad::mul_rowvec(attn, chunk(2)));

      ad::Var h2 = ad::layer_norm(x);
      h2 = ad::add_rowvec(ad::mul_rowvec(h2, ad::add_const(chunk(3), 1.0)), chunk(4));
      ad::Var y = ad::add_rowvec(ad::matmul(h2, params_.find(pre + "mlp1.w")->var),
                                 params_.find(pre + "mlp1.b")->var);
      y = ad::silu(y);
      y = ad::add_rowvec(ad::matmul(y, params_.find(pre + "mlp2.w")->var),
                         params_.find(pre + "mlp2.b")->var);
      x = ad::add(x, ad::mul_rowvec(y, chunk(5)));
    }

    ForwardOut out;
    {
      ad::Var fada = ad::add_rowvec(ad::matmul(cond_act, params_.find("final.ada.w")->var),
                                    params_.find("final.ada.b")->var);
      fada = ad::reshape(fada, {2, D});
      ad::Var h = ad::layer_norm(x);
      ad::Var hv = ad::add_rowvec(
          ad::mul_rowvec(h, ad::add_const(ad::slice_rows(fada, 0, 1), 1.0)),
          ad::slice_rows(fada, 1, 2));
      ad::Var video_rows = ad::slice_rows(hv, 1, 1 + N);
      out.v_pred = ad::add_rowvec(ad::matmul(video_rows, params_.find("final.out.w")->var),
                                  params_.find("final.out.b")->var);
      out.v_pred = ad::reshape(out.v_pred, {Tl, Hl, Wl, cfg_.latent_channels});
      if (Tq > 0) out.query_out = ad::slice_rows(h, 1 + N, S);
    }
    return out;
  }

  ForwardOut forward(const Tensor& latents, Task task, double t,
                     const ForwardFlags& flags = {}) const {
    return forward(ad::constant(latents), task, t, flags);
  }

  // kp2d -> sigmoid-bounded [T,K,2]; kp3d -> root-relative [T,K,3]
  ad::Var keypoint_head(const ad::Var& query_out, Task task) const {
    check(is_keypoint(task), "keypoint_head: '" + task_name(task) + "' is not a keypoint task");
    const int64_t T = query_out->val.dim(0);
    const int64_t K = cfg_.joints;
    std::string pre = task == Task::Kp2d ? "head.kp2d" : "head.kp3d";
    ad::Var h = ad::add_rowvec(ad::matmul(query_out, params_.find(pre + "1.w")->var),
                               params_.find(pre + "1.b")->var);
    h = ad::silu(h);
    h = ad::add_rowvec(ad::matmul(h, params_.find(pre + "2.w")->var),
                       params_.find(pre + "2.b")->var);
    if (task == Task::Kp2d) return ad::reshape(ad::sigmoid(h), {T, K, 2});

    ad::Var flat = ad::reshape(h, {T * K, 3});
    std::vector<int64_t> pelvis(static_cast<size_t>(T * K));
    for (int64_t f = 0; f < T; ++f)
      for (int64_t k = 0; k < K; ++k) pelvis[static_cast<size_t>(f * K + k)] = f * K;
    ad::Var rel = ad::sub(flat, ad::gather_rows(flat, pelvis));
    return ad::reshape(rel, {T, K, 3});
  }

  uint64_t weights_hash() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_.all()) {
      h = fnv1a(p->name, h);
      h = fnv1a(p->value().v.data(), p->value().v.size() * sizeof(double), h);
    }
    return h;
  }

  void save(const std::filesystem::path& path, const std::string& codec_hash = "") const {
    io::Blob b;
    b.kind = "uvp-backbone";
    b.version = kCheckpointVersion;
    b.put("blocks", Tensor::scalar(cfg_.blocks));
    b.put("width", Tensor::scalar(cfg_.width));
    b.put("heads", Tensor::scalar(cfg_.heads));
    b.put("mlp_ratio", Tensor::scalar(cfg_.mlp_ratio));
    b.put("head_hidden", Tensor::scalar(cfg_.kp_hidden()));
    b.put("latent_channels", Tensor::scalar(cfg_.latent_channels));
    b.put("frames", Tensor::scalar(static_cast<double>(cfg_.frames)));
    b.put("latent_frames", Tensor::scalar(static_cast<double>(cfg_.latent_frames)));
    b.put("latent_height", Tensor::scalar(static_cast<double>(cfg_.latent_height)));
    b.put("latent_width", Tensor::scalar(static_cast<double>(cfg_.latent_width)));
    b.put("joints", Tensor::scalar(cfg_.joints));
    b.put("rope_base", Tensor::scalar(cfg_.rope.base));
    b.put("rope_split", Tensor({3}, {static_cast<double>(cfg_.rope.split[0]),
                                     static_cast<double>(cfg_.rope.split[1]),
                                     static_cast<double>(cfg_.rope.split[2])}));
    b.put("codec_hash", codec_hash);
    params_.save_into(b, "p.");
    io::save_blob(path, b);
  }

  static Backbone load(const std::filesystem::path& path, std::string* codec_hash = nullptr) {
    io::Blob b = io::load_blob(path, "uvp-backbone", kCheckpointVersion);
    BackboneConfig cfg;
    cfg.blocks = static_cast<int>(b.number("blocks"));
    cfg.width = static_cast<int>(b.number("width"));
    cfg.heads = static_cast<int>(b.number("heads"));
    cfg.mlp_ratio = static_cast<int>(b.number("mlp_ratio"));
    cfg.head_hidden = static_cast<int>(b.number("head_hidden"));
    cfg.latent_channels = static_cast<int>(b.number("latent_channels"));
    cfg.frames = static_cast<int64_t>(b.number("frames"));
    cfg.latent_frames = static_cast<int64_t>(b.number("latent_frames"));
    cfg.latent_height = static_cast<int64_t>(b.number("latent_height"));
    cfg.latent_width = static_cast<int64_t>(b.number("latent_width"));
    cfg.joints = static_cast<int>(b.number("joints"));
    cfg.rope.base = b.number("rope_base");
    const Tensor& sp = b.tensor("rope_split");
    cfg.rope.split = {static_cast<int>(sp[0]), static_cast<int>(sp[1]), static_cast<int>(sp[2])};
    Backbone m(cfg);
    m.params_.load_from(b, "p.");
    if (codec_hash) *codec_hash = b.str("codec_hash");
    return m;
  }

private:
  void build() {
    cfg_.validate();
    const int64_t D = cfg_.width;
    const int64_t C = cfg_.latent_channels;
    auto lin = [&](const std::string& name, int64_t in, int64_t out) {
      params_.add(name + ".w", Tensor({in, out}));
      params_.add(name + ".b", Tensor({out}));
    };
    lin("in", C, D);
    params_.add("prompt.table", Tensor({kTaskCount, D}));
    lin("tmlp1", D, D);
    lin("tmlp2", D, D);
    for (int b = 0; b < cfg_.blocks; ++b) {
      std::string pre = "block" + std::to_string(b) + ".";
      lin(pre + "q", D, D);
      lin(pre + "k", D, D);
      lin(pre + "v", D, D);
      lin(pre + "out", D, D);
      lin(pre + "mlp1", D, D * cfg_.mlp_ratio);
      lin(pre + "mlp2", D * cfg_.mlp_ratio, D);
      lin(pre + "ada", D, 6 * D);
    }
    lin("final.ada", D, 2 * D);
    lin("final.out", D, C);
    params_.add("query.tokens", Tensor({cfg_.frames, D}));
    params_.add("query.pos_h", Tensor({cfg_.frames}));
    params_.add("query.pos_w", Tensor({cfg_.frames}));
    const int64_t HH = cfg_.kp_hidden();
    lin("head.kp2d1", D, HH);
    lin("head.kp2d2", HH, static_cast<int64_t>(cfg_.joints) * 2);
    lin("head.kp3d1", D, HH);
    lin("head.kp3d2", HH, static_cast<int64_t>(cfg_.joints) * 3);

    Rng init(0xd17eed);
    init_weights(init, true);
  }

  ad::Var timestep_embedding(double t) const {
    const int64_t D = cfg_.width;
    Tensor emb({1, D});
    double pos = 1000.0 * t;
    int64_t half = D / 2;
    for (int64_t i = 0; i < half; ++i) {
      double f = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
      emb[i] = std::sin(pos * f);
      emb[half + i] = std::cos(pos * f);
    }
    return ad::constant(emb);
  }

  ad::Var attention(const std::string& pre, const ad::Var& h, const ad::Var& angles,
                    const Tensor* mask, int64_t S) const {
    const int64_t D = cfg_.width;
    const int heads = cfg_.heads;
    const int64_t hd = cfg_.head_dim();
    std::vector<int64_t> head_rows(static_cast<size_t>(S * heads));
    for (int64_t s = 0; s < S; ++s)
      for (int64_t he = 0; he < heads; ++he)
        head_rows[static_cast<size_t>(s * heads + he)] = he * S + s;
    ad::Var q = ad::add_rowvec(ad::matmul(h, params_.find(pre + "q.w")->var),
                               params_.find(pre + "q.b")->var);
    ad::Var k = ad::add_rowvec(ad::matmul(h, params_.find(pre + "k.w")->var),
                               params_.find(pre + "k.b")->var);
    ad::Var v = ad::add_rowvec(ad::matmul(h, params_.find(pre + "v.w")->var),
                               params_.find(pre + "v.b")->var);

    std::vector<ad::Var> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int he = 0; he < heads; ++he) {
      std::vector<int64_t> cols(static_cast<size_t>(S));
      for (int64_t s = 0; s < S; ++s) cols[static_cast<size_t>(s)] = s * heads + he;
      ad::Var qh = ad::gather_rows(ad::reshape(q, {S * heads, hd}), cols);
      ad::Var kh = ad::gather_rows(ad::reshape(k, {S * heads, hd}), cols);
      ad::Var vh = ad::gather_rows(ad::reshape(v, {S * heads, hd}), cols);
      qh = ad::rope_rotate(qh, angles);
      kh = ad::rope_rotate(kh, angles);
      ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose2d(kh)),
                                 1.0 / std::sqrt(static_cast<double>(hd)));
      ad::Var attn = ad::softmax_rows(scores, mask);
      outs.push_back(ad::matmul(attn, vh));
    }
    ad::Var merged = ad::reshape(ad::gather_rows(ad::concat_rows(outs), head_rows), {S, D});
    return ad::add_rowvec(ad::matmul(merged, params_.find(pre + "out.w")->var),
                          params_.find(pre + "out.b")->var);
  }

  BackboneConfig cfg_;
  ParamStore params_;
  std::shared_ptr<std::atomic<int64_t>> forward_count_ =
      std::make_shared<std::atomic<int64_t>>(0);
};

}  // namespace uvp::dit
