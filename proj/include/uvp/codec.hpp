#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "uvp/autodiff.hpp"
#include "uvp/io.hpp"
#include "uvp/optim.hpp"
#include "uvp/rng.hpp"
#include "uvp/tensor.hpp"

// Deterministic spatiotemporal autoencoder. Spatial compression is f_s = 2^b
// via b strided stages; temporal compression is f_t = 2^a applied on the last
// a stages, mapping odd lengths L -> (L-1)/2 + 1 so the first frame is
// preserved whole: T' = (T-1)/f_t + 1.
namespace uvp::codec {

inline constexpr uint32_t kCheckpointVersion = 1;

struct CodecConfig {
  int channels = 8;
  int f_t = 4;
  int f_s = 8;
  int base_width = 12;
  int tail_width_cfg = 0;  // full-resolution decoder width; 0 -> base_width/2

  int spatial_stages() const {
    int b = 0, v = f_s;
    while (v > 1) {
      check(v % 2 == 0, "f_s must be a power of 2");
      v /= 2;
      ++b;
    }
    return b;
  }
  int temporal_stages() const {
    int a = 0, v = f_t;
    while (v > 1) {
      check(v % 2 == 0, "f_t must be a power of 2");
      v /= 2;
      ++a;
    }
    return a;
  }
  int width_of(int stage) const { return base_width * (stage + 1); }
  int tail_width() const {
    return tail_width_cfg > 0 ? tail_width_cfg : std::max(4, base_width / 2);
  }

  void validate() const {
    check(channels >= 4, "codec requires C >= 4");
    check(f_t >= 1 && f_s >= 1, "compression factors must be >= 1");
    check(temporal_stages() <= spatial_stages(),
          "f_t stages cannot exceed f_s stages in this architecture");
  }
};

struct LatentShape {
  int64_t t = 0, h = 0, w = 0;
};

// Pure shape arithmetic, usable for dry runs without allocating anything.
inline LatentShape latent_shape(int64_t T, int64_t H, int64_t W, int f_t, int f_s) {
  if (T < 1 || (T - 1) % f_t != 0)
    throw ShapeError("encode: T=" + std::to_string(T) + " requires (T-1) divisible by f_t=" +
                     std::to_string(f_t));
  if (H % f_s != 0 || W % f_s != 0)
    throw ShapeError("encode: H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                     " must be divisible by f_s=" + std::to_string(f_s));
  return {(T - 1) / f_t + 1, H / f_s, W / f_s};
}

struct LatentGrid {
  Tensor values;  // T',H',W',C
  int64_t src_frames = 0, src_height = 0, src_width = 0;
  int f_t = 4, f_s = 8;

  void validate() const {
    LatentShape s = latent_shape(src_frames, src_height, src_width, f_t, f_s);
    check_shape(values.rank() == 4 && values.dim(0) == s.t && values.dim(1) == s.h &&
                    values.dim(2) == s.w,
                "latent grid values " + values.shape_str() + " inconsistent with metadata");
  }
};

class Codec {
public:
  explicit Codec(CodecConfig cfg = {}) : cfg_(cfg) { build(); }

  const CodecConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const Tensor& latent_mean() const { return lat_mean_; }
  const Tensor& latent_std() const { return lat_std_; }
  void set_latent_stats(Tensor mean, Tensor stddev) {
    check_shape(mean.numel() == cfg_.channels && stddev.numel() == cfg_.channels,
                "latent stats must be per channel");
    lat_mean_ = std::move(mean);
    lat_std_ = std::move(stddev);
  }

  // ---- graph builders -----------------------------------------------------

  // Temporal kernels ride only on the strided temporal stages (encoder) and
  // the deepest decoder stage; the full-resolution tail stays spatial and
  // narrow, which is where almost all of the flops would otherwise go.
  ad::Var encode_var(const ad::Var& video) const {
    const auto& s = video->val.shape;
    check_shape(video->val.rank() == 4 && s[3] == 3, "encode expects [T,H,W,3]");
    latent_shape(s[0], s[1], s[2], cfg_.f_t, cfg_.f_s);  // shape preconditions

    int b = cfg_.spatial_stages(), a = cfg_.temporal_stages();
    ad::Var x = video;
    for (int i = 0; i < b; ++i) {
      bool temporal = i >= b - a;
      x = conv(x, "enc.down" + std::to_string(i), temporal,
               {temporal ? int64_t{2} : int64_t{1}, 2, 2});
      x = ad::silu(x);
    }
    x = conv1x1(x, "enc.head");
    return x;
  }

  ad::Var decode_var(const ad::Var& latents, int64_t src_T) const {
    check_shape(latents->val.rank() == 4 && latents->val.dim(3) == cfg_.channels,
                "decode expects [T',H',W',C]");
    int b = cfg_.spatial_stages(), a = cfg_.temporal_stages();
    ad::Var x = conv1x1(latents, "dec.head");
    x = ad::silu(x);
    for (int i = b - 1; i >= 0; --i) {
      if (i == 0) {
        // half-resolution refinement before the final upsample
        x = ad::silu(conv(x, "dec.mid", false));
      }
      bool temporal = i >= b - a;
      if (temporal) x = ad::upsample_time_linear(x);
      x = ad::upsample_space_bilinear2(x);
      x = conv(x, "dec.up" + std::to_string(i), i == b - 1);
      x = ad::silu(x);
    }
    x = conv(x, "dec.out", false);
    x = ad::sigmoid(x);
    check_shape(x->val.dim(0) == src_T, "decode: reconstructed frame count mismatch");
    return x;
  }

  // ---- tensor API ----------------------------------------------------------

  LatentGrid encode(const Tensor& video) const {
    LatentGrid g;
    g.values = encode_var(ad::constant(video))->val;
    g.src_frames = video.dim(0);
    g.src_height = video.dim(1);
    g.src_width = video.dim(2);
    g.f_t = cfg_.f_t;
    g.f_s = cfg_.f_s;
    return g;
  }

  Tensor decode(const LatentGrid& g) const {
    g.validate();
    return decode_var(ad::constant(g.values), g.src_frames)->val;
  }

  // standardized latents are what the diffusion backbone consumes
  Tensor standardize(const Tensor& lat) const {
    Tensor out = lat;
    int64_t C = cfg_.channels;
    int64_t n = lat.numel() / C;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < C; ++c)
        out[i * C + c] = (lat[i * C + c] - lat_mean_[c]) / lat_std_[c];
    return out;
  }

  Tensor destandardize(const Tensor& lat) const {
    Tensor out = lat;
    int64_t C = cfg_.channels;
    int64_t n = lat.numel() / C;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < C; ++c) out[i * C + c] = lat[i * C + c] * lat_std_[c] + lat_mean_[c];
    return out;
  }

  ad::Var destandardize_var(const ad::Var& lat) const {
    int64_t C = cfg_.channels;
    int64_t n = lat->val.numel() / C;
    ad::Var flat = ad::reshape(lat, {n, C});
    ad::Var scaled = ad::mul_rowvec(flat, ad::constant(lat_std_));
    ad::Var shifted = ad::add_rowvec(scaled, ad::constant(lat_mean_));
    return ad::reshape(shifted, lat->val.shape);
  }

  void init_weights(Rng& rng) {
    for (auto& p : params_.all()) {
      Tensor& t = p->value();
      if (p->name.find(".b") != std::string::npos) {
        std::fill(t.v.begin(), t.v.end(), 0.0);
      } else {
        // fan-in scaled
        int64_t fan_in = t.numel() / t.shape.back();
        double s = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& x : t.v) x = s * rng.gaussian();
      }
    }
  }

  uint64_t weights_hash() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_.all()) {
      h = fnv1a(p->name, h);
      h = fnv1a(p->value().v.data(), p->value().v.size() * sizeof(double), h);
    }
    return h;
  }

  void save(const std::filesystem::path& path) const {
    io::Blob b;
    b.kind = "uvp-codec";
    b.version = kCheckpointVersion;
    b.put("channels", Tensor::scalar(cfg_.channels));
    b.put("f_t", Tensor::scalar(cfg_.f_t));
    b.put("f_s", Tensor::scalar(cfg_.f_s));
    b.put("base_width", Tensor::scalar(cfg_.base_width));
    b.put("tail_width", Tensor::scalar(cfg_.tail_width()));
    b.put("latent_mean", lat_mean_);
    b.put("latent_std", lat_std_);
    params_.save_into(b, "p.");
    io::save_blob(path, b);
  }

  static Codec load(const std::filesystem::path& path) {
    io::Blob b = io::load_blob(path, "uvp-codec", kCheckpointVersion);
    CodecConfig cfg;
    cfg.channels = static_cast<int>(b.number("channels"));
    cfg.f_t = static_cast<int>(b.number("f_t"));
    cfg.f_s = static_cast<int>(b.number("f_s"));
    cfg.base_width = static_cast<int>(b.number("base_width"));
    cfg.tail_width_cfg = static_cast<int>(b.number("tail_width"));
    Codec c(cfg);
    c.params_.load_from(b, "p.");
    c.lat_mean_ = b.tensor("latent_mean");
    c.lat_std_ = b.tensor("latent_std");
    return c;
  }

private:
  void build() {
    cfg_.validate();
    int b = cfg_.spatial_stages(), a = cfg_.temporal_stages();
    auto add_conv = [&](const std::string& name, int64_t kt, int64_t kh, int64_t kw,
                        int64_t ci, int64_t co) {
      params_.add(name + ".w", Tensor({kt, kh, kw, ci, co}));
      params_.add(name + ".b", Tensor({co}));
    };
    for (int i = 0; i < b; ++i) {
      bool temporal = i >= b - a;
      add_conv("enc.down" + std::to_string(i), temporal ? 3 : 1, 3, 3,
               i == 0 ? 3 : cfg_.width_of(i - 1), cfg_.width_of(i));
    }
    add_conv("enc.head", 1, 1, 1, cfg_.width_of(b - 1), cfg_.channels);

    add_conv("dec.head", 1, 1, 1, cfg_.channels, cfg_.width_of(b - 1));
    for (int i = b - 1; i >= 0; --i) {
      int64_t ci = cfg_.width_of(i);
      int64_t co = i == 0 ? cfg_.tail_width() : cfg_.width_of(i - 1);
      if (i == 0) add_conv("dec.mid", 1, 3, 3, ci, ci);
      add_conv("dec.up" + std::to_string(i), i == b - 1 ? 3 : 1, 3, 3, ci, co);
    }
    add_conv("dec.out", 1, 3, 3, cfg_.tail_width(), 3);

    lat_mean_ = Tensor::zeros({cfg_.channels});
    lat_std_ = Tensor::full({cfg_.channels}, 1.0);
    Rng init(0x0dec0dec);
    init_weights(init);
  }

  ad::Var conv(const ad::Var& x, const std::string& name, bool temporal_kernel,
               std::array<int64_t, 3> stride = {1, 1, 1}) const {
    ad::Conv3dSpec sp;
    sp.kernel = {temporal_kernel ? 3 : 1, 3, 3};
    sp.stride = stride;
    sp.pad = {temporal_kernel ? 1 : 0, 1, 1};
    return ad::conv3d(x, params_.find(name + ".w")->var, params_.find(name + ".b")->var, sp);
  }

  ad::Var conv1x1(const ad::Var& x, const std::string& name) const {
    ad::Conv3dSpec sp;
    sp.kernel = {1, 1, 1};
    sp.stride = {1, 1, 1};
    sp.pad = {0, 0, 0};
    return ad::conv3d(x, params_.find(name + ".w")->var, params_.find(name + ".b")->var, sp);
  }

  CodecConfig cfg_;
  ParamStore params_;
  Tensor lat_mean_, lat_std_;
};

// ---------------------------------------------------------------------------
// training

struct CodecTrainConfig {
  int64_t steps = 800;
  int64_t batch = 1;
  double lr = 2e-3;
  uint64_t seed = 0;
  double holdout_rmse_threshold = 0.2;  // postcondition gate
  bool hold_out_last = true;
  int64_t log_every = 100;
};

struct CodecTrainResult {
  double final_loss = 0;
  double holdout_rmse = 0;
  std::vector<double> loss_history;
};

// Joint reconstruction training over RGB clips plus every ambient-encoded
// modality video. Seeded and bit-reproducible.
inline CodecTrainResult train_codec(Codec& codec, const std::vector<Tensor>& videos,
                                    const CodecTrainConfig& tc,
                                    std::FILE* log = nullptr) {
  check(!videos.empty(), "train_codec: empty dataset");
  size_t train_count = videos.size();
  const Tensor* holdout = nullptr;
  if (tc.hold_out_last && videos.size() >= 2) {
    train_count = videos.size() - 1;
    holdout = &videos.back();
  }

  Rng rng(tc.seed ^ 0xc0dec0dell);
  Adam adam;
  CodecTrainResult out;
  for (int64_t step = 0; step < tc.steps; ++step) {
    codec.params().zero_grads();
    ad::Var loss;
    for (int64_t bi = 0; bi < tc.batch; ++bi) {
      const Tensor& v = videos[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(train_count)))];
      ad::Var x = ad::constant(v);
      ad::Var rec = codec.decode_var(codec.encode_var(x), v.dim(0));
      ad::Var d = ad::sub(rec, x);
      ad::Var mse = ad::mean(ad::mul(d, d));
      loss = loss ? ad::add(loss, mse) : mse;
    }
    loss = ad::scale(loss, 1.0 / static_cast<double>(tc.batch));
    double lv = loss->val[0];
    if (!std::isfinite(lv))
      throw Error("train_codec: loss diverged to NaN/Inf at step " + std::to_string(step));
    ad::backward(loss);
    adam.step(codec.params(), tc.lr, 1.0, step);
    out.loss_history.push_back(lv);
    out.final_loss = lv;
    if (log && (step % tc.log_every == 0 || step + 1 == tc.steps))
      std::fprintf(log, "[codec] step %ld loss %.6f\n", static_cast<long>(step), lv);
  }

  // per-channel standardization stats over the training encodings
  int64_t C = codec.config().channels;
  Tensor mean = Tensor::zeros({C}), var = Tensor::zeros({C});
  int64_t count = 0;
  std::vector<Tensor> encs;
  for (size_t i = 0; i < train_count; ++i) {
    Tensor lat = codec.encode(videos[i]).values;
    encs.push_back(lat);
    int64_t n = lat.numel() / C;
    for (int64_t j = 0; j < n; ++j)
      for (int64_t c = 0; c < C; ++c) mean[c] += lat[j * C + c];
    count += n;
  }
  for (int64_t c = 0; c < C; ++c) mean[c] /= static_cast<double>(count);
  for (const Tensor& lat : encs) {
    int64_t n = lat.numel() / C;
    for (int64_t j = 0; j < n; ++j)
      for (int64_t c = 0; c < C; ++c) {
        double d = lat[j * C + c] - mean[c];
        var[c] += d * d;
      }
  }
  Tensor stddev({C});
  for (int64_t c = 0; c < C; ++c)
    stddev[c] = std::max(std::sqrt(var[c] / static_cast<double>(count)), 1e-6);
  codec.set_latent_stats(mean, stddev);

  const Tensor& probe = holdout ? *holdout : videos.front();
  Tensor rec = codec.decode(codec.encode(probe));
  double se = 0;
  for (int64_t i = 0; i < rec.numel(); ++i) se += (rec[i] - probe[i]) * (rec[i] - probe[i]);
  out.holdout_rmse = std::sqrt(se / static_cast<double>(rec.numel()));
  if (out.holdout_rmse > tc.holdout_rmse_threshold)
    throw Error("train_codec: holdout RMSE " + std::to_string(out.holdout_rmse) +
                " exceeds threshold " + std::to_string(tc.holdout_rmse_threshold));
  return out;
}

}  // namespace uvp::codec
