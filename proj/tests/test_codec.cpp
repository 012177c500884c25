#include "doctest.h"

#include <filesystem>

#include "gradcheck.hpp"
#include "uvp/codec.hpp"
#include "uvp/datagen.hpp"
#include "uvp/modality.hpp"

using namespace uvp;
using namespace uvp::codec;
namespace fs = std::filesystem;

namespace {

CodecConfig tiny_cfg() {
  CodecConfig cfg;
  cfg.channels = 4;
  cfg.base_width = 4;
  return cfg;
}

std::vector<Tensor> tiny_videos(int n, int64_t T = 5, int64_t H = 32, int64_t W = 32) {
  datagen::GenConfig g;
  g.frames = T;
  g.height = H;
  g.width = W;
  std::vector<Tensor> out;
  for (int i = 0; i < n; ++i) {
    datagen::SceneSpec s = datagen::sample_scene(static_cast<uint64_t>(i), g);
    datagen::VideoClip clip;
    datagen::GroundTruthBundle gt;
    datagen::render_clip(s, clip, gt);
    out.push_back(clip.rgb.to_tensor());
  }
  return out;
}

}  // namespace

TEST_CASE("latent shape arithmetic: paper and desk profiles") {
  LatentShape paper = latent_shape(81, 480, 832, 4, 8);
  CHECK(paper.t == 21);
  CHECK(paper.h == 60);
  CHECK(paper.w == 104);

  LatentShape desk = latent_shape(17, 64, 64, 4, 8);
  CHECK(desk.t == 5);
  CHECK(desk.h == 8);
  CHECK(desk.w == 8);

  // divisibility errors name the offending factor
  try {
    latent_shape(18, 64, 64, 4, 8);
    CHECK(false);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("divisible by f_t=4") != std::string::npos);
  }
  CHECK_THROWS_AS(latent_shape(17, 60, 64, 4, 8), ShapeError);
}

TEST_CASE("encode/decode shapes invert exactly") {
  Codec codec(tiny_cfg());
  Rng r(1);
  Tensor v = r.rand_uniform({5, 32, 32, 3}, 0.0, 1.0);
  LatentGrid g = codec.encode(v);
  CHECK(g.values.shape == std::vector<int64_t>{2, 4, 4, 4});
  Tensor rec = codec.decode(g);
  CHECK(rec.shape == v.shape);
  for (double x : rec.v) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }

  // all-zero latents decode to finite values in [0,1]
  LatentGrid zeros = g;
  std::fill(zeros.values.v.begin(), zeros.values.v.end(), 0.0);
  Tensor z = codec.decode(zeros);
  CHECK(z.all_finite());

  // metadata/value mismatch
  LatentGrid bad = g;
  bad.src_frames = 9;
  CHECK_THROWS_AS(codec.decode(bad), ShapeError);

  // wrong input shape
  CHECK_THROWS_AS(codec.encode(r.rand_uniform({6, 32, 32, 3}, 0, 1)), ShapeError);
}

TEST_CASE("encode is deterministic and finite under extreme inputs") {
  Codec codec(tiny_cfg());
  Rng r(2);
  Tensor v = r.rand_uniform({5, 16, 16, 3}, 0.0, 1.0);
  Tensor a = codec.encode(v).values;
  Tensor b = codec.encode(v).values;
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

  Tensor wild = v;
  wild[37] += 1e3;
  wild[911] -= 1e3;
  CHECK(codec.encode(wild).values.all_finite());
  CHECK(codec.decode(codec.encode(wild)).all_finite());
}

TEST_CASE("codec gradients match finite differences") {
  CodecConfig cfg;
  cfg.channels = 4;
  cfg.base_width = 2;
  Codec codec(cfg);
  Rng r(3);
  Tensor v = r.rand_uniform({5, 8, 8, 3}, 0.1, 0.9);

  // check a sampled subset of conv weights through the full autoencoder loss
  auto& store = codec.params();
  ad::Var x = ad::constant(v);
  ad::Var rec = codec.decode_var(codec.encode_var(x), 5);
  ad::Var d = ad::sub(rec, x);
  ad::Var loss = ad::mean(ad::mul(d, d));
  store.zero_grads();
  ad::backward(loss);

  auto eval_loss = [&]() {
    ad::Var rec2 = codec.decode_var(codec.encode_var(ad::constant(v)), 5);
    ad::Var d2 = ad::sub(rec2, ad::constant(v));
    return ad::mean(ad::mul(d2, d2))->val[0];
  };

  double worst = 0;
  Rng pick(4);
  for (auto& p : store.all()) {
    Tensor& w = p->value();
    for (int probe = 0; probe < 2; ++probe) {
      int64_t j = pick.uniform_int(w.numel());
      double orig = w[j];
      double h = 1e-5 * std::max(1.0, std::fabs(orig));
      w[j] = orig + h;
      double fp = eval_loss();
      w[j] = orig - h;
      double fm = eval_loss();
      w[j] = orig;
      double fd = (fp - fm) / (2 * h);
      double an = p->var->grad_alloc ? p->var->grad[j] : 0.0;
      double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("codec checkpoint round trip and version refusal") {
  auto dir = fs::temp_directory_path() / "uvp_codec_ckpt";
  fs::create_directories(dir);
  Codec codec(tiny_cfg());
  Rng r(5);
  Tensor v = r.rand_uniform({5, 16, 16, 3}, 0, 1);
  Tensor before = codec.encode(v).values;
  codec.save(dir / "c.ckpt");

  Codec loaded = Codec::load(dir / "c.ckpt");
  Tensor after = loaded.encode(v).values;
  for (int64_t i = 0; i < before.numel(); ++i) CHECK(before[i] == after[i]);

  // wrong kind refuses to load
  io::Blob b;
  b.kind = "uvp-backbone";
  b.version = 1;
  io::save_blob(dir / "wrong.ckpt", b);
  CHECK_THROWS(Codec::load(dir / "wrong.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("codec overfit smoke run reaches the pinned reconstruction error") {
  auto videos = tiny_videos(4);
  CodecConfig cc;
  cc.channels = 6;
  cc.base_width = 6;
  Codec codec(cc);
  CodecTrainConfig tc;
  tc.steps = 600;
  tc.batch = 2;
  tc.lr = 2e-3;
  tc.seed = 0;
  tc.hold_out_last = false;  // overfit contract is on the training clips
  tc.holdout_rmse_threshold = 1.0;
  CodecTrainResult res = train_codec(codec, videos, tc);

  double worst = 0;
  for (const Tensor& v : videos) {
    Tensor rec = codec.decode(codec.encode(v));
    double se = 0;
    for (int64_t i = 0; i < rec.numel(); ++i) se += (rec[i] - v[i]) * (rec[i] - v[i]);
    worst = std::max(worst, std::sqrt(se / static_cast<double>(rec.numel())));
  }
  INFO("final loss " << res.final_loss << " worst train rmse " << worst);
  CHECK(worst < 0.05);

  // standardized latents have roughly unit spread
  Tensor lat = codec.standardize(codec.encode(videos[0]).values);
  double m = 0;
  for (double x : lat.v) m += x;
  m /= static_cast<double>(lat.numel());
  CHECK(std::fabs(m) < 1.0);

  // destandardize inverts standardize
  Tensor raw = codec.encode(videos[0]).values;
  Tensor back = codec.destandardize(codec.standardize(raw));
  for (int64_t i = 0; i < raw.numel(); ++i)
    CHECK(back[i] == doctest::Approx(raw[i]).epsilon(1e-12));
}

TEST_CASE("codec training is seed deterministic and rejects empty datasets") {
  auto videos = tiny_videos(2, 5, 16, 16);
  CodecTrainConfig tc;
  tc.steps = 30;
  tc.batch = 1;
  tc.seed = 9;
  tc.hold_out_last = false;
  tc.holdout_rmse_threshold = 10.0;

  Codec a(tiny_cfg()), b(tiny_cfg());
  CodecTrainResult ra = train_codec(a, videos, tc);
  CodecTrainResult rb = train_codec(b, videos, tc);
  CHECK(ra.final_loss == rb.final_loss);
  CHECK(a.weights_hash() == b.weights_hash());

  Codec c(tiny_cfg());
  CHECK_THROWS(train_codec(c, {}, tc));
}
