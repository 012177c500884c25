// uvp: desk-scale unified video perception pipeline.
//
// Subcommands: datagen, train-codec, pretrain, train --stage latent|ambient,
// eval, infer, selftest. Exit codes: 0 success, 1 runtime failure, 2 config
// error. Every config key can be overridden by UVP_<path>__<key>=value
// environment variables or repeated --set path.key=value flags.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uvp/harness.hpp"

using namespace uvp;

int main(int argc, char** argv) {
  CLI::App app{"uvp: unified video perception at desk scale"};
  app.require_subcommand(0, 1);
  app.fallthrough();  // global flags remain valid after a subcommand

  std::string profile = "desk";
  std::string config_file;
  std::vector<std::string> sets;
  bool print_config = false;
  app.add_option("--profile", profile, "configuration profile (desk | paper-shape)");
  app.add_option("--config", config_file, "json config file merged over the profile defaults");
  app.add_option("--set", sets, "override a config key, e.g. --set stage1.steps=500");
  app.add_flag("--print-config", print_config, "dump the effective config and exit");

  std::string out_dir = "runs/desk";
  std::string data_dir;
  bool force = false;

  auto* datagen_cmd = app.add_subcommand("datagen", "generate a synthetic dataset");
  std::string dg_out = "data/desk";
  int64_t dg_clips = -1;
  int64_t dg_seed = -1;
  datagen_cmd->add_option("--out", dg_out, "dataset directory");
  datagen_cmd->add_option("--clips", dg_clips, "number of clips (overrides config)");
  datagen_cmd->add_option("--seed", dg_seed, "base seed (overrides config)");
  datagen_cmd->add_flag("--force", force, "regenerate even if outputs exist");

  auto* codec_cmd = app.add_subcommand("train-codec", "train the video autoencoder");
  codec_cmd->add_option("--data", data_dir, "dataset directory")->required();
  codec_cmd->add_option("--out", out_dir, "artifact directory");
  codec_cmd->add_flag("--force", force);

  auto* pretrain_cmd = app.add_subcommand("pretrain", "generative rectified-flow pretraining");
  pretrain_cmd->add_option("--data", data_dir)->required();
  pretrain_cmd->add_option("--out", out_dir);
  pretrain_cmd->add_flag("--force", force);

  auto* train_cmd = app.add_subcommand("train", "perception fine-tune");
  std::string stage = "latent";
  train_cmd->add_option("--stage", stage, "latent | ambient")->required();
  train_cmd->add_option("--data", data_dir)->required();
  train_cmd->add_option("--out", out_dir);
  train_cmd->add_flag("--force", force);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained model (or the gt oracle)");
  bool oracle = false;
  std::string eval_tasks;
  eval_cmd->add_option("--data", data_dir)->required();
  eval_cmd->add_option("--out", out_dir);
  eval_cmd->add_flag("--oracle", oracle, "feed ground truth as the prediction");
  eval_cmd->add_option("--tasks", eval_tasks, "comma-separated task subset");

  auto* infer_cmd = app.add_subcommand("infer", "run one clip through the model");
  std::string infer_task, infer_in, infer_out = "infer_out";
  infer_cmd->add_option("--task", infer_task)->required();
  infer_cmd->add_option("--in", infer_in, "clip_<seed> directory")->required();
  infer_cmd->add_option("--out", infer_out);
  infer_cmd->add_option("--ckpt", out_dir, "artifact directory holding the checkpoints");

  auto* selftest_cmd = app.add_subcommand("selftest", "fast oracle/invariant battery");

  CLI11_PARSE(app, argc, argv);

  try {
    harness::RunConfig rc = harness::RunConfig::load(profile, config_file, sets);
    if (print_config) {
      std::printf("%s\n", rc.tree.dump(2).c_str());
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::fprintf(stderr, "%s\n", app.help().c_str());
      return 2;
    }

    if (*datagen_cmd) {
      if (dg_clips >= 0) rc.tree["data"]["clips"] = dg_clips;
      if (dg_seed >= 0) rc.tree["seed"] = dg_seed;
      return harness::cmd_datagen(rc, dg_out, force, stderr);
    }
    if (*codec_cmd) return harness::cmd_train_codec(rc, data_dir, out_dir, force, stderr);
    if (*pretrain_cmd)
      return harness::cmd_train_stage(rc, trainer::Stage::Pretrain, data_dir, out_dir, force,
                                      stderr);
    if (*train_cmd) {
      trainer::Stage st;
      if (stage == "latent")
        st = trainer::Stage::Latent;
      else if (stage == "ambient")
        st = trainer::Stage::Ambient;
      else
        throw ConfigError("--stage must be latent or ambient, got '" + stage + "'");
      return harness::cmd_train_stage(rc, st, data_dir, out_dir, force, stderr);
    }
    if (*eval_cmd) {
      if (!eval_tasks.empty()) {
        nlohmann::json list = nlohmann::json::array();
        std::string cur;
        for (char c : eval_tasks + ",") {
          if (c == ',') {
            if (!cur.empty()) list.push_back(cur);
            cur.clear();
          } else {
            cur.push_back(c);
          }
        }
        rc.tree["eval"]["tasks"] = list;
      }
      return harness::cmd_eval(rc, data_dir, out_dir, oracle, stderr);
    }
    if (*infer_cmd)
      return harness::cmd_infer(rc, parse_task(infer_task), infer_in, infer_out, out_dir,
                                stderr);
    if (*selftest_cmd) return harness::cmd_selftest(stderr);

    std::fprintf(stderr, "%s\n", app.help().c_str());
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
