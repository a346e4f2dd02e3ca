#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "volt/checkpoint.hpp"
#include "volt/config.hpp"
#include "volt/grad_check.hpp"
#include "volt/teacher.hpp"
#include "volt/trainer.hpp"

using namespace volt;
namespace fs = std::filesystem;

namespace {

std::string small_config(const fs::path& out, std::size_t steps, const std::string& extra = "") {
  std::ostringstream s;
  s << "[model]\npreset = volt-tiny\nvoxel_size = 0.1\npatch_size = 3\n"
    << "[train]\nsteps = " << steps << "\nbatch_size = 2\nmax_lr = 0.003\n"
    << "[augment]\nenabled = false\n"
    << "[dataset.synth]\nsynthetic = 2\nclasses = 6\nextent = 1.2, 1.2, 0.8\ndensity = 600\nseed = 5\n"
    << "[output]\ndir = " << out.string() << "\n"
    << extra;
  return s.str();
}

std::vector<SparseVoxelSet> voxel_sets(std::size_t n, std::uint64_t seed) {
  std::vector<SparseVoxelSet> out;
  for (std::size_t i = 0; i < n; ++i) {
    SceneSpec spec;
    spec.seed = seed + i;
    spec.extent = {1.2, 1.2, 0.8};
    spec.density = 700;
    out.push_back(voxelize(generate_scene(spec), 0.05));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

TEST(Config, ParsesSectionsAndDefaults) {
  const auto cfg = parse_run_config(small_config("out", 7, "[distill]\nenabled = yes\nteacher = oracle\n"), "/base");
  EXPECT_EQ(cfg.model.patch_size, 3);
  EXPECT_EQ(cfg.model.voxel_size, 0.1);
  EXPECT_EQ(cfg.train.steps, 7u);
  EXPECT_EQ(cfg.train.ema_decay, 0.999);
  EXPECT_TRUE(cfg.distill.enabled);
  EXPECT_EQ(cfg.distill.source, TeacherSource::oracle);
  ASSERT_EQ(cfg.datasets.size(), 1u);
  EXPECT_EQ(cfg.datasets[0].synthetic, 2u);
  EXPECT_EQ(cfg.datasets[0].scene.extent[2], 0.8);
  EXPECT_EQ(cfg.output_dir, fs::path("/base/out"));
  EXPECT_EQ(cfg.augment.mix_prob, 0.0);
}

TEST(Config, ErrorsCarryLineNumbers) {
  try {
    parse_run_config("[model]\npatch_size = 3\nbogus = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("model.bogus"), std::string::npos);
  }
  EXPECT_THROW(parse_run_config("[train]\nsteps = 1\nsteps = 2\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[train]\nsteps = -1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[model\n"), ConfigError);
  EXPECT_THROW(parse_run_config("novalue\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[model]\nrope = diagonal\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[model]\nrope_pairs = 12, 12, 9\n"), ConfigError);
}

TEST(Config, AblationKnobsReachModelConfig) {
  const auto cfg = parse_run_config(
      "[model]\npreset = volt-tiny\npatch_size = 7\ndecoder = big\nrope = symmetric\ncoordinate_mode = "
      "per_scene_normalized\n[dataset.a]\nclasses = 4\nsynthetic = 1\n[dataset.b]\nclasses = 9\nsynthetic = 1\n");
  const auto m = cfg.model_config();
  EXPECT_EQ(m.patch_size, 7);
  EXPECT_EQ(m.decoder.mode, DecoderMode::big);
  EXPECT_EQ(m.encoder.rope.coordinate_mode, CoordinateMode::per_scene_normalized);
  EXPECT_EQ(cfg.dataset_classes(), (std::vector<std::size_t>{4, 9}));
}

TEST(Checkpoint, RoundTripAndEmaPreference) {
  ParamStore<float> s;
  s.add("a", 2, 3, ParamKind::weight);
  s.add("b", 1, 3, ParamKind::bias);
  init_params(s, 3, 1.0);
  s.at("b").value(0, 1) = 0.5f;
  Ema<float> ema(s, 0.5);
  s.at("a").value(1, 2) = 9.0f;
  std::stringstream buf;
  write_checkpoint(checkpoint_records(s, &ema), buf);
  const auto recs = read_checkpoint(buf);
  ASSERT_EQ(recs.size(), 4u);
  EXPECT_EQ(recs[2].name, "ema/a");
  EXPECT_EQ(recs, checkpoint_records(s, &ema));

  ParamStore<float> live, avg;
  live.add("a", 2, 3, ParamKind::weight);
  live.add("b", 1, 3, ParamKind::bias);
  avg = live;
  restore_params(recs, live, false);
  restore_params(recs, avg, true);
  EXPECT_EQ(live.at("a").value, s.at("a").value);
  EXPECT_EQ(avg.at("a").value, ema.shadow()[0]);
  EXPECT_EQ(avg.at("b").value(0, 1), 0.5f);
}

TEST(Checkpoint, FormatErrors) {
  ParamStore<double> s;
  s.add("w", 2, 2, ParamKind::weight);
  std::stringstream buf;
  write_checkpoint(checkpoint_records<double>(s, nullptr), buf);
  const std::string bytes = buf.str();

  std::stringstream bad_magic(std::string("XOLTCKPT") + bytes.substr(8));
  EXPECT_THROW(read_checkpoint(bad_magic), FormatError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_checkpoint(truncated), FormatError);
  std::stringstream trailing(bytes + "x");
  EXPECT_THROW(read_checkpoint(trailing), FormatError);
  std::string v2 = bytes;
  v2[8] = 7;
  std::stringstream bad_version(v2);
  EXPECT_THROW(read_checkpoint(bad_version), FormatError);

  std::stringstream ok(bytes);
  const auto recs = read_checkpoint(ok);
  ParamStore<double> wrong;
  wrong.add("w", 2, 3, ParamKind::weight);
  EXPECT_THROW(restore_params(recs, wrong, false), FormatError);
  ParamStore<double> missing;
  missing.add("v", 2, 2, ParamKind::weight);
  EXPECT_THROW(restore_params(recs, missing, false), FormatError);
}

TEST(Teacher, UntrainedRaises) {
  TeacherModel<float> t(TeacherConfig{});
  const auto sets = voxel_sets(1, 1);
  EXPECT_THROW(t.predict(sets[0]), StateError);
}

TEST(Teacher, FitsTrainingScenesAndReloads) {
  const auto sets = voxel_sets(2, 20);
  TeacherConfig cfg;
  cfg.seed = 4;
  TeacherModel<float> t(cfg);
  const auto report = t.fit(sets);
  EXPECT_GE(report.voxel_accuracy, 0.9);
  EXPECT_EQ(t.predict(sets[1]), t.predict(sets[1]));
  const auto path = test::temp_dir("teacher") / "t.ckpt";
  t.save(path);
  TeacherModel<float> u(cfg);
  u.load(path);
  EXPECT_TRUE(u.trained());
  EXPECT_EQ(u.predict(sets[0]), t.predict(sets[0]));
}

TEST(GradCheck, LinearModelIsExact) {
  ParamStore<double> s;
  s.add("lin.weight", 3, 4, ParamKind::weight);
  init_params(s, 1, 1.0, 0.5);
  const auto a = test::random_matrix<double>(3, 4, 2);
  auto loss = [&](bool grad) {
    auto& w = s.at("lin.weight");
    double l = 0.0;
    for (std::size_t i = 0; i < w.value.data.size(); ++i) {
      l += (a.data[i] + 2.0) * w.value.data[i];
      if (grad) w.grad.data[i] += a.data[i] + 2.0;
    }
    return l;
  };
  EXPECT_LE(grad_check(s, loss, 12).max_error, 1e-10);
}

TEST(GradCheck, PlantedFaultIsCaught) {
  ParamStore<double> s;
  s.add("lin.weight", 2, 5, ParamKind::weight);
  init_params(s, 1, 1.0, 0.5);
  auto loss = [&](bool grad) {
    auto& w = s.at("lin.weight");
    double l = 0.0;
    for (std::size_t i = 0; i < w.value.data.size(); ++i) {
      l += 0.5 * w.value.data[i] * w.value.data[i] + 3.0 * w.value.data[i];
      if (grad) w.grad.data[i] += 2.0 * (w.value.data[i] + 3.0);
    }
    return l;
  };
  const auto r = grad_check(s, loss, 10);
  EXPECT_GE(r.max_error, 0.5);
  EXPECT_EQ(r.by_module().count("lin"), 1u);
}

TEST(GradCheck, ModuleNames) {
  EXPECT_EQ(module_of("embed.weight"), "tokenizer");
  EXPECT_EQ(module_of("blocks.0.attn.q.weight"), "encoder");
  EXPECT_EQ(module_of("norm.bias"), "encoder");
  EXPECT_EQ(module_of("decoder.upsample.weight"), "decoder");
  EXPECT_EQ(module_of("head.seg.0.weight"), "heads");
}

TEST(GradCheck, TinyModelEndToEnd) {
  for (const char* mode : {"none", "light", "big"}) {
    auto cfg = parse_run_config(small_config("unused", 1, ""));
    cfg.model.decoder = parse_decoder_mode(mode);
    auto scenes = load_datasets(cfg);
    for (auto& s : scenes) {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < s.cloud.size(); ++i)
        if (s.cloud.positions[i][0] < 0.5 && s.cloud.positions[i][1] < 0.5) keep.push_back(i);
      s.cloud = select_points(s.cloud, keep);
    }
    const auto r = model_grad_check(cfg, scenes, 64, 3);
    EXPECT_LE(r.max_error, 1e-4) << mode;
    for (const char* m : {"tokenizer", "encoder", "decoder", "heads"}) {
      if (std::string(mode) == "none" && std::string(m) == "decoder") continue;
      EXPECT_EQ(r.by_module().count(m), 1u) << mode << " " << m;
    }
  }
}

TEST(Trainer, ZeroLearningRateKeepsParams) {
  const auto dir = test::temp_dir("lr0");
  auto cfg = parse_run_config(small_config(dir / "a", 1));
  cfg.train.max_lr = 0.0;
  const auto one = train_loop(cfg);
  cfg.train.steps = 4;
  cfg.output_dir = dir / "b";
  const auto four = train_loop(cfg);
  for (const auto& r : four.log) EXPECT_GT(r.grad_norm, 0.0);
  std::ifstream a(one.checkpoint, std::ios::binary), b(four.checkpoint, std::ios::binary);
  auto ra = read_checkpoint(a), rb = read_checkpoint(b);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i)
    if (ra[i].name.rfind(kEmaPrefix, 0) != 0) EXPECT_EQ(ra[i], rb[i]) << ra[i].name;
}

TEST(Trainer, DeterministicRunsAreBitwiseEqual) {
  const auto dir = test::temp_dir("det");
  auto cfg = parse_run_config(small_config(dir / "a", 3));
  cfg.train.deterministic = true;
  cfg.augment = AugmentConfig{};
  cfg.augment.seed = 9;
  const auto a = train_loop(cfg);
  cfg.output_dir = dir / "b";
  const auto b = train_loop(cfg);
  EXPECT_TRUE(a.double_precision);
  EXPECT_EQ(slurp(a.metrics), slurp(b.metrics));
  EXPECT_FALSE(slurp(a.metrics).empty());
}

TEST(Trainer, LossDecreasesOnTinyRun) {
  const auto dir = test::temp_dir("dec");
  auto cfg = parse_run_config(small_config(dir, 60));
  cfg.train.log_every = 1;
  const auto s = train_loop(cfg);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) first += s.log[i].loss_total, last += s.log[s.log.size() - 1 - i].loss_total;
  EXPECT_LT(last, first);
  EXPECT_TRUE(fs::exists(dir / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
}

TEST(Trainer, NonFiniteLossAborts) {
  const auto dir = test::temp_dir("nan");
  auto cfg = parse_run_config(small_config(dir, 50));
  cfg.train.max_lr = 1e30;
  cfg.train.weight_decay = 0.0;
  EXPECT_THROW(train_loop(cfg), NumericError);
  EXPECT_TRUE(fs::exists(dir / "nan_dump.json"));
}

TEST(Trainer, EvalLoopMatchesFinalEval) {
  const auto dir = test::temp_dir("evalloop");
  const auto cfg = parse_run_config(small_config(dir, 5));
  const auto s = train_loop(cfg);
  const auto scenes = load_datasets(cfg);
  const auto r = eval_loop(cfg, s.checkpoint, scenes);
  EXPECT_DOUBLE_EQ(r.voxel_accuracy, s.final_eval.voxel_accuracy);
  EXPECT_EQ(r.point_predictions.size(), scenes.size());
}

namespace {

int run_cli(const std::string& args, const fs::path& err) {
  const std::string cmd = std::string(VOLT_CLI_PATH) + " " + args + " > /dev/null 2> " + err.string();
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

} // namespace

TEST(Cli, ErrorsAreJsonWithExitCodes) {
  const auto dir = test::temp_dir("cli");
  const auto err = dir / "err.txt";
  EXPECT_EQ(run_cli("", err), 2);
  EXPECT_NE(slurp(err).find("\"error\":\"usage\""), std::string::npos) << slurp(err);
  EXPECT_EQ(run_cli("train --config " + (dir / "missing.ini").string(), err), 1);
  EXPECT_NE(slurp(err).find("\"error\":\"config\""), std::string::npos) << slurp(err);
  {
    std::ofstream bad(dir / "bad.volt", std::ios::binary);
    bad << "garbage";
  }
  {
    std::ofstream c(dir / "run.ini");
    c << small_config(dir / "out", 1);
  }
  EXPECT_EQ(run_cli("inspect-tokens --config " + (dir / "run.ini").string() + " --scene " +
                        (dir / "bad.volt").string(),
                    err),
            1);
  EXPECT_NE(slurp(err).find("\"error\":\"format\""), std::string::npos) << slurp(err);
}

TEST(Cli, GenDataAndInspectTokens) {
  const auto dir = test::temp_dir("cli_gen");
  const auto err = dir / "err.txt";
  {
    std::ofstream spec(dir / "spec.txt");
    spec << "seed = 3\nextent = 2, 2, 1\ndensity = 300\n";
    std::ofstream c(dir / "run.ini");
    c << small_config(dir / "out", 1);
  }
  ASSERT_EQ(run_cli("gen-data --spec " + (dir / "spec.txt").string() + " --count 2 --out " + (dir / "data").string(), err), 0);
  EXPECT_TRUE(fs::exists(dir / "data" / "scene_0001.volt"));
  ASSERT_EQ(run_cli("inspect-tokens --config " + (dir / "run.ini").string() + " --scene " +
                        (dir / "data" / "scene_0000.volt").string() + " --out " + (dir / "tok.csv").string(),
                    err),
            0);
  const auto csv = slurp(dir / "tok.csv");
  EXPECT_EQ(csv.rfind("token_index,px,py,pz,occupied_slots\n", 0), 0u);
  const auto cloud = load_scene(dir / "data" / "scene_0000.volt");
  const auto tokens = patchify<float>(voxelize(cloud, 0.1), 3).size();
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), tokens + 1);
}
