#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "f2s/trainer.hpp"
#include "support.hpp"

using namespace f2s;
using namespace f2s::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("f2s_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Dataset tiny_dataset(std::size_t subjects = 10) {
  SynthConfig c;
  c.n_subjects = subjects;
  c.n = 6;
  c.s = 40;
  c.seed = 5;
  c.write_volumes = false;
  return synth_dataset(c);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.L = 1;
  c.model_dim = 8;
  c.heads = 2;
  c.batch_size = 3;
  c.epochs = 2;
  c.seed = 11;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<const TrainingSample*> pointers(const std::vector<TrainingSample>& v) {
  std::vector<const TrainingSample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace

TEST(Config, JsonRoundTripAndValidation) {
  TrainConfig c = tiny_config();
  c.ablation = Ablation::no_scc;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
  EXPECT_THROW(nlohmann::json({{"bogus", 1}}).get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"ablation", "none"}}).get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"lr", "fast"}}).get<TrainConfig>(), ConfigError);
  c.d = 7;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, HashIgnoresEpochBudgetOnly) {
  TrainConfig a = tiny_config(), b = a;
  b.epochs = 500;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.lr = 2e-3;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(TrainStep, SameSeedSameTrajectory) {
  Dataset ds = tiny_dataset(4);
  const auto samples = make_samples(ds);
  const auto batch = pointers(samples);
  TrainState a = init_state(tiny_config(), ds.n, ds.s), b = init_state(tiny_config(), ds.n, ds.s);
  for (int k = 0; k < 3; ++k) {
    const LossReport ra = train_step(a, batch), rb = train_step(b, batch);
    EXPECT_EQ(ra, rb);
  }
  EXPECT_EQ(checksum(a.gen.params()), checksum(b.gen.params()));
  EXPECT_EQ(checksum(a.disc.params()), checksum(b.disc.params()));
  TrainConfig other = tiny_config();
  other.seed = 12;
  EXPECT_NE(checksum(init_state(other, ds.n, ds.s).gen.params()), checksum(init_state(tiny_config(), ds.n, ds.s).gen.params()));
}

TEST(TrainStep, HalfStepsUpdateOneNetworkEach) {
  Dataset ds = tiny_dataset(4);
  const auto samples = make_samples(ds);
  TrainState st = init_state(tiny_config(), ds.n, ds.s);
  const std::uint64_t g0 = checksum(st.gen.params()), d0 = checksum(st.disc.params());
  int fired = 0;
  StepHooks hooks;
  hooks.before_disc_update = [&](const TrainState& s) {
    ++fired;
    EXPECT_EQ(checksum(s.gen.params()), g0);
    EXPECT_EQ(checksum(s.disc.params()), d0);
  };
  hooks.after_disc_update = [&](const TrainState& s) {
    ++fired;
    EXPECT_EQ(checksum(s.gen.params()), g0);
    EXPECT_NE(checksum(s.disc.params()), d0);
  };
  std::uint64_t d1 = 0;
  hooks.after_gen_update = [&](const TrainState& s) {
    ++fired;
    EXPECT_NE(checksum(s.gen.params()), g0);
    d1 = checksum(s.disc.params());
  };
  train_step(st, pointers(samples), &hooks);
  EXPECT_EQ(fired, 3);
  EXPECT_EQ(d1, checksum(st.disc.params()));
  EXPECT_EQ(st.disc_updates, 1u);
  EXPECT_EQ(st.gen_updates, 1u);
}

TEST(TrainStep, NoGanSkipsDiscriminator) {
  Dataset ds = tiny_dataset(4);
  const auto samples = make_samples(ds);
  TrainConfig c = tiny_config();
  c.ablation = Ablation::no_gan;
  TrainState st = init_state(c, ds.n, ds.s);
  const std::uint64_t d0 = checksum(st.disc.params());
  for (int k = 0; k < 4; ++k) {
    const LossReport r = train_step(st, pointers(samples));
    EXPECT_EQ(r.l_d, 0.0);
    EXPECT_EQ(r.l_g, 0.0);
    EXPECT_GT(r.l_mse, 0.0);
  }
  EXPECT_EQ(st.disc_updates, 0u);
  EXPECT_EQ(st.gen_updates, 4u);
  EXPECT_EQ(checksum(st.disc.params()), d0);
}

TEST(TrainStep, NoSccDropsConsistencyTerms) {
  Dataset ds = tiny_dataset(4);
  const auto samples = make_samples(ds);
  TrainConfig c = tiny_config();
  c.ablation = Ablation::no_scc;
  TrainState st = init_state(c, ds.n, ds.s);
  for (int k = 0; k < 3; ++k) {
    const LossReport r = train_step(st, pointers(samples));
    EXPECT_EQ(r.l_scc_corr, 0.0);
    EXPECT_EQ(r.l_scc_bc, 0.0);
    EXPECT_EQ(r.lambda_scc, 0.0);
    EXPECT_GT(r.l_d, 0.0);
  }
}

// Default objective and architecture. The final value averages the last ten
// steps because each step draws its own diffusion step t.
TEST(TrainStep, ReconstructionLossHalvesOnTwoSubjects) {
  SynthConfig sc;
  sc.n_subjects = 2;
  sc.seed = 5;
  sc.write_volumes = false;
  Dataset ds = synth_dataset(sc);
  const auto samples = make_samples(ds);
  TrainConfig c;
  c.batch_size = 2;
  c.seed = 11;
  TrainState st = init_state(c, ds.n, ds.s);
  std::vector<double> mse;
  for (int k = 0; k < 200; ++k) mse.push_back(train_step(st, pointers(samples)).l_mse);
  double last = 0.0;
  for (std::size_t k = mse.size() - 10; k < mse.size(); ++k) last += mse[k] / 10.0;
  EXPECT_LE(last, 0.5 * mse.front()) << "initial " << mse.front() << " final " << last;
}

TEST(TrainStep, NonFiniteInputIsDivergence) {
  Dataset ds = tiny_dataset(2);
  auto samples = make_samples(ds);
  samples[0].features(0, 0) = std::nan("");
  TrainState st = init_state(tiny_config(), ds.n, ds.s);
  EXPECT_THROW(train_step(st, pointers(samples)), DivergenceError);
}

TEST(TrainStep, RejectsEmptyAndMismatchedBatches) {
  Dataset ds = tiny_dataset(2);
  auto samples = make_samples(ds);
  TrainState st = init_state(tiny_config(), ds.n, ds.s);
  EXPECT_THROW(train_step(st, std::vector<const TrainingSample*>{}), ContractError);
  samples[0].a0 = Tensor::matrix(5, 5);
  EXPECT_THROW(train_step(st, pointers(samples)), DimensionError);
}

TEST(Checkpoint, SaveLoadRestoresEverything) {
  const fs::path dir = scratch("ckpt");
  Dataset ds = tiny_dataset(4);
  const auto samples = make_samples(ds);
  TrainState st = init_state(tiny_config(), ds.n, ds.s);
  train_step(st, pointers(samples));
  save_checkpoint(dir / "a.ckpt", st);
  TrainState back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(checksum(back.gen.params()), checksum(st.gen.params()));
  EXPECT_EQ(checksum(back.disc.params()), checksum(st.disc.params()));
  EXPECT_EQ(back.steps, st.steps);
  EXPECT_EQ(back.adam_g.step, st.adam_g.step);
  EXPECT_EQ(back.rng, st.rng);
  // Both continue identically.
  EXPECT_EQ(train_step(back, pointers(samples)), train_step(st, pointers(samples)));
  EXPECT_EQ(checksum(back.gen.params()), checksum(st.gen.params()));
}

TEST(Checkpoint, CorruptHeaderAndVersion) {
  const fs::path dir = scratch("ckpt_bad");
  Dataset ds = tiny_dataset(2);
  TrainState st = init_state(tiny_config(), ds.n, ds.s);
  save_checkpoint(dir / "a.ckpt", st);
  std::string text = slurp(dir / "a.ckpt");
  const std::string key = "\"version\":1";
  ASSERT_NE(text.find(key), std::string::npos);
  std::string bumped = text;
  bumped.replace(bumped.find(key), key.size(), "\"version\":7");
  std::ofstream(dir / "v.ckpt") << bumped;
  EXPECT_THROW(load_checkpoint(dir / "v.ckpt"), VersionError);
  std::string tampered = text;
  // Keys are sorted, so the config's lr is the first "lr" after "config".
  const std::string lr = "\"lr\":0.001";
  const std::size_t at = tampered.find(lr, tampered.find("\"config\""));
  ASSERT_NE(at, std::string::npos);
  tampered.replace(at, lr.size(), "\"lr\":0.002");
  std::ofstream(dir / "h.ckpt") << tampered;
  EXPECT_THROW(load_checkpoint(dir / "h.ckpt"), VersionError);
  std::ofstream(dir / "x.ckpt") << "{}\n";
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), FormatError);
}

TEST(Train, StepsPerEpochAndLogRows) {
  const fs::path dir = scratch("steps");
  Dataset ds = tiny_dataset(10);
  const TrainState st = train(ds, tiny_config(), dir);
  // 8 training subjects in batches of 3.
  EXPECT_EQ(st.steps, 2u * 3u);
  EXPECT_EQ(st.epoch, 2u);
  std::istringstream log(slurp(dir / kLogName));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(log, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], kLogHeader);
  EXPECT_EQ(lines[1].substr(0, 2), "1,");
  EXPECT_TRUE(fs::exists(dir / kCheckpointName));
  EXPECT_FALSE(fs::exists(dir / epoch_checkpoint_name(1)));
}

TEST(Train, ResumeIsBitwiseIdentical) {
  const fs::path full = scratch("resume_full"), part = scratch("resume_part");
  TrainConfig c = tiny_config();
  c.epochs = 3;
  Dataset d1 = tiny_dataset(10), d2 = tiny_dataset(10);
  TrainOptions keep;
  keep.keep_checkpoints = true;
  const TrainState a = train(d1, c, full, keep);
  EXPECT_TRUE(fs::exists(full / epoch_checkpoint_name(2)));

  TrainConfig one = c;
  one.epochs = 1;
  train(d2, one, part);
  TrainOptions resume;
  resume.resume = true;
  const TrainState b = train(d2, c, part, resume);
  EXPECT_EQ(checksum(a.gen.params()), checksum(b.gen.params()));
  EXPECT_EQ(checksum(a.disc.params()), checksum(b.disc.params()));
  EXPECT_EQ(slurp(full / kCheckpointName), slurp(part / kCheckpointName));
  EXPECT_EQ(slurp(full / kLogName), slurp(part / kLogName));
}

TEST(Train, ResumeWithDifferentConfigIsVersionError) {
  const fs::path dir = scratch("resume_mismatch");
  Dataset ds = tiny_dataset(10);
  TrainConfig c = tiny_config();
  c.epochs = 1;
  train(ds, c, dir);
  TrainConfig other = c;
  other.lr = 5e-3;
  other.epochs = 2;
  TrainOptions resume;
  resume.resume = true;
  EXPECT_THROW(train(ds, other, dir, resume), VersionError);
}

TEST(Train, DivergenceLeavesCheckpoint) {
  const fs::path dir = scratch("diverge");
  Dataset ds = tiny_dataset(10);
  for (auto& r : ds.subjects) r.timeseries->values(0, 0) = std::nan("");
  EXPECT_THROW(train(ds, tiny_config(), dir), DivergenceError);
  EXPECT_TRUE(fs::exists(dir / "diverged.ckpt"));
}
