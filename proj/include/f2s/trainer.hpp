#pragma once

// Alternating diffusion-GAN training with per-epoch checkpoints and
// bitwise-deterministic resumption.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "f2s/conndata.hpp"
#include "f2s/errors.hpp"
#include "f2s/losses.hpp"
#include "f2s/netarch.hpp"
#include "f2s/parallel.hpp"
#include "f2s/symdiffusion.hpp"
#include "f2s/tensorgrad.hpp"

namespace f2s {

enum class Ablation { full, no_gan, no_scc };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_gan: return "no_gan";
    case Ablation::no_scc: return "no_scc";
  }
  return "full";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "no_gan") return Ablation::no_gan;
  if (s == "no_scc") return Ablation::no_scc;
  throw ConfigError("unknown ablation '" + s + "' (expected full, no_gan or no_scc)");
}

struct TrainConfig {
  std::size_t T = 100;
  std::size_t d = 10;
  std::size_t L = 3;
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  double lambda_bc = 0.1;
  std::uint64_t seed = 1;
  double density = 0.2;
  double beta_1 = 1e-4;
  double beta_T = 0.02;
  Ablation ablation = Ablation::full;

  void validate() const {
    if (d == 0 || T % d != 0) throw ConfigError("train config: d=" + std::to_string(d) + " must divide T=" + std::to_string(T));
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
    if (!(density > 0.0 && density <= 1.0)) throw ConfigError("train config: density must be in (0, 1]");
    if (lambda_bc < 0.0) throw ConfigError("train config: lambda_bc must be >= 0");
    if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0)) throw ConfigError("train config: need 0 < beta_1 <= beta_T < 1");
  }

  ArchConfig arch(std::size_t n, std::size_t s) const { return ArchConfig{n, s, model_dim, heads, L, T, d}; }
  NoiseSchedule schedule() const { return build_schedule(T, beta_1, beta_T); }
  double d_over_t() const { return static_cast<double>(d) / static_cast<double>(T); }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"T", c.T},
                     {"d", c.d},
                     {"L", c.L},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"model_dim", c.model_dim},
                     {"heads", c.heads},
                     {"lambda_bc", c.lambda_bc},
                     {"seed", c.seed},
                     {"density", c.density},
                     {"beta_1", c.beta_1},
                     {"beta_T", c.beta_T},
                     {"ablation", to_string(c.ablation)}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::vector<std::string> known{"T", "d", "L", "epochs", "batch_size", "lr", "model_dim",
                                              "heads", "lambda_bc", "seed", "density", "beta_1", "beta_T", "ablation"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("train config: unknown key '" + k + "'");
  try {
    auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) j.at(k).get_to(field);
    };
    get("T", c.T);
    get("d", c.d);
    get("L", c.L);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("model_dim", c.model_dim);
    get("heads", c.heads);
    get("lambda_bc", c.lambda_bc);
    get("seed", c.seed);
    get("density", c.density);
    get("beta_1", c.beta_1);
    get("beta_T", c.beta_T);
    if (j.contains("ablation")) c.ablation = parse_ablation(j.at("ablation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Identifies everything that shapes the trajectory except the epoch budget,
// so a run may be resumed with a larger budget.
inline std::string config_hash(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("epochs");
  return hex64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Training samples

struct TrainingSample {
  std::string id;
  Group group = Group::NC;
  Tensor features;  // standardized series, n × s
  Tensor a0;        // empirical SC
};

inline TrainingSample make_sample(SubjectRecord& r) {
  if (!r.empirical_sc) throw DataError("subject " + r.id + " has no empirical SC");
  const auto& ts = ensure_timeseries(r);
  if (ts.n() != r.empirical_sc->n())
    throw DimensionError("subject " + r.id + ": series has " + std::to_string(ts.n()) + " ROIs but SC is " +
                         std::to_string(r.empirical_sc->n()) + "x" + std::to_string(r.empirical_sc->n()));
  return {r.id, r.group, standardize_rows(ts.values), r.empirical_sc->values};
}

inline std::vector<TrainingSample> make_samples(Dataset& ds) {
  std::vector<TrainingSample> out;
  out.reserve(ds.subjects.size());
  for (auto& r : ds.subjects) out.push_back(make_sample(r));
  return out;
}

// ---------------------------------------------------------------------------
// Training state

struct TrainState {
  TrainConfig config;
  ArchConfig arch;
  NoiseSchedule sched;
  SymmetricGraphGenerator gen;
  ConnectivityDiscriminator disc;
  tg::AdamState adam_g;
  tg::AdamState adam_d;
  std::mt19937_64 rng;
  std::size_t epoch = 0;  // completed epochs
  std::size_t steps = 0;  // completed train_step calls
  std::size_t disc_updates = 0;
  std::size_t gen_updates = 0;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline TrainState init_state(const TrainConfig& config, std::size_t n, std::size_t s) {
  config.validate();
  TrainState st;
  st.config = config;
  st.arch = config.arch(n, s);
  st.arch.validate();
  st.sched = config.schedule();
  st.gen = SymmetricGraphGenerator(st.arch, derive_seed(config.seed, 1));
  st.disc = ConnectivityDiscriminator(st.arch, derive_seed(config.seed, 2));
  st.adam_g = tg::AdamState::for_params(st.gen.params(), config.lr);
  st.adam_d = tg::AdamState::for_params(st.disc.params(), config.lr);
  st.rng.seed(derive_seed(config.seed, 3));
  return st;
}

// Order-sensitive checksum over every parameter value.
inline std::uint64_t checksum(const tg::ParameterSet& ps) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : ps)
    for (double v : p.value.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h ^= bits;
      h *= 1099511628211ull;
    }
  return h;
}

// Test hooks fired between the two half-steps of train_step.
struct StepHooks {
  std::function<void(const TrainState&)> before_disc_update;
  std::function<void(const TrainState&)> after_disc_update;
  std::function<void(const TrainState&)> after_gen_update;
};

namespace detail {
struct ItemWork {
  std::unique_ptr<Tape> tape;
  std::vector<Var> gp;
  SymmetricGraphGenerator::Output out;
  Tensor a_t_real;
  double score_real = 0.0;
  double score_fake = 0.0;
  double score_fake_rescored = 0.0;
  double l_mse = 0.0;
  double l_corr = 0.0;
  double l_bc = 0.0;
  tg::Gradients grad_d;
  tg::Gradients grad_g;
};

inline void require_finite(double v, const char* what, const TrainState& st) {
  if (!std::isfinite(v))
    throw DivergenceError(std::string("non-finite ") + what + " at epoch " + std::to_string(st.epoch) + ", step " +
                          std::to_string(st.steps));
}
}  // namespace detail

// One iteration of the alternating update. The generator step t is drawn
// once per batch from {0, d, ..., T-d}, so the noisier input sits at
// t+d in {d, 2d, ..., T}.
inline LossReport train_step(TrainState& st, std::span<const TrainingSample* const> batch, const StepHooks* hooks = nullptr) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const TrainConfig& c = st.config;
  const bool gan = c.ablation != Ablation::no_gan;
  const bool scc = c.ablation != Ablation::no_scc;
  const double dt = c.d_over_t();
  const std::size_t B = batch.size();
  const double inv_b = 1.0 / static_cast<double>(B);

  std::uniform_int_distribution<std::size_t> pick(1, c.T / c.d);
  const std::size_t t = (pick(st.rng) - 1) * c.d;
  std::vector<std::uint64_t> seeds(B);
  for (auto& s : seeds) s = st.rng();

  std::vector<detail::ItemWork> work(B);

  // Generator forward, then discriminator loss on real A_t and detached fake.
  parallel_for(B, [&](std::size_t k) {
    const TrainingSample& x = *batch[k];
    auto& w = work[k];
    std::mt19937_64 rng(seeds[k]);
    const std::size_t n = st.arch.n;
    if (x.a0.rows() != n || x.features.rows() != n || x.features.cols() != st.arch.s)
      throw DimensionError("train_step: subject " + x.id + " does not match the model size");
    const Tensor s1 = sample_symmetric_noise(n, rng);
    const Tensor s2 = sample_symmetric_noise(n, rng);
    const Tensor s3 = sample_symmetric_noise(n, rng);
    w.a_t_real = diffuse_to(x.a0, t, s1, st.sched);
    const Tensor a_next = diffuse_to(x.a0, t + c.d, s2, st.sched);
    w.tape = std::make_unique<Tape>();
    w.gp = tg::bind(*w.tape, st.gen.params(), true);
    w.out = st.gen.forward(*w.tape, w.gp, a_next, x.features, t, s3, st.sched);
    if (!gan) return;
    Tape dtape;
    const auto dp = tg::bind(dtape, st.disc.params(), true);
    const Var real = st.disc.forward(dp, dtape.constant(w.a_t_real), t);
    const Var fake = st.disc.forward(dp, dtape.constant(w.out.a_t.value()), t);
    w.score_real = real.value().item();
    w.score_fake = fake.value().item();
    const Var loss = tg::scale(tg::add(tg::square(tg::shift(real, -1.0)), tg::square(fake)), dt * inv_b);
    dtape.backward(loss);
    w.grad_d = tg::collect(dtape, dp);
  });

  LossReport rep;
  rep.lambda_scc = scc ? 1.0 : 0.0;
  if (gan) {
    std::vector<double> real(B), fake(B);
    for (std::size_t k = 0; k < B; ++k) {
      real[k] = work[k].score_real;
      fake[k] = work[k].score_fake;
    }
    rep.l_d = disc_loss(real, fake, dt);
    detail::require_finite(rep.l_d, "discriminator loss", st);
    tg::Gradients g = st.disc.params().zeros_like();
    for (auto& w : work) tg::accumulate(g, w.grad_d);
    if (hooks && hooks->before_disc_update) hooks->before_disc_update(st);
    tg::adam_step(st.disc.params(), g, st.adam_d);
    ++st.disc_updates;
    if (hooks && hooks->after_disc_update) hooks->after_disc_update(st);
  }

  // Rescore with gradients attached and update the generator.
  parallel_for(B, [&](std::size_t k) {
    const TrainingSample& x = *batch[k];
    auto& w = work[k];
    Tape& tape = *w.tape;
    const Var recon = recon_loss(w.out.a0_hat, x.a0, dt);
    w.l_mse = recon.value().item();
    Var total = tg::scale(recon, inv_b);
    if (gan) {
      const auto dp = tg::bind(tape, st.disc.params(), false);
      const Var fake = st.disc.forward(dp, w.out.a_t, t);
      w.score_fake_rescored = fake.value().item();
      total = tg::add(total, tg::scale(tg::square(tg::shift(fake, -1.0)), dt * inv_b));
    }
    if (scc) {
      const SccLoss s = scc_loss(w.out.a0_hat, x.a0, c.lambda_bc, c.density);
      w.l_corr = s.corr;
      w.l_bc = s.bc;
      total = tg::add(total, tg::scale(s.total, inv_b));
    }
    if (!std::isfinite(total.value().item())) return;  // reported below
    tape.backward(total);
    w.grad_g = tg::collect(tape, w.gp);
  });

  if (gan) {
    std::vector<double> fake(B);
    for (std::size_t k = 0; k < B; ++k) fake[k] = work[k].score_fake_rescored;
    rep.l_g = gen_adv_loss(fake, dt);
  }
  for (const auto& w : work) {
    rep.l_mse += w.l_mse * inv_b;
    rep.l_scc_corr += w.l_corr * inv_b;
    rep.l_scc_bc += w.l_bc * inv_b;
  }
  detail::require_finite(rep.l_g, "adversarial loss", st);
  detail::require_finite(rep.l_mse, "reconstruction loss", st);
  detail::require_finite(rep.l_scc_corr, "correlation loss", st);
  detail::require_finite(rep.l_scc_bc, "betweenness loss", st);

  tg::Gradients g = st.gen.params().zeros_like();
  for (auto& w : work) tg::accumulate(g, w.grad_g);
  try {
    tg::adam_step(st.gen.params(), g, st.adam_g);
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(st.epoch) + ", step " +
                          std::to_string(st.steps));
  }
  ++st.gen_updates;
  ++st.steps;
  if (hooks && hooks->after_gen_update) hooks->after_gen_update(st);
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "f2s-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {
inline nlohmann::json adam_header(const tg::AdamState& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"step", a.step}};
}

inline void adam_from_header(const nlohmann::json& j, tg::AdamState& a) {
  j.at("lr").get_to(a.lr);
  j.at("beta1").get_to(a.beta1);
  j.at("beta2").get_to(a.beta2);
  j.at("eps").get_to(a.eps);
  j.at("step").get_to(a.step);
}
}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st) {
  std::ostringstream rng;
  rng << st.rng;
  nlohmann::json h{{"format", kCheckpointFormat},
                   {"version", kCheckpointVersion},
                   {"config", st.config},
                   {"config_hash", config_hash(st.config)},
                   {"arch", st.arch},
                   {"epoch", st.epoch},
                   {"steps", st.steps},
                   {"disc_updates", st.disc_updates},
                   {"gen_updates", st.gen_updates},
                   {"rng", rng.str()},
                   {"adam_g", detail::adam_header(st.adam_g)},
                   {"adam_d", detail::adam_header(st.adam_d)}};
  std::vector<NamedBlock> blocks;
  append_blocks(blocks, "G.", st.gen.params());
  append_blocks(blocks, "G.m.", st.gen.params(), st.adam_g.m);
  append_blocks(blocks, "G.v.", st.gen.params(), st.adam_g.v);
  append_blocks(blocks, "D.", st.disc.params());
  append_blocks(blocks, "D.m.", st.disc.params(), st.adam_d.m);
  append_blocks(blocks, "D.v.", st.disc.params(), st.adam_d.v);
  write_blocks(path, std::move(h), blocks);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  auto [h, blocks] = read_blocks(path);
  if (h.value("format", "") != kCheckpointFormat) throw FormatError(path.string() + ": not a checkpoint file");
  if (h.value("version", 0) != kCheckpointVersion)
    throw VersionError(path.string() + ": checkpoint version " + h.value("version", nlohmann::json()).dump() +
                       " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  try {
    const TrainConfig cfg = h.at("config").get<TrainConfig>();
    if (config_hash(cfg) != h.at("config_hash").get<std::string>())
      throw VersionError(path.string() + ": stored config does not match its hash");
    const ArchConfig arch = h.at("arch").get<ArchConfig>();
    TrainState st = init_state(cfg, arch.n, arch.s);
    if (!(st.arch == arch)) throw VersionError(path.string() + ": architecture does not match the stored config");
    st.epoch = h.at("epoch").get<std::size_t>();
    st.steps = h.at("steps").get<std::size_t>();
    st.disc_updates = h.at("disc_updates").get<std::size_t>();
    st.gen_updates = h.at("gen_updates").get<std::size_t>();
    std::istringstream rng(h.at("rng").get<std::string>());
    rng >> st.rng;
    if (!rng) throw FormatError(path.string() + ": bad rng state");
    detail::adam_from_header(h.at("adam_g"), st.adam_g);
    detail::adam_from_header(h.at("adam_d"), st.adam_d);

    auto targets = [](tg::ParameterSet& ps) {
      std::vector<Tensor*> out;
      for (auto& p : ps) out.push_back(&p.value);
      return out;
    };
    auto state_targets = [](std::vector<Tensor>& v) {
      std::vector<Tensor*> out;
      for (auto& t : v) out.push_back(&t);
      return out;
    };
    restore_blocks(blocks, "G.", st.gen.params(), targets(st.gen.params()));
    restore_blocks(blocks, "G.m.", st.gen.params(), state_targets(st.adam_g.m));
    restore_blocks(blocks, "G.v.", st.gen.params(), state_targets(st.adam_g.v));
    restore_blocks(blocks, "D.", st.disc.params(), targets(st.disc.params()));
    restore_blocks(blocks, "D.m.", st.disc.params(), state_targets(st.adam_d.m));
    restore_blocks(blocks, "D.v.", st.disc.params(), state_targets(st.adam_d.v));
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Epoch loop

inline constexpr const char* kCheckpointName = "checkpoint.ckpt";
inline constexpr const char* kLogName = "training_log.csv";
inline constexpr const char* kLogHeader = "epoch,l_d,l_g,l_mse,l_scc_corr,l_scc_bc";

struct TrainOptions {
  bool resume = false;            // continue from out_dir/checkpoint.ckpt when present
  bool keep_checkpoints = false;  // also keep checkpoint_eNNNN.ckpt for every epoch
  std::function<void(std::size_t epoch, const LossReport&)> on_epoch;
};

inline std::string epoch_checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "checkpoint_e%04zu.ckpt", epoch);
  return buf;
}

inline std::string log_row(std::size_t epoch, const LossReport& r) {
  return std::to_string(epoch) + "," + format_double(r.l_d) + "," + format_double(r.l_g) + "," + format_double(r.l_mse) +
         "," + format_double(r.l_scc_corr) + "," + format_double(r.l_scc_bc);
}

namespace detail {
// Keeps the header and the first `epochs` rows, so a resumed run's log
// matches an uninterrupted one.
inline void truncate_log(const std::filesystem::path& path, std::size_t epochs) {
  std::vector<std::string> lines;
  if (std::ifstream is(path); is) {
    std::string line;
    while (std::getline(is, line) && lines.size() < epochs + 1) lines.push_back(line);
  }
  if (lines.size() != epochs + 1 || lines[0] != kLogHeader)
    throw DataError(path.string() + ": training log does not cover the " + std::to_string(epochs) + " checkpointed epochs");
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : lines) os << l << '\n';
}
}  // namespace detail

// Trains on the training split (80/20 by config.seed) for config.epochs
// epochs and writes the checkpoint and log into out_dir after every epoch.
inline TrainState train(Dataset& ds, const TrainConfig& config, const std::filesystem::path& out_dir,
                        const TrainOptions& opt = {}) {
  config.validate();
  std::vector<TrainingSample> samples = make_samples(ds);
  const Split split = split_subjects(samples.size(), config.seed);
  if (split.train.empty()) throw DataError("training split is empty");

  std::filesystem::create_directories(out_dir);
  const auto ckpt = out_dir / kCheckpointName;
  const auto log_path = out_dir / kLogName;

  TrainState st;
  if (opt.resume && std::filesystem::exists(ckpt)) {
    st = load_checkpoint(ckpt);
    if (config_hash(st.config) != config_hash(config))
      throw VersionError("checkpoint " + ckpt.string() + " was written with a different configuration (hash " +
                         config_hash(st.config) + ", requested " + config_hash(config) + ")");
    if (st.arch.n != ds.n || st.arch.s != ds.s) throw VersionError("checkpoint model size does not match the dataset");
    st.config.epochs = config.epochs;
    detail::truncate_log(log_path, st.epoch);
  } else {
    st = init_state(config, ds.n, ds.s);
    std::ofstream os(log_path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + log_path.string());
    os << kLogHeader << '\n';
  }

  while (st.epoch < config.epochs) {
    // Each epoch shuffles the split afresh so the order depends only on the rng state.
    std::vector<std::size_t> order = split.train;
    std::shuffle(order.begin(), order.end(), st.rng);
    LossReport sum;
    std::size_t batches = 0;
    try {
      for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
        std::vector<const TrainingSample*> batch;
        for (std::size_t k = b; k < std::min(order.size(), b + config.batch_size); ++k) batch.push_back(&samples[order[k]]);
        const LossReport r = train_step(st, batch);
        sum.l_d += r.l_d;
        sum.l_g += r.l_g;
        sum.l_mse += r.l_mse;
        sum.l_scc_corr += r.l_scc_corr;
        sum.l_scc_bc += r.l_scc_bc;
        sum.lambda_scc = r.lambda_scc;
        ++batches;
      }
    } catch (const DivergenceError&) {
      save_checkpoint(out_dir / "diverged.ckpt", st);
      throw;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    sum.l_d *= inv;
    sum.l_g *= inv;
    sum.l_mse *= inv;
    sum.l_scc_corr *= inv;
    sum.l_scc_bc *= inv;
    ++st.epoch;
    {
      std::ofstream os(log_path, std::ios::app);
      os << log_row(st.epoch, sum) << '\n';
      if (!os) throw DataError("cannot append to " + log_path.string());
    }
    save_checkpoint(ckpt, st);
    if (opt.keep_checkpoints) save_checkpoint(out_dir / epoch_checkpoint_name(st.epoch), st);
    if (opt.on_epoch) opt.on_epoch(st.epoch, sum);
  }
  return st;
}

}  // namespace f2s
