// f2s: synth | train | sample | eval | analyze | ablate
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// divergence, 1 anything else. F2S_THREADS caps the worker count.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "f2s/conndata.hpp"
#include "f2s/errors.hpp"
#include "f2s/parallel.hpp"
#include "f2s/pipeline.hpp"
#include "f2s/trainer.hpp"

namespace fs = std::filesystem;
using namespace f2s;

namespace {

template <class Config>
Config load_config(const std::string& path) {
  if (path.empty()) return Config{};
  nlohmann::json j;
  try {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path);
    j = nlohmann::json::parse(is);
    return j.get<Config>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void print_summary(const MetricSummary& s) {
  for (std::size_t k = 0; k < 8; ++k)
    std::cout << "  " << MetricReport::names[k] << ": " << s.mean[k] << " (std " << s.std[k] << ")\n";
}

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a) {
  SynthConfig c = load_config<SynthConfig>(a.config);
  if (a.seed) c.seed = *a.seed;
  const Dataset ds = synth_dataset(c);
  write_dataset(a.out, ds);
  std::size_t mci = 0;
  for (const auto& r : ds.subjects) mci += r.group == Group::MCI;
  std::cout << "wrote " << ds.subjects.size() << " subjects (" << ds.subjects.size() - mci << " NC, " << mci
            << " MCI), n=" << ds.n << ", s=" << ds.s << " to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, out;
  bool resume = false, keep = false, quiet = false;
};

int cmd_train(const TrainArgs& a) {
  const TrainConfig cfg = load_config<TrainConfig>(a.config);
  cfg.validate();
  Dataset ds = load_dataset(a.data);
  TrainOptions opt;
  opt.resume = a.resume;
  opt.keep_checkpoints = a.keep;
  if (!a.quiet)
    opt.on_epoch = [&](std::size_t epoch, const LossReport& r) {
      std::cerr << "epoch " << epoch << "/" << cfg.epochs << "  l_d " << r.l_d << "  l_g " << r.l_g << "  l_mse "
                << r.l_mse << "  l_scc " << r.l_scc_corr << " + " << r.l_scc_bc << '\n';
    };
  const TrainState st = train(ds, cfg, a.out, opt);
  std::cout << "trained " << st.epoch << " epochs (" << st.steps << " steps); checkpoint "
            << (fs::path(a.out) / kCheckpointName).string() << '\n';
  return 0;
}

struct SampleArgs {
  std::string checkpoint, data, out, config;
  std::vector<std::string> subjects;
  std::uint64_t seed = 0;
};

int cmd_sample(const SampleArgs& a) {
  const TrainState st = load_checkpoint(a.checkpoint);
  if (!a.config.empty()) check_config_matches(st, load_config<TrainConfig>(a.config));
  std::vector<SubjectRecord> records;
  if (!a.data.empty()) {
    Dataset ds = load_dataset(a.data);
    if (a.subjects.empty()) {
      records = std::move(ds.subjects);
    } else {
      for (const auto& id : a.subjects) {
        auto it = std::find_if(ds.subjects.begin(), ds.subjects.end(), [&](const SubjectRecord& r) { return r.id == id; });
        if (it == ds.subjects.end()) throw DataError("subject '" + id + "' not in " + a.data);
        records.push_back(*it);
      }
    }
  } else {
    if (a.subjects.empty()) throw ConfigError("sample: give --subject files or --data");
    for (const auto& s : a.subjects) {
      const fs::path p(s);
      SubjectRecord r;
      r.id = p.stem().string();
      if (p.extension() == ".f2sv")
        r.volume = load_volume(p);
      else
        r.timeseries = load_timeseries(p);
      records.push_back(std::move(r));
    }
  }
  const Sampler sm = model_sampler(st);
  std::vector<TrainingSample> inputs;
  for (auto& r : records) inputs.push_back(sampling_input(r));
  for (const auto& x : inputs)
    if (x.features.rows() != st.arch.n || x.features.cols() != st.arch.s)
      throw DataError("subject '" + x.id + "' has a " + std::to_string(x.features.rows()) + "x" +
                      std::to_string(x.features.cols()) + " series; the model expects " + std::to_string(st.arch.n) +
                      "x" + std::to_string(st.arch.s));
  std::vector<Connectome> preds(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t k) { preds[k] = sample_subject(sm, inputs[k], a.seed); });
  fs::create_directories(a.out);
  for (std::size_t k = 0; k < inputs.size(); ++k) save_matrix(fs::path(a.out) / pred_file_name(inputs[k].id), preds[k]);
  std::cout << "wrote " << inputs.size() << " predicted SC file(s) to " << a.out << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, out, config;
  std::uint64_t seed = 0;
  bool oracle = false, all = false;
};

int cmd_eval(const EvalArgs& a) {
  Dataset ds = load_dataset(a.data);
  EvalOptions opt;
  opt.seed = a.seed;
  opt.all_subjects = a.all;
  std::vector<SubjectEval> ev;
  if (a.oracle) {
    const TrainConfig cfg = load_config<TrainConfig>(a.config);
    cfg.validate();
    ev = run_eval(oracle_sampler(cfg, ds.n), cfg, ds, a.out, opt);
  } else {
    if (a.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required unless --oracle is given");
    const TrainState st = load_checkpoint(a.checkpoint);
    if (!a.config.empty()) check_config_matches(st, load_config<TrainConfig>(a.config));
    ev = run_eval(model_sampler(st), st.config, ds, a.out, opt);
  }
  std::cout << "evaluated " << ev.size() << " subjects; outputs in " << a.out << '\n';
  print_summary(summarize(reports_of(ev)));
  return 0;
}

struct AnalyzeArgs {
  std::string pred_dir, emp_dir, manifest, out;
};

int cmd_analyze(const AnalyzeArgs& a) {
  const std::string dir = a.pred_dir.empty() ? a.emp_dir : a.pred_dir;
  const AnalysisReport r = analyze_groups(load_group_scs(dir, a.manifest));
  write_analysis(a.out, r);
  std::cout << "analyzed " << r.nc_count << " NC and " << r.mci_count << " MCI subjects; report in "
            << (fs::path(a.out) / "report.txt").string() << '\n';
  return 0;
}

struct AblateArgs {
  std::string config, data, out;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::uint64_t sample_seed = 0;
};

int cmd_ablate(const AblateArgs& a) {
  const TrainConfig cfg = load_config<TrainConfig>(a.config);
  cfg.validate();
  Dataset ds = load_dataset(a.data);
  AblationOptions opt;
  opt.seeds = a.seeds;
  opt.sample_seed = a.sample_seed;
  opt.progress = [](const std::string& msg) { std::cerr << msg << '\n'; };
  const auto rows = run_ablation(ds, cfg, a.out, opt);
  for (const auto& r : rows) {
    std::cout << to_string(r.variant) << ":\n";
    print_summary(r.summary);
  }
  std::cout << "table in " << (fs::path(a.out) / "ablation.csv").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Functional-to-structural connectome prediction with a symmetric diffusion GAN"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate the synthetic planted-mapping dataset");
  s->add_option("--config", synth.config, "JSON synth config (defaults if omitted)")->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--seed", synth.seed, "override the config seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train generator and discriminator");
  t->add_option("--config", tr.config, "JSON train config (defaults if omitted)")->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "dataset manifest or directory")->required();
  t->add_option("--out", tr.out, "run directory for checkpoints and the training log")->required();
  t->add_flag("--resume", tr.resume, "continue from the checkpoint in --out");
  t->add_flag("--keep-checkpoints", tr.keep, "keep one checkpoint per epoch");
  t->add_flag("--quiet", tr.quiet, "no per-epoch progress");

  SampleArgs sa;
  auto* sp = app.add_subcommand("sample", "predict SC for subjects");
  sp->add_option("--checkpoint", sa.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  sp->add_option("--subject", sa.subjects, "subject id (with --data) or series file (.csv / .f2sv)");
  sp->add_option("--data", sa.data, "dataset manifest or directory");
  sp->add_option("--seed", sa.seed, "sampling seed");
  sp->add_option("--out", sa.out, "output directory")->required();
  sp->add_option("--config", sa.config, "train config that must match the checkpoint");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate on the validation split");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "dataset manifest or directory")->required();
  e->add_option("--out", ev.out, "output directory")->required();
  e->add_option("--seed", ev.seed, "sampling seed");
  e->add_option("--config", ev.config, "train config that must match the checkpoint");
  e->add_flag("--oracle", ev.oracle, "use a generator that emits the true SC");
  e->add_flag("--all", ev.all, "evaluate every subject, not only the validation split");

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "MCI vs NC group-difference analysis");
  auto* pd = a->add_option("--pred-dir", an.pred_dir, "directory of <id>_pred_sc.csv files");
  auto* ed = a->add_option("--emp-dir", an.emp_dir, "directory of <id>_sc.csv files");
  pd->excludes(ed);
  a->add_option("--manifest", an.manifest, "dataset manifest (group labels)")->required();
  a->add_option("--out", an.out, "output directory")->required();

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "train and evaluate full, no_gan and no_scc");
  b->add_option("--config", ab.config, "JSON train config")->check(CLI::ExistingFile);
  b->add_option("--data", ab.data, "dataset manifest or directory")->required();
  b->add_option("--out", ab.out, "output directory")->required();
  b->add_option("--seeds", ab.seeds, "training seeds")->delimiter(',');
  b->add_option("--sample-seed", ab.sample_seed, "sampling seed for evaluation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(tr);
    if (*sp) return cmd_sample(sa);
    if (*e) return cmd_eval(ev);
    if (*a) {
      if (an.pred_dir.empty() && an.emp_dir.empty()) throw ConfigError("analyze: give --pred-dir or --emp-dir");
      return cmd_analyze(an);
    }
    if (*b) return cmd_ablate(ab);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 2;
  } catch (const DivergenceError& err) {
    std::cerr << "diverged: " << err.what() << '\n';
    return 4;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return 3;
  } catch (const DimensionError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 1;
}
