#pragma once

// End-to-end operations behind the command-line tool: per-subject sampling,
// evaluation over the validation split, group-difference analysis and loss
// ablations.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "f2s/conndata.hpp"
#include "f2s/errors.hpp"
#include "f2s/graphmetrics.hpp"
#include "f2s/parallel.hpp"
#include "f2s/symdiffusion.hpp"
#include "f2s/trainer.hpp"

namespace f2s {

namespace fs = std::filesystem;

// Sampling stream for one subject; independent of worker count and order.
inline std::mt19937_64 subject_rng(std::uint64_t seed, const std::string& id) {
  return std::mt19937_64(derive_seed(seed, fnv1a(id)));
}

// Clean-connectome estimate for one reverse step: (subject, A_{t+d}', t).
using CleanPredictor = std::function<Tensor(const TrainingSample&, const Tensor&, std::size_t)>;

struct Sampler {
  CleanPredictor predict;
  NoiseSchedule sched;
  std::size_t d = 10;
  std::size_t n = 0;
};

inline Sampler model_sampler(const TrainState& st) {
  const TrainState* s = &st;
  return {[s](const TrainingSample& x, const Tensor& a_prev, std::size_t t) {
            return s->gen.predict_clean(a_prev, x.features, t, s->sched);
          },
          st.sched, st.config.d, st.arch.n};
}

// Emits the subject's true SC at every step.
inline Sampler oracle_sampler(const TrainConfig& cfg, std::size_t n) {
  return {[](const TrainingSample& x, const Tensor&, std::size_t) { return x.a0; }, cfg.schedule(), cfg.d, n};
}

inline Connectome sample_subject(const Sampler& sm, const TrainingSample& x, std::uint64_t seed,
                                 const TrajectoryObserver& observe = {}) {
  auto rng = subject_rng(seed, x.id);
  return sample_sc([&](const Tensor& a_prev, std::size_t t) { return sm.predict(x, a_prev, t); }, sm.n, sm.sched,
                   sm.d, rng, observe);
}

// Sampling input for a subject that may lack an empirical SC.
inline TrainingSample sampling_input(SubjectRecord& r) {
  const auto& ts = ensure_timeseries(r);
  TrainingSample x{r.id, r.group, standardize_rows(ts.values), {}};
  if (r.empirical_sc) x.a0 = r.empirical_sc->values;
  return x;
}

inline void check_config_matches(const TrainState& st, const TrainConfig& cfg) {
  if (config_hash(st.config) != config_hash(cfg))
    throw VersionError("checkpoint config hash " + config_hash(st.config) + " does not match the given config (" +
                       config_hash(cfg) + ")");
}

inline std::string pred_file_name(const std::string& id) { return id + "_pred_sc.csv"; }

// ---------------------------------------------------------------------------
// Evaluation

struct SubjectEval {
  std::string id;
  Group group = Group::NC;
  Connectome pred;
  MetricReport metrics;
};

inline std::vector<SubjectEval> evaluate(const Sampler& sm, const std::vector<TrainingSample>& samples,
                                         const std::vector<std::size_t>& subset, std::uint64_t seed, double density) {
  std::vector<SubjectEval> out(subset.size());
  parallel_for(subset.size(), [&](std::size_t k) {
    const TrainingSample& x = samples[subset[k]];
    SubjectEval& e = out[k];
    e.id = x.id;
    e.group = x.group;
    e.pred = sample_subject(sm, x, seed);
    e.metrics = metric_errors(e.pred.values, x.a0, density);
  });
  return out;
}

struct MetricSummary {
  std::array<double, 8> mean{};
  std::array<double, 8> std{};  // sample standard deviation, 0 for a single subject
  std::size_t count = 0;
};

inline MetricSummary summarize(const std::vector<MetricReport>& rows) {
  MetricSummary s;
  s.count = rows.size();
  if (rows.empty()) return s;
  for (const auto& r : rows) {
    const auto v = r.values();
    for (std::size_t k = 0; k < 8; ++k) s.mean[k] += v[k];
  }
  for (auto& m : s.mean) m /= static_cast<double>(rows.size());
  if (rows.size() > 1) {
    for (const auto& r : rows) {
      const auto v = r.values();
      for (std::size_t k = 0; k < 8; ++k) s.std[k] += (v[k] - s.mean[k]) * (v[k] - s.mean[k]);
    }
    for (auto& v : s.std) v = std::sqrt(v / static_cast<double>(rows.size() - 1));
  }
  return s;
}

inline std::vector<MetricReport> reports_of(const std::vector<SubjectEval>& ev) {
  std::vector<MetricReport> out;
  for (const auto& e : ev) out.push_back(e.metrics);
  return out;
}

namespace detail {
inline void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  return os;
}
}  // namespace detail

inline void write_metrics_csv(const fs::path& path, const std::vector<SubjectEval>& ev) {
  auto os = detail::open_out(path);
  os << "subject,group";
  for (const char* name : MetricReport::names) os << ',' << name;
  os << '\n';
  for (const auto& e : ev) {
    os << e.id << ',' << to_string(e.group);
    for (double v : e.metrics.values()) os << ',' << format_double(v);
    os << '\n';
  }
}

inline void write_summary_csv(const fs::path& path, const MetricSummary& s) {
  auto os = detail::open_out(path);
  os << "metric,mean,std,subjects\n";
  for (std::size_t k = 0; k < 8; ++k)
    os << MetricReport::names[k] << ',' << format_double(s.mean[k]) << ',' << format_double(s.std[k]) << ','
       << s.count << '\n';
}

// Group-mean predicted vs empirical upper-triangle entries, one row per
// (group, pair); "ALL" pools every evaluated subject.
inline void write_scatter_csv(const fs::path& path, const std::vector<SubjectEval>& ev,
                              const std::vector<TrainingSample>& samples, const std::vector<std::size_t>& subset) {
  auto os = detail::open_out(path);
  os << "group,i,j,predicted,empirical\n";
  if (ev.empty()) return;
  const std::size_t n = ev[0].pred.n();
  auto emit = [&](const std::string& label, auto&& include) {
    Tensor p = Tensor::matrix(n, n), e = Tensor::matrix(n, n);
    std::size_t count = 0;
    for (std::size_t k = 0; k < ev.size(); ++k) {
      if (!include(ev[k])) continue;
      detail::accumulate(p, ev[k].pred.values);
      detail::accumulate(e, samples[subset[k]].a0);
      ++count;
    }
    if (count == 0) return;
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        os << label << ',' << i << ',' << j << ',' << format_double(p(i, j) * inv) << ','
           << format_double(e(i, j) * inv) << '\n';
  };
  emit("NC", [](const SubjectEval& e) { return e.group == Group::NC; });
  emit("MCI", [](const SubjectEval& e) { return e.group == Group::MCI; });
  emit("ALL", [](const SubjectEval&) { return true; });
}

struct EvalOptions {
  std::uint64_t seed = 0;
  bool all_subjects = false;  // evaluate every subject instead of the validation split
  bool write_predictions = true;
};

// Samples the subjects, writes metrics.csv, metrics_summary.csv,
// scatter.csv and pred/<id>_pred_sc.csv into out_dir.
inline std::vector<SubjectEval> run_eval(const Sampler& sm, const TrainConfig& cfg, Dataset& ds, const fs::path& out_dir,
                                         const EvalOptions& opt = {}) {
  std::vector<TrainingSample> samples = make_samples(ds);
  if (sm.n != ds.n) throw DataError("dataset has " + std::to_string(ds.n) + " ROIs, model expects " + std::to_string(sm.n));
  std::vector<std::size_t> subset;
  if (opt.all_subjects) {
    subset.resize(samples.size());
    for (std::size_t k = 0; k < subset.size(); ++k) subset[k] = k;
  } else {
    subset = split_subjects(samples.size(), cfg.seed).validation;
  }
  if (subset.empty()) throw DataError("no subjects to evaluate");
  auto ev = evaluate(sm, samples, subset, opt.seed, cfg.density);
  fs::create_directories(out_dir);
  write_metrics_csv(out_dir / "metrics.csv", ev);
  write_summary_csv(out_dir / "metrics_summary.csv", summarize(reports_of(ev)));
  write_scatter_csv(out_dir / "scatter.csv", ev, samples, subset);
  if (opt.write_predictions) {
    fs::create_directories(out_dir / "pred");
    for (const auto& e : ev) save_matrix(out_dir / "pred" / pred_file_name(e.id), e.pred);
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Group analysis

struct RoiChange {
  std::size_t roi = 0;
  double change = 0.0;
};

struct EdgeChange {
  std::size_t i = 0, j = 0;
  double difference = 0.0;
};

struct AnalysisReport {
  std::size_t n = 0;
  std::size_t nc_count = 0, mci_count = 0;
  Tensor difference;  // mean(MCI) - mean(NC)
  std::vector<RoiChange> ranking;
  std::vector<std::size_t> top10, top20;
  std::vector<EdgeChange> increased, reduced;
};

struct GroupedSc {
  std::string id;
  Group group = Group::NC;
  Tensor sc;
};

inline std::size_t top_count(double fraction, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
}

inline AnalysisReport analyze_groups(std::vector<GroupedSc> scs, std::size_t max_edges = 10) {
  if (scs.empty()) throw DataError("analysis: no connectomes");
  // Summation in id order keeps the result independent of input order.
  std::sort(scs.begin(), scs.end(), [](const GroupedSc& a, const GroupedSc& b) { return a.id < b.id; });
  const std::size_t n = scs[0].sc.rows();
  Tensor nc = Tensor::matrix(n, n), mci = Tensor::matrix(n, n);
  AnalysisReport r;
  r.n = n;
  for (const auto& s : scs) {
    if (s.sc.rows() != n || s.sc.cols() != n) throw DataError("analysis: subject " + s.id + " has a different size");
    if (s.group == Group::NC) {
      detail::accumulate(nc, s.sc);
      ++r.nc_count;
    } else {
      detail::accumulate(mci, s.sc);
      ++r.mci_count;
    }
  }
  if (r.nc_count == 0) throw DataError("analysis: group NC is empty");
  if (r.mci_count == 0) throw DataError("analysis: group MCI is empty");
  r.difference = Tensor::matrix(n, n);
  for (std::size_t k = 0; k < n * n; ++k)
    r.difference[k] = mci[k] / static_cast<double>(r.mci_count) - nc[k] / static_cast<double>(r.nc_count);

  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) s += std::abs(r.difference(i, j));
    r.ranking.push_back({i, s});
  }
  std::sort(r.ranking.begin(), r.ranking.end(), [](const RoiChange& a, const RoiChange& b) {
    return a.change != b.change ? a.change > b.change : a.roi < b.roi;
  });
  for (std::size_t k = 0; k < top_count(0.1, n); ++k) r.top10.push_back(r.ranking[k].roi);
  for (std::size_t k = 0; k < top_count(0.2, n); ++k) r.top20.push_back(r.ranking[k].roi);

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = r.difference(i, j);
      if (v > 0.0) r.increased.push_back({i, j, v});
      if (v < 0.0) r.reduced.push_back({i, j, v});
    }
  auto lex = [](const EdgeChange& a, const EdgeChange& b) { return a.i != b.i ? a.i < b.i : a.j < b.j; };
  std::sort(r.increased.begin(), r.increased.end(), [&](const EdgeChange& a, const EdgeChange& b) {
    return a.difference != b.difference ? a.difference > b.difference : lex(a, b);
  });
  std::sort(r.reduced.begin(), r.reduced.end(), [&](const EdgeChange& a, const EdgeChange& b) {
    return a.difference != b.difference ? a.difference < b.difference : lex(a, b);
  });
  if (r.increased.size() > max_edges) r.increased.resize(max_edges);
  if (r.reduced.size() > max_edges) r.reduced.resize(max_edges);
  return r;
}

// Collects <id>_pred_sc.csv (preferred) or <id>_sc.csv from dir for every
// subject listed in the manifest. Subjects without a file are skipped.
inline std::vector<GroupedSc> load_group_scs(const fs::path& dir, const fs::path& manifest) {
  fs::path mpath = fs::is_directory(manifest) ? manifest / kManifestName : manifest;
  const auto m = read_json(mpath);
  std::vector<GroupedSc> out;
  try {
    for (const auto& s : m.at("subjects")) {
      const std::string id = s.at("id").get<std::string>();
      fs::path file = dir / pred_file_name(id);
      if (!fs::exists(file)) file = dir / (id + "_sc.csv");
      if (!fs::exists(file)) continue;
      out.push_back({id, parse_group(s.at("group").get<std::string>()), load_connectome(file).values});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  if (out.empty()) throw DataError("no connectome files for manifest subjects in " + dir.string());
  return out;
}

inline void write_analysis(const fs::path& out_dir, const AnalysisReport& r) {
  fs::create_directories(out_dir);
  save_matrix(out_dir / "difference.csv", r.difference);
  {
    auto os = detail::open_out(out_dir / "roi_ranking.csv");
    os << "rank,roi,change,top10,top20\n";
    for (std::size_t k = 0; k < r.ranking.size(); ++k)
      os << k + 1 << ',' << r.ranking[k].roi << ',' << format_double(r.ranking[k].change) << ','
         << (k < r.top10.size() ? 1 : 0) << ',' << (k < r.top20.size() ? 1 : 0) << '\n';
  }
  {
    auto os = detail::open_out(out_dir / "connections.csv");
    os << "direction,rank,i,j,difference\n";
    for (std::size_t k = 0; k < r.increased.size(); ++k)
      os << "increased," << k + 1 << ',' << r.increased[k].i << ',' << r.increased[k].j << ','
         << format_double(r.increased[k].difference) << '\n';
    for (std::size_t k = 0; k < r.reduced.size(); ++k)
      os << "reduced," << k + 1 << ',' << r.reduced[k].i << ',' << r.reduced[k].j << ','
         << format_double(r.reduced[k].difference) << '\n';
  }
  auto os = detail::open_out(out_dir / "report.txt");
  os << "Group difference (MCI - NC): " << r.mci_count << " MCI, " << r.nc_count << " NC subjects, " << r.n
     << " ROIs\n\n";
  auto roi_list = [&](const char* label, const std::vector<std::size_t>& rois) {
    os << label << " (" << rois.size() << "):";
    for (auto v : rois) os << ' ' << v;
    os << '\n';
  };
  roi_list("Top 10% ROIs", r.top10);
  roi_list("Top 20% ROIs", r.top20);
  os << "\nROI ranking by summed |change|:\n";
  for (std::size_t k = 0; k < r.ranking.size(); ++k)
    os << "  " << k + 1 << ". ROI " << r.ranking[k].roi << "  " << format_double(r.ranking[k].change) << '\n';
  auto edges = [&](const char* label, const std::vector<EdgeChange>& list) {
    os << '\n' << label << ":\n";
    if (list.empty()) os << "  (none)\n";
    for (const auto& e : list) os << "  " << e.i << " - " << e.j << "  " << format_double(e.difference) << '\n';
  };
  edges("Increased connections", r.increased);
  edges("Reduced connections", r.reduced);
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  Ablation variant = Ablation::full;
  MetricSummary summary;  // over validation subjects pooled across seeds
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds{1};
  std::uint64_t sample_seed = 0;
  std::function<void(const std::string&)> progress;
};

inline std::string seed_dir_name(Ablation v, std::uint64_t seed) { return to_string(v) + "_seed" + std::to_string(seed); }

inline std::vector<AblationRow> run_ablation(Dataset& ds, const TrainConfig& base, const fs::path& out_dir,
                                             const AblationOptions& opt = {}) {
  if (opt.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  fs::create_directories(out_dir);
  auto raw = detail::open_out(out_dir / "ablation_raw.csv");
  raw << "variant,seed,subject,group";
  for (const char* name : MetricReport::names) raw << ',' << name;
  raw << '\n';
  std::vector<AblationRow> rows;
  for (Ablation v : {Ablation::full, Ablation::no_gan, Ablation::no_scc}) {
    std::vector<MetricReport> pooled;
    for (std::uint64_t seed : opt.seeds) {
      TrainConfig cfg = base;
      cfg.ablation = v;
      cfg.seed = seed;
      const fs::path dir = out_dir / seed_dir_name(v, seed);
      if (opt.progress) opt.progress("training " + dir.filename().string());
      const TrainState st = train(ds, cfg, dir);
      EvalOptions eo;
      eo.seed = opt.sample_seed;
      const auto ev = run_eval(model_sampler(st), cfg, ds, dir / "eval", eo);
      for (const auto& e : ev) {
        raw << to_string(v) << ',' << seed << ',' << e.id << ',' << to_string(e.group);
        for (double x : e.metrics.values()) raw << ',' << format_double(x);
        raw << '\n';
        pooled.push_back(e.metrics);
      }
    }
    rows.push_back({v, summarize(pooled)});
  }
  auto os = detail::open_out(out_dir / "ablation.csv");
  os << "variant";
  for (const char* name : MetricReport::names) os << ',' << name;
  os << '\n';
  char buf[64];
  for (const auto& r : rows) {
    os << to_string(r.variant);
    for (std::size_t k = 0; k < 8; ++k) {
      std::snprintf(buf, sizeof buf, "%.6f±%.6f", r.summary.mean[k], r.summary.std[k]);
      os << ',' << buf;
    }
    os << '\n';
  }
  return rows;
}

}  // namespace f2s
