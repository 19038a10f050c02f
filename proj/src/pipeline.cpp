#include "exo/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>

#include "exo/parallel.hpp"
#include "exo/rng.hpp"

namespace fs = std::filesystem;

namespace exo::pipeline {

namespace {

class StageTimer {
 public:
  StageTimer(std::map<std::string, double>* timings, std::string stage)
      : timings_(timings), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    const auto end = std::chrono::steady_clock::now();
    (*timings_)[stage_] = std::chrono::duration<double>(end - start_).count();
  }

 private:
  std::map<std::string, double>* timings_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

// Emits whatever the report holds so far, then rethrows the stage failure
// with the stage name attached and the error category preserved.
template <typename Fn>
void run_stage(ConfounderReport& report, const std::string& output_dir, const char* stage,
               Fn&& fn) {
  const auto emit_partial = [&report, &output_dir, stage]() {
    report.notes.push_back(std::string("FAILED_AT_") + stage);
    if (!output_dir.empty()) {
      try {
        emit_report(report, output_dir);
      } catch (...) {
      }
    }
  };
  try {
    fn();
  } catch (const NumericalError& e) {
    emit_partial();
    throw NumericalError(std::string(stage) + ": " + e.what());
  } catch (const DataError& e) {
    emit_partial();
    throw DataError(std::string(stage) + ": " + e.what());
  } catch (const ConfigError& e) {
    emit_partial();
    throw ConfigError(std::string(stage) + ": " + e.what());
  } catch (const std::exception&) {
    emit_partial();
    throw;
  }
}

kernel::NullMethod method_from_string(const std::string& s) {
  if (s == "spectral" || s == "spectral-montecarlo") {
    return kernel::NullMethod::kSpectralMonteCarlo;
  }
  if (s == "gamma") return kernel::NullMethod::kGamma;
  if (s == "permutation") return kernel::NullMethod::kPermutation;
  throw ConfigError("unknown null method: " + s);
}

std::string method_to_string(kernel::NullMethod m) {
  switch (m) {
    case kernel::NullMethod::kSpectralMonteCarlo:
      return "spectral-montecarlo";
    case kernel::NullMethod::kGamma:
      return "gamma";
    case kernel::NullMethod::kPermutation:
      return "permutation";
  }
  return "spectral-montecarlo";
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig cfg;
  try {
    cfg.alpha = j.value("alpha", cfg.alpha);
    cfg.cci_threshold = j.value("cci_threshold", cfg.cci_threshold);
    if (j.contains("null")) {
      const auto& n = j.at("null");
      cfg.null_cfg.method = method_from_string(n.value("method", "spectral-montecarlo"));
      cfg.null_cfg.null_draws = n.value("draws", cfg.null_cfg.null_draws);
      cfg.null_cfg.permutations = n.value("permutations", cfg.null_cfg.permutations);
      cfg.null_cfg.ridge = n.value("ridge", cfg.null_cfg.ridge);
      cfg.null_cfg.spectrum_rtol = n.value("spectrum_rtol", cfg.null_cfg.spectrum_rtol);
    }
    cfg.bh_correction = j.value("bh_correction", cfg.bh_correction);
    if (j.contains("nfivae")) {
      const auto& n = j.at("nfivae");
      cfg.nfivae.latent_dim = n.value("latent_dim", cfg.nfivae.latent_dim);
      cfg.nfivae.encoder_widths =
          n.value("encoder_widths", cfg.nfivae.encoder_widths);
      cfg.nfivae.decoder_widths =
          n.value("decoder_widths", cfg.nfivae.decoder_widths);
      cfg.nfivae.tnn_widths = n.value("tnn_widths", cfg.nfivae.tnn_widths);
      cfg.nfivae.tnn_dim = n.value("tnn_dim", cfg.nfivae.tnn_dim);
      cfg.nfivae.learning_rate = n.value("learning_rate", cfg.nfivae.learning_rate);
      cfg.nfivae.epochs = n.value("epochs", cfg.nfivae.epochs);
      cfg.nfivae.batch_size = n.value("batch_size", cfg.nfivae.batch_size);
      cfg.nfivae.score_match_weight =
          n.value("score_match_weight", cfg.nfivae.score_match_weight);
    }
    if (j.contains("stability")) {
      const auto& s = j.at("stability");
      cfg.stability.n_runs = s.value("n_runs", cfg.stability.n_runs);
      cfg.stability.k = s.value("k", cfg.stability.k);
    }
    cfg.dataset_dir = j.value("dataset_dir", cfg.dataset_dir);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    cfg.study_network = j.value("study_network", cfg.study_network);
    cfg.candidate_networks = j.value("candidate_networks", cfg.candidate_networks);
    cfg.workers = j.value("workers", cfg.workers);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.skeleton_subject = j.value("skeleton_subject", cfg.skeleton_subject);
    cfg.skeletons = j.value("skeletons", cfg.skeletons);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  if (cfg.alpha <= 0.0 || cfg.alpha >= 1.0) throw ConfigError("alpha must lie in (0, 1)");
  if (cfg.cci_threshold < 0.0 || cfg.cci_threshold > 1.0) {
    throw ConfigError("cci_threshold must lie in [0, 1]");
  }
  return cfg;
}

nlohmann::json config_to_json(const PipelineConfig& cfg) {
  nlohmann::json j;
  j["alpha"] = cfg.alpha;
  j["cci_threshold"] = cfg.cci_threshold;
  j["null"] = {{"method", method_to_string(cfg.null_cfg.method)},
               {"draws", cfg.null_cfg.null_draws},
               {"permutations", cfg.null_cfg.permutations},
               {"ridge", cfg.null_cfg.ridge},
               {"spectrum_rtol", cfg.null_cfg.spectrum_rtol}};
  j["bh_correction"] = cfg.bh_correction;
  j["nfivae"] = {{"latent_dim", cfg.nfivae.latent_dim},
                 {"encoder_widths", cfg.nfivae.encoder_widths},
                 {"decoder_widths", cfg.nfivae.decoder_widths},
                 {"tnn_widths", cfg.nfivae.tnn_widths},
                 {"tnn_dim", cfg.nfivae.tnn_dim},
                 {"learning_rate", cfg.nfivae.learning_rate},
                 {"epochs", cfg.nfivae.epochs},
                 {"batch_size", cfg.nfivae.batch_size},
                 {"score_match_weight", cfg.nfivae.score_match_weight}};
  j["stability"] = {{"n_runs", cfg.stability.n_runs}, {"k", cfg.stability.k}};
  j["dataset_dir"] = cfg.dataset_dir;
  j["output_dir"] = cfg.output_dir;
  j["study_network"] = cfg.study_network;
  j["candidate_networks"] = cfg.candidate_networks;
  j["workers"] = cfg.workers;
  j["seed"] = cfg.seed;
  j["skeleton_subject"] = cfg.skeleton_subject;
  j["skeletons"] = cfg.skeletons;
  return j;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const PipelineConfig& cfg) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(config_to_json(cfg).dump())));
  return buf;
}

nlohmann::json report_to_json(const ConfounderReport& report) {
  nlohmann::json j;
  j["version"] = report.version;
  j["config"] = report.config;
  j["config_hash"] = report.config_hash;
  j["seeds"] = {{"base", report.seeds.base},
                {"screening", report.seeds.screening},
                {"nfivae", report.seeds.nfivae},
                {"stability", report.seeds.stability},
                {"skeleton", report.seeds.skeleton}};
  j["z_nodes"] = report.z_nodes;
  j["candidate_pool"] = report.candidate_pool;
  nlohmann::json cands = nlohmann::json::object();
  for (const auto& [name, evidence] : report.candidates.candidates) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& ev : evidence) {
      list.push_back({{"pair_a", ev.pair.first},
                      {"pair_b", ev.pair.second},
                      {"ks_pvalue", ev.ks_pvalue},
                      {"ks_d", ev.ks_d},
                      {"mean_unc", ev.mean_unc},
                      {"mean_cond", ev.mean_cond}});
    }
    cands[name] = list;
  }
  j["candidates"] = cands;
  nlohmann::json cci_json = nlohmann::json::object();
  for (const auto& [name, entry] : report.cci_table.entries) {
    cci_json[name] = {{"best_dim", entry.best_dim}, {"cci", entry.cci}};
  }
  j["cci"] = cci_json;
  j["selected"] = report.selected;
  if (report.has_stability) {
    j["stability"] = {{"k", report.stability.k},
                      {"n_runs", report.stability.n_runs},
                      {"failed_runs", report.stability.failed_runs},
                      {"frequency", report.stability.frequency}};
  } else {
    j["stability"] = nullptr;
  }
  if (report.has_skeletons) {
    j["skeleton_before"] = report.skeleton_before;
    j["skeleton_after"] = report.skeleton_after;
  } else {
    j["skeleton_before"] = nullptr;
    j["skeleton_after"] = nullptr;
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : report.train_log) {
    log.push_back({{"epoch", e.epoch},
                   {"elbo", e.elbo},
                   {"score_matching", e.score_matching},
                   {"total", e.total}});
  }
  j["train_log"] = log;
  j["diagnostics"] = report.diagnostics;
  j["notes"] = report.notes;
  j["timings"] = report.timings;
  return j;
}

ConfounderReport report_from_json(const nlohmann::json& j) {
  ConfounderReport report;
  report.version = j.at("version");
  report.config = j.at("config");
  report.config_hash = j.at("config_hash");
  report.seeds.base = j.at("seeds").at("base");
  report.seeds.screening = j.at("seeds").at("screening");
  report.seeds.nfivae = j.at("seeds").at("nfivae");
  report.seeds.stability = j.at("seeds").at("stability");
  report.seeds.skeleton = j.at("seeds").at("skeleton");
  report.z_nodes = j.at("z_nodes").get<std::vector<std::string>>();
  report.candidate_pool = j.at("candidate_pool").get<std::vector<std::string>>();
  for (const auto& [name, list] : j.at("candidates").items()) {
    std::vector<screening::PairEvidence> evidence;
    for (const auto& item : list) {
      screening::PairEvidence ev;
      ev.pair = {item.at("pair_a"), item.at("pair_b")};
      ev.ks_pvalue = item.at("ks_pvalue");
      ev.ks_d = item.at("ks_d");
      ev.mean_unc = item.at("mean_unc");
      ev.mean_cond = item.at("mean_cond");
      evidence.push_back(ev);
    }
    report.candidates.candidates[name] = std::move(evidence);
  }
  for (const auto& [name, entry] : j.at("cci").items()) {
    report.cci_table.entries[name] = cci::CciEntry{entry.at("best_dim"), entry.at("cci")};
  }
  report.selected = j.at("selected").get<std::vector<std::string>>();
  if (!j.at("stability").is_null()) {
    report.has_stability = true;
    report.stability.k = j.at("stability").at("k");
    report.stability.n_runs = j.at("stability").at("n_runs");
    report.stability.failed_runs = j.at("stability").at("failed_runs");
    report.stability.frequency =
        j.at("stability").at("frequency").get<std::map<std::string, double>>();
  }
  if (!j.at("skeleton_before").is_null()) {
    report.has_skeletons = true;
    report.skeleton_before = j.at("skeleton_before");
    report.skeleton_after = j.at("skeleton_after");
  }
  for (const auto& item : j.at("train_log")) {
    nfivae::TrainLogEntry e;
    e.epoch = item.at("epoch");
    e.elbo = item.at("elbo");
    e.score_matching = item.at("score_matching");
    e.total = item.at("total");
    report.train_log.push_back(e);
  }
  report.diagnostics = j.at("diagnostics").get<std::vector<std::string>>();
  report.notes = j.at("notes").get<std::vector<std::string>>();
  report.timings = j.at("timings").get<std::map<std::string, double>>();
  return report;
}

bool reports_equivalent(const ConfounderReport& a, const ConfounderReport& b) {
  nlohmann::json ja = report_to_json(a);
  nlohmann::json jb = report_to_json(b);
  ja.erase("timings");
  jb.erase("timings");
  return ja == jb;
}

ConfounderReport run_pipeline_on(const dataset::SubjectDataset& ds, const PipelineConfig& cfg) {
  const int workers = cfg.workers > 0 ? cfg.workers : default_workers();
  ConfounderReport report;
  report.version = kVersion;
  report.config = config_to_json(cfg);
  report.config_hash = config_hash(cfg);
  report.seeds.base = cfg.seed;
  report.seeds.screening = mix_seed(cfg.seed, 0x73637265ULL);
  report.seeds.nfivae = mix_seed(cfg.seed, 0x6e666976ULL);
  report.seeds.stability = mix_seed(cfg.seed, 0x73746162ULL);
  report.seeds.skeleton = mix_seed(cfg.seed, 0x736b656cULL);

  const std::vector<std::string> z_nodes = ds.nodes_in_network(cfg.study_network);
  if (z_nodes.empty()) {
    throw ConfigError("no nodes in study network '" + cfg.study_network + "'");
  }
  std::vector<std::string> pool;
  for (std::size_t i = 0; i < ds.nodes.size(); ++i) {
    if (ds.networks[i] == cfg.study_network) continue;
    if (!cfg.candidate_networks.empty() &&
        std::find(cfg.candidate_networks.begin(), cfg.candidate_networks.end(),
                  ds.networks[i]) == cfg.candidate_networks.end()) {
      continue;
    }
    pool.push_back(ds.nodes[i]);
  }
  if (pool.empty()) throw ConfigError("candidate pool is empty");
  report.z_nodes = z_nodes;
  report.candidate_pool = pool;

  run_stage(report, cfg.output_dir, "screening", [&]() {
    StageTimer timer(&report.timings, "screening");
    screening::ScreeningConfig scfg;
    scfg.null_cfg = cfg.null_cfg;
    scfg.alpha = cfg.alpha;
    scfg.bh_correction = cfg.bh_correction;
    scfg.seed = report.seeds.screening;
    scfg.workers = workers;
    report.candidates = screening::screen_candidates(ds, z_nodes, pool, scfg);
  });
  const std::vector<std::string> screened = report.candidates.names();

  // Pooled rows across subjects for training, inference and CCI.
  Eigen::Index total_rows = 0;
  for (const auto& m : ds.data) total_rows += m.rows();
  Eigen::MatrixXd z_pooled(total_rows, static_cast<Eigen::Index>(z_nodes.size()));
  std::vector<int> subject_of_row(static_cast<std::size_t>(total_rows));
  std::map<std::string, Eigen::VectorXd> pool_signals;
  for (const auto& name : pool) pool_signals[name] = Eigen::VectorXd(total_rows);
  {
    Eigen::Index row = 0;
    for (std::size_t s = 0; s < ds.data.size(); ++s) {
      const auto& m = ds.data[s];
      for (std::size_t zi = 0; zi < z_nodes.size(); ++zi) {
        z_pooled.block(row, static_cast<Eigen::Index>(zi), m.rows(), 1) =
            m.col(ds.node_index(z_nodes[zi]));
      }
      for (const auto& name : pool) {
        pool_signals[name].segment(row, m.rows()) = m.col(ds.node_index(name));
      }
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        subject_of_row[static_cast<std::size_t>(row + r)] = static_cast<int>(s);
      }
      row += m.rows();
    }
  }

  if (screened.empty()) {
    report.notes.push_back("SCREENING_EMPTY");
  } else {
    nfivae::NfIvaeConfig ncfg = cfg.nfivae;
    ncfg.latent_dim = static_cast<int>(screened.size());
    ncfg.seed = report.seeds.nfivae;
    nfivae::TrainResult trained;
    run_stage(report, cfg.output_dir, "nfivae", [&]() {
      StageTimer timer(&report.timings, "nfivae");
      trained = nfivae::train_nfivae(z_pooled, subject_of_row, ncfg);
      report.train_log = trained.log;
      report.diagnostics = trained.diagnostics;
    });
    run_stage(report, cfg.output_dir, "cci", [&]() {
      StageTimer timer(&report.timings, "cci");
      const auto latents = nfivae::infer_latents(trained.model, z_pooled, subject_of_row);
      report.cci_table = cci::compute_cci(latents, pool_signals);
      report.selected = cci::select_confounders(screened, report.cci_table, cfg.cci_threshold);
    });
    if (cfg.stability.n_runs >= 2) {
      run_stage(report, cfg.output_dir, "stability", [&]() {
        StageTimer timer(&report.timings, "stability");
        report.stability = cci::stability_analysis(z_pooled, subject_of_row, pool_signals, ncfg,
                                                   cfg.stability.n_runs, cfg.stability.k,
                                                   report.seeds.stability, workers);
        report.has_stability = true;
      });
    }
  }

  if (cfg.skeletons) {
    run_stage(report, cfg.output_dir, "skeletons", [&]() {
      StageTimer timer(&report.timings, "skeletons");
      const int subj = cfg.skeleton_subject;
      if (subj < 0 || subj >= static_cast<int>(ds.data.size())) {
        throw ConfigError("skeleton_subject out of range");
      }
      pc::PcConfig pcfg;
      pcfg.alpha = cfg.alpha;
      pcfg.null_cfg = cfg.null_cfg;
      pcfg.null_cfg.seed = report.seeds.skeleton;
      pcfg.workers = workers;
      const auto series_of = [&](const std::vector<std::string>& names) {
        std::vector<kernel::SampleVector> out;
        for (const auto& name : names) {
          out.push_back(kernel::SampleVector{
              ds.data[static_cast<std::size_t>(subj)].col(ds.node_index(name)), false});
        }
        return out;
      };
      report.skeleton_before =
          pc::to_edge_list(pc::pc_skeleton(z_nodes, series_of(z_nodes), pcfg));
      std::vector<std::string> with_confounders = z_nodes;
      for (const auto& name : report.selected) with_confounders.push_back(name);
      report.skeleton_after =
          pc::to_edge_list(pc::pc_skeleton(with_confounders, series_of(with_confounders), pcfg));
      report.has_skeletons = true;
    });
  }

  if (!cfg.output_dir.empty()) emit_report(report, cfg.output_dir);
  return report;
}

ConfounderReport run_pipeline(const PipelineConfig& cfg) {
  if (cfg.dataset_dir.empty()) throw ConfigError("dataset_dir is required");
  const dataset::SubjectDataset ds = dataset::load_dataset(cfg.dataset_dir);
  return run_pipeline_on(ds, cfg);
}

void emit_report(const ConfounderReport& report, const std::string& output_dir) {
  fs::create_directories(output_dir);
  const fs::path root(output_dir);
  {
    std::ofstream out(root / "report.json");
    if (!out) throw DataError("cannot write " + (root / "report.json").string());
    out << report_to_json(report).dump(1) << "\n";
  }
  screening::write_candidates_csv(report.candidates, (root / "candidates.csv").string());
  cci::write_cci_csv(report.cci_table, (root / "cci.csv").string());
  if (report.has_stability) {
    cci::write_stability_csv(report.stability, (root / "stability.csv").string());
    cci::write_stability_plot(report.stability, (root / "stability_plot.csv").string());
  }
  if (report.has_skeletons) {
    std::ofstream before(root / "skeleton_before.txt");
    before << report.skeleton_before;
    std::ofstream after(root / "skeleton_after.txt");
    after << report.skeleton_after;
  }
  if (!report.train_log.empty()) {
    nfivae::write_training_log_csv(report.train_log, (root / "nfivae_log.csv").string());
  }
}

}  // namespace exo::pipeline
