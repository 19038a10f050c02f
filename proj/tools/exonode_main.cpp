// exonode: identifies external nodes that act as essential exogenous
// (confounding) variables for an in-study network, from multi-subject
// time-series CSVs. Subcommands cover the full pipeline and each stage.

#include <CLI11.hpp>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "exo/cci.hpp"
#include "exo/dataset.hpp"
#include "exo/errors.hpp"
#include "exo/parallel.hpp"
#include "exo/pc_skeleton.hpp"
#include "exo/pipeline.hpp"
#include "exo/scm.hpp"
#include "exo/screening.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string dataset_dir;
  std::string output_dir;
  std::int64_t seed = -1;
  int workers = -1;
  double alpha = -1.0;
  double cci_threshold = -1.0;
  std::string null_method;
};

void add_common(CLI::App* cmd, CommonFlags* flags) {
  cmd->add_option("--config", flags->config_path, "JSON config file");
  cmd->add_option("--dataset", flags->dataset_dir, "dataset directory (labels.csv + sub_*.csv)");
  cmd->add_option("--output", flags->output_dir, "output directory");
  cmd->add_option("--seed", flags->seed, "base seed (overrides config)");
  cmd->add_option("--workers", flags->workers, "worker thread count (0 = hardware)");
  cmd->add_option("--alpha", flags->alpha, "screening/PC significance level");
  cmd->add_option("--cci-threshold", flags->cci_threshold, "CCI selection threshold");
  cmd->add_option("--null-method", flags->null_method,
                  "null distribution: spectral-montecarlo | gamma");
}

exo::pipeline::PipelineConfig build_config(const CommonFlags& flags) {
  exo::pipeline::PipelineConfig cfg;
  if (!flags.config_path.empty()) cfg = exo::pipeline::load_config(flags.config_path);
  if (!flags.dataset_dir.empty()) cfg.dataset_dir = flags.dataset_dir;
  if (!flags.output_dir.empty()) cfg.output_dir = flags.output_dir;
  if (flags.seed >= 0) cfg.seed = static_cast<std::uint64_t>(flags.seed);
  if (flags.workers >= 0) cfg.workers = flags.workers;
  if (flags.alpha > 0.0) cfg.alpha = flags.alpha;
  if (flags.cci_threshold >= 0.0) cfg.cci_threshold = flags.cci_threshold;
  if (!flags.null_method.empty()) {
    exo::pipeline::PipelineConfig parsed = exo::pipeline::config_from_json(
        nlohmann::json{{"null", {{"method", flags.null_method}}}});
    cfg.null_cfg.method = parsed.null_cfg.method;
  }
  return cfg;
}

int run_command(const exo::pipeline::PipelineConfig& cfg) {
  const auto report = exo::pipeline::run_pipeline(cfg);
  std::cout << "selected confounders:";
  if (report.selected.empty()) {
    std::cout << " (none)";
  } else {
    for (const auto& name : report.selected) std::cout << " " << name;
  }
  std::cout << "\n";
  for (const auto& note : report.notes) std::cout << "note: " << note << "\n";
  if (!cfg.output_dir.empty()) {
    std::cout << "report written to " << cfg.output_dir << "\n";
  }
  return 0;
}

int screen_command(const exo::pipeline::PipelineConfig& cfg) {
  const auto ds = exo::dataset::load_dataset(cfg.dataset_dir);
  const auto z_nodes = ds.nodes_in_network(cfg.study_network);
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
  exo::screening::ScreeningConfig scfg;
  scfg.null_cfg = cfg.null_cfg;
  scfg.alpha = cfg.alpha;
  scfg.bh_correction = cfg.bh_correction;
  scfg.seed = exo::mix_seed(cfg.seed, 0x73637265ULL);
  scfg.workers = cfg.workers > 0 ? cfg.workers : exo::default_workers();
  const auto set = exo::screening::screen_candidates(ds, z_nodes, pool, scfg);
  for (const auto& [name, evidence] : set.candidates) {
    std::cout << name << ": " << evidence.size() << " supporting pair(s)\n";
  }
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    exo::screening::write_candidates_csv(
        set, (std::filesystem::path(cfg.output_dir) / "candidates.csv").string());
  }
  return 0;
}

int train_command(const exo::pipeline::PipelineConfig& cfg) {
  const auto ds = exo::dataset::load_dataset(cfg.dataset_dir);
  const auto z_nodes = ds.nodes_in_network(cfg.study_network);
  if (z_nodes.empty()) throw exo::ConfigError("study network has no nodes");
  Eigen::Index total_rows = 0;
  for (const auto& m : ds.data) total_rows += m.rows();
  Eigen::MatrixXd z(total_rows, static_cast<Eigen::Index>(z_nodes.size()));
  std::vector<int> subject(static_cast<std::size_t>(total_rows));
  Eigen::Index row = 0;
  for (std::size_t s = 0; s < ds.data.size(); ++s) {
    const auto& m = ds.data[s];
    for (std::size_t zi = 0; zi < z_nodes.size(); ++zi) {
      z.block(row, static_cast<Eigen::Index>(zi), m.rows(), 1) =
          m.col(ds.node_index(z_nodes[zi]));
    }
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      subject[static_cast<std::size_t>(row + r)] = static_cast<int>(s);
    }
    row += m.rows();
  }
  exo::nfivae::NfIvaeConfig ncfg = cfg.nfivae;
  if (ncfg.latent_dim < 1) ncfg.latent_dim = 1;
  ncfg.seed = exo::mix_seed(cfg.seed, 0x6e666976ULL);
  const auto trained = exo::nfivae::train_nfivae(z, subject, ncfg);
  for (const auto& d : trained.diagnostics) std::cout << "diagnostic: " << d << "\n";
  if (!trained.log.empty()) {
    std::cout << "final total loss " << trained.log.back().total << " after "
              << trained.log.size() << " epochs\n";
  }
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    const std::filesystem::path root(cfg.output_dir);
    exo::nfivae::save_checkpoint(trained.model, (root / "nfivae_checkpoint.json").string());
    exo::nfivae::write_training_log_csv(trained.log, (root / "nfivae_log.csv").string());
    std::cout << "checkpoint written to " << cfg.output_dir << "\n";
  }
  return 0;
}

int stability_command(const exo::pipeline::PipelineConfig& cfg) {
  exo::pipeline::PipelineConfig run_cfg = cfg;
  if (run_cfg.stability.n_runs < 2) run_cfg.stability.n_runs = 30;
  run_cfg.skeletons = false;
  const auto report = exo::pipeline::run_pipeline(run_cfg);
  if (report.has_stability) {
    for (const auto& [name, freq] : report.stability.frequency) {
      std::cout << name << "\t" << freq << "\n";
    }
  } else {
    std::cout << "stability stage skipped (screening empty)\n";
  }
  return 0;
}

int skeleton_command(const exo::pipeline::PipelineConfig& cfg, int subject,
                     bool include_candidates) {
  const auto ds = exo::dataset::load_dataset(cfg.dataset_dir);
  std::vector<std::string> nodes = ds.nodes_in_network(cfg.study_network);
  if (include_candidates) {
    for (std::size_t i = 0; i < ds.nodes.size(); ++i) {
      if (ds.networks[i] != cfg.study_network) nodes.push_back(ds.nodes[i]);
    }
  }
  if (subject < 0 || subject >= static_cast<int>(ds.data.size())) {
    throw exo::ConfigError("subject index out of range");
  }
  exo::pc::PcConfig pcfg;
  pcfg.alpha = cfg.alpha;
  pcfg.null_cfg = cfg.null_cfg;
  pcfg.null_cfg.seed = exo::mix_seed(cfg.seed, 0x736b656cULL);
  pcfg.workers = cfg.workers > 0 ? cfg.workers : exo::default_workers();
  std::vector<exo::kernel::SampleVector> series;
  for (const auto& name : nodes) {
    series.push_back(exo::kernel::SampleVector{
        ds.data[static_cast<std::size_t>(subject)].col(ds.node_index(name)), false});
  }
  const auto skel = exo::pc::pc_skeleton(nodes, series, pcfg);
  const std::string edge_list = exo::pc::to_edge_list(skel);
  std::cout << edge_list;
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    std::ofstream out(std::filesystem::path(cfg.output_dir) / "skeleton.txt");
    out << edge_list;
  }
  return 0;
}

int synth_command(const std::string& out_dir, int n_subjects, int n_samples,
                  const std::string& mechanism, std::uint64_t seed) {
  const exo::scm::Mechanism mech = mechanism == "mlp" ? exo::scm::Mechanism::kMlpNonlinear
                                                      : exo::scm::Mechanism::kLinearGaussian;
  auto [ds, spec] = exo::scm::generate_two_confounder_scm(n_subjects, n_samples, mech, seed);
  exo::dataset::write_dataset(ds, out_dir);
  // Ground-truth edges, for inspection; the pipeline never reads this.
  nlohmann::json truth;
  truth["mechanism"] = mechanism == "mlp" ? "mlp" : "linear";
  truth["confounders"] = {"s2", "s4"};
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t e = 0; e < spec.edges.size(); ++e) {
    edges.push_back({{"parent", spec.nodes[static_cast<std::size_t>(spec.edges[e].first)].name},
                     {"child", spec.nodes[static_cast<std::size_t>(spec.edges[e].second)].name},
                     {"weight", spec.edge_weights[e]}});
  }
  truth["edges"] = edges;
  std::ofstream out(std::filesystem::path(out_dir) / "scm_truth.json");
  out << truth.dump(1) << "\n";
  std::cout << "fixture written to " << out_dir << " (" << n_subjects << " subjects, "
            << n_samples << " samples)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"identification of essential exogenous nodes for an in-study network"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  CLI::App* run = app.add_subcommand("run", "full pipeline: screen, NF-iVAE, CCI, skeletons");
  add_common(run, &run_flags);

  CommonFlags screen_flags;
  CLI::App* screen = app.add_subcommand("screen", "screening steps 1-2 only");
  add_common(screen, &screen_flags);

  CommonFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "NF-iVAE training only");
  add_common(train, &train_flags);

  CommonFlags stability_flags;
  CLI::App* stability = app.add_subcommand("stability", "multi-run CCI stability analysis");
  add_common(stability, &stability_flags);

  CommonFlags skeleton_flags;
  int skeleton_subject = 0;
  bool skeleton_all = false;
  CLI::App* skeleton = app.add_subcommand("skeleton", "PC skeleton only");
  add_common(skeleton, &skeleton_flags);
  skeleton->add_option("--subject", skeleton_subject, "subject index to run PC on");
  skeleton->add_flag("--include-candidates", skeleton_all,
                     "run over the study network plus all candidate nodes");

  std::string synth_out = "fixture";
  int synth_subjects = 40;
  int synth_samples = 500;
  std::string synth_mechanism = "linear";
  std::int64_t synth_seed = 0;
  CLI::App* synth = app.add_subcommand("synth", "write the two-confounder synthetic fixture");
  synth->add_option("--output", synth_out, "output directory");
  synth->add_option("--subjects", synth_subjects, "number of subjects");
  synth->add_option("--samples", synth_samples, "time points per subject");
  synth->add_option("--mechanism", synth_mechanism, "linear | mlp");
  synth->add_option("--seed", synth_seed, "generation seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) return run_command(build_config(run_flags));
    if (screen->parsed()) return screen_command(build_config(screen_flags));
    if (train->parsed()) return train_command(build_config(train_flags));
    if (stability->parsed()) return stability_command(build_config(stability_flags));
    if (skeleton->parsed()) {
      return skeleton_command(build_config(skeleton_flags), skeleton_subject, skeleton_all);
    }
    if (synth->parsed()) {
      return synth_command(synth_out, synth_subjects, synth_samples, synth_mechanism,
                           static_cast<std::uint64_t>(synth_seed));
    }
  } catch (const exo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const exo::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const exo::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
