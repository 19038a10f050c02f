#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "exo/cci.hpp"
#include "exo/dataset.hpp"
#include "exo/nf_ivae.hpp"
#include "exo/pc_skeleton.hpp"
#include "exo/screening.hpp"

namespace exo::pipeline {

inline constexpr const char* kVersion = "0.1.0";

struct StabilityConfig {
  int n_runs = 0;  // 0: skip the stability stage
  int k = 5;
};

struct PipelineConfig {
  double alpha = 0.05;
  double cci_threshold = 0.5;
  kernel::NullConfig null_cfg;
  bool bh_correction = false;
  nfivae::NfIvaeConfig nfivae;
  StabilityConfig stability;
  std::string dataset_dir;
  std::string output_dir;
  std::string study_network = "study";
  std::vector<std::string> candidate_networks;  // empty: every non-study network
  int workers = 0;  // 0: hardware concurrency
  std::uint64_t seed = 0;
  int skeleton_subject = 0;
  bool skeletons = true;
};

PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config(const std::string& path);
std::string config_hash(const PipelineConfig& cfg);

struct ReportSeeds {
  std::uint64_t base = 0;
  std::uint64_t screening = 0;
  std::uint64_t nfivae = 0;
  std::uint64_t stability = 0;
  std::uint64_t skeleton = 0;
};

struct ConfounderReport {
  std::string version;
  nlohmann::json config;
  std::string config_hash;
  ReportSeeds seeds;
  std::vector<std::string> z_nodes;
  std::vector<std::string> candidate_pool;
  screening::CandidateSet candidates;
  cci::CciTable cci_table;
  std::vector<std::string> selected;
  bool has_stability = false;
  cci::StabilityReport stability;
  bool has_skeletons = false;
  std::string skeleton_before;  // edge-list text, Z only
  std::string skeleton_after;   // edge-list text, Z plus selected confounders
  std::vector<nfivae::TrainLogEntry> train_log;
  std::vector<std::string> diagnostics;
  std::vector<std::string> notes;
  std::map<std::string, double> timings;  // informational; excluded from equality
};

nlohmann::json report_to_json(const ConfounderReport& report);
ConfounderReport report_from_json(const nlohmann::json& j);

// Equality modulo the timing fields.
bool reports_equivalent(const ConfounderReport& a, const ConfounderReport& b);

// Screening -> NF-iVAE -> CCI selection -> optional stability, plus the
// before/after PC skeletons. Writes the report and intermediate files to
// cfg.output_dir when it is set.
ConfounderReport run_pipeline(const PipelineConfig& cfg);

// Same pipeline on an already-loaded dataset (used by tests and the
// synthetic acceptance harness).
ConfounderReport run_pipeline_on(const dataset::SubjectDataset& ds, const PipelineConfig& cfg);

void emit_report(const ConfounderReport& report, const std::string& output_dir);

}  // namespace exo::pipeline
