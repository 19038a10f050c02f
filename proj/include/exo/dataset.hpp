#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "exo/errors.hpp"

namespace exo::dataset {

// Multi-subject multivariate time series plus node labels and network
// assignments; the sole input of the identification pipeline.
struct SubjectDataset {
  std::vector<std::string> nodes;     // order fixed by the labels file
  std::vector<std::string> networks;  // one per node
  std::vector<std::string> subject_ids;
  std::vector<Eigen::MatrixXd> data;  // per subject: time points x nodes

  int node_index(const std::string& name) const;  // throws UnknownNode
  std::vector<std::string> nodes_in_network(const std::string& network) const;
};

// Layout: labels.csv (node,network) plus one sub_<id>.csv per subject with a
// header of node names and one row per time point.
SubjectDataset load_dataset(const std::string& dir);
void write_dataset(const SubjectDataset& ds, const std::string& dir);

void validate(const SubjectDataset& ds);

}  // namespace exo::dataset
