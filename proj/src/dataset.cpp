#include "exo/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "exo/errors.hpp"

namespace fs = std::filesystem;

namespace exo::dataset {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
    std::size_t start = 0;
    while (start < field.size() && field[start] == ' ') ++start;
    out.push_back(field.substr(start));
  }
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

}  // namespace

int SubjectDataset::node_index(const std::string& name) const {
  const auto it = std::find(nodes.begin(), nodes.end(), name);
  if (it == nodes.end()) throw UnknownNode("unknown node: " + name);
  return static_cast<int>(it - nodes.begin());
}

std::vector<std::string> SubjectDataset::nodes_in_network(const std::string& network) const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (networks[i] == network) out.push_back(nodes[i]);
  }
  return out;
}

void validate(const SubjectDataset& ds) {
  if (ds.nodes.size() != ds.networks.size()) {
    throw NodeMismatch("node/network count mismatch");
  }
  if (ds.subject_ids.size() != ds.data.size()) {
    throw NodeMismatch("subject id/data count mismatch");
  }
  for (std::size_t s = 0; s < ds.data.size(); ++s) {
    const auto& m = ds.data[s];
    if (m.cols() != static_cast<Eigen::Index>(ds.nodes.size())) {
      throw NodeMismatch("subject " + ds.subject_ids[s] + ": column count mismatch");
    }
    if (m.rows() < 8) {
      throw DataError("subject " + ds.subject_ids[s] + ": fewer than 8 time points");
    }
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (!std::isfinite(m(r, c))) {
          throw NonFiniteData("subject " + ds.subject_ids[s] + ": non-finite value at row " +
                              std::to_string(r + 1) + ", node " + ds.nodes[c]);
        }
      }
    }
  }
}

SubjectDataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  const fs::path labels_path = root / "labels.csv";
  if (!fs::exists(labels_path)) {
    throw MissingLabels("labels.csv not found in " + dir);
  }
  SubjectDataset ds;
  {
    std::ifstream in(labels_path);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto fields = split_csv_line(line);
      if (header) {
        header = false;
        if (fields.size() >= 2 && fields[0] == "node") continue;  // header row
      }
      if (fields.size() < 2) throw MissingLabels("labels.csv: malformed line: " + line);
      ds.nodes.push_back(fields[0]);
      ds.networks.push_back(fields[1]);
    }
  }
  if (ds.nodes.empty()) throw MissingLabels("labels.csv lists no nodes");

  std::vector<fs::path> subject_files;
  for (const auto& entry : fs::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("sub_", 0) == 0 && name.size() > 8 &&
        name.substr(name.size() - 4) == ".csv") {
      subject_files.push_back(entry.path());
    }
  }
  std::sort(subject_files.begin(), subject_files.end());
  if (subject_files.empty()) throw DataError("no sub_<id>.csv files in " + dir);

  for (const auto& path : subject_files) {
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
    const auto header = split_csv_line(line);
    if (header != ds.nodes) {
      throw NodeMismatch(path.filename().string() + ": column header differs from labels.csv");
    }
    std::vector<std::vector<double>> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto fields = split_csv_line(line);
      if (fields.size() != ds.nodes.size()) {
        throw DataError(path.filename().string() + ": wrong field count on line " +
                        std::to_string(line_no));
      }
      std::vector<double> row(fields.size());
      for (std::size_t c = 0; c < fields.size(); ++c) {
        try {
          row[c] = std::stod(fields[c]);
        } catch (const std::exception&) {
          throw NonFiniteData(path.filename().string() + ": unparsable value '" + fields[c] +
                              "' at line " + std::to_string(line_no) + ", node " + ds.nodes[c]);
        }
        if (!std::isfinite(row[c])) {
          throw NonFiniteData(path.filename().string() + ": non-finite value at line " +
                              std::to_string(line_no) + ", node " + ds.nodes[c]);
        }
      }
      rows.push_back(std::move(row));
    }
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(ds.nodes.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < rows[r].size(); ++c) {
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
      }
    }
    const std::string fname = path.filename().string();
    ds.subject_ids.push_back(fname.substr(4, fname.size() - 8));
    ds.data.push_back(std::move(m));
  }
  validate(ds);
  return ds;
}

void write_dataset(const SubjectDataset& ds, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root);
  {
    std::ofstream out(root / "labels.csv");
    out << "node,network\n";
    for (std::size_t i = 0; i < ds.nodes.size(); ++i) {
      out << ds.nodes[i] << "," << ds.networks[i] << "\n";
    }
  }
  char buf[32];
  for (std::size_t s = 0; s < ds.data.size(); ++s) {
    std::ofstream out(root / ("sub_" + ds.subject_ids[s] + ".csv"));
    for (std::size_t c = 0; c < ds.nodes.size(); ++c) {
      out << (c == 0 ? "" : ",") << ds.nodes[c];
    }
    out << "\n";
    const auto& m = ds.data[s];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        std::snprintf(buf, sizeof(buf), "%.17g", m(r, c));
        out << (c == 0 ? "" : ",") << buf;
      }
      out << "\n";
    }
  }
}

}  // namespace exo::dataset
