#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "medfpca/errors.hpp"

namespace medfpca {

// One unit's sparse irregular series: treatment flag, strictly increasing
// time stamps, and mediator/outcome/covariate observations aligned to them.
struct SubjectSeries {
  std::string id;
  int z = 0;
  std::vector<double> times;
  std::vector<double> mediator;
  std::vector<double> outcome;
  Eigen::MatrixXd covariates;  // one row per time stamp

  int n_obs() const { return static_cast<int>(times.size()); }
};

struct Dataset {
  std::vector<SubjectSeries> subjects;
  std::vector<std::string> covariate_names;
  std::pair<double, double> time_range{0.0, 1.0};

  int total_obs() const {
    int n = 0;
    for (const auto& s : subjects) n += s.n_obs();
    return n;
  }
};

// Column-name mapping for long-format CSV ingestion.
struct CsvSchema {
  std::string id = "id";
  std::string treatment = "z";
  std::string time = "time";
  std::string mediator = "mediator";
  std::string outcome = "outcome";
  std::vector<std::string> covariates;
};

enum class OutcomeTransform { none, log };

struct Violation {
  std::string subject;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& s, int row, const std::string& col) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("row " + std::to_string(row) + ": cannot parse '" + s +
                          "' in column '" + col + "'");
  }
}

}  // namespace detail

inline ValidationReport validate(const Dataset& ds) {
  ValidationReport rep;
  int arm_count[2] = {0, 0};
  for (const auto& s : ds.subjects) {
    if (s.z != 0 && s.z != 1) {
      rep.violations.push_back({s.id, "treatment not in {0,1}"});
    } else {
      ++arm_count[s.z];
    }
    if (s.n_obs() < 1) rep.violations.push_back({s.id, "no observations"});
    const auto n = s.times.size();
    if (s.mediator.size() != n || s.outcome.size() != n ||
        static_cast<std::size_t>(s.covariates.rows()) != n) {
      rep.violations.push_back({s.id, "misaligned series lengths"});
      continue;
    }
    for (std::size_t j = 0; j + 1 < n; ++j) {
      if (!(s.times[j] < s.times[j + 1])) {
        rep.violations.push_back({s.id, "non-increasing times"});
        break;
      }
    }
    bool finite = true;
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(s.times[j]) || !std::isfinite(s.mediator[j]) ||
          !std::isfinite(s.outcome[j]))
        finite = false;
      for (Eigen::Index c = 0; c < s.covariates.cols(); ++c)
        if (!std::isfinite(s.covariates(j, c))) finite = false;
    }
    if (!finite) rep.violations.push_back({s.id, "non-finite value"});
    if (!s.times.empty() &&
        (s.times.front() < ds.time_range.first - 1e-12 ||
         s.times.back() > ds.time_range.second + 1e-12))
      rep.violations.push_back({s.id, "time outside declared range"});
    if (static_cast<std::size_t>(s.covariates.cols()) != ds.covariate_names.size())
      rep.violations.push_back({s.id, "covariate column count mismatch"});
  }
  if (arm_count[0] == 0) rep.violations.push_back({"", "treatment arm empty (z=0)"});
  if (arm_count[1] == 0) rep.violations.push_back({"", "treatment arm empty (z=1)"});
  return rep;
}

// Load a long-format CSV (header row, '.' decimal separator), group rows by
// id, and sort each subject's rows by time with the same permutation applied
// to mediator, outcome, and covariates.
inline Dataset load_dataset(const std::string& path, const CsvSchema& schema,
                            OutcomeTransform transform = OutcomeTransform::none) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string header;
  if (!std::getline(in, header)) throw SchemaError("empty file '" + path + "'");
  if (!header.empty() && header.back() == '\r') header.pop_back();
  const auto cols = detail::split_csv_line(header);
  std::map<std::string, int> col_index;
  for (std::size_t i = 0; i < cols.size(); ++i)
    col_index[cols[i]] = static_cast<int>(i);

  auto require = [&](const std::string& name) {
    auto it = col_index.find(name);
    if (it == col_index.end())
      throw SchemaError("missing column '" + name + "' in '" + path + "'");
    return it->second;
  };
  const int ci = require(schema.id);
  const int cz = require(schema.treatment);
  const int ct = require(schema.time);
  const int cm = require(schema.mediator);
  const int cy = require(schema.outcome);
  std::vector<int> cx;
  cx.reserve(schema.covariates.size());
  for (const auto& name : schema.covariates) cx.push_back(require(name));

  struct Row {
    double t, m, y;
    std::vector<double> x;
  };
  std::map<std::string, std::pair<int, std::vector<Row>>> groups;  // id -> (z, rows)
  std::vector<std::string> order;  // first-appearance order of ids

  std::string line;
  int rowno = 0;
  while (std::getline(in, line)) {
    ++rowno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != cols.size())
      throw ValidationError("row " + std::to_string(rowno) + ": expected " +
                            std::to_string(cols.size()) + " fields, got " +
                            std::to_string(f.size()));
    for (int c : {cz, ct, cm, cy}) {
      if (f[static_cast<std::size_t>(c)].empty())
        throw ValidationError("row " + std::to_string(rowno) +
                              ": blank value in column '" + cols[c] + "'");
    }
    const double zv = detail::parse_number(f[cz], rowno, cols[cz]);
    if (!std::isfinite(zv) || (zv != 0.0 && zv != 1.0))
      throw ValidationError("row " + std::to_string(rowno) +
                            ": treatment value not in {0,1}");
    Row r;
    r.t = detail::parse_number(f[ct], rowno, cols[ct]);
    r.m = detail::parse_number(f[cm], rowno, cols[cm]);
    r.y = detail::parse_number(f[cy], rowno, cols[cy]);
    if (transform == OutcomeTransform::log) {
      if (r.y <= 0.0)
        throw ValidationError("row " + std::to_string(rowno) +
                              ": outcome <= 0 under log transform");
      r.y = std::log(r.y);
    }
    r.x.reserve(cx.size());
    for (int c : cx) {
      if (f[static_cast<std::size_t>(c)].empty())
        throw ValidationError("row " + std::to_string(rowno) +
                              ": blank value in column '" + cols[c] + "'");
      r.x.push_back(detail::parse_number(f[c], rowno, cols[c]));
    }
    const std::string& id = f[ci];
    auto it = groups.find(id);
    if (it == groups.end()) {
      groups[id] = {static_cast<int>(zv), {}};
      order.push_back(id);
      it = groups.find(id);
    } else if (it->second.first != static_cast<int>(zv)) {
      throw ValidationError("row " + std::to_string(rowno) +
                            ": treatment changes within subject '" + id + "'");
    }
    it->second.second.push_back(std::move(r));
  }

  Dataset ds;
  ds.covariate_names = schema.covariates;
  double tmax = 0.0;
  for (const auto& id : order) {
    auto& [z, rows] = groups[id];
    std::vector<std::size_t> perm(rows.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(),
                     [&](std::size_t a, std::size_t b) { return rows[a].t < rows[b].t; });
    SubjectSeries s;
    s.id = id;
    s.z = z;
    s.covariates.resize(static_cast<Eigen::Index>(rows.size()),
                        static_cast<Eigen::Index>(schema.covariates.size()));
    for (std::size_t j = 0; j < perm.size(); ++j) {
      const Row& r = rows[perm[j]];
      s.times.push_back(r.t);
      s.mediator.push_back(r.m);
      s.outcome.push_back(r.y);
      for (std::size_t c = 0; c < r.x.size(); ++c)
        s.covariates(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) = r.x[c];
      tmax = std::max(tmax, r.t);
    }
    ds.subjects.push_back(std::move(s));
  }
  ds.time_range = {0.0, tmax > 0.0 ? tmax : 1.0};
  return ds;
}

inline void write_dataset(const std::string& path, const Dataset& ds,
                          const CsvSchema& schema = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << schema.id << ',' << schema.treatment << ',' << schema.time << ','
      << schema.mediator << ',' << schema.outcome;
  const auto& names =
      schema.covariates.empty() ? ds.covariate_names : schema.covariates;
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  char buf[512];
  for (const auto& s : ds.subjects) {
    for (int j = 0; j < s.n_obs(); ++j) {
      out << s.id << ',' << s.z;
      std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%.17g", s.times[j],
                    s.mediator[j], s.outcome[j]);
      out << buf;
      for (Eigen::Index c = 0; c < s.covariates.cols(); ++c) {
        std::snprintf(buf, sizeof(buf), ",%.17g", s.covariates(j, c));
        out << buf;
      }
      out << '\n';
    }
  }
}

// Rescale all times to [0,1] by dividing by T_max. Returns the scale applied
// (1 when already normalized).
inline std::pair<Dataset, double> normalize_time(Dataset ds) {
  double tobs = 0.0;
  for (const auto& s : ds.subjects)
    for (double t : s.times) tobs = std::max(tobs, t);
  if (!(tobs > 0.0))
    throw DomainError("normalize_time: degenerate time range (T_max <= 0)");
  // The declared upper bound wins when it exceeds the observed maximum, so a
  // dataset already on [0,1] is left untouched (scale 1).
  const double tmax = std::max(tobs, ds.time_range.second);
  for (auto& s : ds.subjects)
    for (auto& t : s.times) t /= tmax;
  ds.time_range = {0.0, 1.0};
  return {std::move(ds), tmax};
}

}  // namespace medfpca
