#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"

namespace clusterpolicy {

// ============================================================================
// CSV ingestion. Schema: cluster_id,unit_id,Y,A,X1,...,Xp[,e1]
// Header required, UTF-8, no quoting. Units are grouped by cluster id and
// clusters keep file order; rows of one cluster need not be contiguous.
// ============================================================================

struct CsvSchema {
    std::string cluster_id = "cluster_id";
    std::string unit_id = "unit_id";
    std::string outcome = "Y";
    std::string treatment = "A";
    std::string covariate_prefix = "X";
    std::string propensity = "e1";
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) {
        while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
        while (!field.empty() && field.front() == ' ') field.erase(field.begin());
        fields.push_back(field);
    }
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

inline double parse_double(const std::string& s, const std::string& what, int row) {
    if (s.empty())
        throw ValidationError("row " + std::to_string(row) + ": missing value for " + what);
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("row " + std::to_string(row) + ": cannot parse " + what + " value '" +
                              s + "'");
    }
}

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

struct RawCluster {
    std::string id;
    std::vector<std::string> unit_ids;
    std::vector<double> y;
    std::vector<int> a;
    std::vector<std::vector<double>> x;
    std::vector<double> e1;
};

}  // namespace detail

inline ClusterDataset load_dataset(const std::string& path, const CsvSchema& schema = {}) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open dataset file '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw ValidationError("dataset file '" + path + "' is empty");
    const auto header = detail::split_csv_line(line);

    auto find_col = [&](const std::string& name) -> int {
        for (std::size_t k = 0; k < header.size(); ++k)
            if (header[k] == name) return static_cast<int>(k);
        return -1;
    };
    const int col_cid = find_col(schema.cluster_id);
    const int col_uid = find_col(schema.unit_id);
    const int col_y = find_col(schema.outcome);
    const int col_a = find_col(schema.treatment);
    const int col_e = find_col(schema.propensity);
    for (auto [col, name] : {std::pair<int, const std::string*>{col_cid, &schema.cluster_id},
                             {col_uid, &schema.unit_id},
                             {col_y, &schema.outcome},
                             {col_a, &schema.treatment}}) {
        if (col < 0) throw ValidationError("missing required column '" + *name + "'");
    }
    std::vector<int> col_x;
    for (int k = 1;; ++k) {
        int c = find_col(schema.covariate_prefix + std::to_string(k));
        if (c < 0) break;
        col_x.push_back(c);
    }
    if (col_x.empty())
        throw ValidationError("missing covariate columns '" + schema.covariate_prefix + "1', ...");
    const int p = static_cast<int>(col_x.size());

    std::vector<detail::RawCluster> raw;
    std::map<std::string, std::size_t> index;
    int row = 1;  // header is row 1
    int data_rows = 0;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ValidationError("row " + std::to_string(row) + ": expected " +
                                  std::to_string(header.size()) + " fields but found " +
                                  std::to_string(fields.size()));
        }
        ++data_rows;
        const std::string& cid = fields[col_cid];
        auto it = index.find(cid);
        if (it == index.end()) {
            it = index.emplace(cid, raw.size()).first;
            raw.push_back(detail::RawCluster{cid, {}, {}, {}, {}, {}});
        }
        auto& rc = raw[it->second];
        rc.unit_ids.push_back(fields[col_uid]);
        rc.y.push_back(detail::parse_double(fields[col_y], schema.outcome, row));
        const double a = detail::parse_double(fields[col_a], schema.treatment, row);
        if (a != 0.0 && a != 1.0) {
            throw ValidationError("row " + std::to_string(row) + ": treatment " +
                                  schema.treatment + "=" + fields[col_a] + " is not binary");
        }
        rc.a.push_back(static_cast<int>(a));
        std::vector<double> xs(p);
        for (int k = 0; k < p; ++k) {
            xs[k] = detail::parse_double(fields[col_x[k]],
                                         schema.covariate_prefix + std::to_string(k + 1), row);
        }
        rc.x.push_back(std::move(xs));
        if (col_e >= 0)
            rc.e1.push_back(detail::parse_double(fields[col_e], schema.propensity, row));
    }
    if (data_rows == 0) throw ValidationError("dataset file '" + path + "' has no data rows");

    std::vector<Cluster> clusters;
    clusters.reserve(raw.size());
    for (auto& rc : raw) {
        const int m = static_cast<int>(rc.y.size());
        Cluster c;
        c.id = rc.id;
        c.unit_ids = std::move(rc.unit_ids);
        c.outcomes = Eigen::Map<const Eigen::VectorXd>(rc.y.data(), m);
        c.treatments = Eigen::Map<const Eigen::VectorXi>(rc.a.data(), m);
        c.covariates.resize(m, p);
        for (int j = 0; j < m; ++j)
            for (int k = 0; k < p; ++k) c.covariates(j, k) = rc.x[j][k];
        if (!rc.e1.empty()) c.pscores = Eigen::Map<const Eigen::VectorXd>(rc.e1.data(), m);
        clusters.push_back(std::move(c));
    }
    return ClusterDataset::from_clusters(std::move(clusters));
}

inline void save_dataset(const ClusterDataset& ds, const std::string& path,
                         const CsvSchema& schema = {}) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open '" + path + "' for writing");
    const bool with_e = ds.has_pscores();
    out << schema.cluster_id << ',' << schema.unit_id << ',' << schema.outcome << ','
        << schema.treatment;
    for (int k = 1; k <= ds.p; ++k) out << ',' << schema.covariate_prefix << k;
    if (with_e) out << ',' << schema.propensity;
    out << '\n';
    for (const auto& c : ds.clusters) {
        for (int j = 0; j < c.size(); ++j) {
            out << c.id << ',';
            out << (c.unit_ids.empty() ? std::to_string(j + 1) : c.unit_ids[j]);
            out << ',' << detail::format_double(c.outcomes[j]) << ',' << c.treatments[j];
            for (int k = 0; k < ds.p; ++k) out << ',' << detail::format_double(c.covariates(j, k));
            if (with_e) out << ',' << detail::format_double(c.pscores[j]);
            out << '\n';
        }
    }
}

}  // namespace clusterpolicy
