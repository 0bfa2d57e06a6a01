#include "clustrial/dataset.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace clustrial {

TrialDataset::TrialDataset(std::vector<PatientRecord> records,
                           OutcomeFamily family,
                           std::vector<std::string> covariate_names)
    : records_(std::move(records)),
      family_(family),
      covariate_names_(std::move(covariate_names)) {
    validate();
    index();
}

void TrialDataset::validate() const {
    if (records_.empty()) throw DataError("dataset has no records");
    const std::size_t n_cov = covariate_names_.size();
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const PatientRecord& r = records_[i];
        if (r.treatment != 0 && r.treatment != 1)
            throw DataError("record " + std::to_string(i + 1) + ": treatment must be 0 or 1");
        if (r.covariates.size() != n_cov)
            throw DataError("record " + std::to_string(i + 1) + ": expected " +
                            std::to_string(n_cov) + " covariates, got " +
                            std::to_string(r.covariates.size()));
        if (!std::isfinite(r.outcome))
            throw DataError("record " + std::to_string(i + 1) + ": non-finite outcome");
        if (family_ == OutcomeFamily::binomial_logit && r.outcome != 0.0 && r.outcome != 1.0)
            throw DataError("record " + std::to_string(i + 1) +
                            ": binomial outcome must be 0 or 1");
        for (double x : r.covariates)
            if (!std::isfinite(x))
                throw DataError("record " + std::to_string(i + 1) + ": non-finite covariate");
        if (r.center_id.empty())
            throw DataError("record " + std::to_string(i + 1) + ": empty center id");
    }
}

void TrialDataset::index() {
    std::unordered_map<std::string, int> center_index;
    std::unordered_map<std::string, int> cluster_index;
    center_of_.resize(records_.size());
    cluster_of_.assign(records_.size(), -1);

    const bool any_cluster = !records_.empty() && !records_.front().cluster_id.empty();
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const PatientRecord& r = records_[i];
        if (r.cluster_id.empty() == any_cluster)
            throw DataError("record " + std::to_string(i + 1) +
                            ": cluster id present for some records but not all");

        auto [cit, cinserted] = center_index.try_emplace(r.center_id, k());
        if (cinserted) {
            center_ids_.push_back(r.center_id);
            center_sizes_.push_back(0);
            center_rows_.emplace_back();
        }
        const int c = cit->second;
        center_of_[i] = c;
        ++center_sizes_[c];
        center_rows_[c].push_back(static_cast<int>(i));

        if (any_cluster) {
            // Cluster ids are scoped to their center so identical labels in
            // different centers stay distinct.
            const std::string key = r.center_id + "\x1f" + r.cluster_id;
            auto [jit, jinserted] = cluster_index.try_emplace(key, cluster_count());
            if (jinserted) {
                cluster_ids_.push_back(r.cluster_id);
                cluster_sizes_.push_back(0);
                cluster_center_.push_back(c);
                cluster_rows_.emplace_back();
            }
            const int j = jit->second;
            if (cluster_center_[j] != c)
                throw DataError("record " + std::to_string(i + 1) +
                                ": cluster spans multiple centers");
            cluster_of_[i] = j;
            ++cluster_sizes_[j];
            cluster_rows_[j].push_back(static_cast<int>(i));
        }
    }

    if (k() < 2) throw DataError("dataset must contain at least 2 distinct centers");
}

Eigen::VectorXd TrialDataset::outcomes() const {
    Eigen::VectorXd y(n());
    for (int i = 0; i < n(); ++i) y(i) = records_[i].outcome;
    return y;
}

Eigen::VectorXd TrialDataset::treatments() const {
    Eigen::VectorXd a(n());
    for (int i = 0; i < n(); ++i) a(i) = static_cast<double>(records_[i].treatment);
    return a;
}

Eigen::MatrixXd TrialDataset::covariate_matrix() const {
    Eigen::MatrixXd x(n(), covariate_count());
    for (int i = 0; i < n(); ++i)
        for (int j = 0; j < covariate_count(); ++j) x(i, j) = records_[i].covariates[j];
    return x;
}

Eigen::VectorXd center_weight_vector(const TrialDataset& data, WeightScheme scheme) {
    const int k = data.k();
    Eigen::VectorXd w(k);
    if (scheme == WeightScheme::equal_centers) {
        w.setConstant(1.0 / static_cast<double>(k));
    } else {
        const double n = static_cast<double>(data.n());
        for (int c = 0; c < k; ++c)
            w(c) = static_cast<double>(data.center_sizes()[c]) / n;
    }
    return w;
}

std::vector<std::pair<std::string, double>> center_weights(const TrialDataset& data,
                                                           WeightScheme scheme) {
    const Eigen::VectorXd w = center_weight_vector(data, scheme);
    std::vector<std::pair<std::string, double>> out;
    out.reserve(data.k());
    for (int c = 0; c < data.k(); ++c) out.emplace_back(data.center_ids()[c], w(c));
    return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

std::string format_double(double value) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, ptr);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_number(const std::string& cell, const std::string& column, std::size_t row) {
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end)
        throw DataError("row " + std::to_string(row) + ", column '" + column +
                        "': non-numeric value '" + cell + "'");
    return value;
}

int require_column(const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    throw DataError("missing column '" + name + "'");
}

} // namespace

TrialDataset load_csv(const std::string& path, const CsvSchema& schema, OutcomeFamily family) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw DataError("empty file: " + path);
    const std::vector<std::string> header = split_csv_line(line);

    const int col_outcome = require_column(header, schema.outcome);
    const int col_treatment = require_column(header, schema.treatment);
    const int col_center = require_column(header, schema.center);
    const int col_cluster = schema.cluster.empty() ? -1 : require_column(header, schema.cluster);
    const int col_patient =
        schema.patient_id.empty() ? -1 : require_column(header, schema.patient_id);
    std::vector<int> col_covariates;
    for (const std::string& name : schema.covariates)
        col_covariates.push_back(require_column(header, name));

    std::vector<PatientRecord> records;
    std::size_t row = 1; // header is row 1
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        auto cell = [&](int idx, const std::string& column) -> const std::string& {
            if (idx < 0 || idx >= static_cast<int>(fields.size()))
                throw DataError("row " + std::to_string(row) + ": missing value in column '" +
                                column + "'");
            const std::string& v = fields[idx];
            if (v.empty())
                throw DataError("row " + std::to_string(row) + ": missing value in column '" +
                                column + "'");
            return v;
        };

        PatientRecord r;
        r.patient_id =
            col_patient >= 0 ? cell(col_patient, schema.patient_id) : std::to_string(row - 1);
        r.center_id = cell(col_center, schema.center);
        if (col_cluster >= 0) r.cluster_id = cell(col_cluster, schema.cluster);

        const double a = parse_number(cell(col_treatment, schema.treatment), schema.treatment, row);
        if (a != 0.0 && a != 1.0)
            throw DataError("row " + std::to_string(row) + ": treatment value " +
                            format_double(a) + " outside {0,1}");
        r.treatment = static_cast<int>(a);

        r.outcome = parse_number(cell(col_outcome, schema.outcome), schema.outcome, row);
        if (family == OutcomeFamily::binomial_logit && r.outcome != 0.0 && r.outcome != 1.0)
            throw DataError("row " + std::to_string(row) + ": binomial outcome " +
                            format_double(r.outcome) + " outside {0,1}");

        r.covariates.reserve(col_covariates.size());
        for (std::size_t j = 0; j < col_covariates.size(); ++j)
            r.covariates.push_back(
                parse_number(cell(col_covariates[j], schema.covariates[j]), schema.covariates[j], row));

        records.push_back(std::move(r));
    }

    return TrialDataset(std::move(records), family, schema.covariates);
}

void write_csv(const TrialDataset& data, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open file for writing: " + path);

    out << "patient_id,center_id";
    if (data.has_clusters()) out << ",cluster_id";
    out << ",treatment,outcome";
    for (const std::string& name : data.covariate_names()) out << "," << name;
    out << "\n";

    for (const PatientRecord& r : data.records()) {
        out << r.patient_id << "," << r.center_id;
        if (data.has_clusters()) out << "," << r.cluster_id;
        out << "," << r.treatment << "," << format_double(r.outcome);
        for (double x : r.covariates) out << "," << format_double(x);
        out << "\n";
    }
}

} // namespace clustrial
