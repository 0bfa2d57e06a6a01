#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "clustrial/errors.hpp"

namespace clustrial {

enum class OutcomeFamily { gaussian, binomial_logit };

enum class WeightScheme { equal_centers, equal_patients };

struct PatientRecord {
    std::string patient_id;
    std::string center_id;
    std::string cluster_id; // empty when the dataset has no cluster level
    int treatment = 0;      // 1 = treated, 0 = control
    std::vector<double> covariates;
    double outcome = 0.0;
};

/// Immutable trial data. Centers (and clusters) are enumerated in
/// first-appearance order; every per-center output follows that order.
class TrialDataset {
public:
    TrialDataset(std::vector<PatientRecord> records,
                 OutcomeFamily family,
                 std::vector<std::string> covariate_names);

    const std::vector<PatientRecord>& records() const { return records_; }
    OutcomeFamily family() const { return family_; }
    const std::vector<std::string>& covariate_names() const { return covariate_names_; }

    int n() const { return static_cast<int>(records_.size()); }
    int k() const { return static_cast<int>(center_ids_.size()); }
    int covariate_count() const { return static_cast<int>(covariate_names_.size()); }
    bool has_clusters() const { return !cluster_ids_.empty(); }
    int cluster_count() const { return static_cast<int>(cluster_ids_.size()); }

    const std::vector<std::string>& center_ids() const { return center_ids_; }
    const std::vector<int>& center_of() const { return center_of_; }
    const std::vector<int>& center_sizes() const { return center_sizes_; }
    const std::vector<std::vector<int>>& center_rows() const { return center_rows_; }

    const std::vector<std::string>& cluster_ids() const { return cluster_ids_; }
    const std::vector<int>& cluster_of() const { return cluster_of_; }
    const std::vector<int>& cluster_sizes() const { return cluster_sizes_; }
    /// Parent center index of each cluster.
    const std::vector<int>& cluster_center() const { return cluster_center_; }
    const std::vector<std::vector<int>>& cluster_rows() const { return cluster_rows_; }

    Eigen::VectorXd outcomes() const;
    Eigen::VectorXd treatments() const;
    Eigen::MatrixXd covariate_matrix() const;

private:
    void validate() const;
    void index();

    std::vector<PatientRecord> records_;
    OutcomeFamily family_;
    std::vector<std::string> covariate_names_;

    std::vector<std::string> center_ids_;
    std::vector<int> center_of_;
    std::vector<int> center_sizes_;
    std::vector<std::vector<int>> center_rows_;

    std::vector<std::string> cluster_ids_;
    std::vector<int> cluster_of_;
    std::vector<int> cluster_sizes_;
    std::vector<int> cluster_center_;
    std::vector<std::vector<int>> cluster_rows_;
};

/// Per-center weights under a scheme, in center-enumeration order.
/// equal_centers gives 1/k; equal_patients gives n_c / n. Sums to 1.
std::vector<std::pair<std::string, double>> center_weights(const TrialDataset& data,
                                                           WeightScheme scheme);
Eigen::VectorXd center_weight_vector(const TrialDataset& data, WeightScheme scheme);

struct CsvSchema {
    std::string outcome;
    std::string treatment;
    std::string center;
    std::string cluster;    // optional
    std::string patient_id; // optional; synthesized as the row number if absent
    std::vector<std::string> covariates;
};

/// Load a header-carrying CSV under the schema mapping. Rejects missing
/// columns, non-numeric cells, treatments outside {0,1} and (for the
/// binomial family) outcomes outside {0,1}, reporting the offending row.
TrialDataset load_csv(const std::string& path, const CsvSchema& schema, OutcomeFamily family);

/// Write a dataset back to CSV with round-trip-exact numeric formatting.
void write_csv(const TrialDataset& data, const std::string& path);

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double value);

} // namespace clustrial
