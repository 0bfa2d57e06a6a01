// Compares the serial reference scenario runner against the OpenMP runner on
// a small scenario and checks that they produce identical summaries.

#include <chrono>
#include <iostream>

#include <omp.h>

#include "clustrial/harness.hpp"

using namespace clustrial;

namespace {

double run_timed(const ScenarioConfig& config, int jobs, ScenarioResult& out) {
    const auto start = std::chrono::steady_clock::now();
    out = run_scenario(config, jobs);
    const auto end = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(end - start).count();
}

bool same_rows(const ScenarioResult& a, const ScenarioResult& b) {
    if (a.rows.size() != b.rows.size()) return false;
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        if (a.rows[i].bias != b.rows[i].bias) return false;
        if (a.rows[i].mse != b.rows[i].mse) return false;
        if (a.rows[i].mc_sd != b.rows[i].mc_sd) return false;
    }
    return true;
}

} // namespace

int main(int argc, char** argv) {
    ScenarioConfig config;
    config.id = "bench";
    config.dgm.endpoint = EndpointKind::continuous;
    config.dgm.setting = 1;
    config.dgm.sigma2_b0 = 0.15;
    config.dgm.sigma2_b1 = 0.15;
    config.replications = argc > 1 ? std::atoi(argv[1]) : 40;
    config.master_seed = 7;
    config.truth_draws = 100000;

    const int threads = argc > 2 ? std::atoi(argv[2]) : omp_get_max_threads();

    ScenarioResult serial, parallel;
    const double t_serial = run_timed(config, 1, serial);
    const double t_parallel = run_timed(config, threads, parallel);

    std::cout << "replications: " << config.replications << "\n";
    std::cout << "serial reference: " << t_serial << " s\n";
    std::cout << "openmp x" << threads << ":       " << t_parallel << " s\n";
    std::cout << "speedup: " << t_serial / t_parallel << "\n";
    std::cout << "identical results: " << (same_rows(serial, parallel) ? "yes" : "NO") << "\n";
    return same_rows(serial, parallel) ? 0 : 1;
}
