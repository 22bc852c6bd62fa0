#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afi/network.hpp"

namespace afi {

// Formats a count as the two-decimal K/M/G string the cost tables use
// (round-half-up, powers of ten). Values below 1000 print as plain integers.
std::string humanize_count(int64_t value);

struct CostRow {
    std::string scope;  // "stage1".."stage3" or "network"
    int64_t params = 0;
    int64_t flops = 0;  // per batch
};

// Exact integer cost accounting of one configuration. Per-stage rows exclude
// the stem and classifier head; the "network" row includes them.
struct CostTable {
    std::vector<CostRow> rows;
    int batch = 32;
    std::string convention;
    std::vector<std::string> notes;

    const CostRow& row(const std::string& scope) const;
    int64_t total_params() const { return row("network").params; }
    int64_t total_flops() const { return row("network").flops; }
};

// Counting convention (per sample, multiplied by the batch size):
//   conv    k^2 * (Cin/groups) * Cout * Hout * Wout
//   linear  Cin * Cout
//   bn      2 * numel(output)
//   relu / pooling / softmax / elementwise add & scale: 0
//   scoring 2 * C * Cb per charged application (arity recorded in the plan)
CostTable count_params(const NetworkConfig& config);
CostTable count_flops(const NetworkConfig& config, int batch = 32);
CostTable cost_table(const NetworkConfig& config, int batch = 32);

// Closed form of the per-stage scoring cost: sum over i = 3..N+1 of
// 2*(i-1)*C*Cb applications-with-cost, which collapses to
// C*Cb*(N+2)*(N-1). Returns 0 for N < 2.
int64_t scoring_flops_closed_form(int64_t n, int64_t channels, int64_t reduction);

struct CompareReport {
    std::string raw_csv;    // header scope,params_a,flops_a,params_b,flops_b,dparams,dflops
    std::string human_csv;  // same rows, humanized units, notes appended as comments
};

CompareReport compare_report(const NetworkConfig& config_a, const NetworkConfig& config_b,
                             int batch = 32);

// Single-table CSV emission (header scope,params,flops).
std::string cost_csv(const CostTable& table, bool humanized);

}  // namespace afi
