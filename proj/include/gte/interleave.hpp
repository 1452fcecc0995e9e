#pragma once

#include "gte/graph.hpp"
#include "gte/types.hpp"

namespace gte {

enum class HamiltonianCheck { Pass, Unknown };

// C1: every node attends to itself. C2: Dirac sufficient condition for a
// Hamiltonian path (min undirected degree >= N/2), inconclusive otherwise.
// C3: weakly connected and a double-sweep BFS diameter lower bound <= L
// (one adjacency hop per attention layer).
struct ConditionReport {
  bool c1_self_attend = false;
  HamiltonianCheck c2_hamiltonian = HamiltonianCheck::Unknown;
  bool c3_reachable_within_l = false;
  Index layers = 0;
  // Endpoints of the double sweep, kept so c3 can be spot-verified.
  Index sweep_from = -1;
  Index sweep_to = -1;
  Index diameter_lower_bound = -1;

  bool all_pass() const {
    return c1_self_attend && c2_hamiltonian == HamiltonianCheck::Pass && c3_reachable_within_l;
  }
};

enum class Mode { Sparse, Dense };
enum class ModeReason { ConditionsFailed, ScheduledDense, ConditionsPassed };

struct AttentionMode {
  Mode mode = Mode::Dense;
  ModeReason reason = ModeReason::ConditionsFailed;
};

const char* to_string(Mode m);
const char* to_string(ModeReason r);

// g_seq is the sequence's attention graph after self-loop insertion.
ConditionReport check_conditions(const Graph& g_seq, Index layers);

// Epochs are 1-based; every dense_period-th epoch runs dense regardless of
// the report.
AttentionMode select_mode(const ConditionReport& report, Index epoch, Index dense_period);

}  // namespace gte
