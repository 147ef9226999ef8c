#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "lipcert/certify/certify.hpp"
#include "lipcert/cli/config.hpp"

namespace lipcert::cli {

// Command bodies behind the CLI front end, separated so tests can drive them
// directly. Every command returns a process exit code: 0 success, 2 config
// or I/O trouble, 3 diverged training, 4 shape mismatch, 1 anything else.
// Human-readable progress goes to `out`, diagnostics to `err`.

// Trains per the config file and writes <out_dir>/train_log.csv, the
// checkpoint under <out_dir>/checkpoint/, and the eval split under
// <out_dir>/eval/ so certify/attack can reuse it. Nothing is written when
// the config fails to parse.
int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::ostream& out, std::ostream& err);

// Certifies every point of a saved dataset. Writes <out_dir>/points.csv
// (one row per input with the radius and a certified@eps column per budget)
// and <out_dir>/summary.csv (one VRA row per epsilon).
int cmd_certify(const std::string& ckpt_dir, const std::string& dataset_dir,
                const std::vector<double>& epsilons, certify::Method method,
                const std::string& out_dir, std::ostream& out,
                std::ostream& err);

// PGD on every point; writes <out_dir>/attacks.csv and prints clean /
// empirical-robust / verified accuracy. Empirical < verified earns a
// soundness warning on `err` (and exit 1): certification must err low.
int cmd_attack(const std::string& ckpt_dir, const std::string& dataset_dir,
               double epsilon, std::size_t steps, std::size_t restarts,
               const std::string& out_dir, std::ostream& out,
               std::ostream& err);

struct BenchOptions {
  std::vector<std::size_t> sizes = {64, 256};
  std::size_t reps = 5;
  // subset of {cholesky, cayley, matexp, lot}; empty = all four
  std::vector<std::string> methods;
  std::string out_csv;  // optional copy of the table
};

// Times each orthogonalization on fresh random square matrices (one warmup
// draw per method, then `reps` timed draws; the median lands in the table)
// and reports the worst orthogonality residual seen. A residual above 1e-6
// fails the run.
int cmd_bench_ortho(const BenchOptions& opt, std::ostream& out,
                    std::ostream& err);

// Dense-mechanism ablation on the config's task: one row per mechanism,
// same seed/data/schedule. Writes <out_dir>/ablate.csv.
int cmd_ablate(const std::string& config_path,
               const std::vector<std::string>& mechanisms,
               const std::string& out_dir, std::ostream& out,
               std::ostream& err);

// Renders a markdown summary of a cmd_train output directory (plus any
// certify/attack/ablate artifacts found next to it).
int cmd_report(const std::string& run_dir, std::ostream& out,
               std::ostream& err);

// Shared exit-code policy: runs `body`, maps known failures to codes and
// prints the diagnostic to `err`.
int run_command(std::ostream& err, const std::function<int()>& body);

}  // namespace lipcert::cli
