#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lipcert/cli/commands.hpp"
#include "lipcert/cli/config.hpp"

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) parts.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

const std::vector<std::string> kAllMechanisms = {
    "gloro-regularized", "cayley", "matexp", "cholesky-residual",
    "lot",               "aol",    "sll",    "sandwich"};

}  // namespace

int main(int argc, char** argv) {
  using namespace lipcert;

  CLI::App app{"Lipschitz-certified training and certification toolkit"};
  app.require_subcommand(1);

  // train
  std::string train_config, train_out = "run";
  CLI::App* train = app.add_subcommand("train", "train a model from a config");
  train->add_option("config", train_config, "config file")->required();
  train->add_option("-o,--out", train_out, "output directory");

  // certify
  std::string cert_ckpt, cert_data, cert_out = "certify";
  std::string cert_eps = "0,36/255,72/255,108/255", cert_method = "tight";
  CLI::App* certc = app.add_subcommand("certify", "certify a saved dataset");
  certc->add_option("checkpoint", cert_ckpt, "checkpoint directory")
      ->required();
  certc->add_option("dataset", cert_data, "dataset directory")->required();
  certc->add_option("--eps", cert_eps, "epsilon list (fractions ok)");
  certc->add_option("--method", cert_method, "naive | tight");
  certc->add_option("-o,--out", cert_out, "output directory");

  // attack
  std::string atk_ckpt, atk_data, atk_out = "attack";
  std::string atk_eps = "36/255";
  std::size_t atk_steps = 100, atk_restarts = 5;
  CLI::App* attack = app.add_subcommand("attack", "PGD a saved dataset");
  attack->add_option("checkpoint", atk_ckpt, "checkpoint directory")
      ->required();
  attack->add_option("dataset", atk_data, "dataset directory")->required();
  attack->add_option("--eps", atk_eps, "attack radius (fraction ok)");
  attack->add_option("--steps", atk_steps, "PGD steps");
  attack->add_option("--restarts", atk_restarts, "random restarts");
  attack->add_option("-o,--out", atk_out, "output directory");

  // ablate
  std::string abl_config, abl_out = "ablation", abl_mechs;
  CLI::App* ablate =
      app.add_subcommand("ablate", "compare dense mechanisms on one task");
  ablate->add_option("config", abl_config, "config file")->required();
  ablate->add_option("--mechanisms", abl_mechs,
                     "comma list (default: all eight)");
  ablate->add_option("-o,--out", abl_out, "output directory");

  // bench-ortho
  std::string bench_sizes = "64,256", bench_methods, bench_csv;
  std::size_t bench_reps = 5;
  CLI::App* bench =
      app.add_subcommand("bench-ortho", "time the orthogonalizations");
  bench->add_option("--sizes", bench_sizes, "matrix sizes, comma list");
  bench->add_option("--reps", bench_reps, "timed draws per cell");
  bench->add_option("--methods", bench_methods,
                    "subset of cholesky,cayley,matexp,lot");
  bench->add_option("--csv", bench_csv, "also write the table here");

  // report
  std::string report_dir;
  CLI::App* report =
      app.add_subcommand("report", "summarize a training run as markdown");
  report->add_option("run_dir", report_dir, "cmd_train output directory")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (train->parsed())
    return cli::cmd_train(train_config, train_out, std::cout, std::cerr);

  if (certc->parsed()) {
    return cli::run_command(std::cerr, [&]() -> int {
      return cli::cmd_certify(cert_ckpt, cert_data,
                              cli::parse_epsilon_list(cert_eps),
                              certify::method_from_name(cert_method),
                              cert_out, std::cout, std::cerr);
    });
  }

  if (attack->parsed()) {
    return cli::run_command(std::cerr, [&]() -> int {
      return cli::cmd_attack(atk_ckpt, atk_data,
                             cli::parse_epsilon(atk_eps), atk_steps,
                             atk_restarts, atk_out, std::cout, std::cerr);
    });
  }

  if (ablate->parsed()) {
    const std::vector<std::string> mechs =
        abl_mechs.empty() ? kAllMechanisms : split_csv(abl_mechs);
    return cli::cmd_ablate(abl_config, mechs, abl_out, std::cout,
                           std::cerr);
  }

  if (bench->parsed()) {
    return cli::run_command(std::cerr, [&]() -> int {
      cli::BenchOptions opt;
      opt.sizes.clear();
      for (const std::string& s : split_csv(bench_sizes))
        opt.sizes.push_back(std::stoull(s));
      opt.reps = bench_reps;
      opt.methods = split_csv(bench_methods);
      opt.out_csv = bench_csv;
      return cli::cmd_bench_ortho(opt, std::cout, std::cerr);
    });
  }

  if (report->parsed())
    return cli::cmd_report(report_dir, std::cout, std::cerr);

  return 2;
}
