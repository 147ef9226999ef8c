#include "lipcert/cli/commands.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "lipcert/cli/checkpoint.hpp"
#include "lipcert/data/tasks.hpp"
#include "lipcert/errors.hpp"
#include "lipcert/layers/ortho.hpp"
#include "lipcert/numerics/linalg.hpp"
#include "lipcert/train/train.hpp"

namespace lipcert::cli {

namespace {

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* cap = std::getenv("LIPCERT_THREADS")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(cap, &end, 10);
    if (end != cap && *end == '\0' && v > 0) n = std::min<std::size_t>(n, v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

// Fan out over [0, jobs); each index writes only its own slot, so results
// are identical to the serial order no matter the interleaving.
void parallel_for(std::size_t jobs,
                  const std::function<void(std::size_t)>& body) {
  const std::size_t workers = worker_count(jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs) return;
        body(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

data::Dataset make_task(const DataConfig& d, std::size_t count,
                        std::size_t classes, std::uint64_t seed) {
  if (d.task == "two-moons") return data::make_two_moons(count, seed);
  return data::make_synth_images(count, classes, seed);
}

Tensor flatten(const Tensor& x) {
  return Tensor::from_values({x.size()},
                             std::vector<double>(x.data(),
                                                 x.data() + x.size()));
}

// forward_eval wants a leading batch dimension
Tensor as_row(const Tensor& x) {
  return Tensor::from_values({1, x.size()},
                             std::vector<double>(x.data(),
                                                 x.data() + x.size()));
}

Tensor softmax(const Tensor& logits) {
  std::vector<double> p(logits.data(), logits.data() + logits.size());
  const double top = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(v - top));
  for (double& v : p) v /= z;
  const std::size_t classes = p.size();  // before the move materializes
  return Tensor::from_values({classes}, std::move(p));
}

// Generated pool: fit the per-class Gaussian on the real training set, draw,
// score with a small dense classifier trained briefly on the real data, and
// drop the least-plausible tail.
data::Dataset build_generated_pool(const RunConfig& cfg,
                                   const data::Dataset& train_set,
                                   const data::Dataset& eval_set,
                                   std::ostream& out) {
  if (cfg.data.gen_count == 0) return {};

  std::size_t flat_dim = 1;
  for (std::size_t d : cfg.model.input_shape) flat_dim *= d;

  auto flat_copy = [&](const data::Dataset& src) {
    data::Dataset dst = src;
    for (data::Sample& s : dst) s.input = flatten(s.input);
    return dst;
  };
  const data::Dataset flat_train = flat_copy(train_set);
  const data::Dataset flat_eval = flat_copy(eval_set);

  layers::Network scorer = train::make_dense_backbone(
      "cholesky-residual", flat_dim, 16, 1, cfg.model.classes);
  std::mt19937_64 rng(cfg.data.seed);
  scorer.init(rng);

  train::TrainConfig scfg;
  scfg.epsilon_train = 0.0;
  scfg.epochs = cfg.data.scorer_epochs;
  scfg.eval_epsilons = {};
  scfg.seed = cfg.data.seed;
  scfg.mix.batch_size = std::min<std::size_t>(128, flat_train.size());
  train::train(scorer, flat_train, flat_eval, {}, scfg);

  data::SynthGenerator gen(train_set, cfg.model.classes, cfg.data.seed + 2);
  data::Dataset pool = gen.draw(cfg.data.gen_count);
  pool = data::score_samples(
      [&](const Tensor& x) { return softmax(scorer.forward_eval(as_row(x))); },
      std::move(pool));
  const std::size_t before = pool.size();
  pool = data::filter_bottom_scores(pool, cfg.data.filter_fraction);
  out << "generated pool: " << before << " drawn, " << pool.size()
      << " kept after filtering\n";
  return pool;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("write failed for " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

void check_input_shape(const layers::Network& net, const data::Dataset& set) {
  if (set.empty()) throw EmptyDataset("dataset has no samples");
  if (set.front().input.shape() != net.input_shape)
    throw ShapeMismatch("dataset samples do not fit the network input");
}

}  // namespace

int run_command(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const DivergedLoss& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const ShapeMismatch& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::ostream& out, std::ostream& err) {
  return run_command(err, [&]() -> int {
    const std::string config_text = read_file(config_path);
    const RunConfig cfg = parse_config(config_text);

    data::Dataset train_set = make_task(cfg.data, cfg.data.train_count,
                                        cfg.model.classes, cfg.data.seed);
    data::Dataset eval_set = make_task(cfg.data, cfg.data.eval_count,
                                       cfg.model.classes, cfg.data.seed + 1);
    data::Dataset generated = build_generated_pool(cfg, train_set, eval_set,
                                                   out);

    layers::Network net = build_network(cfg.model);
    std::mt19937_64 rng(cfg.train.seed);
    net.init(rng);

    const train::TrainLog log =
        train::train(net, train_set, eval_set, generated, cfg.train);

    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/train_log.csv", log.csv());
    save_checkpoint(out_dir + "/checkpoint", net, config_text,
                    cfg.train.seed);
    data::save_dataset(out_dir + "/eval", eval_set);

    const train::EpochRecord& last = log.records.back();
    out << "trained " << log.records.size() << " epochs: clean "
        << g6(last.clean_acc);
    for (std::size_t i = 0; i < log.eval_epsilons.size(); ++i)
      out << ", vra@" << g6(log.eval_epsilons[i]) << " " << g6(last.vra[i]);
    out << ", loss " << g6(last.loss) << "\n";
    out << "wrote " << out_dir << "/train_log.csv, checkpoint/, eval/\n";
    return 0;
  });
}

int cmd_certify(const std::string& ckpt_dir, const std::string& dataset_dir,
                const std::vector<double>& epsilons, certify::Method method,
                const std::string& out_dir, std::ostream& out,
                std::ostream& err) {
  return run_command(err, [&]() -> int {
    for (double e : epsilons)
      if (e < 0.0) throw ConfigError("certify: epsilons must be >= 0");
    if (epsilons.empty()) throw ConfigError("certify: no epsilons given");

    Checkpoint ck = load_checkpoint(ckpt_dir);
    const data::Dataset set = data::load_dataset(dataset_dir);
    check_input_shape(ck.net, set);

    const layers::LipReport lip = layers::network_lipschitz(ck.net);
    std::vector<certify::CertResult> res(set.size());
    const layers::Network& net = ck.net;
    parallel_for(set.size(), [&](std::size_t i) {
      res[i] = certify::certify_point(net, lip, set[i].input, method, 0.0);
    });

    std::ostringstream points;
    points << "index,label,predicted,margin,certified_radius,method";
    for (double e : epsilons) points << ",certified@" << g6(e);
    points << "\n";
    for (std::size_t i = 0; i < set.size(); ++i) {
      points << i << ',' << set[i].label << ',' << res[i].predicted << ','
             << g17(res[i].margin) << ',' << g17(res[i].certified_radius)
             << ',' << certify::method_name(method);
      for (double e : epsilons)
        points << ',' << (res[i].certified_radius > e ? 1 : 0);
      points << "\n";
    }

    std::ostringstream summary;
    summary << "epsilon,vra\n";
    out << "method " << certify::method_name(method) << ", "
        << set.size() << " points (backbone bound "
        << g6(lip.backbone_product) << ", head " << g6(lip.head_norm)
        << ")\n";
    for (double e : epsilons) {
      std::size_t ok = 0;
      for (std::size_t i = 0; i < set.size(); ++i)
        if (res[i].predicted == set[i].label && res[i].certified_radius > e)
          ++ok;
      const double v = static_cast<double>(ok) /
                       static_cast<double>(set.size());
      summary << g17(e) << ',' << g17(v) << "\n";
      out << "  vra@" << g6(e) << " = " << g6(v) << "\n";
    }

    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/points.csv", points.str());
    write_file(out_dir + "/summary.csv", summary.str());
    out << "wrote " << out_dir << "/points.csv, summary.csv\n";
    return 0;
  });
}

int cmd_attack(const std::string& ckpt_dir, const std::string& dataset_dir,
               double epsilon, std::size_t steps, std::size_t restarts,
               const std::string& out_dir, std::ostream& out,
               std::ostream& err) {
  return run_command(err, [&]() -> int {
    if (epsilon < 0.0) throw ConfigError("attack: epsilon must be >= 0");

    Checkpoint ck = load_checkpoint(ckpt_dir);
    const data::Dataset set = data::load_dataset(dataset_dir);
    check_input_shape(ck.net, set);

    // verified accuracy at the same budget, for the soundness ordering
    const double verified =
        certify::vra(ck.net, set, epsilon, certify::Method::kTight);

    const layers::Network& net = ck.net;
    const layers::LipReport lip = layers::network_lipschitz(net);
    struct Row {
      int predicted = 0;
      bool attacked = false;
      double norm = 0.0;
    };
    std::vector<Row> rows(set.size());
    parallel_for(set.size(), [&](std::size_t i) {
      rows[i].predicted =
          certify::certify_point(net, lip, set[i].input,
                                 certify::Method::kNaive, 0.0)
              .predicted;
      const certify::AttackResult ar = certify::pgd_attack(
          net, set[i].input, set[i].label, epsilon, steps, restarts);
      rows[i].attacked = ar.success;
      rows[i].norm = ar.norm;
    });

    std::ostringstream csv;
    csv << "index,label,predicted,attacked,attack_norm\n";
    std::size_t clean_ok = 0, robust_ok = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const bool correct = rows[i].predicted == set[i].label;
      clean_ok += correct;
      robust_ok += correct && !rows[i].attacked;
      csv << i << ',' << set[i].label << ',' << rows[i].predicted << ','
          << (rows[i].attacked ? 1 : 0) << ',' << g17(rows[i].norm) << "\n";
    }
    const double clean = static_cast<double>(clean_ok) /
                         static_cast<double>(set.size());
    const double empirical = static_cast<double>(robust_ok) /
                             static_cast<double>(set.size());

    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/attacks.csv", csv.str());

    out << "pgd eps " << g6(epsilon) << ", " << steps << " steps, "
        << restarts << " restarts over " << set.size() << " points\n";
    out << "  clean accuracy     " << g6(clean) << "\n";
    out << "  empirical robust   " << g6(empirical) << "\n";
    out << "  verified (tight)   " << g6(verified) << "\n";
    out << "wrote " << out_dir << "/attacks.csv\n";
    if (empirical + 1e-12 < verified) {
      err << "warning: empirical robust accuracy " << g17(empirical)
          << " fell below verified " << g17(verified)
          << " -- certification is supposed to err low\n";
      return 1;
    }
    return 0;
  });
}

int cmd_bench_ortho(const BenchOptions& opt, std::ostream& out,
                    std::ostream& err) {
  return run_command(err, [&]() -> int {
    using Clock = std::chrono::steady_clock;
    struct Entry {
      const char* name;
      Matrix (*run)(const Matrix&);
    };
    static const Entry kAll[] = {
        {"cholesky", [](const Matrix& a) {
           return layers::orthogonalize_cholesky(a);
         }},
        {"cayley", [](const Matrix& a) {
           return layers::orthogonalize_cayley(a);
         }},
        {"matexp", [](const Matrix& a) {
           return layers::orthogonalize_matexp(a);
         }},
        {"lot", [](const Matrix& a) {
           return layers::orthogonalize_lot(a, 12);
         }},
    };

    std::vector<Entry> chosen;
    if (opt.methods.empty()) {
      chosen.assign(std::begin(kAll), std::end(kAll));
    } else {
      for (const std::string& m : opt.methods) {
        bool found = false;
        for (const Entry& e : kAll)
          if (m == e.name) {
            chosen.push_back(e);
            found = true;
          }
        if (!found)
          throw ConfigError("bench-ortho: unknown method '" + m + "'");
      }
    }
    if (opt.sizes.empty()) throw ConfigError("bench-ortho: no sizes");
    for (std::size_t n : opt.sizes)
      if (n < 2) throw ConfigError("bench-ortho: sizes must be >= 2");
    if (opt.reps == 0) throw ConfigError("bench-ortho: reps must be >= 1");

    // weight-like draws: identity plus a small Gaussian perturbation keeps
    // every parameterization in its convergent regime (raw N(0,1) squares
    // can be near-singular, which LOT's fixed iteration budget rejects)
    auto random_square = [](std::size_t n, std::uint64_t seed) {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> g(0.0, 1.0);
      const double s = 0.3 / std::sqrt(static_cast<double>(n));
      Tensor a = Tensor::full({n, n}, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          a(i, j) = (i == j ? 1.0 : 0.0) + s * g(rng);
      return a;
    };

    std::ostringstream csv;
    csv << "method,n,median_ms,max_residual\n";
    out << "method        n   median_ms   max_residual\n";
    double worst = 0.0;
    for (const Entry& e : chosen) {
      // touch caches and one-time setup outside the timed region
      (void)e.run(random_square(64, 1));
      for (std::size_t n : opt.sizes) {
        std::vector<double> ms(opt.reps);
        double residual = 0.0;
        for (std::size_t r = 0; r < opt.reps; ++r) {
          const Matrix a = random_square(n, 1000 * n + r);
          const auto t0 = Clock::now();
          const Matrix w = e.run(a);
          const auto t1 = Clock::now();
          ms[r] = std::chrono::duration<double, std::milli>(t1 - t0).count();
          residual = std::max(residual,
                              numerics::orthogonality_residual(w));
        }
        std::sort(ms.begin(), ms.end());
        const double med = ms[ms.size() / 2];
        worst = std::max(worst, residual);
        csv << e.name << ',' << n << ',' << g17(med) << ','
            << g17(residual) << "\n";
        char line[128];
        std::snprintf(line, sizeof(line), "%-10s %6zu  %10.3f   %.3e\n",
                      e.name, n, med, residual);
        out << line;
      }
    }
    if (!opt.out_csv.empty()) write_file(opt.out_csv, csv.str());
    if (worst > 1e-6) {
      err << "error: orthogonality residual " << g17(worst)
          << " exceeds 1e-6\n";
      return 1;
    }
    return 0;
  });
}

int cmd_ablate(const std::string& config_path,
               const std::vector<std::string>& mechanisms,
               const std::string& out_dir, std::ostream& out,
               std::ostream& err) {
  return run_command(err, [&]() -> int {
    const RunConfig cfg = parse_config(read_file(config_path));

    data::Dataset train_set = make_task(cfg.data, cfg.data.train_count,
                                        cfg.model.classes, cfg.data.seed);
    data::Dataset eval_set = make_task(cfg.data, cfg.data.eval_count,
                                       cfg.model.classes, cfg.data.seed + 1);
    data::Dataset generated = build_generated_pool(cfg, train_set, eval_set,
                                                   out);

    // the ablation backbone is a flat dense stack; image tasks get flattened
    std::size_t flat_dim = 1;
    for (std::size_t d : cfg.model.input_shape) flat_dim *= d;
    if (cfg.model.input_shape.size() > 1) {
      for (data::Sample& s : train_set) s.input = flatten(s.input);
      for (data::Sample& s : eval_set) s.input = flatten(s.input);
      for (data::Sample& s : generated) s.input = flatten(s.input);
    }

    train::AblationConfig acfg;
    acfg.base = cfg.train;
    acfg.input_dim = flat_dim;
    acfg.width = cfg.model.dense_width;
    acfg.depth = cfg.model.dense_depth;
    acfg.classes = cfg.model.classes;

    const train::AblationTable table = train::ablate_dense_mechanism(
        acfg, mechanisms, train_set, eval_set, generated);

    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/ablate.csv", table.csv());
    out << table.csv();
    out << "wrote " << out_dir << "/ablate.csv\n";
    return 0;
  });
}

int cmd_report(const std::string& run_dir, std::ostream& out,
               std::ostream& err) {
  return run_command(err, [&]() -> int {
    const std::string log_csv = read_file(run_dir + "/train_log.csv");

    // last data row of the training log carries the final metrics
    std::vector<std::string> lines;
    std::istringstream is(log_csv);
    for (std::string line; std::getline(is, line);)
      if (!line.empty()) lines.push_back(line);
    if (lines.size() < 2) throw IoError("report: train_log.csv is empty");

    auto split = [](const std::string& s) {
      std::vector<std::string> parts;
      std::istringstream ls(s);
      for (std::string p; std::getline(ls, p, ',');) parts.push_back(p);
      return parts;
    };
    const std::vector<std::string> head = split(lines.front());
    const std::vector<std::string> last = split(lines.back());
    if (head.size() != last.size() || head.size() < 3)
      throw IoError("report: train_log.csv is malformed");

    out << "# lipcert run report\n\n";
    out << "## training (" << lines.size() - 1 << " epochs)\n\n";
    out << "| metric | final value |\n|---|---|\n";
    for (std::size_t i = 1; i < head.size(); ++i)
      out << "| " << head[i] << " | " << last[i] << " |\n";
    out << "\n";

    const std::string manifest_path = run_dir + "/checkpoint/manifest.txt";
    if (std::filesystem::exists(manifest_path)) {
      const std::string man = read_file(manifest_path);
      std::size_t layer_count = 0;
      std::string params, seed;
      std::istringstream ms(man);
      bool in_echo = false;
      for (std::string line; std::getline(ms, line);) {
        if (line == "config_begin") in_echo = true;
        if (line == "config_end") in_echo = false;
        if (in_echo) continue;
        if (line.rfind("layer =", 0) == 0) ++layer_count;
        if (line.rfind("param_count =", 0) == 0) params = line.substr(14);
        if (line.rfind("seed =", 0) == 0) seed = line.substr(7);
      }
      out << "## checkpoint\n\n";
      out << "- layers: " << layer_count << "\n";
      out << "- parameters: " << params << "\n";
      out << "- seed: " << seed << "\n\n";
    }

    const std::string summary_path = run_dir + "/certify/summary.csv";
    if (std::filesystem::exists(summary_path)) {
      out << "## certification\n\n| epsilon | vra |\n|---|---|\n";
      std::istringstream cs(read_file(summary_path));
      std::string line;
      std::getline(cs, line);  // header
      while (std::getline(cs, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        out << "| " << line.substr(0, comma) << " | "
            << line.substr(comma + 1) << " |\n";
      }
      out << "\n";
    }

    const std::string ablate_path = run_dir + "/ablate.csv";
    if (std::filesystem::exists(ablate_path)) {
      out << "## ablation\n\n```\n" << read_file(ablate_path) << "```\n";
    }
    return 0;
  });
}

}  // namespace lipcert::cli
