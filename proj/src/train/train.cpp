#include "lipcert/train/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numbers>
#include <random>
#include <sstream>

#include "lipcert/errors.hpp"

namespace lipcert::train {

void TrainConfig::validate() const {
  if (epsilon_train < 0.0)
    throw ConfigError("train: epsilon_train must be >= 0");
  if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (!(learning_rate > 0.0))
    throw ConfigError("train: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("train: momentum must lie in [0, 1)");
  if (ramp_fraction < 0.0 || ramp_fraction > 1.0)
    throw ConfigError("train: ramp fraction must lie in [0, 1]");
  mix.validate();
}

namespace {

// 17 significant digits round-trip a double exactly
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

std::size_t argmax_row(const Tensor& f, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < f.cols(); ++j)
    if (f(row, j) > f(row, best)) best = j;
  return best;
}

}  // namespace

std::string TrainLog::csv() const {
  std::ostringstream os;
  os << "epoch,clean_acc";
  for (double e : eval_epsilons) os << ",vra@" << g6(e);
  os << ",loss,lip_product,seconds\n";
  for (const EpochRecord& r : records) {
    os << r.epoch << ',' << g17(r.clean_acc);
    for (double v : r.vra) os << ',' << g17(v);
    os << ',' << g17(r.loss) << ',' << g17(r.lip_product) << ','
       << g17(r.seconds) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// loss pieces

Tensor gloro_augmented_logits(const Tensor& logits, const Matrix& head_w,
                              double k_backbone, double epsilon) {
  if (logits.rank() != 1 || logits.size() < 2)
    throw ShapeMismatch("augmented logits: need at least two logits");
  if (head_w.rank() != 2 || head_w.rows() != logits.size())
    throw ShapeMismatch("augmented logits: head has wrong row count");
  if (!(k_backbone > 0.0))
    throw ConfigError("augmented logits: k_backbone must be positive");
  if (epsilon < 0.0)
    throw ConfigError("augmented logits: epsilon must be >= 0");

  const std::size_t classes = logits.size(), d = head_w.cols();
  std::size_t j = 0;
  for (std::size_t i = 1; i < classes; ++i)
    if (logits[i] > logits[j]) j = i;

  double bot = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < classes; ++i) {
    if (i == j) continue;
    double wnorm = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      const double dw = head_w(j, p) - head_w(i, p);
      wnorm += dw * dw;
    }
    bot = std::max(bot,
                   logits[i] + epsilon * k_backbone * std::sqrt(wnorm));
  }

  Tensor out({classes + 1});
  for (std::size_t i = 0; i < classes; ++i) out[i] = logits[i];
  out[classes] = bot;
  return out;
}

Tensor gloro_augmented_logits_naive(const Tensor& logits, double k,
                                    double epsilon) {
  if (logits.rank() != 1 || logits.size() < 2)
    throw ShapeMismatch("augmented logits: need at least two logits");
  if (!(k > 0.0)) throw ConfigError("augmented logits: k must be positive");
  if (epsilon < 0.0)
    throw ConfigError("augmented logits: epsilon must be >= 0");

  const std::size_t classes = logits.size();
  std::size_t j = 0;
  for (std::size_t i = 1; i < classes; ++i)
    if (logits[i] > logits[j]) j = i;
  double rival = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < classes; ++i)
    if (i != j) rival = std::max(rival, logits[i]);

  Tensor out({classes + 1});
  for (std::size_t i = 0; i < classes; ++i) out[i] = logits[i];
  out[classes] = rival + std::numbers::sqrt2 * k * epsilon;
  return out;
}

double loss(const Tensor& extended_logits, int label) {
  if (extended_logits.rank() != 1 || extended_logits.size() < 2)
    throw ShapeMismatch("loss: extended logits must be a vector");
  const std::size_t n = extended_logits.size();
  if (label < 0 || static_cast<std::size_t>(label) >= n - 1)
    throw ConfigError("loss: label must index a real class");

  double m = extended_logits[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, extended_logits[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    s += std::exp(extended_logits[i] - m);
  return m + std::log(s) - extended_logits[static_cast<std::size_t>(label)];
}

NodeId build_augmented_logits(Tape& t, NodeId logits, NodeId head_w,
                              NodeId k_backbone, double epsilon) {
  if (epsilon < 0.0)
    throw ConfigError("augmented logits: epsilon must be >= 0");
  // recording ops may reallocate the tape, so snapshot values before that
  const Tensor f = t.value(logits);
  if (f.rank() != 2 || f.cols() < 2)
    throw ShapeMismatch("augmented logits: need a (batch, classes) matrix");

  std::vector<std::size_t> js(f.rows());
  for (std::size_t b = 0; b < f.rows(); ++b) js[b] = argmax_row(f, b);

  // penalty(b, i) = f(b, i) + epsilon * k * ||w_{j_b} - w_i||; the argmax
  // column itself has zero penalty and is excluded from the max anyway
  const NodeId pair = t.head_pair_bounds(head_w, js);
  const NodeId pens =
      t.add(logits, t.mul_scalar(pair, t.scale(k_backbone, epsilon)));
  const NodeId bot = t.row_max_excluding(pens, js);
  return t.append_col(logits, bot);
}

NodeId build_augmented_logits_naive(Tape& t, NodeId logits, NodeId k_total,
                                    double epsilon) {
  if (epsilon < 0.0)
    throw ConfigError("augmented logits: epsilon must be >= 0");
  const Tensor f = t.value(logits);  // snapshot: recording reallocates
  if (f.rank() != 2 || f.cols() < 2)
    throw ShapeMismatch("augmented logits: need a (batch, classes) matrix");

  std::vector<std::size_t> js(f.rows());
  for (std::size_t b = 0; b < f.rows(); ++b) js[b] = argmax_row(f, b);

  const NodeId rival = t.row_max_excluding(logits, js);
  const NodeId shift = t.scale(k_total, std::numbers::sqrt2 * epsilon);
  // broadcast the {1} shift over the column of rivals
  const NodeId bot = t.reshape(
      t.add_rowvec(t.reshape(rival, {f.rows(), 1}), shift), {f.rows()});
  return t.append_col(logits, bot);
}

NodeId build_mean_ce(Tape& t, NodeId extended,
                     const std::vector<std::size_t>& labels) {
  if (t.value(extended).rank() != 2 || t.value(extended).dim(1) < 2)
    throw ShapeMismatch("mean ce: need a (batch, classes+1) matrix");
  const std::size_t rows = t.value(extended).rows();
  const std::size_t cols = t.value(extended).cols();
  if (labels.size() != rows)
    throw ShapeMismatch("mean ce: one label per row required");
  for (std::size_t l : labels)
    if (l + 1 >= cols)
      throw ConfigError("mean ce: label must index a real class");

  const NodeId per = t.sub(t.row_lse(extended),
                           t.pick_per_row(extended, labels));
  return t.scale(t.reduce_sum(per), 1.0 / static_cast<double>(rows));
}

double eps_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs)
    throw ConfigError("eps_schedule: epoch out of range");
  const double ramp =
      cfg.ramp_fraction * static_cast<double>(cfg.epochs - 1);
  if (ramp <= 0.0 || static_cast<double>(epoch) >= ramp)
    return cfg.epsilon_train;
  return cfg.epsilon_train * static_cast<double>(epoch) / ramp;
}

// ---------------------------------------------------------------------------
// training loop

namespace {

Tensor stack_inputs(const data::Dataset& batch) {
  const std::vector<std::size_t>& s = batch.front().input.shape();
  std::vector<std::size_t> shape{batch.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  const std::size_t per = batch.front().input.size();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].input.shape() != s)
      throw ShapeMismatch("train: batch inputs must share one shape");
    std::copy_n(batch[b].input.data(), per, out.data() + b * per);
  }
  return out;
}

bool repro_mode() {
  const char* v = std::getenv("LIPCERT_REPRO");
  return v != nullptr && *v != '\0' && std::string(v) != "0";
}

}  // namespace

TrainLog train(layers::Network& net, const data::Dataset& train_set,
               const data::Dataset& eval_set, const data::Dataset& generated,
               const TrainConfig& cfg) {
  cfg.validate();
  net.validate();
  if (train_set.empty()) throw EmptyDataset("train: empty training set");
  if (eval_set.empty()) throw EmptyDataset("train: empty evaluation set");
  const std::size_t classes = net.class_count();
  for (const data::Sample& s : train_set)
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes)
      throw ConfigError("train: label out of range");

  // an epoch is one pass worth of draws over the dominant pool
  const std::size_t per_batch = cfg.mix.real_count() > 0
                                    ? cfg.mix.real_count()
                                    : cfg.mix.generated_count();
  const std::size_t pool = cfg.mix.real_count() > 0 ? train_set.size()
                                                    : generated.size();
  const std::size_t steps_per_epoch =
      std::max<std::size_t>(1, (pool + per_batch - 1) / per_batch);
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;

  std::mt19937_64 rng(cfg.seed);
  std::vector<Tensor*> params = net.all_params();
  std::vector<Tensor> velocity;
  velocity.reserve(params.size());
  for (Tensor* p : params) velocity.emplace_back(p->shape());

  const bool zero_clock = repro_mode();
  const double lr_base =
      cfg.learning_rate * static_cast<double>(cfg.mix.batch_size) / 256.0;

  TrainLog log;
  log.eval_epsilons = cfg.eval_epsilons;
  std::size_t gstep = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double eps = eps_schedule(epoch, cfg);
    double loss_sum = 0.0;

    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const data::Dataset batch =
          data::mix_batch(train_set, generated, cfg.mix, rng);
      std::vector<std::size_t> labels(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        if (batch[b].label < 0 ||
            static_cast<std::size_t>(batch[b].label) >= classes)
          throw ConfigError("train: label out of range");
        labels[b] = static_cast<std::size_t>(batch[b].label);
      }

      net.refresh_train_step();
      Tape t;
      const NodeId x = t.constant(stack_inputs(batch));
      layers::Network::BuiltGraph g = net.build_train(t, x);
      const NodeId kb = net.build_backbone_lip(t, g.pids);

      NodeId aug;
      if (cfg.method == certify::Method::kTight) {
        aug = build_augmented_logits(t, g.logits, g.pids.back()[0], kb, eps);
      } else {
        const NodeId ktot = t.mul(kb, net.head().lip_node(t, g.pids.back()));
        aug = build_augmented_logits_naive(t, g.logits, ktot, eps);
      }
      const NodeId lnode = build_mean_ce(t, aug, labels);

      const double lval = t.value(lnode)[0];
      if (!std::isfinite(lval))
        throw DivergedLoss("train: loss went non-finite", epoch);
      loss_sum += lval;

      t.backward(lnode, Tensor::full({1}, 1.0));
      const double lr =
          lr_base * 0.5 *
          (1.0 + std::cos(std::numbers::pi * static_cast<double>(gstep) /
                          static_cast<double>(total_steps)));
      std::size_t pi = 0;
      for (const std::vector<NodeId>& layer_pids : g.pids)
        for (const NodeId pid : layer_pids) {
          const Tensor& grad = t.grad(pid);
          Tensor& v = velocity[pi];
          Tensor& p = *params[pi];
          for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = cfg.momentum * v[i] + grad[i];
            p[i] -= lr * v[i];
          }
          ++pi;
        }
      ++gstep;
    }

    net.refresh_converged();
    const layers::LipReport lip = layers::network_lipschitz(net);

    // one certification pass serves the whole radius grid
    std::size_t correct = 0;
    std::vector<std::size_t> robust(cfg.eval_epsilons.size(), 0);
    for (const data::Sample& s : eval_set) {
      const certify::CertResult c =
          certify::certify_point(net, lip, s.input, cfg.method, 0.0);
      if (c.predicted != s.label) continue;
      ++correct;
      for (std::size_t i = 0; i < cfg.eval_epsilons.size(); ++i)
        if (c.certified_radius > cfg.eval_epsilons[i]) ++robust[i];
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.clean_acc =
        static_cast<double>(correct) / static_cast<double>(eval_set.size());
    for (std::size_t r : robust)
      rec.vra.push_back(static_cast<double>(r) /
                        static_cast<double>(eval_set.size()));
    rec.loss = loss_sum / static_cast<double>(steps_per_epoch);
    rec.lip_product = lip.backbone_product;
    rec.seconds =
        zero_clock
            ? 0.0
            : std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                            t0)
                  .count();
    log.records.push_back(std::move(rec));
  }
  return log;
}

// ---------------------------------------------------------------------------
// ablation

void append_dense_stack(layers::Network& net, const std::string& mechanism,
                        std::size_t in_dim, std::size_t width,
                        std::size_t depth) {
  if (width < 2 || width % 2 != 0)
    throw ConfigError("backbone: width must be even and >= 2");
  if (depth == 0) throw ConfigError("backbone: depth must be >= 1");

  // the lift into feature width is shared by every mechanism
  net.layers.push_back(std::make_unique<layers::DenseOrtho>(
      layers::Kind::kDenseCayley, in_dim, width));
  net.layers.push_back(
      std::make_unique<layers::MinMaxLayer>(layers::Shape{width}));

  for (std::size_t d = 0; d < depth; ++d) {
    bool with_minmax = true;
    if (mechanism == "gloro-regularized") {
      net.layers.push_back(
          std::make_unique<layers::DenseGloro>(width, width));
    } else if (mechanism == "cayley") {
      net.layers.push_back(std::make_unique<layers::DenseOrtho>(
          layers::Kind::kDenseCayley, width, width));
    } else if (mechanism == "matexp") {
      net.layers.push_back(std::make_unique<layers::DenseOrtho>(
          layers::Kind::kDenseMatexp, width, width));
    } else if (mechanism == "cholesky-residual") {
      net.layers.push_back(std::make_unique<layers::DenseOrtho>(
          layers::Kind::kDenseCholeskyResidual, width, width));
    } else if (mechanism == "lot") {
      net.layers.push_back(std::make_unique<layers::DenseOrtho>(
          layers::Kind::kDenseLot, width, width));
    } else if (mechanism == "aol") {
      net.layers.push_back(std::make_unique<layers::AolDense>(width, width));
    } else if (mechanism == "sll") {
      net.layers.push_back(std::make_unique<layers::SllBlock>(width));
      with_minmax = false;  // the block applies its own activation
    } else if (mechanism == "sandwich") {
      net.layers.push_back(std::make_unique<layers::SandwichBlock>(width));
      with_minmax = false;
    } else {
      throw ConfigError("backbone: unknown mechanism '" + mechanism + "'");
    }
    if (with_minmax)
      net.layers.push_back(
          std::make_unique<layers::MinMaxLayer>(layers::Shape{width}));
  }
}

layers::Network make_dense_backbone(const std::string& mechanism,
                                    std::size_t input_dim, std::size_t width,
                                    std::size_t depth, std::size_t classes) {
  layers::Network net;
  net.input_shape = {input_dim};
  append_dense_stack(net, mechanism, input_dim, width, depth);
  net.layers.push_back(std::make_unique<layers::Head>(width, classes));
  net.validate();
  return net;
}

std::string AblationTable::csv() const {
  std::ostringstream os;
  os << "mechanism,clean_acc";
  for (double e : eval_epsilons) os << ",vra@" << g6(e);
  os << ",loss,lip_product,seconds_per_epoch\n";
  for (const AblationRow& r : rows) {
    os << r.mechanism << ',' << g17(r.clean_acc);
    for (double v : r.vra) os << ',' << g17(v);
    os << ',' << g17(r.loss) << ',' << g17(r.lip_product) << ','
       << g17(r.seconds_per_epoch) << '\n';
  }
  return os.str();
}

AblationTable ablate_dense_mechanism(const AblationConfig& cfg,
                                     const std::vector<std::string>& mechanisms,
                                     const data::Dataset& train_set,
                                     const data::Dataset& eval_set,
                                     const data::Dataset& generated) {
  if (mechanisms.empty())
    throw ConfigError("ablate: at least one mechanism required");

  AblationTable table;
  table.eval_epsilons = cfg.base.eval_epsilons;
  for (const std::string& mech : mechanisms) {
    layers::Network net = make_dense_backbone(mech, cfg.input_dim, cfg.width,
                                              cfg.depth, cfg.classes);
    std::mt19937_64 rng(cfg.base.seed);
    net.init(rng);
    const TrainLog log = train(net, train_set, eval_set, generated, cfg.base);

    const EpochRecord& last = log.records.back();
    AblationRow row;
    row.mechanism = mech;
    row.clean_acc = last.clean_acc;
    row.vra = last.vra;
    row.loss = last.loss;
    row.lip_product = last.lip_product;
    double sec = 0.0;
    for (const EpochRecord& r : log.records) sec += r.seconds;
    row.seconds_per_epoch = sec / static_cast<double>(log.records.size());
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace lipcert::train
