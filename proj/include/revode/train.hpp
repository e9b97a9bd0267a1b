#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "revode/data.hpp"
#include "revode/model_io.hpp"
#include "revode/network.hpp"

namespace revode {

struct TrainConfig {
  int batch = 100;
  int epochs = 200;
  double lr = 0.1;
  std::vector<int> decay_epochs = {80, 120, 160};
  double momentum = 0.9;
  double weight_decay = 2e-4;
  double smooth_decay = 2e-4;
  std::uint64_t seed = 1;
  double subsample_fraction = 1.0;
  std::string precision = "f32";
  long max_steps = 80000;  // stop criterion; 0 disables
  int eval_every = 1;
  int drift_check_every = 0;  // 0 = off
  std::string standardize = "per-image";
  bool augment = true;

  void validate() const {
    if (batch < 1) throw std::invalid_argument("train config: batch must be positive");
    if (epochs < 0) throw std::invalid_argument("train config: epochs must be non-negative");
    if (!(subsample_fraction > 0.0) || subsample_fraction > 1.0)
      throw std::invalid_argument("train config: subsample fraction must be in (0,1]");
    if (lr < 0 || momentum < 0 || weight_decay < 0 || smooth_decay < 0)
      throw std::invalid_argument("train config: coefficients must be non-negative");
    if (precision != "f32" && precision != "f64")
      throw std::invalid_argument("train config: precision must be f32 or f64");
    parse_standardize(standardize);
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"batch", c.batch},
                        {"epochs", c.epochs},
                        {"lr", c.lr},
                        {"decay_epochs", c.decay_epochs},
                        {"momentum", c.momentum},
                        {"weight_decay", c.weight_decay},
                        {"smooth_decay", c.smooth_decay},
                        {"seed", c.seed},
                        {"subsample_fraction", c.subsample_fraction},
                        {"precision", c.precision},
                        {"max_steps", c.max_steps},
                        {"eval_every", c.eval_every},
                        {"drift_check_every", c.drift_check_every},
                        {"standardize", c.standardize},
                        {"augment", c.augment}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  if (j.contains("decay_epochs")) c.decay_epochs = j.at("decay_epochs").get<std::vector<int>>();
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.smooth_decay = j.value("smooth_decay", c.smooth_decay);
  c.seed = j.value("seed", c.seed);
  c.subsample_fraction = j.value("subsample_fraction", c.subsample_fraction);
  c.precision = j.value("precision", c.precision);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.drift_check_every = j.value("drift_check_every", c.drift_check_every);
  c.standardize = j.value("standardize", c.standardize);
  c.augment = j.value("augment", c.augment);
  c.validate();
  return c;
}

// Step schedule: the base rate divided by 10 for every decay epoch already
// reached. Division by an exact power of ten keeps the canonical schedule
// values (0.1, 0.01, 0.001, 0.0001) exact.
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  int d = 0;
  for (int e : cfg.decay_epochs)
    if (epoch >= e) ++d;
  double denom = 1.0;
  for (int i = 0; i < d; ++i) denom *= 10.0;
  return cfg.lr / denom;
}

// ---------------------------------------------------------------------------
// Weight smoothness decay
//   R_h = h * sum_j sum_k || (K_{j,k} - K_{j+1,k}) / h ||_F^2
// over adjacent blocks within a unit, per kernel role.
// ---------------------------------------------------------------------------

template <typename T>
double smoothness_penalty(const std::vector<std::vector<const ConvKernel<T>*>>& roles, double h,
                          std::vector<std::vector<ConvKernel<T>>>* grads = nullptr) {
  if (h <= 0) throw std::invalid_argument("smoothness_penalty: h must be positive");
  double r = 0.0;
  if (grads) grads->clear();
  for (const auto& chain : roles) {
    if (chain.size() < 2)
      throw std::invalid_argument("smoothness_penalty: need at least 2 blocks per unit, got " +
                                  std::to_string(chain.size()));
    const auto* first = chain.front();
    for (const auto* k : chain)
      if (k->out_c != first->out_c || k->in_c != first->in_c || k->kh != first->kh ||
          k->kw != first->kw)
        throw std::invalid_argument("smoothness_penalty: kernel shapes differ within unit");
    for (std::size_t j = 0; j + 1 < chain.size(); ++j) {
      double diff2 = 0.0;
      for (std::size_t i = 0; i < chain[j]->data.size(); ++i) {
        const double d = static_cast<double>(chain[j]->data[i]) -
                         static_cast<double>(chain[j + 1]->data[i]);
        diff2 += d * d;
      }
      r += diff2 / h;
    }
    if (grads) {
      std::vector<ConvKernel<T>> g;
      for (std::size_t j = 0; j < chain.size(); ++j)
        g.emplace_back(chain[j]->out_c, chain[j]->in_c, chain[j]->kh, chain[j]->kw);
      // d/dK_j = (2/h)(2K_j - K_{j-1} - K_{j+1}) interior, one-sided at ends
      for (std::size_t j = 0; j < chain.size(); ++j)
        for (std::size_t i = 0; i < chain[j]->data.size(); ++i) {
          double acc = 0.0;
          if (j > 0)
            acc += static_cast<double>(chain[j]->data[i]) -
                   static_cast<double>(chain[j - 1]->data[i]);
          if (j + 1 < chain.size())
            acc += static_cast<double>(chain[j]->data[i]) -
                   static_cast<double>(chain[j + 1]->data[i]);
          g[j].data[i] = static_cast<T>(2.0 * acc / h);
        }
      grads->push_back(std::move(g));
    }
  }
  return r;
}

// Applies the smoothness term across every unit of the network (per kernel
// role); gradients are scaled by `coeff` and accumulated. Units with a single
// block contribute nothing. Returns the unscaled R_h total.
template <typename T>
double add_smoothness_decay(const Network<T>& net, Network<T>& grads, double coeff) {
  double total = 0.0;
  for (std::size_t u = 0; u < net.units.size(); ++u) {
    const auto& unit = net.units[u];
    if (unit.size() < 2) continue;
    const bool has_k2 = !unit.front().k2.empty();
    std::vector<std::vector<const ConvKernel<T>*>> roles(has_k2 ? 2 : 1);
    for (const auto& p : unit) {
      roles[0].push_back(&p.k1);
      if (has_k2) roles[1].push_back(&p.k2);
    }
    std::vector<std::vector<ConvKernel<T>>> g;
    total += smoothness_penalty(roles, unit.front().h, &g);
    for (std::size_t j = 0; j < unit.size(); ++j) {
      axpy_kernel(g[0][j], grads.units[u][j].k1, static_cast<T>(coeff));
      if (has_k2) axpy_kernel(g[1][j], grads.units[u][j].k2, static_cast<T>(coeff));
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> velocity;
  long step = 0;
  int epoch = 0;

  template <typename Net>
  static OptimizerState zeros_of(Net& net) {
    OptimizerState s;
    for_each_param(net, [&s](const std::string&, std::vector<T>& v) {
      s.velocity.emplace_back(v.size(), T{0});
    });
    return s;
  }
};

// v <- momentum v + (g + weight_decay p); p <- p - lr v.
// The smoothness contribution is accumulated into `grads` beforehand.
template <typename T>
void sgd_momentum_step(Network<T>& net, const Network<T>& grads, OptimizerState<T>& opt,
                       double lr, const TrainConfig& cfg) {
  std::size_t slot = 0;
  for_each_param_pair(net, const_cast<Network<T>&>(grads),
                      [&](const std::string& name, std::vector<T>& p, std::vector<T>& g) {
                        if (slot >= opt.velocity.size() ||
                            opt.velocity[slot].size() != p.size())
                          throw std::invalid_argument(
                              "sgd_momentum_step: optimizer state does not match '" + name + "'");
                        auto& v = opt.velocity[slot];
                        const T m = static_cast<T>(cfg.momentum);
                        const T wd = static_cast<T>(cfg.weight_decay);
                        const T eta = static_cast<T>(lr);
                        for (std::size_t i = 0; i < p.size(); ++i) {
                          const T total = g[i] + wd * p[i];
                          if (!std::isfinite(static_cast<double>(total)))
                            throw std::runtime_error(
                                "sgd_momentum_step: non-finite gradient in '" + name + "'");
                          v[i] = m * v[i] + total;
                          p[i] -= eta * v[i];
                        }
                        ++slot;
                      });
  ++opt.step;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
};

struct History {
  std::vector<EpochStats> rows;
  long steps = 0;
  double worst_drift = 0.0;
};

inline void write_history_csv(const History& h, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_history_csv: cannot open '" + path + "'");
  os << "epoch,lr,train_loss,train_acc,test_acc\n";
  for (const auto& r : h.rows)
    os << r.epoch << "," << r.lr << "," << r.train_loss << "," << r.train_acc << "," << r.test_acc
       << "\n";
}

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

template <typename T>
EvalResult<T> evaluate(const Network<T>& net, const Dataset& ds, int batch,
                       Standardize mode = Standardize::per_image) {
  EvalResult<T> res;
  if (ds.count == 0) return res;
  index_t correct = 0;
  double loss_sum = 0.0;
  for (index_t start = 0; start < ds.count; start += batch) {
    const index_t take = std::min<index_t>(batch, ds.count - start);
    std::vector<index_t> items(static_cast<std::size_t>(take));
    for (index_t i = 0; i < take; ++i) items[static_cast<std::size_t>(i)] = start + i;
    auto [x, labels] = make_batch<T>(ds, items, /*augment=*/false, mode, 0, 0);
    auto out = net_forward(net, x, Mode::infer);
    auto loss = softmax_cross_entropy(out.logits, labels);
    correct += loss.correct;
    loss_sum += loss.loss * static_cast<double>(take);
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(ds.count);
  res.loss = loss_sum / static_cast<double>(ds.count);
  return res;
}

// Epoch loop with seeded shuffling, reversible-mode backprop (stored mode for
// the residual baseline), SGD with momentum, weight decay and smoothness
// decay, and periodic evaluation. Aborts with the last checkpoint saved if
// the loss turns non-finite.
template <typename T>
History run_training(Network<T>& net, const Dataset& train, const Dataset& test,
                     const TrainConfig& cfg, const std::string& out_dir = {}) {
  cfg.validate();
  const Standardize mode = parse_standardize(cfg.standardize);
  const Mode fwd_mode =
      is_reversible(net.arch.kind) ? Mode::train_reversible : Mode::train_stored;
  OptimizerState<T> opt = OptimizerState<T>::zeros_of(net);
  History history;

  std::vector<index_t> order(static_cast<std::size_t>(train.count));
  for (index_t i = 0; i < train.count; ++i) order[static_cast<std::size_t>(i)] = i;

  bool stop = false;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    Rng shuffle_rng = Rng::stream(cfg.seed, 0x5e5eULL + static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    index_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      if (cfg.max_steps > 0 && opt.step >= cfg.max_steps) {
        stop = true;
        break;
      }
      const std::size_t take =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), order.size() - start);
      std::vector<index_t> items(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(start + take));
      auto [x, labels] = make_batch<T>(train, items, cfg.augment, mode, cfg.seed, epoch);

      const bool check_drift =
          cfg.drift_check_every > 0 && opt.step % cfg.drift_check_every == 0 &&
          fwd_mode == Mode::train_reversible;
      auto fwd = net_forward(net, x, fwd_mode, check_drift);
      auto loss = softmax_cross_entropy(fwd.logits, labels);
      if (!std::isfinite(loss.loss)) {
        if (!out_dir.empty())
          save_model(net, (std::filesystem::path(out_dir) / "last_checkpoint.revode").string());
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(opt.step) + " (loss is not finite)" +
                               (out_dir.empty() ? "" : "; last checkpoint saved"));
      }
      loss_sum += loss.loss * static_cast<double>(take);
      correct += loss.correct;
      seen += static_cast<index_t>(take);

      Network<T> grads;
      if (fwd_mode == Mode::train_reversible) {
        auto back = net_backward_reversible(net, fwd.cp, loss.grad);
        if (check_drift && std::isfinite(back.reconstruction_error))
          history.worst_drift = std::max(history.worst_drift, back.reconstruction_error);
        grads = std::move(back.grads);
      } else {
        grads = net_backward_stored(net, fwd.trace, loss.grad);
      }
      if (cfg.smooth_decay > 0) add_smoothness_decay(net, grads, cfg.smooth_decay);
      sgd_momentum_step(net, grads, opt, lr, cfg);
    }

    EpochStats row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
    row.train_acc = seen > 0 ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    const bool eval_now = (epoch % std::max(1, cfg.eval_every) == 0) || epoch + 1 == cfg.epochs ||
                          stop;
    row.test_acc = eval_now && test.count > 0 ? evaluate(net, test, cfg.batch, mode).accuracy
                                              : (history.rows.empty() ? 0.0 : history.rows.back().test_acc);
    history.rows.push_back(row);
    opt.epoch = epoch;
  }
  history.steps = opt.step;

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    save_model(net, (std::filesystem::path(out_dir) / "model.revode").string());
    write_history_csv(history, (std::filesystem::path(out_dir) / "history.csv").string());
  }
  return history;
}

}  // namespace revode
