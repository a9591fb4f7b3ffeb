#include "privlab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "privlab/error.hpp"
#include "privlab/random.hpp"

namespace privlab {

namespace {

Tensor row_of(const std::vector<double>& v) { return Tensor({1, v.size()}, v); }

std::size_t image_side(const AttackPlan& plan, std::size_t width) {
  if (plan.image_side > 0) {
    if (plan.image_side * plan.image_side != width) {
      throw ConfigError("image_side " + std::to_string(plan.image_side) + " does not match input width " +
                        std::to_string(width));
    }
    return plan.image_side;
  }
  const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(width))));
  return s * s == width ? s : 0;
}

// Difference operators so that TV(X) = sum |X Dh| + sum |X Dv| for row-major images in X's rows.
// A non-square width is treated as a single image row.
std::vector<Tensor> tv_operators(std::size_t width, std::size_t side) {
  std::vector<Tensor> ops;
  const std::size_t rows = side ? side : 1, cols = side ? side : width;
  if (cols > 1) {
    Tensor dh = Tensor::matrix(width, rows * (cols - 1));
    std::size_t k = 0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c + 1 < cols; ++c, ++k) {
        dh.at(r * cols + c + 1, k) = 1.0;
        dh.at(r * cols + c, k) = -1.0;
      }
    ops.push_back(std::move(dh));
  }
  if (rows > 1) {
    Tensor dv = Tensor::matrix(width, (rows - 1) * cols);
    std::size_t k = 0;
    for (std::size_t r = 0; r + 1 < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c, ++k) {
        dv.at((r + 1) * cols + c, k) = 1.0;
        dv.at(r * cols + c, k) = -1.0;
      }
    ops.push_back(std::move(dv));
  }
  return ops;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::vector<int> argmax_rows(const Tensor& t) {
  std::vector<int> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < t.cols(); ++c)
      if (t.at(r, c) > t.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

Tensor rescale_rows(const Tensor& t, Binning binning) {
  if (binning == Binning::Clamp) return t;
  Tensor out = t;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t c = 0; c < t.cols(); ++c) {
      lo = std::min(lo, t.at(r, c));
      hi = std::max(hi, t.at(r, c));
    }
    for (std::size_t c = 0; c < t.cols(); ++c) {
      out.at(r, c) = hi > lo ? (t.at(r, c) - lo) / (hi - lo) : 0.0;
    }
  }
  return out;
}

}  // namespace

AttackKind parse_attack_kind(std::string_view tag) {
  if (tag == "gi") return AttackKind::GI;
  if (tag == "sgi") return AttackKind::SGI;
  throw ConfigError("unknown attack '" + std::string(tag) + "' (expected gi, sgi)");
}

std::string_view attack_name(AttackKind kind) { return kind == AttackKind::GI ? "gi" : "sgi"; }

AttackOptimizer parse_attack_optimizer(std::string_view tag) {
  if (tag == "gd") return AttackOptimizer::Gd;
  if (tag == "sign") return AttackOptimizer::Sign;
  if (tag == "adam") return AttackOptimizer::Adam;
  throw ConfigError("unknown attack optimizer '" + std::string(tag) + "' (expected gd, sign, adam)");
}

Binning parse_binning(std::string_view tag) {
  if (tag == "clamp") return Binning::Clamp;
  if (tag == "minmax") return Binning::MinMax;
  throw ConfigError("unknown binning '" + std::string(tag) + "' (expected clamp, minmax)");
}

void AttackPlan::validate() const {
  if (iterations < 1) throw ConfigError("attack iterations must be >= 1");
  if (!(step > 0.0)) throw ConfigError("attack step must be > 0");
  if (!(tv_weight >= 0.0)) throw ConfigError("tv_weight must be >= 0");
  if (trace_every < 1) throw ConfigError("trace_every must be >= 1");
  if (plateau < 1) throw ConfigError("plateau must be >= 1");
}

Mask recover_mask(const ParamVector& update) {
  Mask m{std::vector<std::uint8_t>(update.size()), 0.0};
  for (std::size_t j = 0; j < update.size(); ++j) m.bits[j] = update[j] != 0.0 ? 1 : 0;
  m.refresh_rate();
  return m;
}

ParamVector attack_grad(const ParamVector& update_t, const ParamVector& update_prev, AttackKind kind) {
  require_same_length(update_t, update_prev, "attack_grad");
  std::vector<double> diff(update_t.size());
  for (std::size_t j = 0; j < diff.size(); ++j) {
    diff[j] = update_t[j] - update_prev[j];
    if (kind == AttackKind::SGI && update_t[j] == 0.0) diff[j] = 0.0;
  }
  return update_t.with_values(std::move(diff));
}

std::optional<int> label_restore(const ParamVector& target_grad, const ModelSpec& spec) {
  if (target_grad.size() != spec.param_count()) throw ValidationError("label_restore: length mismatch");
  const auto last = spec.layers().back();
  std::optional<int> found;
  for (std::size_t k = 0; k < last.out; ++k) {
    if (target_grad[last.bias_offset + k] < 0.0) {
      if (found) return std::nullopt;
      found = static_cast<int>(k);
    }
  }
  return found;
}

AttackResult invert(const ModelSpec& spec, const ParamVector& update_t, const ParamVector& update_prev,
                    std::size_t rows, const AttackPlan& plan) {
  plan.validate();
  spec.validate();
  if (update_t.size() != spec.param_count()) throw ValidationError("invert: update does not match the model");
  require_same_length(update_t, update_prev, "invert reference");
  if (rows < 1) throw ValidationError("invert: batch must have at least one row");

  const std::size_t width = spec.input_dim, classes = spec.classes;
  AttackResult res;
  Rng rng(derive_seed(plan.seed, {0xa7}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> randint(0, static_cast<int>(classes) - 1);
  Tensor x = Tensor::matrix(rows, width);
  for (double& v : x.values()) v = normal(rng);
  Tensor label_logits = Tensor::matrix(rows, classes);
  for (std::size_t r = 0; r < rows; ++r) label_logits.at(r, static_cast<std::size_t>(randint(rng))) = 1.0;

  // The client moved against its gradient, so the gradient direction is prev - t.
  ParamVector target = attack_grad(update_t, update_prev, plan.kind);
  for (double& v : target.values()) v = -v;
  if (plan.kind == AttackKind::SGI) res.recovered = recover_mask(update_t);

  bool any = false;
  for (double v : target.values()) any = any || v != 0.0;
  if (!any) {
    res.degenerate = true;
    res.batch = x;
    res.labels = argmax_rows(label_logits);
    res.initial_loss = res.final_loss = std::numeric_limits<double>::quiet_NaN();
    return res;
  }

  std::vector<int> fixed_labels;
  if (rows == 1 && plan.restore_label) {
    if (auto y = label_restore(target, spec)) {
      fixed_labels = {*y};
      res.label_restored = true;
    }
  }

  const auto tv_ops = tv_operators(width, image_side(plan, width));
  std::vector<ad::Var> tv_consts;
  for (const auto& op : tv_ops) tv_consts.push_back(ad::constant(op));
  const ad::Var target_row = graph::params_row(target, false);
  ad::Var mask_row;
  if (plan.kind == AttackKind::SGI) {
    std::vector<double> keep(res.recovered.size());
    for (std::size_t j = 0; j < keep.size(); ++j) keep[j] = res.recovered.bits[j];
    mask_row = ad::constant(row_of(keep));
  }

  const ParamVector model = plan.model_at_reference ? update_prev : update_t;
  struct Eval {
    double loss;
    Tensor gx, gl;
  };
  auto evaluate = [&](const Tensor& xs, const Tensor& ls) {
    ad::Var w = graph::params_row(model, true);
    ad::Var xv = ad::variable(xs);
    ad::Var lv = ad::variable(ls);
    ad::Var targets = fixed_labels.empty() ? ad::softmax(lv) : graph::one_hot(fixed_labels, classes);
    ad::Var ce = ad::softmax_cross_entropy(graph::logits(spec, w, xv), targets);
    ad::Var g = ad::grad(ce, w);
    if (mask_row.defined()) g = g * mask_row;
    ad::Var loss = graph::cosine_mismatch(target_row, g);
    if (plan.tv_weight > 0.0) {
      for (const auto& op : tv_consts) loss = loss + ad::scale(ad::sum(ad::abs(ad::matmul(xv, op))), plan.tv_weight);
    }
    const ad::Var wrt[] = {xv, lv};
    auto grads = ad::grad(loss, wrt);
    return Eval{loss.scalar(), grads[0].value(), grads[1].value()};
  };

  double best = std::numeric_limits<double>::infinity();
  Tensor best_x = x, best_l = label_logits;
  double checkpoint_best = std::numeric_limits<double>::infinity();
  bool sign_mode = plan.optimizer == AttackOptimizer::Sign;
  // Adam moments for the batch and the label logits.
  std::vector<double> mx(x.size()), vx(x.size()), ml(label_logits.size()), vl(label_logits.size());
  auto adam = [&](Tensor& param, const Tensor& g, std::vector<double>& m, std::vector<double>& v,
                  std::size_t t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t)), c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      param[i] -= plan.step * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  };
  for (std::size_t s = 0; s <= plan.iterations; ++s) {
    Eval e = evaluate(x, label_logits);
    if (s == 0) res.initial_loss = e.loss;
    if (s < plan.iterations && s % plan.trace_every == 0) res.trace.push_back(e.loss);
    if (e.loss < best - 1e-9) {
      best = e.loss;
      best_x = x;
      best_l = label_logits;
    }
    if (s == plan.iterations) break;
    if (s % plan.plateau == 0) {
      // Less than plateau_tolerance progress over a whole window: plain steps have stalled.
      if (s > 0 && plan.optimizer == AttackOptimizer::Gd && !sign_mode && checkpoint_best - best < plan.plateau_tolerance) sign_mode = true;
      checkpoint_best = best;
    }
    const bool learn_labels = fixed_labels.empty();
    if (plan.optimizer == AttackOptimizer::Adam) {
      adam(x, e.gx, mx, vx, s + 1);
      if (learn_labels) adam(label_logits, e.gl, ml, vl, s + 1);
    } else if (sign_mode) {
      ++res.sign_steps;
      for (std::size_t i = 0; i < x.size(); ++i) x[i] -= plan.step * sign(e.gx[i]);
      if (learn_labels)
        for (std::size_t i = 0; i < label_logits.size(); ++i) label_logits[i] -= plan.step * sign(e.gl[i]);
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] -= plan.step * e.gx[i];
      if (learn_labels)
        for (std::size_t i = 0; i < label_logits.size(); ++i) label_logits[i] -= plan.step * e.gl[i];
    }
  }
  res.batch = best_x;
  res.final_loss = best;
  res.labels = fixed_labels.empty() ? argmax_rows(best_l) : fixed_labels;
  return res;
}

ReconstructionScore score_reconstruction(const Tensor& truth, const Tensor& recon, const ScoreOptions& opt) {
  if (truth.rows() != recon.rows() || truth.cols() != recon.cols()) {
    throw ValidationError("score_reconstruction: shape mismatch");
  }
  const std::size_t n = truth.rows();
  const Tensor t = rescale_rows(truth, opt.binning), r = rescale_rows(recon, opt.binning);
  std::vector<DiscreteClustering> ct, cr;
  for (std::size_t i = 0; i < n; ++i) {
    ct.push_back(discretize(t.slice_rows(i, 1), opt.levels));
    cr.push_back(discretize(r.slice_rows(i, 1), opt.levels));
  }
  std::vector<double> table(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) table[i * n + j] = nmi(ct[i], cr[j]);

  ReconstructionScore score;
  score.match.assign(n, n);
  std::vector<bool> used_t(n, false), used_r(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t bi = n, bj = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (used_t[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (used_r[j]) continue;
        if (bi == n || table[i * n + j] > table[bi * n + bj]) bi = i, bj = j;
      }
    }
    used_t[bi] = used_r[bj] = true;
    score.match[bi] = bj;
    score.nmi += table[bi * n + bj];
  }
  score.nmi /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor a = truth.slice_rows(i, 1), b = r.slice_rows(score.match[i], 1);
    for (double& v : b.values()) v = std::clamp(v, 0.0, 1.0);
    score.psnr += psnr(a, b);
  }
  score.psnr /= static_cast<double>(n);
  return score;
}

}  // namespace privlab
