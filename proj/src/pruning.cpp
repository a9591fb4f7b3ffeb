#include "privlab/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

#include "privlab/binary_io.hpp"
#include "privlab/error.hpp"
#include "privlab/random.hpp"

namespace privlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_mask_length(const Mask& mask, std::size_t d, std::string_view what) {
  if (mask.size() != d) {
    throw ValidationError(std::string(what) + ": mask has " + std::to_string(mask.size()) +
                          " entries, expected " + std::to_string(d));
  }
}

void keep_classifier_bias(const ModelSpec& spec, std::vector<double>& scores) {
  const auto last = spec.layers().back();
  for (std::size_t j = 0; j < last.out; ++j) scores[last.bias_offset + j] = kInf;
}

ParamVector probe_gradient(const ModelSpec& spec, const ParamVector& params, const Tensor& batch,
                           const std::vector<int>& labels) {
  return loss_and_grad(spec, params, batch, labels).grad;
}

// Sum of logits of the absolute-valued network on an all-ones input; score = |w| * dR/d|w|.
std::vector<double> synflow_scores(const ModelSpec& spec, const std::vector<double>& abs_params) {
  ParamVector p(spec.layout(), abs_params);
  auto row = graph::params_row(p, true);
  auto ones = ad::constant(Tensor::matrix(1, spec.input_dim, 1.0));
  auto r = ad::sum(graph::logits(spec, row, ones));
  auto g = ad::grad(r, row);
  std::vector<double> s(abs_params.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = abs_params[i] * g.value()[i];
  return s;
}

}  // namespace

std::size_t Mask::zero_count() const noexcept {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{0}));
}

void Mask::refresh_rate() {
  rate = bits.empty() ? 0.0 : static_cast<double>(zero_count()) / static_cast<double>(bits.size());
}

PolicyKind parse_policy_kind(std::string_view tag) {
  if (tag == "random") return PolicyKind::Random;
  if (tag == "magnitude") return PolicyKind::Magnitude;
  if (tag == "snip") return PolicyKind::Snip;
  if (tag == "synflow") return PolicyKind::SynFlow;
  if (tag == "grasp") return PolicyKind::GraSP;
  if (tag == "feddst") return PolicyKind::FedDstLike;
  if (tag == "prunefl") return PolicyKind::PruneFlLike;
  throw ConfigError("unknown pruning policy '" + std::string(tag) +
                    "' (expected random, magnitude, snip, synflow, grasp, feddst, prunefl)");
}

std::string_view policy_name(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::Random: return "random";
    case PolicyKind::Magnitude: return "magnitude";
    case PolicyKind::Snip: return "snip";
    case PolicyKind::SynFlow: return "synflow";
    case PolicyKind::GraSP: return "grasp";
    case PolicyKind::FedDstLike: return "feddst";
    case PolicyKind::PruneFlLike: return "prunefl";
  }
  return "?";
}

bool needs_probe(PolicyKind kind) {
  return kind == PolicyKind::Snip || kind == PolicyKind::GraSP ||
         kind == PolicyKind::FedDstLike || kind == PolicyKind::PruneFlLike;
}

bool is_one_shot(PolicyKind kind) {
  return kind == PolicyKind::Snip || kind == PolicyKind::SynFlow || kind == PolicyKind::GraSP;
}

void PruningPolicy::validate() const {
  if (synflow_rounds < 1) throw ConfigError("synflow_rounds must be >= 1");
  if (!(target_rate >= 0.0 && target_rate < 1.0)) throw ConfigError("target_rate must be in [0, 1)");
  if (reconfigure_every < 1) throw ConfigError("reconfigure_every must be >= 1");
  if (!(regrow_fraction >= 0.0 && regrow_fraction < 1.0)) {
    throw ConfigError("regrow_fraction must be in [0, 1)");
  }
  if (!(importance_decay >= 0.0 && importance_decay < 1.0)) {
    throw ConfigError("importance_decay must be in [0, 1)");
  }
}

void ImportanceTracker::update(const ParamVector& grad) {
  if (importance.empty()) importance.assign(grad.size(), 0.0);
  if (importance.size() != grad.size()) throw ValidationError("importance length mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    importance[i] = decay * importance[i] + (1.0 - decay) * grad[i] * grad[i];
  }
}

ParamVector score(const PruningPolicy& policy, const ModelSpec& spec, const ParamVector& params,
                  const Tensor& probe_batch, const std::vector<int>& probe_labels,
                  const std::vector<double>* importance) {
  policy.validate();
  const std::size_t d = params.size();
  if (d != spec.param_count()) throw ValidationError("params do not match the model");
  if (needs_probe(policy.kind) && (probe_batch.size() == 0 || probe_labels.empty())) {
    throw ConfigError(std::string(policy_name(policy.kind)) + " scoring needs a probe batch");
  }
  std::vector<double> s(d);
  switch (policy.kind) {
    case PolicyKind::Random: {
      Rng rng(derive_seed(policy.seed, {0x5c0e}));
      for (auto& v : s) v = uniform_open(rng);
      break;
    }
    case PolicyKind::Magnitude:
      for (std::size_t i = 0; i < d; ++i) s[i] = std::abs(params[i]);
      break;
    case PolicyKind::Snip: {
      const auto g = probe_gradient(spec, params, probe_batch, probe_labels);
      for (std::size_t i = 0; i < d; ++i) s[i] = std::abs(g[i] * params[i]);
      break;
    }
    case PolicyKind::GraSP: {
      const auto g = probe_gradient(spec, params, probe_batch, probe_labels);
      const auto hg = hessian_vector_product(spec, params, probe_batch, probe_labels, g);
      for (std::size_t i = 0; i < d; ++i) s[i] = -params[i] * hg[i];
      break;
    }
    case PolicyKind::FedDstLike: {
      // Kept weights rank by magnitude; pruned (zero) weights rank by gradient, which is
      // what the regrow step reads.
      const auto g = probe_gradient(spec, params, probe_batch, probe_labels);
      for (std::size_t i = 0; i < d; ++i) s[i] = std::abs(params[i]) + std::abs(g[i]);
      break;
    }
    case PolicyKind::PruneFlLike: {
      std::vector<double> imp;
      if (importance && !importance->empty()) {
        if (importance->size() != d) throw ValidationError("importance length mismatch");
        imp = *importance;
      } else {
        const auto g = probe_gradient(spec, params, probe_batch, probe_labels);
        imp.resize(d);
        for (std::size_t i = 0; i < d; ++i) imp[i] = g[i] * g[i];
      }
      for (std::size_t i = 0; i < d; ++i) s[i] = std::abs(params[i]) + imp[i];
      break;
    }
    case PolicyKind::SynFlow: {
      std::vector<double> abs_params(d);
      for (std::size_t i = 0; i < d; ++i) abs_params[i] = std::abs(params[i]);
      std::vector<std::uint8_t> alive(d, 1);
      const double keep_final = 1.0 - policy.target_rate;
      for (std::size_t k = 1; k <= policy.synflow_rounds; ++k) {
        std::vector<double> masked(d);
        for (std::size_t i = 0; i < d; ++i) masked[i] = alive[i] ? abs_params[i] : 0.0;
        s = synflow_scores(spec, masked);
        for (std::size_t i = 0; i < d; ++i)
          if (!alive[i]) s[i] = -kInf;
        keep_classifier_bias(spec, s);
        if (k == policy.synflow_rounds) break;
        const double rate_k = 1.0 - std::pow(keep_final, static_cast<double>(k) /
                                                             static_cast<double>(policy.synflow_rounds));
        alive = make_mask(s, rate_k).bits;
      }
      break;
    }
  }
  keep_classifier_bias(spec, s);
  return ParamVector(params.layout(), std::move(s));
}

Mask make_mask(const std::vector<double>& scores, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("pruning rate must be in [0, 1)");
  const std::size_t d = scores.size();
  const auto zeros = static_cast<std::size_t>(std::llround(rate * static_cast<double>(d)));
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  // NaN scores sort first (pruned first).
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double x = scores[a], y = scores[b];
    if (std::isnan(x) || std::isnan(y)) return std::isnan(x) && !std::isnan(y);
    return x < y;
  });
  Mask m{std::vector<std::uint8_t>(d, 1), 0.0};
  for (std::size_t i = 0; i < zeros; ++i) m.bits[order[i]] = 0;
  m.refresh_rate();
  return m;
}

Mask make_mask(const ParamVector& scores, double rate) { return make_mask(scores.values(), rate); }

Mask compute_mask(PruningPolicy policy, const ModelSpec& spec, const ParamVector& params,
                  const Tensor& probe_batch, const std::vector<int>& probe_labels, double rate,
                  const std::vector<double>* importance) {
  if (policy.kind == PolicyKind::SynFlow) policy.target_rate = rate;
  return make_mask(score(policy, spec, params, probe_batch, probe_labels, importance), rate);
}

ParamVector apply(const ParamVector& params, const Mask& mask) {
  require_mask_length(mask, params.size(), "apply");
  std::vector<double> out(params.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.bits[i] ? params[i] : 0.0;
  return params.with_values(std::move(out));
}

Mask intersect(const Mask& a, const Mask& b) {
  require_mask_length(b, a.size(), "intersect");
  Mask m{std::vector<std::uint8_t>(a.size()), 0.0};
  for (std::size_t i = 0; i < a.size(); ++i) m.bits[i] = a.bits[i] & b.bits[i];
  m.refresh_rate();
  return m;
}

Mask regrow(const Mask& mask, const std::vector<double>& scores, double fraction) {
  require_mask_length(mask, scores.size(), "regrow");
  const std::size_t d = mask.size();
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("regrow fraction must be in [0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(d)));
  const std::size_t zeros = mask.zero_count();
  if (count > zeros || count > d - zeros) {
    throw ValidationError("regrow of " + std::to_string(count) + " entries is infeasible with " +
                          std::to_string(zeros) + " pruned of " + std::to_string(d));
  }
  std::vector<std::size_t> kept, pruned;
  for (std::size_t i = 0; i < d; ++i) (mask.bits[i] ? kept : pruned).push_back(i);
  std::stable_sort(kept.begin(), kept.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::stable_sort(pruned.begin(), pruned.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  Mask out = mask;
  for (std::size_t i = 0; i < count; ++i) {
    out.bits[kept[i]] = 0;
    out.bits[pruned[i]] = 1;
  }
  out.refresh_rate();
  return out;
}

void write_mask(std::ostream& out, const Mask& mask) {
  out.write("PFLM", 4);
  io::write_le<std::uint64_t>(out, mask.size());
  io::write_le<double>(out, mask.rate);
  const std::uint8_t first = mask.bits.empty() ? 1 : mask.bits[0];
  io::write_le<std::uint8_t>(out, first);
  std::vector<std::uint64_t> runs;
  for (std::size_t i = 0; i < mask.size();) {
    std::size_t j = i;
    while (j < mask.size() && mask.bits[j] == mask.bits[i]) ++j;
    runs.push_back(j - i);
    i = j;
  }
  io::write_le<std::uint64_t>(out, runs.size());
  for (auto r : runs) io::write_le<std::uint64_t>(out, r);
}

Mask read_mask(std::istream& in) {
  io::Reader r(in);
  r.expect_magic("PFLM");
  const auto d = r.le<std::uint64_t>("mask length");
  Mask m;
  m.rate = r.le<double>("mask rate");
  const std::size_t first_at = r.offset();
  const auto first = r.le<std::uint8_t>("first bit");
  if (first > 1) throw FormatError("first bit must be 0 or 1", first_at);
  const auto count = r.le<std::uint64_t>("run count");
  if (count > d) throw FormatError("more runs than mask entries", r.offset());
  std::uint8_t bit = first;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const auto len = r.le<std::uint64_t>("run length");
    if (len == 0 || len > d - m.bits.size()) throw FormatError("bad run length", at);
    m.bits.insert(m.bits.end(), len, bit);
    bit ^= 1;
  }
  if (m.bits.size() != d) throw FormatError("runs do not cover the mask length", r.offset());
  return m;
}

void write_mask_csv(std::ostream& out, const Mask& mask) {
  out << "index,bit\n";
  for (std::size_t i = 0; i < mask.size(); ++i) out << i << ',' << int{mask.bits[i]} << '\n';
}

}  // namespace privlab
