#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "privlab/metrics.hpp"
#include "privlab/model.hpp"
#include "privlab/pruning.hpp"
#include "privlab/tensor.hpp"

namespace privlab {

enum class AttackKind { GI, SGI };

/// Inner-loop update rule on the dummy batch.
enum class AttackOptimizer {
  Gd,     ///< plain gradient descent, sign-gradient steps once a window stalls
  Sign,   ///< sign-gradient steps throughout
  Adam,
};
AttackOptimizer parse_attack_optimizer(std::string_view tag);
AttackKind parse_attack_kind(std::string_view tag);
std::string_view attack_name(AttackKind kind);

struct AttackPlan {
  AttackKind kind = AttackKind::SGI;
  std::size_t iterations = 2000;  ///< S
  double step = 0.01;             ///< η
  AttackOptimizer optimizer = AttackOptimizer::Adam;
  double tv_weight = 1e-4;        ///< τ_reg, anisotropic total variation on the dummy images
  std::uint64_t seed = 0;
  std::size_t plateau = 500;      ///< window for the stall test
  double plateau_tolerance = 1e-3;  ///< best loss must drop this much per window, else sign-gradient steps
  std::size_t trace_every = 100;
  std::size_t image_side = 0;     ///< 0: square root of the input width when it is a perfect square
  bool restore_label = true;       ///< analytic label recovery when the batch has one sample
  bool model_at_reference = true; ///< dummy gradients at update_prev (false: at update_t)

  void validate() const;
};

struct AttackResult {
  Tensor batch;                  ///< reconstructed inputs, same shape as the true batch
  std::vector<int> labels;       ///< argmax of the relaxed labels
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> trace;     ///< loss at iterations 0, trace_every, ...
  Mask recovered;                ///< SGI only
  bool label_restored = false;
  bool degenerate = false;       ///< target gradient was zero; batch is the untouched initialization
  std::size_t sign_steps = 0;    ///< iterations taken in sign-gradient mode
};

/// Bit j is 1 iff update[j] != 0.
Mask recover_mask(const ParamVector& update);

/// SGI: (update_t - update_prev) * recover_mask(update_t); GI: the raw difference.
ParamVector attack_grad(const ParamVector& update_t, const ParamVector& update_prev, AttackKind kind);

/// Class whose final-layer bias gradient entry is the unique negative one.
std::optional<int> label_restore(const ParamVector& target_grad, const ModelSpec& spec);

/// Cosine-mismatch gradient inversion of the update `update_t`. The server's reference
/// point update_prev is the model the client started from, so the client's gradient direction
/// is update_prev - update_t.
AttackResult invert(const ModelSpec& spec, const ParamVector& update_t, const ParamVector& update_prev,
                    std::size_t rows, const AttackPlan& plan);

enum class Binning { Clamp, MinMax };
Binning parse_binning(std::string_view tag);

struct ScoreOptions {
  std::size_t levels = kDefaultNmiLevels;
  Binning binning = Binning::MinMax;
};

struct ReconstructionScore {
  double nmi = 0.0;                  ///< mean over true samples
  double psnr = 0.0;                 ///< mean over matched pairs, on clamped pixels
  std::vector<std::size_t> match;    ///< match[i] = reconstruction row paired with true row i
};

/// Greedy one-to-one matching of true and reconstructed rows by NMI, then mean scores.
ReconstructionScore score_reconstruction(const Tensor& truth, const Tensor& recon,
                                         const ScoreOptions& opt = {});

}  // namespace privlab
