#pragma once

// Finite-difference oracle suite: every analytic gradient in the library is
// compared against central differences of the corresponding loss on random
// instances.

#include <cstdint>
#include <string>
#include <vector>

namespace skipalign {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::size_t cases = 0;
  double worst = 0.0;      // largest observed error
  double tolerance = 0.0;
  double seconds = 0.0;
  std::string detail;
};

/// usna_grad against central differences of usna_loss; relative error.
CheckResult check_usna_grad(std::size_t cases, std::uint64_t seed, double tol = 1e-6);
/// |ẑ·∇| ≤ radial_tol·‖∇‖ and loss(c·z) = loss(z) to scale_tol, both gate values.
CheckResult check_angular_purity(std::size_t cases, std::uint64_t seed, double radial_tol = 1e-12,
                                 double scale_tol = 1e-10);
/// CE feature gradient under a linear head equals Σ_j (α_j − δ_jk) w_j.
CheckResult check_ce_linear_identity(std::size_t cases, std::uint64_t seed, double tol = 1e-10);
/// IA and PA gradients against central differences.
CheckResult check_alignment_grads(std::size_t cases, std::uint64_t seed, double tol = 1e-6);
/// Classifier and detector losses against central differences in the logits.
CheckResult check_head_grads(std::size_t cases, std::uint64_t seed, double tol = 1e-6);
/// The whole training objective through backward() on nets with at most
/// 500 parameters, thresholds placed in gaps of the unperturbed scores.
CheckResult check_model_grad(std::size_t cases, std::uint64_t seed, double tol = 1e-5);

std::vector<CheckResult> run_oracle_suite(std::uint64_t seed = 0);

std::string format_result(const CheckResult& r);

}  // namespace skipalign
