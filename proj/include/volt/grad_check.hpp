#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "volt/config.hpp"
#include "volt/params.hpp"
#include "volt/trainer.hpp"

namespace volt {

// Returns the loss. When the argument is true the closure must leave
// d loss / d param in the (pre-zeroed) gradient buffers.
using LossClosure = std::function<double(bool)>;

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

struct GradCheckReport {
  double max_error = 0.0;
  std::vector<GradCheckEntry> entries;

  // Max error per module (see module_of).
  std::map<std::string, double> by_module() const;
};

// tokenizer, encoder, decoder, heads or the first name component.
std::string module_of(std::string_view param_name);

// Central differences on at least `coordinates` entries, at least two from
// every parameter (fewer only if it has fewer entries). Error per entry is
// |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check(ParamStore<double>& store, const LossClosure& loss, std::size_t coordinates = 256,
                           double eps = 1e-4, std::uint64_t seed = 0);

// End to end on the configured model in 64-bit: tokenizer, encoder with
// training-mode DropPath (fixed mask), decoder, both heads and the
// distillation objective with a fixed pseudo-teacher labeling.
GradCheckReport model_grad_check(const RunConfig& cfg, std::span<const LabeledScene> scenes,
                                 std::size_t coordinates = 256, std::uint64_t seed = 0);

} // namespace volt
