#pragma once

#include <string>

#include "medprompt/trainer.hpp"

// Plain-text run configuration: "key=value" lines, '#' comments, dotted keys
// for the model and phantom sections. Unknown keys are rejected so typos
// cannot silently fall back to defaults. effective_config_text() emits every
// key in canonical order with round-trippable number formatting; feeding it
// back through apply_config_text() reproduces the same configuration.

namespace medprompt {

struct RunConfig {
  TrainConfig train;
  std::string precision = "f32";  // "f32" or "f64"
};

/// Applies one key=value assignment; throws TensorError on unknown keys or
/// unparseable values.
void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value);

/// Parses a whole config file body (key=value lines, '#' comments).
void apply_config_text(RunConfig& cfg, const std::string& text);

/// Splits a "key=value" override argument and applies it.
void apply_config_override(RunConfig& cfg, const std::string& assignment);

/// Canonical serialization of every configurable key.
std::string effective_config_text(const RunConfig& cfg);

}  // namespace medprompt
