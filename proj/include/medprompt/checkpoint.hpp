#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "medprompt/adam.hpp"
#include "medprompt/model.hpp"
#include "medprompt/tensor_io.hpp"

// Checkpoint files: model configuration echo, named parameter table, optional
// optimizer state, step counter, and the training rng state.
//
// Layout (little-endian):
//   magic "MPCK" | version u32 | dtype u8
//   | ModelConfig fields | AblationFlags | init_seed u64 | step u64
//   | rng state string | param count u32
//   | per param: name string, rank u32, dims u32[rank], payload
//   | has_optimizer u8 | if set: adam step u64, per param: m payload, v payload
// Optimizer slots reuse the parameter shapes, so only payloads are stored.

namespace medprompt {

inline constexpr uint32_t kCheckpointFormatVersion = 1;

/// In-memory image of a checkpoint file. Kept independent of Model so tests
/// and tools can inspect or synthesize files without building a network.
template <typename Scalar>
struct CheckpointContents {
  ModelConfig config;
  AblationFlags ablation;
  uint64_t init_seed = 0;
  uint64_t step = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor<Scalar>>> params;
  bool has_optimizer = false;
  uint64_t adam_step = 0;
  std::vector<Tensor<Scalar>> adam_m, adam_v;
};

/// Fixed-position fields readable without touching the parameter table; lets
/// a loader construct the right Model before deserializing weights.
struct CheckpointHeader {
  uint8_t dtype = 0;
  ModelConfig config;
  AblationFlags ablation;
  uint64_t init_seed = 0;
  uint64_t step = 0;
  std::string rng_state;
};

namespace detail {

inline void write_config(std::ostream& os, const ModelConfig& c, const AblationFlags& a) {
  auto u32 = [&os](Index v) {
    check(v >= 0 && v <= Index(UINT32_MAX), "checkpoint: config field out of range: ", v);
    write_pod<uint32_t>(os, static_cast<uint32_t>(v));
  };
  u32(c.in_channels);
  u32(c.out_channels);
  u32(c.base_channels);
  for (Index b : c.num_blocks) u32(b);
  for (Index h : c.num_heads) u32(h);
  write_pod<double>(os, c.gdfn_expansion);
  u32(c.num_prompts);
  u32(c.prompt_base_size);
  u32(c.spb_sites);
  write_pod<uint8_t>(os, a.use_peb ? 1 : 0);
  write_pod<uint8_t>(os, a.use_pfb ? 1 : 0);
  write_pod<uint8_t>(os, a.use_transformer ? 1 : 0);
}

inline void read_config(std::istream& is, ModelConfig& c, AblationFlags& a) {
  auto u32 = [&is](const char* what) {
    return static_cast<Index>(read_pod<uint32_t>(is, what));
  };
  c.in_channels = u32("in_channels");
  c.out_channels = u32("out_channels");
  c.base_channels = u32("base_channels");
  for (Index& b : c.num_blocks) b = u32("num_blocks");
  for (Index& h : c.num_heads) h = u32("num_heads");
  c.gdfn_expansion = read_pod<double>(is, "gdfn_expansion");
  c.num_prompts = u32("num_prompts");
  c.prompt_base_size = u32("prompt_base_size");
  c.spb_sites = u32("spb_sites");
  a.use_peb = read_pod<uint8_t>(is, "use_peb") != 0;
  a.use_pfb = read_pod<uint8_t>(is, "use_pfb") != 0;
  a.use_transformer = read_pod<uint8_t>(is, "use_transformer") != 0;
}

inline bool config_equal(const ModelConfig& a, const ModelConfig& b) {
  return a.in_channels == b.in_channels && a.out_channels == b.out_channels &&
         a.base_channels == b.base_channels && a.num_blocks == b.num_blocks &&
         a.num_heads == b.num_heads && a.gdfn_expansion == b.gdfn_expansion &&
         a.num_prompts == b.num_prompts && a.prompt_base_size == b.prompt_base_size &&
         a.spb_sites == b.spb_sites;
}

inline bool ablation_equal(const AblationFlags& a, const AblationFlags& b) {
  return a.use_peb == b.use_peb && a.use_pfb == b.use_pfb &&
         a.use_transformer == b.use_transformer;
}

template <typename Scalar>
void write_payload(std::ostream& os, const Tensor<Scalar>& t) {
  write_bytes(os, t.data(), static_cast<size_t>(t.numel()) * sizeof(Scalar));
}

template <typename Scalar>
Tensor<Scalar> read_payload(std::istream& is, const Shape& shape, const char* what) {
  Tensor<Scalar> t = Tensor<Scalar>::empty(shape);
  read_bytes(is, t.data(), static_cast<size_t>(t.numel()) * sizeof(Scalar), what);
  return t;
}

template <typename Scalar>
Shape read_param_shape(std::istream& is, const std::string& name) {
  const uint32_t rank = read_pod<uint32_t>(is, "param rank");
  check(rank >= 1 && rank <= 8, "dimension overflow: parameter '", name, "' rank ", rank);
  std::vector<uint32_t> dims(rank);
  for (uint32_t& d : dims) d = read_pod<uint32_t>(is, "param dims");
  checked_numel(dims);
  return Shape(dims.begin(), dims.end());
}

}  // namespace detail

template <typename Scalar>
void write_checkpoint(const std::string& path, const CheckpointContents<Scalar>& c) {
  auto os = detail::open_out(path);
  detail::write_bytes(os, "MPCK", 4);
  detail::write_pod<uint32_t>(os, kCheckpointFormatVersion);
  detail::write_pod<uint8_t>(os, dtype_tag_of<Scalar>::value);
  detail::write_config(os, c.config, c.ablation);
  detail::write_pod<uint64_t>(os, c.init_seed);
  detail::write_pod<uint64_t>(os, c.step);
  detail::write_string(os, c.rng_state);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(c.params.size()));
  for (const auto& [name, value] : c.params) {
    detail::write_string(os, name);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(value.rank()));
    for (Index d : value.shape()) {
      check(d <= Index(UINT32_MAX), "checkpoint: extent ", d, " does not fit u32");
      detail::write_pod<uint32_t>(os, static_cast<uint32_t>(d));
    }
    detail::write_payload(os, value);
  }
  detail::write_pod<uint8_t>(os, c.has_optimizer ? 1 : 0);
  if (c.has_optimizer) {
    check(c.adam_m.size() == c.params.size() && c.adam_v.size() == c.params.size(),
          "checkpoint: optimizer slot count ", c.adam_m.size(), "/", c.adam_v.size(),
          " does not match ", c.params.size(), " parameters");
    detail::write_pod<uint64_t>(os, c.adam_step);
    for (size_t i = 0; i < c.params.size(); ++i) {
      check(c.adam_m[i].shape() == c.params[i].second.shape() &&
                c.adam_v[i].shape() == c.params[i].second.shape(),
            "checkpoint: optimizer slot ", i, " shape mismatch");
      detail::write_payload(os, c.adam_m[i]);
      detail::write_payload(os, c.adam_v[i]);
    }
  }
  os.flush();
  check(os.good(), "write failed for '", path, "'");
}

namespace detail {

inline void read_checkpoint_preamble(std::istream& is, const std::string& path,
                                     uint8_t expected_dtype, CheckpointHeader& h) {
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  check(std::string_view(magic, 4) == "MPCK", "bad magic in '", path,
        "': not a checkpoint file");
  const uint32_t version = read_pod<uint32_t>(is, "version");
  check(version == kCheckpointFormatVersion, "version mismatch in '", path, "': file has ",
        version, ", reader supports ", kCheckpointFormatVersion);
  h.dtype = read_pod<uint8_t>(is, "dtype");
  if (expected_dtype != 0)
    check(h.dtype == expected_dtype, "dtype mismatch in '", path, "': file holds ",
          dtype_name(h.dtype), ", requested ", dtype_name(expected_dtype));
  read_config(is, h.config, h.ablation);
  h.init_seed = read_pod<uint64_t>(is, "init_seed");
  h.step = read_pod<uint64_t>(is, "step");
  h.rng_state = read_string(is, "rng state");
}

}  // namespace detail

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  auto is = detail::open_in(path);
  CheckpointHeader h;
  detail::read_checkpoint_preamble(is, path, 0, h);
  return h;
}

template <typename Scalar>
CheckpointContents<Scalar> read_checkpoint(const std::string& path) {
  auto is = detail::open_in(path);
  CheckpointHeader h;
  detail::read_checkpoint_preamble(is, path, dtype_tag_of<Scalar>::value, h);
  CheckpointContents<Scalar> c;
  c.config = h.config;
  c.ablation = h.ablation;
  c.init_seed = h.init_seed;
  c.step = h.step;
  c.rng_state = h.rng_state;
  const uint32_t count = detail::read_pod<uint32_t>(is, "param count");
  check(count <= (1u << 20), "checkpoint: parameter count ", count, " is implausible");
  c.params.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = detail::read_string(is, "param name");
    Shape shape = detail::read_param_shape<Scalar>(is, name);
    Tensor<Scalar> value = detail::read_payload<Scalar>(is, shape, name.c_str());
    c.params.emplace_back(std::move(name), std::move(value));
  }
  c.has_optimizer = detail::read_pod<uint8_t>(is, "optimizer flag") != 0;
  if (c.has_optimizer) {
    c.adam_step = detail::read_pod<uint64_t>(is, "adam step");
    c.adam_m.reserve(count);
    c.adam_v.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
      const Shape& shape = c.params[i].second.shape();
      c.adam_m.push_back(detail::read_payload<Scalar>(is, shape, "adam m"));
      c.adam_v.push_back(detail::read_payload<Scalar>(is, shape, "adam v"));
    }
  }
  return c;
}

template <typename Scalar>
void save_checkpoint(const std::string& path, Model<Scalar>& model, const Adam<Scalar>* opt,
                     uint64_t step, const std::string& rng_state) {
  CheckpointContents<Scalar> c;
  c.config = model.config();
  c.ablation = model.ablation();
  c.init_seed = model.init_seed();
  c.step = step;
  c.rng_state = rng_state;
  auto params = model.parameters();
  c.params.reserve(params.size());
  for (const Parameter<Scalar>* p : params) c.params.emplace_back(p->name, p->value);
  if (opt != nullptr) {
    check(opt->slot_count() == params.size(), "checkpoint: optimizer tracks ",
          opt->slot_count(), " slots, model has ", params.size());
    c.has_optimizer = true;
    c.adam_step = opt->steps_taken();
    for (size_t i = 0; i < params.size(); ++i) {
      c.adam_m.push_back(opt->m(i));
      c.adam_v.push_back(opt->v(i));
    }
  }
  write_checkpoint(path, c);
}

/// Outcome of load_checkpoint: the trainer restores its counters and rng from
/// these instead of the file layout.
struct ResumeInfo {
  uint64_t step = 0;
  std::string rng_state;
  bool had_optimizer = false;
};

template <typename Scalar>
ResumeInfo load_checkpoint(const std::string& path, Model<Scalar>& model, Adam<Scalar>* opt) {
  CheckpointContents<Scalar> c = read_checkpoint<Scalar>(path);
  check(detail::config_equal(c.config, model.config()),
        "config mismatch in '", path, "': checkpoint architecture differs from model");
  check(detail::ablation_equal(c.ablation, model.ablation()),
        "config mismatch in '", path, "': ablation flags differ (file ",
        ablation_name(c.ablation), ", model ", ablation_name(model.ablation()), ")");
  auto params = model.parameters();
  check(c.params.size() == params.size(), "checkpoint '", path, "' stores ",
        c.params.size(), " parameters, model has ", params.size());

  // Index the table by name; order in the file is not part of the contract.
  std::vector<std::pair<std::string, Tensor<Scalar>>*> by_name;
  for (Parameter<Scalar>* p : params) {
    auto it = std::find_if(c.params.begin(), c.params.end(),
                           [&](const auto& e) { return e.first == p->name; });
    check(it != c.params.end(), "missing parameter '", p->name, "' in '", path, "'");
    check(it->second.shape() == p->value.shape(), "payload size mismatch for '", p->name,
          "': file ", shape_str(it->second.shape()), ", model ",
          shape_str(p->value.shape()));
    by_name.push_back(&*it);
  }
  for (size_t i = 0; i < params.size(); ++i) params[i]->value = by_name[i]->second.clone();

  ResumeInfo info;
  info.step = c.step;
  info.rng_state = c.rng_state;
  info.had_optimizer = c.has_optimizer;
  if (opt != nullptr) {
    check(c.has_optimizer, "checkpoint '", path, "' holds no optimizer state");
    // Optimizer slots are stored in file parameter order; realign to model order.
    std::vector<Tensor<Scalar>> m, v;
    m.reserve(params.size());
    v.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      const size_t src = static_cast<size_t>(by_name[i] - c.params.data());
      m.push_back(std::move(c.adam_m[src]));
      v.push_back(std::move(c.adam_v[src]));
    }
    opt->restore(c.adam_step, std::move(m), std::move(v));
  }
  return info;
}

}  // namespace medprompt
