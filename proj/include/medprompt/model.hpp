#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "medprompt/autodiff.hpp"
#include "medprompt/rng.hpp"

namespace medprompt {

struct ModelConfig {
  Index in_channels = 1;
  Index out_channels = 1;
  Index base_channels = 16;
  std::array<Index, 4> num_blocks{1, 2, 2, 4};
  std::array<Index, 4> num_heads{1, 2, 4, 8};
  double gdfn_expansion = 2.66;
  Index num_prompts = 5;
  Index prompt_base_size = 16;
  Index spb_sites = 3;
};

/// Component switches for the ablation grid. All true is the full model.
struct AblationFlags {
  bool use_peb = true;
  bool use_pfb = true;
  bool use_transformer = true;
};

inline std::string ablation_name(const AblationFlags& f) {
  if (!f.use_peb) return "no_peb";
  if (!f.use_pfb) return "no_pfb";
  if (!f.use_transformer) return "no_transformer";
  return "full";
}

inline AblationFlags ablation_from_name(const std::string& name) {
  AblationFlags f;
  if (name == "full") return f;
  if (name == "no_peb") { f.use_peb = false; return f; }
  if (name == "no_pfb") { f.use_pfb = false; return f; }
  if (name == "no_transformer") { f.use_transformer = false; return f; }
  fail("unknown ablation variant '", name,
       "' (expected full, no_peb, no_pfb or no_transformer)");
}

inline Index gdfn_hidden(Index channels, double expansion) {
  return static_cast<Index>(std::llround(expansion * static_cast<double>(channels)));
}

inline void validate(const ModelConfig& cfg) {
  check(cfg.in_channels >= 1 && cfg.out_channels >= 1, "config: channel counts must be >= 1");
  check(cfg.base_channels >= 2 && cfg.base_channels % 2 == 0,
        "config: base_channels must be even and >= 2, got ", cfg.base_channels);
  check(cfg.num_prompts >= 1, "config: num_prompts must be >= 1, got ", cfg.num_prompts);
  check(cfg.prompt_base_size >= 1, "config: prompt_base_size must be >= 1");
  check(cfg.spb_sites >= 0 && cfg.spb_sites <= 3, "config: spb_sites must be in [0, 3], got ",
        cfg.spb_sites);
  check(cfg.gdfn_expansion > 0, "config: gdfn_expansion must be positive");
  for (Index l = 0; l < 4; ++l) {
    const Index c = cfg.base_channels << l;
    check(cfg.num_blocks[static_cast<size_t>(l)] >= 1, "config: num_blocks[", l, "] must be >= 1");
    const Index h = cfg.num_heads[static_cast<size_t>(l)];
    check(h >= 1 && c % h == 0, "config: num_heads[", l, "]=", h,
          " must divide the level width ", c);
    check((2 * c) % h == 0, "config: num_heads[", l, "]=", h,
          " must divide the doubled width ", 2 * c, " used inside prompt fusion");
    check(gdfn_hidden(c, cfg.gdfn_expansion) >= 1, "config: gdfn hidden width is zero at level ",
          l);
  }
}

namespace detail {

template <typename Scalar>
Value<Scalar> leaf_of(Tape<Scalar>* tape, Parameter<Scalar>* p) {
  if (tape) return tape->leaf(*p);
  return Value<Scalar>{p->value, -1};
}

}  // namespace detail

/// One stage of the backbone. Either the attention + gated-feedforward pair
/// or, under the no_transformer ablation, a residual two-conv substitute.
template <typename Scalar>
struct TransformerBlock {
  Index channels = 0;
  Index heads = 1;
  bool conv_replacement = false;
  Parameter<Scalar>* ln1 = nullptr;
  Parameter<Scalar>* qkv_pw = nullptr;
  Parameter<Scalar>* qkv_dw = nullptr;
  Parameter<Scalar>* alpha = nullptr;
  Parameter<Scalar>* attn_proj = nullptr;
  Parameter<Scalar>* ln2 = nullptr;
  Parameter<Scalar>* ff_expand = nullptr;
  Parameter<Scalar>* ff_dw = nullptr;
  Parameter<Scalar>* ff_proj = nullptr;
  Parameter<Scalar>* conv1 = nullptr;
  Parameter<Scalar>* conv2 = nullptr;
};

/// Self-adaptive prompt block: input-conditioned prompt generation followed
/// by fusion back into the feature map.
template <typename Scalar>
struct PromptBlock {
  Index channels = 0;
  Parameter<Scalar>* prompts = nullptr;      // {N, C, S, S}
  Parameter<Scalar>* weight_conv = nullptr;  // {N, C, 1, 1}; absent under no_peb
  Parameter<Scalar>* mix_conv = nullptr;     // {C, C, 3, 3}
  TransformerBlock<Scalar> fusion;           // at 2C; absent under no_pfb
  Parameter<Scalar>* reduce_conv = nullptr;  // {C, 2C, 3, 3}
  Parameter<Scalar>* fuse_conv = nullptr;    // {C, C, 3, 3}; only under no_pfb
};

/// Softmax-normalized prompt mixture weights from pooled features:
/// w = softmax(conv1x1(GAP(f))), one weight per prompt component.
template <typename Scalar>
Value<Scalar> peb_weights(Tape<Scalar>* tape, const Value<Scalar>& f,
                          const Value<Scalar>& weight_conv) {
  Value<Scalar> pooled = ad::global_avg_pool(tape, f);
  Value<Scalar> logits = ad::conv2d<Scalar>(tape, pooled, weight_conv, nullptr, {1, 0, 1});
  return ad::softmax_axis(tape, logits, 1);
}

template <typename Scalar>
class Model {
 public:
  Model(ModelConfig cfg, AblationFlags flags, uint64_t init_seed)
      : cfg_(cfg), flags_(flags), init_seed_(init_seed) {
    validate(cfg_);
    const Index c0 = cfg_.base_channels;

    stem_ = add_conv("stem", cfg_.in_channels, c0, 3);
    for (Index l = 0; l < 3; ++l) {
      const Index c = c0 << l;
      enc_[static_cast<size_t>(l)] = make_stack(str_cat("enc", l + 1), c,
                                                cfg_.num_heads[static_cast<size_t>(l)],
                                                cfg_.num_blocks[static_cast<size_t>(l)]);
      down_[static_cast<size_t>(l)] = add_conv(str_cat("down", l + 1), c, c / 2, 3);
    }
    latent_ = make_stack("latent", c0 << 3, cfg_.num_heads[3], cfg_.num_blocks[3]);

    // Decoder from level 3 back to level 1; prompt blocks consume sites in
    // order latent, dec3, dec2.
    if (cfg_.spb_sites > 0) spb_.push_back(make_spb("spb0", c0 << 3, cfg_.num_heads[3]));
    for (Index l = 2; l >= 0; --l) {
      const size_t i = static_cast<size_t>(l);
      const Index c = c0 << (l + 1);  // channels above this level
      up_[i] = add_conv(str_cat("up", l + 1), c, 2 * c, 3);
      skip_[i] = add_conv(str_cat("skip", l + 1), c, c / 2, 1);
      dec_[i] = make_stack(str_cat("dec", l + 1), c / 2, cfg_.num_heads[i],
                           cfg_.num_blocks[i]);
      if (l == 2 && cfg_.spb_sites > 1)
        spb_.push_back(make_spb("spb1", c0 << 2, cfg_.num_heads[2]));
      if (l == 1 && cfg_.spb_sites > 2)
        spb_.push_back(make_spb("spb2", c0 << 1, cfg_.num_heads[1]));
    }
    final_ = add_conv("final", c0, cfg_.out_channels, 3);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Value<Scalar> forward(Tape<Scalar>* tape, const Tensor<Scalar>& input) {
    check(input.rank() == 4 && input.c() == cfg_.in_channels, "forward: expected input [Nx",
          cfg_.in_channels, "xHxW], got ", shape_str(input.shape()));
    check(input.h() % 8 == 0 && input.w() % 8 == 0,
          "forward: spatial extents must be multiples of 8, got ", input.h(), "x", input.w());
    Value<Scalar> x = Value<Scalar>{input, -1};

    x = conv(tape, x, stem_, 1);
    Value<Scalar> e1 = stack_forward(tape, enc_[0], x);
    Value<Scalar> x2 = downsample(tape, e1, down_[0]);
    Value<Scalar> e2 = stack_forward(tape, enc_[1], x2);
    Value<Scalar> x3 = downsample(tape, e2, down_[1]);
    Value<Scalar> e3 = stack_forward(tape, enc_[2], x3);
    Value<Scalar> x4 = downsample(tape, e3, down_[2]);
    Value<Scalar> y = stack_forward(tape, latent_, x4);

    Index site = 0;
    if (cfg_.spb_sites > 0) y = spb_forward(tape, spb_[static_cast<size_t>(site++)], y);
    y = upsample(tape, y, up_[2]);
    y = merge_skip(tape, y, e3, skip_[2]);
    y = stack_forward(tape, dec_[2], y);
    if (cfg_.spb_sites > 1) y = spb_forward(tape, spb_[static_cast<size_t>(site++)], y);
    y = upsample(tape, y, up_[1]);
    y = merge_skip(tape, y, e2, skip_[1]);
    y = stack_forward(tape, dec_[1], y);
    if (cfg_.spb_sites > 2) y = spb_forward(tape, spb_[static_cast<size_t>(site++)], y);
    y = upsample(tape, y, up_[0]);
    y = merge_skip(tape, y, e1, skip_[0]);
    y = stack_forward(tape, dec_[0], y);
    return conv(tape, y, final_, 1);
  }

  Tensor<Scalar> translate(const Tensor<Scalar>& input) {
    return forward(nullptr, input).data;
  }

  std::vector<Parameter<Scalar>*> parameters() {
    std::vector<Parameter<Scalar>*> out;
    out.reserve(store_.size());
    for (auto& p : store_) out.push_back(&p);
    return out;
  }

  Parameter<Scalar>* find_parameter(const std::string& name) {
    for (auto& p : store_)
      if (p.name == name) return &p;
    return nullptr;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : store_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : store_) p.zero_grad();
  }

  const ModelConfig& config() const { return cfg_; }
  const AblationFlags& ablation() const { return flags_; }
  uint64_t init_seed() const { return init_seed_; }
  Index spb_count() const { return static_cast<Index>(spb_.size()); }
  const PromptBlock<Scalar>& spb(Index i) const { return spb_.at(static_cast<size_t>(i)); }

 private:
  struct Stack {
    std::vector<TransformerBlock<Scalar>> blocks;
  };

  Parameter<Scalar>* add_param(std::string name, Tensor<Scalar> value) {
    store_.emplace_back(std::move(name), std::move(value));
    return &store_.back();
  }

  Rng next_rng() { return Rng(derive_seed(init_seed_, kStreamInit, param_counter_++)); }

  /// Kaiming-uniform fan-in conv weight {out, in_g, k, k}. Linear gain
  /// (Var = 1/fan_in): most convs here feed norms, gates, or further linear
  /// convs rather than ReLUs, and with no global input->output residual the
  /// rectifier gain of sqrt(2) would double the variance at every plain conv
  /// on the stem/down/up/final path and saturate the initial outputs.
  Parameter<Scalar>* add_conv(const std::string& name, Index in_g, Index out, Index k) {
    Rng rng = next_rng();
    const Scalar bound =
        static_cast<Scalar>(std::sqrt(3.0 / static_cast<double>(in_g * k * k)));
    return add_param(name, Tensor<Scalar>::uniform({out, in_g, k, k}, rng, -bound, bound));
  }

  Parameter<Scalar>* add_ones(const std::string& name, Shape shape) {
    ++param_counter_;  // keep seeds stable regardless of init kind
    return add_param(name, Tensor<Scalar>::full(std::move(shape), Scalar(1)));
  }

  TransformerBlock<Scalar> make_block(const std::string& name, Index c, Index heads) {
    TransformerBlock<Scalar> b;
    b.channels = c;
    b.heads = heads;
    if (!flags_.use_transformer) {
      b.conv_replacement = true;
      b.conv1 = add_conv(name + ".conv1", c, c, 3);
      b.conv2 = add_conv(name + ".conv2", c, c, 3);
      return b;
    }
    b.ln1 = add_ones(name + ".ln1", {c});
    b.qkv_pw = add_conv(name + ".qkv_pw", c, 3 * c, 1);
    b.qkv_dw = add_conv(name + ".qkv_dw", 1, 3 * c, 3);
    b.alpha = add_ones(name + ".alpha", {heads});
    b.attn_proj = add_conv(name + ".attn_proj", c, c, 1);
    b.ln2 = add_ones(name + ".ln2", {c});
    const Index g = gdfn_hidden(c, cfg_.gdfn_expansion);
    b.ff_expand = add_conv(name + ".ff_expand", c, 2 * g, 1);
    b.ff_dw = add_conv(name + ".ff_dw", 1, 2 * g, 3);
    b.ff_proj = add_conv(name + ".ff_proj", g, c, 1);
    return b;
  }

  Stack make_stack(const std::string& name, Index c, Index heads, Index count) {
    Stack s;
    for (Index i = 0; i < count; ++i)
      s.blocks.push_back(make_block(str_cat(name, ".b", i), c, heads));
    return s;
  }

  PromptBlock<Scalar> make_spb(const std::string& name, Index c, Index heads) {
    PromptBlock<Scalar> pb;
    pb.channels = c;
    {
      Rng rng = next_rng();
      pb.prompts = add_param(
          name + ".prompts",
          Tensor<Scalar>::normal({cfg_.num_prompts, c, cfg_.prompt_base_size,
                                  cfg_.prompt_base_size},
                                 rng, Scalar(0), Scalar(0.02)));
    }
    if (flags_.use_peb) pb.weight_conv = add_conv(name + ".weight_conv", c, cfg_.num_prompts, 1);
    pb.mix_conv = add_conv(name + ".mix", c, c, 3);
    if (flags_.use_pfb) {
      pb.fusion = make_block(name + ".fusion", 2 * c, heads);
      pb.reduce_conv = add_conv(name + ".reduce", 2 * c, c, 3);
    } else {
      pb.fuse_conv = add_conv(name + ".fuse", c, c, 3);
    }
    return pb;
  }

  // --- forward pieces ---

  Value<Scalar> conv(Tape<Scalar>* t, const Value<Scalar>& x, Parameter<Scalar>* w,
                     Index padding, Index groups = 1) {
    return ad::conv2d<Scalar>(t, x, detail::leaf_of(t, w), nullptr, {1, padding, groups});
  }

  Value<Scalar> downsample(Tape<Scalar>* t, const Value<Scalar>& x, Parameter<Scalar>* w) {
    return ad::pixel_shuffle_down(t, conv(t, x, w, 1), 2);
  }

  Value<Scalar> upsample(Tape<Scalar>* t, const Value<Scalar>& x, Parameter<Scalar>* w) {
    return ad::pixel_shuffle_up(t, conv(t, x, w, 1), 2);
  }

  Value<Scalar> merge_skip(Tape<Scalar>* t, const Value<Scalar>& x, const Value<Scalar>& skip,
                           Parameter<Scalar>* reduce) {
    return conv(t, ad::concat_channels<Scalar>(t, {x, skip}), reduce, 0);
  }

  Value<Scalar> stack_forward(Tape<Scalar>* t, Stack& s, Value<Scalar> x) {
    for (auto& b : s.blocks) x = block_forward(t, b, x);
    return x;
  }

  Value<Scalar> block_forward(Tape<Scalar>* t, TransformerBlock<Scalar>& b, Value<Scalar> x) {
    if (b.conv_replacement) {
      Value<Scalar> h = ad::gelu(t, conv(t, x, b.conv1, 1));
      h = ad::gelu(t, conv(t, h, b.conv2, 1));
      return ad::add(t, x, h);
    }
    x = ad::add(t, x, attention(t, b, ad::layer_norm_channels(t, x, detail::leaf_of(t, b.ln1))));
    x = ad::add(t, x, feedforward(t, b, ad::layer_norm_channels(t, x, detail::leaf_of(t, b.ln2))));
    return x;
  }

  /// Transposed self-attention: per head, channels attend over channels with
  /// spatially L2-normalized queries/keys, so cost scales with C^2 not (HW)^2.
  Value<Scalar> attention(Tape<Scalar>* t, TransformerBlock<Scalar>& b, Value<Scalar> x) {
    const Index n = x.data.n(), c = b.channels, h = x.data.h(), w = x.data.w();
    const Index heads = b.heads, ch = c / heads, hw = h * w;
    Value<Scalar> qkv = conv(t, x, b.qkv_pw, 0);
    qkv = conv(t, qkv, b.qkv_dw, 1, 3 * c);
    Value<Scalar> q = ad::reshape(t, ad::slice_channels(t, qkv, 0, c), {n * heads, ch, hw});
    Value<Scalar> k = ad::reshape(t, ad::slice_channels(t, qkv, c, c), {n * heads, ch, hw});
    Value<Scalar> v = ad::reshape(t, ad::slice_channels(t, qkv, 2 * c, c), {n * heads, ch, hw});
    q = ad::l2_normalize_rows(t, q);
    k = ad::l2_normalize_rows(t, k);
    Value<Scalar> attn = ad::matmul_batched(t, q, k, false, true);
    attn = ad::scale_per_head(t, attn, detail::leaf_of(t, b.alpha));
    attn = ad::softmax_axis(t, attn, 2);
    Value<Scalar> out = ad::matmul_batched(t, attn, v);
    out = ad::reshape(t, out, {n, c, h, w});
    return conv(t, out, b.attn_proj, 0);
  }

  /// Gated feedforward: expand to two branches, depthwise mix, gate one
  /// branch with GELU of the other, project back.
  Value<Scalar> feedforward(Tape<Scalar>* t, TransformerBlock<Scalar>& b, Value<Scalar> x) {
    const Index g = gdfn_hidden(b.channels, cfg_.gdfn_expansion);
    Value<Scalar> hb = conv(t, x, b.ff_expand, 0);
    hb = conv(t, hb, b.ff_dw, 1, 2 * g);
    Value<Scalar> h1 = ad::slice_channels(t, hb, 0, g);
    Value<Scalar> h2 = ad::slice_channels(t, hb, g, g);
    return conv(t, ad::mul(t, ad::gelu(t, h1), h2), b.ff_proj, 0);
  }

  Value<Scalar> spb_forward(Tape<Scalar>* t, PromptBlock<Scalar>& pb, Value<Scalar> f) {
    const Index n = f.data.n(), c = pb.channels, h = f.data.h(), w = f.data.w();
    const Index np = cfg_.num_prompts;
    Value<Scalar> weights;
    if (flags_.use_peb) {
      weights = ad::reshape(t, peb_weights(t, f, detail::leaf_of(t, pb.weight_conv)), {n, np});
    } else {
      weights = Value<Scalar>{
          Tensor<Scalar>::full({n, np}, Scalar(1) / static_cast<Scalar>(np)), -1};
    }
    Value<Scalar> comp = ad::bilinear_resize(t, detail::leaf_of(t, pb.prompts), h, w);
    comp = ad::reshape(t, comp, {np, c * h * w});
    Value<Scalar> mixed = ad::reshape(t, ad::matmul2d(t, weights, comp), {n, c, h, w});
    Value<Scalar> prompt = conv(t, mixed, pb.mix_conv, 1);
    if (flags_.use_pfb) {
      Value<Scalar> fused =
          block_forward(t, pb.fusion, ad::concat_channels<Scalar>(t, {f, prompt}));
      return conv(t, fused, pb.reduce_conv, 1);
    }
    return ad::add(t, f, conv(t, prompt, pb.fuse_conv, 1));
  }

  ModelConfig cfg_;
  AblationFlags flags_;
  uint64_t init_seed_;
  uint64_t param_counter_ = 0;

  std::deque<Parameter<Scalar>> store_;
  Parameter<Scalar>* stem_ = nullptr;
  std::array<Stack, 3> enc_;
  std::array<Parameter<Scalar>*, 3> down_{};
  Stack latent_;
  std::array<Parameter<Scalar>*, 3> up_{};
  std::array<Parameter<Scalar>*, 3> skip_{};
  std::array<Stack, 3> dec_;
  std::vector<PromptBlock<Scalar>> spb_;
  Parameter<Scalar>* final_ = nullptr;
};

}  // namespace medprompt
