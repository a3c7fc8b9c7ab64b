#pragma once

#include <atwb/autograd.hpp>
#include <atwb/prng.hpp>

#include <cstddef>

namespace atwb {

// Soft-attention block: a full-depth 3x3 convolution produces `heads` maps,
// each softmax-normalized over space; their sum reweights the features, and
// the result is scaled by a learnable scalar gamma that starts at zero.
template <typename T>
struct SoftAttentionBlock {
  std::size_t channels = 0;
  std::size_t heads = 16;
  Var<T> kernel;  // [heads, channels, 3, 3]
  Var<T> gamma;   // [1]

  static SoftAttentionBlock create(std::size_t channels, std::size_t heads, Prng& rng);
};

template <typename T>
struct AttentionMaps {
  Var<T> alpha;  // [N,1,H,W], sums to `heads` over space
  Var<T> heads;  // [N,heads,H,W], each plane sums to 1
};

template <typename T>
AttentionMaps<T> compute_attention(Tape<T>& tape, const SoftAttentionBlock<T>& block,
                                   const Var<T>& features);

// gamma * (alpha ⊙ features)
template <typename T>
Var<T> soft_attention_forward(Tape<T>& tape, const SoftAttentionBlock<T>& block,
                              const Var<T>& features);

// maxpool2(attention) ‖ maxpool2(features) -> relu -> dropout -> GAP, giving [N, 2C].
template <typename T>
Var<T> attentive_head(Tape<T>& tape, const SoftAttentionBlock<T>& block, const Var<T>& features,
                      double dropout_p, Prng& rng, bool training);

}  // namespace atwb
