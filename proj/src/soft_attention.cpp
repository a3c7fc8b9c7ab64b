#include <atwb/soft_attention.hpp>

#include <atwb/init.hpp>
#include <atwb/ops.hpp>

namespace atwb {

template <typename T>
SoftAttentionBlock<T> SoftAttentionBlock<T>::create(std::size_t channels, std::size_t heads,
                                                    Prng& rng) {
  if (channels == 0 || heads == 0) {
    throw ValueError("SoftAttentionBlock: channels and heads must be positive");
  }
  SoftAttentionBlock block;
  block.channels = channels;
  block.heads = heads;
  block.kernel = Var<T>::leaf(kaiming_uniform<T>({heads, channels, 3, 3}, channels * 9, rng), true);
  block.gamma = Var<T>::leaf(Tensor<T>({1}, T{0}), true);
  return block;
}

template <typename T>
AttentionMaps<T> compute_attention(Tape<T>& tape, const SoftAttentionBlock<T>& block,
                                   const Var<T>& features) {
  if (features.shape().size() != 4) {
    throw ShapeError("compute_attention", "features must be NCHW, got " + to_string(features.shape()));
  }
  if (features.shape()[1] != block.channels) {
    throw ShapeError("compute_attention", "C", block.channels, features.shape()[1]);
  }
  AttentionMaps<T> maps;
  const Var<T> scores = conv2d(tape, features, block.kernel, Var<T>{}, Conv2dParams{1, 1});
  maps.heads = spatial_softmax(tape, scores);
  maps.alpha = sum_channels(tape, maps.heads);
  return maps;
}

template <typename T>
Var<T> soft_attention_forward(Tape<T>& tape, const SoftAttentionBlock<T>& block,
                              const Var<T>& features) {
  const auto maps = compute_attention(tape, block, features);
  return scale(tape, block.gamma, multiply_spatial(tape, maps.alpha, features));
}

template <typename T>
Var<T> attentive_head(Tape<T>& tape, const SoftAttentionBlock<T>& block, const Var<T>& features,
                      double dropout_p, Prng& rng, bool training) {
  if (features.shape().size() == 4 &&
      (features.shape()[2] % 2 != 0 || features.shape()[3] % 2 != 0)) {
    throw ShapeError("attentive_head", "spatial extents must be even, got " +
                                           to_string(features.shape()));
  }
  const Var<T> attended = soft_attention_forward(tape, block, features);
  const Var<T> joined =
      concat_channels(tape, maxpool2d(tape, attended, 2, 2), maxpool2d(tape, features, 2, 2));
  const Var<T> dropped = dropout(tape, relu(tape, joined), dropout_p, rng, training);
  return global_avg_pool(tape, dropped);
}

#define ATWB_INSTANTIATE_ATTENTION(T)                                                          \
  template struct SoftAttentionBlock<T>;                                                      \
  template AttentionMaps<T> compute_attention(Tape<T>&, const SoftAttentionBlock<T>&,         \
                                              const Var<T>&);                                 \
  template Var<T> soft_attention_forward(Tape<T>&, const SoftAttentionBlock<T>&, const Var<T>&); \
  template Var<T> attentive_head(Tape<T>&, const SoftAttentionBlock<T>&, const Var<T>&, double, \
                                 Prng&, bool);

ATWB_INSTANTIATE_ATTENTION(float)
ATWB_INSTANTIATE_ATTENTION(double)

}  // namespace atwb
