#pragma once

// Differentiable layer primitives. All image tensors are NCHW, row-major.

#include <atwb/autograd.hpp>
#include <atwb/prng.hpp>
#include <atwb/tensor.hpp>

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace atwb {

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// input [N,C,H,W], kernel [F,C,kh,kw], bias [F] (may be undefined) -> [N,F,H',W'].
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& kernel, const Var<T>& bias,
              Conv2dParams params = {});

template <typename T>
struct MaxPoolResult {
  Var<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

// Requires (H - k) and (W - k) to be multiples of stride.
template <typename T>
MaxPoolResult<T> maxpool2d_with_indices(Tape<T>& tape, const Var<T>& input, std::size_t k,
                                        std::size_t stride);

template <typename T>
Var<T> maxpool2d(Tape<T>& tape, const Var<T>& input, std::size_t k = 2, std::size_t stride = 2) {
  return maxpool2d_with_indices(tape, input, k, stride).output;
}

// input [N,D], weight [D,K], bias [K] -> [N,K].
template <typename T>
Var<T> dense(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& input);

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

// [N,C,H,W] -> [N,C]
template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& input);

// Inverted dropout: training zeroes with probability p and scales survivors by 1/(1-p).
template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& input, double p, Prng& rng, bool training);

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

// scalar [1] times x.
template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& scalar, const Var<T>& x);

// weights [N,1,H,W] broadcast over the channels of x [N,C,H,W].
template <typename T>
Var<T> multiply_spatial(Tape<T>& tape, const Var<T>& weights, const Var<T>& x);

// Softmax over the H*W positions of each (n, c) plane.
template <typename T>
Var<T> spatial_softmax(Tape<T>& tape, const Var<T>& input);

// [N,C,H,W] -> [N,1,H,W]
template <typename T>
Var<T> sum_channels(Tape<T>& tape, const Var<T>& input);

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& input, Shape shape);

// Scalar sum of all elements.
template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& input);

// Scalar <x, weights> for a constant weight tensor of the same shape.
template <typename T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& input, const Tensor<T>& weights);

enum class Reduction { mean, sum };

template <typename T>
struct CrossEntropy {
  Var<T> loss;           // scalar
  Tensor<T> probabilities;  // [N,K]
};

// Stable softmax cross-entropy. With class weights w the loss is
// (1/N) * sum_i w[y_i] * -log p_i[y_i] under Reduction::mean.
template <typename T>
CrossEntropy<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits,
                                      std::span<const int> labels,
                                      const Tensor<T>* class_weights = nullptr,
                                      Reduction reduction = Reduction::mean);

// Row-wise softmax of [N,K] logits.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

// Per-row -log softmax[label], evaluated in double.
template <typename T>
std::vector<double> cross_entropy_per_row(const Tensor<T>& logits, std::span<const int> labels);

// Row-wise argmax of [N,K]; ties resolve to the lower index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

}  // namespace atwb
