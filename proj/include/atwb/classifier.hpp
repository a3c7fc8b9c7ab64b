#pragma once

#include <atwb/autograd.hpp>

namespace atwb {

// Anything attacks and saliency methods can differentiate through: maps an
// image batch [N,C,H,W] to logits [N,K] in evaluation mode.
template <typename T>
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual Var<T> logits(Tape<T>& tape, const Var<T>& input) const = 0;
};

}  // namespace atwb
