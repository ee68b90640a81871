// Copyright 2026 The munchlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Internal: the dense 2-layer (configurable) pre-LayerNorm decoder and its
// hand-written reverse pass. Templated on the scalar type so the double
// instantiation can serve gradient checks through the same code.

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "munchlab/seqmodel.hpp"

namespace munchlab::seqmodel::detail {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct Layout {
  std::size_t tok = 0, pos = 0;
  std::vector<LayerOffsets> layers;
  std::size_t lnf_g = 0, lnf_b = 0, unembed = 0;
  std::size_t total = 0;
};

Layout make_layout(const Arch& arch);

using Objective = std::function<double(std::span<const double>, std::span<double>)>;

/// Per-sequence log p(target | prompt). When grad is non-null, objective
/// must be set; its value is returned through loss and the gradient of the
/// objective is accumulated into grad (which must be zeroed by the caller).
template <typename S>
std::vector<double> run_batch(const Arch& arch, const S* params, const std::vector<Example>& batch,
                              const Objective* objective, S* grad, double* loss);

/// Incremental decoder over a key/value cache.
template <typename S>
class Decoder {
 public:
  Decoder(const Arch& arch, const S* params);

  /// Appends one token and returns the log-probabilities of the next one.
  const std::vector<double>& push(TokenId token);
  std::size_t length() const { return length_; }
  /// Drops cached positions beyond n (n <= length()).
  void truncate(std::size_t n) { length_ = n; }

 private:
  Arch arch_;
  const S* p_;
  Layout layout_;
  std::vector<Mat<S>> keys_, values_;
  std::size_t length_ = 0;
  std::vector<double> logprobs_;
};

}  // namespace munchlab::seqmodel::detail
