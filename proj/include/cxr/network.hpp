/* Copyright 2026 The cxrnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef CXR_NETWORK_HPP_
#define CXR_NETWORK_HPP_

#include <Eigen/Core>
#include <cmath>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cxr/arch_spec.hpp"
#include "cxr/pixelpipe.hpp"

namespace cxr {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
/// channels x (height*width), row-major so each channel plane is contiguous.
template <typename Scalar>
using FeatureMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Feature map stored as a channels x (height*width) matrix; spatial index is
/// y * width + x, and the flattened order is c * height * width + y * width + x.
template <typename Scalar>
struct FeatureMap {
  int height = 0;
  int width = 0;
  FeatureMatrix<Scalar> data;

  int channels() const { return static_cast<int>(data.rows()); }
  Shape3 shape() const { return {channels(), height, width}; }
  Scalar& at(int c, int y, int x) { return data(c, y * width + x); }
  Scalar at(int c, int y, int x) const { return data(c, y * width + x); }

  static FeatureMap zeros(const Shape3& s) {
    return {s.height, s.width,
            FeatureMatrix<Scalar>::Zero(s.channels, std::int64_t(s.height) * s.width)};
  }
  static FeatureMap from_image(const ImageT<Scalar>& img) {
    FeatureMap f{static_cast<int>(img.rows()), static_cast<int>(img.cols()),
                 FeatureMatrix<Scalar>(1, img.size())};
    // ImageT is row-major, so its storage order is already y * width + x.
    f.data.row(0) = Eigen::Map<const VectorX<Scalar>>(img.data(), img.size()).transpose();
    return f;
  }
};

// ------------------------------------------------------------------ primitives

/// "same"-padded k x k convolution. weights: out x (in * k * k), column index
/// ci * k * k + ky * k + kx.
template <typename Scalar>
FeatureMap<Scalar> conv2d(const FeatureMap<Scalar>& x,
                          const Eigen::Ref<const MatrixX<Scalar>>& weights,
                          const Eigen::Ref<const VectorX<Scalar>>& bias, int kernel, int stride);

/// 1x1 convolution. weights: out x in.
template <typename Scalar>
FeatureMap<Scalar> pointwise_conv(const FeatureMap<Scalar>& x,
                                  const Eigen::Ref<const MatrixX<Scalar>>& weights,
                                  const Eigen::Ref<const VectorX<Scalar>>& bias, int stride = 1);

/// Per-channel "same"-padded convolution. weights: (in * multiplier) x (k * k);
/// output channel c * multiplier + j reads input channel c.
template <typename Scalar>
FeatureMap<Scalar> depthwise_conv(const FeatureMap<Scalar>& x,
                                  const Eigen::Ref<const MatrixX<Scalar>>& weights,
                                  const Eigen::Ref<const VectorX<Scalar>>& bias, int kernel,
                                  int stride, int multiplier);

template <typename Scalar>
void activate(FeatureMap<Scalar>& x, Activation fn) {
  if (fn == Activation::relu) x.data = x.data.cwiseMax(Scalar(0));
}

/// Explicit weights for one PRPE block.
template <typename Scalar>
struct PRPEWeights {
  MatrixX<Scalar> project_w;  // internal x in
  VectorX<Scalar> project_b;
  std::vector<MatrixX<Scalar>> replica_w;  // each internal x (k * k)
  std::vector<VectorX<Scalar>> replica_b;
  MatrixX<Scalar> reproject_w;  // internal x merged
  VectorX<Scalar> reproject_b;
  MatrixX<Scalar> expand_w;  // expand x internal
  VectorX<Scalar> expand_b;

  static PRPEWeights zeros(const PRPEBlockSpec& block);
};

template <typename Scalar>
FeatureMap<Scalar> prpe_forward(const PRPEBlockSpec& block, const PRPEWeights<Scalar>& w,
                                const FeatureMap<Scalar>& x);

// ------------------------------------------------------------------ network

inline constexpr double kProbabilityEpsilon = 1e-7;

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

/// Mean binary cross-entropy with probabilities clipped to [eps, 1 - eps].
template <typename Scalar>
Scalar bce_loss(std::span<const Scalar> probabilities, std::span<const int> labels);

/// Named slice of the flat parameter vector.
struct ParameterBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

template <typename Scalar>
class Op;

/// A model built from an ArchSpec: layers, long-range connections and a
/// single-logit sigmoid head. All parameters live in one flat vector.
template <typename Scalar>
class Network {
 public:
  /// Builds the model and draws fan-in scaled uniform weights from `seed`.
  explicit Network(const ArchSpec& spec, std::uint64_t seed = 0);
  Network(const ArchSpec& spec, VectorX<Scalar> parameters);

  const ArchSpec& spec() const { return plan_.spec; }
  const ShapePlan& plan() const { return plan_; }

  Eigen::Index parameter_count() const { return params_.size(); }
  VectorX<Scalar>& parameters() { return params_; }
  const VectorX<Scalar>& parameters() const { return params_; }
  const std::vector<ParameterBlock>& parameter_blocks() const { return blocks_; }

  Scalar logit(const ImageT<Scalar>& img) const;
  Scalar predict(const ImageT<Scalar>& img) const { return sigmoid(logit(img)); }
  /// Probabilities in batch order.
  VectorX<Scalar> forward(std::span<const ImageT<Scalar>> batch) const;
  /// Executed output shape of every layer.
  std::vector<Shape3> trace_shapes(const ImageT<Scalar>& img) const;

  Scalar loss(std::span<const ImageT<Scalar>> batch, std::span<const int> labels) const;
  /// Mean batch loss; `grad` receives d(loss)/d(parameters).
  Scalar loss_and_gradient(std::span<const ImageT<Scalar>> batch, std::span<const int> labels,
                           VectorX<Scalar>& grad) const;

  template <typename Other>
  Network<Other> cast() const {
    return Network<Other>(plan_.spec, params_.template cast<Other>().eval());
  }

 private:
  void build();
  void check_input(const ImageT<Scalar>& img) const;

  ShapePlan plan_;
  VectorX<Scalar> params_;
  std::vector<ParameterBlock> blocks_;
  std::vector<std::shared_ptr<const Op<Scalar>>> layers_;
  std::vector<std::shared_ptr<const Op<Scalar>>> adapters_;  // per edge, null if none
  std::shared_ptr<const Op<Scalar>> head_;
};

using Model = Network<float>;

/// Validates the spec and builds a float model. Throws SpecError naming the
/// offending layer on shape mismatches.
Model build_model(const ArchSpec& spec, std::uint64_t seed = 0);

// Checkpoint: "CXRCKPT1", u32 version, u64 spec hash, u32 spec-json length,
// spec json, u64 parameter count, little-endian float32 parameters.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cxr

#endif  // CXR_NETWORK_HPP_
