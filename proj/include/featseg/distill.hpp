#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "featseg/image.hpp"
#include "featseg/manifest.hpp"

namespace featseg {

/// Weights of the distillation network:
///   conv1 3x3, 3 -> 16, pad 1            then ReLU
///   conv2 3x3, 16 -> 32, dilation 2, pad 2  then ReLU
///   conv3 1x1, 32 -> n_classes
/// Convolution weights are [out][in][ky][kx].
template <typename T>
struct FcnParams {
  static constexpr std::size_t kIn = 3;
  static constexpr std::size_t kC1 = 16;
  static constexpr std::size_t kC2 = 32;
  static constexpr std::size_t kTensors = 6;

  std::size_t n_classes = 0;
  std::vector<T> w1, b1, w2, b2, w3, b3;

  /// Zero-valued parameters of the right shapes.
  static FcnParams zeros(std::size_t n_classes);

  /// The six tensors in a fixed order (w1, b1, w2, b2, w3, b3).
  std::array<std::span<T>, kTensors> tensors();
  std::array<std::span<const T>, kTensors> tensors() const;

  friend bool operator==(const FcnParams&, const FcnParams&) = default;
};

/// Row-major H x W x 3 image with values in [0, 1].
template <typename T>
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;
};

template <typename T>
Image<T> to_image(const RgbImage& rgb);

/// Per-pixel logits stored class-major: value(c, y, x) at
/// data[(c * height + y) * width + x].
template <typename T>
struct Logits {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t n_classes = 0;
  std::vector<T> data;

  T at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(c * height + y) * width + x];
  }
};

template <typename T>
struct TrainExample {
  Image<T> image;
  MaskImage mask;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 0.1;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

void validate_train_config(const TrainConfig& cfg);

/// He initialisation: weights ~ N(0, sqrt(2 / fan_in)) drawn from
/// SplitMix64(seed) in the order w1, w2, w3; biases zero.
template <typename T>
FcnParams<T> fcn_init(std::size_t n_classes, std::uint64_t seed);

template <typename T>
Logits<T> fcn_forward(const FcnParams<T>& p, const Image<T>& image);

/// Mean softmax cross-entropy over the non-ignore pixels of the batch and
/// its gradient.
template <typename T>
struct LossAndGrad {
  T loss = 0;
  std::size_t pixels = 0;
  FcnParams<T> grad;
};

template <typename T>
LossAndGrad<T> fcn_loss_and_grad(const FcnParams<T>& p,
                                 std::span<const TrainExample<T>> batch,
                                 unsigned threads = 1);

template <typename T>
struct StepResult {
  FcnParams<T> params;
  FcnParams<T> velocity;
  T loss = 0;
  std::size_t pixels = 0;
};

/// One SGD-with-momentum step: v' = momentum * v - lr * grad, p' = p + v'.
/// The reported loss is evaluated at the incoming parameters.
template <typename T>
StepResult<T> fcn_train_step(const FcnParams<T>& p,
                             const FcnParams<T>& velocity,
                             std::span<const TrainExample<T>> batch, T lr,
                             T momentum, unsigned threads = 1);

template <typename T>
struct TrainResult {
  FcnParams<T> params;
  std::vector<double> loss_curve;  // pixel-weighted mean loss per epoch
};

/// Epochs of shuffled minibatch passes. The shuffle stream is
/// SplitMix64(derive_seed(seed, 1)); initial weights come from
/// fcn_init(n_classes, seed).
template <typename T>
TrainResult<T> fcn_train(std::span<const TrainExample<T>> data,
                         std::size_t n_classes, const TrainConfig& cfg);

/// Loads image + mask pairs and checks their dimensions and labels.
template <typename T>
std::vector<TrainExample<T>> load_training_set(const DatasetManifest& manifest,
                                               std::size_t n_classes);

template <typename T>
TrainResult<T> fcn_train(const DatasetManifest& manifest,
                         std::size_t n_classes, const TrainConfig& cfg);

/// Per-pixel argmax; the lowest class index wins ties.
template <typename T>
MaskImage fcn_predict(const FcnParams<T>& p, const Image<T>& image);

/// Directory of FT01 tensors (stored as f32) plus params.json.
template <typename T>
void save_fcn_params(const FcnParams<T>& p, const std::filesystem::path& dir);

template <typename T>
FcnParams<T> load_fcn_params(const std::filesystem::path& dir);

}  // namespace featseg
