#include "featseg/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <string>

#include <json.hpp>

#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"
#include "featseg/parallel.hpp"
#include "featseg/rng.hpp"
#include "featseg/tensor.hpp"

namespace featseg {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kMinSide = 5;
constexpr std::size_t kIn = FcnParams<float>::kIn;
constexpr std::size_t kC1 = FcnParams<float>::kC1;
constexpr std::size_t kC2 = FcnParams<float>::kC2;

// 3x3 convolution with the given dilation and "same" padding (pad equals
// dilation). Planes are H x W, channel-major.
template <typename T>
void conv3x3_forward(const T* in, std::size_t cin, const T* weights,
                     const T* bias, std::size_t cout, std::size_t h,
                     std::size_t w, std::ptrdiff_t dilation, T* out) {
  const std::size_t hw = h * w;
  for (std::size_t o = 0; o < cout; ++o) {
    std::fill(out + o * hw, out + (o + 1) * hw, bias[o]);
  }
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t o = 0; o < cout; ++o) {
    T* dst_plane = out + o * hw;
    for (std::size_t i = 0; i < cin; ++i) {
      const T* src_plane = in + i * hw;
      for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
        const std::ptrdiff_t dy = (ky - 1) * dilation;
        const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
        const std::ptrdiff_t y1 = std::min(H, H - dy);
        for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
          const std::ptrdiff_t dx = (kx - 1) * dilation;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
          const std::ptrdiff_t x1 = std::min(W, W - dx);
          const T wv = weights[((o * cin + i) * 3 + ky) * 3 + kx];
          for (std::ptrdiff_t y = y0; y < y1; ++y) {
            T* dst = dst_plane + y * W;
            const T* src = src_plane + (y + dy) * W + dx;
            for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x] += wv * src[x];
          }
        }
      }
    }
  }
}

// Accumulates weight and bias gradients, and the input gradient when
// `din` is non-null. `scratch` needs w entries.
template <typename T>
void conv3x3_backward(const T* in, std::size_t cin, const T* weights,
                      std::size_t cout, std::size_t h, std::size_t w,
                      std::ptrdiff_t dilation, const T* dout, T* dweights,
                      T* dbias, T* din, T* scratch) {
  const std::size_t hw = h * w;
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t o = 0; o < cout; ++o) {
    const T* g_plane = dout + o * hw;
    T sum = 0;
    for (std::size_t p = 0; p < hw; ++p) sum += g_plane[p];
    dbias[o] += sum;
    for (std::size_t i = 0; i < cin; ++i) {
      const T* src_plane = in + i * hw;
      T* din_plane = din ? din + i * hw : nullptr;
      for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
        const std::ptrdiff_t dy = (ky - 1) * dilation;
        const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
        const std::ptrdiff_t y1 = std::min(H, H - dy);
        for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
          const std::ptrdiff_t dx = (kx - 1) * dilation;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
          const std::ptrdiff_t x1 = std::min(W, W - dx);
          const std::size_t widx = ((o * cin + i) * 3 + ky) * 3 + kx;
          const T wv = weights[widx];
          // Row-wise partial products keep the inner loops element-wise.
          std::fill(scratch, scratch + w, T{0});
          for (std::ptrdiff_t y = y0; y < y1; ++y) {
            const T* g = g_plane + y * W;
            const T* src = src_plane + (y + dy) * W + dx;
            for (std::ptrdiff_t x = x0; x < x1; ++x) scratch[x] += g[x] * src[x];
            if (din_plane) {
              T* dst = din_plane + (y + dy) * W + dx;
              for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x] += wv * g[x];
            }
          }
          T acc = 0;
          for (std::size_t x = 0; x < w; ++x) acc += scratch[x];
          dweights[widx] += acc;
        }
      }
    }
  }
}

template <typename T>
struct Activations {
  std::size_t h = 0, w = 0;
  std::vector<T> x;   // kIn x HW
  std::vector<T> a1;  // kC1 x HW (post-ReLU)
  std::vector<T> a2;  // kC2 x HW (post-ReLU)
  std::vector<T> logits;
};

template <typename T>
void check_image(const Image<T>& image) {
  if (image.height < kMinSide || image.width < kMinSide) {
    throw ValidationError("fcn: image must be at least 5x5, got " +
                          std::to_string(image.height) + "x" +
                          std::to_string(image.width));
  }
  if (image.data.size() != image.height * image.width * kIn) {
    throw ValidationError("fcn: image buffer does not match H x W x 3");
  }
  for (const T v : image.data) {
    if (!std::isfinite(v)) throw ValidationError("fcn: non-finite input pixel");
  }
}

template <typename T>
void check_params(const FcnParams<T>& p) {
  const std::size_t c = p.n_classes;
  if (c < 2 || p.w1.size() != kC1 * kIn * 9 || p.b1.size() != kC1 ||
      p.w2.size() != kC2 * kC1 * 9 || p.b2.size() != kC2 ||
      p.w3.size() != c * kC2 || p.b3.size() != c) {
    throw ValidationError("fcn: parameter shapes do not match n_classes");
  }
}

template <typename T>
Activations<T> forward(const FcnParams<T>& p, const Image<T>& image) {
  Activations<T> act;
  const std::size_t h = image.height, w = image.width, hw = h * w;
  act.h = h;
  act.w = w;
  act.x.resize(kIn * hw);
  for (std::size_t q = 0; q < hw; ++q) {
    for (std::size_t c = 0; c < kIn; ++c) act.x[c * hw + q] = image.data[q * kIn + c];
  }
  act.a1.resize(kC1 * hw);
  conv3x3_forward(act.x.data(), kIn, p.w1.data(), p.b1.data(), kC1, h, w, 1,
                  act.a1.data());
  for (T& v : act.a1) v = v > T{0} ? v : T{0};
  act.a2.resize(kC2 * hw);
  conv3x3_forward(act.a1.data(), kC1, p.w2.data(), p.b2.data(), kC2, h, w, 2,
                  act.a2.data());
  for (T& v : act.a2) v = v > T{0} ? v : T{0};
  const std::size_t nc = p.n_classes;
  act.logits.resize(nc * hw);
  for (std::size_t c = 0; c < nc; ++c) {
    T* out = act.logits.data() + c * hw;
    std::fill(out, out + hw, p.b3[c]);
    for (std::size_t k = 0; k < kC2; ++k) {
      const T wv = p.w3[c * kC2 + k];
      const T* src = act.a2.data() + k * hw;
      for (std::size_t q = 0; q < hw; ++q) out[q] += wv * src[q];
    }
  }
  return act;
}

// Loss summed over non-ignore pixels; gradient (unnormalized) accumulated
// into `grad`.
template <typename T>
T sample_loss_and_grad(const FcnParams<T>& p, const TrainExample<T>& ex,
                       std::size_t& pixels, FcnParams<T>& grad) {
  const Activations<T> act = forward(p, ex.image);
  const std::size_t h = act.h, w = act.w, hw = h * w;
  const std::size_t nc = p.n_classes;

  std::vector<T> dlogits(nc * hw, T{0});
  T loss = 0;
  pixels = 0;
  for (std::size_t q = 0; q < hw; ++q) {
    const std::uint8_t label = ex.mask.labels[q];
    if (label == MaskImage::kIgnore) continue;
    ++pixels;
    T m = act.logits[q];
    for (std::size_t c = 1; c < nc; ++c) m = std::max(m, act.logits[c * hw + q]);
    T z = 0;
    for (std::size_t c = 0; c < nc; ++c) z += std::exp(act.logits[c * hw + q] - m);
    loss += m + std::log(z) - act.logits[label * hw + q];
    for (std::size_t c = 0; c < nc; ++c) {
      dlogits[c * hw + q] = std::exp(act.logits[c * hw + q] - m) / z;
    }
    dlogits[label * hw + q] -= T{1};
  }

  // conv3 (1x1)
  std::vector<T> da2(kC2 * hw, T{0});
  for (std::size_t c = 0; c < nc; ++c) {
    const T* g = dlogits.data() + c * hw;
    T bsum = 0;
    for (std::size_t q = 0; q < hw; ++q) bsum += g[q];
    grad.b3[c] += bsum;
    for (std::size_t k = 0; k < kC2; ++k) {
      const T* a = act.a2.data() + k * hw;
      T* da = da2.data() + k * hw;
      const T wv = p.w3[c * kC2 + k];
      T acc = 0;
      for (std::size_t q = 0; q < hw; ++q) {
        acc += g[q] * a[q];
        da[q] += wv * g[q];
      }
      grad.w3[c * kC2 + k] += acc;
    }
  }
  for (std::size_t i = 0; i < da2.size(); ++i) {
    if (!(act.a2[i] > T{0})) da2[i] = T{0};
  }

  std::vector<T> scratch(w);
  std::vector<T> da1(kC1 * hw, T{0});
  conv3x3_backward(act.a1.data(), kC1, p.w2.data(), kC2, h, w, 2, da2.data(),
                   grad.w2.data(), grad.b2.data(), da1.data(), scratch.data());
  for (std::size_t i = 0; i < da1.size(); ++i) {
    if (!(act.a1[i] > T{0})) da1[i] = T{0};
  }
  conv3x3_backward(act.x.data(), kIn, p.w1.data(), kC1, h, w, 1, da1.data(),
                   grad.w1.data(), grad.b1.data(), static_cast<T*>(nullptr),
                   scratch.data());
  return loss;
}

template <typename T>
void check_example(const TrainExample<T>& ex, std::size_t n_classes) {
  check_image(ex.image);
  if (ex.mask.width != ex.image.width || ex.mask.height != ex.image.height) {
    throw ValidationError("fcn: mask dimensions differ from the image");
  }
  validate_mask(ex.mask, static_cast<int>(n_classes));
}

}  // namespace

template <typename T>
FcnParams<T> FcnParams<T>::zeros(std::size_t n_classes) {
  FcnParams p;
  p.n_classes = n_classes;
  p.w1.assign(kC1 * kIn * 9, T{0});
  p.b1.assign(kC1, T{0});
  p.w2.assign(kC2 * kC1 * 9, T{0});
  p.b2.assign(kC2, T{0});
  p.w3.assign(n_classes * kC2, T{0});
  p.b3.assign(n_classes, T{0});
  return p;
}

template <typename T>
std::array<std::span<T>, FcnParams<T>::kTensors> FcnParams<T>::tensors() {
  return {std::span<T>(w1), std::span<T>(b1), std::span<T>(w2),
          std::span<T>(b2), std::span<T>(w3), std::span<T>(b3)};
}

template <typename T>
std::array<std::span<const T>, FcnParams<T>::kTensors> FcnParams<T>::tensors()
    const {
  return {std::span<const T>(w1), std::span<const T>(b1),
          std::span<const T>(w2), std::span<const T>(b2),
          std::span<const T>(w3), std::span<const T>(b3)};
}

template <typename T>
Image<T> to_image(const RgbImage& rgb) {
  Image<T> img;
  img.height = rgb.height;
  img.width = rgb.width;
  img.data.resize(rgb.pixels.size());
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) {
    img.data[i] = static_cast<T>(rgb.pixels[i]) / T{255};
  }
  return img;
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ValidationError("train: batch_size must be > 0");
  if (!(cfg.lr >= 0.0) || !(cfg.lr < 10.0)) {
    throw ValidationError("train: lr must be in [0, 10)");
  }
  if (!(cfg.momentum >= 0.0) || !(cfg.momentum < 1.0)) {
    throw ValidationError("train: momentum must be in [0, 1)");
  }
}

template <typename T>
FcnParams<T> fcn_init(std::size_t n_classes, std::uint64_t seed) {
  if (n_classes < 2) throw ValidationError("fcn_init: n_classes must be >= 2");
  if (n_classes > MaskImage::kIgnore) {
    throw ValidationError("fcn_init: n_classes must be <= 255");
  }
  FcnParams<T> p = FcnParams<T>::zeros(n_classes);
  SplitMix64 rng(seed);
  auto fill = [&](std::vector<T>& v, double fan_in) {
    const double std = std::sqrt(2.0 / fan_in);
    for (T& x : v) x = static_cast<T>(std * rng.gaussian());
  };
  fill(p.w1, kIn * 9.0);
  fill(p.w2, kC1 * 9.0);
  fill(p.w3, static_cast<double>(kC2));
  return p;
}

template <typename T>
Logits<T> fcn_forward(const FcnParams<T>& p, const Image<T>& image) {
  check_params(p);
  check_image(image);
  Activations<T> act = forward(p, image);
  return {image.height, image.width, p.n_classes, std::move(act.logits)};
}

template <typename T>
LossAndGrad<T> fcn_loss_and_grad(const FcnParams<T>& p,
                                 std::span<const TrainExample<T>> batch,
                                 unsigned threads) {
  check_params(p);
  if (batch.empty()) throw ValidationError("fcn: empty batch");
  for (const auto& ex : batch) check_example(ex, p.n_classes);

  std::vector<FcnParams<T>> grads(batch.size(), FcnParams<T>::zeros(p.n_classes));
  std::vector<T> losses(batch.size(), T{0});
  std::vector<std::size_t> counts(batch.size(), 0);
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    losses[i] = sample_loss_and_grad(p, batch[i], counts[i], grads[i]);
  });

  LossAndGrad<T> out;
  out.grad = FcnParams<T>::zeros(p.n_classes);
  T loss_sum = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    loss_sum += losses[i];
    out.pixels += counts[i];
    auto dst = out.grad.tensors();
    const auto src = std::as_const(grads[i]).tensors();
    for (std::size_t t = 0; t < dst.size(); ++t) {
      for (std::size_t j = 0; j < dst[t].size(); ++j) dst[t][j] += src[t][j];
    }
  }
  if (out.pixels == 0) {
    throw ValidationError("fcn: batch has zero non-ignore pixels");
  }
  const T inv = T{1} / static_cast<T>(out.pixels);
  out.loss = loss_sum * inv;
  for (auto t : out.grad.tensors()) {
    for (T& g : t) g *= inv;
  }
  return out;
}

template <typename T>
StepResult<T> fcn_train_step(const FcnParams<T>& p,
                             const FcnParams<T>& velocity,
                             std::span<const TrainExample<T>> batch, T lr,
                             T momentum, unsigned threads) {
  if (velocity.n_classes != p.n_classes ||
      velocity.w1.size() != p.w1.size() || velocity.w3.size() != p.w3.size()) {
    throw ValidationError("fcn: velocity shape does not match parameters");
  }
  const LossAndGrad<T> lg = fcn_loss_and_grad(p, batch, threads);
  StepResult<T> out{p, velocity, lg.loss, lg.pixels};
  auto params = out.params.tensors();
  auto vel = out.velocity.tensors();
  const auto grad = lg.grad.tensors();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t j = 0; j < params[t].size(); ++j) {
      vel[t][j] = momentum * vel[t][j] - lr * grad[t][j];
      params[t][j] += vel[t][j];
    }
  }
  return out;
}

template <typename T>
TrainResult<T> fcn_train(std::span<const TrainExample<T>> data,
                         std::size_t n_classes, const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (data.empty()) throw ValidationError("train: empty training set");
  for (const auto& ex : data) {
    check_example(ex, n_classes);
    if (ex.image.height != data.front().image.height ||
        ex.image.width != data.front().image.width) {
      throw ValidationError("train: images have inconsistent dimensions");
    }
  }
  TrainResult<T> result{fcn_init<T>(n_classes, cfg.seed), {}};
  FcnParams<T> velocity = FcnParams<T>::zeros(n_classes);
  SplitMix64 rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(data.size());
  std::vector<TrainExample<T>> batch;
  const T lr = static_cast<T>(cfg.lr);
  const T momentum = static_cast<T>(cfg.momentum);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double loss_sum = 0.0;
    std::size_t pixel_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
      StepResult<T> step = fcn_train_step<T>(result.params, velocity, batch, lr,
                                             momentum, cfg.threads);
      result.params = std::move(step.params);
      velocity = std::move(step.velocity);
      loss_sum += static_cast<double>(step.loss) * static_cast<double>(step.pixels);
      pixel_sum += step.pixels;
    }
    result.loss_curve.push_back(loss_sum / static_cast<double>(pixel_sum));
  }
  return result;
}

template <typename T>
std::vector<TrainExample<T>> load_training_set(const DatasetManifest& manifest,
                                               std::size_t n_classes) {
  std::vector<TrainExample<T>> data;
  data.reserve(manifest.samples.size());
  for (const auto& s : manifest.samples) {
    if (!s.mask_path) {
      throw ValidationError("sample " + s.id + ": missing mask_path");
    }
    try {
      TrainExample<T> ex{to_image<T>(read_rgb_png(manifest.resolve(s.image_path))),
                         read_mask_png(manifest.resolve(*s.mask_path))};
      check_example(ex, n_classes);
      data.push_back(std::move(ex));
    } catch (const Error& e) {
      throw Error(e.kind(), "sample " + s.id + ": " + e.what());
    }
  }
  return data;
}

template <typename T>
TrainResult<T> fcn_train(const DatasetManifest& manifest,
                         std::size_t n_classes, const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (manifest.samples.empty()) throw ValidationError("train: empty manifest");
  const auto data = load_training_set<T>(manifest, n_classes);
  return fcn_train<T>(std::span<const TrainExample<T>>(data), n_classes, cfg);
}

template <typename T>
MaskImage fcn_predict(const FcnParams<T>& p, const Image<T>& image) {
  const Logits<T> logits = fcn_forward(p, image);
  const std::size_t hw = logits.height * logits.width;
  MaskImage mask(static_cast<std::uint32_t>(logits.width),
                 static_cast<std::uint32_t>(logits.height));
  for (std::size_t q = 0; q < hw; ++q) {
    std::size_t best = 0;
    T best_value = logits.data[q];
    for (std::size_t c = 1; c < logits.n_classes; ++c) {
      const T v = logits.data[c * hw + q];
      if (v > best_value) {
        best_value = v;
        best = c;
      }
    }
    mask.labels[q] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

namespace {

constexpr std::array<const char*, 6> kTensorNames = {
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b"};

std::array<std::vector<std::uint64_t>, 6> tensor_shapes(std::size_t nc) {
  return {{{kC1, kIn, 3, 3}, {kC1}, {kC2, kC1, 3, 3}, {kC2}, {nc, kC2, 1, 1}, {nc}}};
}

}  // namespace

template <typename T>
void save_fcn_params(const FcnParams<T>& p, const fs::path& dir) {
  check_params(p);
  const auto shapes = tensor_shapes(p.n_classes);
  const auto tensors = p.tensors();
  nlohmann::json shapes_doc = nlohmann::json::object();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    std::vector<float> values(tensors[t].begin(), tensors[t].end());
    write_tensor(FeatureTensor::from_f32(shapes[t], std::move(values)),
                 dir / (std::string(kTensorNames[t]) + ".ft"));
    shapes_doc[kTensorNames[t]] = shapes[t];
  }
  const nlohmann::json doc = {{"n_classes", p.n_classes},
                              {"architecture", "conv3x3-relu-conv3x3d2-relu-conv1x1"},
                              {"tensors", shapes_doc}};
  write_text_atomic(dir / "params.json", doc.dump(2) + "\n");
}

template <typename T>
FcnParams<T> load_fcn_params(const fs::path& dir) {
  const auto doc =
      nlohmann::json::parse(read_file_text(dir / "params.json"), nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    throw FormatError(FormatFault::bad_json, (dir / "params.json").string());
  }
  std::size_t nc = 0;
  try {
    nc = doc.at("n_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatFault::bad_field, std::string("params.json: ") + e.what());
  }
  if (nc < 2 || nc > MaskImage::kIgnore) {
    throw FormatError(FormatFault::bad_field, "params.json: n_classes out of range");
  }
  FcnParams<T> p = FcnParams<T>::zeros(nc);
  const auto shapes = tensor_shapes(nc);
  auto tensors = p.tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const FeatureTensor ft =
        read_tensor(dir / (std::string(kTensorNames[t]) + ".ft"));
    if (ft.dtype() != DType::f32 || ft.dims() != shapes[t]) {
      throw FormatError(FormatFault::bad_field,
                        std::string(kTensorNames[t]) + ".ft has the wrong shape");
    }
    const auto values = ft.f32();
    std::copy(values.begin(), values.end(), tensors[t].begin());
  }
  return p;
}

#define FEATSEG_INSTANTIATE(T)                                                  \
  template struct FcnParams<T>;                                                 \
  template Image<T> to_image<T>(const RgbImage&);                               \
  template FcnParams<T> fcn_init<T>(std::size_t, std::uint64_t);                \
  template Logits<T> fcn_forward<T>(const FcnParams<T>&, const Image<T>&);      \
  template LossAndGrad<T> fcn_loss_and_grad<T>(                                 \
      const FcnParams<T>&, std::span<const TrainExample<T>>, unsigned);         \
  template StepResult<T> fcn_train_step<T>(const FcnParams<T>&,                 \
                                           const FcnParams<T>&,                 \
                                           std::span<const TrainExample<T>>, T, \
                                           T, unsigned);                        \
  template TrainResult<T> fcn_train<T>(std::span<const TrainExample<T>>,        \
                                       std::size_t, const TrainConfig&);        \
  template std::vector<TrainExample<T>> load_training_set<T>(                   \
      const DatasetManifest&, std::size_t);                                     \
  template TrainResult<T> fcn_train<T>(const DatasetManifest&, std::size_t,     \
                                       const TrainConfig&);                     \
  template MaskImage fcn_predict<T>(const FcnParams<T>&, const Image<T>&);      \
  template void save_fcn_params<T>(const FcnParams<T>&, const fs::path&);       \
  template FcnParams<T> load_fcn_params<T>(const fs::path&);

FEATSEG_INSTANTIATE(float)
FEATSEG_INSTANTIATE(double)

#undef FEATSEG_INSTANTIATE

}  // namespace featseg
