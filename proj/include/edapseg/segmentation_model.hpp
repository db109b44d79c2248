#pragma once

// Small convolutional encoder-decoder with attention blocks on the decoder
// features, plus the self-training helpers that operate on its outputs:
// teacher averaging, thresholded pseudo-labels, class-mix augmentation and
// rare-class image sampling.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edapseg/autodiff.hpp"
#include "edapseg/euler_margin_attention.hpp"
#include "edapseg/rng.hpp"
#include "edapseg/synthetic_benchmark.hpp"

namespace edapseg::seg {

struct ModelConfig {
  int num_base = 5;
  std::array<int, 4> encoder_channels{16, 32, 64, 64};
  int dim = 32;
  int attention_blocks = 2;
  ema::AttentionConfig attention{};  // dim is overwritten with `dim`

  int num_outputs() const { return num_base + 1; }
  void validate() const;
};

struct Conv {
  ad::Var w;  // [O, C, K, K]
  ad::Var b;  // [O]
};

/// Batched images [B, 3, H, W] from interleaved RGB tensors of equal size.
ad::Var images_to_tensor(std::span<const bench::ImageTensor> images);

class SegModel {
 public:
  SegModel() = default;
  SegModel(const ModelConfig& cfg, Rng& init);

  struct Output {
    ad::Var features;  // [B*N x d] decoder tokens after the attention blocks
    ad::Var logits;    // [B, C, H/4, W/4]
    int batch = 0;
    int height = 0;  // of the feature grid
    int width = 0;
  };

  /// Decoder tokens at 1/4 input resolution, [B*(H/4)*(W/4) x d].
  ad::Var encode_decode(const ad::Var& images) const;
  /// Per-token linear head reshaped to [B, C, h, w].
  ad::Var classify(const ad::Var& tokens, int batch, int height, int width) const;
  Output forward(const ad::Var& images) const;
  /// Logits upsampled to the input resolution.
  static ad::Var full_resolution(const ad::Var& logits);

  const ModelConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, ad::Var>> named_parameters() const;
  std::size_t parameter_count() const;
  /// Independent copy with identical values.
  SegModel clone() const;
  /// Marks every parameter (including unnamed modulation scalars) as
  /// trainable or frozen.
  void set_requires_grad(bool on);

  std::array<Conv, 4> encoder;
  std::array<Conv, 3> lateral;  // 1x1 convs from encoder stages 2..4
  Conv fuse;
  std::vector<ema::EulerMarginAttention> blocks;
  ad::Var head_w;  // [d x C]
  ad::Var head_b;  // [C]

 private:
  ModelConfig cfg_;
};

/// teacher <- alpha * teacher + (1 - alpha) * student for every parameter.
void teacher_update(SegModel& teacher, const SegModel& student, double alpha);

struct PseudoLabel {
  int height = 0;
  int width = 0;
  std::vector<int> labels;  // base id, unknown id or ignore id per pixel
  double weight = 0.0;      // confident fraction of non-ignore pixels
};

struct BorderRows {
  int top = 0;
  int bottom = 0;
};

/// Rows masked to ignore at the top and bottom of an h-row pseudo-label.
BorderRows border_rows(int height);

/// Per-image pseudo-labels from logits [B, C, H, W]: the best base class if
/// its probability reaches `threshold`, otherwise the unknown id.
std::vector<PseudoLabel> pseudo_label(const ad::Var& logits, int num_base, double threshold,
                                      int ignore_id = bench::kIgnoreId);

struct MixResult {
  bench::ImageTensor image;
  std::vector<int> labels;
  std::vector<std::uint8_t> mask;  // 1 where the pixel comes from the source
  std::vector<int> classes;        // source classes pasted
};

MixResult dacs_mix(const bench::ImageTensor& src_image, const bench::LabelMap& src_label,
                   const bench::ImageTensor& tgt_image, std::span<const int> tgt_labels,
                   int ignore_id, Rng& rng);
MixResult dacs_mix(const bench::ImageTensor& src_image, const bench::LabelMap& src_label,
                   const bench::ImageTensor& tgt_image, std::span<const int> tgt_labels,
                   int ignore_id, std::uint64_t seed);

struct RareClassSampling {
  std::vector<double> class_prob;    // softmax of negated class frequencies
  std::vector<double> image_weight;  // max class_prob over the image's present classes
};

/// `pixels[i][c]` counts pixels of class c in image i. Classes with at least
/// `min_pixels` pixels in an image count as present there.
RareClassSampling rare_class_sample(const std::vector<std::vector<long>>& pixels,
                                    double temperature, long min_pixels);

/// Minimum per-image class pixels after scaling 3000 at 512x512 to the crop area.
long scaled_min_pixels(int crop_h, int crop_w, long full_scale = 3000);

/// Draws an index with probability proportional to `weights`.
int weighted_index(std::span<const double> weights, Rng& rng);

}  // namespace edapseg::seg
