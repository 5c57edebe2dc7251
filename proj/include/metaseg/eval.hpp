#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metaseg/dataset.hpp"
#include "metaseg/errors.hpp"
#include "metaseg/segnet.hpp"
#include "metaseg/tensor.hpp"

namespace metaseg {

// Per-class intersection/union pixel counts aggregated across every
// evaluated image. Mergeable: shards add counts.
struct ConfusionAccumulator {
  std::int32_t num_classes = 0;
  std::vector<std::int64_t> intersection;
  std::vector<std::int64_t> union_;

  explicit ConfusionAccumulator(std::int32_t k = 0)
      : num_classes(k), intersection(static_cast<std::size_t>(k), 0), union_(static_cast<std::size_t>(k), 0) {}

  void merge(const ConfusionAccumulator& other) {
    if (other.num_classes != num_classes) throw ContractError("merge: class count mismatch");
    for (std::size_t k = 0; k < intersection.size(); ++k) {
      intersection[k] += other.intersection[k];
      union_[k] += other.union_[k];
    }
  }
};

inline void accumulate(ConfusionAccumulator& acc, const IntMask& pred, const IntMask& truth) {
  require_same_shape(pred.shape, truth.shape, "accumulate");
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const std::int32_t p = pred.data[static_cast<std::size_t>(i)];
    const std::int32_t t = truth.data[static_cast<std::size_t>(i)];
    if (p < 0 || p >= acc.num_classes)
      throw LabelRangeError("accumulate: predicted class " + std::to_string(p) + " outside [0," +
                            std::to_string(acc.num_classes) + ")");
    if (t < 0 || t >= acc.num_classes)
      throw LabelRangeError("accumulate: truth class " + std::to_string(t) + " outside [0," +
                            std::to_string(acc.num_classes) + ")");
    if (p == t) {
      acc.intersection[static_cast<std::size_t>(p)] += 1;
      acc.union_[static_cast<std::size_t>(p)] += 1;
    } else {
      acc.union_[static_cast<std::size_t>(p)] += 1;
      acc.union_[static_cast<std::size_t>(t)] += 1;
    }
  }
}

// Mean over classes of dataset-aggregated IoU. Classes absent from both
// prediction and truth everywhere (zero union) are excluded from the mean.
inline double miou(const ConfusionAccumulator& acc) {
  double total = 0;
  std::int32_t present = 0;
  for (std::size_t k = 0; k < acc.union_.size(); ++k) {
    if (acc.union_[k] == 0) continue;
    total += static_cast<double>(acc.intersection[k]) / static_cast<double>(acc.union_[k]);
    ++present;
  }
  if (present == 0) throw EmptyEvalError("miou: every class union is zero");
  return total / static_cast<double>(present);
}

// Pixel argmax over the class dimension; ties break to the lower class id.
template <typename Real>
IntMask argmax_mask(const Tensor<Real>& logits) {
  if (logits.ndim() != 4) throw ShapeError("argmax_mask: logits must be 4-D, got " + shape_str(logits.shape));
  const std::int64_t B = logits.dim(0), K = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  IntMask out({B, logits.dim(2), logits.dim(3)});
  for (std::int64_t b = 0; b < B; ++b) {
    const Real* zb = logits.data.data() + b * K * plane;
    for (std::int64_t px = 0; px < plane; ++px) {
      std::int32_t best = 0;
      Real bv = zb[px];
      for (std::int64_t k = 1; k < K; ++k)
        if (zb[k * plane + px] > bv) {
          bv = zb[k * plane + px];
          best = static_cast<std::int32_t>(k);
        }
      out.data[static_cast<std::size_t>(b * plane + px)] = best;
    }
  }
  return out;
}

// Deterministic center crop to the largest size divisible by `multiple`.
template <typename Real>
Sample<Real> center_crop_to_multiple(const Sample<Real>& s, std::int64_t multiple) {
  const std::int64_t h = s.height(), w = s.width();
  const std::int64_t ch = (h / multiple) * multiple;
  const std::int64_t cw = (w / multiple) * multiple;
  if (ch < multiple || cw < multiple)
    throw ShapeError("center_crop: sample " + std::to_string(h) + "x" + std::to_string(w) +
                     " smaller than required multiple " + std::to_string(multiple));
  if (ch == h && cw == w) return s;
  const std::int64_t top = (h - ch) / 2, left = (w - cw) / 2;
  Sample<Real> out;
  out.source_id = s.source_id;
  out.image = Tensor<Real>({s.channels(), ch, cw});
  out.mask = IntMask({ch, cw});
  for (std::int64_t c = 0; c < s.channels(); ++c)
    for (std::int64_t y = 0; y < ch; ++y)
      std::copy_n(s.image.data.data() + (c * h + top + y) * w + left, cw,
                  out.image.data.data() + (c * ch + y) * cw);
  for (std::int64_t y = 0; y < ch; ++y)
    std::copy_n(s.mask.data.data() + (top + y) * w + left, cw, out.mask.data.data() + y * cw);
  return out;
}

// mIoU of a model head over a sample index list: center-crop (no stochastic
// augmentation), forward, argmax, accumulate, score.
template <typename Real>
double evaluate_task(const ParamSet<Real>& params, const TaskSource<Real>& task,
                     std::span<const std::int64_t> split) {
  if (!params.has_head(task.id)) throw RoutingError("evaluate_task: no head for '" + task.id + "'");
  if (split.empty()) throw ConfigError("evaluate_task: empty split for '" + task.id + "'");
  ConfusionAccumulator acc(task.num_classes);
  const std::int64_t mult = params.config.spatial_multiple();
  for (const auto idx : split) {
    const auto cropped = center_crop_to_multiple(task.samples.at(static_cast<std::size_t>(idx)), mult);
    Tensor<Real> batch({1, cropped.channels(), cropped.height(), cropped.width()});
    batch.data = cropped.image.data;
    const IntMask pred = argmax_mask(forward_logits(params, task.id, batch));
    IntMask pred2d({cropped.height(), cropped.width()});
    pred2d.data = pred.data;
    accumulate(acc, pred2d, cropped.mask);
  }
  return miou(acc);
}

}  // namespace metaseg
