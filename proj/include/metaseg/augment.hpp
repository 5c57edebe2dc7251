#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "metaseg/dataset.hpp"
#include "metaseg/errors.hpp"
#include "metaseg/rng.hpp"

namespace metaseg {

struct AugmentConfig {
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  double brightness = 0.2;
  double contrast = 0.2;
  double hue = 0.1;
  double saturation = 0.1;
  double flip_prob = 0.5;
  double rotation_degrees = 15.0;
  std::int64_t crop_h = 768;
  std::int64_t crop_w = 768;

  void validate() const {
    if (scale_lo > scale_hi) throw ConfigError("augment: scale_lo > scale_hi");
    if (scale_lo <= 0) throw ConfigError("augment: scale must be positive");
    if (crop_h < 1 || crop_w < 1) throw ConfigError("augment: crop dims must be >= 1");
    if (flip_prob < 0 || flip_prob > 1) throw ConfigError("augment: flip_prob outside [0,1]");
    if (brightness < 0 || contrast < 0 || hue < 0 || saturation < 0 || rotation_degrees < 0)
      throw ConfigError("augment: jitter magnitudes must be nonnegative");
  }

  // No-op pipeline: useful as a control and for exactness tests.
  static AugmentConfig identity(std::int64_t h, std::int64_t w) {
    AugmentConfig c;
    c.scale_lo = c.scale_hi = 1.0;
    c.brightness = c.contrast = c.hue = c.saturation = 0.0;
    c.flip_prob = 0.0;
    c.rotation_degrees = 0.0;
    c.crop_h = h;
    c.crop_w = w;
    return c;
  }
};

// One draw of every stochastic knob, in a fixed draw order so streams are
// reproducible regardless of which stages end up active.
struct JitterParams {
  double scale = 1.0;
  double brightness = 1.0;
  double contrast = 1.0;
  double hue_shift = 0.0;
  double saturation = 1.0;
  bool flip_h = false;
  bool flip_v = false;
  double angle_deg = 0.0;
  double crop_u = 0.0;  // column offset, mapped to the valid range at apply time
  double crop_v = 0.0;  // row offset

  bool operator==(const JitterParams&) const = default;
};

inline JitterParams jitter_params(const AugmentConfig& cfg, Rng& rng) {
  JitterParams p;
  p.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  p.brightness = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
  p.contrast = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
  p.hue_shift = rng.uniform(-cfg.hue, cfg.hue);
  p.saturation = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);
  p.flip_h = rng.bernoulli(cfg.flip_prob);
  p.flip_v = rng.bernoulli(cfg.flip_prob);
  p.angle_deg = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees);
  p.crop_u = rng.uniform01();
  p.crop_v = rng.uniform01();
  return p;
}

namespace detail {

// Symmetric reflection with edge duplication: -1 -> 0, n -> n-1.
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

template <typename Real>
Real bilinear_at(const Tensor<Real>& img, std::int64_t c, double sy, double sx) {
  const std::int64_t h = img.dim(1), w = img.dim(2);
  const double fy = std::floor(sy), fx = std::floor(sx);
  const std::int64_t y0 = reflect_index(static_cast<std::int64_t>(fy), h);
  const std::int64_t y1 = reflect_index(static_cast<std::int64_t>(fy) + 1, h);
  const std::int64_t x0 = reflect_index(static_cast<std::int64_t>(fx), w);
  const std::int64_t x1 = reflect_index(static_cast<std::int64_t>(fx) + 1, w);
  const Real wy = static_cast<Real>(sy - fy), wx = static_cast<Real>(sx - fx);
  const Real* plane = img.data.data() + c * h * w;
  const Real top = plane[y0 * w + x0] * (Real(1) - wx) + plane[y0 * w + x1] * wx;
  const Real bot = plane[y1 * w + x0] * (Real(1) - wx) + plane[y1 * w + x1] * wx;
  return top * (Real(1) - wy) + bot * wy;
}

inline std::int32_t nearest_mask_at(const IntMask& mask, double sy, double sx) {
  const std::int64_t h = mask.dim(0), w = mask.dim(1);
  const std::int64_t y = reflect_index(static_cast<std::int64_t>(std::llround(sy)), h);
  const std::int64_t x = reflect_index(static_cast<std::int64_t>(std::llround(sx)), w);
  return mask.data[static_cast<std::size_t>(y * w + x)];
}

// Shared geometric resampling: bilinear for the image, nearest for the mask,
// identical source mapping for both.
template <typename Real, typename MapFn>
Sample<Real> resample(const Sample<Real>& s, std::int64_t out_h, std::int64_t out_w, MapFn&& src_of) {
  Sample<Real> out;
  out.source_id = s.source_id;
  const std::int64_t c = s.channels();
  out.image = Tensor<Real>({c, out_h, out_w});
  out.mask = IntMask({out_h, out_w});
  for (std::int64_t y = 0; y < out_h; ++y) {
    for (std::int64_t x = 0; x < out_w; ++x) {
      const auto [sy, sx] = src_of(y, x);
      for (std::int64_t ch = 0; ch < c; ++ch)
        out.image.data[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] = bilinear_at(s.image, ch, sy, sx);
      out.mask.data[static_cast<std::size_t>(y * out_w + x)] = nearest_mask_at(s.mask, sy, sx);
    }
  }
  return out;
}

template <typename Real>
Sample<Real> scale_sample(const Sample<Real>& s, double factor) {
  const std::int64_t h = s.height(), w = s.width();
  const std::int64_t out_h = std::max<std::int64_t>(1, std::llround(static_cast<double>(h) * factor));
  const std::int64_t out_w = std::max<std::int64_t>(1, std::llround(static_cast<double>(w) * factor));
  if (out_h == h && out_w == w) return s;
  const double ry = static_cast<double>(h) / static_cast<double>(out_h);
  const double rx = static_cast<double>(w) / static_cast<double>(out_w);
  return resample(s, out_h, out_w, [&](std::int64_t y, std::int64_t x) {
    return std::pair{(static_cast<double>(y) + 0.5) * ry - 0.5, (static_cast<double>(x) + 0.5) * rx - 0.5};
  });
}

template <typename Real>
Sample<Real> rotate_sample(const Sample<Real>& s, double angle_deg) {
  const std::int64_t h = s.height(), w = s.width();
  const double rad = angle_deg * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = static_cast<double>(h - 1) / 2.0, cx = static_cast<double>(w - 1) / 2.0;
  // Inverse mapping: sample the source at the un-rotated position.
  return resample(s, h, w, [&](std::int64_t y, std::int64_t x) {
    const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
    return std::pair{cs * dy - sn * dx + cy, sn * dy + cs * dx + cx};
  });
}

template <typename Real>
Sample<Real> flip_h_sample(const Sample<Real>& s) {
  Sample<Real> out = s;
  const std::int64_t c = s.channels(), h = s.height(), w = s.width();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out.image.data[static_cast<std::size_t>((ch * h + y) * w + x)] =
            s.image.data[static_cast<std::size_t>((ch * h + y) * w + (w - 1 - x))];
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      out.mask.data[static_cast<std::size_t>(y * w + x)] = s.mask.data[static_cast<std::size_t>(y * w + (w - 1 - x))];
  return out;
}

template <typename Real>
Sample<Real> flip_v_sample(const Sample<Real>& s) {
  Sample<Real> out = s;
  const std::int64_t c = s.channels(), h = s.height(), w = s.width();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      std::copy_n(s.image.data.data() + (ch * h + (h - 1 - y)) * w, w,
                  out.image.data.data() + (ch * h + y) * w);
  for (std::int64_t y = 0; y < h; ++y)
    std::copy_n(s.mask.data.data() + (h - 1 - y) * w, w, out.mask.data.data() + y * w);
  return out;
}

// Crop with reflection padding for out-of-range coordinates; exact copies,
// no interpolation.
template <typename Real>
Sample<Real> crop_sample(const Sample<Real>& s, std::int64_t top, std::int64_t left, std::int64_t out_h,
                         std::int64_t out_w) {
  const std::int64_t c = s.channels(), h = s.height(), w = s.width();
  Sample<Real> out;
  out.source_id = s.source_id;
  out.image = Tensor<Real>({c, out_h, out_w});
  out.mask = IntMask({out_h, out_w});
  for (std::int64_t y = 0; y < out_h; ++y) {
    const std::int64_t sy = reflect_index(top + y, h);
    for (std::int64_t x = 0; x < out_w; ++x) {
      const std::int64_t sx = reflect_index(left + x, w);
      for (std::int64_t ch = 0; ch < c; ++ch)
        out.image.data[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] =
            s.image.data[static_cast<std::size_t>((ch * h + sy) * w + sx)];
      out.mask.data[static_cast<std::size_t>(y * out_w + x)] = s.mask.data[static_cast<std::size_t>(sy * w + sx)];
    }
  }
  return out;
}

template <typename Real>
void rgb_to_hsv(Real r, Real g, Real b, double& h, double& s, double& v) {
  const double rd = r, gd = g, bd = b;
  const double maxc = std::max({rd, gd, bd});
  const double minc = std::min({rd, gd, bd});
  v = maxc;
  const double delta = maxc - minc;
  s = maxc <= 0.0 ? 0.0 : delta / maxc;
  if (delta <= 0.0) {
    h = 0.0;
    return;
  }
  if (maxc == rd)
    h = (gd - bd) / delta;
  else if (maxc == gd)
    h = 2.0 + (bd - rd) / delta;
  else
    h = 4.0 + (rd - gd) / delta;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

template <typename Real>
void hsv_to_rgb(double h, double s, double v, Real& r, Real& g, Real& b) {
  if (s <= 0.0) {
    r = g = b = static_cast<Real>(v);
    return;
  }
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = std::min(5, static_cast<int>(hh));
  const double f = hh - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  double rd = 0, gd = 0, bd = 0;
  switch (sector) {
    case 0: rd = v; gd = t; bd = p; break;
    case 1: rd = q; gd = v; bd = p; break;
    case 2: rd = p; gd = v; bd = t; break;
    case 3: rd = p; gd = q; bd = v; break;
    case 4: rd = t; gd = p; bd = v; break;
    default: rd = v; gd = p; bd = q; break;
  }
  r = static_cast<Real>(rd);
  g = static_cast<Real>(gd);
  b = static_cast<Real>(bd);
}

template <typename Real>
void clamp01(Tensor<Real>& img) {
  for (auto& v : img.data) v = std::clamp(v, Real(0), Real(1));
}

// Color jitter on the image only. Stages whose drawn parameter is exactly
// the identity are skipped so a zero-magnitude config is bitwise exact.
template <typename Real>
void color_jitter(Tensor<Real>& img, const JitterParams& p) {
  if (p.brightness != 1.0) {
    for (auto& v : img.data) v = static_cast<Real>(v * p.brightness);
    clamp01(img);
  }
  if (p.contrast != 1.0) {
    double mean = 0;
    for (const auto v : img.data) mean += static_cast<double>(v);
    mean /= static_cast<double>(img.data.size());
    for (auto& v : img.data) v = static_cast<Real>(mean + p.contrast * (static_cast<double>(v) - mean));
    clamp01(img);
  }
  if ((p.hue_shift != 0.0 || p.saturation != 1.0) && img.dim(0) == 3) {
    const std::int64_t plane = img.dim(1) * img.dim(2);
    for (std::int64_t px = 0; px < plane; ++px) {
      double h, s, v;
      rgb_to_hsv(img.data[static_cast<std::size_t>(px)], img.data[static_cast<std::size_t>(plane + px)],
                 img.data[static_cast<std::size_t>(2 * plane + px)], h, s, v);
      h += p.hue_shift;
      h -= std::floor(h);
      s = std::clamp(s * p.saturation, 0.0, 1.0);
      hsv_to_rgb(h, s, v, img.data[static_cast<std::size_t>(px)], img.data[static_cast<std::size_t>(plane + px)],
                 img.data[static_cast<std::size_t>(2 * plane + px)]);
    }
    clamp01(img);
  }
}

}  // namespace detail

// Applies a fixed parameter draw: scale, color jitter, horizontal flip,
// vertical flip, rotation, crop. Mask geometry follows the image exactly
// (nearest-neighbor, reflection padding), so no new labels can appear.
template <typename Real>
Sample<Real> apply_jitter(const Sample<Real>& sample, const AugmentConfig& cfg, const JitterParams& p) {
  cfg.validate();
  if (sample.height() < 2 || sample.width() < 2)
    throw ShapeError("augment: sample must be at least 2x2, got " + std::to_string(sample.height()) + "x" +
                     std::to_string(sample.width()));

  Sample<Real> cur = p.scale != 1.0 ? detail::scale_sample(sample, p.scale) : sample;
  detail::color_jitter(cur.image, p);
  if (p.flip_h) cur = detail::flip_h_sample(cur);
  if (p.flip_v) cur = detail::flip_v_sample(cur);
  if (p.angle_deg != 0.0) cur = detail::rotate_sample(cur, p.angle_deg);

  const std::int64_t h = cur.height(), w = cur.width();
  auto offset = [](std::int64_t extent, std::int64_t target, double u) {
    const std::int64_t range = extent - target;
    if (range >= 0) return std::min(range, static_cast<std::int64_t>(std::floor(u * static_cast<double>(range + 1))));
    return range / 2;  // centered, reflection fills the borders
  };
  const std::int64_t top = offset(h, cfg.crop_h, p.crop_v);
  const std::int64_t left = offset(w, cfg.crop_w, p.crop_u);
  if (top == 0 && left == 0 && h == cfg.crop_h && w == cfg.crop_w) return cur;
  return detail::crop_sample(cur, top, left, cfg.crop_h, cfg.crop_w);
}

template <typename Real>
Sample<Real> augment(const Sample<Real>& sample, const AugmentConfig& cfg, Rng& rng) {
  const JitterParams p = jitter_params(cfg, rng);
  return apply_jitter(sample, cfg, p);
}

}  // namespace metaseg
