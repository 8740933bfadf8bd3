#pragma once

// Normalized box geometry. Point-wise functions are templated on the scalar
// type; the Tensor overloads operate row-wise on [N, 4] tensors and are
// differentiable.

#include "dino/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

namespace dino {

/// Center/size box in normalized image coordinates.
template <typename Scalar>
struct BoxCxCyWh {
  Scalar cx{}, cy{}, w{}, h{};

  Eigen::Matrix<Scalar, 4, 1> vec() const { return {cx, cy, w, h}; }
  static BoxCxCyWh from_vec(const Eigen::Matrix<Scalar, 4, 1>& v) { return {v[0], v[1], v[2], v[3]}; }
  bool valid() const {
    return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) && std::isfinite(h) && w > 0 && h > 0;
  }
  bool operator==(const BoxCxCyWh&) const = default;
};

/// Corner box; x0 <= x1 and y0 <= y1.
template <typename Scalar>
struct BoxXyXy {
  Scalar x0{}, y0{}, x1{}, y1{};

  Eigen::Matrix<Scalar, 4, 1> vec() const { return {x0, y0, x1, y1}; }
  Scalar area() const { return std::max(Scalar(0), x1 - x0) * std::max(Scalar(0), y1 - y0); }
  bool operator==(const BoxXyXy&) const = default;
};

/// Offset in inverse-sigmoid space.
template <typename Scalar>
struct BoxDelta {
  Scalar dx{}, dy{}, dw{}, dh{};
};

using Box = BoxCxCyWh<double>;
using BoxCorners = BoxXyXy<double>;
using Delta = BoxDelta<double>;

template <typename Scalar>
BoxXyXy<Scalar> to_xyxy(const BoxCxCyWh<Scalar>& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

template <typename Scalar>
BoxCxCyWh<Scalar> to_cxcywh(const BoxXyXy<Scalar>& b) {
  return {(b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2, b.x1 - b.x0, b.y1 - b.y0};
}

/// Intersection over union; 0 for disjoint boxes and for any zero-area box.
template <typename Scalar>
Scalar iou(const BoxXyXy<Scalar>& a, const BoxXyXy<Scalar>& b) {
  const Scalar area_a = a.area(), area_b = b.area();
  if (area_a <= 0 || area_b <= 0) return Scalar(0);
  const BoxXyXy<Scalar> inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
                              std::min(a.y1, b.y1)};
  const Scalar i = inter.area();
  return i / (area_a + area_b - i);
}

/// Generalized IoU: IoU - (enclosing - union) / enclosing, in [-1, 1].
template <typename Scalar>
Scalar giou(const BoxXyXy<Scalar>& a, const BoxXyXy<Scalar>& b) {
  const BoxXyXy<Scalar> inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
                              std::min(a.y1, b.y1)};
  const BoxXyXy<Scalar> hull{std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1),
                             std::max(a.y1, b.y1)};
  const Scalar i = inter.area();
  const Scalar u = a.area() + b.area() - i;
  const Scalar e = hull.area();
  if (e <= 0) return Scalar(0);
  return iou(a, b) - (e - u) / e;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
Scalar inverse_sigmoid(Scalar p, Scalar eps = Scalar(1e-3)) {
  p = std::clamp(p, eps, Scalar(1) - eps);
  return std::log(p / (Scalar(1) - p));
}

/// sigmoid(inverse_sigmoid(coord) + delta) per coordinate.
template <typename Scalar>
BoxCxCyWh<Scalar> box_update(const BoxCxCyWh<Scalar>& b, const BoxDelta<Scalar>& d,
                             Scalar eps = Scalar(1e-3)) {
  return {sigmoid(inverse_sigmoid(b.cx, eps) + d.dx), sigmoid(inverse_sigmoid(b.cy, eps) + d.dy),
          sigmoid(inverse_sigmoid(b.w, eps) + d.dw), sigmoid(inverse_sigmoid(b.h, eps) + d.dh)};
}

template <typename Scalar>
Scalar l1_box_distance(const BoxCxCyWh<Scalar>& a, const BoxCxCyWh<Scalar>& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
}

// Conversions between box lists and [N, 4] matrices.
RowMatrix boxes_to_matrix(const std::vector<Box>& boxes);
std::vector<Box> matrix_to_boxes(const Eigen::Ref<const RowMatrix>& m);

// ---------------------------------------------------------------------------
// Row-wise tensor forms

/// Per-row sigmoid(inverse_sigmoid(boxes) + deltas); differentiable in both.
Tensor box_update(const Tensor& boxes, const Tensor& deltas, double eps = 1e-3);

/// Per-row GIoU of two [N, 4] cxcywh tensors, returned as [N].
Tensor paired_giou(const Tensor& a, const Tensor& b);

/// Per-row L1 distance of two [N, 4] tensors, returned as [N].
Tensor paired_l1(const Tensor& a, const Tensor& b);

}  // namespace dino
