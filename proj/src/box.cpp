#include "dino/box.hpp"

#include "dino/errors.hpp"

namespace dino {

RowMatrix boxes_to_matrix(const std::vector<Box>& boxes) {
  RowMatrix m(static_cast<Index>(boxes.size()), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i) m.row(static_cast<Index>(i)) = boxes[i].vec().transpose();
  return m;
}

std::vector<Box> matrix_to_boxes(const Eigen::Ref<const RowMatrix>& m) {
  if (m.cols() != 4) throw ShapeError("matrix_to_boxes: expected 4 columns, got " + std::to_string(m.cols()));
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) out.push_back({m(i, 0), m(i, 1), m(i, 2), m(i, 3)});
  return out;
}

namespace {

void require_box_rows(const char* op, const Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 4) {
    throw ShapeError(std::string(op) + ": expected [N, 4] boxes, got " + shape_to_string(t.shape()));
  }
}

struct CornerColumns {
  Tensor x0, y0, x1, y1;
};

CornerColumns corners(const Tensor& b) {
  const Tensor cx = slice(b, 1, 0, 1), cy = slice(b, 1, 1, 2);
  const Tensor hw = scale(slice(b, 1, 2, 3), 0.5), hh = scale(slice(b, 1, 3, 4), 0.5);
  return {cx - hw, cy - hh, cx + hw, cy + hh};
}

}  // namespace

Tensor box_update(const Tensor& boxes, const Tensor& deltas, double eps) {
  require_box_rows("box_update", boxes);
  require_box_rows("box_update", deltas);
  return sigmoid(add(inverse_sigmoid(boxes, eps), deltas));
}

Tensor paired_giou(const Tensor& a, const Tensor& b) {
  require_box_rows("paired_giou", a);
  require_box_rows("paired_giou", b);
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("paired_giou: row mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  const Index n = a.dim(0);
  const auto ca = corners(a), cb = corners(b);
  const Tensor area_a = slice(a, 1, 2, 3) * slice(a, 1, 3, 4);
  const Tensor area_b = slice(b, 1, 2, 3) * slice(b, 1, 3, 4);
  const Tensor iw = relu(minimum(ca.x1, cb.x1) - maximum(ca.x0, cb.x0));
  const Tensor ih = relu(minimum(ca.y1, cb.y1) - maximum(ca.y0, cb.y0));
  const Tensor inter = iw * ih;
  const Tensor uni = area_a + area_b - inter;
  const Tensor ew = maximum(ca.x1, cb.x1) - minimum(ca.x0, cb.x0);
  const Tensor eh = maximum(ca.y1, cb.y1) - minimum(ca.y0, cb.y0);
  const Tensor enclose = ew * eh;
  const Tensor g = inter / uni - (enclose - uni) / enclose;
  return reshape(g, {n});
}

Tensor paired_l1(const Tensor& a, const Tensor& b) {
  require_box_rows("paired_l1", a);
  require_box_rows("paired_l1", b);
  return sum(abs(a - b), 1);
}

}  // namespace dino
