#include "pat/stage.hpp"

#include <cmath>
#include <sstream>

#include "pat/errors.hpp"

namespace pat {

int64_t square_side(int64_t n) {
  auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side <= 0 || side * side != n) {
    throw ShapeError("token count " + std::to_string(n) + " is not a square grid");
  }
  return side;
}

int64_t StageShape::grid_h() const { return layout == Layout::kSpatial ? dims[1] : square_side(dims[0]); }
int64_t StageShape::grid_w() const { return layout == Layout::kSpatial ? dims[2] : square_side(dims[0]); }

int64_t StageShape::numel() const {
  int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<int64_t> StageShape::with_batch(int64_t batch) const {
  std::vector<int64_t> out{batch};
  out.insert(out.end(), dims.begin(), dims.end());
  return out;
}

std::string StageShape::str() const {
  std::ostringstream os;
  os << (layout == Layout::kSpatial ? "spatial(" : "tokens(");
  for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ")";
  return os.str();
}

StageShape StageFeature::shape() const {
  auto sizes = data.sizes();
  if (layout == Layout::kSpatial) {
    if (sizes.size() != 4) throw ShapeError("spatial stage feature must be 4-d");
    return StageShape::spatial(sizes[1], sizes[2], sizes[3]);
  }
  if (sizes.size() != 3) throw ShapeError("token stage feature must be 3-d");
  return StageShape::tokens(sizes[1], sizes[2]);
}

torch::Tensor to_spatial(const torch::Tensor& data, Layout layout) {
  if (layout == Layout::kSpatial) return data;
  auto side = square_side(data.size(1));
  return data.transpose(1, 2).reshape({data.size(0), data.size(2), side, side});
}

torch::Tensor from_spatial(const torch::Tensor& spatial, Layout layout) {
  if (layout == Layout::kSpatial) return spatial;
  return spatial.flatten(2).transpose(1, 2);
}

}  // namespace pat
