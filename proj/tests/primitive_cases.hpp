#pragma once

// Finite-difference cases covering every differentiable primitive, shared by
// the unit tests and the acceptance run.

#include "dino/box.hpp"
#include "dino/matching.hpp"
#include "gradcheck.hpp"

namespace dino::testing {

struct PrimitiveCase {
  const char* name;
  std::vector<Shape> shapes;
  double lo, hi;
  ScalarFn fn;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  using V = const std::vector<Tensor>&;
  return {
      {"add", {{3, 4}, {3, 4}}, -3, 3, [](V in) { return probe(in[0] + in[1]); }},
      {"sub", {{3, 4}, {3, 4}}, -3, 3, [](V in) { return probe(in[0] - in[1]); }},
      {"mul", {{3, 4}, {3, 4}}, -3, 3, [](V in) { return probe(in[0] * in[1]); }},
      {"div", {{3, 4}, {3, 4}}, 0.5, 3, [](V in) { return probe(in[0] / in[1]); }},
      {"maximum", {{3, 4}, {3, 4}}, -3, 3, [](V in) { return probe(maximum(in[0], in[1])); }},
      {"minimum", {{3, 4}, {3, 4}}, -3, 3, [](V in) { return probe(minimum(in[0], in[1])); }},
      {"neg_scale_shift", {{3, 4}}, -3, 3, [](V in) { return probe(2.5 - (-in[0]) * 0.3); }},
      {"exp", {{3, 4}}, -3, 3, [](V in) { return probe(exp(in[0])); }},
      {"sin", {{3, 4}}, -3, 3, [](V in) { return probe(sin(in[0])); }},
      {"cos", {{3, 4}}, -3, 3, [](V in) { return probe(cos(in[0])); }},
      {"log", {{3, 4}}, 0.2, 3, [](V in) { return probe(log(in[0])); }},
      {"pow", {{3, 4}}, 0.2, 3, [](V in) { return probe(pow(in[0], 2.5)); }},
      {"sqrt", {{3, 4}}, 0.2, 3, [](V in) { return probe(sqrt(in[0])); }},
      {"abs", {{3, 4}}, -3, 3, [](V in) { return probe(abs(in[0])); }},
      {"relu", {{3, 4}}, -3, 3, [](V in) { return probe(relu(in[0])); }},
      {"sigmoid", {{3, 4}}, -3, 3, [](V in) { return probe(sigmoid(in[0])); }},
      {"inverse_sigmoid", {{3, 4}}, 0.05, 0.95, [](V in) { return probe(inverse_sigmoid(in[0])); }},
      {"clamp", {{3, 4}}, -3, 3, [](V in) { return probe(clamp(in[0], -1.0, 1.5)); }},
      {"matmul", {{3, 4}, {4, 2}}, -3, 3, [](V in) { return probe(matmul(in[0], in[1])); }},
      {"transpose", {{3, 4}}, -3, 3, [](V in) { return probe(transpose(in[0])); }},
      {"add_bias", {{3, 4}, {4}}, -3, 3, [](V in) { return probe(add_bias(in[0], in[1])); }},
      {"sum_all", {{3, 4}}, -3, 3, [](V in) { return sum(in[0] * in[0]); }},
      {"mean_all", {{3, 4}}, -3, 3, [](V in) { return mean(in[0] * in[0]); }},
      {"sum_axis0", {{3, 4}}, -3, 3, [](V in) { return probe(sum(in[0], 0)); }},
      {"mean_axis1", {{3, 4}}, -3, 3, [](V in) { return probe(mean(in[0], 1)); }},
      {"softmax_axis0", {{3, 4}}, -3, 3, [](V in) { return probe(softmax(in[0], 0)); }},
      {"softmax_axis1", {{3, 4}}, -3, 3, [](V in) { return probe(softmax(in[0], 1)); }},
      {"reshape", {{3, 4}}, -3, 3, [](V in) { return probe(reshape(in[0], {2, 6}) * reshape(in[0], {2, 6})); }},
      {"concat0", {{3, 4}, {2, 4}}, -3, 3, [](V in) { return probe(concat({in[0], in[1]}, 0)); }},
      {"concat1", {{3, 4}, {3, 2}}, -3, 3, [](V in) { return probe(concat({in[0], in[1]}, 1)); }},
      {"slice", {{3, 4}}, -3, 3, [](V in) { return probe(slice(in[0], 1, 1, 3) * slice(in[0], 1, 2, 4)); }},
      {"gather", {{3, 4}}, -3, 3,
       [](V in) {
         const std::vector<Index> idx{2, 0, 2};
         return probe(gather(in[0], idx));
       }},
      {"layer_norm", {{3, 4}, {4}, {4}}, -3, 3, [](V in) { return probe(layer_norm(in[0], in[1], in[2])); }},
  };
}

}  // namespace dino::testing
