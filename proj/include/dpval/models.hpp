#pragma once

#include "dpval/common.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace dpval {

enum class LossKind { mse_linear, logistic_l2 };

struct InitPolicy {
  enum class Kind { zeros, gaussian };
  Kind kind = Kind::zeros;
  double scale = 0.0;
  std::uint64_t seed = 0;
};

struct ModelSpec {
  LossKind loss = LossKind::mse_linear;
  double learning_rate = 0.1;
  double l2 = 0.0;  // lambda, logistic_l2 only
  InitPolicy init;
  bool bias = true;  // appends a constant-1 feature

  void validate() const;
};

enum class UtilityKind { neg_test_loss, test_accuracy };

struct UtilitySpec {
  UtilityKind kind = UtilityKind::neg_test_loss;
};

// Design matrix seen by the model: features, plus a trailing column of ones
// when spec.bias is set.
Matrix design_matrix(const ModelSpec& spec, const Matrix& features);
std::size_t param_dim(const ModelSpec& spec, std::size_t d_feat);

// Mean loss over `rows` of (x, y); logistic adds lambda * |theta|^2.
double loss(const ModelSpec& spec, const Vector& theta, const Matrix& x, const Vector& y,
            std::span<const std::size_t> rows);
double loss(const ModelSpec& spec, const Vector& theta, const Matrix& x, const Vector& y);

// Analytic gradient of `loss`:
//   mse_linear   (2/|B|) sum (theta.x - y) x
//   logistic_l2  (1/|B|) sum (sigmoid(theta.x) - y) x + 2 lambda theta
Vector gradient(const ModelSpec& spec, const Vector& theta, const Matrix& x, const Vector& y,
                std::span<const std::size_t> rows);
Vector gradient(const ModelSpec& spec, const Vector& theta, const Matrix& x, const Vector& y);

Vector init_params(const InitPolicy& init, std::size_t d);
Vector init_params(const InitPolicy& init, std::size_t d, std::uint64_t seed);

double sigmoid(double u);

// V(theta) on a fixed test set. `test_x` is a design matrix (bias column
// already appended).
class Utility {
 public:
  Utility(UtilitySpec spec, ModelSpec model, Matrix test_x, Vector test_y);

  double operator()(const Vector& theta) const;
  const Matrix& test_x() const { return test_x_; }
  const Vector& test_y() const { return test_y_; }
  const ModelSpec& model() const { return model_; }
  UtilitySpec spec() const { return spec_; }

 private:
  UtilitySpec spec_;
  ModelSpec model_;
  Matrix test_x_;
  Vector test_y_;
};

double utility(const UtilitySpec& spec, const ModelSpec& model, const Vector& theta,
               const Matrix& test_x, const Vector& test_y);

// One gradient step per party, parties visited in `order`. No noise.
Vector train_one_pass(const ModelSpec& spec, Vector theta, const Matrix& x, const Vector& y,
                      const std::vector<std::vector<std::size_t>>& party_rows,
                      std::span<const std::size_t> order);

// Picks the learning rate from `grid` whose one-pass model (zero-noise,
// parties in row order) has the highest utility. Ties go to the earlier entry.
double select_learning_rate(const ModelSpec& spec, const Matrix& x, const Vector& y,
                            const std::vector<std::vector<std::size_t>>& party_rows,
                            const Utility& utility, std::span<const double> grid);

}  // namespace dpval
