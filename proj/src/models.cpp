#include "dpval/models.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace dpval {
namespace {

[[noreturn]] void fail(const std::string& field, const std::string& message) {
  throw Error("models", field, message);
}

// log(1 + e^a) without overflow.
double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }

void check_shapes(const Vector& theta, const Matrix& x, const Vector& y) {
  if (x.cols() != theta.size())
    fail("theta", "dimension mismatch: theta has " + std::to_string(theta.size()) +
                      " entries, design matrix has " + std::to_string(x.cols()) + " columns");
  if (x.rows() != y.size()) fail("labels", "label count does not match design matrix rows");
}

double sample_loss(LossKind kind, double u, double y) {
  if (kind == LossKind::mse_linear) {
    const double r = u - y;
    return r * r;
  }
  // -[y log s(u) + (1-y) log(1-s(u))] = y softplus(-u) + (1-y) softplus(u)
  return y * softplus(-u) + (1.0 - y) * softplus(u);
}

double residual(LossKind kind, double u, double y) {
  return kind == LossKind::mse_linear ? 2.0 * (u - y) : sigmoid(u) - y;
}

}  // namespace

void ModelSpec::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    fail("learning_rate", "learning rate must be positive");
  if (loss == LossKind::logistic_l2 && !(l2 > 0.0))
    fail("l2", "logistic_l2 requires a positive regularization strength");
  if (l2 < 0.0) fail("l2", "regularization strength must be non-negative");
  if (init.kind == InitPolicy::Kind::gaussian && !(init.scale >= 0.0))
    fail("init.scale", "gaussian init scale must be non-negative");
}

double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

Matrix design_matrix(const ModelSpec& spec, const Matrix& features) {
  if (!spec.bias) return features;
  Matrix x(features.rows(), features.cols() + 1);
  x.leftCols(features.cols()) = features;
  x.col(features.cols()).setOnes();
  return x;
}

std::size_t param_dim(const ModelSpec& spec, std::size_t d_feat) {
  return d_feat + (spec.bias ? 1 : 0);
}

double loss(const ModelSpec& spec, const Vector& theta, const Matrix& x, const Vector& y,
            std::span<const std::size_t> rows) {
  check_shapes(theta, x, y);
  if (rows.empty()) fail("batch", "empty batch");
  double total = 0.0;
  for (const auto r : rows) {
    const auto i = static_cast<Eigen::Index>(r);
    total += sample_loss(spec.loss, x.row(i).dot(theta), y(i));
  }
  double value = total / static_cast<double>(rows.size());
  if (spec.loss == LossKind::logistic_l2) value += spec.l2 * theta.squaredNorm();
  return value;
}

double loss(const ModelSpec& spec, const Vector& theta, const Matrix& x, const Vector& y) {
  check_shapes(theta, x, y);
  if (x.rows() == 0) fail("batch", "empty batch");
  const Vector u = x * theta;
  double total = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) total += sample_loss(spec.loss, u(i), y(i));
  double value = total / static_cast<double>(u.size());
  if (spec.loss == LossKind::logistic_l2) value += spec.l2 * theta.squaredNorm();
  return value;
}

Vector gradient(const ModelSpec& spec, const Vector& theta, const Matrix& x, const Vector& y,
                std::span<const std::size_t> rows) {
  check_shapes(theta, x, y);
  if (rows.empty()) fail("batch", "empty batch");
  Vector g = Vector::Zero(theta.size());
  for (const auto r : rows) {
    const auto i = static_cast<Eigen::Index>(r);
    g.noalias() += residual(spec.loss, x.row(i).dot(theta), y(i)) * x.row(i).transpose();
  }
  g /= static_cast<double>(rows.size());
  if (spec.loss == LossKind::logistic_l2) g += 2.0 * spec.l2 * theta;
  return g;
}

Vector gradient(const ModelSpec& spec, const Vector& theta, const Matrix& x, const Vector& y) {
  check_shapes(theta, x, y);
  if (x.rows() == 0) fail("batch", "empty batch");
  Vector r = x * theta;
  for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = residual(spec.loss, r(i), y(i));
  Vector g = x.transpose() * r / static_cast<double>(x.rows());
  if (spec.loss == LossKind::logistic_l2) g += 2.0 * spec.l2 * theta;
  return g;
}

Vector init_params(const InitPolicy& init, std::size_t d) {
  return init_params(init, d, init.seed);
}

Vector init_params(const InitPolicy& init, std::size_t d, std::uint64_t seed) {
  if (d == 0) fail("d", "parameter dimension must be positive");
  Vector theta = Vector::Zero(static_cast<Eigen::Index>(d));
  if (init.kind == InitPolicy::Kind::gaussian) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, init.scale);
    for (auto& v : theta) v = normal(rng);
  }
  return theta;
}

Utility::Utility(UtilitySpec spec, ModelSpec model, Matrix test_x, Vector test_y)
    : spec_(spec), model_(model), test_x_(std::move(test_x)), test_y_(std::move(test_y)) {
  if (test_x_.rows() == 0) fail("test", "utility needs a non-empty test set");
  if (test_x_.rows() != test_y_.size()) fail("test", "test label count does not match rows");
  if (spec_.kind == UtilityKind::test_accuracy && model_.loss != LossKind::logistic_l2)
    fail("utility.kind", "test_accuracy requires the logistic model");
}

double Utility::operator()(const Vector& theta) const {
  if (theta.size() != test_x_.cols())
    fail("theta", "dimension mismatch between theta and test design matrix");
  const Vector u = test_x_ * theta;
  const auto l = static_cast<double>(u.size());
  if (spec_.kind == UtilityKind::test_accuracy) {
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      // sigmoid(u) >= 0.5 exactly when u >= 0
      const double predicted = u(i) >= 0.0 ? 1.0 : 0.0;
      if (predicted == test_y_(i)) ++correct;
    }
    return static_cast<double>(correct) / l;
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) total += sample_loss(model_.loss, u(i), test_y_(i));
  double value = -total / l;
  if (model_.loss == LossKind::logistic_l2) value -= model_.l2 * theta.squaredNorm();
  return value;
}

double utility(const UtilitySpec& spec, const ModelSpec& model, const Vector& theta,
               const Matrix& test_x, const Vector& test_y) {
  return Utility(spec, model, test_x, test_y)(theta);
}

Vector train_one_pass(const ModelSpec& spec, Vector theta, const Matrix& x, const Vector& y,
                      const std::vector<std::vector<std::size_t>>& party_rows,
                      std::span<const std::size_t> order) {
  for (const auto party : order) {
    theta -= spec.learning_rate * gradient(spec, theta, x, y, party_rows.at(party));
  }
  return theta;
}

double select_learning_rate(const ModelSpec& spec, const Matrix& x, const Vector& y,
                            const std::vector<std::vector<std::size_t>>& party_rows,
                            const Utility& utility, std::span<const double> grid) {
  if (grid.empty()) fail("grid", "learning-rate grid is empty");
  std::vector<std::size_t> order(party_rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Vector theta0 = init_params(spec.init, static_cast<std::size_t>(x.cols()));
  double best_rate = grid.front();
  double best_value = -std::numeric_limits<double>::infinity();
  for (const double rate : grid) {
    ModelSpec candidate = spec;
    candidate.learning_rate = rate;
    const double value = utility(train_one_pass(candidate, theta0, x, y, party_rows, order));
    if (std::isfinite(value) && value > best_value) {
      best_value = value;
      best_rate = rate;
    }
  }
  return best_rate;
}

}  // namespace dpval
