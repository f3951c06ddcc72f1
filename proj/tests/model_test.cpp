#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "exlin/model/dataset.hpp"
#include "exlin/model/el_model.hpp"
#include "exlin/model/serialize.hpp"
#include "exlin/model/train.hpp"
#include "exlin/sim/metrics.hpp"
#include "test_util.hpp"

using namespace exlin;
using model::Architecture;
using model::Dims;
using model::ELModel;
using model::TrajectoryDataset;

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

ELModel random_model(Dims dims, Architecture arch, std::uint64_t seed, double scale = 0.5) {
  ELModel m(dims, arch);
  std::mt19937_64 rng(seed);
  m.init(rng, {.output_scale = scale});
  return m;
}

ELModel linear_identity_model(std::size_t n, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const Eigen::VectorXd& c, Architecture arch = {.bnn_layers = 1, .dbnn_layers = 1,
                                                                            .picnn_layers = 2, .hidden = 4}) {
  ELModel m({n, static_cast<std::size_t>(b.cols()), 1, 1}, arch);
  m.set_phi_identity();
  m.set_psi_identity();
  m.set_linear(a, b, c);
  return m;
}

/// Random rows labelled by `teacher`.
TrajectoryDataset labelled_rows(const ELModel& teacher, std::size_t rows, std::uint64_t seed) {
  const Dims d = teacher.dims();
  TrajectoryDataset ds(d, rows, 0.01);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t i = 0; i < rows; ++i) {
    ds.t[i] = 0.01 * static_cast<double>(i);
    for (std::size_t j = 0; j < d.m; ++j) ds.v(i, j) = u(rng);
    for (std::size_t j = 0; j < d.n; ++j) ds.y(i, j) = u(rng);
    for (std::size_t j = 0; j < d.l; ++j) ds.d(i, j) = u(rng);
    for (std::size_t j = 0; j < d.l; ++j) ds.d_dot(i, j) = 0.3 * u(rng);
  }
  const auto pred = model::predict(teacher, ds);
  ds.y_dot = pred.y_dot;
  ds.z = pred.z;
  return ds;
}

/// Classical RK4 on ẏ = f(t, y).
template <class F>
std::vector<double> rk4(F&& f, std::vector<double> y, double t0, double h, std::size_t steps) {
  for (std::size_t s = 0; s < steps; ++s) {
    const double t = t0 + h * static_cast<double>(s);
    auto axpy = [](const std::vector<double>& a, const std::vector<double>& b, double k) {
      std::vector<double> r(a);
      for (std::size_t i = 0; i < r.size(); ++i) r[i] += k * b[i];
      return r;
    };
    const auto k1 = f(t, y);
    const auto k2 = f(t + h / 2, axpy(y, k1, h / 2));
    const auto k3 = f(t + h / 2, axpy(y, k2, h / 2));
    const auto k4 = f(t + h, axpy(y, k3, h));
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += h / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
  }
  return y;
}

const Dims kSmall{2, 2, 1, 2};
const Architecture kTiny{.bnn_layers = 2, .dbnn_layers = 2, .picnn_layers = 2, .hidden = 4};

}  // namespace

// ---- predict_ydot -------------------------------------------------------------------

TEST(PredictYdot, IdentityReduction) {
  const ELModel m = linear_identity_model(2, Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Identity(2, 2),
                                          Eigen::VectorXd::Zero(2));
  const auto yd = m.predict_ydot(std::vector<double>{1.0, -2.0}, std::vector<double>{0.3, 0.7},
                                 std::vector<double>{0.5}, std::vector<double>{0.0});
  EXPECT_NEAR(yd[0], 1.0, 1e-14);
  EXPECT_NEAR(yd[1], -2.0, 1e-14);
}

TEST(PredictYdot, ScaledPhiHandArithmetic) {
  ELModel m = linear_identity_model(1, -Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Identity(1, 1),
                                    Eigen::VectorXd::Zero(1));
  const std::vector<double> raw{std::log(2.0)};
  m.phi().layer(0).set_constant(raw, std::vector<double>{0.0}, std::vector<double>{0.0});
  const auto yd = m.predict_ydot(std::vector<double>{0.0}, std::vector<double>{1.0}, std::vector<double>{0.0},
                                 std::vector<double>{0.0});
  EXPECT_NEAR(yd[0], -1.0, 1e-14);
}

TEST(PredictYdot, MatchesDifferencedTrajectory) {
  const ELModel m = random_model({3, 3, 2, 2}, kTiny, 5);
  const std::vector<double> v{0.2, -0.1, 0.4};
  auto d_of = [](double t) { return std::vector<double>{std::sin(2 * t), 0.5 * std::cos(t)}; };
  auto dd_of = [](double t) { return std::vector<double>{2 * std::cos(2 * t), -0.5 * std::sin(t)}; };
  auto f = [&](double t, const std::vector<double>& y) { return m.predict_ydot(v, y, d_of(t), dd_of(t)); };
  const double h = 1e-4;
  std::vector<double> y{0.1, -0.2, 0.3};
  std::vector<std::vector<double>> ys{y};
  for (int k = 0; k < 40; ++k) {
    y = rk4(f, y, h * k, h, 1);
    ys.push_back(y);
  }
  double worst = 0.0;
  for (int k = 1; k < 40; ++k) {
    const auto pred = f(h * k, ys[k]);
    for (int i = 0; i < 3; ++i) worst = std::max(worst, std::abs(pred[i] - (ys[k + 1][i] - ys[k - 1][i]) / (2 * h)));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(PredictYdot, ConsistentWithLinearCoordinates) {
  // Integrate ẋ = A x + B u + c in the linear coordinates and map back; must
  // agree with integrating ŷ̇ in the original coordinates.
  const ELModel m = random_model({3, 3, 2, 2}, kTiny, 11);
  const std::vector<double> v{0.3, -0.2, 0.1};
  auto d_of = [](double t) { return std::vector<double>{0.4 * std::sin(3 * t), 0.2 * t}; };
  auto dd_of = [](double t) { return std::vector<double>{1.2 * std::cos(3 * t), 0.2}; };
  const std::vector<double> y0{0.2, 0.5, -0.4};

  auto fy = [&](double t, const std::vector<double>& y) { return m.predict_ydot(v, y, d_of(t), dd_of(t)); };
  auto fx = [&](double t, const std::vector<double>& x) {
    const auto d = d_of(t);
    const auto y = m.y_from_x(x, d);
    const auto u = m.u_from_v(v, y, d);
    const Eigen::VectorXd xdot = m.a_matrix(d) * Eigen::Map<const Eigen::VectorXd>(x.data(), 3) +
                                 m.b_matrix(d) * Eigen::Map<const Eigen::VectorXd>(u.data(), 3) + m.c_vector(d);
    return std::vector<double>(xdot.data(), xdot.data() + 3);
  };
  const auto y1 = rk4(fy, y0, 0.0, 1e-3, 1000);
  const auto x1 = rk4(fx, m.x_from_y(y0, d_of(0.0)), 0.0, 1e-3, 1000);
  EXPECT_LT(max_abs_diff(y1, m.y_from_x(x1, d_of(1.0))), 1e-6);
}

TEST(PredictYdot, SingularJacobianIsRejected) {
  ELModel m = linear_identity_model(2, -Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2),
                                    Eigen::VectorXd::Zero(2));
  m.phi().layer(0).set_constant(std::vector<double>{0.0, -40.0, 0.0, 0.0}, std::vector<double>(2, 0.0),
                                std::vector<double>(2, 0.0));
  EXPECT_THROW(m.predict_ydot(std::vector<double>{0.0, 0.0}, std::vector<double>{0.1, 0.1}, std::vector<double>{0.0},
                              std::vector<double>{0.0}),
               ad::Error);
}

TEST(PredictYdot, TwoEquilibriaForOneConstantInput) {
  // ẋ = −x + u with Φ = identity and u = v − b(y), b(y) = 3·softplus(softplus(−y)) − 4.
  ELModel m = linear_identity_model(1, -Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Identity(1, 1),
                                    Eigen::VectorXd::Zero(1));
  nets::ParamMlp& b = m.psi().shift_net(0);
  b.weight(0)(0, 0) = -1.0;  // y feature -> unit 0
  b.weight(1)(0, 0) = 1.0;
  b.weight(2)(0, 0) = 3.0;
  b.bias(2)(0, 0) = -4.0;
  auto ydot = [&](double y) {
    return m.predict_ydot(std::vector<double>{0.0}, std::vector<double>{y}, std::vector<double>{0.0},
                          std::vector<double>{0.0})[0];
  };
  auto root = [&](double lo, double hi) {
    EXPECT_LT(ydot(lo) * ydot(hi), 0.0);
    for (int i = 0; i < 200 && hi - lo > 1e-14; ++i) {
      const double mid = 0.5 * (lo + hi);
      (ydot(lo) * ydot(mid) <= 0.0 ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
  };
  const double r1 = root(-2.0, 0.0), r2 = root(0.0, 3.0);
  EXPECT_LT(std::abs(ydot(r1)), 1e-10);
  EXPECT_LT(std::abs(ydot(r2)), 1e-10);
  EXPECT_GT(r2 - r1, 1.0);
}

// ---- predict_z ---------------------------------------------------------------------

TEST(PredictZ, ConstantXiIgnoresInputs) {
  ELModel m = random_model(kSmall, kTiny, 3);
  for (std::size_t k = 0; k < m.xi().depth(); ++k) {
    m.xi().layer(k).x_w.fill(0.0);
    m.xi().layer(k).c_w.fill(0.0);
  }
  const std::vector<double> d{0.2};
  std::mt19937_64 rng(1);
  const auto z0 = m.predict_z(uniform(rng, 2, -1, 1), uniform(rng, 2, -1, 1), d);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(m.predict_z(uniform(rng, 2, -1, 1), uniform(rng, 2, -1, 1), d), z0);
}

TEST(PredictZ, IdentityMapsCollapse) {
  ELModel m = random_model(kSmall, kTiny, 4);
  m.set_phi_identity();
  m.set_psi_identity();
  const std::vector<double> v{0.3, -0.6}, y{1.1, 0.4}, d{-0.2};
  EXPECT_EQ(m.predict_z(v, y, d), m.z_from_xu(y, v, d));
}

// ---- maps ---------------------------------------------------------------------------

TEST(Maps, RoundTrips) {
  const ELModel m = random_model({3, 3, 2, 2}, {}, 7);
  std::mt19937_64 rng(2);
  double worst_v = 0.0, worst_y = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto y = uniform(rng, 3, -2, 2), d = uniform(rng, 2, -1, 1), v = uniform(rng, 3, -2, 2);
    worst_v = std::max(worst_v, max_abs_diff(m.v_from_u(m.u_from_v(v, y, d), y, d), v));
    worst_y = std::max(worst_y, max_abs_diff(m.y_from_x(m.x_from_y(y, d), d), y));
  }
  EXPECT_LT(worst_v, 1e-9);
  EXPECT_LT(worst_y, 1e-9);
}

TEST(Maps, IdentityConfiguration) {
  ELModel m = random_model(kSmall, kTiny, 8);
  m.set_phi_identity();
  const std::vector<double> y{0.25, -3.0};
  EXPECT_EQ(m.x_from_y(y, std::vector<double>{0.9}), y);
}

// ---- loss -------------------------------------------------------------------------

TEST(Loss, PerfectPredictionIsZero) {
  const ELModel m = random_model(kSmall, kTiny, 9);
  const TrajectoryDataset ds = labelled_rows(m, 20, 1);
  EXPECT_EQ(model::loss(m, ds, Eigen::MatrixXd::Identity(4, 4)), 0.0);
}

TEST(Loss, SingleRecordHandArithmetic) {
  const ELModel m = linear_identity_model(1, -Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Identity(1, 1),
                                          Eigen::VectorXd::Zero(1));
  TrajectoryDataset ds = labelled_rows(m, 1, 2);
  ds.y_dot(0, 0) -= 1.0;
  ds.z(0, 0) -= 1.0;
  EXPECT_NEAR(model::loss(m, ds, Eigen::MatrixXd::Identity(2, 2)), 2.0, 1e-12);
}

TEST(Loss, RejectsIndefiniteWeight) {
  const ELModel m = random_model(kSmall, kTiny, 9);
  const TrajectoryDataset ds = labelled_rows(m, 3, 1);
  Eigen::MatrixXd q = Eigen::MatrixXd::Identity(4, 4);
  q(2, 2) = -1.0;
  EXPECT_THROW(model::loss(m, ds, q), std::invalid_argument);
}

TEST(Loss, GradientMatchesFiniteDifferencesForEveryGroup) {
  const ELModel teacher = random_model(kSmall, kTiny, 21);
  ELModel m = random_model(kSmall, kTiny, 22);
  const TrajectoryDataset ds = labelled_rows(teacher, 6, 3);
  const Eigen::MatrixXd q = Eigen::Vector4d(1.0, 2.0, 0.5, 1.5).asDiagonal();
  const auto [l0, grads] = model::loss_and_gradient(m, ds, q);
  ASSERT_GT(l0, 0.0);

  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;  // analytic, fd
  m.for_each_param([&](const std::string& name, ad::Tensor& w) {
    const std::string group = name.substr(0, name.find('.'));
    const ad::Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      const double h = 1e-6 * std::max(1.0, std::abs(saved));
      w[i] = saved + h;
      const double lp = model::loss(m, ds, q);
      w[i] = saved - h;
      const double lm = model::loss(m, ds, q);
      w[i] = saved;
      groups[group].first.push_back(g[i]);
      groups[group].second.push_back((lp - lm) / (2 * h));
    }
  });
  ASSERT_EQ(groups.size(), 6u);
  for (const auto& [group, pair] : groups) {
    EXPECT_LT(exlin::testing::relative_error(pair.first, pair.second), 1e-5) << group;
  }
}

// ---- training ---------------------------------------------------------------------

TEST(Train, ZeroEpochsReturnsInitialModel) {
  const ELModel m = random_model(kSmall, kTiny, 30);
  const TrajectoryDataset ds = labelled_rows(random_model(kSmall, kTiny, 31), 50, 4);
  model::TrainConfig cfg;
  cfg.epochs = 0;
  const auto result = model::train(m, ds, cfg);
  std::ostringstream a, b;
  model::write_model(a, m);
  model::write_model(b, result.model);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_TRUE(result.history.empty());
}

TEST(Train, DeterministicForFixedSeed) {
  const ELModel m = random_model(kSmall, kTiny, 32);
  const TrajectoryDataset ds = labelled_rows(random_model(kSmall, kTiny, 33), 200, 5);
  model::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.seed = 99;
  std::ostringstream a, b;
  model::write_model(a, model::train(m, ds, cfg).model);
  model::write_model(b, model::train(m, ds, cfg).model);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Train, ValidationSplitUsesContiguousBlocks) {
  const auto [train, val] = model::split_rows(100, 0.2, 10);
  EXPECT_EQ(val.size(), 20u);
  EXPECT_EQ(train.size(), 80u);
  EXPECT_EQ(val.front(), 40u);
  EXPECT_EQ(val[9], 49u);
  EXPECT_EQ(val[10], 90u);
}

TEST(Train, DivergenceKeepsLastValidModel) {
  const ELModel m = random_model(kSmall, kTiny, 34);
  TrajectoryDataset ds = labelled_rows(random_model(kSmall, kTiny, 35), 64, 6);
  model::TrainConfig cfg;
  cfg.epochs = 50;
  cfg.learning_rate = 1e6;
  cfg.clip_norm = 1e300;
  cfg.validation_fraction = 0.0;
  try {
    model::train(m, ds, cfg);
    FAIL() << "expected divergence";
  } catch (const model::TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
    bool finite = true;
    e.last_valid().for_each_param([&](const std::string&, const ad::Tensor& t) { finite = finite && t.all_finite(); });
    EXPECT_TRUE(finite);
  }
}

TEST(Train, RecoversLinearTeacher) {
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << -1.0, 0.5, -0.3, -2.0;
  b << 1.0, 0.2, 0.0, 0.8;
  const ELModel teacher = linear_identity_model(2, a, b, Eigen::Vector2d(0.3, -0.1));
  const Dims dims = teacher.dims();
  const TrajectoryDataset ds = labelled_rows(teacher, 1500, 7);

  ELModel student(dims, {.bnn_layers = 1, .dbnn_layers = 1, .picnn_layers = 2, .hidden = 8});
  student.fit_scalers(ds.v, ds.y, ds.d, ds.z);
  std::mt19937_64 rng(3);
  student.init(rng, {.output_scale = 0.05});
  model::TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-2;
  cfg.lr_decay = 0.95;
  const auto result = model::train(student, ds, cfg);

  const TrajectoryDataset held = ds.subset(result.validation_rows);
  const auto pred = model::predict(result.model, held);
  for (std::size_t j = 0; j < dims.n; ++j) {
    std::vector<double> p, t;
    for (std::size_t i = 0; i < held.size(); ++i) {
      p.push_back(pred.y_dot(i, j));
      t.push_back(held.y_dot(i, j));
    }
    EXPECT_GE(sim::r2(p, t), 0.999) << "channel " << j;
  }
}

// ---- serialization ----------------------------------------------------------------

TEST(Serialize, RoundTripIsBitExact) {
  ELModel m = random_model({3, 3, 2, 2}, {}, 40);
  m.v_scaler().mean = ad::Tensor::row({50.0, 50.0, 50.0});
  m.v_scaler().scale = ad::Tensor::row({25.0, 25.0, 1.0 / 3.0});
  std::stringstream buf;
  model::write_model(buf, m);
  const std::string first = buf.str();
  const ELModel back = model::read_model(buf);
  std::ostringstream again;
  model::write_model(again, back);
  EXPECT_EQ(first, again.str());
  std::vector<double> a, b;
  m.for_each_param([&](const std::string&, const ad::Tensor& t) { a.insert(a.end(), t.values().begin(), t.values().end()); });
  back.for_each_param([&](const std::string&, const ad::Tensor& t) { b.insert(b.end(), t.values().begin(), t.values().end()); });
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
}

TEST(Serialize, RejectsForeignFiles) {
  std::stringstream bad("NOPE....");
  EXPECT_THROW(model::read_model(bad), model::ModelFormatError);
  std::stringstream buf;
  model::write_model(buf, random_model(kSmall, kTiny, 1));
  std::string truncated = buf.str().substr(0, buf.str().size() - 5);
  std::stringstream t(truncated);
  EXPECT_THROW(model::read_model(t), model::ModelFormatError);
}

// ---- dataset ----------------------------------------------------------------------

TEST(Dataset, CsvRoundTripAndDifferencedDerivatives) {
  const auto dir = std::filesystem::temp_directory_path() / "exlin_dataset_test";
  std::filesystem::create_directories(dir);
  const Dims dims{1, 1, 1, 1};
  TrajectoryDataset ds(dims, 101, 0.01);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double t = 0.01 * static_cast<double>(i);
    ds.t[i] = t;
    ds.v(i, 0) = 1.0;
    ds.d(i, 0) = std::sin(t);
    ds.d_dot(i, 0) = std::cos(t);
    ds.y(i, 0) = t * t;
    ds.y_dot(i, 0) = 2 * t;
    ds.z(i, 0) = t;
  }
  model::DatasetMeta meta;
  meta.period = 0.01;
  const std::string full = (dir / "full.csv").string(), bare = (dir / "bare.csv").string();
  model::write_dataset(full, ds, meta);
  model::write_dataset(bare, ds, meta, false);

  const auto a = model::read_dataset(full);
  EXPECT_EQ(a.data.y, ds.y);
  EXPECT_EQ(a.data.y_dot, ds.y_dot);
  EXPECT_EQ(a.meta.derivative_source, "plant");

  const auto b = model::read_dataset(bare);
  EXPECT_EQ(b.meta.derivative_source, "finite-difference");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_NEAR(b.data.y_dot(i, 0), 2 * ds.t[i], 1e-9);  // exact for a quadratic
    EXPECT_NEAR(b.data.d_dot(i, 0), std::cos(ds.t[i]), 1e-4);
  }
}

TEST(Dataset, RejectsNonUniformTime) {
  TrajectoryDataset ds({1, 1, 1, 1}, 5, 0.1);
  for (std::size_t i = 0; i < 5; ++i) ds.t[i] = 0.1 * static_cast<double>(i);
  ds.t[3] = 0.31;
  EXPECT_THROW(model::validate(ds), model::DatasetError);
  ds.t[3] = 0.2;
  EXPECT_THROW(model::validate(ds), model::DatasetError);
}

TEST(Dataset, RejectsInconsistentDerivative) {
  TrajectoryDataset ds({1, 1, 1, 1}, 50, 0.1);
  for (std::size_t i = 0; i < 50; ++i) {
    ds.t[i] = 0.1 * static_cast<double>(i);
    ds.y(i, 0) = ds.t[i];
    ds.y_dot(i, 0) = -1.0 + 0.01 * std::sin(static_cast<double>(i));
  }
  EXPECT_THROW(model::validate(ds), model::DatasetError);
}
