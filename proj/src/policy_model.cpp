#include "topk/policy_model.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

namespace topk {

PolicyTensors::PolicyTensors(const ModelDims& d)
    : dims(d),
      U(Mat::Zero(d.embed_dim, d.num_actions)),
      V(Mat::Zero(d.state_dim, d.num_actions)),
      W_a(Mat::Zero(d.state_dim, d.embed_dim)),
      U_z(Mat::Zero(d.state_dim, d.state_dim)),
      U_i(Mat::Zero(d.state_dim, d.state_dim)),
      W_z(Mat::Zero(d.state_dim, d.embed_dim)),
      W_i(Mat::Zero(d.state_dim, d.embed_dim)),
      b_z(Mat::Zero(d.state_dim, 1)),
      b_i(Mat::Zero(d.state_dim, 1)) {
  require(d.state_dim > 0 && d.embed_dim > 0 && d.num_actions > 0, "ModelDims: all dimensions must be positive");
}

Mat& PolicyTensors::tensor(std::string_view name) {
  Mat* found = nullptr;
  for_each([&](std::string_view n, Mat& m) {
    if (n == name) found = &m;
  });
  if (!found) throw InvalidArgument("unknown tensor '" + std::string(name) + "'");
  return *found;
}

const Mat& PolicyTensors::tensor(std::string_view name) const {
  return const_cast<PolicyTensors*>(this)->tensor(name);
}

Index PolicyTensors::parameter_count() const {
  Index total = 0;
  for_each([&](std::string_view, const Mat& m) { total += m.size(); });
  return total;
}

bool PolicyTensors::all_finite() const {
  bool ok = true;
  for_each([&](std::string_view, const Mat& m) { ok = ok && m.allFinite(); });
  return ok;
}

void PolicyTensors::check_shapes() const {
  const Index n = dims.state_dim, m = dims.embed_dim, a = dims.num_actions;
  auto expect = [](const Mat& t, Index r, Index c, const char* name) {
    if (t.rows() != r || t.cols() != c) {
      throw InvalidArgument(std::string("tensor ") + name + " has shape " + std::to_string(t.rows()) + "x" +
                            std::to_string(t.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  expect(U, m, a, "U");
  expect(V, n, a, "V");
  expect(W_a, n, m, "W_a");
  expect(U_z, n, n, "U_z");
  expect(U_i, n, n, "U_i");
  expect(W_z, n, m, "W_z");
  expect(W_i, n, m, "W_i");
  expect(b_z, n, 1, "b_z");
  expect(b_i, n, 1, "b_i");
}

void PolicyTensors::set_zero() {
  for_each([](std::string_view, Mat& m) { m.setZero(); });
}

PolicyParameters PolicyParameters::random(const ModelDims& d, RngStream& rng, double scale) {
  PolicyParameters p(d);
  p.for_each([&](std::string_view, Mat& m) { fill_uniform(m, scale, rng); });
  return p;
}

void PolicyParameters::validate() const {
  check_shapes();
  for_each([](std::string_view name, const Mat& m) {
    if (!m.allFinite()) throw InvalidArgument("PolicyParameters: non-finite entry in " + std::string(name));
  });
}

bool PolicyParameters::operator==(const PolicyParameters& other) const {
  if (!(dims == other.dims)) return false;
  bool same = true;
  for_each([&](std::string_view name, const Mat& m) {
    const Mat& o = other.tensor(name);
    same = same && m.rows() == o.rows() && m.cols() == o.cols() && m == o;
  });
  return same;
}

GradientAccumulator& GradientAccumulator::operator+=(const GradientAccumulator& other) {
  require(dims == other.dims, "GradientAccumulator: dimension mismatch");
  U += other.U;
  V += other.V;
  W_a += other.W_a;
  U_z += other.U_z;
  U_i += other.U_i;
  W_z += other.W_z;
  W_i += other.W_i;
  b_z += other.b_z;
  b_i += other.b_i;
  return *this;
}

GradientAccumulator& GradientAccumulator::operator*=(double s) {
  for_each([s](std::string_view, Mat& m) { m *= s; });
  return *this;
}

double GradientAccumulator::squared_norm() const {
  double total = 0.0;
  for_each([&](std::string_view, const Mat& m) { total += m.squaredNorm(); });
  return total;
}

void PolicyConfig::validate(Index k, Index num_actions) const {
  require(temperature > 0.0 && std::isfinite(temperature), "PolicyConfig: temperature must be positive");
  const Index m = retrieval_width == 0 ? num_actions : retrieval_width;
  require(k >= 1, "PolicyConfig: K must be at least 1");
  if (serve_mode == ServeMode::deterministic) {
    require(k <= m, "PolicyConfig: deterministic serving needs K <= retrieval width M");
  }
  require(m <= num_actions, "PolicyConfig: retrieval width exceeds the action count");
}

namespace {

void check_action(ActionId a, Index num_actions) {
  if (a < 0 || a >= num_actions) {
    throw InvalidArgument("action id " + std::to_string(a) + " out of range [0, " + std::to_string(num_actions) + ")");
  }
}

}  // namespace

CfnStep cfn_forward(const Vec& s, ActionId a, const PolicyParameters& params) {
  check_action(a, params.dims.num_actions);
  require_same_size(s.size(), params.dims.state_dim, "cfn_step");
  require_finite(s, "cfn_step state");
  const auto u = params.U.col(a);
  CfnStep step;
  step.prev = s;
  step.z = sigmoid(params.U_z * s + params.W_z * u + params.b_z.col(0));
  step.i = sigmoid(params.U_i * s + params.W_i * u + params.b_i.col(0));
  step.input_tanh = (params.W_a * u).array().tanh();
  step.next = step.z.cwiseProduct(s.array().tanh().matrix()) + step.i.cwiseProduct(step.input_tanh);
  return step;
}

UserState cfn_step(const UserState& s, ActionId a, const PolicyParameters& params) {
  return {cfn_forward(s.s, a, params).next, s.t + 1};
}

std::vector<UserState> unroll(std::span<const ActionId> actions, const PolicyParameters& params) {
  require(!actions.empty(), "unroll: empty action sequence");
  std::vector<UserState> out;
  out.reserve(actions.size());
  UserState s = UserState::initial(params.dims.state_dim);
  for (ActionId a : actions) {
    s = cfn_step(s, a, params);
    out.push_back(s);
  }
  return out;
}

std::vector<Vec> prefix_states(std::span<const ActionId> actions, const PolicyParameters& params) {
  std::vector<Vec> out;
  out.reserve(actions.size());
  Vec s = Vec::Zero(params.dims.state_dim);
  for (std::size_t t = 0; t < actions.size(); ++t) {
    out.push_back(s);
    if (t + 1 < actions.size()) s = cfn_forward(s, actions[t], params).next;
  }
  return out;
}

Vec policy_logits(const Vec& s, const PolicyParameters& params) {
  require_same_size(s.size(), params.dims.state_dim, "policy_logits");
  return params.V.transpose() * s;
}

Vec policy_probs(const Vec& s, const PolicyParameters& params, double temperature) {
  return softmax(policy_logits(s, params), temperature);
}

Vec policy_probs(const UserState& s, const PolicyParameters& params, double temperature) {
  return policy_probs(s.s, params, temperature);
}

double SampledLogits::loss() const {
  const Vec o = corrected();
  return log_sum_exp(o) - o[0];
}

SampledLogits sampled_softmax_logits(const Vec& s, ActionId target, std::span<const ActionId> negatives,
                                     const PolicyParameters& params, double temperature) {
  const Index num_actions = params.dims.num_actions;
  check_action(target, num_actions);
  require(temperature > 0.0, "sampled_softmax_logits: temperature must be positive");
  require(num_actions >= 2, "sampled_softmax_logits: need at least two actions");
  std::unordered_set<ActionId> seen;
  for (ActionId a : negatives) {
    check_action(a, num_actions);
    if (a == target) throw InvalidArgument("sampled_softmax_logits: target appears among the negatives");
    if (!seen.insert(a).second) throw InvalidArgument("sampled_softmax_logits: duplicate negative");
  }
  SampledLogits out;
  out.actions.reserve(negatives.size() + 1);
  out.actions.push_back(target);
  out.actions.insert(out.actions.end(), negatives.begin(), negatives.end());
  const auto count = static_cast<Index>(out.actions.size());
  out.logits.resize(count);
  out.corrections.setZero(count);
  const double log_expected_count =
      std::log(static_cast<double>(negatives.size()) / static_cast<double>(num_actions - 1));
  for (Index j = 0; j < count; ++j) {
    out.logits[j] = params.V.col(out.actions[j]).dot(s) / temperature;
    if (j > 0) out.corrections[j] = log_expected_count;
  }
  return out;
}

std::vector<ActionId> draw_negatives(ActionId target, Index num_actions, Index k, RngStream& rng) {
  check_action(target, num_actions);
  require(k >= 0 && k <= num_actions - 1, "draw_negatives: k out of range");
  // Partial Fisher-Yates over the non-target ids.
  std::vector<ActionId> pool;
  pool.reserve(num_actions - 1);
  for (ActionId a = 0; a < num_actions; ++a)
    if (a != target) pool.push_back(a);
  for (Index j = 0; j < k; ++j) {
    const auto pick = j + static_cast<Index>(rng.below(static_cast<std::uint64_t>(pool.size() - j)));
    std::swap(pool[j], pool[pick]);
  }
  pool.resize(k);
  return pool;
}

std::vector<ActionId> topk_retrieve(const Vec& s, const PolicyParameters& params, Index m) {
  const Index num_actions = params.dims.num_actions;
  require(m >= 1 && m <= num_actions, "topk_retrieve: M must lie in [1, |A|]");
  const Vec logits = policy_logits(s, params);
  std::vector<ActionId> ids(num_actions);
  std::iota(ids.begin(), ids.end(), 0);
  auto before = [&](ActionId x, ActionId y) { return logits[x] > logits[y] || (logits[x] == logits[y] && x < y); };
  std::partial_sort(ids.begin(), ids.begin() + m, ids.end(), before);
  ids.resize(m);
  return ids;
}

Vec restricted_softmax(const Vec& s, const PolicyParameters& params, std::span<const ActionId> candidates,
                       double temperature) {
  require(!candidates.empty(), "restricted_softmax: empty candidate list");
  std::unordered_set<ActionId> seen;
  Vec logits(static_cast<Index>(candidates.size()));
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    check_action(candidates[j], params.dims.num_actions);
    if (!seen.insert(candidates[j]).second) throw InvalidArgument("restricted_softmax: duplicate candidate");
    logits[static_cast<Index>(j)] = params.V.col(candidates[j]).dot(s);
  }
  return softmax(logits, temperature);
}

std::vector<ActionId> serve(const Vec& s, const PolicyParameters& params, const PolicyConfig& cfg, Index k,
                            RngStream& rng) {
  const Index num_actions = params.dims.num_actions;
  cfg.validate(k, num_actions);
  const Index m = cfg.retrieval_width == 0 ? num_actions : cfg.retrieval_width;
  if (cfg.serve_mode == ServeMode::deterministic) return topk_retrieve(s, params, k);

  const auto candidates = topk_retrieve(s, params, m);
  const Vec probs = restricted_softmax(s, params, candidates, cfg.temperature);
  std::vector<ActionId> served;
  served.reserve(k);
  for (Index draw = 0; draw < k; ++draw) {
    const ActionId a = candidates[sample_categorical(probs, rng)];
    if (std::find(served.begin(), served.end(), a) == served.end()) served.push_back(a);
  }
  return served;
}

}  // namespace topk
