#pragma once

// Model-based benchmark: branch-flow model with the loss equality relaxed to
// l * v_i >= P^2 + Q^2, solved as a second-order cone program.

#include "voltctl/conic.hpp"
#include "voltctl/convex_kernel.hpp"
#include "voltctl/grid_model.hpp"
#include "voltctl/powerflow.hpp"

namespace voltctl {

struct RelaxationResult {
  Vector u_star;
  Vector y;  // sqrt of the relaxed squared voltages
  Vector P, Q, l;
  double relaxed_objective = 0.0;
  double exactness_residual = 0.0;  // max over lines of l v_i - P^2 - Q^2
  ConicSolution conic;
};

// Variable layout per non-root slot j (line = parent line of slot j):
//   v, t, u, P, Q, l  at offsets 0, n, 2n, 3n, 4n, 5n, then one scalar s.
// v and t are stored as offsets from 1 so the objective stays small and the
// duality gap is meaningful against it. t <= sqrt(v) carries the voltage
// cost exactly and s >= |u|^2 the input cost.
inline ConicProblem build_relaxation(const NetworkModel& net, const LoadProfile& loads, const QuadraticCost& cost,
                                     const ControlBounds& bounds) {
  const int n = static_cast<int>(net.size());
  require_size(loads.p, n, "relaxation: p");
  require_size(loads.q_base, n, "relaxation: q_base");
  require_size(cost.y_ref, n, "relaxation: y_ref");
  const int V = 0, T = n, U = 2 * n, PP = 3 * n, QQ = 4 * n, LL = 5 * n, SS = 6 * n;
  const int nx = 6 * n + 1;
  const double v0 = net.slack_voltage * net.slack_voltage;

  auto line_of = [&](int slot) { return net.parent_line[net.bus_of_slot[slot]]; };
  auto parent_slot = [&](int slot) { return net.slot_of_bus[net.line_from[line_of(slot)]]; };

  ConicProblem pr;
  pr.c = Vector::Zero(nx);
  for (int j = 0; j < n; ++j) {
    pr.c[V + j] = cost.w_v;
    pr.c[T + j] = -2.0 * cost.w_v * cost.y_ref[j];
  }
  pr.c[SS] = cost.w_u;

  // Equalities: voltage drop, active and reactive balance per line.
  std::vector<Eigen::Triplet<double>> ta;
  pr.b = Vector::Zero(3 * n);
  for (int j = 0; j < n; ++j) {
    const Line& ln = net.lines[line_of(j)];
    const int pj = parent_slot(j);
    const int r0 = 3 * j;
    ta.emplace_back(r0, V + j, 1.0);
    if (pj >= 0) ta.emplace_back(r0, V + pj, -1.0);
    else pr.b[r0] = v0 - 1.0;
    ta.emplace_back(r0, PP + j, 2.0 * ln.r);
    ta.emplace_back(r0, QQ + j, 2.0 * ln.x);
    ta.emplace_back(r0, LL + j, -ln.z2());

    ta.emplace_back(r0 + 1, PP + j, -1.0);
    ta.emplace_back(r0 + 1, LL + j, ln.r);
    ta.emplace_back(r0 + 2, QQ + j, -1.0);
    ta.emplace_back(r0 + 2, LL + j, ln.x);
    ta.emplace_back(r0 + 2, U + j, -1.0);
    for (int h : net.children[net.bus_of_slot[j]]) {
      const int hs = net.slot_of_bus[h];
      ta.emplace_back(r0 + 1, PP + hs, 1.0);
      ta.emplace_back(r0 + 2, QQ + hs, 1.0);
    }
    pr.b[r0 + 1] = loads.p[j];
    pr.b[r0 + 2] = loads.q_base[j];
  }
  pr.A.resize(3 * n, nx);
  pr.A.setFromTriplets(ta.begin(), ta.end());

  // Cone rows, written as s = h - G x.
  std::vector<Eigen::Triplet<double>> tg;
  std::vector<double> h;
  int row = 0;
  auto add = [&](int col, double g) { tg.emplace_back(row, col, g); };
  // Orthant: input box and squared-voltage box.
  for (int j = 0; j < n; ++j) {
    add(U + j, 1.0);
    h.push_back(bounds.u_max[j]);
    ++row;
    add(U + j, -1.0);
    h.push_back(-bounds.u_min[j]);
    ++row;
    add(V + j, 1.0);
    h.push_back(bounds.y_max[j] * bounds.y_max[j] - 1.0);
    ++row;
    add(V + j, -1.0);
    h.push_back(1.0 - bounds.y_min[j] * bounds.y_min[j]);
    ++row;
  }
  pr.dims.l = row;
  // Loss cones: (l + v_i, 2P, 2Q, l - v_i).
  for (int j = 0; j < n; ++j) {
    const int pj = parent_slot(j);
    add(LL + j, -1.0);
    if (pj >= 0) add(V + pj, -1.0);
    h.push_back(pj >= 0 ? 1.0 : v0);
    ++row;
    add(PP + j, -2.0);
    h.push_back(0.0);
    ++row;
    add(QQ + j, -2.0);
    h.push_back(0.0);
    ++row;
    add(LL + j, -1.0);
    if (pj >= 0) add(V + pj, 1.0);
    h.push_back(pj >= 0 ? -1.0 : -v0);
    ++row;
    pr.dims.q.push_back(4);
  }
  // Voltage cones: (v + 1, 2t, v - 1) in offset variables.
  for (int j = 0; j < n; ++j) {
    add(V + j, -1.0);
    h.push_back(2.0);
    ++row;
    add(T + j, -2.0);
    h.push_back(2.0);
    ++row;
    add(V + j, -1.0);
    h.push_back(0.0);
    ++row;
    pr.dims.q.push_back(3);
  }
  // Input cone: (s + 1, 2u, s - 1).
  add(SS, -1.0);
  h.push_back(1.0);
  ++row;
  for (int j = 0; j < n; ++j) {
    add(U + j, -2.0);
    h.push_back(0.0);
    ++row;
  }
  add(SS, -1.0);
  h.push_back(-1.0);
  ++row;
  pr.dims.q.push_back(n + 2);

  pr.G.resize(row, nx);
  pr.G.setFromTriplets(tg.begin(), tg.end());
  pr.h = Eigen::Map<Vector>(h.data(), static_cast<Eigen::Index>(h.size()));
  return pr;
}

inline RelaxationResult solve_relaxation(const NetworkModel& net, const LoadProfile& loads, const QuadraticCost& cost,
                                         const ConicOptions& opts = {}) {
  if (!net.model_available) throw ModelUnavailable("the relaxation benchmark needs trusted line impedances");
  const int n = static_cast<int>(net.size());
  RelaxationResult out;
  if (n == 0) {
    out.relaxed_objective = 0.0;
    return out;
  }
  const ControlBounds bounds = control_bounds(net);
  const ConicProblem pr = build_relaxation(net, loads, cost, bounds);
  out.conic = solve_conic(pr, opts);
  const Vector& x = out.conic.x;
  const Vector v = x.segment(0, n).array() + 1.0;
  out.u_star = clip(x.segment(2 * n, n), bounds.u_min, bounds.u_max);
  out.y = v.cwiseMax(0.0).cwiseSqrt();
  out.P = x.segment(3 * n, n);
  out.Q = x.segment(4 * n, n);
  out.l = x.segment(5 * n, n);
  out.relaxed_objective =
      out.conic.primal_objective + cost.w_v * (Vector::Ones(n) - cost.y_ref).squaredNorm();
  const double v0 = net.slack_voltage * net.slack_voltage;
  double worst = 0.0;
  for (int j = 0; j < n; ++j) {
    const int pj = net.slot_of_bus[net.line_from[net.parent_line[net.bus_of_slot[j]]]];
    const double vi = pj >= 0 ? v[pj] : v0;
    worst = std::max(worst, out.l[j] * vi - out.P[j] * out.P[j] - out.Q[j] * out.Q[j]);
  }
  out.exactness_residual = worst;
  return out;
}

}  // namespace voltctl
