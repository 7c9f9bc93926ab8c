#include "vilo/initializer.hpp"

#include "vilo/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace vilo::init {

using solvers::BearingRay;

namespace {

constexpr double kTwoPi = 2.0 * kPi;

double spectral_norm(const Eigen::Matrix<double, 3, 4>& j) {
  const Eigen::SelfAdjointEigenSolver<Mat3> es(j * j.transpose(), Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(es.eigenvalues().maxCoeff(), 0.0));
}

struct Arc {
  double start;
  double end;  // start <= end < start + 2 pi
};

// Yaw ranges where the constraint holds. `full` when it holds everywhere.
std::vector<Arc> consistent_arcs(const TimConstraint& t, bool& full) {
  full = false;
  const double r = std::hypot(t.d.x(), t.d.y());
  if (r <= 1e-15) {
    full = std::abs(t.d.z()) <= t.bound;
    return {};
  }
  const double lo = (-t.bound - t.d.z()) / r;
  const double hi = (t.bound - t.d.z()) / r;
  if (lo > 1.0 || hi < -1.0) return {};
  if (lo <= -1.0 && hi >= 1.0) {
    full = true;
    return {};
  }
  const double a_hi = std::acos(std::min(hi, 1.0));  // in [0, pi]
  const double a_lo = std::acos(std::max(lo, -1.0));
  const double phi = std::atan2(t.d.x(), t.d.y());
  // r cos(a - phi) in [lo r, hi r]  <=>  |a - phi| in [a_hi, a_lo]
  if (a_hi <= 0.0) return {{phi - a_lo, phi + a_lo}};
  if (a_lo >= kPi) return {{phi + a_hi, phi + kTwoPi - a_hi}};
  return {{phi + a_hi, phi + a_lo}, {phi - a_lo, phi - a_hi}};
}

// Consistent arcs clipped to [-pi, pi]; an arc crossing the seam is split.
void circle_arcs(const TimConstraint& t, std::vector<Arc>& out, int& always) {
  bool full = false;
  const auto arcs = consistent_arcs(t, full);
  if (full) {
    ++always;
    return;
  }
  for (const Arc& a : arcs) {
    const double s = a.start - kTwoPi * std::floor((a.start + kPi) / kTwoPi);
    const double e = s + (a.end - a.start);
    if (e <= kPi) {
      out.push_back({s, e});
    } else {
      out.push_back({s, kPi});
      out.push_back({-kPi, e - kTwoPi});
    }
  }
}

struct Plateau {
  Arc range;
  int depth;
};

// All maximal-depth ranges of the arc arrangement, by an exact sweep.
std::vector<Plateau> deepest_ranges(const std::vector<TimConstraint>& tims) {
  std::vector<Arc> arcs;
  int always = 0;
  for (const auto& t : tims) circle_arcs(t, arcs, always);
  std::vector<std::pair<double, int>> events;  // opens tagged -1 sort before closes at equal angle
  events.reserve(2 * arcs.size());
  for (const Arc& a : arcs) {
    events.emplace_back(a.start, -1);
    events.emplace_back(a.end, +1);
  }
  std::sort(events.begin(), events.end());
  std::vector<Plateau> best;
  if (events.empty()) return {{{-kPi, kPi}, always}};
  int depth = always;
  int best_depth = always;
  if (events.front().first > -kPi) best.push_back({{-kPi, events.front().first}, always});
  for (std::size_t i = 0; i < events.size(); ++i) {
    depth -= events[i].second;
    const double s = events[i].first;
    const double e = i + 1 < events.size() ? events[i + 1].first : kPi;
    if (depth > best_depth) {
      best_depth = depth;
      best.clear();
    }
    if (depth == best_depth && depth > always) {
      best.push_back({{s, e}, depth});
    }
  }
  if (best_depth == always && best.empty()) best.push_back({{-kPi, kPi}, always});
  return best;
}

// Within a plateau every member constraint is satisfied; pick the angle that
// centres them, minimizing sum (d(a) / bound)^2 over [s, e].
double centre_in_range(const std::vector<TimConstraint>& tims, const Arc& range, double step) {
  const double mid = 0.5 * (range.start + range.end);
  std::vector<const TimConstraint*> members;
  for (const auto& t : tims) {
    if (t.consistent(mid)) members.push_back(&t);
  }
  if (members.empty()) return mid;
  auto cost = [&](double a) {
    double c = 0.0;
    for (const auto* t : members) {
      const double r = t->eval(a) / std::max(t->bound, 1e-300);
      c += r * r;
    }
    return c;
  };
  const double len = range.end - range.start;
  const int n = std::clamp(static_cast<int>(std::ceil(len / (step / 50.0))), 1, 2000);
  const double h = len / n;
  int best = 0;
  double best_cost = cost(range.start);
  for (int k = 1; k <= n; ++k) {
    const double c = cost(range.start + k * h);
    if (c < best_cost) {
      best_cost = c;
      best = k;
    }
  }
  // Golden-section search in the bracket around the best sample.
  double lo = range.start + std::max(best - 1, 0) * h;
  double hi = range.start + std::min(best + 1, n) * h;
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
  double c1 = cost(x1), c2 = cost(x2);
  for (int it = 0; it < 60 && hi - lo > 1e-13; ++it) {
    if (c1 <= c2) {
      hi = x2;
      x2 = x1;
      c2 = c1;
      x1 = hi - g * (hi - lo);
      c1 = cost(x1);
    } else {
      lo = x1;
      x1 = x2;
      c1 = c2;
      x2 = lo + g * (hi - lo);
      c2 = cost(x2);
    }
  }
  // Arc ends come from acos and can be off by rounding; stay where every member holds.
  auto feasible = [&](double a) {
    return std::all_of(members.begin(), members.end(), [&](const TimConstraint* t) { return t->consistent(a); });
  };
  const double x = 0.5 * (lo + hi);
  for (double cand : {x, range.start + best * h}) {
    for (int k = 0; k < 60; ++k) {
      if (feasible(cand)) return cand;
      cand = 0.5 * (cand + mid);
    }
  }
  return mid;
}

Mat3 rz_t(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 m;
  m << c, s, 0, -s, c, 0, 0, 0, 1;
  return m;
}

double min_focal(const QueryGeometry& q, int camera_id) { return camera_by_id(q.rig, camera_id).min_focal(); }

// Gauss-Newton on the angular residuals (e1.v, e2.v)/|v| / theta over t' = -Rz^T p.
double fit_translation(const std::vector<const BearingRay*>& rays, const std::vector<Vec3>& fq,
                       const std::vector<double>& theta, Vec3& tq, int iterations) {
  auto cost_at = [&](const Vec3& t, Mat3* h, Vec3* g) {
    double cost = 0.0;
    if (h) h->setZero();
    if (g) g->setZero();
    for (std::size_t k = 0; k < rays.size(); ++k) {
      const Vec3 v = fq[k] + t - rays[k]->origin;
      const double rho = v.norm();
      if (rho < 1e-12) continue;
      Eigen::Matrix<double, 2, 3> e;
      e.row(0) = rays[k]->e1.transpose();
      e.row(1) = rays[k]->e2.transpose();
      const Vec2 r = e * v / (rho * theta[k]);
      // Points behind the camera are infeasible.
      const double behind = rays[k]->direction.dot(v) <= 0.0 ? 1e6 : 0.0;
      cost += r.squaredNorm() + behind;
      if (h) {
        const Eigen::Matrix<double, 2, 3> j = (e / rho - (e * v) * v.transpose() / (rho * rho * rho)) / theta[k];
        *h += j.transpose() * j;
        *g += j.transpose() * r;
      }
    }
    return cost;
  };
  Mat3 h;
  Vec3 g;
  double cost = cost_at(tq, &h, &g);
  double lambda = 1e-6;
  for (int it = 0; it < iterations; ++it) {
    Mat3 damped = h;
    damped.diagonal() *= 1.0 + lambda;
    damped.diagonal().array() += 1e-12;
    const Vec3 step = damped.ldlt().solve(-g);
    const Vec3 trial = tq + step;
    Mat3 h2;
    Vec3 g2;
    const double c2 = cost_at(trial, &h2, &g2);
    if (c2 <= cost) {
      tq = trial;
      cost = c2;
      h = h2;
      g = g2;
      lambda = std::max(lambda * 0.1, 1e-12);
      if (step.norm() < 1e-12 * (1.0 + tq.norm())) break;
    } else {
      lambda *= 10.0;
      if (lambda > 1e8) break;
    }
  }
  return cost;
}

Vec3 initial_tq(double yaw, const std::vector<const BearingRay*>& rays, const std::vector<Vec3>& points) {
  std::vector<BearingRay> rs;
  for (auto* r : rays) rs.push_back(*r);
  const Vec3 p = solvers::translation_for_yaw(yaw, rs, points);
  return -rz_t(yaw) * p;
}

}  // namespace

std::vector<TimConstraint> build_tims(const std::vector<Correspondence>& corrs, const QueryGeometry& q,
                                      const InitConfig& cfg) {
  const int n = static_cast<int>(corrs.size());
  const double h = 1e-3;  // px, central differences
  std::vector<BearingRay> rays(n);
  std::vector<std::array<BearingRay, 4>> perturbed(n);  // +u, -u, +v, -v
  for (int i = 0; i < n; ++i) {
    rays[i] = solvers::ray_for(q, corrs[i]);
    for (int k = 0; k < 4; ++k) {
      Correspondence c = corrs[i];
      c.pixel[k / 2] += (k % 2 == 0) ? h : -h;
      perturbed[i][k] = solvers::ray_for(q, c);
    }
  }
  std::vector<TimConstraint> out;
  out.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const Vec3& fi = corrs[i].point;
      const Vec3& fj = corrs[j].point;
      const double scale = 1.0 + std::max(fi.norm(), fj.norm());
      if ((fi - fj).norm() <= 1e-12 * scale) continue;
      const auto d = solvers::tim_coefficients(rays[i], fi, rays[j], fj);
      if (!d) continue;
      Eigen::Matrix<double, 3, 2> ji, jj;
      bool ok = true;
      for (int k = 0; k < 2 && ok; ++k) {
        const auto ip = solvers::tim_coefficients(perturbed[i][2 * k], fi, rays[j], fj);
        const auto im = solvers::tim_coefficients(perturbed[i][2 * k + 1], fi, rays[j], fj);
        const auto jp = solvers::tim_coefficients(rays[i], fi, perturbed[j][2 * k], fj);
        const auto jm = solvers::tim_coefficients(rays[i], fi, perturbed[j][2 * k + 1], fj);
        if (!ip || !im || !jp || !jm) {
          ok = false;
          break;
        }
        ji.col(k) = (*ip - *im) / (2.0 * h);
        jj.col(k) = (*jp - *jm) / (2.0 * h);
      }
      if (!ok) continue;
      TimConstraint t;
      t.i = i;
      t.j = j;
      t.d = *d;
      // k standard deviations of d(a) = g(a).d with |g| = sqrt(2), taken at the worst yaw.
      Eigen::Matrix<double, 3, 4> jac;
      jac << ji, jj;
      t.bound = cfg.bound_scale * cfg.pixel_sigma * std::sqrt(2.0) * spectral_norm(jac) * cfg.linearization_margin +
                1e-9 * scale;
      out.push_back(t);
    }
  }
  return out;
}

YawVote vote_yaw(const std::vector<TimConstraint>& tims, double step) {
  if (tims.empty()) throw InsufficientDataError("yaw vote: no constraints");
  if (!(step > 0.0)) throw Error("yaw vote: step must be positive");
  YawVote v;
  v.count = -1;
  double best_abs = kTwoPi;
  for (const Plateau& p : deepest_ranges(tims)) {
    const double a = wrap_angle(centre_in_range(tims, p.range, step));
    int count = 0;
    for (const auto& t : tims) count += t.consistent(a);
    if (count > v.count || (count == v.count && std::abs(a) < best_abs)) {
      v.yaw = a;
      v.count = count;
      best_abs = std::abs(a);
    }
  }
  return v;
}

bool translation_compatible(const Correspondence& a, const Correspondence& b, double yaw, double bound_a_px,
                            double bound_b_px, const QueryGeometry& q, double gate) {
  const BearingRay ra = solvers::ray_for(q, a), rb = solvers::ray_for(q, b);
  const Mat3 rt = rz_t(yaw);
  const std::vector<const BearingRay*> rays{&ra, &rb};
  const std::vector<Vec3> fq{rt * a.point, rt * b.point};
  const std::vector<double> theta{bound_a_px / min_focal(q, a.camera_id), bound_b_px / min_focal(q, b.camera_id)};
  Vec3 tq = initial_tq(yaw, rays, {a.point, b.point});
  return fit_translation(rays, fq, theta, tq, 10) <= gate;
}

std::vector<int> maximum_clique(const std::vector<std::vector<char>>& adj) {
  const int n = static_cast<int>(adj.size());
  if (n == 0) return {};
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> degree(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) degree[i] += (i != j && adj[i][j]);
  }
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return degree[x] > degree[y]; });

  std::vector<int> best, current;
  // Greedy colouring gives an upper bound on the clique inside `cands`.
  auto colour_sort = [&](const std::vector<int>& cands, std::vector<int>& sorted, std::vector<int>& colours) {
    std::vector<std::vector<int>> classes;
    for (int v : cands) {
      std::size_t c = 0;
      for (; c < classes.size(); ++c) {
        bool clash = false;
        for (int u : classes[c]) {
          if (adj[u][v]) {
            clash = true;
            break;
          }
        }
        if (!clash) break;
      }
      if (c == classes.size()) classes.emplace_back();
      classes[c].push_back(v);
    }
    sorted.clear();
    colours.clear();
    for (std::size_t c = 0; c < classes.size(); ++c) {
      for (int v : classes[c]) {
        sorted.push_back(v);
        colours.push_back(static_cast<int>(c) + 1);
      }
    }
  };

  auto expand = [&](auto&& self, std::vector<int> cands) -> void {
    std::vector<int> sorted, colours;
    colour_sort(cands, sorted, colours);
    for (int i = static_cast<int>(sorted.size()) - 1; i >= 0; --i) {
      if (current.size() + colours[i] <= best.size()) return;
      const int v = sorted[i];
      current.push_back(v);
      std::vector<int> next;
      for (int k = 0; k < i; ++k) {
        if (adj[v][sorted[k]]) next.push_back(sorted[k]);
      }
      if (next.empty()) {
        if (current.size() > best.size()) best = current;
      } else {
        self(self, next);
      }
      current.pop_back();
    }
  };
  expand(expand, order);
  std::sort(best.begin(), best.end());
  return best;
}

TranslationResult solve_translation(const std::vector<Correspondence>& corrs, double yaw,
                                    const std::vector<double>& bounds_px, const QueryGeometry& q, double gate) {
  const int n = static_cast<int>(corrs.size());
  if (n == 0) throw InsufficientDataError("translation search: no correspondences");
  if (static_cast<int>(bounds_px.size()) != n) throw Error("translation search: one bound per correspondence");
  std::vector<std::vector<char>> adj(n, std::vector<char>(n, 0));
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const bool c = translation_compatible(corrs[i], corrs[j], yaw, bounds_px[i], bounds_px[j], q, gate);
      adj[i][j] = adj[j][i] = c;
    }
  }
  TranslationResult out;
  out.inliers = maximum_clique(adj);

  std::vector<BearingRay> rays;
  std::vector<const BearingRay*> ptrs;
  std::vector<Vec3> fq, pts;
  std::vector<double> theta;
  const Mat3 rt = rz_t(yaw);
  rays.reserve(out.inliers.size());
  for (int i : out.inliers) {
    rays.push_back(solvers::ray_for(q, corrs[i]));
    fq.push_back(rt * corrs[i].point);
    pts.push_back(corrs[i].point);
    theta.push_back(bounds_px[i] / min_focal(q, corrs[i].camera_id));
  }
  for (auto& r : rays) ptrs.push_back(&r);
  if (out.inliers.size() == 1) {
    // One ray fixes the translation only up to depth; keep the closest-approach solution.
    out.translation = solvers::translation_for_yaw(yaw, rays, pts);
    return out;
  }
  Vec3 tq = initial_tq(yaw, ptrs, pts);
  fit_translation(ptrs, fq, theta, tq, 50);
  out.translation = -rt.transpose() * tq;
  return out;
}

InitResult initialize(const std::vector<Correspondence>& corrs, const InitConfig& cfg, const QueryGeometry& q) {
  const auto t0 = std::chrono::steady_clock::now();
  if (corrs.size() < 2) throw InsufficientDataError("initializer needs at least two correspondences");
  InitResult res;

  const auto tims = build_tims(corrs, q, cfg);
  res.tim_count = static_cast<int>(tims.size());
  const YawVote vote = vote_yaw(tims, cfg.yaw_step);
  res.yaw_consensus = vote.count;

  const double slack = cfg.yaw_step * cfg.yaw_slack_fraction;
  std::vector<char> in_yaw(corrs.size(), 0);
  for (const auto& t : tims) {
    if (t.consistent(vote.yaw, slack)) in_yaw[t.i] = in_yaw[t.j] = 1;
  }
  std::vector<Correspondence> filtered;
  std::vector<double> bounds;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    if (!in_yaw[i]) continue;
    res.yaw_inliers.push_back(static_cast<int>(i));
    filtered.push_back(corrs[i]);
    // Pixel noise bound plus the displacement a small yaw error can cause.
    const double f = min_focal(q, corrs[i].camera_id);
    bounds.push_back(cfg.bound_scale * cfg.pixel_sigma * cfg.linearization_margin + 2.0 * f * cfg.yaw_margin + 1e-6);
  }
  if (static_cast<int>(filtered.size()) < cfg.min_inliers)
    throw NoConsensusError("initializer: " + std::to_string(filtered.size()) + " yaw inliers, need " +
                           std::to_string(cfg.min_inliers));

  const TranslationResult tr = solve_translation(filtered, vote.yaw, bounds, q, cfg.compatibility_gate);
  if (static_cast<int>(tr.inliers.size()) < cfg.min_inliers)
    throw NoConsensusError("initializer: translation clique of " + std::to_string(tr.inliers.size()) + ", need " +
                           std::to_string(cfg.min_inliers));
  res.pose = YawPose(vote.yaw, tr.translation);

  const solvers::Reprojector proj(q);
  std::vector<int> clique;
  for (int k : tr.inliers) clique.push_back(res.yaw_inliers[k]);
  solvers::RefineResult ref = solvers::refine_pose(res.pose, corrs, clique, proj, cfg.pixel_sigma);

  const double gate = cfg.final_threshold_sigmas * cfg.pixel_sigma + 1e-6;
  auto select = [&](const YawPose& pose) {
    std::vector<int> sel;
    for (int i : res.yaw_inliers) {
      if (proj.error(pose, corrs[i]) <= gate) sel.push_back(i);
    }
    return sel;
  };
  std::vector<int> final_set = select(ref.pose);
  if (static_cast<int>(final_set.size()) >= cfg.min_inliers) {
    ref = solvers::refine_pose(ref.pose, corrs, final_set, proj, cfg.pixel_sigma);
    final_set = select(ref.pose);
  }
  if (static_cast<int>(final_set.size()) < cfg.min_inliers) final_set = clique;
  res.refined = ref.pose;
  res.covariance = ref.covariance;
  res.translation_inliers = std::move(final_set);
  res.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace vilo::init
