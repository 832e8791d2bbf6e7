//! Projection of a candidate voltage onto the three-disc feasible set.
//!
//! The production path is a fixed-iteration ADMM splitting in Cartesian dq
//! coordinates, cheap enough for an embedded control period. Two reference
//! solvers back it up for validation: a polar-coordinate oracle that scans
//! angle and solves the feasible magnitude interval in closed form, and an
//! exact weighted-QCQP solver that enumerates the KKT candidate set.

use serde::{Deserialize, Serialize};

use crate::constraints::{DiscConstraint, FeasibleSet};
use crate::frames::{Frame, PlanarVector};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdmmConfig {
    /// Penalty parameter.
    pub rho: f64,
    /// Fixed iteration budget; the solver never exits early.
    pub n_it: u32,
    /// Over-relaxation factor in [1, 2].
    pub alpha: f64,
    /// Angle-deviation weight in the projection cost.
    pub w_theta: f64,
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<(), ProjectionError> {
        if !(self.rho > 0.0) {
            return Err(ProjectionError::BadConfig("rho must be positive"));
        }
        if self.n_it == 0 {
            return Err(ProjectionError::BadConfig("n_it must be at least 1"));
        }
        if !(1.0..=2.0).contains(&self.alpha) {
            return Err(ProjectionError::BadConfig("alpha must lie in [1, 2]"));
        }
        if !(self.w_theta > 0.0) {
            return Err(ProjectionError::BadConfig("w_theta must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProjectionError {
    #[error("invalid solver configuration: {0}")]
    BadConfig(&'static str),
    #[error("feasible set is empty (no magnitude interval at any angle)")]
    EmptySet,
    #[error("cannot recover angle and magnitude from a zero vector")]
    ZeroVector,
}

/// Outcome of one projection call.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionResult {
    /// Projected voltage in the candidate-aligned dq frame.
    pub v_dq: PlanarVector,
    /// True iff any splitting update clipped, i.e. the candidate moved.
    pub active: bool,
    /// max_n ||v - z_n|| at exit; zero when the candidate was feasible.
    pub residual: f64,
    /// Heuristic emptiness flag: false when a long diagnostic run still
    /// shows a large splitting residual.
    pub feasible: bool,
}

/// Euclidean projection onto a disc.
pub fn circular_project(xi: &PlanarVector, disc: &DiscConstraint) -> PlanarVector {
    let dx = xi.x - disc.center.x;
    let dy = xi.y - disc.center.y;
    let dist = dx.hypot(dy);
    if dist <= disc.radius {
        return *xi;
    }
    let k = disc.radius / dist;
    PlanarVector { x: disc.center.x + k * dx, y: disc.center.y + k * dy, frame: xi.frame }
}

/// Project the droop candidate (V_hat, 0) onto the feasible set in its dq
/// frame, minimizing the anisotropic cost with weight matrix
/// W = diag{1, w_theta / V_hat^2} (small-angle weighting of the angle error).
///
/// Runs exactly `cfg.n_it` iterations of the over-relaxed splitting with
/// cold-started duals, except that an already-feasible candidate returns
/// immediately and bit-identically.
pub fn admm_project(
    candidate: &PlanarVector,
    set: &FeasibleSet,
    cfg: &AdmmConfig,
    v_hat: f64,
) -> ProjectionResult {
    debug_assert_eq!(candidate.frame, Frame::Rotating);
    debug_assert!(v_hat > 0.0);
    let discs = set.discs();
    if discs.iter().all(|d| d.contains(candidate)) {
        return ProjectionResult { v_dq: *candidate, active: false, residual: 0.0, feasible: true };
    }

    let w_q = cfg.w_theta / (v_hat * v_hat);
    let inv_d = 1.0 / (1.0 + 3.0 * cfg.rho);
    let inv_q = 1.0 / (w_q + 3.0 * cfg.rho);

    let mut v = *candidate;
    let mut z = [*candidate; 3];
    let mut y = [PlanarVector::zero(Frame::Rotating); 3];
    let mut active = false;

    for _ in 0..cfg.n_it {
        let mut sx = 0.0;
        let mut sy = 0.0;
        for n in 0..3 {
            sx += z[n].x - y[n].x;
            sy += z[n].y - y[n].y;
        }
        let v_new = PlanarVector::rotating(
            (candidate.x + cfg.rho * sx) * inv_d,
            (w_q * candidate.y + cfg.rho * sy) * inv_q,
        );
        let relaxed = PlanarVector::rotating(
            v_new.x + (cfg.alpha - 1.0) * (v_new.x - v.x),
            v_new.y + (cfg.alpha - 1.0) * (v_new.y - v.y),
        );
        for n in 0..3 {
            let xi = PlanarVector::rotating(relaxed.x + y[n].x, relaxed.y + y[n].y);
            let zn = circular_project(&xi, discs[n]);
            if zn.x != xi.x || zn.y != xi.y {
                active = true;
            }
            y[n] = PlanarVector::rotating(y[n].x + relaxed.x - zn.x, y[n].y + relaxed.y - zn.y);
            z[n] = zn;
        }
        v = v_new;
    }

    let residual = z
        .iter()
        .map(|zn| (v.x - zn.x).hypot(v.y - zn.y))
        .fold(0.0f64, f64::max);
    // In diagnostic runs (long budgets) a stubbornly large residual is the
    // empty-intersection signature; short production budgets never flag.
    let feasible = !(cfg.n_it >= 50 && residual > 0.05 * set.modulation.radius);
    ProjectionResult { v_dq: v, active, residual, feasible }
}

/// Recover the voltage angle and magnitude from the projected dq vector.
pub fn recover_polar(v_dq: &PlanarVector, theta_hat: f64) -> Result<(f64, f64), ProjectionError> {
    let norm = v_dq.norm();
    if norm < 1e-12 {
        return Err(ProjectionError::ZeroVector);
    }
    Ok((theta_hat + v_dq.y.atan2(v_dq.x), norm))
}

/// Feasible magnitude interval at a fixed angle: the set of V >= 0 with
/// V*(cos t, sin t) inside every disc. Returns None when empty.
fn magnitude_interval(discs: &[&DiscConstraint; 3], cos_t: f64, sin_t: f64) -> Option<(f64, f64)> {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for d in discs {
        let proj = cos_t * d.center.x + sin_t * d.center.y;
        let c2 = d.center.x * d.center.x + d.center.y * d.center.y;
        let disc = proj * proj - c2 + d.radius * d.radius;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        lo = lo.max(proj - s);
        hi = hi.min(proj + s);
    }
    if hi < lo {
        None
    } else {
        Some((lo, hi))
    }
}

fn polar_cost_at(
    discs: &[&DiscConstraint; 3],
    theta: f64,
    theta_hat: f64,
    v_hat: f64,
    w_theta: f64,
) -> Option<(f64, f64)> {
    let (s, c) = theta.sin_cos();
    let (lo, hi) = magnitude_interval(discs, c, s)?;
    let v = v_hat.clamp(lo, hi);
    let dth = theta - theta_hat;
    Some((w_theta * dth * dth + (v - v_hat) * (v - v_hat), v))
}

/// Reference projection in polar coordinates: minimize
/// w_theta (theta - theta_hat)^2 + (V - V_hat)^2 over the stationary-frame
/// disc intersection, by scanning the angle and solving the magnitude
/// interval exactly at each angle. Test and oracle use only.
pub fn polar_project_oracle(
    theta_hat: f64,
    v_hat: f64,
    discs_ab: &[DiscConstraint; 3],
    w_theta: f64,
) -> Result<(f64, f64), ProjectionError> {
    let discs = [&discs_ab[0], &discs_ab[1], &discs_ab[2]];
    // A feasible candidate is its own projection.
    if let Some((lo, hi)) = magnitude_interval(&discs, theta_hat.cos(), theta_hat.sin()) {
        if (lo..=hi).contains(&v_hat) {
            return Ok((theta_hat, v_hat));
        }
    }
    const N: usize = 4096;
    let mut best: Option<(f64, f64, f64)> = None;
    for k in 0..N {
        let theta = theta_hat - std::f64::consts::PI
            + (k as f64 + 0.5) / N as f64 * 2.0 * std::f64::consts::PI;
        if let Some((cost, v)) = polar_cost_at(&discs, theta, theta_hat, v_hat, w_theta) {
            if best.map_or(true, |(bc, _, _)| cost < bc) {
                best = Some((cost, theta, v));
            }
        }
    }
    let (_, theta0, _) = best.ok_or(ProjectionError::EmptySet)?;
    // Ternary refinement around the winning sample. The reduced cost is
    // continuous in the angle; a two-grid-cell bracket isolates the local
    // valley that contains the sampled minimum.
    let step = 2.0 * std::f64::consts::PI / N as f64;
    let mut a = theta0 - 2.0 * step;
    let mut b = theta0 + 2.0 * step;
    let eval = |t: f64| {
        polar_cost_at(&discs, t, theta_hat, v_hat, w_theta).map_or(f64::INFINITY, |(c, _)| c)
    };
    for _ in 0..200 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if eval(m1) <= eval(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let theta = 0.5 * (a + b);
    let (_, v) = polar_cost_at(&discs, theta, theta_hat, v_hat, w_theta)
        .ok_or(ProjectionError::EmptySet)?;
    Ok((theta, v))
}

/// Minimize sum_i w_i (x_i - xi_i)^2 subject to ||x - c|| <= r. Interior
/// candidates return unchanged; otherwise the multiplier of the KKT secular
/// equation is bracketed and bisected.
fn weighted_disc_project(xi: [f64; 2], w: [f64; 2], d: &DiscConstraint) -> [f64; 2] {
    let e = [xi[0] - d.center.x, xi[1] - d.center.y];
    if e[0].hypot(e[1]) <= d.radius {
        return xi;
    }
    // g(lam) = sum (w_i e_i / (w_i + lam))^2 - r^2, strictly decreasing.
    let g = |lam: f64| -> f64 {
        let a0 = w[0] * e[0] / (w[0] + lam);
        let a1 = w[1] * e[1] / (w[1] + lam);
        a0 * a0 + a1 * a1 - d.radius * d.radius
    };
    let mut hi = 1.0;
    while g(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e30 {
            break;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lam = 0.5 * (lo + hi);
    [
        d.center.x + w[0] * e[0] / (w[0] + lam),
        d.center.y + w[1] * e[1] / (w[1] + lam),
    ]
}

/// Intersection points of two circles, if any.
fn circle_intersections(a: &DiscConstraint, b: &DiscConstraint) -> Vec<[f64; 2]> {
    let dx = b.center.x - a.center.x;
    let dy = b.center.y - a.center.y;
    let d = dx.hypot(dy);
    if d < 1e-15 || d > a.radius + b.radius || d < (a.radius - b.radius).abs() {
        return Vec::new();
    }
    let t = (a.radius * a.radius - b.radius * b.radius + d * d) / (2.0 * d);
    let h2 = a.radius * a.radius - t * t;
    let h = h2.max(0.0).sqrt();
    let mx = a.center.x + t * dx / d;
    let my = a.center.y + t * dy / d;
    let ox = -dy / d * h;
    let oy = dx / d * h;
    if h < 1e-15 {
        vec![[mx, my]]
    } else {
        vec![[mx + ox, my + oy], [mx - ox, my - oy]]
    }
}

/// Exact solution of the weighted projection onto the disc intersection by
/// KKT candidate enumeration: the optimum is the candidate itself, a
/// single-disc projection feasible for the others, or a pairwise circle
/// intersection point. Returns None when the intersection is empty.
pub fn qcqp_project_oracle(
    candidate: &PlanarVector,
    set: &FeasibleSet,
    w_theta: f64,
    v_hat: f64,
) -> Option<PlanarVector> {
    let discs = set.discs();
    let tol = 1e-10;
    let xi = [candidate.x, candidate.y];
    let w = [1.0, w_theta / (v_hat * v_hat)];
    if discs.iter().all(|d| d.signed_distance(candidate) <= tol) {
        return Some(*candidate);
    }
    let cost = |p: [f64; 2]| -> f64 {
        w[0] * (p[0] - xi[0]) * (p[0] - xi[0]) + w[1] * (p[1] - xi[1]) * (p[1] - xi[1])
    };
    let feasible = |p: [f64; 2]| -> bool {
        let v = PlanarVector { x: p[0], y: p[1], frame: candidate.frame };
        discs.iter().all(|d| d.signed_distance(&v) <= tol)
    };
    let mut best: Option<([f64; 2], f64)> = None;
    let mut consider = |p: [f64; 2]| {
        if feasible(p) {
            let c = cost(p);
            if best.map_or(true, |(_, bc)| c < bc) {
                best = Some((p, c));
            }
        }
    };
    for d in discs {
        consider(weighted_disc_project(xi, w, d));
    }
    for a in 0..3 {
        for b in (a + 1)..3 {
            for p in circle_intersections(discs[a], discs[b]) {
                consider(p);
            }
        }
    }
    best.map(|(p, _)| PlanarVector { x: p[0], y: p[1], frame: candidate.frame })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::DiscConstraint;

    fn disc(cx: f64, cy: f64, r: f64) -> DiscConstraint {
        DiscConstraint { center: PlanarVector::rotating(cx, cy), radius: r }
    }

    fn set(d0: DiscConstraint, d1: DiscConstraint, d2: DiscConstraint) -> FeasibleSet {
        FeasibleSet { modulation: d0, cur_step: d1, cur_cycle: d2, frame_angle: 0.0 }
    }

    #[test]
    fn circular_project_cases() {
        let d = disc(0.0, 0.0, 1.0);
        let p = circular_project(&PlanarVector::rotating(2.0, 0.0), &d);
        assert!((p.x - 1.0).abs() < 1e-15 && p.y.abs() < 1e-15);
        let inside = PlanarVector::rotating(0.3, -0.4);
        assert_eq!(circular_project(&inside, &d), inside);
        let off = disc(1.0, 0.0, 1.0);
        let p2 = circular_project(&PlanarVector::rotating(3.0, 0.0), &off);
        assert!((p2.x - 2.0).abs() < 1e-15 && p2.y.abs() < 1e-15);
    }

    #[test]
    fn feasible_candidate_is_bit_identical() {
        let s = set(disc(0.0, 0.0, 1.2), disc(0.1, 0.0, 1.5), disc(-0.05, 0.02, 1.1));
        let cand = PlanarVector::rotating(0.95, 0.0);
        let cfg = AdmmConfig { rho: 5.0, n_it: 5, alpha: 1.6, w_theta: 80.0 };
        let out = admm_project(&cand, &s, &cfg, 0.95);
        assert!(!out.active);
        assert_eq!(out.v_dq, cand);
        assert_eq!(out.residual, 0.0);
    }

    #[test]
    fn isotropic_single_disc_matches_circular_projection() {
        // With w_theta = V_hat^2 the weight matrix is the identity, so a
        // single binding disc reduces to the Euclidean circular limiter.
        let tight = disc(0.0, 0.0, 0.8);
        let s = set(disc(0.0, 0.0, 5.0), disc(0.0, 0.0, 5.0), tight);
        let v_hat = 1.3f64;
        let cand = PlanarVector::rotating(v_hat, 0.0);
        let cfg = AdmmConfig { rho: 1.0, n_it: 10, alpha: 1.6, w_theta: v_hat * v_hat };
        let out = admm_project(&cand, &s, &cfg, v_hat);
        let exact = circular_project(&cand, &tight);
        let err = (out.v_dq.x - exact.x).hypot(out.v_dq.y - exact.y);
        assert!(out.active);
        assert!(err < 0.01 * v_hat, "err = {err}");
    }

    #[test]
    fn recover_polar_cases() {
        let (t, v) = recover_polar(&PlanarVector::rotating(1.1, 0.0), 0.4).unwrap();
        assert!((t - 0.4).abs() < 1e-15 && (v - 1.1).abs() < 1e-15);
        let (t2, v2) = recover_polar(&PlanarVector::rotating(0.0, 1.0), 0.0).unwrap();
        assert!((t2 - std::f64::consts::FRAC_PI_2).abs() < 1e-12 && (v2 - 1.0).abs() < 1e-15);
        assert!(recover_polar(&PlanarVector::rotating(0.0, 0.0), 0.0).is_err());
        // Round trip through an off-axis rotation.
        for k in 0..8 {
            let theta = 0.2 + 0.1 * k as f64;
            let theta_hat = 0.25;
            let v = 1.07;
            let dq =
                PlanarVector::rotating(v * (theta - theta_hat).cos(), v * (theta - theta_hat).sin());
            let (tr, vr) = recover_polar(&dq, theta_hat).unwrap();
            assert!((tr - theta).abs() < 1e-12 && (vr - v).abs() < 1e-12);
        }
    }

    #[test]
    fn polar_oracle_feasible_and_stiff_angle() {
        let discs = [
            DiscConstraint { center: PlanarVector::stationary(0.0, 0.0), radius: 1.2 },
            DiscConstraint { center: PlanarVector::stationary(0.2, 0.1), radius: 1.2 },
            DiscConstraint { center: PlanarVector::stationary(-0.1, 0.0), radius: 1.3 },
        ];
        let (t, v) = polar_project_oracle(0.3, 0.9, &discs, 80.0).unwrap();
        assert_eq!((t, v), (0.3, 0.9));
        // Huge angle weight: angle pinned, magnitude shrinks to feasibility.
        let tight = [
            DiscConstraint { center: PlanarVector::stationary(0.0, 0.0), radius: 0.7 },
            discs[1],
            discs[2],
        ];
        let (t2, v2) = polar_project_oracle(0.3, 1.5, &tight, 1e9).unwrap();
        assert!((t2 - 0.3).abs() < 1e-4);
        assert!((v2 - 0.7).abs() < 1e-3);
    }

    #[test]
    fn polar_oracle_reports_empty() {
        let discs = [
            DiscConstraint { center: PlanarVector::stationary(10.0, 0.0), radius: 0.5 },
            DiscConstraint { center: PlanarVector::stationary(-10.0, 0.0), radius: 0.5 },
            DiscConstraint { center: PlanarVector::stationary(0.0, 0.0), radius: 0.5 },
        ];
        assert!(matches!(
            polar_project_oracle(0.0, 1.0, &discs, 80.0),
            Err(ProjectionError::EmptySet)
        ));
    }

    #[test]
    fn qcqp_oracle_single_disc_analytic() {
        // One binding disc centered on the d axis: the weighted projection
        // onto it has a closed form on the axis.
        let s = set(disc(0.0, 0.0, 1.0), disc(0.0, 0.0, 8.0), disc(0.0, 0.0, 9.0));
        let cand = PlanarVector::rotating(1.7, 0.0);
        let out = qcqp_project_oracle(&cand, &s, 80.0, 1.7).unwrap();
        assert!((out.x - 1.0).abs() < 1e-9 && out.y.abs() < 1e-9);
    }

    #[test]
    fn qcqp_oracle_empty_set() {
        let s = set(disc(10.0, 0.0, 0.5), disc(-10.0, 0.0, 0.5), disc(0.0, 0.0, 0.5));
        let cand = PlanarVector::rotating(1.0, 0.0);
        assert!(qcqp_project_oracle(&cand, &s, 80.0, 1.0).is_none());
    }
}
