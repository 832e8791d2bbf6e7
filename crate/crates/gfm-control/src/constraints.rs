//! Feasible-voltage-set construction: the modulation disc plus one-step and
//! one-cycle current-prediction discs, derived from a zero-order-hold
//! discretization of the converter-side RL filter.
//!
//! The discretized filter maps are scaled rotations (the complex algebra of
//! the symmetric RL dynamics in a rotating frame), so 2x2 matrices are stored
//! as a single (re, im) pair and all products commute exactly.

use serde::{Deserialize, Serialize};

use crate::frames::{Frame, PlanarVector};

/// Converter electrical ratings and limits, in per unit on the converter
/// base. `omega_base` converts per-unit reactances into real time constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConverterRatings {
    /// Filter inductance, pu.
    pub l_f: f64,
    /// Filter equivalent series resistance, pu.
    pub r_f: f64,
    /// Filter capacitance, pu (plant side only; not used by the discs).
    pub c_f: Option<f64>,
    /// Long-term current limit, pu. Defines the disc radii.
    pub i_max: f64,
    /// Short-term current limit, pu. Reporting threshold only.
    pub i_max_shrt: f64,
    /// Modulation limit, pu of peak phase voltage.
    pub v_max: f64,
    /// DC-link voltage, volts.
    pub v_dc: f64,
    /// Peak phase base voltage, volts.
    pub v_base_peak: f64,
    /// Angular frequency base, rad/s.
    pub omega_base: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ConstraintError {
    #[error("filter resistance must be positive (r_f = {0}); the disc radius is singular at r_f = 0 whenever omega_dq*tau hits a full turn")]
    NonPositiveResistance(f64),
    #[error("current-disc radius is not finite: denominator {0:.3e} below 1e-30")]
    NonFiniteRadius(f64),
    #[error("disc radius {0:.3e} below 1e-9 pu; treating the set as empty")]
    EmptySet(f64),
    #[error("invalid rating: {0}")]
    InvalidRating(String),
}

impl ConverterRatings {
    /// Ratings with the modulation limit derived from the dc link:
    /// V_max = v_dc / 2, expressed on the peak phase-voltage base.
    pub fn from_dc_link(
        l_f: f64,
        r_f: f64,
        c_f: Option<f64>,
        i_max: f64,
        i_max_shrt: f64,
        v_dc: f64,
        v_base_peak: f64,
        omega_base: f64,
    ) -> Result<Self, ConstraintError> {
        let r = Self {
            l_f,
            r_f,
            c_f,
            i_max,
            i_max_shrt,
            v_max: 0.5 * v_dc / v_base_peak,
            v_dc,
            v_base_peak,
            omega_base,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        if self.r_f <= 0.0 {
            return Err(ConstraintError::NonPositiveResistance(self.r_f));
        }
        let positive = [
            ("l_f", self.l_f),
            ("i_max", self.i_max),
            ("i_max_shrt", self.i_max_shrt),
            ("v_max", self.v_max),
            ("v_dc", self.v_dc),
            ("v_base_peak", self.v_base_peak),
            ("omega_base", self.omega_base),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConstraintError::InvalidRating(format!("{name} = {v}")));
            }
        }
        if self.i_max_shrt < self.i_max {
            return Err(ConstraintError::InvalidRating(format!(
                "i_max_shrt {} below i_max {}",
                self.i_max_shrt, self.i_max
            )));
        }
        if (self.v_max - 0.5 * self.v_dc / self.v_base_peak).abs() > 1e-12 {
            return Err(ConstraintError::InvalidRating(format!(
                "v_max {} does not equal v_dc/2 on the voltage base",
                self.v_max
            )));
        }
        Ok(())
    }
}

/// A 2x2 matrix of the form [[re, -im], [im, re]]: a rotation scaled by the
/// modulus. Closed under products and inverses, and commutes with its kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledRotation {
    pub re: f64,
    pub im: f64,
}

impl ScaledRotation {
    pub const IDENTITY: Self = Self { re: 1.0, im: 0.0 };

    pub fn from_polar(modulus: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { re: modulus * c, im: modulus * s }
    }

    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn mul(&self, o: &Self) -> Self {
        Self { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
    }

    pub fn inv(&self) -> Self {
        let n2 = self.re * self.re + self.im * self.im;
        Self { re: self.re / n2, im: -self.im / n2 }
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self { re: self.re - o.re, im: self.im - o.im }
    }

    /// Apply to a planar vector; the frame tag passes through.
    pub fn apply(&self, v: &PlanarVector) -> PlanarVector {
        PlanarVector { x: self.re * v.x - self.im * v.y, y: self.im * v.x + self.re * v.y, frame: v.frame }
    }

    /// Dense form for callers that want the actual matrix.
    pub fn as_matrix(&self) -> [[f64; 2]; 2] {
        [[self.re, -self.im], [self.im, self.re]]
    }
}

/// Zero-order-hold discretization of the filter current dynamics over a
/// horizon `tau`, in a frame rotating at `omega_dq`.
#[derive(Clone, Copy, Debug)]
pub struct FilterDiscretization {
    /// State transition of the filter current.
    pub a_tau: ScaledRotation,
    /// Gain from the held voltage difference to the current.
    pub b_tau: ScaledRotation,
    /// Disc-center gain: center = v_f + v_ad - M_tau * i_f.
    pub m_tau: ScaledRotation,
    pub omega_dq: f64,
    pub tau: f64,
}

/// Discretize the RL filter over `tau` at frame frequency `omega_dq` (rad/s).
///
/// A_tau = exp(-(r_f/l_f) wb tau) * R(-omega_dq tau)
/// B_tau = Z_f^{-1} (I - A_tau),  Z_f = r_f + j omega_dq l_f / wb
/// M_tau = (A_tau^{-1} - I)^{-1} Z_f
pub fn discretized_filter_matrices(
    ratings: &ConverterRatings,
    omega_dq: f64,
    tau: f64,
) -> Result<FilterDiscretization, ConstraintError> {
    if ratings.r_f <= 0.0 {
        return Err(ConstraintError::NonPositiveResistance(ratings.r_f));
    }
    assert!(tau > 0.0, "discretization horizon must be positive");
    let decay = (-(ratings.r_f / ratings.l_f) * ratings.omega_base * tau).exp();
    let a_tau = ScaledRotation::from_polar(decay, -omega_dq * tau);
    let z_f = ScaledRotation { re: ratings.r_f, im: omega_dq * ratings.l_f / ratings.omega_base };
    let b_tau = z_f.inv().mul(&ScaledRotation::IDENTITY.sub(&a_tau));
    let m_tau = a_tau.inv().sub(&ScaledRotation::IDENTITY).inv().mul(&z_f);
    Ok(FilterDiscretization { a_tau, b_tau, m_tau, omega_dq, tau })
}

/// Measurement snapshot the current prediction is built from. All vectors
/// must share one frame (stationary in the ADMM path before the dq rotation).
#[derive(Clone, Copy, Debug)]
pub struct PredictionContext {
    pub i_f: PlanarVector,
    pub v_f: PlanarVector,
    pub v_ad: PlanarVector,
    pub omega_dq: f64,
    pub tau: f64,
}

impl PredictionContext {
    fn common_frame(&self) -> Frame {
        debug_assert_eq!(self.i_f.frame, self.v_f.frame);
        debug_assert_eq!(self.i_f.frame, self.v_ad.frame);
        self.i_f.frame
    }
}

/// Forward prediction of the filter current after `ctx.tau` with the
/// converter voltage held at `v_gfm`: A_tau i_f + B_tau (v_gfm - v_ad - v_f).
pub fn predict_current(
    ctx: &PredictionContext,
    v_gfm: &PlanarVector,
    ratings: &ConverterRatings,
) -> Result<PlanarVector, ConstraintError> {
    let d = discretized_filter_matrices(ratings, ctx.omega_dq, ctx.tau)?;
    Ok(predict_current_with(&d, ctx, v_gfm))
}

/// Prediction using already-discretized matrices (the per-step controller
/// path; avoids re-deriving the exponentials every control period).
pub fn predict_current_with(
    d: &FilterDiscretization,
    ctx: &PredictionContext,
    v_gfm: &PlanarVector,
) -> PlanarVector {
    let frame = ctx.common_frame();
    debug_assert_eq!(v_gfm.frame, frame);
    let drive = PlanarVector {
        x: v_gfm.x - ctx.v_ad.x - ctx.v_f.x,
        y: v_gfm.y - ctx.v_ad.y - ctx.v_f.y,
        frame,
    };
    let a_i = d.a_tau.apply(&ctx.i_f);
    let b_v = d.b_tau.apply(&drive);
    PlanarVector { x: a_i.x + b_v.x, y: a_i.y + b_v.y, frame }
}

/// A disc `{ v : ||v - center|| <= radius }` of admissible converter voltages.
#[derive(Clone, Copy, Debug)]
pub struct DiscConstraint {
    pub center: PlanarVector,
    pub radius: f64,
}

impl DiscConstraint {
    pub fn contains(&self, v: &PlanarVector) -> bool {
        debug_assert_eq!(v.frame, self.center.frame);
        (v.x - self.center.x).hypot(v.y - self.center.y) <= self.radius
    }

    pub fn signed_distance(&self, v: &PlanarVector) -> f64 {
        (v.x - self.center.x).hypot(v.y - self.center.y) - self.radius
    }
}

/// Radius of the current disc at horizon `tau`:
/// i_max * sqrt((l_f^2 w^2 + r_f^2) / (1 + e^{-2 rt} - 2 e^{-rt} cos(w tau)))
/// with rt = (r_f/l_f) wb tau and w the frame frequency in pu of wb.
fn current_disc_radius(
    ratings: &ConverterRatings,
    omega_dq: f64,
    tau: f64,
) -> Result<f64, ConstraintError> {
    let decay = (-(ratings.r_f / ratings.l_f) * ratings.omega_base * tau).exp();
    let w_pu = omega_dq / ratings.omega_base;
    let num = ratings.l_f * ratings.l_f * w_pu * w_pu + ratings.r_f * ratings.r_f;
    let den = 1.0 + decay * decay - 2.0 * decay * (omega_dq * tau).cos();
    if den < 1e-30 {
        return Err(ConstraintError::NonFiniteRadius(den));
    }
    let radius = ratings.i_max * (num / den).sqrt();
    if radius < 1e-9 {
        return Err(ConstraintError::EmptySet(radius));
    }
    Ok(radius)
}

/// Disc of voltages that keep the predicted current within `i_max` at the
/// context horizon. Center and radius follow the held-input discretization.
pub fn current_disc(
    ctx: &PredictionContext,
    ratings: &ConverterRatings,
) -> Result<DiscConstraint, ConstraintError> {
    let d = discretized_filter_matrices(ratings, ctx.omega_dq, ctx.tau)?;
    current_disc_with(&d, ctx, ratings)
}

/// Current disc from precomputed matrices.
pub fn current_disc_with(
    d: &FilterDiscretization,
    ctx: &PredictionContext,
    ratings: &ConverterRatings,
) -> Result<DiscConstraint, ConstraintError> {
    let frame = ctx.common_frame();
    let radius = current_disc_radius(ratings, d.omega_dq, d.tau)?;
    let m_i = d.m_tau.apply(&ctx.i_f);
    let center = PlanarVector {
        x: ctx.v_f.x + ctx.v_ad.x - m_i.x,
        y: ctx.v_f.y + ctx.v_ad.y - m_i.y,
        frame,
    };
    Ok(DiscConstraint { center, radius })
}

/// Modulation-limit disc. The center sits at the damping voltage: the switch
/// node sees v_gfm - v_ad, so points on this boundary map to switch-node
/// references of magnitude exactly V_max.
pub fn modulation_disc(v_ad: &PlanarVector, ratings: &ConverterRatings) -> DiscConstraint {
    DiscConstraint { center: *v_ad, radius: ratings.v_max }
}

/// The three discs expressed in a common rotating frame.
#[derive(Clone, Copy, Debug)]
pub struct FeasibleSet {
    pub modulation: DiscConstraint,
    pub cur_step: DiscConstraint,
    pub cur_cycle: DiscConstraint,
    /// Angle of the dq frame the disc centers are expressed in.
    pub frame_angle: f64,
}

impl FeasibleSet {
    pub fn discs(&self) -> [&DiscConstraint; 3] {
        [&self.modulation, &self.cur_step, &self.cur_cycle]
    }

    pub fn contains(&self, v: &PlanarVector) -> bool {
        self.discs().iter().all(|d| d.contains(v))
    }
}

/// Build the feasible set from stationary-frame measurements and rotate it
/// into the dq frame at `theta_hat` (centers rotated by -theta_hat, radii
/// unchanged).
#[allow(clippy::too_many_arguments)]
pub fn build_feasible_set(
    i_f: &PlanarVector,
    v_f: &PlanarVector,
    v_ad: &PlanarVector,
    theta_hat: f64,
    omega_dq: f64,
    ratings: &ConverterRatings,
    tau_ctr: f64,
    tau_cyc: f64,
) -> Result<FeasibleSet, ConstraintError> {
    assert!(tau_cyc > tau_ctr && tau_ctr > 0.0);
    let step = discretized_filter_matrices(ratings, omega_dq, tau_ctr)?;
    let cycle = discretized_filter_matrices(ratings, omega_dq, tau_cyc)?;
    build_feasible_set_with(&step, &cycle, i_f, v_f, v_ad, theta_hat, ratings)
}

/// Feasible set from precomputed step/cycle discretizations.
pub fn build_feasible_set_with(
    step: &FilterDiscretization,
    cycle: &FilterDiscretization,
    i_f: &PlanarVector,
    v_f: &PlanarVector,
    v_ad: &PlanarVector,
    theta_hat: f64,
    ratings: &ConverterRatings,
) -> Result<FeasibleSet, ConstraintError> {
    debug_assert_eq!(i_f.frame, Frame::Stationary);
    let ctx_step = PredictionContext {
        i_f: *i_f,
        v_f: *v_f,
        v_ad: *v_ad,
        omega_dq: step.omega_dq,
        tau: step.tau,
    };
    let ctx_cycle = PredictionContext { omega_dq: cycle.omega_dq, tau: cycle.tau, ..ctx_step };
    let to_dq = |d: DiscConstraint| -> DiscConstraint {
        let mut c = crate::frames::rotate(&d.center, -theta_hat);
        c.frame = Frame::Rotating;
        DiscConstraint { center: c, radius: d.radius }
    };
    Ok(FeasibleSet {
        modulation: to_dq(modulation_disc(v_ad, ratings)),
        cur_step: to_dq(current_disc_with(step, &ctx_step, ratings)?),
        cur_cycle: to_dq(current_disc_with(cycle, &ctx_cycle, ratings)?),
        frame_angle: theta_hat,
    })
}

/// True iff the measured state satisfies the non-emptiness precondition:
/// the current is within its limit and v_f + v_ad is within the modulation
/// disc. Under this condition the three-disc intersection provably contains
/// v_f + v_ad.
pub fn feasibility_precondition_holds(
    i_f: &PlanarVector,
    v_f: &PlanarVector,
    v_ad: &PlanarVector,
    ratings: &ConverterRatings,
) -> bool {
    i_f.norm() <= ratings.i_max && (v_f.x + v_ad.x).hypot(v_f.y + v_ad.y) <= ratings.v_max
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vsc_ratings() -> ConverterRatings {
        ConverterRatings::from_dc_link(
            0.075,
            0.0076,
            Some(0.09),
            1.2,
            1.5,
            400.0,
            208.0 * (2.0f64 / 3.0).sqrt(),
            2.0 * std::f64::consts::PI * 60.0,
        )
        .unwrap()
    }

    #[test]
    fn v_max_is_half_dc_link() {
        let r = vsc_ratings();
        assert!((r.v_max - 1.1777).abs() < 1e-3);
        assert!((r.v_max - 0.5 * r.v_dc / r.v_base_peak).abs() < 1e-15);
    }

    #[test]
    fn zero_frame_frequency_is_pure_decay() {
        let r = vsc_ratings();
        let d = discretized_filter_matrices(&r, 0.0, 1e-4).unwrap();
        assert_eq!(d.a_tau.im, 0.0);
        let expected = (-(r.r_f / r.l_f) * r.omega_base * 1e-4).exp();
        assert!((d.a_tau.re - expected).abs() < 1e-15);
    }

    #[test]
    fn vanishing_horizon_limits() {
        let r = vsc_ratings();
        let d = discretized_filter_matrices(&r, r.omega_base, 1e-12).unwrap();
        assert!((d.a_tau.re - 1.0).abs() < 1e-6 && d.a_tau.im.abs() < 1e-6);
        assert!(d.b_tau.modulus() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_resistance() {
        let mut r = vsc_ratings();
        r.r_f = 0.0;
        assert!(discretized_filter_matrices(&r, r.omega_base, 1e-4).is_err());
        assert!(r.validate().is_err());
    }

    #[test]
    fn matrices_match_frozen_values() {
        // Independently derived with the single-converter parameters at the
        // nominal frame frequency; both the closed form and the sqrt-form
        // radius agree on these to 12 digits.
        let r = vsc_ratings();
        let w0 = r.omega_base;
        let step = discretized_filter_matrices(&r, w0, 1e-4).unwrap();
        assert!((step.a_tau.re - 0.995479292728).abs() < 1e-10);
        assert!((step.a_tau.im - -0.037546474184).abs() < 1e-10);
        assert!((step.b_tau.re - 0.501577215840).abs() < 1e-10);
        assert!((step.b_tau.im - -0.009449605758).abs() < 1e-10);
        assert!((step.m_tau.re - 1.985403583407).abs() < 1e-10);
        assert!((step.m_tau.im - -0.037452245553).abs() < 1e-10);
        let cycle = discretized_filter_matrices(&r, w0, 20e-3).unwrap();
        assert!((cycle.m_tau.re - 0.035162592753).abs() < 1e-10);
        assert!((cycle.m_tau.im - -0.009518100718).abs() < 1e-10);
        assert!((current_disc_radius(&r, w0, 1e-4).unwrap() - 2.392028697354).abs() < 1e-9);
        assert!((current_disc_radius(&r, w0, 20e-3).unwrap() - 0.093849808740).abs() < 1e-9);
    }

    #[test]
    fn radius_matches_b_gain() {
        // The sqrt-form radius equals i_max over the uniform singular value
        // of B_tau (a scaled rotation has equal singular values).
        let r = vsc_ratings();
        for tau in [1e-4, 5e-3, 20e-3] {
            for w in [0.0f64, 0.5, 1.0, 1.05] {
                let d = discretized_filter_matrices(&r, w * r.omega_base, tau).unwrap();
                let radius = current_disc_radius(&r, w * r.omega_base, tau).unwrap();
                assert!(
                    (radius - r.i_max / d.b_tau.modulus()).abs() / radius < 1e-12,
                    "radius mismatch at tau={tau} w={w}"
                );
            }
        }
    }

    #[test]
    fn step_radius_exceeds_cycle_radius() {
        let r = vsc_ratings();
        let rs = current_disc_radius(&r, r.omega_base, 1e-4).unwrap();
        let rc = current_disc_radius(&r, r.omega_base, 20e-3).unwrap();
        assert!(rs > rc);
    }

    #[test]
    fn prediction_simplifies_on_disc_center_anchor() {
        // Holding v_gfm = v_f + v_ad freezes the drive term, so the
        // prediction decays the measured current through A_tau alone.
        let r = vsc_ratings();
        let ctx = PredictionContext {
            i_f: PlanarVector::stationary(0.4, -0.2),
            v_f: PlanarVector::stationary(0.9, 0.1),
            v_ad: PlanarVector::stationary(0.01, -0.02),
            omega_dq: r.omega_base,
            tau: 1e-4,
        };
        let v_gfm = ctx.v_f.add(&ctx.v_ad).unwrap();
        let pred = predict_current(&ctx, &v_gfm, &r).unwrap();
        let d = discretized_filter_matrices(&r, ctx.omega_dq, ctx.tau).unwrap();
        let expect = d.a_tau.apply(&ctx.i_f);
        assert!((pred.x - expect.x).abs() < 1e-14 && (pred.y - expect.y).abs() < 1e-14);
    }

    #[test]
    fn steady_drive_identity() {
        // With i_f = 0 and the drive held at Z_f i*, the prediction is
        // (I - A_tau) i*.
        let r = vsc_ratings();
        let w = r.omega_base;
        let d = discretized_filter_matrices(&r, w, 1e-4).unwrap();
        let z_f = ScaledRotation { re: r.r_f, im: w * r.l_f / r.omega_base };
        let i_star = PlanarVector::stationary(0.7, 0.3);
        let drive = z_f.apply(&i_star);
        let ctx = PredictionContext {
            i_f: PlanarVector::zero(Frame::Stationary),
            v_f: PlanarVector::zero(Frame::Stationary),
            v_ad: PlanarVector::zero(Frame::Stationary),
            omega_dq: w,
            tau: 1e-4,
        };
        let pred = predict_current(&ctx, &drive, &r).unwrap();
        let expect = ScaledRotation::IDENTITY.sub(&d.a_tau).apply(&i_star);
        assert!((pred.x - expect.x).abs() < 1e-14 && (pred.y - expect.y).abs() < 1e-14);
    }

    #[test]
    fn modulation_boundary_maps_to_v_max_switch_reference() {
        let r = vsc_ratings();
        let v_ad = PlanarVector::stationary(0.013, -0.008);
        let disc = modulation_disc(&v_ad, &r);
        for k in 0..16 {
            let ang = k as f64 / 16.0 * std::f64::consts::TAU;
            let v_gfm = PlanarVector::stationary(
                disc.center.x + disc.radius * ang.cos(),
                disc.center.y + disc.radius * ang.sin(),
            );
            let v_sw = v_gfm.sub(&v_ad).unwrap();
            assert!((v_sw.norm() - r.v_max).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_disc_keeps_prediction_inside() {
        let r = vsc_ratings();
        let ctx = PredictionContext {
            i_f: PlanarVector::zero(Frame::Stationary),
            v_f: PlanarVector::zero(Frame::Stationary),
            v_ad: PlanarVector::zero(Frame::Stationary),
            omega_dq: r.omega_base,
            tau: 20e-3,
        };
        let disc = current_disc(&ctx, &r).unwrap();
        assert!(disc.center.norm() < 1e-15);
        for k in 0..12 {
            let ang = k as f64 * 0.5236;
            let frac = 0.1 + 0.8 * (k as f64 / 12.0);
            let v = PlanarVector::stationary(
                frac * disc.radius * ang.cos(),
                frac * disc.radius * ang.sin(),
            );
            let pred = predict_current(&ctx, &v, &r).unwrap();
            assert!(pred.norm() <= r.i_max);
        }
    }
}
