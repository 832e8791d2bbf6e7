//! Reference-frame transforms, planar rotation algebra, and instantaneous power.
//!
//! Everything downstream is frame-specific: the feasible-set discs live in the
//! stationary frame, the projection runs in a rotating frame aligned with the
//! candidate angle, and mixing the two silently is the classic bug this module
//! exists to prevent. Vectors carry their frame tag and binary operations
//! refuse mismatched tags.

use serde::{Deserialize, Serialize};

/// Which two-axis frame a planar vector lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Stationary alpha-beta frame (amplitude-invariant Clarke image).
    Stationary,
    /// Rotating dq frame at some angle theta_dq.
    Rotating,
}

/// Two-axis vector with a frame tag. Components are peak-valued (volts or
/// amperes in SI runs, per-unit otherwise).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarVector {
    pub x: f64,
    pub y: f64,
    pub frame: Frame,
}

/// Instantaneous three-phase sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThreePhase {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("operation mixes {0:?} and {1:?} frames without an explicit transform")]
    Mismatch(Frame, Frame),
}

impl PlanarVector {
    pub fn stationary(x: f64, y: f64) -> Self {
        Self { x, y, frame: Frame::Stationary }
    }

    pub fn rotating(x: f64, y: f64) -> Self {
        Self { x, y, frame: Frame::Rotating }
    }

    pub fn zero(frame: Frame) -> Self {
        Self { x: 0.0, y: 0.0, frame }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn add(&self, other: &Self) -> Result<Self, FrameError> {
        self.check(other)?;
        Ok(Self { x: self.x + other.x, y: self.y + other.y, frame: self.frame })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FrameError> {
        self.check(other)?;
        Ok(Self { x: self.x - other.x, y: self.y - other.y, frame: self.frame })
    }

    pub fn scale(&self, k: f64) -> Self {
        Self { x: k * self.x, y: k * self.y, frame: self.frame }
    }

    pub fn dot(&self, other: &Self) -> Result<f64, FrameError> {
        self.check(other)?;
        Ok(self.x * other.x + self.y * other.y)
    }

    /// Quarter-turn rotation, the matrix `j` (x, y) -> (-y, x).
    pub fn perp(&self) -> Self {
        Self { x: -self.y, y: self.x, frame: self.frame }
    }

    fn check(&self, other: &Self) -> Result<(), FrameError> {
        if self.frame != other.frame {
            return Err(FrameError::Mismatch(self.frame, other.frame));
        }
        Ok(())
    }
}

/// Amplitude-invariant Clarke transform: a balanced sinusoid triple of peak A
/// maps to a stationary vector of norm A.
pub fn clarke(x: ThreePhase) -> PlanarVector {
    PlanarVector::stationary(
        (2.0 / 3.0) * (x.a - 0.5 * x.b - 0.5 * x.c),
        (2.0 / 3.0) * (3f64.sqrt() / 2.0) * (x.b - x.c),
    )
}

/// Inverse of [`clarke`] onto the zero-sum subspace.
pub fn inverse_clarke(v: &PlanarVector) -> ThreePhase {
    let s3 = 3f64.sqrt() / 2.0;
    ThreePhase { a: v.x, b: -0.5 * v.x + s3 * v.y, c: -0.5 * v.x - s3 * v.y }
}

/// Planar rotation by `angle`; the frame tag is preserved (callers use
/// [`to_rotating`]/[`to_stationary`] when the rotation changes frames).
pub fn rotate(v: &PlanarVector, angle: f64) -> PlanarVector {
    let (s, c) = angle.sin_cos();
    PlanarVector { x: c * v.x - s * v.y, y: s * v.x + c * v.y, frame: v.frame }
}

/// Express a stationary vector in the dq frame at angle `theta_dq`.
pub fn to_rotating(v: &PlanarVector, theta_dq: f64) -> Result<PlanarVector, FrameError> {
    if v.frame != Frame::Stationary {
        return Err(FrameError::Mismatch(v.frame, Frame::Stationary));
    }
    let mut out = rotate(v, -theta_dq);
    out.frame = Frame::Rotating;
    Ok(out)
}

/// Express a dq vector back in the stationary frame.
pub fn to_stationary(v: &PlanarVector, theta_dq: f64) -> Result<PlanarVector, FrameError> {
    if v.frame != Frame::Rotating {
        return Err(FrameError::Mismatch(v.frame, Frame::Rotating));
    }
    let mut out = rotate(v, theta_dq);
    out.frame = Frame::Stationary;
    Ok(out)
}

/// dq transform of an instantaneous three-phase sample.
pub fn to_dq(x: ThreePhase, theta_dq: f64) -> PlanarVector {
    to_rotating(&clarke(x), theta_dq).expect("clarke output is stationary")
}

/// Instantaneous active/reactive power from stationary-frame voltage and
/// current: P = (3/2) v.i, Q = (3/2) v.(j i) with j the +90 degree rotation.
///
/// Sign note: with this convention a current lagging the voltage by 90
/// degrees yields Q < 0 from `v.(j i)`; equivalently Q = (3/2)(v_y i_x -
/// v_x i_y) is positive when the converter supplies an inductive load. The
/// droop law `V_dr = V* + m_q (Q* - Q_lp)` is stabilizing only with this
/// orientation, which pins the sign.
pub fn instantaneous_power(
    v: &PlanarVector,
    i: &PlanarVector,
) -> Result<(f64, f64), FrameError> {
    if v.frame != Frame::Stationary {
        return Err(FrameError::Mismatch(v.frame, Frame::Stationary));
    }
    v.check_power(i)
}

impl PlanarVector {
    fn check_power(&self, i: &Self) -> Result<(f64, f64), FrameError> {
        self.check(i)?;
        let p = 1.5 * (self.x * i.x + self.y * i.y);
        let q = 1.5 * (self.y * i.x - self.x * i.y);
        Ok((p, q))
    }
}

/// Per-unit power on amplitude-invariant bases: with v and i both in per
/// unit the 3/2 factor is absorbed by the base power, so P = v.i exactly.
pub fn power_pu(vx: f64, vy: f64, ix: f64, iy: f64) -> (f64, f64) {
    (vx * ix + vy * iy, vy * ix - vx * iy)
}

/// Wrap an unwrapped angle to [-pi, pi) for output and trigonometry.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta.rem_euclid(two_pi);
    if t >= std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clarke_axis_cases() {
        let va = clarke(ThreePhase { a: 1.0, b: -0.5, c: -0.5 });
        assert!((va.x - 1.0).abs() < 1e-15 && va.y.abs() < 1e-15);
        let s3 = 3f64.sqrt() / 2.0;
        let vb = clarke(ThreePhase { a: 0.0, b: s3, c: -s3 });
        assert!(vb.x.abs() < 1e-15 && (vb.y - 1.0).abs() < 1e-15);
    }

    #[test]
    fn power_aligned_and_quadrature() {
        let v = PlanarVector::stationary(1.0, 0.0);
        let i_al = PlanarVector::stationary(1.0, 0.0);
        assert_eq!(instantaneous_power(&v, &i_al).unwrap(), (1.5, 0.0));
        // Current at +90 degrees (leading): reactive power is delivered to
        // the converter, Q = -1.5 under the droop-stabilizing sign.
        let i_quad = PlanarVector::stationary(0.0, 1.0);
        let (p, q) = instantaneous_power(&v, &i_quad).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(q, -1.5);
    }

    #[test]
    fn power_rejects_frame_mix() {
        let v = PlanarVector::stationary(1.0, 0.0);
        let i = PlanarVector::rotating(1.0, 0.0);
        assert!(instantaneous_power(&v, &i).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        for k in -8..=8 {
            let t = 0.7 + k as f64 * std::f64::consts::PI;
            let w = wrap_angle(t);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
            assert!(((w - t).rem_euclid(2.0 * std::f64::consts::PI)).abs() < 1e-9);
        }
    }
}
