//! Trajectory evaluation: nearest-time association, rigid Umeyama alignment,
//! absolute position error and endpoint error.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::Serialize;
use spinodom::Pose;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("alignment impossible: only {0} associated pose pairs (need at least 3)")]
    TooFewPairs(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub pairs: usize,
    /// Time tolerance used for association, seconds.
    pub tolerance: f64,
    /// RMS position error after rigid alignment, meters.
    pub ape_rms: f64,
    /// Distance between the last associated positions, without alignment.
    pub endpoint_error: f64,
    /// The same after alignment.
    pub aligned_endpoint_error: f64,
    /// Path length of the associated reference positions.
    pub distance: f64,
}

/// Half the median spacing of the timestamps: half a block period for an
/// odometry trajectory.
pub fn default_tolerance(times: &[f64]) -> f64 {
    let mut dt: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    if dt.is_empty() {
        return 0.0;
    }
    dt.sort_by(f64::total_cmp);
    0.5 * dt[dt.len() / 2]
}

/// For every estimate, the reference pose nearest in time, kept when it is
/// within `tol`. Both inputs must be time-ordered.
pub fn associate(est: &[(f64, Pose)], reference: &[(f64, Pose)], tol: f64) -> Vec<(Pose, Pose)> {
    let mut out = Vec::new();
    let mut j = 0;
    for (t, p) in est {
        while j + 1 < reference.len() && (reference[j + 1].0 - t).abs() <= (reference[j].0 - t).abs() {
            j += 1;
        }
        if let Some((tr, r)) = reference.get(j) {
            if (tr - t).abs() <= tol {
                out.push((*p, *r));
            }
        }
    }
    out
}

/// Rigid transform `T` minimising `Σ |T·src_i − dst_i|²`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = mu_d - rot * mu_s;
    Pose::new(rot, t)
}

pub fn evaluate(est: &[(f64, Pose)], reference: &[(f64, Pose)], tol: Option<f64>) -> Result<EvalReport, EvalError> {
    let times: Vec<f64> = est.iter().map(|(t, _)| *t).collect();
    let tol = tol.unwrap_or_else(|| default_tolerance(&times));
    let pairs = associate(est, reference, tol);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|(_, r)| r.translation).collect();
    let align = umeyama(&src, &dst);
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (align.transform(s) - d).norm_squared()).sum();
    let (ls, ld) = (src.last().expect("pairs"), dst.last().expect("pairs"));
    Ok(EvalReport {
        pairs: pairs.len(),
        tolerance: tol,
        ape_rms: (sq / pairs.len() as f64).sqrt(),
        endpoint_error: (ls - ld).norm(),
        aligned_endpoint_error: (align.transform(ls) - ld).norm(),
        distance: dst.windows(2).map(|w| (w[1] - w[0]).norm()).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn helix(n: usize) -> Vec<(f64, Pose)> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.025;
                Pose::from_yaw(t, Vector3::new(3.0 * t.cos(), 2.0 * t.sin(), 0.1 * t))
            })
            .enumerate()
            .map(|(i, p)| (i as f64 * 0.025, p))
            .collect()
    }

    #[test]
    fn self_comparison_is_zero() {
        let a = helix(200);
        let r = evaluate(&a, &a, None).unwrap();
        assert_eq!(r.pairs, 200);
        assert!(r.ape_rms < 1e-9 && r.endpoint_error == 0.0);
    }

    #[test]
    fn rigid_transform_is_aligned_away() {
        let a = helix(200);
        let t = Pose::exp(&Vector3::new(0.1, -0.2, 0.7), &Vector3::new(1.0, -2.0, 0.5));
        let b: Vec<(f64, Pose)> = a.iter().map(|(s, p)| (*s, t.compose(p))).collect();
        let r = evaluate(&a, &b, None).unwrap();
        assert!(r.ape_rms < 1e-9, "{}", r.ape_rms);
        assert!(r.aligned_endpoint_error < 1e-9);
        let last = a.last().unwrap().1.translation;
        let expect = (t.transform(&last) - last).norm();
        assert!((r.endpoint_error - expect).abs() < 1e-12);
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let a = helix(10);
        let shifted: Vec<(f64, Pose)> = a.iter().map(|(t, p)| (t + 100.0, *p)).collect();
        assert_eq!(evaluate(&a, &shifted, None), Err(EvalError::TooFewPairs(0)));
        assert_eq!(evaluate(&a[..2], &a, None), Err(EvalError::TooFewPairs(2)));
    }

    #[test]
    fn association_respects_tolerance() {
        let a = helix(10);
        let b: Vec<(f64, Pose)> = a.iter().map(|(t, p)| (t + 0.011, *p)).collect();
        assert_eq!(associate(&a, &b, 0.0125).len(), 10);
        assert_eq!(associate(&a, &b, 0.01).len(), 0);
    }
}
