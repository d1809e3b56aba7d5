//! Flat-torus geometry on `[0,1)^3`: wrapping, the element-wise logarithmic
//! map, geodesic interpolation and torus distances.
//!
//! Tangent vectors live in `[-1/2, 1/2)`. Displacements within
//! [`ANTIPODAL_BAND`] of `±1/2` resolve to `-1/2`, so the antipodal branch is
//! the same regardless of argument order and of last-bit rounding in the
//! inputs.

use ndarray::{Array2, ArrayView2, Zip};
use std::f64::consts::TAU;

/// Width of the band around `±1/2` that is snapped onto the `-1/2` branch.
pub const ANTIPODAL_BAND: f64 = 1e-12;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// `x - floor(x)`, with results that round up to `1.0` mapped to `0.0`.
#[inline]
pub fn wrap_scalar(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

#[inline]
pub fn wrap3(x: Vec3) -> Vec3 {
    [wrap_scalar(x[0]), wrap_scalar(x[1]), wrap_scalar(x[2])]
}

pub fn wrap(x: ArrayView2<f64>) -> Array2<f64> {
    x.mapv(wrap_scalar)
}

pub fn wrap_in_place(x: &mut Array2<f64>) {
    x.mapv_inplace(wrap_scalar);
}

/// Shortest signed displacement from `x` to `y` on the unit circle,
/// `atan2(sin 2π(y-x), cos 2π(y-x)) / 2π`.
#[inline]
pub fn log_scalar(x: f64, y: f64) -> f64 {
    let a = TAU * (y - x);
    let v = a.sin().atan2(a.cos()) / TAU;
    if v.abs() > 0.5 - ANTIPODAL_BAND {
        -0.5
    } else {
        v
    }
}

#[inline]
pub fn log3(x: Vec3, y: Vec3) -> Vec3 {
    [
        log_scalar(x[0], y[0]),
        log_scalar(x[1], y[1]),
        log_scalar(x[2], y[2]),
    ]
}

/// Element-wise logarithmic map `log_x(y)` for row-aligned coordinate
/// matrices.
pub fn logmap(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(x.dim(), y.dim(), "logmap shape mismatch");
    let mut out = Array2::zeros(x.dim());
    Zip::from(&mut out)
        .and(&x)
        .and(&y)
        .for_each(|o, &a, &b| *o = log_scalar(a, b));
    out
}

/// `wrap(x0 + t * log_x0(x1))`.
pub fn geodesic(x0: ArrayView2<f64>, x1: ArrayView2<f64>, t: f64) -> Array2<f64> {
    let v = logmap(x0, x1);
    let mut out = &x0 + &(v * t);
    wrap_in_place(&mut out);
    out
}

/// Euclidean norm of the fractional minimum-image displacement.
#[inline]
pub fn torus_dist(x: Vec3, y: Vec3) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = y[c] - x[c];
        let d = d - d.round();
        s += d * d;
    }
    s.sqrt()
}

pub fn is_identity_metric(m: &Mat3) -> bool {
    (0..3).all(|i| (0..3).all(|j| (m[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12))
}

#[inline]
fn quad(m: &Mat3, v: Vec3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += v[i] * m[i][j] * v[j];
        }
    }
    s
}

/// Minimum-image displacement under the quadratic form `metric`.
///
/// Starts from the element-wise logarithmic map and searches the 26
/// neighbouring integer shifts. For the identity metric this is exactly
/// [`log3`]. Strict improvement is required to leave the element-wise
/// answer, so ties keep the element-wise branch.
pub fn log3_metric(x: Vec3, y: Vec3, metric: &Mat3) -> Vec3 {
    let v0 = log3(x, y);
    if is_identity_metric(metric) {
        return v0;
    }
    let mut best = v0;
    let mut best_q = quad(metric, v0);
    for a in -1..=1 {
        for b in -1..=1 {
            for c in -1..=1 {
                if a == 0 && b == 0 && c == 0 {
                    continue;
                }
                let v = [v0[0] + a as f64, v0[1] + b as f64, v0[2] + c as f64];
                let q = quad(metric, v);
                if q < best_q - 1e-12 {
                    best_q = q;
                    best = v;
                }
            }
        }
    }
    best
}

/// Row-wise [`log3_metric`].
pub fn logmap_metric(x: ArrayView2<f64>, y: ArrayView2<f64>, metric: &Mat3) -> Array2<f64> {
    assert_eq!(x.dim(), y.dim(), "logmap shape mismatch");
    if is_identity_metric(metric) {
        return logmap(x, y);
    }
    let mut out = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let v = log3_metric(
            [x[[i, 0]], x[[i, 1]], x[[i, 2]]],
            [y[[i, 0]], y[[i, 1]], y[[i, 2]]],
            metric,
        );
        for c in 0..3 {
            out[[i, c]] = v[c];
        }
    }
    out
}

/// Geodesic interpolation under the minimum-image displacement of `metric`.
pub fn geodesic_metric(x0: ArrayView2<f64>, x1: ArrayView2<f64>, t: f64, metric: &Mat3) -> Array2<f64> {
    let v = logmap_metric(x0, x1, metric);
    let mut out = &x0 + &(v * t);
    wrap_in_place(&mut out);
    out
}

#[inline]
pub fn row3(m: ArrayView2<f64>, i: usize) -> Vec3 {
    [m[[i, 0]], m[[i, 1]], m[[i, 2]]]
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_scalar(0.3), 0.3);
        assert!((wrap_scalar(-0.2) - 0.8).abs() < 1e-15);
        assert!((wrap_scalar(2.7) - 0.7).abs() < 1e-15);
        assert_eq!(wrap_scalar(-1e-17), 0.0);
        assert_eq!(wrap_scalar(1.0), 0.0);
        assert_eq!(wrap_scalar(-0.0), 0.0);
    }

    #[test]
    fn logmap_examples() {
        assert_eq!(log_scalar(0.4, 0.4), 0.0);
        assert!((log_scalar(0.9, 0.1) - 0.2).abs() < 1e-15);
        assert!((log_scalar(0.1, 0.9) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn antipodal_branch_is_order_independent() {
        assert_eq!(log_scalar(0.0, 0.5), -0.5);
        assert_eq!(log_scalar(0.5, 0.0), -0.5);
        assert_eq!(log_scalar(0.3, 0.3 + 0.5), -0.5);
        assert_eq!(log_scalar(0.8, 0.3), -0.5);
    }

    #[test]
    fn geodesic_examples() {
        let f0 = array![[0.9, 0.2, 0.0]];
        let f1 = array![[0.1, 0.7, 0.3]];
        assert_eq!(geodesic(f0.view(), f1.view(), 0.0), f0);
        let end = geodesic(f0.view(), f1.view(), 1.0);
        for (a, b) in end.iter().zip(f1.iter()) {
            assert!(torus_dist([*a, 0.0, 0.0], [*b, 0.0, 0.0]) < 1e-15);
        }
        let mid = geodesic(array![[0.9]].view(), array![[0.1]].view(), 0.5);
        assert!(mid[[0, 0]] < 1e-15 || mid[[0, 0]] > 1.0 - 1e-15);
    }

    #[test]
    fn metric_logmap_prefers_short_vectors() {
        // 120° cell metric: (0.4, -0.4) is longer than (0.4, 0.6) - (0, 1).
        let hex = [[1.0, -0.5, 0.0], [-0.5, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let v = log3_metric([0.0, 0.0, 0.0], [0.4, 0.6, 0.0], &hex);
        let q = |v: Vec3| quad(&hex, v);
        assert!(q(v) <= q(log3([0.0; 3], [0.4, 0.6, 0.0])) + 1e-15);
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(log3_metric([0.1, 0.2, 0.3], [0.9, 0.5, 0.7], &id), log3([0.1, 0.2, 0.3], [0.9, 0.5, 0.7]));
    }

    proptest! {
        #[test]
        fn logmap_range_and_endpoint(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let v = log_scalar(x, y);
            prop_assert!((-0.5..0.5).contains(&v));
            let end = wrap_scalar(x + v);
            prop_assert!(torus_dist([end, 0.0, 0.0], [y, 0.0, 0.0]) < 1e-12);
        }

        #[test]
        fn logmap_antisymmetric_off_cut(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let v = log_scalar(x, y);
            prop_assume!(v.abs() < 0.5 - 1e-6);
            prop_assert!((v + log_scalar(y, x)).abs() < 1e-12);
        }

        #[test]
        fn logmap_matches_round_formulation(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let d = y - x;
            let naive = d - d.round();
            prop_assume!(naive.abs() < 0.5 - 1e-6);
            prop_assert!((log_scalar(x, y) - naive).abs() < 1e-12);
        }
    }
}
