//! Lattice coefficients `k ∈ R^6` over a symmetric-matrix basis.
//!
//! A cell matrix `L` (lattice vectors as columns) factors as `L = Q exp(S)`
//! with `Q` orthogonal and `S` symmetric; `k` holds the coefficients of `S`
//! in the orthogonal basis `B1..B6`. Generated lattices always use `Q = I`.
//! Crystal families constrain which coefficients are free.

use crate::sgdata::SpaceGroup;
use crate::torus::{Mat3, Vec3};
use thiserror::Error;

pub type LatticeCoeffs = [f64; 6];

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("lattice matrix is singular or left-handed (det = {0:e})")]
    SingularLattice(f64),
    #[error("family masks are defined for 3D groups; got dimension {0}")]
    UnsupportedDimension(u8),
    #[error("space group number {0} is outside the supported range")]
    UnknownGroupNumber(u32),
}

/// The basis `B1..B6`.
pub const BASIS: [Mat3; 6] = [
    [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
    [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
    [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.0]],
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -2.0]],
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
];

/// Squared Frobenius norms of [`BASIS`].
pub const BASIS_NORM_SQ: [f64; 6] = [2.0, 2.0, 2.0, 2.0, 6.0, 3.0];

/// Pinned hexagonal `k1 = -ln(3)/4`, which makes the `a`/`b` angle 120°.
pub fn hexagonal_k1() -> f64 {
    -(3.0f64).ln() / 4.0
}

pub fn symmetric_from_k(k: &LatticeCoeffs) -> Mat3 {
    let mut s = [[0.0; 3]; 3];
    for (coef, b) in k.iter().zip(BASIS.iter()) {
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += coef * b[i][j];
            }
        }
    }
    s
}

pub fn k_from_symmetric(s: &Mat3) -> LatticeCoeffs {
    let mut k = [0.0; 6];
    for (idx, b) in BASIS.iter().enumerate() {
        let mut dot = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                dot += s[i][j] * b[i][j];
            }
        }
        k[idx] = dot / BASIS_NORM_SQ[idx];
    }
    k
}

/// Cyclic Jacobi eigendecomposition of a symmetric 3x3 matrix.
///
/// Returns eigenvalues and a matrix whose columns are the eigenvectors.
pub fn sym_eigen(a: &Mat3) -> (Vec3, Mat3) {
    let mut m = *a;
    let mut v = identity();
    for _sweep in 0..64 {
        let off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
        let scale = m[0][0] * m[0][0] + m[1][1] * m[1][1] + m[2][2] * m[2][2] + off;
        if off.sqrt() <= 1e-14 * scale.sqrt().max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if m[p][q] == 0.0 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // m <- J^T m J with J the (p, q) rotation
            for r in 0..3 {
                let mrp = m[r][p];
                let mrq = m[r][q];
                m[r][p] = c * mrp - s * mrq;
                m[r][q] = s * mrp + c * mrq;
            }
            for r in 0..3 {
                let mpr = m[p][r];
                let mqr = m[q][r];
                m[p][r] = c * mpr - s * mqr;
                m[q][r] = s * mpr + c * mqr;
            }
            for r in 0..3 {
                let vrp = v[r][p];
                let vrq = v[r][q];
                v[r][p] = c * vrp - s * vrq;
                v[r][q] = s * vrp + c * vrq;
            }
        }
    }
    ([m[0][0], m[1][1], m[2][2]], v)
}

/// `V diag(f(λ)) V^T` for symmetric `a`.
pub fn sym_apply(a: &Mat3, f: impl Fn(f64) -> f64) -> Mat3 {
    let (w, v) = sym_eigen(a);
    let fw = [f(w[0]), f(w[1]), f(w[2])];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|e| v[i][e] * fw[e] * v[j][e]).sum();
        }
    }
    out
}

/// `L = exp(sum_i k_i B_i)`; symmetric positive definite.
#[allow(non_snake_case)]
pub fn k_to_L(k: &LatticeCoeffs) -> Mat3 {
    sym_apply(&symmetric_from_k(k), f64::exp)
}

/// Inverse of [`k_to_L`] for arbitrary positive-determinant `L`: returns
/// `(k, Q)` with `L = Q exp(S(k))`.
///
/// The orthogonal factor comes from a scaled Newton polar iteration; `S` is
/// then the matrix logarithm of the symmetric factor `P = Q^T L`, which equals
/// `½ log(L^T L)` but avoids squaring the condition number.
#[allow(non_snake_case)]
pub fn L_to_k(l: &Mat3) -> Result<(LatticeCoeffs, Mat3), LatticeError> {
    let d = det(l);
    let scale = frob(l).powi(3).max(f64::MIN_POSITIVE);
    if !(d > 1e-12 * scale) {
        return Err(LatticeError::SingularLattice(d));
    }
    let q = polar_orthogonal(l);
    let p = symmetrize(&matmul(&transpose(&q), l));
    let s = sym_apply(&p, f64::ln);
    Ok((k_from_symmetric(&s), q))
}

fn polar_orthogonal(l: &Mat3) -> Mat3 {
    let mut x = *l;
    for _ in 0..100 {
        let inv_t = transpose(&inverse(&x));
        let gamma = (frob(&inv_t) / frob(&x)).sqrt();
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = 0.5 * (gamma * x[i][j] + inv_t[i][j] / gamma);
            }
        }
        let mut diff = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                diff += (next[i][j] - x[i][j]).powi(2);
            }
        }
        x = next;
        if diff.sqrt() < 1e-15 {
            break;
        }
    }
    // one unscaled step polishes the last bits
    let inv_t = transpose(&inverse(&x));
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = 0.5 * (x[i][j] + inv_t[i][j]);
        }
    }
    out
}

/// Cell lengths and angles (degrees) `(a, b, c, alpha, beta, gamma)` of the
/// column vectors of `l`.
pub fn cell_parameters(l: &Mat3) -> [f64; 6] {
    let col = |j: usize| [l[0][j], l[1][j], l[2][j]];
    let (a, b, c) = (col(0), col(1), col(2));
    let norm = |v: Vec3| dot(v, v).sqrt();
    let angle = |u: Vec3, v: Vec3| (dot(u, v) / (norm(u) * norm(v))).clamp(-1.0, 1.0).acos().to_degrees();
    [norm(a), norm(b), norm(c), angle(b, c), angle(a, c), angle(a, b)]
}

/// Standard cell matrix (a along x, b in the xy plane) from cell parameters.
pub fn cell_from_parameters(p: &[f64; 6]) -> Mat3 {
    let [a, b, c, alpha, beta, gamma] = *p;
    let (ca, cb, cg) = (alpha.to_radians().cos(), beta.to_radians().cos(), gamma.to_radians().cos());
    let sg = gamma.to_radians().sin();
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz = (c * c - cx * cx - cy * cy).max(0.0).sqrt();
    [[a, b * cg, cx], [0.0, b * sg, cy], [0.0, 0.0, cz]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrystalFamily {
    Triclinic,
    Monoclinic,
    Orthorhombic,
    Tetragonal,
    Hexagonal,
    Cubic,
    // planar (wallpaper) families, embedded with c as the out-of-plane axis
    Oblique,
    Rectangular,
    Square,
    PlanarHexagonal,
}

/// Which lattice coefficients a space group leaves free.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyMask {
    pub family: CrystalFamily,
    pub mask: [f64; 6],
    pub pinned: [Option<f64>; 6],
}

impl FamilyMask {
    fn new(family: CrystalFamily, free: [u8; 6], pinned_k1: bool) -> Self {
        let mut pinned = [None; 6];
        if pinned_k1 {
            pinned[0] = Some(hexagonal_k1());
        }
        Self {
            family,
            mask: free.map(f64::from),
            pinned,
        }
    }

    /// Zeroes masked components and writes pinned values.
    pub fn apply(&self, k: &LatticeCoeffs) -> LatticeCoeffs {
        let mut out = [0.0; 6];
        for i in 0..6 {
            out[i] = match self.pinned[i] {
                Some(p) => p,
                None => k[i] * self.mask[i],
            };
        }
        out
    }

    /// Elementwise product with the binary mask only (pinned slots become 0).
    pub fn mask_only(&self, k: &LatticeCoeffs) -> LatticeCoeffs {
        let mut out = *k;
        for i in 0..6 {
            out[i] *= self.mask[i];
        }
        out
    }

    pub fn free_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

/// Family mask of a 3D space group, looked up by number range.
pub fn mask_of(group: &SpaceGroup) -> Result<FamilyMask, LatticeError> {
    if group.dimension != 3 {
        return Err(LatticeError::UnsupportedDimension(group.dimension));
    }
    mask_for_number(group.number)
}

pub fn mask_for_number(number: u32) -> Result<FamilyMask, LatticeError> {
    use CrystalFamily::*;
    Ok(match number {
        1..=2 => FamilyMask::new(Triclinic, [1, 1, 1, 1, 1, 1], false),
        3..=15 => FamilyMask::new(Monoclinic, [0, 1, 0, 1, 1, 1], false),
        16..=74 => FamilyMask::new(Orthorhombic, [0, 0, 0, 1, 1, 1], false),
        75..=142 => FamilyMask::new(Tetragonal, [0, 0, 0, 0, 1, 1], false),
        143..=194 => FamilyMask::new(Hexagonal, [0, 0, 0, 0, 1, 1], true),
        195..=230 => FamilyMask::new(Cubic, [0, 0, 0, 0, 0, 1], false),
        n => return Err(LatticeError::UnknownGroupNumber(n)),
    })
}

/// Mask for a wallpaper group embedded in 3D (c out of plane, so the `xz`
/// and `yz` couplings are always zero).
pub fn planar_mask_for_number(number: u32) -> Result<FamilyMask, LatticeError> {
    use CrystalFamily::*;
    Ok(match number {
        1..=2 => FamilyMask::new(Oblique, [1, 0, 0, 1, 1, 1], false),
        3..=9 => FamilyMask::new(Rectangular, [0, 0, 0, 1, 1, 1], false),
        10..=12 => FamilyMask::new(Square, [0, 0, 0, 0, 1, 1], false),
        13..=17 => FamilyMask::new(PlanarHexagonal, [0, 0, 0, 0, 1, 1], true),
        n => return Err(LatticeError::UnknownGroupNumber(n)),
    })
}

/// Mask for any shipped group, dispatching on dimension.
pub fn group_mask(group: &SpaceGroup) -> FamilyMask {
    let res = match group.dimension {
        2 => planar_mask_for_number(group.number),
        _ => mask_for_number(group.number),
    };
    // group numbers are range-checked at load time
    res.expect("group number validated at load")
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|e| a[i][e] * b[e][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn inverse(a: &Mat3) -> Mat3 {
    let d = det(a);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            out[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
        }
    }
    out
}

fn frob(a: &Mat3) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn symmetrize(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = 0.5 * (a[i][j] + a[j][i]);
        }
    }
    out
}

/// Moore-Penrose pseudo-inverse via the eigendecomposition of `A^T A`.
pub fn pseudo_inverse(a: &Mat3) -> Mat3 {
    let ata = matmul(&transpose(a), a);
    let (w, v) = sym_eigen(&ata);
    let wmax = w.iter().cloned().fold(0.0, f64::max);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = (0..3)
                .filter(|&e| w[e] > 1e-10 * wmax.max(1.0))
                .map(|e| v[i][e] * v[j][e] / w[e])
                .sum();
        }
    }
    matmul(&inv, &transpose(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    fn rotation(axis: Vec3, angle: f64) -> Mat3 {
        let n = dot(axis, axis).sqrt();
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    #[test]
    fn basis_is_orthogonal_with_listed_norms() {
        for i in 0..6 {
            for j in 0..6 {
                let ip: f64 = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| BASIS[i][r][c] * BASIS[j][r][c]).sum();
                let expect = if i == j { BASIS_NORM_SQ[i] } else { 0.0 };
                assert_eq!(ip, expect);
            }
        }
    }

    #[test]
    fn zero_and_cubic_coefficients() {
        assert!(close(&k_to_L(&[0.0; 6]), &identity(), 1e-15));
        let s = 0.7;
        let l = k_to_L(&[0.0, 0.0, 0.0, 0.0, 0.0, s]);
        let e = s.exp();
        assert!(close(&l, &[[e, 0.0, 0.0], [0.0, e, 0.0], [0.0, 0.0, e]], 1e-13));
    }

    #[test]
    fn hexagonal_pin_gives_120_degrees() {
        let mask = mask_for_number(191).unwrap();
        let k = mask.apply(&[0.3, 0.2, -0.1, 0.5, 0.0, 0.0]);
        assert_eq!(k[1..5], [0.0, 0.0, 0.0, 0.0]);
        let p = cell_parameters(&k_to_L(&k));
        assert!((p[0] - p[1]).abs() < 1e-12);
        assert!((p[5] - 120.0).abs() < 1e-10, "gamma = {}", p[5]);
        assert!((p[3] - 90.0).abs() < 1e-10 && (p[4] - 90.0).abs() < 1e-10);
    }

    #[test]
    fn table_masks() {
        assert_eq!(mask_for_number(225).unwrap().mask, [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(mask_for_number(1).unwrap().mask, [1.0; 6]);
        let hex = mask_for_number(191).unwrap();
        assert_eq!(hex.mask, [0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(hex.pinned[0], Some(-(3.0f64).ln() / 4.0));
        assert_eq!(mask_for_number(14).unwrap().family, CrystalFamily::Monoclinic);
        assert!(mask_for_number(231).is_err());
    }

    #[test]
    fn identity_and_rotations_have_zero_coefficients() {
        let (k, q) = L_to_k(&identity()).unwrap();
        assert!(k.iter().all(|x| x.abs() < 1e-14));
        assert!(close(&q, &identity(), 1e-14));
        let r = rotation([0.3, -1.0, 0.5], 1.1);
        let (k, q) = L_to_k(&r).unwrap();
        assert!(k.iter().all(|x| x.abs() < 1e-12));
        assert!(close(&q, &r, 1e-12));
    }

    #[test]
    fn singular_lattice_rejected() {
        let l = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]];
        assert!(matches!(L_to_k(&l), Err(LatticeError::SingularLattice(_))));
        let mut flipped = identity();
        flipped[2][2] = -1.0;
        assert!(L_to_k(&flipped).is_err());
    }

    #[test]
    fn pseudo_inverse_of_projection() {
        let v = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let p = pseudo_inverse(&v);
        let vpv = matmul(&matmul(&v, &p), &v);
        assert!(close(&vpv, &v, 1e-12));
    }

    fn arb_k(radius: f64) -> impl Strategy<Value = LatticeCoeffs> {
        prop::array::uniform6(-1.0f64..1.0).prop_map(move |mut k| {
            let n = k.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let r = radius * n.min(1.0);
            for x in &mut k {
                *x *= r / n;
            }
            k
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip_k_l(k in arb_k(3.0)) {
            let l = k_to_L(&k);
            prop_assert!(det(&l) > 0.0);
            let (k2, q) = L_to_k(&l).unwrap();
            for i in 0..6 {
                prop_assert!((k[i] - k2[i]).abs() < 1e-9, "k {:?} vs {:?}", k, k2);
            }
            prop_assert!(close(&q, &identity(), 1e-9));
        }
    }

    proptest! {
        #[test]
        fn rotation_invariance(k in arb_k(2.0), axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.0f64..3.0) {
            prop_assume!(dot(axis, axis) > 1e-3);
            let l = k_to_L(&k);
            let r = rotation(axis, angle);
            let (k1, _) = L_to_k(&l).unwrap();
            let (k2, q2) = L_to_k(&matmul(&r, &l)).unwrap();
            for i in 0..6 {
                prop_assert!((k1[i] - k2[i]).abs() < 1e-9);
            }
            let qtq = matmul(&transpose(&q2), &q2);
            prop_assert!(close(&qtq, &identity(), 1e-9));
        }

        #[test]
        fn reconstruction_is_exact(s in prop::array::uniform6(-2.0f64..2.0)) {
            let sym = [[s[0], s[3], s[4]], [s[3], s[1], s[5]], [s[4], s[5], s[2]]];
            let back = symmetric_from_k(&k_from_symmetric(&sym));
            prop_assert!(close(&back, &sym, 1e-12));
        }

        #[test]
        fn family_shapes_hold(k in arb_k(1.5)) {
            let deg = |p: &[f64; 6]| (p[3], p[4], p[5]);
            for number in [3u32, 16, 75, 143, 195] {
                let m = mask_for_number(number).unwrap();
                let p = cell_parameters(&k_to_L(&m.apply(&k)));
                let (al, be, ga) = deg(&p);
                match m.family {
                    CrystalFamily::Monoclinic => {
                        prop_assert!((al - 90.0).abs() < 1e-8 && (ga - 90.0).abs() < 1e-8);
                    }
                    CrystalFamily::Orthorhombic => {
                        prop_assert!((al - 90.0).abs() < 1e-8 && (be - 90.0).abs() < 1e-8 && (ga - 90.0).abs() < 1e-8);
                    }
                    CrystalFamily::Tetragonal => {
                        prop_assert!((al - 90.0).abs() < 1e-8 && (ga - 90.0).abs() < 1e-8);
                        prop_assert!((p[0] - p[1]).abs() < 1e-8 * p[0]);
                    }
                    CrystalFamily::Hexagonal => {
                        prop_assert!((al - 90.0).abs() < 1e-8 && (be - 90.0).abs() < 1e-8 && (ga - 120.0).abs() < 1e-8);
                        prop_assert!((p[0] - p[1]).abs() < 1e-8 * p[0]);
                    }
                    CrystalFamily::Cubic => {
                        prop_assert!((al - 90.0).abs() < 1e-8 && (be - 90.0).abs() < 1e-8 && (ga - 90.0).abs() < 1e-8);
                        prop_assert!((p[0] - p[1]).abs() < 1e-8 * p[0] && (p[0] - p[2]).abs() < 1e-8 * p[0]);
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
}
