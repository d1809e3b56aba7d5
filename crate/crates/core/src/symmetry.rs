//! Group actions on crystals, permutation certificates and the
//! symmetry/constructability checkers.

use crate::lattice::{pseudo_inverse, LatticeCoeffs};
use crate::sgdata::{AffineOp, GroupKey, SpaceGroup, WyckoffPosition};
use crate::torus::{log3, mat_vec, row3, torus_dist, wrap3, wrap_scalar, Vec3};
use ndarray::Array2;
use thiserror::Error;

pub const CERTIFY_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SymmetryError {
    #[error("op {op} sends row {row} to no unique row (residual {residual:e})")]
    NotSymmetric { op: usize, row: usize, residual: f64 },
    #[error("op {op} maps row {row} onto a different species")]
    SpeciesMismatch { op: usize, row: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("Wyckoff position {label} does not belong to group {group:?}")]
    WyckoffMismatch { label: String, group: GroupKey },
}

/// A crystal `(k, F, A)` with `A` stored as species indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Crystal {
    pub k: LatticeCoeffs,
    pub frac: Array2<f64>,
    pub species: Vec<usize>,
    pub num_species: usize,
}

impl Crystal {
    pub fn new(k: LatticeCoeffs, frac: Array2<f64>, species: Vec<usize>, num_species: usize) -> Self {
        assert_eq!(frac.ncols(), 3, "fractional coordinates need 3 columns");
        assert_eq!(frac.nrows(), species.len(), "one species per row");
        Self {
            k,
            frac,
            species,
            num_species,
        }
    }

    pub fn len(&self) -> usize {
        self.frac.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn one_hot(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.len(), self.num_species));
        for (i, &s) in self.species.iter().enumerate() {
            a[[i, s]] = 1.0;
        }
        a
    }

    pub fn row(&self, i: usize) -> Vec3 {
        row3(self.frac.view(), i)
    }
}

/// `wrap(F Rᵀ + 1 τᵀ)`.
pub fn act_frac(r: &crate::torus::Mat3, t: &Vec3, frac: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(frac.dim());
    for i in 0..frac.nrows() {
        let y = mat_vec(r, row3(frac.view(), i));
        for c in 0..3 {
            out[[i, c]] = wrap_scalar(y[c] + t[c]);
        }
    }
    out
}

pub fn act(op: &AffineOp, c: &Crystal) -> Crystal {
    Crystal {
        frac: act_frac(&op.rotation_f64(), &op.translation_f64(), &c.frac),
        ..c.clone()
    }
}

/// Action of `group.ops[g]`, using the cached real matrices.
pub fn act_index(group: &SpaceGroup, g: usize, c: &Crystal) -> Crystal {
    Crystal {
        frac: act_frac(group.rotation(g), group.translation(g), &c.frac),
        ..c.clone()
    }
}

/// Row `i` of the result is row `sigma[i]` of the input.
pub fn permute(sigma: &[usize], c: &Crystal) -> Result<Crystal, SymmetryError> {
    if sigma.len() != c.len() {
        return Err(SymmetryError::LengthMismatch {
            expected: c.len(),
            got: sigma.len(),
        });
    }
    let mut frac = Array2::zeros(c.frac.dim());
    let mut species = Vec::with_capacity(c.len());
    for (i, &s) in sigma.iter().enumerate() {
        frac.row_mut(i).assign(&c.frac.row(s));
        species.push(c.species[s]);
    }
    Ok(Crystal {
        k: c.k,
        frac,
        species,
        num_species: c.num_species,
    })
}

pub fn invert_perm(sigma: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; sigma.len()];
    for (i, &s) in sigma.iter().enumerate() {
        inv[s] = i;
    }
    inv
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignedSlice {
    pub position: WyckoffPosition,
    pub start: usize,
}

impl AssignedSlice {
    pub fn len(&self) -> usize {
        self.position.multiplicity()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }
}

/// Ordered Wyckoff positions with contiguous row slices.
#[derive(Clone, Debug, PartialEq)]
pub struct WyckoffAssignment {
    pub group: GroupKey,
    pub slices: Vec<AssignedSlice>,
}

impl WyckoffAssignment {
    pub fn new(group: &SpaceGroup, positions: &[WyckoffPosition]) -> Result<Self, SymmetryError> {
        let mut slices = Vec::with_capacity(positions.len());
        let mut start = 0;
        for p in positions {
            if p.parent != group.key() {
                return Err(SymmetryError::WyckoffMismatch {
                    label: p.label.clone(),
                    group: group.key(),
                });
            }
            slices.push(AssignedSlice {
                position: p.clone(),
                start,
            });
            start += p.multiplicity();
        }
        Ok(Self {
            group: group.key(),
            slices,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.slices.iter().map(|s| s.len()).sum()
    }

    pub fn labels(&self) -> Vec<String> {
        self.slices.iter().map(|s| s.position.label.clone()).collect()
    }

    /// Slice index of every row.
    pub fn row_orbits(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_rows());
        for (idx, s) in self.slices.iter().enumerate() {
            out.extend(std::iter::repeat(idx).take(s.len()));
        }
        out
    }

    /// Rows `w_i(x_i)` for one generator point per slice.
    pub fn construct(&self, points: &[Vec3]) -> Array2<f64> {
        assert_eq!(points.len(), self.slices.len(), "one generator point per slice");
        let mut frac = Array2::zeros((self.num_rows(), 3));
        for (s, x) in self.slices.iter().zip(points) {
            for (j, p) in s.position.project(*x).into_iter().enumerate() {
                for c in 0..3 {
                    frac[[s.start + j, c]] = p[c];
                }
            }
        }
        frac
    }
}

/// `perms[g][i] = j` means `(g·F)[i] ≈ F[j]`; consequently
/// `perms[g1∘g2] = perms[g1] ∘ perms[g2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryCertificate {
    pub group: GroupKey,
    pub perms: Vec<Vec<usize>>,
    pub max_residual: f64,
}

impl SymmetryCertificate {
    pub fn perm(&self, g: usize) -> &[usize] {
        &self.perms[g]
    }

    pub fn is_homomorphism(&self, group: &SpaceGroup) -> bool {
        let n = group.order();
        (0..n).all(|a| {
            (0..n).all(|b| {
                let ab = &self.perms[group.product_index(a, b)];
                let (pa, pb) = (&self.perms[a], &self.perms[b]);
                (0..ab.len()).all(|i| ab[i] == pa[pb[i]])
            })
        })
    }

    /// Re-verifies the permutation of op `g` against `frac`.
    pub fn spot_check(&self, group: &SpaceGroup, g: usize, frac: &Array2<f64>, tol: f64) -> bool {
        let perm = &self.perms[g];
        if perm.len() != frac.nrows() {
            return false;
        }
        (0..frac.nrows()).all(|i| {
            let img = group.apply(g, row3(frac.view(), i));
            torus_dist(img, row3(frac.view(), perm[i])) < tol
        })
    }
}

/// Matches the rows of `g·F` to rows of `F` slice by slice and returns the
/// per-op permutations.
pub fn certify(
    c: &Crystal,
    group: &SpaceGroup,
    wa: &WyckoffAssignment,
    tol: f64,
) -> Result<SymmetryCertificate, SymmetryError> {
    certify_frac(&c.frac, Some(&c.species), group, wa, tol)
}

pub fn certify_frac(
    frac: &Array2<f64>,
    species: Option<&[usize]>,
    group: &SpaceGroup,
    wa: &WyckoffAssignment,
    tol: f64,
) -> Result<SymmetryCertificate, SymmetryError> {
    let n = frac.nrows();
    if wa.num_rows() != n {
        return Err(SymmetryError::LengthMismatch {
            expected: wa.num_rows(),
            got: n,
        });
    }
    if wa.group != group.key() {
        return Err(SymmetryError::WyckoffMismatch {
            label: wa.labels().join(","),
            group: group.key(),
        });
    }
    let rows: Vec<Vec3> = (0..n).map(|i| row3(frac.view(), i)).collect();
    let mut perms = Vec::with_capacity(group.order());
    let mut max_residual: f64 = 0.0;
    let mut used = vec![false; n];
    for g in 0..group.order() {
        let mut perm = vec![usize::MAX; n];
        used.iter_mut().for_each(|u| *u = false);
        for slice in &wa.slices {
            let range = slice.rows();
            for i in range.clone() {
                let img = group.apply(g, rows[i]);
                let mut best = None;
                let mut best_d = f64::INFINITY;
                let mut hits = 0;
                for j in range.clone() {
                    let d = torus_dist(img, rows[j]);
                    if d < tol {
                        hits += 1;
                    }
                    if d < best_d {
                        best_d = d;
                        best = Some(j);
                    }
                }
                let j = match best {
                    Some(j) if hits == 1 && !used[j] => j,
                    _ => {
                        return Err(SymmetryError::NotSymmetric {
                            op: g,
                            row: i,
                            residual: best_d,
                        })
                    }
                };
                if let Some(sp) = species {
                    if sp[i] != sp[j] {
                        return Err(SymmetryError::SpeciesMismatch { op: g, row: i });
                    }
                }
                used[j] = true;
                perm[i] = j;
                max_residual = max_residual.max(best_d);
            }
        }
        perms.push(perm);
    }
    Ok(SymmetryCertificate {
        group: group.key(),
        perms,
        max_residual,
    })
}

/// Outcome of [`is_constructable`].
#[derive(Clone, Debug, PartialEq)]
pub struct Constructability {
    pub ok: bool,
    pub witnesses: Vec<Vec3>,
    pub max_residual: f64,
}

/// Recovers one generator point per slice from its first row and checks that
/// every row of the slice equals the corresponding map applied to it.
pub fn is_constructable(frac: &Array2<f64>, wa: &WyckoffAssignment, tol: f64) -> Constructability {
    if frac.nrows() != wa.num_rows() {
        return Constructability {
            ok: false,
            witnesses: vec![],
            max_residual: f64::INFINITY,
        };
    }
    let mut witnesses = Vec::with_capacity(wa.slices.len());
    let mut max_residual: f64 = 0.0;
    for slice in &wa.slices {
        let f1 = row3(frac.view(), slice.start);
        let x = recover_witness(&slice.position, f1);
        for (j, m) in slice.position.maps.iter().enumerate() {
            let d = torus_dist(m.apply(x), row3(frac.view(), slice.start + j));
            max_residual = max_residual.max(d);
        }
        witnesses.push(x);
    }
    Constructability {
        ok: max_residual < tol,
        witnesses,
        max_residual,
    }
}

/// Least-squares solution of `V₁ x + τ₁ ≡ f₁ (mod 1)`; directions in the
/// kernel of `V₁` are copied from `f₁`.
pub fn recover_witness(pos: &WyckoffPosition, f1: Vec3) -> Vec3 {
    let m = &pos.maps[0];
    let pinv = pseudo_inverse(&m.v_real);
    let mut proj = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            proj[i][j] = (0..3).map(|e| pinv[i][e] * m.v_real[e][j]).sum();
        }
    }
    let d0 = log3(m.tau_real, f1);
    let free = {
        let pf = mat_vec(&proj, f1);
        [f1[0] - pf[0], f1[1] - pf[1], f1[2] - pf[2]]
    };
    // V x ranges over a box as wide as the row sums of |V|, so the lift of
    // d0 that V can reach may differ by a few integers per component
    let reach: Vec<i32> = (0..3)
        .map(|r| m.v_real[r].iter().map(|x| x.abs()).sum::<f64>().ceil() as i32)
        .collect();
    let mut best = [0.0; 3];
    let mut best_r = f64::INFINITY;
    let shifts = |k: i32| -> Vec<i32> {
        let mut v = vec![0];
        for s in 1..=k {
            v.push(-s);
            v.push(s);
        }
        v
    };
    for &a in &shifts(reach[0]) {
        for &b in &shifts(reach[1]) {
            for &c in &shifts(reach[2]) {
                let d = [d0[0] + a as f64, d0[1] + b as f64, d0[2] + c as f64];
                let px = mat_vec(&pinv, d);
                let x = wrap3([px[0] + free[0], px[1] + free[1], px[2] + free[2]]);
                let r = torus_dist(m.apply(x), f1);
                if r < best_r {
                    best_r = r;
                    best = x;
                    if r < 1e-13 {
                        return best;
                    }
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgdata::{bundled, GroupDataset};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ds() -> &'static GroupDataset {
        static DS: std::sync::OnceLock<GroupDataset> = std::sync::OnceLock::new();
        DS.get_or_init(|| bundled().unwrap())
    }

    fn crystal(frac: Array2<f64>) -> Crystal {
        let n = frac.nrows();
        Crystal::new([0.0; 6], frac, vec![0; n], 1)
    }

    fn random_points(wa: &WyckoffAssignment, rng: &mut impl Rng) -> Vec<Vec3> {
        wa.slices.iter().map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn act_examples() {
        let c = crystal(array![[0.1, 0.2, 0.3]]);
        assert_eq!(act(&AffineOp::identity(), &c), c);
        let inv = crate::sgdata::parse_xyz("-x,-y,-z").unwrap();
        let out = act(&inv, &c);
        for (a, b) in out.frac.iter().zip([0.9, 0.8, 0.7]) {
            assert!((a - b).abs() < 1e-15);
        }
        let rot = crate::sgdata::parse_xyz("-y,x,z").unwrap();
        let out = act(&rot, &crystal(array![[0.1, 0.3, 0.0]]));
        assert!(torus_dist(out.row(0), [0.7, 0.1, 0.0]) < 1e-15);
    }

    #[test]
    fn permute_examples() {
        let c = Crystal::new([0.0; 6], array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], vec![0, 1], 2);
        assert_eq!(permute(&[0, 1], &c).unwrap(), c);
        let s = permute(&[1, 0], &c).unwrap();
        assert_eq!(s.species, vec![1, 0]);
        assert_eq!(s.frac.row(0), c.frac.row(1));
        let sigma = [1, 0];
        assert_eq!(permute(&invert_perm(&sigma), &s).unwrap(), c);
        assert!(permute(&[0], &c).is_err());
    }

    #[test]
    fn certify_examples() {
        let g = ds().group(3, 2).unwrap();
        let origin = WyckoffAssignment::new(g, &[ds().wyckoff(3, 2, "1a").unwrap().clone()]).unwrap();
        let cert = certify(&crystal(array![[0.0, 0.0, 0.0]]), g, &origin, CERTIFY_TOL).unwrap();
        assert_eq!(cert.perms, vec![vec![0], vec![0]]);

        let general = WyckoffAssignment::new(g, &[ds().wyckoff(3, 2, "2i").unwrap().clone()]).unwrap();
        let pair = crystal(array![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]]);
        let cert = certify(&pair, g, &general, CERTIFY_TOL).unwrap();
        assert_eq!(cert.perms, vec![vec![0, 1], vec![1, 0]]);
        assert!(cert.is_homomorphism(g));

        let mut bad = pair.clone();
        bad.frac[[1, 0]] += 10.0 * CERTIFY_TOL;
        assert!(matches!(certify(&bad, g, &general, CERTIFY_TOL), Err(SymmetryError::NotSymmetric { op: 1, .. })));
    }

    #[test]
    fn species_must_be_invariant() {
        let g = ds().group(3, 2).unwrap();
        let general = WyckoffAssignment::new(g, &[ds().wyckoff(3, 2, "2i").unwrap().clone()]).unwrap();
        let c = Crystal::new([0.0; 6], array![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]], vec![0, 1], 2);
        assert!(matches!(certify(&c, g, &general, CERTIFY_TOL), Err(SymmetryError::SpeciesMismatch { .. })));
    }

    #[test]
    fn foreign_position_rejected() {
        let g = ds().group(3, 2).unwrap();
        let other = ds().wyckoff(3, 221, "1a").unwrap().clone();
        assert!(matches!(WyckoffAssignment::new(g, &[other]), Err(SymmetryError::WyckoffMismatch { .. })));
    }

    #[test]
    fn constructable_examples() {
        let g = ds().group(3, 2).unwrap();
        let origin = WyckoffAssignment::new(g, &[ds().wyckoff(3, 2, "1a").unwrap().clone()]).unwrap();
        assert!(is_constructable(&array![[0.0, 0.0, 0.0]], &origin, 1e-8).ok);
        assert!(!is_constructable(&array![[0.1, 0.0, 0.0]], &origin, 1e-8).ok);

        let general = WyckoffAssignment::new(g, &[ds().wyckoff(3, 2, "2i").unwrap().clone()]).unwrap();
        let res = is_constructable(&array![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]], &general, 1e-8);
        assert!(res.ok);
        assert!(torus_dist(res.witnesses[0], [0.1, 0.2, 0.3]) < 1e-12);
    }

    #[test]
    fn shuffled_general_position_not_constructable() {
        let g = ds().group(2, 11).unwrap();
        let w = ds().general_position(2, 11).unwrap().clone();
        let wa = WyckoffAssignment::new(g, &[w]).unwrap();
        let frac = wa.construct(&[[0.11, 0.27, 0.0]]);
        assert!(is_constructable(&frac, &wa, 1e-8).ok);
        let mut swapped = frac.clone();
        for c in 0..3 {
            swapped.swap([1, c], [2, c]);
        }
        assert!(!is_constructable(&swapped, &wa, 1e-8).ok);
    }

    #[test]
    fn witnesses_across_the_seam() {
        // special positions with repeated coordinates sitting on the seam
        for (dim, num) in [(3u8, 221u32), (3, 166), (2, 17), (3, 225)] {
            let g = ds().group(dim, num).unwrap();
            for w in ds().positions(dim, num).unwrap() {
                let wa = WyckoffAssignment::new(g, &[w.clone()]).unwrap();
                for x in [0.4999999999, 0.5000000001, 0.9999999999, 0.25] {
                    let frac = wa.construct(&[[x, x, x]]);
                    assert!(is_constructable(&frac, &wa, 1e-8).ok, "{} {} at {}", g.name, w.label, x);
                }
            }
        }
    }

    #[test]
    fn every_group_constructs_and_certifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (key, list) in &ds().wyckoffs {
            let g = &ds().groups[key];
            for w in list {
                let wa = WyckoffAssignment::new(g, &[w.clone(), w.clone()]).unwrap();
                let frac = wa.construct(&random_points(&wa, &mut rng));
                let res = is_constructable(&frac, &wa, 1e-8);
                assert!(res.ok, "{} {} residual {}", g.name, w.label, res.max_residual);
                let cert = certify_frac(&frac, None, g, &wa, 1e-8).unwrap();
                assert!(cert.is_homomorphism(g), "{} {}", g.name, w.label);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn act_commutes_with_permute(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for g in ds().groups.values() {
                let n = 5;
                let frac = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>());
                let c = Crystal::new([0.0; 6], frac, (0..n).map(|i| i % 2).collect(), 2);
                let mut sigma: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    sigma.swap(i, rng.gen_range(0..=i));
                }
                let op = rng.gen_range(0..g.order());
                let a = act_index(g, op, &permute(&sigma, &c).unwrap());
                let b = permute(&sigma, &act_index(g, op, &c)).unwrap();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn constructable_implies_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys: Vec<_> = ds().groups.keys().cloned().collect();
            let key = keys[rng.gen_range(0..keys.len())];
            let g = &ds().groups[&key];
            let list = &ds().wyckoffs[&key];
            let picks: Vec<_> = (0..3).map(|_| list[rng.gen_range(0..list.len())].clone()).collect();
            let wa = WyckoffAssignment::new(g, &picks).unwrap();
            let frac = wa.construct(&random_points(&wa, &mut rng));
            prop_assert!(is_constructable(&frac, &wa, 1e-8).ok);
            let cert = certify_frac(&frac, None, g, &wa, 1e-8);
            prop_assert!(cert.is_ok(), "{} {:?}", g.name, wa.labels());
            prop_assert!(cert.unwrap().is_homomorphism(g));
        }
    }
}
