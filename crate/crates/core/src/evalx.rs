//! Structure matching, match rate, structural validity and symmetry audits.

use crate::field::{backbone_calls, naive_ga, reset_backbone_calls, symmetrize, BackboneParams, FieldInput, GaOperator};
use crate::lattice::{cell_parameters, k_to_L};
use crate::prior::sample_prior;
use crate::sgdata::{SpaceGroup, WyckoffPosition};
use crate::symmetry::{certify, is_constructable, Crystal, SymmetryError, WyckoffAssignment};
use crate::torus::{log3, mat_vec, torus_dist, Vec3};
use pathfinding::kuhn_munkres::kuhn_munkres_min;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Matcher thresholds: fractional site distance, relative cell-length
/// deviation and absolute angle deviation in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub site_tol: f64,
    pub length_tol: f64,
    pub angle_tol: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            site_tol: 0.03,
            length_tol: 0.2,
            angle_tol: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matched: bool,
    /// Torus RMSE of the aligned rows in fractional units; set only when
    /// matched.
    pub rmse: Option<f64>,
    pub max_site_dist: f64,
    /// Generated row `i` aligns with reference row `permutation[i]`.
    pub permutation: Vec<usize>,
    /// Origin shift added to the generated coordinates.
    pub shift: Vec3,
    /// Largest aligned-site distance within each assignment slice.
    pub orbit_residuals: Vec<f64>,
    pub max_length_dev: f64,
    pub max_angle_dev: f64,
}

/// Symmetric cell deviations: `max/min - 1` per length and `|Δ|` per angle.
pub fn cell_deviation(a: &Crystal, b: &Crystal) -> (f64, f64) {
    let pa = cell_parameters(&k_to_L(&a.k));
    let pb = cell_parameters(&k_to_L(&b.k));
    let mut len: f64 = 0.0;
    let mut ang: f64 = 0.0;
    for c in 0..3 {
        len = len.max(pa[c].max(pb[c]) / pa[c].min(pb[c]) - 1.0);
        ang = ang.max((pa[c + 3] - pb[c + 3]).abs());
    }
    (len, ang)
}

struct Alignment {
    perm: Vec<usize>,
    shift: Vec3,
    dists: Vec<f64>,
}

impl Alignment {
    fn max(&self) -> f64 {
        self.dists.iter().cloned().fold(0.0, f64::max)
    }

    fn rmse(&self) -> f64 {
        if self.dists.is_empty() {
            return 0.0;
        }
        (self.dists.iter().map(|d| d * d).sum::<f64>() / self.dists.len() as f64).sqrt()
    }

    fn better_than(&self, other: &Alignment) -> bool {
        (self.max(), self.rmse()) < (other.max(), other.rmse())
    }
}

fn shifted(x: Vec3, s: Vec3) -> Vec3 {
    [x[0] + s[0], x[1] + s[1], x[2] + s[2]]
}

/// Optimal species-preserving assignment of `a + shift` onto `b`.
fn assign(a: &Crystal, b: &Crystal, classes: &[(Vec<usize>, Vec<usize>)], shift: Vec3) -> Alignment {
    let n = a.len();
    let mut perm = vec![0; n];
    for (rows_a, rows_b) in classes {
        let m = rows_a.len();
        // costs in units of 1e-12 squared fractional distance
        let cost = Matrix::from_fn(m, m, |(i, j)| {
            let d = torus_dist(shifted(a.row(rows_a[i]), shift), b.row(rows_b[j]));
            (d * d * 1e12).round() as i64
        });
        let (_, sol) = kuhn_munkres_min(&cost);
        for (i, &j) in sol.iter().enumerate() {
            perm[rows_a[i]] = rows_b[j];
        }
    }
    let dists = (0..n).map(|i| torus_dist(shifted(a.row(i), shift), b.row(perm[i]))).collect();
    Alignment { perm, shift, dists }
}

fn species_classes(a: &Crystal, b: &Crystal) -> Option<Vec<(Vec<usize>, Vec<usize>)>> {
    let num = a.num_species.max(b.num_species);
    let mut out = Vec::new();
    for s in 0..num {
        let ra: Vec<usize> = (0..a.len()).filter(|&i| a.species[i] == s).collect();
        let rb: Vec<usize> = (0..b.len()).filter(|&i| b.species[i] == s).collect();
        if ra.len() != rb.len() {
            return None;
        }
        if !ra.is_empty() {
            out.push((ra, rb));
        }
    }
    Some(out)
}

/// Best alignment of `a` onto `b` over origin shifts that put an anchor row
/// of the rarest species onto each candidate partner.
fn align(a: &Crystal, b: &Crystal, classes: &[(Vec<usize>, Vec<usize>)]) -> Alignment {
    let (anchor_rows, partners) = classes.iter().min_by_key(|(ra, _)| ra.len()).expect("non-empty crystal");
    let anchor = a.row(anchor_rows[0]);
    let mut best: Option<Alignment> = None;
    for &j in partners {
        let s = log3(anchor, b.row(j));
        let first = assign(a, b, classes, s);
        // refine the shift by the mean residual displacement
        let n = a.len() as f64;
        let mut mean = [0.0; 3];
        for i in 0..a.len() {
            let d = log3(shifted(a.row(i), s), b.row(first.perm[i]));
            for c in 0..3 {
                mean[c] += d[c] / n;
            }
        }
        let refined = assign(a, b, classes, shifted(s, mean));
        let cand = if refined.better_than(&first) { refined } else { first };
        if best.as_ref().map_or(true, |b| cand.better_than(b)) {
            best = Some(cand);
        }
    }
    best.expect("at least one partner")
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Matches a generated crystal against a reference sharing its assignment.
///
/// Alignment is searched from both sides and the better one kept, so the
/// verdict does not depend on argument order.
pub fn match_crystals(gen: &Crystal, reference: &Crystal, wa: &WyckoffAssignment, th: &MatchThresholds) -> Result<MatchReport, EvalError> {
    if gen.len() != reference.len() {
        return Err(EvalError::ShapeMismatch(format!("{} rows vs {} rows", gen.len(), reference.len())));
    }
    if wa.num_rows() != gen.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "assignment expands to {} rows, crystals have {}",
            wa.num_rows(),
            gen.len()
        )));
    }
    let (max_length_dev, max_angle_dev) = cell_deviation(gen, reference);
    let classes = match (gen.is_empty(), species_classes(gen, reference)) {
        (true, _) => Vec::new(),
        (false, Some(c)) => c,
        (false, None) => {
            return Ok(MatchReport {
                matched: false,
                rmse: None,
                max_site_dist: f64::INFINITY,
                permutation: vec![],
                shift: [0.0; 3],
                orbit_residuals: vec![],
                max_length_dev,
                max_angle_dev,
            })
        }
    };
    let al = if classes.is_empty() {
        Alignment {
            perm: vec![],
            shift: [0.0; 3],
            dists: vec![],
        }
    } else {
        let fwd = align(gen, reference, &classes);
        let swapped: Vec<_> = classes.iter().map(|(a, b)| (b.clone(), a.clone())).collect();
        let bwd = align(reference, gen, &swapped);
        if bwd.better_than(&fwd) {
            let perm = invert(&bwd.perm);
            let dists = (0..gen.len()).map(|i| bwd.dists[perm[i]]).collect();
            Alignment {
                perm,
                shift: bwd.shift.map(|x| -x),
                dists,
            }
        } else {
            fwd
        }
    };
    let orbit_residuals = wa.slices.iter().map(|s| s.rows().map(|i| al.dists[i]).fold(0.0, f64::max)).collect();
    let max_site_dist = al.max();
    let matched = max_site_dist <= th.site_tol && max_length_dev <= th.length_tol && max_angle_dev <= th.angle_tol;
    Ok(MatchReport {
        matched,
        rmse: matched.then(|| al.rmse()),
        max_site_dist,
        permutation: al.perm,
        shift: al.shift,
        orbit_residuals,
        max_length_dev,
        max_angle_dev,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub total: usize,
    pub matched: usize,
    /// Match rate in percent.
    pub match_rate: f64,
    /// Mean RMSE over matched pairs.
    pub mean_rmse: Option<f64>,
}

impl MatchSummary {
    /// Aggregates reports; `None` entries (failed generations) count as
    /// unmatched.
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = Option<&'a MatchReport>>) -> Self {
        let mut total = 0;
        let mut rmses = Vec::new();
        for r in reports {
            total += 1;
            if let Some(r) = r.filter(|r| r.matched) {
                rmses.push(r.rmse.unwrap_or(0.0));
            }
        }
        let matched = rmses.len();
        Self {
            total,
            matched,
            match_rate: if total == 0 { 0.0 } else { 100.0 * matched as f64 / total as f64 },
            mean_rmse: (matched > 0).then(|| rmses.iter().sum::<f64>() / matched as f64),
        }
    }
}

pub fn match_rate(
    generated: &[Crystal],
    references: &[Crystal],
    assignments: &[WyckoffAssignment],
    th: &MatchThresholds,
) -> Result<MatchSummary, EvalError> {
    if generated.len() != references.len() || generated.len() != assignments.len() {
        return Err(EvalError::ShapeMismatch("generated, reference and assignment lists differ in length".into()));
    }
    let reports = generated
        .iter()
        .zip(references)
        .zip(assignments)
        .map(|((g, r), wa)| match_crystals(g, r, wa, th))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MatchSummary::from_reports(reports.iter().map(Some)))
}

/// Smallest Cartesian distance between atoms over the 27 neighbouring cell
/// images (self-images excluded only for the zero shift).
pub fn min_interatomic_distance(c: &Crystal) -> f64 {
    let l = k_to_L(&c.k);
    let n = c.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i..n {
            let d = log3(c.row(j), c.row(i));
            for zx in -1..=1 {
                for zy in -1..=1 {
                    for zz in -1..=1 {
                        if i == j && zx == 0 && zy == 0 && zz == 0 {
                            continue;
                        }
                        let f = [d[0] + zx as f64, d[1] + zy as f64, d[2] + zz as f64];
                        let x = mat_vec(&l, f);
                        best = best.min((x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt());
                    }
                }
            }
        }
    }
    best
}

pub const MIN_DISTANCE: f64 = 0.5;

pub fn structural_validity(c: &Crystal, min_dist: f64) -> bool {
    min_interatomic_distance(c) > min_dist
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub symmetric: bool,
    /// Certificate residual when symmetric, otherwise the failing residual
    /// when the checker reports one.
    pub symmetry_residual: Option<f64>,
    pub symmetry_error: Option<String>,
    pub constructable: bool,
    pub constructable_residual: f64,
    pub valid: bool,
    pub min_distance: f64,
    /// Species constant on every assignment slice.
    pub atoms_per_orbit: bool,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.symmetric && self.constructable && self.valid && self.atoms_per_orbit
    }
}

pub fn audit(c: &Crystal, group: &SpaceGroup, wa: &WyckoffAssignment, tol: f64, min_dist: f64) -> AuditReport {
    let (symmetric, symmetry_residual, symmetry_error) = match certify(c, group, wa, tol) {
        Ok(cert) => (true, Some(cert.max_residual), None),
        Err(e) => {
            let r = match &e {
                SymmetryError::NotSymmetric { residual, .. } => Some(*residual),
                _ => None,
            };
            (false, r, Some(e.to_string()))
        }
    };
    let cons = is_constructable(&c.frac, wa, tol);
    let atoms_per_orbit =
        c.len() == wa.num_rows() && wa.slices.iter().all(|s| s.rows().all(|i| c.species[i] == c.species[s.start]));
    let min_distance = min_interatomic_distance(c);
    AuditReport {
        symmetric,
        symmetry_residual,
        symmetry_error,
        constructable: cons.ok,
        constructable_residual: cons.max_residual,
        valid: min_distance > min_dist,
        min_distance,
        atoms_per_orbit,
    }
}

/// Positions filling about `n` rows: greedily the largest multiplicity that
/// still fits.
pub fn fill_positions(positions: &[WyckoffPosition], n: usize) -> Vec<WyckoffPosition> {
    let mut sorted: Vec<&WyckoffPosition> = positions.iter().collect();
    sorted.sort_by_key(|p| std::cmp::Reverse(p.multiplicity()));
    let mut out = Vec::new();
    let mut left = n;
    while let Some(p) = sorted.iter().find(|p| p.multiplicity() <= left) {
        left -= p.multiplicity();
        out.push((*p).clone());
    }
    if out.is_empty() {
        if let Some(p) = sorted.last() {
            out.push((*p).clone());
        }
    }
    out
}

/// Call counts and timings of the single-evaluation and the naive group
/// average on one certified crystal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaBenchRow {
    pub group: String,
    pub dimension: u8,
    pub number: u32,
    pub order: usize,
    pub n: usize,
    pub naive_calls: u64,
    pub efficient_calls: u64,
    pub naive_ms: f64,
    pub efficient_ms: f64,
    pub max_abs_diff: f64,
}

pub const GA_BENCH_HEADER: &str = "group,order,n,naive_calls,efficient_calls,naive_ms,efficient_ms,max_abs_diff\n";

impl GaBenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{:e}\n",
            self.group, self.order, self.n, self.naive_calls, self.efficient_calls, self.naive_ms, self.efficient_ms, self.max_abs_diff
        )
    }
}

/// Times `reps` evaluations of each route; call counts are per evaluation.
pub fn bench_ga(
    group: &SpaceGroup,
    positions: &[WyckoffPosition],
    params: &BackboneParams,
    reps: usize,
    seed: u64,
) -> Result<GaBenchRow, crate::Error> {
    let reps = reps.max(1);
    let num_species = params.config.atom_in;
    let n: usize = positions.iter().map(|p| p.multiplicity()).sum();
    let species: Vec<usize> = positions
        .iter()
        .enumerate()
        .flat_map(|(j, p)| std::iter::repeat(j % num_species).take(p.multiplicity()))
        .collect();
    let s = sample_prior(group, positions, &species, num_species, 1.0, seed)?;
    let atoms = s.crystal.one_hot();
    let input = FieldInput {
        k: &s.crystal.k,
        frac: &s.crystal.frac,
        atoms: &atoms,
        t: 0.5,
    };
    let ga = GaOperator::new(group, &s.certificate);

    reset_backbone_calls();
    let fast = symmetrize(params, &input, group, &s.certificate, &ga)?;
    let efficient_calls = backbone_calls();
    reset_backbone_calls();
    let slow = naive_ga(params, &input, group)?;
    let naive_calls = backbone_calls();

    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(symmetrize(params, &input, group, &s.certificate, &ga)?);
    }
    let efficient_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(naive_ga(params, &input, group)?);
    }
    let naive_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
    Ok(GaBenchRow {
        group: group.name.clone(),
        dimension: group.dimension,
        number: group.number,
        order: group.order(),
        n,
        naive_calls,
        efficient_calls,
        naive_ms,
        efficient_ms,
        max_abs_diff: fast.max_abs_diff(&slow),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::sample_prior;
    use crate::sgdata::{bundled, GroupDataset};
    use crate::symmetry::permute;
    use ndarray::array;
    use proptest::prelude::*;

    fn ds() -> &'static GroupDataset {
        static DS: std::sync::OnceLock<GroupDataset> = std::sync::OnceLock::new();
        DS.get_or_init(|| bundled().unwrap())
    }

    fn sample(dim: u8, num: u32, labels: &[&str], seed: u64) -> (Crystal, WyckoffAssignment) {
        let g = ds().group(dim, num).unwrap();
        let pos: Vec<_> = labels.iter().map(|l| ds().wyckoff(dim, num, l).unwrap().clone()).collect();
        let species: Vec<usize> = pos.iter().enumerate().flat_map(|(i, p)| std::iter::repeat(i % 2).take(p.multiplicity())).collect();
        let mut s = sample_prior(g, &pos, &species, 2, 0.2, seed).unwrap();
        s.crystal.k[5] += 1.5;
        (s.crystal, s.assignment)
    }

    #[test]
    fn reflexive_with_zero_rmse() {
        let (c, wa) = sample(3, 14, &["4e", "2a"], 1);
        let r = match_crystals(&c, &c, &wa, &MatchThresholds::default()).unwrap();
        assert!(r.matched);
        assert!(r.rmse.unwrap() < 1e-12);
        assert_eq!(r.permutation, (0..c.len()).collect::<Vec<_>>());
    }

    #[test]
    fn perturbation_beyond_tolerance_fails() {
        let (c, wa) = sample(3, 1, &["1a", "1a"], 2);
        let th = MatchThresholds::default();
        let mut d = c.clone();
        d.frac[[0, 0]] += 2.0 * th.site_tol;
        let r = match_crystals(&d, &c, &wa, &th).unwrap();
        assert!(!r.matched);
        assert!(r.rmse.is_none());
    }

    #[test]
    fn recovers_within_orbit_permutation() {
        let (c, wa) = sample(3, 221, &["1a", "3c"], 3);
        let sigma = vec![0, 3, 1, 2];
        let p = permute(&sigma, &c).unwrap();
        let r = match_crystals(&p, &c, &wa, &MatchThresholds::default()).unwrap();
        assert!(r.matched);
        assert!(r.rmse.unwrap() < 1e-12);
        for i in 0..4 {
            assert_eq!(r.permutation[i], sigma[i]);
        }
    }

    #[test]
    fn origin_shift_is_found() {
        let (c, wa) = sample(3, 2, &["2i", "2i"], 4);
        let mut d = c.clone();
        for i in 0..d.len() {
            d.frac[[i, 0]] = crate::torus::wrap_scalar(d.frac[[i, 0]] + 0.5);
        }
        let r = match_crystals(&d, &c, &wa, &MatchThresholds::default()).unwrap();
        assert!(r.matched);
        assert!((r.shift[0].abs() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lattice_thresholds() {
        let (c, wa) = sample(3, 1, &["1a"], 5);
        let mut d = c.clone();
        d.k[5] += 0.25;
        assert!(!match_crystals(&d, &c, &wa, &MatchThresholds::default()).unwrap().matched);
        d.k[5] = c.k[5] + 0.1;
        assert!(match_crystals(&d, &c, &wa, &MatchThresholds::default()).unwrap().matched);
    }

    #[test]
    fn species_mismatch_is_unmatched() {
        let (c, wa) = sample(3, 1, &["1a", "1a"], 6);
        let mut d = c.clone();
        d.species = vec![0, 0];
        assert!(!match_crystals(&d, &c, &wa, &MatchThresholds::default()).unwrap().matched);
    }

    #[test]
    fn shape_mismatch() {
        let (c, wa) = sample(3, 1, &["1a", "1a"], 6);
        let (d, _) = sample(3, 1, &["1a"], 6);
        assert!(match_crystals(&d, &c, &wa, &MatchThresholds::default()).is_err());
    }

    #[test]
    fn match_rate_aggregates() {
        let items: Vec<_> = (0..4).map(|s| sample(2, 11, &["4d", "1a"], s)).collect();
        let cs: Vec<_> = items.iter().map(|x| x.0.clone()).collect();
        let was: Vec<_> = items.iter().map(|x| x.1.clone()).collect();
        let th = MatchThresholds::default();
        let s = match_rate(&cs, &cs, &was, &th).unwrap();
        assert_eq!(s.match_rate, 100.0);
        assert!(s.mean_rmse.unwrap() < 1e-12);
        let mut shifted = cs.clone();
        shifted.rotate_left(1);
        let s = match_rate(&shifted, &cs, &was, &th).unwrap();
        assert!(s.match_rate < 100.0);
        assert_eq!(MatchSummary::from_reports(vec![None]).match_rate, 0.0);
    }

    #[test]
    fn validity_cases() {
        let one = Crystal::new([0.0, 0.0, 0.0, 0.0, 0.0, 1.0], array![[0.1, 0.2, 0.3]], vec![0], 1);
        assert!(structural_validity(&one, MIN_DISTANCE));
        let same = Crystal::new([0.0, 0.0, 0.0, 0.0, 0.0, 1.0], array![[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]], vec![0, 0], 1);
        assert!(!structural_validity(&same, MIN_DISTANCE));
        let image = Crystal::new([0.0, 0.0, 0.0, 0.0, 0.0, 1.0], array![[0.0, 0.2, 0.3], [0.999_999_999_999, 0.2, 0.3]], vec![0, 0], 1);
        assert!(!structural_validity(&image, MIN_DISTANCE));
        let tiny = Crystal::new([0.0, 0.0, 0.0, 0.0, 0.0, -2.0], array![[0.0, 0.0, 0.0]], vec![0], 1);
        assert!(!structural_validity(&tiny, MIN_DISTANCE));
    }

    #[test]
    fn audit_prior_and_perturbed() {
        let g = ds().group(3, 123).unwrap();
        let (c, wa) = sample(3, 123, &["1a", "2g"], 8);
        let a = audit(&c, g, &wa, 1e-6, 0.0);
        assert!(a.symmetric && a.constructable && a.atoms_per_orbit);
        let mut d = c.clone();
        d.frac[[1, 2]] += 0.01;
        let a = audit(&d, g, &wa, 1e-6, 0.0);
        assert!(!a.symmetric);
        assert!(a.symmetry_error.is_some());
        let mut e = c.clone();
        e.species[1] = 1 - e.species[1];
        assert!(!audit(&e, g, &wa, 1e-6, 0.0).atoms_per_orbit);
    }

    #[test]
    fn bench_counts_calls() {
        let cfg = crate::field::FieldConfig {
            d: 8,
            d_t: 4,
            d_s: 6,
            layers: 1,
            ..crate::field::FieldConfig::new(2, 1)
        };
        let params = BackboneParams::init_with_heads(&cfg, 1, true).unwrap();
        for (dim, num) in [(3, 1), (3, 123), (2, 6)] {
            let g = ds().group(dim, num).unwrap();
            let pos = fill_positions(ds().positions(dim, num).unwrap(), 16);
            let row = bench_ga(g, &pos, &params, 1, 3).unwrap();
            assert_eq!(row.efficient_calls, 1);
            assert_eq!(row.naive_calls, g.order() as u64);
            assert!(row.max_abs_diff < 1e-9);
            assert!(row.csv_line().split(',').count() == GA_BENCH_HEADER.split(',').count());
        }
        let pos = fill_positions(ds().positions(3, 225).unwrap(), 2);
        assert_eq!(pos.len(), 1);
        let pos = fill_positions(ds().positions(3, 221).unwrap(), 16);
        assert_eq!(pos.iter().map(|p| p.multiplicity()).sum::<usize>(), 16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn match_is_symmetric(seed in 0u64..10_000, eps in 0.0f64..0.05) {
            let (c, wa) = sample(3, 2, &["2i", "1a"], seed);
            let mut d = c.clone();
            let mut rng = crate::prior::rng_from_seed(seed ^ 7);
            use rand::Rng;
            for i in 0..d.len() {
                for k in 0..3 {
                    d.frac[[i, k]] = crate::torus::wrap_scalar(d.frac[[i, k]] + eps * (rng.gen::<f64>() - 0.5));
                }
            }
            let th = MatchThresholds::default();
            let ab = match_crystals(&c, &d, &wa, &th).unwrap();
            let ba = match_crystals(&d, &c, &wa, &th).unwrap();
            prop_assert_eq!(ab.matched, ba.matched);
            prop_assert!((ab.max_site_dist - ba.max_site_dist).abs() < 1e-12);
        }

        #[test]
        fn validity_invariant_under_group_and_permutation(seed in 0u64..10_000, g in 0usize..8) {
            let group = ds().group(3, 123).unwrap();
            let (c, _) = sample(3, 123, &["2g", "4i"], seed);
            let g = g % group.order();
            let moved = crate::symmetry::act_index(group, g, &c);
            let d0 = min_interatomic_distance(&c);
            prop_assert!((min_interatomic_distance(&moved) - d0).abs() < 1e-9);
            let sigma: Vec<usize> = (0..c.len()).rev().collect();
            let p = permute(&sigma, &c).unwrap();
            prop_assert!((min_interatomic_distance(&p) - d0).abs() < 1e-9);
        }
    }
}
