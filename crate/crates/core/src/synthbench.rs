//! Synthetic template datasets and the experiment drivers built on them.

use crate::evalx::{match_crystals, MatchReport, MatchSummary, MatchThresholds};
use crate::field::{BackboneParams, FieldKind};
use crate::flow::{sample, train, Condition, FlowError, Generated, SampleConfig, TrainConfig, TrainExample};
use crate::lattice::{group_mask, LatticeCoeffs};
use crate::prior::{derive_seed, rng_from_seed, PriorKind, PRIOR_TOL};
use crate::sgdata::{GroupDataset, GroupKey, SgError, WyckoffPosition};
use crate::symmetry::{certify, is_constructable, Crystal, SymmetryError, WyckoffAssignment};
use crate::torus::{wrap3, Vec3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("template {template}: {detail}")]
    Spec { template: String, detail: String },
    #[error(transparent)]
    Data(#[from] SgError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
}

/// A cluster of crystals around fixed generator points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub name: String,
    #[serde(default = "three")]
    pub dimension: u8,
    pub group: u32,
    pub wyckoffs: Vec<String>,
    /// Mean generator point per position.
    pub points: Vec<Vec3>,
    /// Species per position, shared by every row of its orbit.
    pub species: Vec<usize>,
    /// Standard deviation of the generator-point noise (fractional units).
    pub spread: f64,
    pub k_mean: LatticeCoeffs,
    pub k_spread: f64,
}

fn three() -> u8 {
    3
}

impl TemplateSpec {
    pub fn key(&self) -> GroupKey {
        (self.dimension, self.group)
    }

    fn err(&self, detail: impl Into<String>) -> SynthError {
        SynthError::Spec {
            template: self.name.clone(),
            detail: detail.into(),
        }
    }

    pub fn positions(&self, groups: &GroupDataset) -> Result<Vec<WyckoffPosition>, SynthError> {
        self.wyckoffs
            .iter()
            .map(|l| groups.wyckoff(self.dimension, self.group, l).cloned().map_err(SynthError::from))
            .collect()
    }

    /// Row-expanded species list.
    pub fn row_species(&self, groups: &GroupDataset) -> Result<Vec<usize>, SynthError> {
        let pos = self.positions(groups)?;
        Ok(pos.iter().zip(&self.species).flat_map(|(p, &s)| std::iter::repeat(s).take(p.multiplicity())).collect())
    }

    /// The noise-free crystal of the template.
    pub fn mean_crystal(&self, groups: &GroupDataset, num_species: usize) -> Result<(Crystal, WyckoffAssignment), SynthError> {
        let group = groups.group(self.dimension, self.group)?;
        let wa = WyckoffAssignment::new(group, &self.positions(groups)?)?;
        let frac = wa.construct(&self.points);
        let k = group_mask(group).apply(&self.k_mean);
        Ok((Crystal::new(k, frac, self.row_species(groups)?, num_species), wa))
    }
}

/// The bundled benchmark: six 3D groups over six crystal families and one
/// wallpaper group.
pub fn default_templates() -> Vec<TemplateSpec> {
    let t = |name: &str, dimension: u8, group: u32, w: &[&str], points: Vec<Vec3>, species: &[usize], k_mean: LatticeCoeffs| TemplateSpec {
        name: name.into(),
        dimension,
        group,
        wyckoffs: w.iter().map(|s| s.to_string()).collect(),
        points,
        species: species.to_vec(),
        spread: 0.004,
        k_mean,
        k_spread: 0.02,
    };
    let o = [0.0; 3];
    vec![
        t("P-1", 3, 2, &["1a", "2i"], vec![o, [0.23, 0.31, 0.37]], &[0, 1], [0.05, -0.04, 0.03, 0.06, -0.05, 1.6]),
        t("P2_1/c", 3, 14, &["4e", "2a"], vec![[0.21, 0.13, 0.29], o], &[0, 1], [0.0, 0.08, 0.0, 0.05, -0.04, 1.7]),
        t("P4/mmm", 3, 123, &["1a", "1d", "2g"], vec![o, o, [0.0, 0.0, 0.27]], &[0, 1, 2], [0.0, 0.0, 0.0, 0.0, 0.06, 1.5]),
        t("Pm-3m", 3, 221, &["1a", "1b", "3c"], vec![o, o, o], &[0, 1, 2], [0.0, 0.0, 0.0, 0.0, 0.0, 1.35]),
        t("P6/mmm", 3, 191, &["1a", "2d"], vec![o, o], &[0, 1], [0.0, 0.0, 0.0, 0.0, 0.1, 1.2]),
        t("Pnma", 3, 62, &["4c", "4c"], vec![[0.13, 0.25, 0.61], [0.37, 0.25, 0.08]], &[0, 1], [0.0, 0.0, 0.0, 0.07, -0.05, 1.8]),
        t("p4mm", 2, 11, &["1a", "4d"], vec![o, [0.29, 0.0, 0.0]], &[0, 2], [0.0, 0.0, 0.0, 0.0, -0.15, 1.4]),
    ]
}

/// Checks a spec list; returns non-fatal warnings.
pub fn validate_templates(specs: &[TemplateSpec], groups: &GroupDataset, num_species: usize, th: &MatchThresholds) -> Result<Vec<String>, SynthError> {
    let mut warnings = Vec::new();
    let mut means = Vec::new();
    for spec in specs {
        let pos = spec.positions(groups)?;
        if spec.points.len() != pos.len() || spec.species.len() != pos.len() {
            return Err(spec.err(format!(
                "{} positions but {} points and {} species",
                pos.len(),
                spec.points.len(),
                spec.species.len()
            )));
        }
        if let Some(&s) = spec.species.iter().find(|&&s| s >= num_species) {
            return Err(spec.err(format!("species {} out of range for {} species", s, num_species)));
        }
        if !(spec.spread >= 0.0 && spec.k_spread >= 0.0) {
            return Err(spec.err("spreads must be non-negative"));
        }
        if 3.0 * spec.spread > th.site_tol {
            warnings.push(format!(
                "template {}: spread {} is large against the site tolerance {}",
                spec.name, spec.spread, th.site_tol
            ));
        }
        means.push(spec.mean_crystal(groups, num_species)?);
    }
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            let (a, b) = (&specs[i], &specs[j]);
            if a.key() != b.key() || a.wyckoffs != b.wyckoffs || a.row_species(groups)? != b.row_species(groups)? {
                continue;
            }
            let r = match_crystals(&means[i].0, &means[j].0, &means[i].1, th).expect("same assignment shape");
            if r.matched {
                warnings.push(format!("templates {} and {} overlap under the matcher thresholds", a.name, b.name));
            }
        }
    }
    Ok(warnings)
}

/// One certified dataset crystal.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub template: String,
    pub group: GroupKey,
    pub labels: Vec<String>,
    pub crystal: Crystal,
    pub assignment: WyckoffAssignment,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub num_species: usize,
    pub train: Vec<DatasetEntry>,
    pub val: Vec<DatasetEntry>,
    pub test: Vec<DatasetEntry>,
}

impl SynthDataset {
    pub fn splits(&self) -> [(&'static str, &[DatasetEntry]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Split sizes `(train, val, test)` for `n` items at 60/20/20.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 5;
    let test = n / 5;
    (n - val - test, val, test)
}

pub fn sample_entry(spec: &TemplateSpec, groups: &GroupDataset, num_species: usize, id: String, seed: u64) -> Result<DatasetEntry, SynthError> {
    let group = groups.group(spec.dimension, spec.group)?;
    let wa = WyckoffAssignment::new(group, &spec.positions(groups)?)?;
    let mut rng = rng_from_seed(seed);
    let points: Vec<Vec3> = spec
        .points
        .iter()
        .map(|p| wrap3([0, 1, 2].map(|c| p[c] + spec.spread * rng.sample::<f64, _>(StandardNormal))))
        .collect();
    let frac = wa.construct(&points);
    let mut k = spec.k_mean;
    for x in &mut k {
        *x += spec.k_spread * rng.sample::<f64, _>(StandardNormal);
    }
    let k = group_mask(group).apply(&k);
    let crystal = Crystal::new(k, frac, spec.row_species(groups)?, num_species);
    certify(&crystal, group, &wa, PRIOR_TOL)?;
    if !is_constructable(&crystal.frac, &wa, PRIOR_TOL).ok {
        return Err(spec.err("sampled crystal is not constructable"));
    }
    Ok(DatasetEntry {
        id,
        template: spec.name.clone(),
        group: spec.key(),
        labels: spec.wyckoffs.clone(),
        crystal,
        assignment: wa,
        seed,
    })
}

/// Draws `n_per_template` crystals per template and splits each template's
/// draws 60/20/20.
pub fn make_dataset(
    specs: &[TemplateSpec],
    groups: &GroupDataset,
    num_species: usize,
    n_per_template: usize,
    seed: u64,
) -> Result<SynthDataset, SynthError> {
    let th = MatchThresholds::default();
    for w in validate_templates(specs, groups, num_species, &th)? {
        log::warn!("{}", w);
    }
    let mut ds = SynthDataset {
        num_species,
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for (ti, spec) in specs.iter().enumerate() {
        let (n_train, n_val, _) = split_sizes(n_per_template);
        for i in 0..n_per_template {
            let s = derive_seed(seed, ((ti as u64) << 32) | i as u64);
            let e = sample_entry(spec, groups, num_species, format!("t{}-{:05}", ti, i), s)?;
            if i < n_train {
                ds.train.push(e);
            } else if i < n_train + n_val {
                ds.val.push(e);
            } else {
                ds.test.push(e);
            }
        }
    }
    Ok(ds)
}

pub fn to_examples(entries: &[DatasetEntry], groups: &GroupDataset) -> Result<Vec<TrainExample>, FlowError> {
    entries
        .iter()
        .map(|e| {
            let g = groups.group(e.group.0, e.group.1)?;
            TrainExample::new(e.crystal.clone(), g, e.assignment.clone(), PRIOR_TOL)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub summary: MatchSummary,
    pub reports: Vec<Option<MatchReport>>,
    pub generated: Vec<Option<Generated>>,
}

/// Generates one crystal per entry from its `(G, W, A)` and matches it
/// against the entry. Generations that lose symmetry count as unmatched.
pub fn evaluate_csp(
    entries: &[DatasetEntry],
    groups: &GroupDataset,
    params: &BackboneParams,
    cfg: &SampleConfig,
    seed: u64,
    th: &MatchThresholds,
) -> Result<Evaluation, FlowError> {
    let mut reports = Vec::with_capacity(entries.len());
    let mut generated = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let g = groups.group(e.group.0, e.group.1)?;
        let positions: Vec<WyckoffPosition> = e.assignment.slices.iter().map(|s| s.position.clone()).collect();
        let cond = Condition {
            group: g,
            positions: &positions,
            species: Some(&e.crystal.species),
            num_species: e.crystal.num_species,
        };
        match sample(&cond, params, cfg, derive_seed(seed, i as u64)) {
            Ok(out) => {
                let r = match_crystals(&out.crystal, &e.crystal, &e.assignment, th).expect("generated rows follow the assignment");
                reports.push(Some(r));
                generated.push(Some(out));
            }
            Err(FlowError::SymmetryDrift(msg)) => {
                log::warn!("entry {}: {}", e.id, msg);
                reports.push(None);
                generated.push(None);
            }
            Err(other) => return Err(other),
        }
    }
    Ok(Evaluation {
        summary: MatchSummary::from_reports(reports.iter().map(|r| r.as_ref())),
        reports,
        generated,
    })
}

/// The evaluated cells of the field-kind × prior grid; the equivariant field
/// cannot take the asymmetric uniform prior.
pub const ABLATION_GRID: [(FieldKind, PriorKind); 3] = [
    (FieldKind::Equivariant, PriorKind::Wyckoff),
    (FieldKind::Plain, PriorKind::Wyckoff),
    (FieldKind::Plain, PriorKind::Uniform),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: FieldKind,
    pub prior: PriorKind,
    pub seed: u64,
    pub match_rate: f64,
    pub mean_rmse: Option<f64>,
    pub final_loss: f64,
}

/// Trains every grid cell with identical settings per seed and evaluates on
/// the test split.
pub fn run_ablation(
    ds: &SynthDataset,
    groups: &GroupDataset,
    base: &TrainConfig,
    seeds: &[u64],
    th: &MatchThresholds,
) -> Result<Vec<AblationRow>, FlowError> {
    let examples = to_examples(&ds.train, groups)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for (model, prior) in ABLATION_GRID {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.kind = model;
            cfg.prior = prior;
            let out = train(&examples, groups, &cfg)?;
            let ev = evaluate_csp(&ds.test, groups, &out.params, &cfg.sample_config(), derive_seed(seed, 77), th)?;
            log::info!("ablation {:?}/{:?} seed {}: MR {:.2}", model, prior, seed, ev.summary.match_rate);
            rows.push(AblationRow {
                model,
                prior,
                seed,
                match_rate: ev.summary.match_rate,
                mean_rmse: ev.summary.mean_rmse,
                final_loss: out.metrics.last().map_or(f64::NAN, |m| m.total),
            });
        }
    }
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn lower<T: Serialize>(x: &T) -> String {
    serde_json::to_value(x).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("model,prior,seed,match_rate,mean_rmse,final_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            lower(&r.model),
            lower(&r.prior),
            r.seed,
            r.match_rate,
            opt(r.mean_rmse),
            r.final_loss
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub match_rate: f64,
    pub mean_rmse: Option<f64>,
}

/// Match rate and RMSE of one checkpoint at each step count, with the same
/// prior draws for every count.
pub fn run_steps_sweep(
    entries: &[DatasetEntry],
    groups: &GroupDataset,
    params: &BackboneParams,
    base: &SampleConfig,
    steps: &[usize],
    seed: u64,
    th: &MatchThresholds,
) -> Result<Vec<SweepRow>, FlowError> {
    steps
        .iter()
        .map(|&n| {
            let cfg = SampleConfig { steps: n, ..base.clone() };
            let ev = evaluate_csp(entries, groups, params, &cfg, seed, th)?;
            Ok(SweepRow {
                steps: n,
                match_rate: ev.summary.match_rate,
                mean_rmse: ev.summary.mean_rmse,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("steps,match_rate,mean_rmse\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.steps, r.match_rate, opt(r.mean_rmse)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgdata::bundled;
    use std::collections::HashSet;

    fn ds() -> &'static GroupDataset {
        static DS: std::sync::OnceLock<GroupDataset> = std::sync::OnceLock::new();
        DS.get_or_init(|| bundled().unwrap())
    }

    #[test]
    fn default_templates_validate_cleanly() {
        let specs = default_templates();
        let warnings = validate_templates(&specs, ds(), 3, &MatchThresholds::default()).unwrap();
        assert!(warnings.is_empty(), "{:?}", warnings);
        let families: HashSet<_> = specs.iter().map(|s| group_mask(ds().group(s.dimension, s.group).unwrap()).family).collect();
        assert!(families.len() >= 3);
    }

    #[test]
    fn ten_items_split_six_two_two() {
        let specs = &default_templates()[..1];
        let d = make_dataset(specs, ds(), 3, 10, 1).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (6, 2, 2));
    }

    #[test]
    fn datasets_are_certified_disjoint_and_reproducible() {
        let specs = default_templates();
        let a = make_dataset(&specs, ds(), 3, 10, 9).unwrap();
        let b = make_dataset(&specs, ds(), 3, 10, 9).unwrap();
        assert_eq!(a, b);
        let mut ids = HashSet::new();
        for (_, split) in a.splits() {
            for e in split {
                assert!(ids.insert(e.id.clone()));
                let g = ds().group(e.group.0, e.group.1).unwrap();
                assert!(certify(&e.crystal, g, &e.assignment, 1e-8).is_ok());
                assert!(is_constructable(&e.crystal.frac, &e.assignment, 1e-8).ok);
            }
        }
        assert_eq!(ids.len(), 70);
    }

    #[test]
    fn overlapping_templates_warn() {
        let mut specs = default_templates()[..1].to_vec();
        let mut twin = specs[0].clone();
        twin.name = "twin".into();
        twin.points[1][0] += 0.001;
        specs.push(twin);
        let w = validate_templates(&specs, ds(), 3, &MatchThresholds::default()).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("overlap"));
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = default_templates()[0].clone();
        spec.wyckoffs.push("9z".into());
        assert!(validate_templates(&[spec], ds(), 3, &MatchThresholds::default()).is_err());
        let mut spec = default_templates()[0].clone();
        spec.species[0] = 7;
        assert!(validate_templates(&[spec], ds(), 3, &MatchThresholds::default()).is_err());
    }

    #[test]
    fn templates_are_separable() {
        let specs = default_templates();
        let th = MatchThresholds::default();
        let d = make_dataset(&specs, ds(), 3, 10, 3).unwrap();
        for e in &d.test {
            let spec = specs.iter().find(|s| s.name == e.template).unwrap();
            let (mean, wa) = spec.mean_crystal(ds(), 3).unwrap();
            assert!(match_crystals(&mean, &e.crystal, &wa, &th).unwrap().matched, "{}", e.id);
        }
    }

    #[test]
    fn zero_field_sweep_is_flat() {
        let specs = default_templates();
        let d = make_dataset(&specs[..3], ds(), 3, 5, 3).unwrap();
        let cfg = TrainConfig {
            model: crate::flow::ModelConfig {
                d: 8,
                d_t: 4,
                d_s: 6,
                layers: 1,
                kind: FieldKind::Equivariant,
            },
            ..TrainConfig::default()
        };
        let params = BackboneParams::init(&cfg.field_config(3), 0).unwrap();
        let rows = run_steps_sweep(&d.test, ds(), &params, &cfg.sample_config(), &[1, 5], 4, &MatchThresholds::default()).unwrap();
        assert_eq!(rows[0].match_rate, rows[1].match_rate);
        assert!(sweep_csv(&rows).starts_with("steps,match_rate,mean_rmse\n1,"));
    }
}
