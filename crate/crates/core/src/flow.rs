//! Conditional flows between prior and data crystals: interpolation,
//! regression targets, the weighted loss, Adam training and Euler sampling.

use crate::autodiff::{Tape, Var};
use crate::field::{
    check_certificate, symmetrize_tape, BackboneParams, FieldConfig, FieldError, FieldInput, FieldKind, GaOperator,
    };
use crate::lattice::{group_mask, LatticeCoeffs};
use crate::prior::{
    code_width, decode_species, derive_seed, encode_species, rng_from_seed, sample_atoms, sample_coords, sample_coords_uniform, sample_k,
    PriorKind,
};
use crate::sgdata::{GroupDataset, GroupKey, SpaceGroup, WyckoffPosition};
use crate::symmetry::{certify, is_constructable, Crystal, SymmetryCertificate, SymmetryError, WyckoffAssignment};
use crate::torus::{geodesic_metric, logmap_metric, wrap_scalar, Mat3};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("non-finite loss or gradient in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("generated crystal lost its symmetry: {0}")]
    SymmetryDrift(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
    #[error(transparent)]
    Data(#[from] crate::sgdata::SgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Csp,
    Dng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub layers: usize,
    pub kind: FieldKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_t: 32,
            d_s: 30,
            layers: 3,
            kind: FieldKind::Equivariant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda_k: f64,
    pub lambda_f: f64,
    pub lambda_a: f64,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub k_scale: f64,
    pub prior: PriorKind,
    pub model: ModelConfig,
    pub anti_f: f64,
    pub anti_k: f64,
    pub steps: usize,
    /// Dataset directory for file-driven runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Csp,
            lambda_k: 1.0,
            lambda_f: 100.0,
            lambda_a: 1.0,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            k_scale: 1.0,
            prior: PriorKind::Wyckoff,
            model: ModelConfig::default(),
            anti_f: 3.0,
            anti_k: 3.0,
            steps: 50,
            data: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for de novo generation (stronger coordinate anti-annealing).
    pub fn dng() -> Self {
        Self {
            mode: Mode::Dng,
            anti_f: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let positive = [
            ("lambda_k", self.lambda_k),
            ("lambda_f", self.lambda_f),
            ("lambda_a", self.lambda_a),
            ("learning_rate", self.learning_rate),
            ("k_scale", self.k_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlowError::Config(format!("{} must be positive, got {}", name, v)));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FlowError::Config("Adam moment coefficients must lie in [0, 1)".into()));
        }
        if self.min_learning_rate < 0.0 || self.min_learning_rate > self.learning_rate {
            return Err(FlowError::Config("min_learning_rate must lie in [0, learning_rate]".into()));
        }
        if self.batch_size == 0 {
            return Err(FlowError::Config("batch_size must be positive".into()));
        }
        if self.steps == 0 {
            return Err(FlowError::Config("steps must be positive".into()));
        }
        if self.prior == PriorKind::Uniform && self.model.kind == FieldKind::Equivariant {
            return Err(FlowError::Config(
                "the uniform prior yields asymmetric noise, which the group-averaged field cannot certify".into(),
            ));
        }
        self.field_config(1).validate().map_err(|e| FlowError::Config(format!("model: {}", e)))
    }

    pub fn field_config(&self, num_species: usize) -> FieldConfig {
        let code = code_width(num_species);
        FieldConfig {
            d: self.model.d,
            d_t: self.model.d_t,
            d_s: self.model.d_s,
            layers: self.model.layers,
            atom_in: match self.mode {
                Mode::Csp => num_species,
                Mode::Dng => code,
            },
            atom_out: code,
            kind: self.model.kind,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.steps,
            anti_f: self.anti_f,
            anti_k: self.anti_k,
            mode: self.mode,
            k_scale: self.k_scale,
            prior: self.prior,
            tol: crate::symmetry::CERTIFY_TOL,
        }
    }
}

/// A certified data crystal with its conditioning.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub crystal: Crystal,
    pub group: GroupKey,
    pub assignment: WyckoffAssignment,
    pub certificate: SymmetryCertificate,
    ga: GaOperator,
    plain: GaOperator,
    metric: Mat3,
}

impl TrainExample {
    pub fn new(crystal: Crystal, group: &SpaceGroup, assignment: WyckoffAssignment, tol: f64) -> Result<Self, FlowError> {
        let certificate = certify(&crystal, group, &assignment, tol)?;
        let ga = GaOperator::new(group, &certificate);
        let plain = GaOperator::plain(group, crystal.len());
        Ok(Self {
            crystal,
            group: group.key(),
            assignment,
            certificate,
            ga,
            plain,
            metric: group.invariant_metric(),
        })
    }

    pub fn positions(&self) -> Vec<WyckoffPosition> {
        self.assignment.slices.iter().map(|s| s.position.clone()).collect()
    }
}

/// `(c0, c1, t)` sharing one assignment.
#[derive(Clone, Debug)]
pub struct TrainingPair<'a> {
    pub example: &'a TrainExample,
    pub group: &'a SpaceGroup,
    pub k0: LatticeCoeffs,
    pub frac0: Array2<f64>,
    pub atoms0: Array2<f64>,
    pub t: f64,
}

/// State at time `t` along the conditional path.
#[derive(Clone, Debug)]
pub struct Interpolant {
    pub k: LatticeCoeffs,
    pub frac: Array2<f64>,
    pub atoms: Array2<f64>,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub v_k: LatticeCoeffs,
    pub v_f: Array2<f64>,
    pub v_a: Array2<f64>,
}

pub fn make_pair<'a>(example: &'a TrainExample, group: &'a SpaceGroup, cfg: &TrainConfig, seed: u64) -> Result<TrainingPair<'a>, FlowError> {
    let mut rng = rng_from_seed(seed);
    let n = example.crystal.len();
    let frac0 = match cfg.prior {
        PriorKind::Wyckoff => sample_coords(group, &example.positions(), &mut rng)?.0,
        PriorKind::Uniform => sample_coords_uniform(group, n, &mut rng),
    };
    let k0 = sample_k(group, cfg.k_scale, &mut rng);
    let atoms0 = sample_atoms(&example.assignment, example.crystal.num_species, &mut rng);
    let t = rng.gen::<f64>();
    Ok(TrainingPair {
        example,
        group,
        k0,
        frac0,
        atoms0,
        t,
    })
}

fn data_code(example: &TrainExample) -> Array2<f64> {
    encode_species(&example.crystal.species, example.crystal.num_species)
}

/// Linear in `k` and `Ã`, geodesic in `F`.
pub fn interpolate(pair: &TrainingPair) -> Interpolant {
    let t = pair.t;
    let c1 = &pair.example.crystal;
    let mut k = [0.0; 6];
    for c in 0..6 {
        k[c] = (1.0 - t) * pair.k0[c] + t * c1.k[c];
    }
    let frac = geodesic_metric(pair.frac0.view(), c1.frac.view(), t, &pair.example.metric);
    let atoms = &pair.atoms0 * (1.0 - t) + &(data_code(pair.example) * t);
    Interpolant { k, frac, atoms, t }
}

pub fn targets(pair: &TrainingPair) -> Targets {
    let c1 = &pair.example.crystal;
    let mut v_k = [0.0; 6];
    for c in 0..6 {
        v_k[c] = c1.k[c] - pair.k0[c];
    }
    Targets {
        v_k,
        v_f: logmap_metric(pair.frac0.view(), c1.frac.view(), &pair.example.metric),
        v_a: data_code(pair.example) - &pair.atoms0,
    }
}

/// Loss terms averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub k: f64,
    pub f: f64,
    pub a: f64,
    pub total: f64,
}

fn atom_features(mode: Mode, example: &TrainExample, state_atoms: &Array2<f64>) -> Array2<f64> {
    match mode {
        Mode::Csp => example.crystal.one_hot(),
        Mode::Dng => state_atoms.clone(),
    }
}

/// Records the per-crystal weighted loss (already divided by `batch`) and
/// returns the handles of `(total, L^k, L^F, L^A)`.
fn record_loss(
    tape: &mut Tape,
    vars: &[Var],
    pair: &TrainingPair,
    params: &BackboneParams,
    cfg: &TrainConfig,
    batch: usize,
) -> Result<(Var, Var, Var, Option<Var>), FlowError> {
    let state = interpolate(pair);
    let tg = targets(pair);
    let ex = pair.example;
    if cfg.model.kind == FieldKind::Equivariant {
        check_certificate(pair.group, &ex.certificate, &state.frac, state.t, ex.ga.stale_tol)?;
    }
    let atoms = atom_features(cfg.mode, ex, &state.atoms);
    let input = FieldInput {
        k: &state.k,
        frac: &state.frac,
        atoms: &atoms,
        t: state.t,
    };
    let ga = match cfg.model.kind {
        FieldKind::Equivariant => &ex.ga,
        FieldKind::Plain => &ex.plain,
    };
    let heads = symmetrize_tape(tape, vars, params, &input, ga)?;
    let n = ex.crystal.len() as f64;
    let b = batch as f64;

    let vk = tape.leaf(Array2::from_shape_fn((1, 6), |(_, c)| tg.v_k[c]));
    let dk = tape.sub(heads.k, vk);
    let lk = tape.sum_squares(dk);
    let lk = tape.scale(lk, 1.0 / 6.0);

    let vf = tape.leaf(tg.v_f);
    let df = tape.sub(heads.f, vf);
    let lf = tape.sum_squares(df);
    let lf = tape.scale(lf, 1.0 / (3.0 * n));

    let wk = tape.scale(lk, cfg.lambda_k / b);
    let wf = tape.scale(lf, cfg.lambda_f / b);
    let mut total = tape.add(wk, wf);
    let mut la = None;
    if cfg.mode == Mode::Dng {
        let width = tg.v_a.ncols() as f64;
        let va = tape.leaf(tg.v_a);
        let da = tape.sub(heads.a, va);
        let l = tape.sum_squares(da);
        let l = tape.scale(l, 1.0 / (width * n));
        let wa = tape.scale(l, cfg.lambda_a / b);
        total = tape.add(total, wa);
        la = Some(l);
    }
    Ok((total, lk, lf, la))
}

/// Batch loss and gradients of the weighted objective.
pub fn loss_and_grad(
    batch: &[TrainingPair],
    params: &BackboneParams,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Array2<f64>>), FlowError> {
    let mut grads: Vec<Array2<f64>> = params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect();
    let mut out = LossBreakdown::default();
    let b = batch.len();
    for pair in batch {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.tensors.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let (total, lk, lf, la) = record_loss(&mut tape, &vars, pair, params, cfg, b)?;
        out.k += tape.scalar(lk) / b as f64;
        out.f += tape.scalar(lf) / b as f64;
        if let Some(la) = la {
            out.a += tape.scalar(la) / b as f64;
        }
        out.total += tape.scalar(total);
        for (acc, g) in grads.iter_mut().zip(tape.backward(total, params.num_tensors())) {
            if let Some(g) = g {
                *acc += &g;
            }
        }
    }
    Ok((out, grads))
}

/// Batch loss without gradients.
pub fn loss(batch: &[TrainingPair], params: &BackboneParams, cfg: &TrainConfig) -> Result<LossBreakdown, FlowError> {
    let mut out = LossBreakdown::default();
    let b = batch.len();
    for pair in batch {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.tensors.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let (total, lk, lf, la) = record_loss(&mut tape, &vars, pair, params, cfg, b)?;
        out.k += tape.scalar(lk) / b as f64;
        out.f += tape.scalar(lf) / b as f64;
        if let Some(la) = la {
            out.a += tape.scalar(la) / b as f64;
        }
        out.total += tape.scalar(total);
    }
    if !out.total.is_finite() {
        return Err(FlowError::NonFinite { epoch: 0, batch: 0 });
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &BackboneParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
            v: params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut BackboneParams, grads: &[Array2<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = Rc::make_mut(p);
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            });
        }
    }
}

/// Cosine decay from `lr` to `min_lr` over `total` steps.
pub fn cosine_lr(lr: f64, min_lr: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = (step as f64 / (total - 1) as f64).min(1.0);
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_k: f64,
    pub loss_f: f64,
    pub loss_a: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss_k,loss_f,loss_a,total,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.loss_k, r.loss_f, r.loss_a, r.total, r.lr));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: BackboneParams,
    pub metrics: Vec<EpochMetrics>,
    /// Loss of every optimiser step, in order.
    pub step_losses: Vec<LossBreakdown>,
}

/// Trains from freshly initialised parameters.
pub fn train(examples: &[TrainExample], groups: &GroupDataset, cfg: &TrainConfig) -> Result<TrainOutcome, FlowError> {
    let num_species = examples.iter().map(|e| e.crystal.num_species).max().unwrap_or(1);
    let params = BackboneParams::init(&cfg.field_config(num_species), derive_seed(cfg.seed, 0xF1E1D))?;
    train_from(params, examples, groups, cfg)
}

/// Continues training `params`.
pub fn train_from(
    mut params: BackboneParams,
    examples: &[TrainExample],
    groups: &GroupDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, FlowError> {
    cfg.validate()?;
    if cfg.mode == Mode::Csp && cfg.lambda_a != TrainConfig::default().lambda_a {
        log::warn!("lambda_a = {} is ignored in CSP mode", cfg.lambda_a);
    }
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    if examples.is_empty() || cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            metrics,
            step_losses,
        });
    }
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 1_000_000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut lr = cfg.learning_rate;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut pairs = Vec::with_capacity(chunk.len());
            for (j, &idx) in chunk.iter().enumerate() {
                let ex = &examples[idx];
                let group = groups.group(ex.group.0, ex.group.1)?;
                let seed = derive_seed(cfg.seed, ((epoch * examples.len() + bi * cfg.batch_size + j) as u64) << 1);
                pairs.push(make_pair(ex, group, cfg, seed)?);
            }
            let (l, mut grads) = loss_and_grad(&pairs, &params, cfg).map_err(|e| match e {
                FlowError::NonFinite { .. } => FlowError::NonFinite { epoch, batch: bi },
                other => other,
            })?;
            if !l.total.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(FlowError::NonFinite { epoch, batch: bi });
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
                }
            }
            lr = cosine_lr(cfg.learning_rate, cfg.min_learning_rate, step, total_steps);
            adam.update(&mut params, &grads, lr);
            step += 1;
            let w = chunk.len() as f64 / examples.len() as f64;
            sums.k += l.k * w;
            sums.f += l.f * w;
            sums.a += l.a * w;
            sums.total += l.total * w;
            step_losses.push(l);
        }
        if !params.is_finite() {
            return Err(FlowError::NonFinite { epoch, batch: per_epoch - 1 });
        }
        log::debug!("epoch {} total {:.6} L_F {:.6}", epoch, sums.total, sums.f);
        metrics.push(EpochMetrics {
            epoch,
            loss_k: sums.k,
            loss_f: sums.f,
            loss_a: sums.a,
            total: sums.total,
            lr,
        });
    }
    Ok(TrainOutcome {
        params,
        metrics,
        step_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub anti_f: f64,
    pub anti_k: f64,
    pub mode: Mode,
    pub k_scale: f64,
    pub prior: PriorKind,
    pub tol: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        TrainConfig::default().sample_config()
    }
}

/// Conditioning for one generated crystal. CSP requires `species`.
#[derive(Clone, Debug)]
pub struct Condition<'a> {
    pub group: &'a SpaceGroup,
    pub positions: &'a [WyckoffPosition],
    pub species: Option<&'a [usize]>,
    pub num_species: usize,
}

/// Snapshot handed to sampling observers after every step.
#[derive(Clone, Debug)]
pub struct FlowState<'a> {
    pub step: usize,
    pub t: f64,
    pub crystal: &'a Crystal,
    pub atoms: &'a Array2<f64>,
    pub assignment: &'a WyckoffAssignment,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub crystal: Crystal,
    pub initial: Crystal,
    pub assignment: WyckoffAssignment,
    /// Final certificate; absent for the plain field, which gives no symmetry
    /// guarantee.
    pub certificate: Option<SymmetryCertificate>,
    pub atoms: Array2<f64>,
    pub seed: u64,
}

pub fn sample(cond: &Condition, params: &BackboneParams, cfg: &SampleConfig, seed: u64) -> Result<Generated, FlowError> {
    sample_observed(cond, params, cfg, seed, &mut |_| {})
}

/// Euler integration from a prior draw, calling `observer` on the initial
/// state and after every step.
pub fn sample_observed(
    cond: &Condition,
    params: &BackboneParams,
    cfg: &SampleConfig,
    seed: u64,
    observer: &mut dyn FnMut(&FlowState),
) -> Result<Generated, FlowError> {
    if cfg.steps == 0 {
        return Err(FlowError::Config("steps must be positive".into()));
    }
    let kind = params.config.kind;
    if cfg.prior == PriorKind::Uniform && kind == FieldKind::Equivariant {
        return Err(FlowError::Config("the group-averaged field needs the Wyckoff prior".into()));
    }
    let group = cond.group;
    let mut rng = rng_from_seed(seed);
    let (frac_w, wa) = sample_coords(group, cond.positions, &mut rng)?;
    let n = wa.num_rows();
    let frac0 = match cfg.prior {
        PriorKind::Wyckoff => frac_w,
        PriorKind::Uniform => sample_coords_uniform(group, n, &mut rng),
    };
    let k0 = sample_k(group, cfg.k_scale, &mut rng);
    let mut atoms = sample_atoms(&wa, cond.num_species, &mut rng);
    let species: Vec<usize> = match (cfg.mode, cond.species) {
        (Mode::Csp, Some(s)) => {
            if s.len() != n {
                return Err(SymmetryError::LengthMismatch { expected: n, got: s.len() }.into());
            }
            if let Some(slice) = wa.slices.iter().find(|sl| sl.rows().any(|i| s[i] != s[sl.start])) {
                return Err(FlowError::Config(format!(
                    "atom types vary within the orbit of Wyckoff position {}",
                    slice.position.label
                )));
            }
            s.to_vec()
        }
        (Mode::Csp, None) => return Err(FlowError::Config("CSP sampling needs fixed atom types".into())),
        (Mode::Dng, _) => decode_species(&atoms, cond.num_species),
    };
    let mut crystal = Crystal::new(k0, frac0, species, cond.num_species);
    let initial = crystal.clone();

    let (cert0, ga) = match (kind, cfg.prior) {
        (FieldKind::Equivariant, _) => {
            // the certificate ignores species: DNG types are still noise
            let cert = crate::symmetry::certify_frac(&crystal.frac, None, group, &wa, crate::prior::PRIOR_TOL)?;
            let ga = GaOperator::new(group, &cert);
            (Some(cert), ga)
        }
        (FieldKind::Plain, _) => (None, GaOperator::plain(group, n)),
    };
    let mask = group_mask(group);
    let dt = 1.0 / cfg.steps as f64;
    observer(&FlowState {
        step: 0,
        t: 0.0,
        crystal: &crystal,
        atoms: &atoms,
        assignment: &wa,
    });
    for j in 0..cfg.steps {
        let t = j as f64 / cfg.steps as f64;
        let feats = match cfg.mode {
            Mode::Csp => crystal.one_hot(),
            Mode::Dng => atoms.clone(),
        };
        let input = FieldInput {
            k: &crystal.k,
            frac: &crystal.frac,
            atoms: &feats,
            t,
        };
        if let Some(cert) = &cert0 {
            check_certificate(group, cert, &crystal.frac, t, ga.stale_tol.max(cfg.tol))?;
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.tensors.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let heads = symmetrize_tape(&mut tape, &vars, params, &input, &ga)?;
        let (uk, uf, ua) = (tape.value(heads.k), tape.value(heads.f), tape.value(heads.a));
        let sf = 1.0 + cfg.anti_f * t;
        let sk = 1.0 + cfg.anti_k * t;
        let mut k = crystal.k;
        for c in 0..6 {
            k[c] += dt * sk * uk[[0, c]];
        }
        crystal.k = mask.apply(&k);
        for i in 0..n {
            for c in 0..3 {
                crystal.frac[[i, c]] = wrap_scalar(crystal.frac[[i, c]] + dt * sf * uf[[i, c]]);
            }
        }
        if cfg.mode == Mode::Dng {
            atoms.scaled_add(dt, ua);
            crystal.species = decode_species(&atoms, cond.num_species);
        }
        observer(&FlowState {
            step: j + 1,
            t: (j + 1) as f64 / cfg.steps as f64,
            crystal: &crystal,
            atoms: &atoms,
            assignment: &wa,
        });
    }
    let certificate = match cert0 {
        Some(_) => {
            let cert = certify(&crystal, group, &wa, cfg.tol).map_err(|e| FlowError::SymmetryDrift(e.to_string()))?;
            let cons = is_constructable(&crystal.frac, &wa, cfg.tol);
            if !cons.ok {
                return Err(FlowError::SymmetryDrift(format!("not constructable (residual {:e})", cons.max_residual)));
            }
            Some(cert)
        }
        None => None,
    };
    Ok(Generated {
        crystal,
        initial,
        assignment: wa,
        certificate,
        atoms,
        seed,
    })
}
