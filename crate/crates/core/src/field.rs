//! The parametric vector field: a fully connected message-passing backbone,
//! its single-evaluation group average, and the `|G|`-evaluation reference
//! average used as an oracle.

use crate::autodiff::{BlockMix, RowMix, Tape, Var};
use crate::lattice::{group_mask, k_to_L, matmul, transpose, FamilyMask, LatticeCoeffs};
use crate::sgdata::SpaceGroup;
use crate::symmetry::{act_frac, SymmetryCertificate};
use crate::torus::{log_scalar, mat_vec, Mat3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::f64::consts::TAU;
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "sgfm-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("certificate is stale: op {op} no longer maps the crystal onto itself")]
    StaleCertificate { op: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Whether sampling and training use the group-averaged field or the raw
/// backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Equivariant,
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub d: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub layers: usize,
    /// Width of the per-atom input features.
    pub atom_in: usize,
    /// Width of the atom-type head.
    pub atom_out: usize,
    pub kind: FieldKind,
}

impl FieldConfig {
    pub fn new(atom_in: usize, atom_out: usize) -> Self {
        Self {
            d: 64,
            d_t: 32,
            d_s: 30,
            layers: 3,
            atom_in,
            atom_out,
            kind: FieldKind::Equivariant,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.d == 0 || self.layers == 0 || self.atom_in == 0 || self.atom_out == 0 {
            return Err(FieldError::ShapeMismatch("widths and layer count must be positive".into()));
        }
        if self.d_s == 0 || self.d_s % 6 != 0 {
            return Err(FieldError::ShapeMismatch(format!("d_s = {} is not a positive multiple of 6", self.d_s)));
        }
        if self.d_t == 0 || self.d_t % 2 != 0 {
            return Err(FieldError::ShapeMismatch(format!("d_t = {} is not a positive even number", self.d_t)));
        }
        Ok(())
    }

    fn geo_width(&self) -> usize {
        6 + self.d_s + 3
    }
}

const PER_LAYER: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: FieldConfig,
    pub tensors: Vec<Rc<Array2<f64>>>,
}

fn linear_init(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl BackboneParams {
    /// Fan-in scaled uniform weights; output heads start at zero so the
    /// initial field vanishes.
    pub fn init(config: &FieldConfig, seed: u64) -> Result<Self, FieldError> {
        Self::init_with_heads(config, seed, false)
    }

    /// Like [`BackboneParams::init`], optionally with random heads.
    pub fn init_with_heads(config: &FieldConfig, seed: u64, random_heads: bool) -> Result<Self, FieldError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, g) = (config.d, config.geo_width());
        let mut t: Vec<Array2<f64>> = Vec::new();
        t.push(linear_init(&mut rng, config.atom_in, config.atom_in, d));
        t.push(linear_init(&mut rng, config.atom_in, 1, d));
        t.push(linear_init(&mut rng, d + config.d_t, d + config.d_t, d));
        t.push(linear_init(&mut rng, d + config.d_t, 1, d));
        for _ in 0..config.layers {
            let fan = 2 * d + g;
            t.push(linear_init(&mut rng, fan, d, d));
            t.push(linear_init(&mut rng, fan, d, d));
            t.push(linear_init(&mut rng, fan, g, d));
            t.push(linear_init(&mut rng, fan, 1, d));
            t.push(linear_init(&mut rng, d, d, d));
            t.push(linear_init(&mut rng, d, 1, d));
            t.push(linear_init(&mut rng, 2 * d, 2 * d, d));
            t.push(linear_init(&mut rng, 2 * d, 1, d));
            t.push(linear_init(&mut rng, d, d, d));
            t.push(linear_init(&mut rng, d, 1, d));
        }
        for width in [6, 3, config.atom_out] {
            if random_heads {
                t.push(linear_init(&mut rng, d, d, width));
                t.push(linear_init(&mut rng, d, 1, width));
            } else {
                t.push(Array2::zeros((d, width)));
                t.push(Array2::zeros((1, width)));
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors: t.into_iter().map(Rc::new).collect(),
        })
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["atom.w".into(), "atom.b".into(), "embed.w".into(), "embed.b".into()];
        for l in 0..self.config.layers {
            for part in ["edge.wi", "edge.wj", "edge.wg", "edge.b1", "edge.w2", "edge.b2", "node.w1", "node.b1", "node.w2", "node.b2"] {
                names.push(format!("layer{}.{}", l, part));
            }
        }
        for part in ["head_k.w", "head_k.b", "head_f.w", "head_f.b", "head_a.w", "head_a.b"] {
            names.push(part.into());
        }
        names
    }

    fn head_index(&self) -> usize {
        4 + PER_LAYER * self.config.layers
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn to_json(&self) -> String {
        self.to_json_with_meta(&Meta::new())
    }

    /// Serialises with free-form metadata stored next to the tensors.
    pub fn to_json_with_meta(&self, meta: &Meta) -> String {
        let names = self.names();
        let tensors: Vec<TensorDump> = self
            .tensors
            .iter()
            .zip(names)
            .map(|(t, name)| TensorDump {
                name,
                shape: [t.nrows(), t.ncols()],
                data: t.iter().cloned().collect(),
            })
            .collect();
        let dump = CheckpointDump {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            meta: meta.clone(),
            tensors,
        };
        serde_json::to_string(&dump).expect("checkpoint serialisation")
    }

    pub fn from_json(text: &str) -> Result<Self, FieldError> {
        Ok(Self::from_json_with_meta(text)?.0)
    }

    pub fn from_json_with_meta(text: &str) -> Result<(Self, Meta), FieldError> {
        let dump: CheckpointDump = serde_json::from_str(text).map_err(|e| FieldError::Checkpoint(e.to_string()))?;
        if dump.format != CHECKPOINT_FORMAT || dump.version != CHECKPOINT_VERSION {
            return Err(FieldError::Checkpoint(format!("unsupported format {} v{}", dump.format, dump.version)));
        }
        let reference = Self::init(&dump.config, 0)?;
        let names = reference.names();
        if dump.tensors.len() != reference.num_tensors() {
            return Err(FieldError::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.num_tensors(),
                dump.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(dump.tensors.len());
        for ((t, want), name) in dump.tensors.into_iter().zip(&reference.tensors).zip(&names) {
            if t.name != *name || t.shape != [want.nrows(), want.ncols()] || t.data.len() != want.len() {
                return Err(FieldError::Checkpoint(format!("tensor {} has an unexpected name or shape", t.name)));
            }
            let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data).map_err(|e| FieldError::Checkpoint(e.to_string()))?;
            tensors.push(Rc::new(arr));
        }
        Ok((
            Self {
                config: dump.config,
                tensors,
            },
            dump.meta,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        std::fs::write(path, self.to_json()).map_err(|e| FieldError::Checkpoint(format!("{}: {}", path.display(), e)))
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let text = std::fs::read_to_string(path).map_err(|e| FieldError::Checkpoint(format!("{}: {}", path.display(), e)))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDump {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDump {
    format: String,
    version: u32,
    config: FieldConfig,
    #[serde(default, skip_serializing_if = "Meta::is_empty")]
    meta: Meta,
    tensors: Vec<TensorDump>,
}

/// Checkpoint metadata.
pub type Meta = std::collections::BTreeMap<String, serde_json::Value>;

/// Per-call inputs of the backbone.
#[derive(Clone, Debug)]
pub struct FieldInput<'a> {
    pub k: &'a LatticeCoeffs,
    pub frac: &'a Array2<f64>,
    pub atoms: &'a Array2<f64>,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput {
    pub u_k: LatticeCoeffs,
    pub u_f: Array2<f64>,
    pub u_a: Array2<f64>,
}

impl FieldOutput {
    pub fn max_abs_diff(&self, other: &FieldOutput) -> f64 {
        let k = self.u_k.iter().zip(&other.u_k).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let f = (&self.u_f - &other.u_f).iter().map(|x| x.abs()).fold(0.0, f64::max);
        let a = (&self.u_a - &other.u_a).iter().map(|x| x.abs()).fold(0.0, f64::max);
        k.max(f).max(a)
    }
}

thread_local! {
    static BACKBONE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Backbone evaluations made on the current thread.
pub fn backbone_calls() -> u64 {
    BACKBONE_CALLS.with(|c| c.get())
}

pub fn reset_backbone_calls() {
    BACKBONE_CALLS.with(|c| c.set(0));
}

/// Tape handles of the three output heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub k: Var,
    pub f: Var,
    pub a: Var,
}

pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for m in 0..half {
        let frac = if half > 1 { m as f64 / (half - 1) as f64 } else { 0.0 };
        let w = (1000f64.ln() * frac).exp();
        out[m] = (w * t).sin();
        out[half + m] = (w * t).cos();
    }
    out
}

/// Edge features for all ordered pairs `(i, j)` at row `i·n + j`:
/// `k`, sinusoidal features of `log_{f_i}(f_j)` and the unit direction of
/// `LᵀL log_{f_i}(f_j)` (zero when the displacement vanishes).
pub fn edge_features(k: &LatticeCoeffs, frac: &Array2<f64>, d_s: usize) -> Array2<f64> {
    let n = frac.nrows();
    let l = k_to_L(k);
    let metric: Mat3 = matmul(&transpose(&l), &l);
    let freqs = d_s / 6;
    let width = 6 + d_s + 3;
    let mut out = Array2::zeros((n * n, width));
    for i in 0..n {
        for j in 0..n {
            let r = i * n + j;
            let mut row = out.row_mut(r);
            for c in 0..6 {
                row[c] = k[c];
            }
            let v = [
                log_scalar(frac[[i, 0]], frac[[j, 0]]),
                log_scalar(frac[[i, 1]], frac[[j, 1]]),
                log_scalar(frac[[i, 2]], frac[[j, 2]]),
            ];
            let mut col = 6;
            for vc in v {
                for f in 0..freqs {
                    let a = TAU * (1u64 << f) as f64 * vc;
                    row[col] = a.sin();
                    row[col + 1] = a.cos();
                    col += 2;
                }
            }
            let gv = mat_vec(&metric, v);
            let norm = (gv[0] * gv[0] + gv[1] * gv[1] + gv[2] * gv[2]).sqrt();
            if norm >= 1e-12 {
                for c in 0..3 {
                    row[col + c] = gv[c] / norm;
                }
            }
        }
    }
    out
}

/// Records the backbone on `tape`; `vars` are the tape handles of
/// `params.tensors` in order.
pub fn backbone_tape(tape: &mut Tape, vars: &[Var], params: &BackboneParams, input: &FieldInput) -> Result<HeadVars, FieldError> {
    let cfg = &params.config;
    let n = input.frac.nrows();
    if n == 0 || input.frac.ncols() != 3 {
        return Err(FieldError::ShapeMismatch(format!("coordinates must be n×3 with n ≥ 1, got {:?}", input.frac.dim())));
    }
    if input.atoms.dim() != (n, cfg.atom_in) {
        return Err(FieldError::ShapeMismatch(format!(
            "atom features must be {}×{}, got {:?}",
            n,
            cfg.atom_in,
            input.atoms.dim()
        )));
    }
    if vars.len() != params.num_tensors() {
        return Err(FieldError::ShapeMismatch("parameter handle count".into()));
    }
    BACKBONE_CALLS.with(|c| c.set(c.get() + 1));

    let geo = tape.leaf(edge_features(input.k, input.frac, cfg.d_s));
    let temb = time_embedding(input.t, cfg.d_t);
    let temb = tape.leaf(Array2::from_shape_fn((n, cfg.d_t), |(_, c)| temb[c]));
    let atoms = tape.leaf(input.atoms.clone());

    let h = tape.matmul(atoms, vars[0]);
    let h = tape.add_row(h, vars[1]);
    let h = tape.concat_cols(&[h, temb]);
    let h = tape.matmul(h, vars[2]);
    let mut h = tape.add_row(h, vars[3]);

    let src: Rc<Vec<usize>> = Rc::new((0..n * n).map(|r| r / n).collect());
    let dst: Rc<Vec<usize>> = Rc::new((0..n * n).map(|r| r % n).collect());
    for l in 0..cfg.layers {
        let w = &vars[4 + PER_LAYER * l..4 + PER_LAYER * (l + 1)];
        let pi = tape.matmul(h, w[0]);
        let pj = tape.matmul(h, w[1]);
        let pg = tape.matmul(geo, w[2]);
        let gi = tape.gather_rows(pi, src.clone());
        let gj = tape.gather_rows(pj, dst.clone());
        let e = tape.add(gi, gj);
        let e = tape.add(e, pg);
        let e = tape.add_row(e, w[3]);
        let e = tape.silu(e);
        let e = tape.matmul(e, w[4]);
        let m = tape.add_row(e, w[5]);
        let agg = tape.mean_blocks(m, n);
        let x = tape.concat_cols(&[h, agg]);
        let x = tape.matmul(x, w[6]);
        let x = tape.add_row(x, w[7]);
        let x = tape.silu(x);
        let x = tape.matmul(x, w[8]);
        h = tape.add_row(x, w[9]);
    }

    let hi = params.head_index();
    let pooled = tape.mean_rows(h);
    let k = tape.matmul(pooled, vars[hi]);
    let k = tape.add_row(k, vars[hi + 1]);
    let f = tape.matmul(h, vars[hi + 2]);
    let f = tape.add_row(f, vars[hi + 3]);
    let a = tape.matmul(h, vars[hi + 4]);
    let a = tape.add_row(a, vars[hi + 5]);
    Ok(HeadVars { k, f, a })
}

fn read_output(tape: &Tape, heads: &HeadVars) -> FieldOutput {
    let kv = tape.value(heads.k);
    let mut u_k = [0.0; 6];
    for (c, x) in u_k.iter_mut().enumerate() {
        *x = kv[[0, c]];
    }
    FieldOutput {
        u_k,
        u_f: tape.value(heads.f).clone(),
        u_a: tape.value(heads.a).clone(),
    }
}

fn param_vars(tape: &mut Tape, params: &BackboneParams) -> Vec<Var> {
    params.tensors.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect()
}

/// One raw backbone evaluation.
pub fn backbone(params: &BackboneParams, input: &FieldInput) -> Result<FieldOutput, FieldError> {
    let mut tape = Tape::new();
    let vars = param_vars(&mut tape, params);
    let heads = backbone_tape(&mut tape, &vars, params, input)?;
    Ok(read_output(&tape, &heads))
}

/// The single-evaluation group average as sparse linear maps on the
/// backbone outputs.
#[derive(Clone, Debug)]
pub struct GaOperator {
    pub coords: Rc<BlockMix>,
    pub atoms: Rc<RowMix>,
    pub mask: FamilyMask,
    pub stale_tol: f64,
}

impl GaOperator {
    /// Output row `i` collects `R_g u[σ_{g⁻¹}(i)] / |G|` over all `g`.
    pub fn new(group: &SpaceGroup, cert: &SymmetryCertificate) -> Self {
        let n = cert.perms.first().map(|p| p.len()).unwrap_or(0);
        let order = group.order();
        let w = 1.0 / order as f64;
        let mut coords: Vec<Vec<(usize, Mat3)>> = vec![Vec::new(); n];
        let mut atoms: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for g in 0..order {
            let perm = &cert.perms[group.inverse_index(g)];
            let r = group.rotation(g);
            for i in 0..n {
                let j = perm[i];
                match coords[i].iter_mut().find(|(src, _)| *src == j) {
                    Some((_, m)) => {
                        for a in 0..3 {
                            for b in 0..3 {
                                m[a][b] += w * r[a][b];
                            }
                        }
                    }
                    None => coords[i].push((j, r.map(|row| row.map(|x| x * w)))),
                }
                match atoms[i].iter_mut().find(|(src, _)| *src == j) {
                    Some((_, x)) => *x += w,
                    None => atoms[i].push((j, w)),
                }
            }
        }
        if group.dimension == 2 {
            for row in coords.iter_mut() {
                for (_, m) in row.iter_mut() {
                    m[2] = [0.0; 3];
                }
            }
        }
        Self {
            coords: Rc::new(coords),
            atoms: Rc::new(atoms),
            mask: group_mask(group),
            stale_tol: crate::symmetry::CERTIFY_TOL,
        }
    }

    /// Identity averaging for the plain field: only the lattice mask and the
    /// planar projection apply.
    pub fn plain(group: &SpaceGroup, n: usize) -> Self {
        let m = planar_projection(group);
        Self {
            coords: Rc::new((0..n).map(|i| vec![(i, m)]).collect()),
            atoms: Rc::new((0..n).map(|i| vec![(i, 1.0)]).collect()),
            mask: group_mask(group),
            stale_tol: crate::symmetry::CERTIFY_TOL,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.coords.len()
    }

    fn mask_row(&self) -> Array2<f64> {
        Array2::from_shape_fn((1, 6), |(_, c)| self.mask.mask[c])
    }
}

/// Identity in 3D; drops the out-of-plane component for wallpaper groups,
/// whose Wyckoff positions pin `z = 0`.
pub fn planar_projection(group: &SpaceGroup) -> Mat3 {
    let mut m = crate::lattice::identity();
    if group.dimension == 2 {
        m[2][2] = 0.0;
    }
    m
}

/// Re-verifies one certificate entry on the current coordinates; the op is
/// picked from the bits of `t` so repeated calls cycle through the group.
pub fn check_certificate(group: &SpaceGroup, cert: &SymmetryCertificate, frac: &Array2<f64>, t: f64, tol: f64) -> Result<(), FieldError> {
    let order = group.order();
    if cert.perms.len() != order {
        return Err(FieldError::StaleCertificate { op: 0 });
    }
    if order == 1 {
        return if cert.perms[0].len() == frac.nrows() {
            Ok(())
        } else {
            Err(FieldError::StaleCertificate { op: 0 })
        };
    }
    let bits = t.to_bits();
    let g = 1 + (crate::prior::derive_seed(bits, 0) % (order as u64 - 1)) as usize;
    if cert.spot_check(group, g, frac, tol) {
        Ok(())
    } else {
        Err(FieldError::StaleCertificate { op: g })
    }
}

/// Records the group-averaged field on `tape`.
pub fn symmetrize_tape(tape: &mut Tape, vars: &[Var], params: &BackboneParams, input: &FieldInput, ga: &GaOperator) -> Result<HeadVars, FieldError> {
    if ga.num_rows() != input.frac.nrows() {
        return Err(FieldError::ShapeMismatch(format!(
            "averaging operator has {} rows, crystal has {}",
            ga.num_rows(),
            input.frac.nrows()
        )));
    }
    let raw = backbone_tape(tape, vars, params, input)?;
    let k = tape.mul_const(raw.k, ga.mask_row());
    let f = tape.block_mix(raw.f, ga.coords.clone());
    let a = tape.row_mix(raw.a, ga.atoms.clone());
    Ok(HeadVars { k, f, a })
}

/// Group-averaged field from a single backbone evaluation.
pub fn symmetrize(
    params: &BackboneParams,
    input: &FieldInput,
    group: &SpaceGroup,
    cert: &SymmetryCertificate,
    ga: &GaOperator,
) -> Result<FieldOutput, FieldError> {
    check_certificate(group, cert, input.frac, input.t, ga.stale_tol)?;
    let mut tape = Tape::new();
    let vars = param_vars(&mut tape, params);
    let heads = symmetrize_tape(&mut tape, &vars, params, input, ga)?;
    Ok(read_output(&tape, &heads))
}

/// Reference group average `mean_g g·u(g⁻¹·c)` with one backbone call per
/// group element.
pub fn naive_ga(params: &BackboneParams, input: &FieldInput, group: &SpaceGroup) -> Result<FieldOutput, FieldError> {
    let n = input.frac.nrows();
    let order = group.order();
    let mut u_k = [0.0; 6];
    let mut u_f = Array2::zeros((n, 3));
    let mut u_a = Array2::zeros((n, params.config.atom_out));
    for g in 0..order {
        let gi = group.inverse_index(g);
        let moved = act_frac(group.rotation(gi), group.translation(gi), input.frac);
        let out = backbone(
            params,
            &FieldInput {
                frac: &moved,
                ..input.clone()
            },
        )?;
        let r = matmul(&planar_projection(group), group.rotation(g));
        for i in 0..n {
            let v = mat_vec(&r, [out.u_f[[i, 0]], out.u_f[[i, 1]], out.u_f[[i, 2]]]);
            for c in 0..3 {
                u_f[[i, c]] += v[c];
            }
        }
        u_a += &out.u_a;
        for c in 0..6 {
            u_k[c] += out.u_k[c];
        }
    }
    let w = 1.0 / order as f64;
    let mask = group_mask(group);
    for c in 0..6 {
        u_k[c] *= w * mask.mask[c];
    }
    u_f.mapv_inplace(|x| x * w);
    u_a.mapv_inplace(|x| x * w);
    Ok(FieldOutput { u_k, u_f, u_a })
}

/// Mean of the rows of `x` within each slice of `orbits`.
pub fn orbit_means(x: &Array2<f64>, orbits: &[usize]) -> Array2<f64> {
    let count = orbits.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut sums = Array2::zeros((count, x.ncols()));
    let mut sizes = vec![0usize; count];
    for (i, &o) in orbits.iter().enumerate() {
        let mut row = sums.row_mut(o);
        row += &x.row(i);
        sizes[o] += 1;
    }
    for (o, &s) in sizes.iter().enumerate() {
        if s > 0 {
            sums.row_mut(o).mapv_inplace(|v| v / s as f64);
        }
    }
    sums
}
