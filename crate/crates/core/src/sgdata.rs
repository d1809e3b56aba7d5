//! Space groups and Wyckoff positions with exact rational group data.
//!
//! Wallpaper groups are embedded in 3D: their operations fix `z` and their
//! Wyckoff maps send `z` to 0.

use crate::torus::{mat_vec, torus_dist, wrap3, Mat3, Vec3};
use num_rational::Ratio;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use thiserror::Error;

pub type Q = Ratio<i64>;
pub type QMat = [[Q; 3]; 3];
pub type QVec = [Q; 3];

/// `(dimension, number)`.
pub type GroupKey = (u8, u32);

pub const DEFAULT_CAP: usize = 192;
pub const DEDUP_TOL: f64 = 1e-8;
pub const BUNDLED_FILE: &str = "groups_core.json";

static BUNDLED_JSON: &str = include_str!("../data/groups_core.json");

#[derive(Debug, Error)]
pub enum SgError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("inconsistent data in group {group} position {position}: {detail}")]
    Consistency {
        group: String,
        position: String,
        detail: String,
    },
    #[error("closure exceeded {cap} operations")]
    ClosureOverflow { cap: usize },
    #[error("unknown group {dimension}D #{number}")]
    UnknownGroup { dimension: u8, number: u32 },
    #[error("group {group} has no Wyckoff position {label}")]
    UnknownWyckoff { group: String, label: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn q(n: i64, d: i64) -> Q {
    Ratio::new(n, d)
}

fn frac_part(x: Q) -> Q {
    x - x.floor()
}

fn qmat_identity() -> QMat {
    let mut m = [[Q::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = Q::one();
    }
    m
}

fn qmat_mul(a: &QMat, b: &QMat) -> QMat {
    let mut out = [[Q::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = Q::zero();
            for e in 0..3 {
                s += a[i][e] * b[e][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn qmat_vec(a: &QMat, v: &QVec) -> QVec {
    let mut out = [Q::zero(); 3];
    for i in 0..3 {
        for e in 0..3 {
            out[i] += a[i][e] * v[e];
        }
    }
    out
}

fn qdet(a: &QMat) -> Q {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn qinverse(a: &QMat) -> Option<QMat> {
    let d = qdet(a);
    if d.is_zero() {
        return None;
    }
    let mut out = [[Q::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            out[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
        }
    }
    Some(out)
}

fn to_f64(x: Q) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

pub fn qmat_to_f64(a: &QMat) -> Mat3 {
    a.map(|row| row.map(to_f64))
}

pub fn qvec_to_f64(v: &QVec) -> Vec3 {
    v.map(to_f64)
}

/// An affine operation `x ↦ R x + τ` on the torus, with `τ` reduced into `[0,1)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AffineOp {
    pub rotation: QMat,
    pub translation: QVec,
}

impl AffineOp {
    pub fn new(rotation: QMat, translation: QVec) -> Self {
        Self {
            rotation,
            translation: translation.map(frac_part),
        }
    }

    pub fn identity() -> Self {
        Self::new(qmat_identity(), [Q::zero(); 3])
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &AffineOp) -> AffineOp {
        let r = qmat_mul(&self.rotation, &other.rotation);
        let rt = qmat_vec(&self.rotation, &other.translation);
        let t = [rt[0] + self.translation[0], rt[1] + self.translation[1], rt[2] + self.translation[2]];
        AffineOp::new(r, t)
    }

    pub fn inverse(&self) -> Option<AffineOp> {
        let ri = qinverse(&self.rotation)?;
        let t = qmat_vec(&ri, &self.translation).map(|x| -x);
        Some(AffineOp::new(ri, t))
    }

    pub fn determinant(&self) -> Q {
        qdet(&self.rotation)
    }

    pub fn rotation_f64(&self) -> Mat3 {
        qmat_to_f64(&self.rotation)
    }

    pub fn translation_f64(&self) -> Vec3 {
        qvec_to_f64(&self.translation)
    }

    /// `wrap(R x + τ)`.
    pub fn apply(&self, x: Vec3) -> Vec3 {
        apply_real(&self.rotation_f64(), &self.translation_f64(), x)
    }
}

#[inline]
pub fn apply_real(r: &Mat3, t: &Vec3, x: Vec3) -> Vec3 {
    let y = mat_vec(r, x);
    wrap3([y[0] + t[0], y[1] + t[1], y[2] + t[2]])
}

/// Smallest set closed under composition mod 1 that contains the identity
/// and `generators`; identity first, then breadth-first discovery order.
pub fn closure(generators: &[AffineOp], cap: usize) -> Result<Vec<AffineOp>, SgError> {
    let mut ops = vec![AffineOp::identity()];
    let mut seen: HashMap<AffineOp, usize> = HashMap::new();
    seen.insert(ops[0].clone(), 0);
    let mut head = 0;
    while head < ops.len() {
        let elem = ops[head].clone();
        for g in generators {
            let next = elem.compose(g);
            if !seen.contains_key(&next) {
                if ops.len() >= cap {
                    return Err(SgError::ClosureOverflow { cap });
                }
                seen.insert(next.clone(), ops.len());
                ops.push(next);
            }
        }
        head += 1;
    }
    Ok(ops)
}

/// Integer image of an op scaled by a common denominator `d`.
type IntKey = [i64; 12];

fn int_key(op: &AffineOp, d: i64) -> IntKey {
    let mut k = [0; 12];
    for i in 0..3 {
        for j in 0..3 {
            k[3 * i + j] = (op.rotation[i][j] * d).to_integer();
        }
        k[9 + i] = (op.translation[i] * d).to_integer();
    }
    k
}

/// Multiplication table of `ops`, computed in scaled integer arithmetic.
/// Fails with the offending pair when a product falls outside the list.
fn product_table(ops: &[AffineOp]) -> Result<Vec<usize>, (usize, usize)> {
    let mut d: i64 = 1;
    for op in ops {
        for x in op.rotation.iter().flatten().chain(op.translation.iter()) {
            d = num_integer::lcm(d, *x.denom());
        }
    }
    let keys: Vec<IntKey> = ops.iter().map(|o| int_key(o, d)).collect();
    let index: HashMap<IntKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let n = ops.len();
    let mut table = vec![0; n * n];
    for (i, a) in keys.iter().enumerate() {
        for (j, b) in keys.iter().enumerate() {
            let mut c = [0i64; 12];
            let mut exact = true;
            for r in 0..3 {
                for col in 0..3 {
                    let s: i64 = (0..3).map(|e| a[3 * r + e] * b[3 * e + col]).sum();
                    exact &= s % d == 0;
                    c[3 * r + col] = s / d;
                }
                let s: i64 = (0..3).map(|e| a[3 * r + e] * b[9 + e]).sum();
                exact &= s % d == 0;
                c[9 + r] = (s / d + a[9 + r]).rem_euclid(d);
            }
            table[i * n + j] = match (exact, index.get(&c)) {
                (true, Some(&k)) => k,
                _ => return Err((i, j)),
            };
        }
    }
    Ok(table)
}

#[derive(Clone, Debug)]
pub struct SpaceGroup {
    pub number: u32,
    pub dimension: u8,
    pub name: String,
    pub setting: String,
    pub ops: Vec<AffineOp>,
    real: Vec<(Mat3, Vec3)>,
    inverse: Vec<usize>,
    product: Vec<usize>,
}

impl SpaceGroup {
    /// Builds a group by closing `generators`, then checks the group axioms.
    pub fn from_generators(
        dimension: u8,
        number: u32,
        name: &str,
        setting: &str,
        generators: &[AffineOp],
        cap: usize,
    ) -> Result<Self, SgError> {
        let ops = closure(generators, cap)?;
        Self::from_ops(dimension, number, name, setting, ops)
    }

    /// Wraps an explicit operation list after verifying closure, inverses and
    /// a leading identity.
    pub fn from_ops(dimension: u8, number: u32, name: &str, setting: &str, ops: Vec<AffineOp>) -> Result<Self, SgError> {
        let fail = |detail: String| SgError::Consistency {
            group: name.to_string(),
            position: "-".to_string(),
            detail,
        };
        if ops.is_empty() || !ops[0].is_identity() {
            return Err(fail("first operation is not the identity".into()));
        }
        if ops.iter().filter(|o| o.is_identity()).count() != 1 {
            return Err(fail("identity appears more than once".into()));
        }
        let index: HashMap<&AffineOp, usize> = ops.iter().enumerate().map(|(i, o)| (o, i)).collect();
        if index.len() != ops.len() {
            return Err(fail("duplicate operations".into()));
        }
        let n = ops.len();
        let product = product_table(&ops).map_err(|(i, j)| fail(format!("op{} ∘ op{} is not in the group", i, j)))?;
        let mut inverse = vec![0; n];
        for (i, a) in ops.iter().enumerate() {
            let inv = a.inverse().ok_or_else(|| fail(format!("op{} is singular", i)))?;
            inverse[i] = *index.get(&inv).ok_or_else(|| fail(format!("inverse of op{} missing", i)))?;
        }
        if dimension == 2 {
            for (i, o) in ops.iter().enumerate() {
                let r = &o.rotation;
                let planar = r[2][2].is_one()
                    && r[0][2].is_zero()
                    && r[1][2].is_zero()
                    && r[2][0].is_zero()
                    && r[2][1].is_zero()
                    && o.translation[2].is_zero();
                if !planar {
                    return Err(fail(format!("op{} does not fix the z axis", i)));
                }
            }
        }
        let real = ops.iter().map(|o| (o.rotation_f64(), o.translation_f64())).collect();
        Ok(Self {
            number,
            dimension,
            name: name.to_string(),
            setting: setting.to_string(),
            ops,
            real,
            inverse,
            product,
        })
    }

    pub fn order(&self) -> usize {
        self.ops.len()
    }

    pub fn key(&self) -> GroupKey {
        (self.dimension, self.number)
    }

    pub fn rotation(&self, g: usize) -> &Mat3 {
        &self.real[g].0
    }

    pub fn translation(&self, g: usize) -> &Vec3 {
        &self.real[g].1
    }

    pub fn apply(&self, g: usize, x: Vec3) -> Vec3 {
        apply_real(&self.real[g].0, &self.real[g].1, x)
    }

    pub fn inverse_index(&self, g: usize) -> usize {
        self.inverse[g]
    }

    /// Index of `ops[a] ∘ ops[b]`.
    pub fn product_index(&self, a: usize, b: usize) -> usize {
        self.product[a * self.order() + b]
    }

    /// Metric `mean_g R_gᵀ R_g`, invariant under every point operation.
    pub fn invariant_metric(&self) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for (r, _) in &self.real {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += (0..3).map(|e| r[e][i] * r[e][j]).sum::<f64>();
                }
            }
        }
        let n = self.order() as f64;
        m.map(|row| row.map(|x| x / n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WyckoffMap {
    pub v: QMat,
    pub tau: QVec,
    pub v_real: Mat3,
    pub tau_real: Vec3,
}

impl WyckoffMap {
    pub fn new(v: QMat, tau: QVec) -> Self {
        let tau = tau.map(frac_part);
        Self {
            v_real: qmat_to_f64(&v),
            tau_real: qvec_to_f64(&tau),
            v,
            tau,
        }
    }

    pub fn apply(&self, x: Vec3) -> Vec3 {
        apply_real(&self.v_real, &self.tau_real, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WyckoffPosition {
    pub label: String,
    pub maps: Vec<WyckoffMap>,
    pub parent: GroupKey,
}

impl WyckoffPosition {
    pub fn multiplicity(&self) -> usize {
        self.maps.len()
    }

    /// Rows `w(x)` in map order.
    pub fn project(&self, x: Vec3) -> Vec<Vec3> {
        self.maps.iter().map(|m| m.apply(x)).collect()
    }

    /// Whether the position has no free parameter.
    pub fn is_fixed(&self) -> bool {
        self.maps[0].v.iter().flatten().all(|x| x.is_zero())
    }
}

#[derive(Clone, Debug, Default)]
pub struct GroupDataset {
    pub groups: BTreeMap<GroupKey, SpaceGroup>,
    pub wyckoffs: BTreeMap<GroupKey, Vec<WyckoffPosition>>,
}

#[derive(Deserialize)]
struct RawFile {
    groups: Vec<RawGroup>,
}

#[derive(Deserialize)]
struct RawGroup {
    dimension: u8,
    number: u32,
    name: String,
    #[serde(default = "default_setting")]
    setting: String,
    generators: Vec<RawOp>,
    #[serde(default)]
    wyckoffs: Vec<RawWyckoff>,
}

fn default_setting() -> String {
    "standard".to_string()
}

#[derive(Deserialize)]
struct RawOp {
    rotation: Vec<[i64; 2]>,
    translation: Vec<[i64; 2]>,
}

#[derive(Deserialize)]
struct RawWyckoff {
    label: String,
    maps: Vec<RawMap>,
}

#[derive(Deserialize)]
struct RawMap {
    #[serde(rename = "V")]
    v: Vec<[i64; 2]>,
    tau: Vec<[i64; 2]>,
}

fn parse_rational(p: [i64; 2]) -> Result<Q, SgError> {
    if p[1] == 0 {
        return Err(SgError::Parse(format!("zero denominator in [{}, {}]", p[0], p[1])));
    }
    Ok(q(p[0], p[1]))
}

fn parse_mat(entries: &[[i64; 2]]) -> Result<QMat, SgError> {
    if entries.len() != 9 {
        return Err(SgError::Parse(format!("matrix needs 9 entries, got {}", entries.len())));
    }
    let mut m = [[Q::zero(); 3]; 3];
    for (idx, e) in entries.iter().enumerate() {
        m[idx / 3][idx % 3] = parse_rational(*e)?;
    }
    Ok(m)
}

fn parse_vec(entries: &[[i64; 2]]) -> Result<QVec, SgError> {
    if entries.len() != 3 {
        return Err(SgError::Parse(format!("vector needs 3 entries, got {}", entries.len())));
    }
    Ok([parse_rational(entries[0])?, parse_rational(entries[1])?, parse_rational(entries[2])?])
}

impl GroupDataset {
    pub fn from_json_str(text: &str) -> Result<Self, SgError> {
        let raw: RawFile = serde_json::from_str(text).map_err(|e| SgError::Parse(e.to_string()))?;
        let mut ds = GroupDataset::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5167_6461_7461);
        for rg in raw.groups {
            let valid = match rg.dimension {
                2 => (1..=17).contains(&rg.number),
                3 => (1..=230).contains(&rg.number),
                _ => false,
            };
            if !valid {
                return Err(SgError::Parse(format!(
                    "group {}: invalid (dimension, number) = ({}, {})",
                    rg.name, rg.dimension, rg.number
                )));
            }
            let key = (rg.dimension, rg.number);
            if ds.groups.contains_key(&key) {
                return Err(SgError::Parse(format!("duplicate group {}", rg.name)));
            }
            let gens = rg
                .generators
                .iter()
                .map(|op| Ok(AffineOp::new(parse_mat(&op.rotation)?, parse_vec(&op.translation)?)))
                .collect::<Result<Vec<_>, SgError>>()?;
            let group = SpaceGroup::from_generators(rg.dimension, rg.number, &rg.name, &rg.setting, &gens, DEFAULT_CAP)?;
            let mut positions = Vec::with_capacity(rg.wyckoffs.len());
            for rw in rg.wyckoffs {
                let maps = rw
                    .maps
                    .iter()
                    .map(|m| Ok(WyckoffMap::new(parse_mat(&m.v)?, parse_vec(&m.tau)?)))
                    .collect::<Result<Vec<_>, SgError>>()?;
                let pos = WyckoffPosition {
                    label: rw.label,
                    maps,
                    parent: key,
                };
                check_wyckoff(&group, &pos, &mut rng)?;
                positions.push(pos);
            }
            ds.groups.insert(key, group);
            ds.wyckoffs.insert(key, positions);
        }
        Ok(ds)
    }

    pub fn group(&self, dimension: u8, number: u32) -> Result<&SpaceGroup, SgError> {
        self.groups
            .get(&(dimension, number))
            .ok_or(SgError::UnknownGroup { dimension, number })
    }

    pub fn positions(&self, dimension: u8, number: u32) -> Result<&[WyckoffPosition], SgError> {
        self.wyckoffs
            .get(&(dimension, number))
            .map(|v| v.as_slice())
            .ok_or(SgError::UnknownGroup { dimension, number })
    }

    pub fn wyckoff(&self, dimension: u8, number: u32, label: &str) -> Result<&WyckoffPosition, SgError> {
        let group = self.group(dimension, number)?;
        self.positions(dimension, number)?
            .iter()
            .find(|w| w.label == label)
            .ok_or_else(|| SgError::UnknownWyckoff {
                group: group.name.clone(),
                label: label.to_string(),
            })
    }

    /// The most general position of a group (largest multiplicity).
    pub fn general_position(&self, dimension: u8, number: u32) -> Result<&WyckoffPosition, SgError> {
        let list = self.positions(dimension, number)?;
        list.iter()
            .max_by_key(|w| w.multiplicity())
            .ok_or_else(|| SgError::UnknownWyckoff {
                group: format!("{}D #{}", dimension, number),
                label: "<general>".to_string(),
            })
    }
}

/// Checks that `w(f)` is a single `G`-orbit for one random `f`.
fn check_wyckoff(group: &SpaceGroup, pos: &WyckoffPosition, rng: &mut impl Rng) -> Result<(), SgError> {
    let fail = |detail: String| SgError::Consistency {
        group: group.name.clone(),
        position: pos.label.clone(),
        detail,
    };
    if pos.maps.is_empty() {
        return Err(fail("no maps".into()));
    }
    if group.dimension == 2 {
        for m in &pos.maps {
            if !(m.v[2].iter().all(|x| x.is_zero()) && m.tau[2].is_zero()) {
                return Err(fail("planar map does not pin z".into()));
            }
        }
    }
    let f: Vec3 = [rng.gen(), rng.gen(), rng.gen()];
    let points = pos.project(f);
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            if torus_dist(*a, *b) < DEDUP_TOL {
                return Err(fail("projected points coincide".into()));
            }
        }
    }
    for g in 0..group.order() {
        for p in &points {
            let img = group.apply(g, *p);
            if !points.iter().any(|x| torus_dist(*x, img) < DEDUP_TOL) {
                return Err(fail(format!("image under op{} leaves the projected set", g)));
            }
        }
    }
    let orb = orbit(group, points[0], DEDUP_TOL);
    if orb.len() != points.len() {
        return Err(fail(format!("orbit has {} points, multiplicity is {}", orb.len(), points.len())));
    }
    Ok(())
}

/// Group axioms, orbit-stabilizer on `samples` random points plus one
/// point per Wyckoff position, and the Wyckoff orbit check on `samples`
/// points per position. Returns one message per failure.
pub fn verify_group(group: &SpaceGroup, positions: &[WyckoffPosition], samples: usize, seed: u64) -> Vec<String> {
    let mut failures = Vec::new();
    let n = group.order();
    if !group.ops[0].is_identity() {
        failures.push("first operation is not the identity".to_string());
    }
    for a in 0..n {
        if group.product_index(a, group.inverse_index(a)) != 0 {
            failures.push(format!("op{} times its inverse is not the identity", a));
        }
        for b in 0..n {
            if group.ops[a].compose(&group.ops[b]) != group.ops[group.product_index(a, b)] {
                failures.push(format!("product table entry ({}, {}) is wrong", a, b));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec3> = (0..samples).map(|_| [rng.gen(), rng.gen(), if group.dimension == 2 { 0.0 } else { rng.gen() }]).collect();
    points.extend(positions.iter().map(|p| p.project([rng.gen(), rng.gen(), rng.gen()])[0]));
    for y in points {
        let (o, s) = (orbit(group, y, DEDUP_TOL).len(), stabilizer_indices(group, y, DEDUP_TOL).len());
        if o * s != n {
            failures.push(format!("orbit-stabilizer fails at {:?}: {} x {} != {}", y, o, s, n));
        }
    }
    for pos in positions {
        for _ in 0..samples.max(1) {
            if let Err(e) = check_wyckoff(group, pos, &mut rng) {
                failures.push(e.to_string());
                break;
            }
        }
    }
    failures
}

/// Reads a group file from disk.
pub fn load_dataset(path: &Path) -> Result<GroupDataset, SgError> {
    let text = std::fs::read_to_string(path).map_err(|e| SgError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    GroupDataset::from_json_str(&text)
}

/// The shipped dataset, or `$SGFM_DATA_DIR/groups_core.json` when the
/// variable is set.
pub fn bundled() -> Result<GroupDataset, SgError> {
    match std::env::var_os("SGFM_DATA_DIR") {
        Some(dir) => load_dataset(&Path::new(&dir).join(BUNDLED_FILE)),
        None => GroupDataset::from_json_str(BUNDLED_JSON),
    }
}

/// Embedded copy of the shipped data, ignoring the environment.
pub fn bundled_json() -> &'static str {
    BUNDLED_JSON
}

pub fn orbit(group: &SpaceGroup, y: Vec3, tol: f64) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = Vec::new();
    for g in 0..group.order() {
        let p = group.apply(g, y);
        if !out.iter().any(|x| torus_dist(*x, p) < tol) {
            out.push(p);
        }
    }
    out
}

pub fn stabilizer_indices(group: &SpaceGroup, y: Vec3, tol: f64) -> Vec<usize> {
    (0..group.order())
        .filter(|&g| torus_dist(group.apply(g, y), y) < tol)
        .collect()
}

pub fn stabilizer(group: &SpaceGroup, y: Vec3, tol: f64) -> Vec<AffineOp> {
    stabilizer_indices(group, y, tol)
        .into_iter()
        .map(|g| group.ops[g].clone())
        .collect()
}

/// Parses a coordinate triplet such as `"-y,x-y,z+1/2"` into an operation.
pub fn parse_xyz(text: &str) -> Result<AffineOp, SgError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(SgError::Parse(format!("expected three components in {:?}", text)));
    }
    let mut rot = [[Q::zero(); 3]; 3];
    let mut tr = [Q::zero(); 3];
    for (row, part) in parts.iter().enumerate() {
        let s: String = part.chars().filter(|c| !c.is_whitespace()).collect();
        let mut i = 0;
        let bytes = s.as_bytes();
        while i < bytes.len() {
            let mut sign = 1;
            if bytes[i] == b'+' || bytes[i] == b'-' {
                sign = if bytes[i] == b'-' { -1 } else { 1 };
                i += 1;
            }
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'/') {
                i += 1;
            }
            let coef = if i > start {
                let tok = &s[start..i];
                let (n, d) = match tok.split_once('/') {
                    Some((n, d)) => (n, d),
                    None => (tok, "1"),
                };
                let n: i64 = n.parse().map_err(|_| SgError::Parse(format!("bad number in {:?}", text)))?;
                let d: i64 = d.parse().map_err(|_| SgError::Parse(format!("bad number in {:?}", text)))?;
                if d == 0 {
                    return Err(SgError::Parse(format!("zero denominator in {:?}", text)));
                }
                Some(q(sign * n, d))
            } else {
                None
            };
            if i < bytes.len() && matches!(bytes[i], b'x' | b'y' | b'z') {
                let col = (bytes[i] - b'x') as usize;
                rot[row][col] += coef.unwrap_or_else(|| q(sign, 1));
                i += 1;
            } else if let Some(c) = coef {
                tr[row] += c;
            } else {
                return Err(SgError::Parse(format!("cannot parse {:?}", text)));
            }
        }
    }
    Ok(AffineOp::new(rot, tr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds() -> &'static GroupDataset {
        static DS: std::sync::OnceLock<GroupDataset> = std::sync::OnceLock::new();
        DS.get_or_init(|| GroupDataset::from_json_str(BUNDLED_JSON).unwrap())
    }

    fn ops(list: &[&str]) -> Vec<AffineOp> {
        list.iter().map(|s| parse_xyz(s).unwrap()).collect()
    }

    #[test]
    fn shipped_groups_verify() {
        for (key, g) in &ds().groups {
            let f = verify_group(g, &ds().wyckoffs[key], 4, 1);
            assert!(f.is_empty(), "{}: {:?}", g.name, f);
        }
    }

    #[test]
    fn corrupted_product_table_is_reported() {
        let mut g = ds().group(3, 14).unwrap().clone();
        g.ops[1].translation[0] = q(1, 3);
        assert!(!verify_group(&g, &[], 1, 1).is_empty());
    }

    #[test]
    fn parse_triplets() {
        let op = parse_xyz("-y, x-y, z+1/2").unwrap();
        assert_eq!(op.rotation[0], [q(0, 1), q(-1, 1), q(0, 1)]);
        assert_eq!(op.rotation[1], [q(1, 1), q(-1, 1), q(0, 1)]);
        assert_eq!(op.translation, [q(0, 1), q(0, 1), q(1, 2)]);
        assert_eq!(parse_xyz("x+3/2,y-1/4,z").unwrap().translation, [q(1, 2), q(3, 4), q(0, 1)]);
        assert!(parse_xyz("x,y").is_err());
    }

    #[test]
    fn closure_examples() {
        assert_eq!(closure(&[AffineOp::identity()], 192).unwrap().len(), 1);
        let inv = ops(&["-x,-y,-z"]);
        let g = closure(&inv, 192).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g[0].is_identity());
        let p4mm = ops(&["-y,x,z", "-x,y,z"]);
        assert_eq!(closure(&p4mm, 192).unwrap().len(), 8);
    }

    #[test]
    fn closure_overflow() {
        // 1/7 translation plus its powers needs 7 elements
        let gens = ops(&["x+1/7,y,z"]);
        assert!(matches!(closure(&gens, 6), Err(SgError::ClosureOverflow { cap: 6 })));
        assert_eq!(closure(&gens, 7).unwrap().len(), 7);
    }

    #[test]
    fn closure_idempotent_on_bundled_groups() {
        for g in ds().groups.values() {
            let again = closure(&g.ops, 192).unwrap();
            let a: std::collections::HashSet<_> = g.ops.iter().collect();
            let b: std::collections::HashSet<_> = again.iter().collect();
            assert_eq!(a, b, "{}", g.name);
        }
    }

    #[test]
    fn bundled_contents() {
        let d = ds();
        for n in 1..=17 {
            assert!(d.group(2, n).is_ok(), "wallpaper group {}", n);
        }
        for n in [1, 2, 221, 225, 191] {
            assert!(d.group(3, n).is_ok());
        }
        let orders: Vec<(u8, u32, usize)> = vec![(2, 11, 8), (2, 17, 12), (3, 2, 2), (3, 221, 48), (3, 225, 192), (3, 191, 24)];
        for (dim, n, o) in orders {
            assert_eq!(d.group(dim, n).unwrap().order(), o);
        }
        for (key, list) in &d.wyckoffs {
            for w in list {
                let prefix: String = w.label.chars().take_while(|c| c.is_ascii_digit()).collect();
                assert_eq!(prefix.parse::<usize>().unwrap(), w.multiplicity(), "{:?} {}", key, w.label);
            }
        }
    }

    #[test]
    fn product_table_is_exact() {
        for g in ds().groups.values() {
            let n = g.order();
            for a in 0..n {
                assert_eq!(g.product_index(a, g.inverse_index(a)), 0);
                for b in 0..n {
                    assert_eq!(g.ops[a].compose(&g.ops[b]), g.ops[g.product_index(a, b)]);
                }
            }
        }
    }

    #[test]
    fn empty_group_list() {
        let d = GroupDataset::from_json_str(r#"{"groups": []}"#).unwrap();
        assert!(d.groups.is_empty());
    }

    #[test]
    fn malformed_file() {
        assert!(matches!(GroupDataset::from_json_str("{"), Err(SgError::Parse(_))));
    }

    #[test]
    fn non_stable_wyckoff_rejected() {
        // P-1 with a "position" whose second map is not the inversion image
        let text = r#"{"groups":[{"dimension":3,"number":2,"name":"P-1","generators":[
            {"rotation":[[-1,1],[0,1],[0,1],[0,1],[-1,1],[0,1],[0,1],[0,1],[-1,1]],"translation":[[0,1],[0,1],[0,1]]}],
          "wyckoffs":[{"label":"2i","maps":[
            {"V":[[1,1],[0,1],[0,1],[0,1],[1,1],[0,1],[0,1],[0,1],[1,1]],"tau":[[0,1],[0,1],[0,1]]},
            {"V":[[1,1],[0,1],[0,1],[0,1],[1,1],[0,1],[0,1],[0,1],[1,1]],"tau":[[1,2],[0,1],[0,1]]}]}]}]}"#;
        match GroupDataset::from_json_str(text) {
            Err(SgError::Consistency { group, position, .. }) => {
                assert_eq!(group, "P-1");
                assert_eq!(position, "2i");
            }
            other => panic!("expected consistency error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn orbit_and_stabilizer_examples() {
        let d = ds();
        let p1bar = d.group(3, 2).unwrap();
        assert_eq!(orbit(p1bar, [0.0; 3], DEDUP_TOL), vec![[0.0; 3]]);
        let o = orbit(p1bar, [0.1, 0.2, 0.3], DEDUP_TOL);
        assert_eq!(o.len(), 2);
        assert!(torus_dist(o[1], [0.9, 0.8, 0.7]) < 1e-12);
        assert_eq!(stabilizer(p1bar, [0.0; 3], DEDUP_TOL).len(), 2);
        assert_eq!(stabilizer(p1bar, [0.1, 0.2, 0.3], DEDUP_TOL), vec![AffineOp::identity()]);

        let p4mm = d.group(2, 11).unwrap();
        assert_eq!(orbit(p4mm, [0.1, 0.3, 0.0], DEDUP_TOL).len(), 8);
        let stab = stabilizer(p4mm, [0.5, 0.5, 0.0], DEDUP_TOL);
        assert_eq!(stab.len(), 8);
        assert_eq!(closure(&stab, 192).unwrap().len(), 8);
    }

    #[test]
    fn invariant_metric_is_invariant() {
        for g in ds().groups.values() {
            let m = g.invariant_metric();
            for idx in 0..g.order() {
                let r = g.rotation(idx);
                for i in 0..3 {
                    for j in 0..3 {
                        let rtmr: f64 = (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| r[a][i] * m[a][b] * r[b][j]).sum();
                        assert!((rtmr - m[i][j]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn orbit_stabilizer(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let d = ds();
            for g in d.groups.values() {
                let p = if g.dimension == 2 { [x, y, 0.0] } else { [x, y, z] };
                let o = orbit(g, p, DEDUP_TOL).len();
                let s = stabilizer_indices(g, p, DEDUP_TOL).len();
                prop_assert_eq!(o * s, g.order());
            }
        }

        #[test]
        fn wyckoff_sets_are_orbits(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let d = ds();
            for (key, list) in &d.wyckoffs {
                let g = &d.groups[key];
                for w in list {
                    let pts = w.project([x, y, z]);
                    // one representative suffices: orbits partition the torus
                    let p = pts[pts.len() / 2];
                    let orb = orbit(g, p, 1e-7);
                    prop_assert_eq!(orb.len(), pts.len(), "{} {}", g.name, w.label);
                    for q in &orb {
                        prop_assert!(pts.iter().any(|r| torus_dist(*r, *q) < 1e-7));
                    }
                }
            }
        }
    }
}
