//! File formats: lossless structure JSON, minimal CIF, CSV, conditioning
//! JSON lines and synthetic dataset directories.

use crate::lattice::{cell_from_parameters, cell_parameters, k_to_L, L_to_k, LatticeCoeffs, LatticeError};
use crate::sgdata::{GroupDataset, SgError, WyckoffPosition};
use crate::symmetry::{Crystal, SymmetryError, WyckoffAssignment};
use crate::synthbench::{DatasetEntry, SynthDataset};
use crate::torus::Vec3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error(transparent)]
    Data(#[from] SgError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

const ELEMENTS: [&str; 36] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe",
    "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
];

/// Element-like symbol of a species index (`X<i>` past the table).
pub fn species_symbol(i: usize) -> String {
    ELEMENTS.get(i).map_or_else(|| format!("X{}", i), |s| s.to_string())
}

pub fn species_from_symbol(s: &str) -> Option<usize> {
    ELEMENTS
        .iter()
        .position(|e| *e == s)
        .or_else(|| s.strip_prefix('X').and_then(|n| n.parse().ok()))
}

/// Lossless structure record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureFile {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub dimension: u8,
    pub group: u32,
    pub wyckoffs: Vec<String>,
    pub k: LatticeCoeffs,
    pub frac: Vec<Vec3>,
    pub species: Vec<usize>,
    pub num_species: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl StructureFile {
    pub fn new(id: impl Into<String>, c: &Crystal, wa: &WyckoffAssignment, seed: Option<u64>) -> Self {
        Self {
            id: id.into(),
            manifest_id: None,
            template: None,
            dimension: wa.group.0,
            group: wa.group.1,
            wyckoffs: wa.labels(),
            k: c.k,
            frac: (0..c.len()).map(|i| c.row(i)).collect(),
            species: c.species.clone(),
            num_species: c.num_species,
            seed,
        }
    }

    pub fn crystal(&self) -> Result<Crystal, IoError> {
        if self.species.len() != self.frac.len() {
            return Err(SymmetryError::LengthMismatch {
                expected: self.frac.len(),
                got: self.species.len(),
            }
            .into());
        }
        if let Some(&s) = self.species.iter().find(|&&s| s >= self.num_species) {
            return Err(IoError::Format {
                line: 0,
                detail: format!("species {} out of range for {} species", s, self.num_species),
            });
        }
        let frac = Array2::from_shape_fn((self.frac.len(), 3), |(i, c)| self.frac[i][c]);
        Ok(Crystal::new(self.k, frac, self.species.clone(), self.num_species))
    }

    pub fn positions(&self, groups: &GroupDataset) -> Result<Vec<WyckoffPosition>, IoError> {
        Ok(self
            .wyckoffs
            .iter()
            .map(|l| groups.wyckoff(self.dimension, self.group, l).cloned())
            .collect::<Result<_, _>>()?)
    }

    pub fn assignment(&self, groups: &GroupDataset) -> Result<WyckoffAssignment, IoError> {
        let g = groups.group(self.dimension, self.group)?;
        let wa = WyckoffAssignment::new(g, &self.positions(groups)?)?;
        if wa.num_rows() != self.frac.len() {
            return Err(SymmetryError::LengthMismatch {
                expected: wa.num_rows(),
                got: self.frac.len(),
            }
            .into());
        }
        Ok(wa)
    }
}

/// Minimal CIF. The group, dimension and Wyckoff labels ride along in a
/// comment tag read back by [`parse_cif`].
pub fn to_cif(s: &StructureFile) -> String {
    let p = cell_parameters(&k_to_L(&s.k));
    let mut out = format!("data_{}\n", s.id.replace(char::is_whitespace, "_"));
    out.push_str(&format!(
        "# sgfm dimension={} group={} wyckoffs={}\n",
        s.dimension,
        s.group,
        s.wyckoffs.join(",")
    ));
    out.push_str(&format!("_symmetry_Int_Tables_number {}\n", s.group));
    for (name, v) in ["length_a", "length_b", "length_c", "angle_alpha", "angle_beta", "angle_gamma"].iter().zip(p) {
        out.push_str(&format!("_cell_{} {}\n", name, v));
    }
    out.push_str("loop_\n_atom_site_label\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\n");
    for (i, (f, &sp)) in s.frac.iter().zip(&s.species).enumerate() {
        let sym = species_symbol(sp);
        out.push_str(&format!("{}{} {} {} {} {}\n", sym, i + 1, sym, f[0], f[1], f[2]));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedCif {
    pub id: String,
    pub dimension: Option<u8>,
    pub group: Option<u32>,
    pub wyckoffs: Vec<String>,
    pub cell: [f64; 6],
    pub frac: Vec<Vec3>,
    pub symbols: Vec<String>,
}

impl ParsedCif {
    /// Lattice coefficients of the parsed cell (the rotation is discarded).
    pub fn k(&self) -> Result<LatticeCoeffs, IoError> {
        Ok(L_to_k(&cell_from_parameters(&self.cell))?.0)
    }
}

fn num(tok: &str, line: usize) -> Result<f64, IoError> {
    // strip a trailing standard uncertainty such as 1.234(5)
    let t = tok.split('(').next().unwrap_or(tok);
    t.parse().map_err(|_| IoError::Format {
        line,
        detail: format!("expected a number, got {:?}", tok),
    })
}

/// Reads the subset of CIF written by [`to_cif`].
pub fn parse_cif(text: &str) -> Result<ParsedCif, IoError> {
    let mut out = ParsedCif {
        id: String::new(),
        dimension: None,
        group: None,
        wyckoffs: vec![],
        cell: [f64::NAN; 6],
        frac: vec![],
        symbols: vec![],
    };
    let cell_keys = ["_cell_length_a", "_cell_length_b", "_cell_length_c", "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma"];
    let mut columns: Vec<String> = Vec::new();
    let mut in_loop = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let l = raw.trim();
        if let Some(tag) = l.strip_prefix("# sgfm") {
            for kv in tag.split_whitespace() {
                match kv.split_once('=') {
                    Some(("dimension", v)) => out.dimension = Some(num(v, line)? as u8),
                    Some(("group", v)) => out.group = Some(num(v, line)? as u32),
                    Some(("wyckoffs", v)) => out.wyckoffs = v.split(',').filter(|s| !s.is_empty()).map(str::to_owned).collect(),
                    _ => {}
                }
            }
            continue;
        }
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(id) = l.strip_prefix("data_") {
            out.id = id.to_owned();
            continue;
        }
        if l == "loop_" {
            in_loop = true;
            columns.clear();
            continue;
        }
        if l.starts_with('_') {
            let mut parts = l.split_whitespace();
            let key = parts.next().unwrap_or_default();
            match parts.next() {
                None if in_loop => columns.push(key.to_owned()),
                Some(v) => {
                    in_loop = false;
                    if let Some(i) = cell_keys.iter().position(|k| *k == key) {
                        out.cell[i] = num(v, line)?;
                    } else if key == "_symmetry_Int_Tables_number" || key == "_space_group_IT_number" {
                        out.group.get_or_insert(num(v, line)? as u32);
                    }
                }
                None => {}
            }
            continue;
        }
        if in_loop && columns.iter().any(|c| c == "_atom_site_fract_x") {
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != columns.len() {
                return Err(IoError::Format {
                    line,
                    detail: format!("expected {} fields, got {}", columns.len(), toks.len()),
                });
            }
            let col = |name: &str| columns.iter().position(|c| c == name);
            let mut f = [0.0; 3];
            for (c, name) in ["_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"].iter().enumerate() {
                let i = col(name).ok_or_else(|| IoError::Format {
                    line,
                    detail: format!("missing column {}", name),
                })?;
                f[c] = num(toks[i], line)?;
            }
            let sym = col("_atom_site_type_symbol").or_else(|| col("_atom_site_label")).map(|i| toks[i]).unwrap_or("X0");
            out.frac.push(f);
            out.symbols.push(sym.to_owned());
        }
    }
    if out.cell.iter().any(|x| x.is_nan()) {
        return Err(IoError::Format {
            line: 0,
            detail: "incomplete cell parameters".into(),
        });
    }
    Ok(out)
}

/// Rebuilds a structure record from parsed CIF data.
pub fn structure_from_cif(p: &ParsedCif, num_species: usize) -> Result<StructureFile, IoError> {
    let species = p
        .symbols
        .iter()
        .map(|s| {
            species_from_symbol(s).ok_or_else(|| IoError::Format {
                line: 0,
                detail: format!("unknown species symbol {:?}", s),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StructureFile {
        id: p.id.clone(),
        manifest_id: None,
        template: None,
        dimension: p.dimension.unwrap_or(3),
        group: p.group.unwrap_or(1),
        wyckoffs: p.wyckoffs.clone(),
        k: p.k()?,
        frac: p.frac.clone(),
        species,
        num_species,
        seed: None,
    })
}

pub const CSV_HEADER: &str = "id,dimension,group,a,b,c,alpha,beta,gamma,row,species,x,y,z\n";

/// One CSV line per atom with the same fields as the CIF export.
pub fn to_csv_rows(s: &StructureFile) -> String {
    let p = cell_parameters(&k_to_L(&s.k));
    let mut out = String::new();
    for (i, (f, &sp)) in s.frac.iter().zip(&s.species).enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.id,
            s.dimension,
            s.group,
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            p[5],
            i,
            species_symbol(sp),
            f[0],
            f[1],
            f[2]
        ));
    }
    out
}

/// One line of a conditioning file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningEntry {
    pub group: u32,
    #[serde(default = "default_dimension")]
    pub dimension: u8,
    pub wyckoffs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<usize>>,
}

fn default_dimension() -> u8 {
    3
}

pub fn parse_conditioning(text: &str) -> Result<Vec<ConditioningEntry>, IoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IoError::Format {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn conditioning_jsonl(entries: &[ConditioningEntry]) -> String {
    entries.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: String,
    pub num_species: usize,
    pub splits: BTreeMap<String, Vec<String>>,
}

pub const DATASET_FORMAT: &str = "sgfm-dataset-v1";

fn entry_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("structures").join(format!("{}.json", id))
}

/// Writes `structures/<id>.json` per crystal plus `index.json`.
pub fn save_dataset(dir: &Path, ds: &SynthDataset) -> Result<(), IoError> {
    let mut splits = BTreeMap::new();
    for (name, entries) in ds.splits() {
        let mut ids = Vec::with_capacity(entries.len());
        for e in entries {
            let mut s = StructureFile::new(e.id.clone(), &e.crystal, &e.assignment, Some(e.seed));
            s.template = Some(e.template.clone());
            write_json(&entry_path(dir, &e.id), &s)?;
            ids.push(e.id.clone());
        }
        splits.insert(name.to_owned(), ids);
    }
    write_json(
        &dir.join("index.json"),
        &DatasetIndex {
            format: DATASET_FORMAT.into(),
            num_species: ds.num_species,
            splits,
        },
    )
}

pub fn load_entry(path: &Path, groups: &GroupDataset) -> Result<DatasetEntry, IoError> {
    let s: StructureFile = read_json(path)?;
    let wa = s.assignment(groups)?;
    Ok(DatasetEntry {
        id: s.id.clone(),
        template: s.template.clone().unwrap_or_default(),
        group: (s.dimension, s.group),
        labels: s.wyckoffs.clone(),
        crystal: s.crystal()?,
        assignment: wa,
        seed: s.seed.unwrap_or(0),
    })
}

pub fn load_dataset_dir(dir: &Path, groups: &GroupDataset) -> Result<SynthDataset, IoError> {
    let index: DatasetIndex = read_json(&dir.join("index.json"))?;
    if index.format != DATASET_FORMAT {
        return Err(IoError::Format {
            line: 0,
            detail: format!("unsupported dataset format {:?}", index.format),
        });
    }
    let load = |name: &str| -> Result<Vec<DatasetEntry>, IoError> {
        index
            .splits
            .get(name)
            .map(|ids| ids.iter().map(|id| load_entry(&entry_path(dir, id), groups)).collect())
            .unwrap_or(Ok(vec![]))
    };
    Ok(SynthDataset {
        num_species: index.num_species,
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgdata::bundled;
    use crate::synthbench::{default_templates, make_dataset};
    use ndarray::array;

    fn ds() -> &'static GroupDataset {
        static DS: std::sync::OnceLock<GroupDataset> = std::sync::OnceLock::new();
        DS.get_or_init(|| bundled().unwrap())
    }

    fn cubic() -> (Crystal, WyckoffAssignment) {
        let g = ds().group(3, 221).unwrap();
        let wa = WyckoffAssignment::new(g, &[ds().wyckoff(3, 221, "1a").unwrap().clone()]).unwrap();
        (Crystal::new([0.0, 0.0, 0.0, 0.0, 0.0, 1.3], array![[0.0, 0.0, 0.0]], vec![0], 1), wa)
    }

    #[test]
    fn cubic_cif_has_equal_edges_and_right_angles() {
        let (c, wa) = cubic();
        let cif = to_cif(&StructureFile::new("cube", &c, &wa, None));
        let p = parse_cif(&cif).unwrap();
        assert!((p.cell[0] - p.cell[1]).abs() < 1e-12 && (p.cell[1] - p.cell[2]).abs() < 1e-12);
        for a in &p.cell[3..] {
            assert!((a - 90.0).abs() < 1e-12);
        }
        assert_eq!(p.group, Some(221));
        assert!(cif.contains("_symmetry_Int_Tables_number 221"));
    }

    #[test]
    fn cif_roundtrip_recovers_k_and_frac() {
        let d = make_dataset(&default_templates(), ds(), 3, 5, 2).unwrap();
        for e in d.train.iter().chain(&d.test) {
            let s = StructureFile::new(e.id.clone(), &e.crystal, &e.assignment, Some(e.seed));
            let back = structure_from_cif(&parse_cif(&to_cif(&s)).unwrap(), 3).unwrap();
            for c in 0..6 {
                assert!((back.k[c] - s.k[c]).abs() < 1e-9, "{} k{}", e.id, c);
            }
            assert_eq!(back.frac, s.frac);
            assert_eq!(back.species, s.species);
            assert_eq!(back.wyckoffs, s.wyckoffs);
            assert_eq!((back.dimension, back.group), (s.dimension, s.group));
        }
    }

    #[test]
    fn structure_json_is_lossless() {
        let d = make_dataset(&default_templates()[..2], ds(), 3, 5, 4).unwrap();
        let e = &d.train[0];
        let s = StructureFile::new(e.id.clone(), &e.crystal, &e.assignment, Some(9));
        let text = serde_json::to_string(&s).unwrap();
        let back: StructureFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.crystal().unwrap(), e.crystal);
        assert_eq!(back.assignment(ds()).unwrap(), e.assignment);
    }

    #[test]
    fn csv_has_one_row_per_atom() {
        let (c, wa) = cubic();
        let rows = to_csv_rows(&StructureFile::new("cube", &c, &wa, None));
        assert_eq!(rows.lines().count(), 1);
        assert_eq!(rows.split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn conditioning_lines() {
        let text = "{\"group\": 221, \"wyckoffs\": [\"1a\", \"3c\"], \"atoms\": [0, 1, 1, 1]}\n\n{\"group\": 11, \"dimension\": 2, \"wyckoffs\": [\"1a\"]}\n";
        let es = parse_conditioning(text).unwrap();
        assert_eq!(es.len(), 2);
        assert_eq!(es[0].dimension, 3);
        assert_eq!(es[1].atoms, None);
        assert_eq!(parse_conditioning(&conditioning_jsonl(&es)).unwrap(), es);
        match parse_conditioning("{\"group\": 1, \"wyckoffs\": []}\n{\"grp\": 1}") {
            Err(IoError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let d = make_dataset(&default_templates(), ds(), 3, 5, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &d).unwrap();
        let back = load_dataset_dir(dir.path(), ds()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn symbols_roundtrip() {
        for i in 0..50 {
            assert_eq!(species_from_symbol(&species_symbol(i)), Some(i));
        }
    }
}
