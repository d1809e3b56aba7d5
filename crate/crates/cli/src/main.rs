mod manifest;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use manifest::{hash_path, sha256_hex, RunManifest};
use sgfm::evalx::{audit, bench_ga, fill_positions, match_crystals, MatchThresholds, GA_BENCH_HEADER, MIN_DISTANCE};
use sgfm::field::{BackboneParams, FieldConfig, FieldKind, Meta};
use sgfm::flow::{sample, train, Condition, FlowError, Mode, SampleConfig, TrainConfig};
use sgfm::io::{
    load_dataset_dir, parse_cif, parse_conditioning, read_json, read_text, save_dataset, species_from_symbol, structure_from_cif, to_cif, to_csv_rows, write_atomic,
    write_json, ConditioningEntry, StructureFile, CSV_HEADER,
};
use sgfm::prior::derive_seed;
use sgfm::sgdata::{bundled, bundled_json, load_dataset, verify_group, GroupDataset, SgError};
use sgfm::symmetry::CERTIFY_TOL;
use sgfm::synthbench::{
    ablation_csv, default_templates, make_dataset, run_ablation, run_steps_sweep, sweep_csv, to_examples, TemplateSpec,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sgfm", version, about = "Space-group conditional flow matching for crystals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Cif,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Check group axioms, orbit-stabilizer and Wyckoff orbits of a group file.
    Verify {
        /// Group data file; defaults to the bundled data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a field on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides the config entry.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate crystals from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines conditioning file.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        conditioning: Option<PathBuf>,
        /// Dataset directory whose test split provides conditioning and references.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training config supplying sampling settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Structures per conditioning entry.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        num_species: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare the single-evaluation and the naive group average.
    BenchGa {
        /// Target atom counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "16")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert structure files to CIF, CSV or JSON.
    Export {
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "cif")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic template dataset.
    MakeData {
        /// JSON list of templates; defaults to the bundled benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        n_per_template: usize,
        #[arg(long, default_value_t = 3)]
        num_species: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the field-kind × prior grid.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Match rate of one checkpoint against the number of sampling steps.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,500")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Symmetry, constructability and distance checks on structure files.
    Audit {
        files: Vec<PathBuf>,
        #[arg(long, default_value_t = CERTIFY_TOL)]
        tol: f64,
        #[arg(long, default_value_t = MIN_DISTANCE)]
        min_dist: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes 2 and 1.
enum Fail {
    Usage(anyhow::Error),
    Check(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Fail>;
    fn check(self) -> Result<T, Fail>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Fail> {
        self.map_err(|e| Fail::Usage(e.into()))
    }
    fn check(self) -> Result<T, Fail> {
        self.map_err(|e| Fail::Check(e.into()))
    }
}

type CmdResult = Result<(), Fail>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { data, seed } => cmd_verify(data.as_deref(), seed),
        Command::Train { config, data, seed, out } => cmd_train(&config, data, seed, &out),
        Command::Sample {
            checkpoint,
            conditioning,
            data,
            config,
            count,
            seed,
            steps,
            tol,
            num_species,
            out,
        } => cmd_sample(SampleArgs {
            checkpoint,
            conditioning,
            data,
            config,
            count,
            seed,
            steps,
            tol,
            num_species,
            out,
        }),
        Command::BenchGa { sizes, d, reps, seed, out } => cmd_bench_ga(&sizes, d, reps, seed, out.as_deref()),
        Command::Export { files, format, out } => cmd_export(&files, format, out.as_deref()),
        Command::MakeData {
            spec,
            n_per_template,
            num_species,
            seed,
            out,
        } => cmd_make_data(spec.as_deref(), n_per_template, num_species, seed, &out),
        Command::Ablation { data, config, seeds, out } => cmd_ablation(&data, &config, &seeds, out.as_deref()),
        Command::Sweep {
            data,
            checkpoint,
            config,
            steps,
            seed,
            out,
        } => cmd_sweep(&data, &checkpoint, config.as_deref(), &steps, seed, out.as_deref()),
        Command::Audit { files, tol, min_dist, out } => cmd_audit(&files, tol, min_dist, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Check(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(Fail::Usage(e)) => {
            eprintln!("usage error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// Error chain without causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn groups() -> Result<GroupDataset, Fail> {
    bundled().context("loading group data").usage()
}

fn groups_hash() -> String {
    match std::env::var_os("SGFM_DATA_DIR") {
        Some(dir) => hash_path(&Path::new(&dir).join(sgfm::sgdata::BUNDLED_FILE)).unwrap_or_default(),
        None => sha256_hex(bundled_json().as_bytes()),
    }
}

/// Writes to `out` atomically, or to stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).check(),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn load_train_config(path: &Path) -> Result<(TrainConfig, String), Fail> {
    let text = read_text(path).usage()?;
    let cfg: TrainConfig = serde_json::from_str(&text).with_context(|| format!("{}", path.display())).usage()?;
    cfg.validate().usage()?;
    Ok((cfg, sha256_hex(text.as_bytes())))
}

fn cmd_verify(data: Option<&Path>, seed: u64) -> CmdResult {
    let ds = match data {
        Some(p) => match load_dataset(p) {
            Err(e @ SgError::Io { .. }) => return Err(Fail::Usage(e.into())),
            other => other.check()?,
        },
        None => bundled().check()?,
    };
    let mut failed = 0;
    for (key, g) in &ds.groups {
        let failures = verify_group(g, &ds.wyckoffs[key], 8, seed);
        if failures.is_empty() {
            println!("ok   {} ({}D #{}) order {} positions {}", g.name, key.0, key.1, g.order(), ds.wyckoffs[key].len());
        } else {
            failed += 1;
            for f in failures {
                println!("FAIL {} ({}D #{}): {}", g.name, key.0, key.1, f);
            }
        }
    }
    println!("{} groups, {} failed", ds.groups.len(), failed);
    if failed > 0 {
        return Err(Fail::Check(anyhow!("{} groups failed verification", failed)));
    }
    Ok(())
}

fn sample_meta(cfg: &TrainConfig, num_species: usize, manifest_id: &str) -> Meta {
    let mut meta = Meta::new();
    meta.insert("manifest_id".into(), manifest_id.into());
    meta.insert("num_species".into(), num_species.into());
    meta.insert("sample".into(), serde_json::to_value(cfg.sample_config()).expect("serializable"));
    meta
}

fn cmd_train(config: &Path, data: Option<PathBuf>, seed: Option<u64>, out: &Path) -> CmdResult {
    let (mut cfg, config_hash) = load_train_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = data
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Fail::Usage(anyhow!("no dataset: pass --data or set \"data\" in the config")))?;
    if cfg.mode == Mode::Csp && cfg.lambda_a != TrainConfig::default().lambda_a {
        eprintln!("warning: lambda_a is ignored in CSP mode");
    }
    let groups = groups()?;
    let ds = load_dataset_dir(&dir, &groups).usage()?;
    let manifest = RunManifest::new("train", config_hash, hash_path(&dir).usage()?, cfg.seed);
    manifest.write(out).check()?;
    let examples = to_examples(&ds.train, &groups).check()?;
    let result = train(&examples, &groups, &cfg).check()?;
    let meta = sample_meta(&cfg, ds.num_species, &manifest.id);
    write_atomic(&out.join("checkpoint.json"), result.params.to_json_with_meta(&meta).as_bytes()).check()?;
    let csv = format!("# manifest_id={}\n{}", manifest.id, sgfm::flow::metrics_csv(&result.metrics));
    write_atomic(&out.join("metrics.csv"), csv.as_bytes()).check()?;
    if let Some(last) = result.metrics.last() {
        println!("trained {} epochs, final loss {:.6}", result.metrics.len(), last.total);
    } else {
        println!("0 epochs: wrote the initial parameters");
    }
    Ok(())
}

struct SampleArgs {
    checkpoint: PathBuf,
    conditioning: Option<PathBuf>,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    count: usize,
    seed: u64,
    steps: Option<usize>,
    tol: Option<f64>,
    num_species: Option<usize>,
    out: PathBuf,
}

/// Checkpoint, its sampling settings and species count.
fn load_checkpoint(path: &Path, config: Option<&Path>, num_species: Option<usize>) -> Result<(BackboneParams, SampleConfig, usize), Fail> {
    let text = read_text(path).usage()?;
    let (params, meta) = BackboneParams::from_json_with_meta(&text).usage()?;
    let mut sc = match config {
        Some(c) => load_train_config(c)?.0.sample_config(),
        None => match meta.get("sample") {
            Some(v) => serde_json::from_value(v.clone()).context("checkpoint sampling settings").usage()?,
            None => SampleConfig::default(),
        },
    };
    if config.is_none() && !meta.contains_key("sample") && params.config.atom_in != params.config.atom_out {
        sc.mode = Mode::Csp;
    }
    let ns = num_species
        .or_else(|| meta.get("num_species").and_then(|v| v.as_u64()).map(|v| v as usize))
        .unwrap_or(match sc.mode {
            Mode::Csp => params.config.atom_in,
            Mode::Dng => 1 << params.config.atom_out,
        });
    if sc.mode == Mode::Csp && ns != params.config.atom_in {
        return Err(Fail::Usage(anyhow!("checkpoint expects {} species, got {}", params.config.atom_in, ns)));
    }
    if params.config.kind == FieldKind::Plain && sc.prior == sgfm::prior::PriorKind::Wyckoff {
        log::info!("plain field: outputs carry no symmetry guarantee");
    }
    Ok((params, sc, ns))
}

fn cmd_sample(a: SampleArgs) -> CmdResult {
    let (params, mut sc, num_species) = load_checkpoint(&a.checkpoint, a.config.as_deref(), a.num_species)?;
    if let Some(s) = a.steps {
        sc.steps = s;
    }
    if let Some(t) = a.tol {
        sc.tol = t;
    }
    let groups = groups()?;
    // (id prefix, conditioning, optional reference)
    let mut jobs: Vec<(String, ConditioningEntry, Option<sgfm::synthbench::DatasetEntry>)> = Vec::new();
    let input_hash;
    if let Some(path) = &a.conditioning {
        let text = read_text(path).usage()?;
        input_hash = sha256_hex(text.as_bytes());
        for (i, e) in parse_conditioning(&text).usage()?.into_iter().enumerate() {
            jobs.push((format!("c{:05}", i), e, None));
        }
    } else {
        let dir = a.data.as_ref().expect("clap enforces one source");
        input_hash = hash_path(dir).usage()?;
        for e in load_dataset_dir(dir, &groups).usage()?.test {
            let cond = ConditioningEntry {
                group: e.group.1,
                dimension: e.group.0,
                wyckoffs: e.labels.clone(),
                atoms: Some(e.crystal.species.clone()),
            };
            jobs.push((e.id.clone(), cond, Some(e)));
        }
    }
    let config_hash = sha256_hex(format!("{}{:?}", hash_path(&a.checkpoint).usage()?, sc).as_bytes());
    let manifest = RunManifest::new("sample", config_hash, input_hash, a.seed);
    manifest.write(&a.out).check()?;
    let th = MatchThresholds::default();
    let mut csv = format!("# manifest_id={}\nid,matched,rmse,valid,symmetric,constructable\n", manifest.id);
    let mut index = 0u64;
    let (mut total, mut passed) = (0usize, 0usize);
    for (prefix, cond, reference) in &jobs {
        let group = groups
            .group(cond.dimension, cond.group)
            .with_context(|| format!("entry {}", prefix))
            .usage()?;
        let positions = cond
            .wyckoffs
            .iter()
            .map(|l| groups.wyckoff(cond.dimension, cond.group, l).cloned())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("entry {}", prefix))
            .usage()?;
        if sc.mode == Mode::Csp && cond.atoms.is_none() {
            return Err(Fail::Usage(anyhow!("entry {}: CSP sampling needs \"atoms\"", prefix)));
        }
        let c = Condition {
            group,
            positions: &positions,
            species: cond.atoms.as_deref(),
            num_species,
        };
        for r in 0..a.count {
            let id = if a.count == 1 { prefix.clone() } else { format!("{}-{}", prefix, r) };
            let seed = derive_seed(a.seed, index);
            index += 1;
            total += 1;
            match sample(&c, &params, &sc, seed) {
                Ok(g) => {
                    let rep = audit(&g.crystal, group, &g.assignment, sc.tol, MIN_DISTANCE);
                    let m = reference
                        .as_ref()
                        .map(|e| match_crystals(&g.crystal, &e.crystal, &e.assignment, &th))
                        .transpose()
                        .check()?;
                    if rep.passed() {
                        passed += 1;
                    }
                    let mut s = StructureFile::new(id.clone(), &g.crystal, &g.assignment, Some(seed));
                    s.manifest_id = Some(manifest.id.clone());
                    write_json(&a.out.join("structures").join(format!("{}.json", id)), &s).check()?;
                    csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        id,
                        m.as_ref().map_or(String::new(), |m| m.matched.to_string()),
                        m.as_ref().and_then(|m| m.rmse).map_or(String::new(), |x| x.to_string()),
                        rep.valid,
                        rep.symmetric,
                        rep.constructable
                    ));
                }
                Err(FlowError::SymmetryDrift(msg)) => {
                    log::warn!("{}: {}", id, msg);
                    let matched = if reference.is_some() { "false" } else { "" };
                    csv.push_str(&format!("{},{},,false,false,false\n", id, matched));
                }
                Err(e) => return Err(Fail::Usage(anyhow!("entry {}: {}", prefix, e))),
            }
        }
    }
    write_atomic(&a.out.join("audit.csv"), csv.as_bytes()).check()?;
    println!("generated {} structures, {} passed the audit", total, passed);
    Ok(())
}

fn cmd_bench_ga(sizes: &[usize], d: usize, reps: usize, seed: u64, out: Option<&Path>) -> CmdResult {
    let groups = groups()?;
    let cfg = FieldConfig { d, ..FieldConfig::new(2, 1) };
    let params = BackboneParams::init_with_heads(&cfg, seed, true).usage()?;
    let mut csv = String::from(GA_BENCH_HEADER);
    for (key, g) in &groups.groups {
        for &n in sizes {
            let pos = fill_positions(&groups.wyckoffs[key], n);
            let row = bench_ga(g, &pos, &params, reps, seed).check()?;
            csv.push_str(&row.csv_line());
        }
    }
    emit(out, &csv)
}

/// Reads a JSON structure file, or a CIF written by `export`.
fn read_structure(path: &Path) -> Result<StructureFile, Fail> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("cif")) {
        let parsed = parse_cif(&read_text(path).usage()?).with_context(|| format!("{}", path.display())).usage()?;
        let num_species = parsed.symbols.iter().filter_map(|s| species_from_symbol(s)).max().map_or(1, |m| m + 1);
        return structure_from_cif(&parsed, num_species).usage();
    }
    read_json(path).usage()
}

fn cmd_export(files: &[PathBuf], format: Format, out: Option<&Path>) -> CmdResult {
    let structures = files.iter().map(|f| read_structure(f)).collect::<Result<Vec<_>, _>>()?;
    let text = match format {
        Format::Cif => structures.iter().map(to_cif).collect::<Vec<_>>().join("\n"),
        Format::Csv => std::iter::once(CSV_HEADER.to_string()).chain(structures.iter().map(to_csv_rows)).collect(),
        Format::Json => serde_json::to_string_pretty(&structures).expect("serializable") + "\n",
    };
    emit(out, &text)
}

fn cmd_make_data(spec: Option<&Path>, n: usize, num_species: usize, seed: u64, out: &Path) -> CmdResult {
    let (specs, spec_hash): (Vec<TemplateSpec>, String) = match spec {
        Some(p) => {
            let text = read_text(p).usage()?;
            let specs = serde_json::from_str(&text).with_context(|| format!("{}", p.display())).usage()?;
            (specs, sha256_hex(text.as_bytes()))
        }
        None => {
            let specs = default_templates();
            let h = sha256_hex(serde_json::to_string(&specs).expect("serializable").as_bytes());
            (specs, h)
        }
    };
    let groups = groups()?;
    let manifest = RunManifest::new("make-data", spec_hash, groups_hash(), seed);
    manifest.write(out).check()?;
    let ds = match make_dataset(&specs, &groups, num_species, n, seed) {
        Err(e @ sgfm::synthbench::SynthError::Spec { .. }) => return Err(Fail::Usage(e.into())),
        other => other.check()?,
    };
    save_dataset(out, &ds).check()?;
    write_json(&out.join("templates.json"), &specs).check()?;
    println!("wrote {} train, {} val, {} test crystals", ds.train.len(), ds.val.len(), ds.test.len());
    Ok(())
}

fn cmd_ablation(data: &Path, config: &Path, seeds: &[u64], out: Option<&Path>) -> CmdResult {
    let (cfg, _) = load_train_config(config)?;
    let groups = groups()?;
    let ds = load_dataset_dir(data, &groups).usage()?;
    let rows = run_ablation(&ds, &groups, &cfg, seeds, &MatchThresholds::default()).check()?;
    emit(out, &ablation_csv(&rows))
}

fn cmd_sweep(data: &Path, checkpoint: &Path, config: Option<&Path>, steps: &[usize], seed: u64, out: Option<&Path>) -> CmdResult {
    let (params, sc, _) = load_checkpoint(checkpoint, config, None)?;
    let groups = groups()?;
    let ds = load_dataset_dir(data, &groups).usage()?;
    let rows = run_steps_sweep(&ds.test, &groups, &params, &sc, steps, seed, &MatchThresholds::default()).check()?;
    emit(out, &sweep_csv(&rows))
}

fn cmd_audit(files: &[PathBuf], tol: f64, min_dist: f64, out: Option<&Path>) -> CmdResult {
    let groups = groups()?;
    let mut csv = String::from("id,symmetric,constructable,valid,atoms_per_orbit,symmetry_residual,min_distance\n");
    let mut failed = 0;
    for f in files {
        let s = read_structure(f)?;
        let c = s.crystal().usage()?;
        let wa = s.assignment(&groups).usage()?;
        let g = groups.group(s.dimension, s.group).usage()?;
        let r = audit(&c, g, &wa, tol, min_dist);
        if !r.passed() {
            failed += 1;
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.id,
            r.symmetric,
            r.constructable,
            r.valid,
            r.atoms_per_orbit,
            r.symmetry_residual.map_or(String::new(), |x| format!("{:e}", x)),
            r.min_distance
        ));
    }
    emit(out, &csv)?;
    if failed > 0 {
        return Err(Fail::Check(anyhow!("{} of {} structures failed the audit", failed, files.len())));
    }
    Ok(())
}
