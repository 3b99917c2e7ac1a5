use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use reachnet::actnet::parse_structure;
use reachnet::dynamics::SystemSpec;
use reachnet::gridoracle::{solve_air3d, GridSpec};
use reachnet::slicer::{compare_slices, dimension_index, slice_values, sub_zero_coverage, PairwiseUnion, SliceGrid, SliceSpec};
use reachnet::trainer::{completed_run, files, train_with, LossBreakdown, TrainConfig};
use reachnet::verifier::{violation_rate, LoadedModel, VerificationReport, REPORT_CSV_HEADER};

use crate::{out_root, CompareArgs, ConfigArgs, OracleArgs, SliceArgs, SliceSpecArgs, SweepArgs, TrainArgs, VerifyArgs};

pub const RESULTS_FILE: &str = "results.csv";
pub const COMPARE_HEADER: &str = "a,b,tau,mse,sub_zero_iou,a_only_fraction,b_only_fraction,coverage_of_b";

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .with_context(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        // Parse once so file errors are reported against the file.
        TrainConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                let (k, v) = split_kv(line)?;
                pairs.push((k.into(), v.into()));
            }
        }
    }
    for o in &args.overrides {
        let (k, v) = split_kv(o)?;
        pairs.push((k.into(), v.into()));
    }
    Ok(TrainConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

fn log_line(run: &str, r: &LossBreakdown, started: Instant) {
    eprintln!(
        "[{:>8.1}s] {run} iter {} gamma {:.4} total {:.6e} residual {:.6e} terminal {:.6e}",
        started.elapsed().as_secs_f64(),
        r.iteration,
        r.gamma,
        r.total,
        r.residual_term,
        r.terminal_term
    );
}

/// Train `config` into `root/<run name>`; returns the final checkpoint path.
fn run_training(config: &TrainConfig, root: &Path, quiet: bool) -> Result<PathBuf> {
    let name = config.run_name();
    let dir = root.join(&name);
    let started = Instant::now();
    train_with(config, Some(&dir), |r| {
        if !quiet {
            log_line(&name, r, started);
        }
    })
    .with_context(|| format!("training {name}"))?;
    Ok(dir.join(files::final_checkpoint(&name)))
}

pub fn train(args: TrainArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let root = out_root(args.out);
    let dir = root.join(config.run_name());
    let path = match completed_run(&config, &dir).filter(|_| !args.force) {
        Some(_) => {
            if !args.quiet {
                eprintln!("{}: reusing finished run", config.run_name());
            }
            dir.join(files::final_checkpoint(&config.run_name()))
        }
        None => run_training(&config, &root, args.quiet)?,
    };
    println!("{}", path.display());
    Ok(())
}

pub fn oracle(args: OracleArgs) -> Result<()> {
    let mut spec = SystemSpec::air3d();
    for o in &args.overrides {
        let (k, v) = split_kv(o)?;
        spec.set(k, v)?;
    }
    let mut grid = GridSpec::cubic(&spec, args.nodes)?.with_output_spacing(args.spacing)?;
    if let Some(dt) = args.dt {
        grid = grid.with_dt(&spec, dt)?;
    }
    let out = args
        .out
        .unwrap_or_else(|| out_root(None).join(format!("air3d_{}.grid", args.nodes)));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let started = Instant::now();
    let solved = solve_air3d(&spec, &grid)?;
    solved.save(&out)?;
    eprintln!(
        "[{:>8.1}s] solved {}^3 grid, dt {:.3e}, {} slices",
        started.elapsed().as_secs_f64(),
        args.nodes,
        grid.dt,
        solved.times.len()
    );
    println!("{}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    LoadedModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_report(path: &Path, report: &VerificationReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row()))?;
    Ok(())
}

pub fn verify(args: VerifyArgs) -> Result<()> {
    let loaded = load_model(&args.model)?;
    let structure = args.structure.unwrap_or_else(|| loaded.structure());
    let (report, _) = violation_rate(
        loaded.model(),
        loaded.system(),
        &structure,
        args.rollout.n,
        args.rollout.seed,
        args.rollout.dt,
    )?;
    eprintln!("{}", report.summary());
    if let Some(out) = &args.out {
        write_report(out, &report)?;
    }
    println!("{REPORT_CSV_HEADER}\n{}", report.csv_row());
    Ok(())
}

fn build_slice(args: &SliceSpecArgs, spec: &SystemSpec) -> Result<SliceSpec> {
    let free: Vec<&str> = args.free.split(',').map(str::trim).collect();
    if free.len() != 2 {
        bail!("--free takes exactly two dimensions, got {:?}", args.free);
    }
    let free = [dimension_index(spec, free[0])?, dimension_index(spec, free[1])?];
    let mut slice = SliceSpec::new(spec, free, args.tau.unwrap_or(spec.horizon));
    slice.resolution = [args.resolution; 2];
    for f in &args.fix {
        let (name, value) = split_kv(f)?;
        let d = dimension_index(spec, name)?;
        if free.contains(&d) {
            bail!("{name} is both fixed and free");
        }
        let v: f64 = value.parse().with_context(|| format!("bad value in --fix {f}"))?;
        slice.fix(d, v);
    }
    slice.validate(spec)?;
    Ok(slice)
}

/// Slice `loaded`, or the three-vehicle pairwise union built from it.
fn slice_model(loaded: &LoadedModel, union: bool, args: &SliceSpecArgs) -> Result<SliceGrid> {
    if union {
        if loaded.system().dim() != 6 {
            bail!("the pairwise union needs a two-vehicle model, got {}", loaded.system().name());
        }
        let mut spec = SystemSpec::vehicles9d();
        for (k, v) in loaded.system().to_pairs() {
            if k != "system" && k != "box" {
                spec.set(&k, &v)?;
            }
        }
        let union = PairwiseUnion::new(loaded.model())?;
        Ok(slice_values(&union, &spec, &build_slice(args, &spec)?)?)
    } else {
        let spec = loaded.system();
        Ok(slice_values(loaded.model(), spec, &build_slice(args, spec)?)?)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

pub fn slice(args: SliceArgs) -> Result<()> {
    let dir = args.out.clone().unwrap_or_else(|| out_root(None).join("slices"));
    fs::create_dir_all(&dir)?;
    for path in &args.models {
        let loaded = load_model(path)?;
        let grid = slice_model(&loaded, args.pairwise_union, &args.slice)?;
        let suffix = if args.pairwise_union { ".union" } else { "" };
        let out = dir.join(format!("{}{suffix}.slice.csv", stem(path)));
        grid.save_csv(&out)?;
        eprintln!("{}: sub-zero fraction {:.4}", out.display(), grid.sub_zero_fraction());
        println!("{}", out.display());
    }
    Ok(())
}

fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

pub fn compare(args: CompareArgs) -> Result<()> {
    let a = load_model(&args.a)?;
    let b = load_model(&args.b)?;
    let sa = slice_model(&a, args.a_union, &args.slice)?;
    let sb = slice_model(&b, args.b_union, &args.slice)?;
    let c = compare_slices(&sa, &sb)?;
    let coverage = sub_zero_coverage(&sa, &sb)?;
    let row = format!(
        "{},{},{},{},{},{},{},{}",
        args.a.display(),
        args.b.display(),
        sa.slice.tau,
        c.mse,
        c.sub_zero_iou,
        c.a_only_fraction,
        c.b_only_fraction,
        coverage
    );
    let results = args.results.unwrap_or_else(|| out_root(None).join("comparisons.csv"));
    append_row(&results, COMPARE_HEADER, &row)?;
    println!("{COMPARE_HEADER}\n{row}");
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| anyhow::anyhow!("bad {what} {x:?}")))
        .collect()
}

pub fn sweep_header() -> String {
    format!("schedule,{REPORT_CSV_HEADER},slice_mse,status")
}

/// Train (or reuse), verify and optionally score one sweep run.
fn sweep_run(
    base: &[(String, String)],
    schedule: &str,
    seed: u64,
    args: &SweepArgs,
    root: &Path,
    oracle: Option<&SliceGrid>,
) -> Result<String> {
    parse_structure(schedule)?;
    let mut pairs = base.to_vec();
    pairs.push(("schedule".into(), schedule.into()));
    pairs.push(("seed".into(), seed.to_string()));
    let config = TrainConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let dir = root.join(config.run_name());
    let ckpt = match completed_run(&config, &dir).filter(|_| !args.force) {
        Some(_) => {
            if !args.quiet {
                eprintln!("{}: reusing finished run", config.run_name());
            }
            dir.join(files::final_checkpoint(&config.run_name()))
        }
        None => run_training(&config, root, args.quiet)?,
    };
    let loaded = load_model(&ckpt)?;
    let (report, _) = violation_rate(
        loaded.model(),
        loaded.system(),
        &config.run_name(),
        args.rollout.n,
        args.rollout.seed,
        args.rollout.dt,
    )?;
    write_report(&dir.join("report.csv"), &report)?;
    let mse = match oracle {
        Some(reference) => {
            let s = slice_values(loaded.model(), loaded.system(), &reference.slice)?;
            compare_slices(&s, reference)?.mse.to_string()
        }
        None => String::new(),
    };
    Ok(format!("{schedule},{},{mse},ok", report.csv_row()))
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let schedules: Vec<String> = parse_list(&args.schedules, "schedule")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    if schedules.is_empty() || seeds.is_empty() {
        bail!("need at least one schedule and one seed");
    }
    // Validate the shared config up front; schedule problems stay per run.
    let mut base: Vec<(String, String)> = load_config(&args.config)?.to_pairs();
    base.retain(|(k, _)| k != "schedule" && k != "seed");
    let root = out_root(args.out.clone());
    fs::create_dir_all(&root)?;
    let oracle = match &args.oracle {
        Some(path) => {
            let g = load_model(path)?;
            Some(slice_model(&g, false, &args.slice)?)
        }
        None => None,
    };
    let jobs: Vec<(String, u64)> = schedules
        .iter()
        .flat_map(|s| seeds.iter().map(move |seed| (s.clone(), *seed)))
        .collect();
    let rows: Vec<Mutex<Option<String>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = args.parallel.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((schedule, seed)) = jobs.get(i) else { break };
                let row = match sweep_run(&base, schedule, *seed, &args, &root, oracle.as_ref()) {
                    Ok(row) => row,
                    Err(e) => {
                        eprintln!("{schedule} seed {seed}: {e:#}");
                        let msg = format!("{e:#}").replace([',', '\n'], ";");
                        format!("{schedule},{schedule}_seed{seed},{},,,,,,,,failed: {msg}", args.rollout.seed)
                    }
                };
                *rows[i].lock().expect("row lock") = Some(row);
            });
        }
    });
    let mut table = sweep_header();
    table.push('\n');
    let mut failures = 0;
    for r in rows {
        let row = r.into_inner().expect("row lock").expect("every job ran");
        if !row.ends_with(",ok") {
            failures += 1;
        }
        table.push_str(&row);
        table.push('\n');
    }
    let results = root.join(RESULTS_FILE);
    fs::write(&results, &table)?;
    print!("{table}");
    if failures > 0 {
        bail!("{failures} of {} runs failed; see {}", jobs.len(), results.display());
    }
    Ok(())
}

