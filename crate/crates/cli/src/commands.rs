use std::fmt::Display;
use std::path::{Path, PathBuf};

use persalign::config::{preset_text, ExperimentConfig, PRESET_NAMES};
use persalign::diversity::{drd_with, DiversityReport};
use persalign::instance::{build_instance, gap_stats, ProblemInstance};
use persalign::io::{sha256_hex, write_atomic, write_json_atomic};
use persalign::manifest::{timestamp_now, RunManifest, SeedRecord};
use persalign::offline::{decay_summary, run_sweep_seed, write_sweep_csv, SweepResult};
use persalign::online::{run_online, write_rows_csv, Learner, OnlineConfig};
use persalign::verify::{run_all, DEFAULT_VERIFY_SEED};
use persalign::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::ConfigArgs;

#[derive(Debug)]
pub enum Failure {
    Runtime(String),
    Config(String),
    Verification(String),
}

impl Failure {
    pub fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Config(m) | Failure::Verification(m) => m,
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Attaches the stage name to a library error and picks the exit class.
fn stage(name: &'static str) -> impl Fn(Error) -> Failure {
    move |e| {
        let msg = match &e {
            Error::Config(m) => format!("{name}: {m}"),
            _ => format!("{name}: {e}"),
        };
        match e {
            Error::Config(_) | Error::InvalidConfig(_) | Error::InvalidMode(_) => Failure::Config(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

fn io_failure(what: impl Display) -> impl Fn(std::io::Error) -> Failure {
    let what = what.to_string();
    move |e| Failure::Runtime(format!("{what}: {e}"))
}

/// Resolved config plus whether the environment replaced its seed.
fn load_config(args: &ConfigArgs) -> std::result::Result<(ExperimentConfig, bool), Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path).map_err(stage("config"))?,
        (None, Some(name)) => persalign::config::preset(name).map_err(stage("config"))?,
        (None, None) => return Err(Failure::Config("config: one of --config or --preset is required".into())),
    };
    let overridden = cfg.apply_seed_override().map_err(stage("config"))?.is_some();
    Ok((cfg, overridden))
}

enum InstanceSource<'a> {
    Generate,
    File(&'a Path),
}

/// Everything needed to (re)execute a run.
struct RunSpec<'a> {
    cfg: ExperimentConfig,
    env_override: bool,
    instance: InstanceSource<'a>,
    out: &'a Path,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> std::result::Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(io_failure(format!("output directory {}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> CmdResult {
        write_atomic(&self.dir.join(rel), bytes).map_err(stage("output"))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> CmdResult {
        write_json_atomic(&self.dir.join(rel), value).map_err(stage("output"))?;
        self.files.push(rel.to_string());
        Ok(())
    }
}

fn obtain_instance(spec: &RunSpec) -> std::result::Result<ProblemInstance, Failure> {
    match spec.instance {
        InstanceSource::Generate => build_instance(&spec.cfg.instance, spec.cfg.seed).map_err(stage("instance")),
        InstanceSource::File(path) => ProblemInstance::load(path).map_err(stage("instance")),
    }
}

fn diversity_report(cfg: &ExperimentConfig, inst: &ProblemInstance) -> std::result::Result<DiversityReport, Failure> {
    let d = &cfg.diagnostics;
    drd_with(inst, d.hard_fraction, d.cov_divisor, d.rank_tol).map_err(stage("diagnose"))
}

/// Writes `instance.json` and starts a manifest for it.
fn begin_run(
    command: &str,
    spec: &RunSpec,
    inst: &ProblemInstance,
    run_seeds: Vec<u64>,
    out: &mut Outputs,
    started: String,
) -> std::result::Result<RunManifest, Failure> {
    let bytes = inst.to_json_bytes().map_err(stage("instance"))?;
    out.bytes("instance.json", &bytes)?;
    let seeds = SeedRecord {
        instance_start_seed: spec.cfg.seed,
        instance_seed: Some(inst.seed),
        run_seeds,
        env_override: spec.env_override,
    };
    let mut manifest = RunManifest::new(command, &spec.cfg, seeds, started).map_err(stage("manifest"))?;
    manifest.instance_sha256 = Some(sha256_hex(&bytes));
    manifest.instance_generated = matches!(spec.instance, InstanceSource::Generate);
    Ok(manifest)
}

fn finish(manifest: RunManifest, out: &Outputs) -> CmdResult {
    let path = manifest.finish(&out.dir, &out.files).map_err(stage("manifest"))?;
    println!("manifest: {}", path.display());
    Ok(())
}

pub fn gen_instance(args: &ConfigArgs, out: &Path) -> CmdResult {
    let (cfg, env_override) = load_config(args)?;
    run_gen_instance(RunSpec {
        cfg,
        env_override,
        instance: InstanceSource::Generate,
        out,
    })
}

fn run_gen_instance(spec: RunSpec) -> CmdResult {
    let started = timestamp_now();
    let inst = obtain_instance(&spec)?;
    let mut out = Outputs::new(spec.out)?;
    let manifest = begin_run("gen-instance", &spec, &inst, Vec::new(), &mut out, started)?;
    let report = diversity_report(&spec.cfg, &inst)?;
    let gaps = gap_stats(&inst);
    out.json("diversity.json", &report)?;
    out.json("gaps.json", &GapDoc::new(&gaps))?;
    println!(
        "instance seed {}: min gap {:.6}, drd {:.6}, full rank {}",
        inst.seed, gaps.min_gap, report.drd, report.verdict_full_rank
    );
    finish(manifest, &out)
}

#[derive(Serialize)]
struct GapDoc {
    schema_version: u32,
    #[serde(flatten)]
    stats: persalign::GapStats,
}

impl GapDoc {
    fn new(stats: &persalign::GapStats) -> Self {
        Self {
            schema_version: persalign::io::SCHEMA_VERSION,
            stats: *stats,
        }
    }
}

pub fn online(args: &ConfigArgs, instance: Option<&Path>, seeds: Option<Vec<u64>>, out: &Path) -> CmdResult {
    let (cfg, env_override) = load_config(args)?;
    let seeds = seeds.unwrap_or_else(|| vec![cfg.online.run_seed]);
    run_online_cmd(
        RunSpec {
            cfg,
            env_override,
            instance: instance.map_or(InstanceSource::Generate, InstanceSource::File),
            out,
        },
        seeds,
    )
}

fn run_online_cmd(spec: RunSpec, seeds: Vec<u64>) -> CmdResult {
    if seeds.is_empty() {
        return Err(Failure::Config("online: at least one seed is required".into()));
    }
    let started = timestamp_now();
    let inst = obtain_instance(&spec)?;
    let mut out = Outputs::new(spec.out)?;
    let manifest = begin_run("online", &spec, &inst, seeds.clone(), &mut out, started)?;
    let runs: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = OnlineConfig {
                run_seed: seed,
                ..spec.cfg.online.clone()
            };
            run_online(&inst, &spec.cfg.fit, &cfg).map(|run| (seed, run))
        })
        .collect::<persalign::Result<_>>()
        .map_err(stage("online"))?;
    let mut aborted = Vec::new();
    for (seed, run) in &runs {
        let dir = format!("seed-{seed}");
        out.bytes(&format!("{dir}/trace.csv"), &run.trace.to_csv_bytes().map_err(stage("online"))?)?;
        out.json(&format!("{dir}/summary.json"), &run.summary)?;
        let mut fit_csv = Vec::new();
        write_rows_csv(&run.fit_log, &mut fit_csv).map_err(stage("online"))?;
        out.bytes(&format!("{dir}/fit_diagnostics.csv"), &fit_csv)?;
        if !run.evals.is_empty() {
            let mut eval_csv = Vec::new();
            write_rows_csv(&run.evals, &mut eval_csv).map_err(stage("online"))?;
            out.bytes(&format!("{dir}/expected_regret.csv"), &eval_csv)?;
        }
        let s = &run.summary;
        println!(
            "seed {seed}: rounds {} G_T {:.6} tail fraction {:.6} refits {} last positive round {}",
            s.rounds_completed, s.final_cumulative, s.tail_fraction, s.refit_count, s.last_positive_round
        );
        if let Some(reason) = &s.abort_reason {
            aborted.push(format!("seed {seed}: {reason}"));
        }
    }
    finish(manifest, &out)?;
    if aborted.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("online: aborted runs: {}", aborted.join("; "))))
    }
}

pub fn offline_sweep(args: &ConfigArgs, instance: Option<&Path>, out: &Path) -> CmdResult {
    let (cfg, env_override) = load_config(args)?;
    run_offline_cmd(RunSpec {
        cfg,
        env_override,
        instance: instance.map_or(InstanceSource::Generate, InstanceSource::File),
        out,
    })
}

fn run_offline_cmd(spec: RunSpec) -> CmdResult {
    let started = timestamp_now();
    spec.cfg.offline.validate().map_err(stage("offline"))?;
    let inst = obtain_instance(&spec)?;
    let mut out = Outputs::new(spec.out)?;
    let seeds = spec.cfg.offline.seeds.clone();
    let manifest = begin_run("offline-sweep", &spec, &inst, seeds.clone(), &mut out, started)?;
    let runs = seeds
        .par_iter()
        .map(|&seed| run_sweep_seed(&inst, &spec.cfg.fit, &spec.cfg.offline, seed, Learner::Erm))
        .collect::<persalign::Result<Vec<_>>>()
        .map_err(stage("offline"))?;
    let result = SweepResult {
        schema_version: persalign::io::SCHEMA_VERSION,
        runs,
    };
    let mut csv = Vec::new();
    write_sweep_csv(&result, &mut csv).map_err(stage("offline"))?;
    out.bytes("sweep.csv", &csv)?;
    let decay = decay_summary(&result);
    out.json("decay.json", &decay)?;
    for s in &decay.seeds {
        let (slope, r2) = s.fit.map_or((f64::NAN, f64::NAN), |f| (f.slope, f.r_squared));
        println!(
            "seed {}: zero-model regret {:.6} final regret {:.6} slope {:.3e} R² {:.3} burn-in {}",
            s.seed,
            s.zero_model_regret,
            s.final_regret,
            slope,
            r2,
            s.burn_in.map_or("none".to_string(), |n| n.to_string())
        );
    }
    match &decay.pooled {
        Some(f) => println!("pooled: slope {:.3e} R² {:.3} over {} points", f.slope, f.r_squared, f.points),
        None => println!("pooled: {}", decay.pooled_error.as_deref().unwrap_or("unavailable")),
    }
    finish(manifest, &out)
}

pub fn diagnose(args: &ConfigArgs, instance: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let (cfg, env_override) = match (&args.config, &args.preset, instance) {
        (None, None, Some(_)) => (ExperimentConfig::default(), false),
        _ => load_config(args)?,
    };
    let spec = RunSpec {
        cfg,
        env_override,
        instance: instance.map_or(InstanceSource::Generate, InstanceSource::File),
        out: out.unwrap_or(Path::new("")),
    };
    let started = timestamp_now();
    let inst = obtain_instance(&spec)?;
    let report = diversity_report(&spec.cfg, &inst)?;
    let gaps = gap_stats(&inst);
    println!("instance seed: {}", inst.seed);
    println!("users {} latent dimension {} feature dimension {}", inst.num_users, inst.dim_j, inst.dim_d);
    println!(
        "gaps: min {:.6} 5th percentile {:.6} median {:.6}",
        gaps.min_gap, gaps.pct5_gap, gaps.median_gap
    );
    println!("head second moment eigenvalues: {:?}", report.g_lambda_eigs);
    println!("numerical rank: {} of {}", report.numerical_rank, inst.dim_j);
    println!(
        "drd: {:.6} (scale-free {:.6}, {} hard pairs)",
        report.drd, report.drd_scale_free, report.hard_pairs
    );
    println!(
        "full-rank sufficient condition: {}",
        if report.verdict_full_rank { "PASS" } else { "FAIL" }
    );
    if out.is_some() {
        let mut files = Outputs::new(spec.out)?;
        let manifest = begin_run("diagnose", &spec, &inst, Vec::new(), &mut files, started)?;
        files.json("diversity.json", &report)?;
        files.json("gaps.json", &GapDoc::new(&gaps))?;
        finish(manifest, &files)?;
    }
    Ok(())
}

pub fn verify(seed: Option<u64>, out: Option<&Path>) -> CmdResult {
    let seed = seed.unwrap_or(DEFAULT_VERIFY_SEED);
    let report = run_all(seed).map_err(stage("verify"))?;
    for s in &report.suites {
        println!(
            "{} {:<36} trials {:>6} violations {:>3} ({:.2}s)",
            if s.passed() { "PASS" } else { "FAIL" },
            s.name,
            s.trials,
            s.violations,
            s.seconds
        );
        if let Some(c) = &s.counterexample {
            println!("     counterexample: {c}");
        }
    }
    println!(
        "{} suites, {} violations",
        report.suites.len(),
        report.total_violations()
    );
    if let Some(dir) = out {
        write_json_atomic(&dir.join("verify.json"), &report).map_err(stage("verify"))?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<_> = report.suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
        Err(Failure::Verification(format!("verify: violations in {}", failed.join(", "))))
    }
}

pub fn replay(manifest_path: &Path, out: &Path) -> CmdResult {
    let original = RunManifest::load(manifest_path).map_err(stage("replay"))?;
    let run_dir = if manifest_path.is_dir() {
        manifest_path.to_path_buf()
    } else {
        manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let mut cfg = original.config.clone();
    cfg.seed = original.seeds.instance_start_seed;
    let instance_file = run_dir.join("instance.json");
    let spec = RunSpec {
        cfg,
        env_override: original.seeds.env_override,
        instance: if original.instance_generated {
            InstanceSource::Generate
        } else {
            InstanceSource::File(&instance_file)
        },
        out,
    };
    match original.command.as_str() {
        "gen-instance" => run_gen_instance(spec)?,
        "online" => run_online_cmd(spec, original.seeds.run_seeds.clone())?,
        "offline-sweep" => run_offline_cmd(spec)?,
        other => return Err(Failure::Config(format!("replay: command {other:?} cannot be replayed"))),
    }
    let fresh = RunManifest::load(out).map_err(stage("replay"))?;
    let mut mismatched = original.mismatches(&fresh, &[".csv", ".json"]);
    if original.instance_sha256 != fresh.instance_sha256 {
        mismatched.push("instance".to_string());
    }
    if mismatched.is_empty() {
        println!("reproduced: {} files byte-identical", original.files.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!("replay: outputs differ: {}", mismatched.join(", "))))
    }
}

pub fn preset(name: Option<&str>) -> CmdResult {
    match name {
        None => {
            for n in PRESET_NAMES {
                println!("{n}");
            }
            Ok(())
        }
        Some(n) => match preset_text(n) {
            Some(text) => {
                print!("{text}");
                Ok(())
            }
            None => Err(Failure::Config(format!(
                "config: unknown preset {n:?}; known: {}",
                PRESET_NAMES.join(", ")
            ))),
        },
    }
}
