use std::path::{Path, PathBuf};

use log::info;
use tag_core::affinity::{AffinityMatrix, AffinityMetadata};
use tag_core::bench::{read_report, Benchmark, BenchmarkReport};
use tag_core::hashing::sha256_hex;
use tag_core::probe::samples_to_csv;
use tag_core::selector::{solve_branch_and_bound, CandidateFilter, GroupingReport, Provenance, SelectionProblem};
use tag_core::theory::{run_counterexample, verify, GradientNorm, ThresholdForm};

use crate::artifact::{persist_artifact, verify_artifact, RunArtifact};
use crate::config::{parse_config, RunConfig, SelectionMode};
use crate::error::{CliError, CliResult};

pub const AFFINITY_CSV: &str = "affinity.csv";
pub const AFFINITY_META: &str = "affinity_meta.json";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const GROUPING_JSON: &str = "grouping.json";
pub const CONFIG_JSON: &str = "config.json";
pub const EXHAUSTIVE_JSON: &str = "exhaustive.json";

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn load(config: &Path) -> CliResult<(RunConfig, Benchmark)> {
    let cfg = parse_config(config)?;
    let bench = Benchmark::new(cfg.bench_spec()?)?;
    Ok((cfg, bench))
}

fn run_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    let base = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    base.join(cfg.run_id())
}

fn affinity_files(cfg: &RunConfig, bench: &Benchmark) -> CliResult<(Vec<(String, String)>, AffinityMatrix)> {
    let probe = bench.probe_run()?;
    let meta = AffinityMetadata {
        diagonal_mode: probe.affinity.diagonal_mode(),
        schedule: Some(bench.spec().schedule),
        seed: cfg.seeds.trainer,
        coverage: probe.affinity.coverage_matrix().to_vec(),
    };
    info!("probed {} of {} steps", probe.probed_steps, probe.steps);
    let files = vec![
        (AFFINITY_CSV.to_string(), probe.affinity.to_csv()),
        (AFFINITY_META.to_string(), to_json(&meta)),
        (CONFIG_JSON.to_string(), cfg.to_json()),
    ];
    Ok((files, probe.affinity.clone()))
}

fn grouping_report(
    z: &AffinityMatrix,
    budget: usize,
    filter: &CandidateFilter,
    provenance: Provenance,
) -> CliResult<GroupingReport> {
    let problem = SelectionProblem::from_affinity(z, budget, filter)?;
    let sol = solve_branch_and_bound(&problem)?;
    Ok(GroupingReport::new(&problem, &sol, provenance))
}

/// Full pipeline: probe, select, retrain, and every baseline for budgets `1..=budget`.
pub fn run(config: &Path, out: Option<&Path>) -> CliResult<PathBuf> {
    let (cfg, bench) = load(config)?;
    let dir = run_dir(&cfg, out);
    let hash = cfg.canonical_hash();
    let (mut files, z) = affinity_files(&cfg, &bench)?;
    let affinity_hash = sha256_hex(files[0].1.as_bytes());
    let grouping = grouping_report(
        &z,
        cfg.selection.budget,
        &bench.spec().candidate_filter(),
        Provenance {
            seed: Some(cfg.seeds.trainer),
            config_hash: Some(hash.clone()),
            affinity_csv_hash: Some(affinity_hash),
        },
    )?;
    files.push((GROUPING_JSON.to_string(), to_json(&grouping)));
    let budgets: Vec<usize> = (1..=cfg.selection.budget).collect();
    let mut report = bench.report(&budgets, cfg.baselines.random_exact_limit)?;
    report.provenance.config_hashes = vec![hash.clone()];
    for (name, content) in report.render()? {
        files.push((name.to_string(), content));
    }
    info!("trained {} networks", bench.networks_trained());
    persist_artifact(&dir, &files, Some(hash))?;
    Ok(dir)
}

/// Probe only: averaged matrix, raw samples and metadata.
pub fn affinity(config: &Path, out: Option<&Path>) -> CliResult<PathBuf> {
    let (cfg, bench) = load(config)?;
    let dir = run_dir(&cfg, out);
    let (mut files, _) = affinity_files(&cfg, &bench)?;
    let probe = bench.probe_run()?;
    files.push((SAMPLES_CSV.to_string(), samples_to_csv(&probe.samples)));
    persist_artifact(&dir, &files, Some(cfg.canonical_hash()))?;
    Ok(dir)
}

pub fn select(
    affinity: &Path,
    budget: usize,
    mode: SelectionMode,
    max_group_size: Option<usize>,
    out: &Path,
) -> CliResult<GroupingReport> {
    let text = std::fs::read_to_string(affinity).map_err(|e| CliError::io(affinity, e))?;
    let z = AffinityMatrix::from_csv(&text, mode.into())?;
    if budget == 0 || budget > z.n() {
        return Err(CliError::invalid("--budget", format!("must be in 1..={}", z.n())));
    }
    let filter = match max_group_size {
        Some(0) => return Err(CliError::invalid("--max-group-size", "must be >= 1")),
        Some(s) => CandidateFilter::max_size(s),
        None => CandidateFilter::all(),
    };
    let report = grouping_report(
        &z,
        budget,
        &filter,
        Provenance {
            seed: None,
            config_hash: None,
            affinity_csv_hash: Some(sha256_hex(text.as_bytes())),
        },
    )?;
    persist_artifact(out, &[(GROUPING_JSON.to_string(), to_json(&report))], None)?;
    Ok(report)
}

/// Trains every candidate group and ranks all feasible groupings by test loss.
pub fn exhaustive(config: &Path, budget: Option<usize>, top: usize, out: Option<&Path>) -> CliResult<PathBuf> {
    let (cfg, bench) = load(config)?;
    let budget = budget.unwrap_or(cfg.selection.budget);
    if budget == 0 || budget > bench.n_tasks() {
        return Err(CliError::invalid("--budget", format!("must be in 1..={}", bench.n_tasks())));
    }
    let mut ranked = bench.exhaustive_grouping_search(budget)?;
    ranked.truncate(top.max(1));
    let dir = run_dir(&cfg, out);
    let hash = cfg.canonical_hash();
    persist_artifact(
        &dir,
        &[
            (EXHAUSTIVE_JSON.to_string(), to_json(&ranked)),
            (CONFIG_JSON.to_string(), cfg.to_json()),
        ],
        Some(hash),
    )?;
    Ok(dir)
}

/// Prints the JSON report; fails with a property violation if any trial broke its claim.
pub fn verify_cmd(trials: usize, seed: u64, form: ThresholdForm) -> CliResult<()> {
    if trials == 0 {
        return Err(CliError::invalid("--trials", "must be >= 1"));
    }
    let report = verify(trials, seed, form);
    print!("{}", to_json(&report));
    if report.violations > 0 {
        return Err(CliError::PropertyViolation(report.violations));
    }
    Ok(())
}

pub fn counterexample(convention: GradientNorm, json: bool) -> String {
    let t = run_counterexample(convention);
    if json {
        return to_json(&t);
    }
    let mut s = t.render();
    s.push_str(&format!(
        "single-step ordering b < c: {}\ncombined-step inversion a+c < a+b: {}\nalternate c consistent: {}\n",
        t.single_ordering(),
        t.combined_inversion(),
        t.alternate_consistent()
    ));
    s
}

/// Checks each input's manifest, merges the reports and writes a new artifact.
pub fn report(inputs: &[PathBuf], out: &Path) -> CliResult<BenchmarkReport> {
    if inputs.is_empty() {
        return Err(CliError::invalid("--in", "need at least one run directory"));
    }
    let mut reports = Vec::with_capacity(inputs.len());
    for dir in inputs {
        let _: RunArtifact = verify_artifact(dir)?;
        reports.push(read_report(dir)?);
    }
    let merged = BenchmarkReport::merge(reports)?;
    let files: Vec<(String, String)> = merged.render()?.into_iter().map(|(n, c)| (n.to_string(), c)).collect();
    persist_artifact(out, &files, None)?;
    Ok(merged)
}
