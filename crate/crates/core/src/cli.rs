//! Experiment configs and the plan / run / cost / compare / sweep workflows
//! behind the `meshreduce` binary.
//!
//! Configs are flat TOML:
//!
//! ```toml
//! width = 16
//! height = 32
//! region = "4x2@4,2"      # WIDTHxHEIGHT@X,Y, omit for a healthy mesh
//! scheme = "RowPair_FT"   # OneD, OneD_FT, TwoColor, RowPair, RowPair_FT
//! element_count = 1024
//! element_size = 4
//! alpha = 1e-6
//! beta = 1e-9
//! seed = 7
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collective_engine::{execute, oracle_allreduce, EngineError};
use crate::cost_model::{
    account_traffic, compare_overhead, estimate_time, fit_exponent, CostError, CostParams,
    Overhead, TimeEstimate,
};
use crate::ring_builder::{phase_to_dot, BuildError, Schedule, Scheme};
use crate::routing::check_cycle_free;
use crate::topology::{
    build_mesh, classify_region, Coord, FailedRegion, Mesh, MeshConfig, TopologyError,
};

/// Payload values are drawn from `[-PAYLOAD_BOUND, PAYLOAD_BOUND]`.
pub const PAYLOAD_BOUND: i64 = 1 << 20;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    ReadConfig {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    ParseConfig { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("{scheme} rejects region {region}: {reason}")]
    RegionRule {
        scheme: Scheme,
        region: FailedRegion,
        reason: String,
    },
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("configs are not comparable: {0}")]
    Incomparable(String),
    #[error("allreduce result differs from the oracle (max deviation {0})")]
    Mismatch(i64),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::ReadConfig { .. } => "E_CONFIG_READ",
            CliError::ParseConfig { .. } => "E_CONFIG_PARSE",
            CliError::Config(_) => "E_CONFIG",
            CliError::Topology(_) => "E_MESH",
            CliError::RegionRule { .. } => "E_REGION_RULE",
            CliError::Build(_) => "E_BUILD",
            CliError::Cost(_) => "E_COST",
            CliError::Engine(_) => "E_ENGINE",
            CliError::Incomparable(_) => "E_INCOMPARABLE",
            CliError::Mismatch(_) => "E_MISMATCH",
            CliError::Write { .. } => "E_WRITE",
        }
    }

    /// 2 for a wrong allreduce result, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Mismatch(_) => 2,
            _ => 1,
        }
    }
}

/// Parses `WxH@X,Y`, e.g. `4x2@4,2`.
pub fn parse_region(s: &str) -> Result<FailedRegion, String> {
    let err = || format!("region '{s}' is not of the form WIDTHxHEIGHT@X,Y");
    let (size, origin) = s.trim().split_once('@').ok_or_else(err)?;
    let (w, h) = size.split_once(['x', 'X']).ok_or_else(err)?;
    let (x, y) = origin.split_once(',').ok_or_else(err)?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| err());
    Ok(FailedRegion::new(
        Coord::new(num(x)?, num(y)?),
        num(w)?,
        num(h)?,
    ))
}

pub fn format_region(r: &FailedRegion) -> String {
    format!("{}x{}@{},{}", r.width, r.height, r.origin.x, r.origin.y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    pub scheme: String,
    #[serde(default = "default_elements")]
    pub element_count: usize,
    #[serde(default = "default_element_size")]
    pub element_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_elements() -> usize {
    1024
}
fn default_element_size() -> usize {
    CostParams::default().element_size
}
fn default_alpha() -> f64 {
    CostParams::default().alpha
}
fn default_beta() -> f64 {
    CostParams::default().beta
}
fn default_seed() -> u64 {
    7
}

impl ExperimentConfig {
    pub fn new(width: usize, height: usize, region: Option<FailedRegion>, scheme: Scheme) -> Self {
        Self {
            width,
            height,
            region: region.as_ref().map(format_region),
            scheme: scheme.to_string(),
            element_count: default_elements(),
            element_size: default_element_size(),
            alpha: default_alpha(),
            beta: default_beta(),
            seed: default_seed(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::ReadConfig {
            path: path.to_owned(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CliError::ParseConfig {
            path: path.to_owned(),
            message: e.message().to_string(),
        })
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        self.scheme.parse().map_err(CliError::Config)
    }

    pub fn failed_region(&self) -> Result<Option<FailedRegion>, CliError> {
        self.region
            .as_deref()
            .filter(|r| !r.trim().is_empty() && r.trim() != "none")
            .map(parse_region)
            .transpose()
            .map_err(CliError::Config)
    }

    pub fn params(&self) -> Result<CostParams, CliError> {
        let p = CostParams {
            alpha: self.alpha,
            beta: self.beta,
            element_size: self.element_size,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn mesh(&self) -> Result<Mesh, CliError> {
        let regions = self.failed_region()?.into_iter().collect();
        Ok(build_mesh(
            MeshConfig::new(self.width, self.height),
            regions,
        )?)
    }

    /// Validates scheme/region compatibility, then builds the schedule.
    pub fn prepare(&self) -> Result<(Mesh, Schedule), CliError> {
        let scheme = self.scheme()?;
        self.params()?;
        let mesh = self.mesh()?;
        match (scheme.is_fault_tolerant(), mesh.failed_regions().first()) {
            (true, Some(region)) => {
                let class = classify_region(&mesh.config(), region);
                let ok = match scheme {
                    Scheme::OneDFt => class.supports_1d,
                    _ => class.supports_ft_2d,
                };
                if !ok {
                    return Err(CliError::RegionRule {
                        scheme,
                        region: *region,
                        reason: class.reason,
                    });
                }
            }
            (true, None) => {
                return Err(CliError::Config(format!("{scheme} needs a failed region")));
            }
            (false, Some(_)) => {
                return Err(CliError::Config(format!(
                    "{scheme} runs on a healthy mesh; use {} for a failed region",
                    match scheme {
                        Scheme::OneD => Scheme::OneDFt,
                        _ => Scheme::RowPairFt,
                    }
                )));
            }
            (false, None) => {}
        }
        let schedule = scheme.build(&mesh)?;
        Ok((mesh, schedule))
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_owned(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_owned(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable value");
    v.push(b'\n');
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanOutput {
    pub schedule_path: PathBuf,
    pub dot_paths: Vec<PathBuf>,
    pub summary: String,
}

/// Writes `schedule.json` plus one `phaseN.dot` per phase.
pub fn cmd_plan(config: &ExperimentConfig, out_dir: &Path) -> Result<PlanOutput, CliError> {
    let (mesh, schedule) = config.prepare()?;
    let schedule_path = out_dir.join("schedule.json");
    write_file(&schedule_path, &to_json(&schedule))?;
    let mut dot_paths = Vec::with_capacity(schedule.phases.len());
    for i in 0..schedule.phases.len() {
        let p = out_dir.join(format!("phase{i}.dot"));
        write_file(&p, phase_to_dot(&schedule, i).as_bytes())?;
        dot_paths.push(p);
    }
    let cycles = check_cycle_free(schedule.routes());
    let mut summary = format!(
        "{} on {}x{} ({} alive chips): {} phases, {} ring steps, channel dependencies {}\n",
        schedule.scheme,
        mesh.width(),
        mesh.height(),
        mesh.alive_count(),
        schedule.phases.len(),
        schedule.ring_steps(),
        if cycles.acyclic { "acyclic" } else { "CYCLIC" }
    );
    for (i, p) in schedule.phases.iter().enumerate() {
        let _ = writeln!(
            summary,
            "  phase {i}: {:?} {:?}, {} rings, {} forwarding edges, {} steps",
            p.role,
            p.dimension,
            p.rings.len(),
            p.forwarding.len(),
            p.ring_steps()
        );
    }
    Ok(PlanOutput {
        schedule_path,
        dot_paths,
        summary,
    })
}

/// Seeded integer payloads, one per alive chip in row-major order.
pub fn random_payloads(chips: usize, element_count: usize, seed: u64) -> Vec<Vec<i64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..chips)
        .map(|_| {
            (0..element_count)
                .map(|_| rng.random_range(-PAYLOAD_BOUND..=PAYLOAD_BOUND))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunOutcome {
    pub scheme: Scheme,
    pub chips: usize,
    pub element_count: usize,
    pub seed: u64,
    pub passed: bool,
    pub max_abs_deviation: i64,
    pub trace_records: usize,
    pub trace_bytes: usize,
    /// Wrapping sum over every chip's result, for quick diffing between runs.
    pub output_checksum: i64,
}

impl RunOutcome {
    pub fn verdict_line(&self) -> String {
        format!(
            "{} {} over {} chips, E={}, seed={}: max deviation {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.scheme,
            self.chips,
            self.element_count,
            self.seed,
            self.max_abs_deviation
        )
    }
}

/// Executes with seeded payloads and checks every chip against the oracle.
/// Writes `trace.jsonl` and `result.json`; a mismatch is returned as
/// [`CliError::Mismatch`] after the files are written.
pub fn cmd_run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let (mesh, schedule) = config.prepare()?;
    let payloads = random_payloads(mesh.alive_count(), config.element_count, config.seed);
    let expected = oracle_allreduce(&payloads)?;
    let (outputs, trace) = execute(&mesh, &schedule, &payloads, config.element_size)?;
    let max_abs_deviation = outputs
        .iter()
        .flat_map(|o| o.iter().zip(&expected).map(|(a, b)| (a - b).abs()))
        .max()
        .unwrap_or(0);
    let output_checksum = outputs
        .iter()
        .flatten()
        .fold(0i64, |acc, v| acc.wrapping_mul(31).wrapping_add(*v));
    let outcome = RunOutcome {
        scheme: schedule.scheme,
        chips: mesh.alive_count(),
        element_count: config.element_count,
        seed: config.seed,
        passed: max_abs_deviation == 0,
        max_abs_deviation,
        trace_records: trace.records.len(),
        trace_bytes: trace.total_bytes(),
        output_checksum,
    };

    let mut buf = Vec::new();
    trace
        .write_jsonl(&mut buf)
        .map_err(|source| CliError::Write {
            path: out_dir.join("trace.jsonl"),
            source,
        })?;
    write_file(&out_dir.join("trace.jsonl"), &buf)?;
    write_file(&out_dir.join("result.json"), &to_json(&outcome))?;
    if !outcome.passed {
        return Err(CliError::Mismatch(max_abs_deviation));
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub scheme: Scheme,
    pub report: crate::cost_model::LinkTrafficReport,
    pub estimate: TimeEstimate,
}

/// Writes `links.csv` and `cost.json`.
pub fn cmd_cost(config: &ExperimentConfig, out_dir: &Path) -> Result<CostSummary, CliError> {
    let (mesh, schedule) = config.prepare()?;
    let params = config.params()?;
    let report = account_traffic(&mesh, &schedule, config.element_count, &params);
    let estimate = estimate_time(&report, &params);
    write_file(&out_dir.join("links.csv"), report.to_csv().as_bytes())?;
    let summary = CostSummary {
        scheme: schedule.scheme,
        report,
        estimate,
    };
    write_file(&out_dir.join("cost.json"), &to_json(&summary))?;
    Ok(summary)
}

impl CostSummary {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{}: {} chips, E={}, total {:.6e} s (latency {:.6e} s, bandwidth {:.6e} s)\n",
            self.scheme,
            self.report.chips,
            self.report.element_count,
            self.estimate.total,
            self.estimate.latency,
            self.estimate.bandwidth
        );
        for (i, (p, t)) in self
            .report
            .phases
            .iter()
            .zip(&self.estimate.phases)
            .enumerate()
        {
            let _ = writeln!(
                out,
                "  phase {i}: {:?} {:?} steps={} max_link_bytes={} link_bytes={} time={:.6e} s",
                p.role, p.dimension, p.ring_steps, p.max_link_bytes, p.link_bytes, t.total
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub scheme: Scheme,
    pub chips: usize,
    pub time: f64,
    pub phase2_max_link_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: [CompareRow; 2],
    pub overhead: Overhead,
    /// Busiest second-phase link, fault-tolerant over full.
    pub phase2_congestion_ratio: f64,
}

impl CompareReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>6} {:>16} {:>12} {:>14}",
            "mesh", "chips", "est. time (s)", "rel. eff.", "per-chip eff."
        );
        let [full, ft] = &self.rows;
        let _ = writeln!(
            out,
            "{:<22} {:>6} {:>16.6e} {:>12} {:>14}",
            full.label, full.chips, full.time, "-", "-"
        );
        let _ = writeln!(
            out,
            "{:<22} {:>6} {:>16.6e} {:>12.4} {:>14.4}",
            ft.label,
            ft.chips,
            ft.time,
            self.overhead.relative_efficiency,
            self.overhead.chip_normalized
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("label,scheme,chips,time_s,relative_efficiency,chip_normalized\n");
        for (i, r) in self.rows.iter().enumerate() {
            let (re, cn) = if i == 0 {
                (1.0, 1.0)
            } else {
                (
                    self.overhead.relative_efficiency,
                    self.overhead.chip_normalized,
                )
            };
            let _ = writeln!(
                out,
                "{},{},{},{:e},{},{}",
                r.label, r.scheme, r.chips, r.time, re, cn
            );
        }
        out
    }
}

/// Estimates both configs and reports relative efficiency. The configs must
/// share mesh size, payload and cost parameters.
pub fn cmd_compare(
    full: &ExperimentConfig,
    ft: &ExperimentConfig,
    out_dir: &Path,
) -> Result<CompareReport, CliError> {
    let mut diffs = Vec::new();
    if (full.width, full.height) != (ft.width, ft.height) {
        diffs.push("mesh size");
    }
    if full.element_count != ft.element_count || full.element_size != ft.element_size {
        diffs.push("payload");
    }
    if full.alpha != ft.alpha || full.beta != ft.beta {
        diffs.push("cost parameters");
    }
    if full.scheme()?.full_counterpart() != ft.scheme()?.full_counterpart() {
        diffs.push("scheme family");
    }
    if !diffs.is_empty() {
        return Err(CliError::Incomparable(format!(
            "they differ in {}",
            diffs.join(", ")
        )));
    }
    let params = full.params()?;
    let mut rows = Vec::with_capacity(2);
    let mut estimates = Vec::with_capacity(2);
    for cfg in [full, ft] {
        let (mesh, schedule) = cfg.prepare()?;
        let report = account_traffic(&mesh, &schedule, cfg.element_count, &params);
        let est = estimate_time(&report, &params);
        let label = match mesh.failed_regions().first() {
            Some(r) => format!("{}x{} -{}", mesh.width(), mesh.height(), format_region(r)),
            None => format!("{}x{} full", mesh.width(), mesh.height()),
        };
        rows.push(CompareRow {
            label,
            scheme: schedule.scheme,
            chips: mesh.alive_count(),
            time: est.total,
            phase2_max_link_bytes: report.phases.get(1).map_or(0, |p| p.max_link_bytes),
        });
        estimates.push(est);
    }
    let overhead = compare_overhead(&estimates[0], &estimates[1])?;
    let phase2_congestion_ratio = if rows[0].phase2_max_link_bytes == 0 {
        if rows[1].phase2_max_link_bytes == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        rows[1].phase2_max_link_bytes as f64 / rows[0].phase2_max_link_bytes as f64
    };
    let ft_row = rows.pop().unwrap();
    let full_row = rows.pop().unwrap();
    let report = CompareReport {
        rows: [full_row, ft_row],
        overhead,
        phase2_congestion_ratio,
    };
    write_file(&out_dir.join("compare.csv"), report.to_csv().as_bytes())?;
    write_file(&out_dir.join("compare.json"), &to_json(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub scheme: Scheme,
    pub n: usize,
    pub ring_steps: usize,
    pub latency: f64,
    pub bandwidth: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Fitted exponent of total time against N, per scheme.
    pub exponents: Vec<(Scheme, f64)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,n,ring_steps,latency_s,bandwidth_s,total_s\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e}",
                r.scheme, r.n, r.ring_steps, r.latency, r.bandwidth, r.total
            );
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = self.to_csv();
        for (s, e) in &self.exponents {
            let _ = writeln!(out, "# {s}: total time ~ N^{e:.3}");
        }
        out
    }
}

/// Costs each healthy-mesh scheme on N x N meshes and fits time ~ N^k.
pub fn cmd_sweep(
    sizes: &[usize],
    schemes: &[Scheme],
    element_count: usize,
    params: &CostParams,
    out_dir: Option<&Path>,
) -> Result<SweepReport, CliError> {
    params.validate()?;
    let mut rows = Vec::new();
    let mut exponents = Vec::new();
    for &scheme in schemes {
        if scheme.is_fault_tolerant() {
            return Err(CliError::Config(format!(
                "sweep runs healthy meshes only, got {scheme}"
            )));
        }
        let mut samples = Vec::new();
        for &n in sizes {
            let mesh = Mesh::full(n, n)?;
            let schedule = scheme.build(&mesh)?;
            let est = estimate_time(
                &account_traffic(&mesh, &schedule, element_count, params),
                params,
            );
            samples.push((n as f64, est.total));
            rows.push(SweepRow {
                scheme,
                n,
                ring_steps: schedule.ring_steps(),
                latency: est.latency,
                bandwidth: est.bandwidth,
                total: est.total,
            });
        }
        exponents.push((scheme, fit_exponent(&samples)?));
    }
    let report = SweepReport { rows, exponents };
    if let Some(dir) = out_dir {
        write_file(&dir.join("sweep.csv"), report.to_csv().as_bytes())?;
    }
    Ok(report)
}
