//! Command-line frontend.
//!
//! Settings come from built-in defaults, then an optional TOML file
//! (`--config`), then flags. Every command writes its tables plus a
//! `manifest_<command>.json` into the output directory; if a command fails,
//! the files it already wrote are removed.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    evacuation_classify, income_mismatch, quality_table, sensitivity_curve, zonal_consistency, IncomeCategory,
    SensitivityInputs, DEFAULT_EVACUATION_THRESHOLD_M, DEFAULT_THRESHOLDS,
};
use crate::error::{Error, Result};
use crate::hda::{read_homes_csv, run_all, write_homes_csv, Algorithm, HdaConfig, HomeLocation};
use crate::ingest::{filter_trace, parse_traces, CsvFormat, FilterConfig, NightWindow, Trace};
use crate::metrics::{build_evidence, evaluate, uniform_random_baseline, MetricReport, MetricSet, MetricSettings};
use crate::spatial::{LandUseMap, LandUseSchema, ZoneMap};
use crate::synth::{generate, population, write_traces_csv, write_truth_csv, CityConfig, PopulationConfig, SynthPeriod, SyntheticCity};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct SynthSettings {
    pub period: SynthPeriod,
    pub population: PopulationConfig,
    pub city: CityConfig,
}


/// Everything a run depends on. `threads` is deliberately left out of the
/// echoed configuration: results do not depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub delimiter: char,
    pub has_header: Option<bool>,
    pub night_window: String,
    pub utc_offset_minutes: i32,
    pub filter: FilterConfig,
    pub hda: HdaConfig,
    pub algorithms: Vec<Algorithm>,
    pub metrics: MetricSet,
    pub metric_settings: MetricSettings,
    pub baseline_samples: usize,
    pub thresholds: Vec<f64>,
    pub land_use: Option<PathBuf>,
    pub land_use_schema: LandUseSchema,
    pub zones: Vec<PathBuf>,
    pub evacuation_threshold_m: f64,
    pub homes_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            delimiter: ',',
            has_header: None,
            night_window: "20:00-05:00".into(),
            utc_offset_minutes: 0,
            filter: FilterConfig::default(),
            hda: HdaConfig::default(),
            algorithms: Algorithm::ALL.to_vec(),
            metrics: MetricSet::default(),
            metric_settings: MetricSettings::default(),
            baseline_samples: 10_000,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            land_use: None,
            land_use_schema: LandUseSchema::default(),
            zones: Vec::new(),
            evacuation_threshold_m: DEFAULT_EVACUATION_THRESHOLD_M,
            homes_dir: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            threads: None,
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn night(&self) -> Result<NightWindow> {
        NightWindow::parse(&self.night_window, self.utc_offset_minutes)
    }

    /// Checks values and aligns the detector's night window with the
    /// top-level one.
    pub fn finalize(mut self) -> Result<Self> {
        self.hda.night = self.night()?;
        self.hda.validate()?;
        if !self.delimiter.is_ascii() {
            return Err(Error::arg("delimiter must be a single ASCII character"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::arg("no algorithm selected"));
        }
        self.algorithms.sort();
        self.algorithms.dedup();
        let w = self.metric_settings.weights;
        crate::metrics::BufferWeights::new(w.r_max_m(), w.step_m())?;
        if !(self.metric_settings.delta_max_m > 0.0) {
            return Err(Error::arg("delta_max must be positive"));
        }
        if !(self.evacuation_threshold_m >= 0.0) {
            return Err(Error::arg("evacuation threshold must be non-negative"));
        }
        if self.threads == Some(0) {
            return Err(Error::arg("--threads must be positive"));
        }
        Ok(self)
    }

    /// SHA-256 of the echoed configuration.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    fn csv_format(&self) -> CsvFormat {
        CsvFormat {
            delimiter: self.delimiter as u8,
            has_header: self.has_header,
        }
    }

    fn homes_dir(&self) -> &Path {
        self.homes_dir.as_deref().unwrap_or(&self.out_dir)
    }
}

#[derive(Debug, Parser)]
#[command(name = "homedetect", version, about = "Home location detection from GPS traces")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Local night window, HH:MM-HH:MM.
    #[arg(long, global = true)]
    pub night_window: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub utc_offset_minutes: Option<i32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect homes with the selected algorithms.
    Detect(DetectArgs),
    /// Score home tables with the quality metrics.
    Evaluate(EvaluateArgs),
    /// Recompute the metrics on user subsets of increasing data quality.
    Sensitivity(SensitivityArgs),
    /// Downstream applications on pairs of home tables.
    #[command(subcommand)]
    Apps(AppsCommand),
    /// Generate a synthetic city, agents and traces.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Trace CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Comma-separated subset of a1..a5.
    #[arg(long)]
    pub algorithms: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory holding homes_<algorithm>.csv (defaults to the output directory).
    #[arg(long)]
    pub homes_dir: Option<PathBuf>,
    #[arg(long)]
    pub land_use: Option<PathBuf>,
    /// Comma-separated subset of m1,m2,m3.
    #[arg(long)]
    pub metrics: Option<String>,
    #[arg(long)]
    pub algorithms: Option<String>,
    #[arg(long)]
    pub baseline_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub eval: EvaluateArgs,
    /// Comma-separated ascending quality thresholds (pings per night).
    #[arg(long)]
    pub thresholds: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum AppsCommand {
    /// Flag users whose home moved more than the threshold.
    Evac(EvacArgs),
    /// Share of users whose two homes share a zone.
    Consistency(PairArgs),
    /// Income-band transitions between two home tables.
    Income(PairArgs),
}

#[derive(Debug, Args)]
pub struct EvacArgs {
    /// Pre-event home table.
    #[arg(long)]
    pub pre: PathBuf,
    /// Post-event home table.
    #[arg(long)]
    pub post: PathBuf,
    #[arg(long)]
    pub zones: Option<PathBuf>,
    #[arg(long)]
    pub threshold_m: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub table_a: PathBuf,
    #[arg(long)]
    pub table_b: PathBuf,
    /// Zone file; repeat for several aggregation levels.
    #[arg(long)]
    pub zones: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub nights: Option<u32>,
    /// Persona weights, e.g. `regular=0.8,excursion=0.2`.
    #[arg(long)]
    pub personas: Option<String>,
    #[arg(long)]
    pub sigma_m: Option<f64>,
    #[arg(long)]
    pub p_home: Option<f64>,
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| Error::arg(format!("bad threshold `{p}`"))))
        .collect()
}

fn parse_mix(s: &str) -> Result<BTreeMap<crate::synth::Persona, f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|item| {
            let (name, w) = item.split_once('=').unwrap_or((item, "1"));
            let w: f64 = w.trim().parse().map_err(|_| Error::arg(format!("bad persona weight in `{item}`")))?;
            Ok((name.parse()?, w))
        })
        .collect()
}

impl EvaluateArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(p) = &self.input {
            cfg.input = Some(p.clone());
        }
        if let Some(p) = &self.homes_dir {
            cfg.homes_dir = Some(p.clone());
        }
        if let Some(p) = &self.land_use {
            cfg.land_use = Some(p.clone());
        }
        if let Some(m) = &self.metrics {
            cfg.metrics = m.parse()?;
        }
        if let Some(a) = &self.algorithms {
            cfg.algorithms = parse_list(a)?;
        }
        if let Some(n) = self.baseline_samples {
            cfg.baseline_samples = n;
        }
        Ok(())
    }
}

impl Cli {
    /// Effective configuration: defaults, then the file, then flags.
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = &self.night_window {
            cfg.night_window = w.clone();
        }
        if let Some(o) = self.utc_offset_minutes {
            cfg.utc_offset_minutes = o;
        }
        match &self.command {
            Command::Detect(a) => {
                if let Some(p) = &a.input {
                    cfg.input = Some(p.clone());
                }
                if let Some(list) = &a.algorithms {
                    cfg.algorithms = parse_list(list)?;
                }
            }
            Command::Evaluate(a) => a.apply(&mut cfg)?,
            Command::Sensitivity(a) => {
                a.eval.apply(&mut cfg)?;
                if let Some(t) = &a.thresholds {
                    cfg.thresholds = parse_thresholds(t)?;
                }
            }
            Command::Apps(AppsCommand::Evac(a)) => {
                if let Some(z) = &a.zones {
                    cfg.zones = vec![z.clone()];
                }
                if let Some(t) = a.threshold_m {
                    cfg.evacuation_threshold_m = t;
                }
            }
            Command::Apps(AppsCommand::Consistency(a) | AppsCommand::Income(a)) => {
                if !a.zones.is_empty() {
                    cfg.zones = a.zones.clone();
                }
            }
            Command::Synth(a) => {
                let pop = &mut cfg.synth.population;
                if let Some(n) = a.agents {
                    pop.agents = n;
                }
                if let Some(m) = &a.personas {
                    pop.mix = parse_mix(m)?;
                }
                if let Some(s) = a.sigma_m {
                    pop.sigma_m = s;
                }
                if let Some(p) = a.p_home {
                    pop.p_home = p;
                }
                if let Some(n) = a.nights {
                    cfg.synth.period.nights = n;
                }
            }
        }
        cfg.finalize()
    }
}

/// Files written by one command, removed again if the command fails.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

fn manifest(cfg: &RunConfig, command: &str, inputs: &[&Path], outputs: &Outputs, stats: Value) -> Result<Vec<u8>> {
    let doc = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_sha256": cfg.hash()?,
        "config": cfg,
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "outputs": outputs.names(),
        "stats": stats,
    });
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    Ok(bytes)
}

struct LoadedTraces {
    traces: BTreeMap<String, Trace>,
    rows: usize,
    malformed_rows: usize,
    pings: usize,
    pings_kept: usize,
}

fn load_traces(cfg: &RunConfig) -> Result<(PathBuf, LoadedTraces)> {
    let path = cfg.input.clone().ok_or_else(|| Error::arg("no trace input given (--input)"))?;
    let parsed = parse_traces(&path, &cfg.csv_format())?;
    let pings = parsed.ping_count();
    let traces: BTreeMap<String, Trace> = parsed
        .traces
        .iter()
        .map(|(id, t)| (id.clone(), filter_trace(t, &cfg.filter)))
        .collect();
    let pings_kept = traces.values().map(Trace::len).sum();
    log::info!("{} rows, {} malformed, {pings_kept} of {pings} pings kept", parsed.rows, parsed.malformed_rows);
    Ok((
        path,
        LoadedTraces {
            traces,
            rows: parsed.rows,
            malformed_rows: parsed.malformed_rows,
            pings,
            pings_kept,
        },
    ))
}

fn homes_file(alg: Algorithm) -> String {
    format!("homes_{alg}.csv")
}

fn read_homes(path: &Path) -> Result<Vec<HomeLocation>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_homes_csv(f)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)?;
    for r in rows {
        wtr.write_record(&r)?;
    }
    wtr.into_inner().map_err(|e| Error::Format(format!("buffering CSV: {e}")))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_detect(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let (input, data) = load_traces(cfg)?;
    let run = run_all(&data.traces, &cfg.hda, &cfg.algorithms)?;
    for (alg, table) in &run.tables {
        let mut buf = Vec::new();
        write_homes_csv(&mut buf, table)?;
        out.write(&homes_file(*alg), &buf)?;
    }
    let stats = json!({
        "rows": data.rows,
        "malformed_rows": data.malformed_rows,
        "pings": data.pings,
        "pings_after_filter": data.pings_kept,
        "users": run.users,
        "common_users": run.common_users.len(),
        "homes": run.tables.iter().map(|(a, t)| (a.to_string(), t.len())).collect::<BTreeMap<_, _>>(),
        "no_home": run.no_home.iter().map(|(a, n)| (a.to_string(), *n)).collect::<BTreeMap<_, _>>(),
    });
    let m = manifest(cfg, "detect", &[&input], out, stats)?;
    out.write("manifest_detect.json", &m)
}

struct EvalInputs {
    input: PathBuf,
    tables: BTreeMap<Algorithm, Vec<HomeLocation>>,
    common: Option<BTreeSet<String>>,
    evidence: BTreeMap<String, crate::metrics::UserEvidence>,
    land_use: Option<LandUseMap>,
    home_files: Vec<PathBuf>,
}

/// Home tables restricted to the common user set, or left whole (with a
/// warning) when no user is shared by all of them.
fn load_eval_inputs(cfg: &RunConfig) -> Result<EvalInputs> {
    let (input, data) = load_traces(cfg)?;
    let mut tables = BTreeMap::new();
    let mut home_files = Vec::new();
    for &alg in &cfg.algorithms {
        let path = cfg.homes_dir().join(homes_file(alg));
        if !path.exists() {
            log::warn!("no home table for {alg} at {}", path.display());
            continue;
        }
        tables.insert(alg, read_homes(&path)?);
        home_files.push(path);
    }
    if tables.is_empty() {
        return Err(Error::arg(format!("no home tables found in {}", cfg.homes_dir().display())));
    }
    let mut common: Option<BTreeSet<String>> = None;
    for t in tables.values() {
        let ids: BTreeSet<String> = t.iter().map(|h| h.device_id.clone()).collect();
        common = Some(match common {
            None => ids,
            Some(c) => c.intersection(&ids).cloned().collect(),
        });
    }
    let common = common.filter(|c| !c.is_empty());
    match &common {
        Some(c) => {
            for t in tables.values_mut() {
                t.retain(|h| c.contains(&h.device_id));
            }
        }
        None => log::warn!("common user set is empty; scoring each algorithm on its own users"),
    }

    let land_use = match (&cfg.land_use, cfg.metrics.m1) {
        (Some(p), true) => Some(LandUseMap::load(p, &cfg.land_use_schema)?),
        (None, true) => return Err(Error::arg("M1 requires a land-use file (--land-use)")),
        _ => None,
    };
    let evidence = build_evidence(&data.traces, &cfg.hda.night, &cfg.hda.stay);
    Ok(EvalInputs {
        input,
        tables,
        common,
        evidence,
        land_use,
        home_files,
    })
}

fn report_json(r: &MetricReport) -> Value {
    json!({
        "algorithm": r.algorithm,
        "n_users": r.n_users,
        "m1": r.m1,
        "m2": r.m2,
        "m3": r.m3,
        "mean": r.mean,
        "rho": r.rho,
        "m2_excluded": r.m2_excluded,
        "m3_excluded": r.m3_excluded,
        "missing_evidence": r.missing_evidence,
        "m2_cdf": r.m2_cdf,
        "m3_cdf": r.m3_cdf,
    })
}

fn cmd_evaluate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let inp = load_eval_inputs(cfg)?;
    let mut reports = Vec::new();
    for (&alg, homes) in &inp.tables {
        reports.push(evaluate(alg, homes, &inp.evidence, inp.land_use.as_ref(), cfg.metrics, &cfg.metric_settings)?);
    }
    let baseline = match &inp.land_use {
        Some(lu) if cfg.baseline_samples > 0 => Some(uniform_random_baseline(
            lu,
            &cfg.metric_settings.weights,
            cfg.baseline_samples,
            cfg.seed,
        )?),
        _ => None,
    };

    let doc = json!({
        "common_users": inp.common.as_ref().map_or(0, BTreeSet::len),
        "common_set_empty": inp.common.is_none(),
        "baseline_m1": baseline,
        "algorithms": reports.iter().map(report_json).collect::<Vec<_>>(),
    });
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    out.write("metrics.json", &bytes)?;

    let radar = csv_bytes(
        &["algorithm", "m1", "m2", "m3", "mean", "n_users"],
        reports.iter().map(|r| {
            vec![
                r.algorithm.to_string(),
                opt(r.m1),
                opt(r.m2),
                opt(r.m3),
                opt(r.mean),
                r.n_users.to_string(),
            ]
        }),
    )?;
    out.write("radar.csv", &radar)?;

    if cfg.metrics.m1 {
        let rho = csv_bytes(
            &["algorithm", "r_m", "rho"],
            reports
                .iter()
                .flat_map(|r| r.rho.iter().map(move |(m, v)| vec![r.algorithm.to_string(), m.to_string(), v.to_string()])),
        )?;
        out.write("rho.csv", &rho)?;
    }

    let cdf = csv_bytes(
        &["algorithm", "metric", "quantile", "value"],
        reports.iter().flat_map(|r| {
            let a = r.algorithm.to_string();
            let m2 = r.m2_cdf.iter().map({
                let a = a.clone();
                move |(q, v)| vec![a.clone(), "m2".into(), q.to_string(), v.to_string()]
            });
            let m3 = r.m3_cdf.iter().map(move |(q, v)| vec![a.clone(), "m3".into(), q.to_string(), v.to_string()]);
            m2.chain(m3).collect::<Vec<_>>()
        }),
    )?;
    out.write("cdf.csv", &cdf)?;

    let samples = csv_bytes(
        &["algorithm", "device_id", "delta_m", "outside_fraction", "in_residential_at_m"],
        reports.iter().flat_map(|r| {
            r.samples.iter().map(move |s| {
                vec![
                    r.algorithm.to_string(),
                    s.device_id.clone(),
                    opt(s.delta_m),
                    opt(s.outside_fraction),
                    s.in_residential_at.map(|v| v.to_string()).unwrap_or_default(),
                ]
            })
        }),
    )?;
    out.write("metric_samples.csv", &samples)?;

    let mut inputs: Vec<&Path> = vec![&inp.input];
    inputs.extend(inp.home_files.iter().map(PathBuf::as_path));
    if let Some(p) = &cfg.land_use {
        inputs.push(p);
    }
    let stats = json!({ "common_users": inp.common.as_ref().map_or(0, BTreeSet::len), "baseline_m1": baseline });
    let m = manifest(cfg, "evaluate", &inputs, out, stats)?;
    out.write("manifest_evaluate.json", &m)
}

fn cmd_sensitivity(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let inp = load_eval_inputs(cfg)?;
    let quality = quality_table(&inp.evidence)?;
    let sens = SensitivityInputs {
        tables: &inp.tables,
        evidence: &inp.evidence,
        quality: &quality,
        land_use: inp.land_use.as_ref(),
        metrics: cfg.metrics,
        settings: cfg.metric_settings,
    };
    let rows = sensitivity_curve(&sens, &cfg.thresholds)?;
    let table = csv_bytes(
        &["algorithm", "threshold", "m1", "m2", "m3", "mean", "n_users", "cdf_below"],
        rows.iter().map(|r| {
            let rep = r.report.as_ref();
            vec![
                r.algorithm.to_string(),
                r.threshold.to_string(),
                opt(rep.and_then(|x| x.m1)),
                opt(rep.and_then(|x| x.m2)),
                opt(rep.and_then(|x| x.m3)),
                opt(rep.and_then(|x| x.mean)),
                r.n_users.to_string(),
                r.cdf_below.to_string(),
            ]
        }),
    )?;
    out.write("sensitivity.csv", &table)?;
    let absent = rows.iter().filter(|r| r.is_absent()).count();
    let mut inputs: Vec<&Path> = vec![&inp.input];
    inputs.extend(inp.home_files.iter().map(PathBuf::as_path));
    let m = manifest(cfg, "sensitivity", &inputs, out, json!({ "rows": rows.len(), "absent_rows": absent }))?;
    out.write("manifest_sensitivity.json", &m)
}

fn cmd_evac(cfg: &RunConfig, args: &EvacArgs, out: &mut Outputs) -> Result<()> {
    let pre = read_homes(&args.pre)?;
    let post = read_homes(&args.post)?;
    let zones = cfg.zones.first().map(|p| ZoneMap::load(p)).transpose()?;
    let r = evacuation_classify(&pre, &post, zones.as_ref(), cfg.evacuation_threshold_m)?;
    let users = csv_bytes(
        &["device_id", "distance_m", "evacuated", "zone_id"],
        r.users.iter().map(|u| {
            vec![
                u.device_id.clone(),
                u.distance_m.to_string(),
                u.evacuated.to_string(),
                u.zone_id.clone().unwrap_or_default(),
            ]
        }),
    )?;
    out.write("evacuation_users.csv", &users)?;
    let per_zone = csv_bytes(
        &["zone_id", "users", "evacuated", "fraction"],
        r.zones
            .iter()
            .map(|z| vec![z.zone_id.clone(), z.users.to_string(), z.evacuated.to_string(), z.fraction.to_string()]),
    )?;
    out.write("evacuation_zones.csv", &per_zone)?;
    let mut inputs: Vec<&Path> = vec![&args.pre, &args.post];
    inputs.extend(cfg.zones.first().map(PathBuf::as_path));
    let stats = json!({
        "threshold_m": r.threshold_m,
        "users": r.users.len(),
        "excluded": r.excluded,
        "outside_zones": r.outside_zones,
        "evacuated_fraction": r.evacuated_fraction,
    });
    let m = manifest(cfg, "apps-evac", &inputs, out, stats)?;
    out.write("manifest_apps_evac.json", &m)
}

fn cmd_consistency(cfg: &RunConfig, args: &PairArgs, out: &mut Outputs) -> Result<()> {
    if cfg.zones.is_empty() {
        return Err(Error::arg("zonal consistency needs at least one zone file (--zones)"));
    }
    let a = read_homes(&args.table_a)?;
    let b = read_homes(&args.table_b)?;
    let mut rows = Vec::new();
    for path in &cfg.zones {
        let z = ZoneMap::load(path)?;
        let r = zonal_consistency(&a, &b, &z)?;
        rows.push(vec![
            path.display().to_string(),
            r.compared.to_string(),
            r.consistent.to_string(),
            opt(r.fraction),
            r.excluded_unpaired.to_string(),
            r.excluded_outside.to_string(),
        ]);
    }
    let n = rows.len();
    let table = csv_bytes(
        &["zones", "compared", "consistent", "fraction", "excluded_unpaired", "excluded_outside"],
        rows,
    )?;
    out.write("consistency.csv", &table)?;
    let mut inputs: Vec<&Path> = vec![&args.table_a, &args.table_b];
    inputs.extend(cfg.zones.iter().map(PathBuf::as_path));
    let m = manifest(cfg, "apps-consistency", &inputs, out, json!({ "levels": n }))?;
    out.write("manifest_apps_consistency.json", &m)
}

fn cmd_income(cfg: &RunConfig, args: &PairArgs, out: &mut Outputs) -> Result<()> {
    let [zones_path] = cfg.zones.as_slice() else {
        return Err(Error::arg("income comparison needs exactly one zone file (--zones)"));
    };
    let a = read_homes(&args.table_a)?;
    let b = read_homes(&args.table_b)?;
    let z = ZoneMap::load(zones_path)?;
    let t = income_mismatch(&a, &b, &z)?;
    let table = csv_bytes(
        &["from", "to", "count"],
        IncomeCategory::ALL.iter().flat_map(|&from| {
            IncomeCategory::ALL
                .iter()
                .map(move |&to| vec![from.to_string(), to.to_string(), t.matrix[from.index()][to.index()].to_string()])
        }),
    )?;
    out.write("income_transitions.csv", &table)?;
    let stats = json!({
        "compared": t.compared,
        "off_diagonal_pct": t.off_diagonal_pct,
        "excluded_unpaired": t.excluded_unpaired,
        "excluded_outside": t.excluded_outside,
        "excluded_no_income": t.excluded_no_income,
    });
    let m = manifest(cfg, "apps-income", &[&args.table_a, &args.table_b, zones_path], out, stats)?;
    out.write("manifest_apps_income.json", &m)
}

fn cmd_synth(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let city = SyntheticCity::new(cfg.synth.city, cfg.seed)?;
    let specs = population(&city, &cfg.synth.population, cfg.seed)?;
    let gen = generate(&specs, &cfg.synth.period, &cfg.hda.night, cfg.seed)?;
    let mut buf = Vec::new();
    write_traces_csv(&mut buf, &gen.traces)?;
    out.write("traces.csv", &buf)?;
    buf.clear();
    write_truth_csv(&mut buf, &gen.truth)?;
    out.write("truth.csv", &buf)?;
    let personas = csv_bytes(
        &["device_id", "persona"],
        specs.iter().map(|s| vec![s.device_id.clone(), s.persona.to_string()]),
    )?;
    out.write("personas.csv", &personas)?;
    out.write("land_use.geojson", city.land_use_geojson().as_bytes())?;
    out.write("zones.geojson", city.zones_geojson().as_bytes())?;
    let stats = json!({ "agents": specs.len(), "pings": gen.ping_count() });
    let m = manifest(cfg, "synth", &[], out, stats)?;
    out.write("manifest_synth.json", &m)
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::new(&cfg.out_dir)?;
    let result = match &cli.command {
        Command::Detect(_) => cmd_detect(cfg, &mut out),
        Command::Evaluate(_) => cmd_evaluate(cfg, &mut out),
        Command::Sensitivity(_) => cmd_sensitivity(cfg, &mut out),
        Command::Apps(AppsCommand::Evac(a)) => cmd_evac(cfg, a, &mut out),
        Command::Apps(AppsCommand::Consistency(a)) => cmd_consistency(cfg, a, &mut out),
        Command::Apps(AppsCommand::Income(a)) => cmd_income(cfg, a, &mut out),
        Command::Synth(_) => cmd_synth(cfg, &mut out),
    };
    if result.is_err() {
        out.discard();
    }
    result
}

/// Exit code for a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => EXIT_USAGE,
        Error::FrameDomain { .. }
        | Error::Io { .. }
        | Error::Format(_)
        | Error::Metric(_)
        | Error::Csv(_)
        | Error::Json(_) => EXIT_INPUT,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cfg = match cli.config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cfg.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_INTERNAL;
        }
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| pool.install(|| dispatch(&cli, &cfg))));
    match outcome {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            EXIT_INTERNAL
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_and_flags_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "night_window = \"22:00-06:00\"\nseed = 4\nalgorithms = [\"a4\", \"a2\"]\n[hda]\ngrid_cell_m = 25.0\n",
        )
        .unwrap();
        let cli = Cli::try_parse_from(["homedetect", "--config", path.to_str().unwrap(), "--seed", "9", "detect"]).unwrap();
        let cfg = cli.config().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.algorithms, vec![Algorithm::A2, Algorithm::A4]);
        assert_eq!(cfg.hda.grid_cell_m, 25.0);
        assert_eq!(cfg.hda.night.start_minute(), 22 * 60);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(RunConfig::from_toml("nonsense = 1").is_err());
    }

    #[test]
    fn hash_ignores_threads() {
        let a = RunConfig::default();
        let b = RunConfig { threads: Some(8), ..RunConfig::default() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn flag_parsing() {
        assert!(parse_list::<Algorithm>("a1,a9").is_err());
        assert_eq!(parse_thresholds("0, 1,2.5").unwrap(), vec![0.0, 1.0, 2.5]);
        let mix = parse_mix("regular=0.8,excursion").unwrap();
        assert_eq!(mix.len(), 2);
    }
}
