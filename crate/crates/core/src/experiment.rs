//! JSON experiment configs, seed sweeps and the artifacts each command emits.
//!
//! Every command writes into `<out>/<command>/` and finishes with a
//! `manifest.json` holding the resolved config, its SHA-256, the seed list and
//! a checksum per artifact. CSV floats use Rust's shortest round-trip
//! formatting, so reruns are byte-identical.
//!
//! CSV schemas (column order is fixed):
//!
//! | file                | columns                                                             |
//! |---------------------|---------------------------------------------------------------------|
//! | `samples.csv`       | `seed, sample, x0 .. x{d-1}, mode, label`                           |
//! | `comparison.csv`    | `strategy, counterfactual_mass_mean, counterfactual_mass_stderr, seeds` |
//! | `delta_norms.csv`   | `t, value`                                                          |
//! | `suppression_proj.csv` | `t, value`                                                       |
//! | `eigen.csv`         | `t, value, angle, converged_fraction`                               |
//! | `bias_gap.csv`      | `t, value`                                                          |
//! | `schedule.csv`      | `t, beta, alpha_bar`                                                |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    analyze_trajectory, check_partition, trajectory_bias_probe, EarlyLate, LabelSet, Series,
    SpectralOptions,
};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, Strategy};
use crate::oracle::{Condition, Denoiser, GmmWorld, MixtureOracle};
use crate::par::{
    CorpusStore, HttpTransport, LlmEndpointConfig, MockTransport, ParError, ParTemplate, Pipeline,
    Transport, ValidationOptions,
};
use crate::sampler::{run_dual_branch, run_single_branch, SamplerOptions, StepRecord, Trajectory};
use crate::schedule::NoiseSchedule;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    /// Component subset; `null` is the unconditional model.
    pub components: Option<Vec<usize>>,
    /// Id of a generated counterfactual record this condition stands for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Explicit seeds. Mutually exclusive with `seed_count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Seeds `seed_base .. seed_base + seed_count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_count: Option<usize>,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default = "yes")]
    pub deterministic: bool,
    /// Samples drawn per seed.
    #[serde(default = "one")]
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Emit `trajectories.jsonl` from `sample`.
    #[serde(default = "yes")]
    pub trajectories: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            trajectories: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    /// Fraction of steps in each of the early and late windows.
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    #[serde(default)]
    pub spectral: SpectralOptions,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self {
            window_fraction: default_window(),
            spectral: SpectralOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParSpec {
    pub endpoint: LlmEndpointConfig,
    /// Relative paths resolve against the output directory.
    #[serde(default = "default_corpus")]
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<ParTemplate>,
    #[serde(default)]
    pub validation: ValidationOptions,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_window() -> f64 {
    0.1
}

fn default_corpus() -> PathBuf {
    PathBuf::from("corpus.jsonl")
}

fn default_counterfactual_label() -> String {
    "counterfactual".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: GmmWorld,
    pub conditions: BTreeMap<String, ConditionSpec>,
    /// Condition name used as `p+`.
    pub positive: String,
    /// Condition name used as `p-`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    pub run: RunSpec,
    /// Partition of components used for mode mass.
    #[serde(default)]
    pub labels: Vec<LabelSet>,
    #[serde(default = "default_counterfactual_label")]
    pub counterfactual_label: String,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub par: Option<ParSpec>,
}

impl ExperimentConfig {
    /// The bundled two-well experiment: an underspecified prompt covering
    /// both wells, steered away from the counterfactual well.
    pub fn default_two_well() -> Self {
        let cond = |c: Option<Vec<usize>>| ConditionSpec {
            components: c,
            record: None,
        };
        let conditions = BTreeMap::from([
            ("null".to_string(), cond(None)),
            ("plausible".to_string(), cond(Some(vec![0]))),
            ("counterfactual".to_string(), cond(Some(vec![1]))),
            ("user_prompt".to_string(), cond(Some(vec![0, 1]))),
        ]);
        Self {
            world: GmmWorld::two_well(),
            conditions,
            positive: "user_prompt".into(),
            negative: Some("counterfactual".into()),
            schedule: ScheduleSpec {
                num_steps: 50,
                beta_start: 0.002,
                beta_end: 0.4,
            },
            guidance: GuidanceConfig::default(),
            run: RunSpec {
                seeds: None,
                seed_count: Some(50),
                seed_base: 0,
                deterministic: true,
                sample_count: 8,
            },
            labels: vec![
                LabelSet::new("plausible", [0]),
                LabelSet::new("counterfactual", [1]),
            ],
            counterfactual_label: default_counterfactual_label(),
            output: OutputSpec::default(),
            diagnostics: DiagnosticsSpec::default(),
            par: Some(ParSpec {
                endpoint: LlmEndpointConfig::default(),
                corpus: default_corpus(),
                template: None,
                validation: ValidationOptions::default(),
            }),
        }
    }

    /// Parse JSON; errors carry the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." {
                "<root>".to_string()
            } else {
                path
            };
            Error::config(field, e.into_inner().to_string())
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    fn condition(&self, field: &str, name: &str) -> Result<Condition> {
        let spec = self
            .conditions
            .get(name)
            .ok_or_else(|| Error::config(field, format!("unknown condition `{name}`")))?;
        let Some(components) = &spec.components else {
            return Ok(Condition::Null);
        };
        let k = self.world.num_components();
        let at = format!("conditions.{name}.components");
        if let Some(bad) = components.iter().find(|&&c| c >= k) {
            return Err(Error::config(
                at,
                format!("component {bad} out of range, world has {k}"),
            ));
        }
        Condition::subset(components.iter().copied()).map_err(|e| Error::config(at, e.to_string()))
    }

    /// Seed list after applying the run spec; duplicates dropped, order kept.
    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds = match (&self.run.seeds, self.run.seed_count) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "run",
                    "give either `seeds` or `seed_count`, not both",
                ))
            }
            (None, None) => return Err(Error::config("run", "missing `seeds` or `seed_count`")),
            (Some(list), None) => {
                let mut seen = std::collections::BTreeSet::new();
                list.iter().copied().filter(|s| seen.insert(*s)).collect()
            }
            (None, Some(n)) => (0..n as u64)
                .map(|i| self.run.seed_base.wrapping_add(i))
                .collect::<Vec<_>>(),
        };
        if seeds.is_empty() {
            return Err(Error::config("run.seeds", "seed list is empty"));
        }
        Ok(seeds)
    }
}

/// Command-line adjustments applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed_base: Option<u64>,
}

/// A validated config with its conditions and seeds resolved.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub oracle: MixtureOracle,
    pub p_plus: Condition,
    pub p_neg: Option<Condition>,
    pub seeds: Vec<u64>,
    jobs: usize,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("positive", &self.config.positive)
            .field("negative", &self.config.negative)
            .field("seeds", &self.seeds.len())
            .finish()
    }
}

impl Experiment {
    pub fn prepare(mut config: ExperimentConfig, overrides: &Overrides) -> Result<Self> {
        if let Some(out) = &overrides.out {
            config.output.dir = out.clone();
        }
        if let Some(base) = overrides.seed_base {
            if config.run.seeds.is_some() {
                return Err(Error::config(
                    "run.seed_base",
                    "a seed base only applies with `seed_count`, the config lists seeds explicitly",
                ));
            }
            config.run.seed_base = base;
        }
        let jobs = overrides.jobs.unwrap_or_else(rayon::current_num_threads);
        if jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }

        let s = &config.schedule;
        let schedule = NoiseSchedule::linear(s.num_steps, s.beta_start, s.beta_end)
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        config
            .guidance
            .validate()
            .map_err(|e| Error::config("guidance", e.to_string()))?;
        if config.run.sample_count == 0 {
            return Err(Error::config("run.sample_count", "must be at least 1"));
        }
        let seeds = config.seeds()?;
        let p_plus = config.condition("positive", &config.positive)?;
        let p_neg = config
            .negative
            .as_deref()
            .map(|n| config.condition("negative", n))
            .transpose()?;
        if config.guidance.strategy.needs_negative() && p_neg.is_none() {
            return Err(Error::config(
                "negative",
                format!(
                    "strategy {} needs a negative condition",
                    config.guidance.strategy
                ),
            ));
        }
        for name in config.conditions.keys() {
            config.condition(&format!("conditions.{name}"), name)?;
        }
        if !config.labels.is_empty() {
            check_partition(&config.labels, config.world.num_components())
                .map_err(|e| Error::config("labels", e.to_string()))?;
            if !config
                .labels
                .iter()
                .any(|l| l.name == config.counterfactual_label)
            {
                return Err(Error::config(
                    "counterfactual_label",
                    format!("no label set named `{}`", config.counterfactual_label),
                ));
            }
        }
        let d = &config.diagnostics;
        if !(d.window_fraction > 0.0 && d.window_fraction <= 0.5) {
            return Err(Error::config(
                "diagnostics.window_fraction",
                format!("must lie in (0, 0.5], got {}", d.window_fraction),
            ));
        }
        check_bound_records(&config)?;

        std::fs::create_dir_all(&config.output.dir)
            .map_err(|e| Error::io(&config.output.dir, e))?;
        let oracle = MixtureOracle::new(config.world.clone(), schedule);
        Ok(Self {
            config,
            oracle,
            p_plus,
            p_neg,
            seeds,
            jobs,
        })
    }

    pub fn from_path(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        Self::prepare(ExperimentConfig::from_path(path)?, overrides)
    }

    pub fn jobs(&self) -> usize {
        self.jobs
    }

    pub fn sampler_options(&self) -> SamplerOptions {
        SamplerOptions {
            deterministic: self.config.run.deterministic,
        }
    }

    /// `(seed, sample index, run seed)` for every sample, seed-major.
    pub fn runs(&self) -> Vec<(u64, usize, u64)> {
        self.seeds
            .iter()
            .flat_map(|&s| {
                (0..self.config.run.sample_count).map(move |j| (s, j, sample_seed(s, j)))
            })
            .collect()
    }

    fn command_dir(&self, command: &str) -> Result<PathBuf> {
        let dir = self.config.output.dir.join(command);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))
    }

    fn negative(&self, why: &str) -> Result<&Condition> {
        self.p_neg
            .as_ref()
            .ok_or_else(|| Error::config("negative", format!("{why} needs a negative condition")))
    }

    fn run_one(
        &self,
        config: &GuidanceConfig,
        seed: u64,
    ) -> Result<(Trajectory, Option<Trajectory>)> {
        let opts = self.sampler_options();
        if config.strategy.is_decoupled() {
            let neg = self.negative(config.strategy.as_str())?;
            let dual = run_dual_branch(&self.oracle, &self.p_plus, neg, config, seed, opts)?;
            Ok((dual.plus, Some(dual.minus)))
        } else {
            let traj = run_single_branch(
                &self.oracle,
                &self.p_plus,
                self.p_neg.as_ref(),
                config,
                seed,
                opts,
            )?;
            Ok((traj, None))
        }
    }

    fn label_of(&self, component: usize) -> Option<&str> {
        self.config
            .labels
            .iter()
            .find(|l| l.components.contains(&component))
            .map(|l| l.name.as_str())
    }

    fn counterfactual_components(&self) -> Result<&[usize]> {
        self.config
            .labels
            .iter()
            .find(|l| l.name == self.config.counterfactual_label)
            .map(|l| l.components.as_slice())
            .ok_or_else(|| Error::config("labels", "mode mass needs label sets"))
    }

    /// Per-seed fraction of final samples in the counterfactual label,
    /// in seed order.
    pub fn counterfactual_mass(&self, config: &GuidanceConfig) -> Result<Vec<f64>> {
        let cf = self.counterfactual_components()?;
        let runs = self.runs();
        let hits: Vec<bool> = self.pool()?.install(|| {
            runs.par_iter()
                .map(|&(_, _, rs)| {
                    let (traj, _) = self.run_one(config, rs)?;
                    Ok(cf.contains(&self.config.world.assign(traj.final_state())?))
                })
                .collect::<Result<_>>()
        })?;
        let per = self.config.run.sample_count;
        Ok(hits
            .chunks(per)
            .map(|c| c.iter().filter(|h| **h).count() as f64 / per as f64)
            .collect())
    }
}

fn check_bound_records(config: &ExperimentConfig) -> Result<()> {
    let bound: Vec<(&String, &String)> = config
        .conditions
        .iter()
        .filter_map(|(n, c)| c.record.as_ref().map(|r| (n, r)))
        .collect();
    if bound.is_empty() {
        return Ok(());
    }
    let par = config.par.as_ref().ok_or_else(|| {
        Error::config(
            "par",
            "conditions bind records but no `par` section is given",
        )
    })?;
    let path = corpus_path(config, par);
    let records =
        CorpusStore::load(&path).map_err(|e| Error::config("par.corpus", e.to_string()))?;
    for (name, id) in bound {
        if !records.iter().any(|r| &r.id == id) {
            return Err(Error::config(
                format!("conditions.{name}.record"),
                format!("record `{id}` not found in {}", path.display()),
            ));
        }
    }
    Ok(())
}

fn corpus_path(config: &ExperimentConfig, par: &ParSpec) -> PathBuf {
    if par.corpus.is_absolute() {
        par.corpus.clone()
    } else {
        config.output.dir.join(&par.corpus)
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampler seed for sample `j` of `seed`. Sample 0 uses the seed itself.
pub fn sample_seed(seed: u64, j: usize) -> u64 {
    if j == 0 {
        seed
    } else {
        splitmix64(seed ^ splitmix64(j as u64))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Writes artifacts into one command directory and records their checksums.
struct ArtifactWriter {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactWriter {
    fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            entries: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.push(ArtifactEntry {
            name: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::config(name, e.to_string());
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::config(name, e.to_string()))?;
        self.write(name, &bytes)
    }

    fn series(&mut self, name: &str, series: &[(usize, f64)]) -> Result<()> {
        let rows: Vec<Vec<String>> = series
            .iter()
            .map(|(t, v)| vec![t.to_string(), fmt(*v)])
            .collect();
        self.csv(name, &header(&["t", "value"]), &rows)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn finish(self, exp: &Experiment, command: &str) -> Result<Manifest> {
        let manifest = Manifest {
            tool: "sdglab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: exp.config.hash()?,
            config: exp.config.clone(),
            seeds: exp.seeds.clone(),
            artifacts: self.entries,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub dir: PathBuf,
    pub rows: usize,
    pub mode_masses: BTreeMap<String, f64>,
    pub manifest: Manifest,
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    seed: u64,
    sample: usize,
    branch: &'static str,
    #[serde(flatten)]
    record: &'a StepRecord,
}

/// Run the configured strategy over every seed and sample.
pub fn cmd_sample(exp: &Experiment) -> Result<SampleReport> {
    let dir = exp.command_dir("sample")?;
    let runs = exp.runs();
    let cfg = exp.config.guidance;
    let results: Vec<(Trajectory, Option<Trajectory>)> = exp.pool()?.install(|| {
        runs.par_iter()
            .map(|&(_, _, rs)| exp.run_one(&cfg, rs))
            .collect::<Result<_>>()
    })?;

    let dim = exp.config.world.dim();
    let mut cols = vec!["seed".to_string(), "sample".to_string()];
    cols.extend((0..dim).map(|i| format!("x{i}")));
    cols.extend(["mode".to_string(), "label".to_string()]);
    let mut rows = Vec::with_capacity(runs.len());
    let mut label_counts: BTreeMap<String, usize> = exp
        .config
        .labels
        .iter()
        .map(|l| (l.name.clone(), 0))
        .collect();
    let mut jsonl = String::new();
    for (&(seed, j, _), (traj, minus)) in runs.iter().zip(&results) {
        let x0 = traj.final_state();
        let mode = exp.config.world.assign(x0)?;
        let label = exp.label_of(mode).unwrap_or_default();
        if let Some(c) = label_counts.get_mut(label) {
            *c += 1;
        }
        let mut row = vec![seed.to_string(), j.to_string()];
        row.extend(x0.iter().map(|v| fmt(*v)));
        row.extend([mode.to_string(), label.to_string()]);
        rows.push(row);

        if exp.config.output.trajectories {
            let branches =
                std::iter::once(("plus", traj)).chain(minus.iter().map(|m| ("minus", m)));
            for (branch, t) in branches {
                for record in &t.records {
                    jsonl.push_str(&serde_json::to_string(&TrajectoryLine {
                        seed,
                        sample: j,
                        branch,
                        record,
                    })?);
                    jsonl.push('\n');
                }
            }
        }
    }

    let mut w = ArtifactWriter::new(dir.clone());
    w.csv("samples.csv", &cols, &rows)?;
    if exp.config.output.trajectories {
        w.write("trajectories.jsonl", jsonl.as_bytes())?;
    }
    let n = rows.len();
    let mode_masses = label_counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / n as f64))
        .collect();
    Ok(SampleReport {
        dir,
        rows: n,
        mode_masses,
        manifest: w.finish(exp, "sample")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub counterfactual_mass_mean: f64,
    pub counterfactual_mass_stderr: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub dir: PathBuf,
    pub rows: Vec<ComparisonRow>,
    pub manifest: Manifest,
}

impl ComparisonReport {
    pub fn mass(&self, strategy: Strategy) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy)
            .map(|r| r.counterfactual_mass_mean)
    }
}

/// Counterfactual-mode mass for every strategy on the same seeds.
pub fn cmd_compare_guidance(exp: &Experiment) -> Result<ComparisonReport> {
    exp.negative("compare-guidance")?;
    exp.counterfactual_components()?;
    let dir = exp.command_dir("compare-guidance")?;
    let mut rows = Vec::with_capacity(Strategy::ALL.len());
    for strategy in Strategy::ALL {
        let masses = exp.counterfactual_mass(&exp.config.guidance.with_strategy(strategy))?;
        let (mean, stderr) = mean_stderr(&masses);
        rows.push(ComparisonRow {
            strategy,
            counterfactual_mass_mean: mean,
            counterfactual_mass_stderr: stderr,
            seeds: masses.len(),
        });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                fmt(r.counterfactual_mass_mean),
                fmt(r.counterfactual_mass_stderr),
                r.seeds.to_string(),
            ]
        })
        .collect();
    let mut w = ArtifactWriter::new(dir.clone());
    w.csv(
        "comparison.csv",
        &header(&[
            "strategy",
            "counterfactual_mass_mean",
            "counterfactual_mass_stderr",
            "seeds",
        ]),
        &table,
    )?;
    Ok(ComparisonReport {
        dir,
        rows,
        manifest: w.finish(exp, "compare-guidance")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub early: f64,
    pub late: f64,
    pub window: usize,
    /// `early / late`; absent when the late mean is zero.
    pub ratio: Option<f64>,
}

impl From<EarlyLate> for WindowSummary {
    fn from(e: EarlyLate) -> Self {
        Self {
            early: e.early,
            late: e.late,
            window: e.window,
            ratio: e.ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagSummary {
    pub strategy: Strategy,
    /// Shared-latent strategy actually diagnosed.
    pub diagnosed_strategy: Strategy,
    pub runs: usize,
    pub window_fraction: f64,
    pub delta_norm: WindowSummary,
    pub bias_gap: WindowSummary,
    /// Early-vs-late mean discrepancy norm ratio.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagReport {
    pub dir: PathBuf,
    pub summary: LagSummary,
    pub delta_norms: Series,
    pub bias_gap: Series,
    pub manifest: Manifest,
}

fn average_series(all: &[Series]) -> Series {
    let n = all.len() as f64;
    let mut acc: Series = all[0].iter().map(|(t, _)| (*t, 0.0)).collect();
    for s in all {
        for (a, (_, v)) in acc.iter_mut().zip(s) {
            a.1 += v;
        }
    }
    acc.iter_mut().for_each(|a| a.1 /= n);
    acc
}

/// Discrepancy, spectral and bias curves for a shared-latent strategy.
///
/// Decoupled strategies are diagnosed through their shared-latent
/// counterpart (TDD_ONLY through NP, SDG through SDN).
pub fn cmd_diagnose_lag(exp: &Experiment) -> Result<LagReport> {
    let strategy = exp.config.guidance.strategy;
    let diagnosed = match strategy {
        Strategy::Cfg => {
            return Err(Error::config(
                "guidance.strategy",
                "CFG has no negative branch to diagnose; use NP or SDN",
            ))
        }
        Strategy::Np | Strategy::TddOnly => Strategy::Np,
        Strategy::Sdn | Strategy::Sdg => Strategy::Sdn,
    };
    let neg = exp.negative("diagnose-lag")?;
    let dir = exp.command_dir("diagnose-lag")?;
    let cfg = exp.config.guidance.with_strategy(diagnosed);
    let spectral = exp.config.diagnostics.spectral;
    let opts = exp.sampler_options();
    let runs = exp.runs();
    let run_seeds: Vec<u64> = runs.iter().map(|r| r.2).collect();

    let pool = exp.pool()?;
    let reports = pool.install(|| {
        run_seeds
            .par_iter()
            .map(|&rs| {
                let traj = run_single_branch(&exp.oracle, &exp.p_plus, Some(neg), &cfg, rs, opts)?;
                analyze_trajectory(&exp.oracle, &traj, &exp.p_plus, &spectral)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let bias = pool
        .install(|| trajectory_bias_probe(&exp.oracle, &exp.p_plus, neg, &cfg, &run_seeds, opts))?;

    let delta: Vec<Series> = reports.iter().map(|r| r.delta_norms.clone()).collect();
    let proj: Vec<Series> = reports.iter().map(|r| r.suppression_proj.clone()).collect();
    let delta_norms = average_series(&delta);
    let suppression = average_series(&proj);

    let steps = delta_norms.len();
    let mut eigen_rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let samples: Vec<_> = reports.iter().map(|r| &r.leading_eigs[k]).collect();
        let n = samples.len() as f64;
        let value = samples.iter().map(|s| s.value).sum::<f64>() / n;
        let angles: Vec<f64> = samples.iter().filter_map(|s| s.angle).collect();
        let angle = if angles.is_empty() {
            String::new()
        } else {
            fmt(angles.iter().sum::<f64>() / angles.len() as f64)
        };
        let converged = samples.iter().filter(|s| s.converged).count() as f64 / n;
        eigen_rows.push(vec![
            samples[0].t.to_string(),
            fmt(value),
            angle,
            fmt(converged),
        ]);
    }

    let fraction = exp.config.diagnostics.window_fraction;
    let empty = || Error::InvalidRange("diagnostic series is empty".into());
    let delta_window: WindowSummary = EarlyLate::of(&delta_norms, fraction)
        .ok_or_else(empty)?
        .into();
    let bias_window: WindowSummary = bias.early_late(fraction).ok_or_else(empty)?.into();
    let summary = LagSummary {
        strategy,
        diagnosed_strategy: diagnosed,
        runs: run_seeds.len(),
        window_fraction: fraction,
        ratio: delta_window.ratio,
        delta_norm: delta_window,
        bias_gap: bias_window,
    };

    let mut w = ArtifactWriter::new(dir.clone());
    w.series("delta_norms.csv", &delta_norms)?;
    w.series("suppression_proj.csv", &suppression)?;
    w.csv(
        "eigen.csv",
        &header(&["t", "value", "angle", "converged_fraction"]),
        &eigen_rows,
    )?;
    w.series("bias_gap.csv", &bias.gaps)?;
    w.json("summary.json", &summary)?;
    Ok(LagReport {
        dir,
        summary,
        delta_norms,
        bias_gap: bias.gaps,
        manifest: w.finish(exp, "diagnose-lag")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Per-step `beta_t` and `alpha_bar_t`.
pub fn cmd_schedule_dump(exp: &Experiment) -> Result<ScheduleReport> {
    let dir = exp.command_dir("schedule-dump")?;
    let s = exp.oracle.schedule();
    let rows: Vec<Vec<String>> = (1..=s.num_steps())
        .map(|t| Ok(vec![t.to_string(), fmt(s.beta(t)?), fmt(s.alpha_bar(t)?)]))
        .collect::<Result<_>>()?;
    let mut w = ArtifactWriter::new(dir.clone());
    w.csv("schedule.csv", &header(&["t", "beta", "alpha_bar"]), &rows)?;
    Ok(ScheduleReport {
        dir,
        manifest: w.finish(exp, "schedule-dump")?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PromptOutcome {
    Ok { id: String },
    Format { detail: String },
    Validation { detail: String },
    Transport { detail: String },
    Error { detail: String },
}

impl PromptOutcome {
    fn from_result(r: std::result::Result<String, ParError>) -> Self {
        match r {
            Ok(id) => Self::Ok { id },
            Err(e @ ParError::Format { .. }) => Self::Format {
                detail: e.to_string(),
            },
            Err(e @ ParError::Validation { .. }) => Self::Validation {
                detail: e.to_string(),
            },
            Err(e @ ParError::Transport { .. }) => Self::Transport {
                detail: e.to_string(),
            },
            Err(e) => Self::Error {
                detail: e.to_string(),
            },
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Ok { .. } => "ok",
            Self::Format { .. } => "format",
            Self::Validation { .. } => "validation",
            Self::Transport { .. } => "transport",
            Self::Error { .. } => "error",
        }
    }

    pub fn detail(&self) -> &str {
        match self {
            Self::Ok { id } => id,
            Self::Format { detail }
            | Self::Validation { detail }
            | Self::Transport { detail }
            | Self::Error { detail } => detail,
        }
    }

    /// Transport and I/O failures; the batch cannot be trusted.
    pub fn is_hard_failure(&self) -> bool {
        matches!(self, Self::Transport { .. } | Self::Error { .. })
    }

    /// Replies that arrived but were rejected.
    pub fn is_soft_failure(&self) -> bool {
        matches!(self, Self::Format { .. } | Self::Validation { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStatus {
    pub prompt: String,
    #[serde(flatten)]
    pub outcome: PromptOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParBatchReport {
    pub corpus: PathBuf,
    pub statuses: Vec<PromptStatus>,
    pub warnings: Vec<String>,
}

impl ParBatchReport {
    pub fn accepted(&self) -> usize {
        self.statuses
            .iter()
            .filter(|s| matches!(s.outcome, PromptOutcome::Ok { .. }))
            .count()
    }

    /// Hard failures always fail the batch; rejected replies only under
    /// `strict`.
    pub fn succeeded(&self, strict: bool) -> bool {
        self.statuses
            .iter()
            .all(|s| !s.outcome.is_hard_failure() && !(strict && s.outcome.is_soft_failure()))
    }

    pub fn table(&self) -> String {
        let mut out = String::from("status      detail  | prompt\n");
        for s in &self.statuses {
            out.push_str(&format!(
                "{:<11} {}  | {}\n",
                s.outcome.label(),
                s.outcome.detail(),
                s.prompt
            ));
        }
        out
    }
}

/// Generate counterfactuals for every non-blank line of `prompts`, through
/// fixtures in `mock` when given and the configured endpoint otherwise.
pub fn cmd_par_generate(
    exp: &Experiment,
    prompts: &Path,
    mock: Option<&Path>,
) -> Result<ParBatchReport> {
    let par = exp
        .config
        .par
        .as_ref()
        .ok_or_else(|| Error::config("par", "missing `par` section"))?;
    let text = std::fs::read_to_string(prompts).map_err(|e| Error::io(prompts, e))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let corpus = corpus_path(&exp.config, par);
    let mut warnings = Vec::new();
    if lines.is_empty() {
        warnings.push(format!(
            "no prompts in {}; nothing generated",
            prompts.display()
        ));
        return Ok(ParBatchReport {
            corpus,
            statuses: Vec::new(),
            warnings,
        });
    }

    let transport: Box<dyn Transport> = match mock {
        Some(dir) => Box::new(MockTransport::from_dir(dir)?),
        None => Box::new(
            HttpTransport::new(&par.endpoint)
                .map_err(|e| Error::config("par.endpoint", e.to_string()))?,
        ),
    };
    if let Some(parent) = corpus.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let pipeline = Pipeline::new(
        par.endpoint.clone(),
        par.template.clone().unwrap_or_default(),
        transport,
    )
    .with_validation(par.validation)
    .with_store(CorpusStore::new(&corpus));

    let statuses = exp.pool()?.install(|| {
        lines
            .par_iter()
            .map(|p| PromptStatus {
                prompt: p.clone(),
                outcome: PromptOutcome::from_result(pipeline.generate(p).map(|r| r.id)),
            })
            .collect()
    });
    Ok(ParBatchReport {
        corpus,
        statuses,
        warnings,
    })
}
