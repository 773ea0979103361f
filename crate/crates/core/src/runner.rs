//! Experiment configuration, CSV metrics output, and the `run`, `sweep` and
//! `grouping-report` drivers behind the command-line tool.
//!
//! Configs are `key=value` text, one entry per line, `#` starts a comment.
//! Every CSV starts with the full effective config as `# config: key=value`
//! lines, so a results file can be fed back to [`parse_config_str`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::clustering::{purity, DeviceGroups};
use crate::data::{self, Dataset, NonIidCase, Sampling, SyntheticSpec};
use crate::error::{Error, Result};
use crate::features::{ExtractorKind, FeatureExtractor};
use crate::nn::{ModelSpec, TrainParams};
use crate::orchestrator::{
    preprocess_detailed, Federation, GroupingMode, LshConfig, Outcome, RoundRecord, StrategyKind,
};
use crate::rng::Streams;

pub const CSV_HEADER: &str =
    "round,strategy,case,selected_count,test_accuracy,test_loss,uplink_bytes,downlink_bytes";
pub const CONFIG_PREFIX: &str = "# config: ";
pub const THREADS_ENV: &str = "FEDGROUP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdxPaths {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub synthetic: SyntheticSpec,
    pub idx: IdxPaths,
    pub hidden: Vec<usize>,
    pub devices: usize,
    pub per_device: usize,
    pub sampling: Sampling,
    pub k: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub window: f64,
    pub hash_dim: usize,
    pub case: NonIidCase,
    pub strategy: StrategyKind,
    pub extractor: ExtractorKind,
    pub feature_dim: usize,
    pub recluster_period: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            synthetic: SyntheticSpec::default(),
            idx: IdxPaths::default(),
            hidden: vec![32],
            devices: 100,
            per_device: 600,
            sampling: Sampling::Exclusive,
            k: 10,
            rounds: 100,
            epochs: 5,
            lr: 0.01,
            batch_size: 50,
            window: 3.0,
            hash_dim: 5,
            case: NonIidCase::Case1,
            strategy: StrategyKind::Fldg,
            extractor: ExtractorKind::IdentityMean,
            feature_dim: 64,
            recluster_period: 10,
            seed: 0,
            out: PathBuf::from("results.csv"),
        }
    }
}

/// Every key accepted in a config file.
pub const KEYS: &[&str] = &[
    "dataset",
    "classes",
    "input_dim",
    "per_class",
    "test_per_class",
    "noise",
    "separation",
    "offset",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "hidden",
    "devices",
    "per_device",
    "sampling",
    "k",
    "rounds",
    "epochs",
    "lr",
    "batch_size",
    "window",
    "hash_dim",
    "case",
    "strategy",
    "extractor",
    "feature_dim",
    "recluster_period",
    "seed",
    "out",
];

fn parse_num<T: std::str::FromStr>(value: &str, what: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("'{value}' is not a valid {what}"))
}

fn parse_hidden(value: &str) -> std::result::Result<Vec<usize>, String> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_num::<usize>(v.trim(), "layer width"))
        .collect()
}

fn parse_path(value: &str) -> std::result::Result<Option<PathBuf>, String> {
    Ok((!value.is_empty()).then(|| PathBuf::from(value)))
}

/// Short aliases accepted alongside the full key names.
pub fn canonical_key(key: &str) -> &str {
    match key {
        "h" => "hash_dim",
        "r" => "window",
        _ => key,
    }
}

impl ExperimentConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        match canonical_key(key) {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "idx" => DatasetKind::Idx,
                    _ => {
                        return Err(format!(
                            "'{value}' is not a dataset kind (synthetic or idx)"
                        ))
                    }
                }
            }
            "classes" => self.synthetic.class_count = parse_num(value, "integer")?,
            "input_dim" => self.synthetic.input_dim = parse_num(value, "integer")?,
            "per_class" => self.synthetic.per_class = parse_num(value, "integer")?,
            "test_per_class" => self.synthetic.test_per_class = parse_num(value, "integer")?,
            "noise" => self.synthetic.noise = parse_num(value, "real number")?,
            "separation" => self.synthetic.separation = parse_num(value, "real number")?,
            "offset" => self.synthetic.offset = parse_num(value, "real number")?,
            "train_images" => self.idx.train_images = parse_path(value)?,
            "train_labels" => self.idx.train_labels = parse_path(value)?,
            "test_images" => self.idx.test_images = parse_path(value)?,
            "test_labels" => self.idx.test_labels = parse_path(value)?,
            "hidden" => self.hidden = parse_hidden(value)?,
            "devices" => self.devices = parse_num(value, "integer")?,
            "per_device" => self.per_device = parse_num(value, "integer")?,
            "sampling" => {
                self.sampling = match value {
                    "exclusive" => Sampling::Exclusive,
                    "shared" => Sampling::Shared,
                    _ => {
                        return Err(format!(
                            "'{value}' is not a sampling mode (exclusive or shared)"
                        ))
                    }
                }
            }
            "k" => self.k = parse_num(value, "integer")?,
            "rounds" => self.rounds = parse_num(value, "integer")?,
            "epochs" => self.epochs = parse_num(value, "integer")?,
            "lr" => self.lr = parse_num(value, "real number")?,
            "batch_size" => self.batch_size = parse_num(value, "integer")?,
            "window" => self.window = parse_num(value, "real number")?,
            "hash_dim" => self.hash_dim = parse_num(value, "integer")?,
            "case" => self.case = value.parse().map_err(|e: Error| e.to_string())?,
            "strategy" => self.strategy = value.parse().map_err(|e: Error| e.to_string())?,
            "extractor" => {
                self.extractor = match value {
                    "identity" | "identity-mean" => ExtractorKind::IdentityMean,
                    "projection" | "random-projection" => ExtractorKind::RandomProjection,
                    _ => {
                        return Err(format!(
                            "'{value}' is not an extractor (identity or projection)"
                        ))
                    }
                }
            }
            "feature_dim" => self.feature_dim = parse_num(value, "integer")?,
            "recluster_period" => self.recluster_period = parse_num(value, "integer")?,
            "seed" => self.seed = parse_num(value, "64-bit integer")?,
            "out" => {
                if value.is_empty() {
                    return Err("output path is empty".into());
                }
                self.out = PathBuf::from(value)
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// All settings as `(key, value)` pairs, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let hidden = if self.hidden.is_empty() {
            "none".to_string()
        } else {
            self.hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            (
                "dataset",
                match self.dataset {
                    DatasetKind::Synthetic => "synthetic".into(),
                    DatasetKind::Idx => "idx".into(),
                },
            ),
            ("classes", self.synthetic.class_count.to_string()),
            ("input_dim", self.synthetic.input_dim.to_string()),
            ("per_class", self.synthetic.per_class.to_string()),
            ("test_per_class", self.synthetic.test_per_class.to_string()),
            ("noise", self.synthetic.noise.to_string()),
            ("separation", self.synthetic.separation.to_string()),
            ("offset", self.synthetic.offset.to_string()),
            ("train_images", path(&self.idx.train_images)),
            ("train_labels", path(&self.idx.train_labels)),
            ("test_images", path(&self.idx.test_images)),
            ("test_labels", path(&self.idx.test_labels)),
            ("hidden", hidden),
            ("devices", self.devices.to_string()),
            ("per_device", self.per_device.to_string()),
            (
                "sampling",
                match self.sampling {
                    Sampling::Exclusive => "exclusive".into(),
                    Sampling::Shared => "shared".into(),
                },
            ),
            ("k", self.k.to_string()),
            ("rounds", self.rounds.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("window", self.window.to_string()),
            ("hash_dim", self.hash_dim.to_string()),
            ("case", self.case.to_string()),
            ("strategy", self.strategy.to_string()),
            (
                "extractor",
                match self.extractor {
                    ExtractorKind::IdentityMean => "identity".into(),
                    ExtractorKind::RandomProjection => "projection".into(),
                },
            ),
            ("feature_dim", self.feature_dim.to_string()),
            ("recluster_period", self.recluster_period.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
        ]
    }

    /// Check cross-field constraints that hold regardless of the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("key '{key}': {msg}")));
        if self.devices == 0 {
            return bad("devices", "must be positive".into());
        }
        if self.per_device == 0 {
            return bad("per_device", "must be positive".into());
        }
        if self.k == 0 || self.k > self.devices {
            return bad(
                "k",
                format!("must be between 1 and devices ({})", self.devices),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", "must be a non-negative real".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.window.is_finite() && self.window > 0.0) {
            return bad("window", "must be positive".into());
        }
        if self.hash_dim == 0 {
            return bad("hash_dim", "must be at least 1".into());
        }
        if self.strategy == StrategyKind::FldgL {
            let bound = crate::lsh::min_family_size(self.window, self.k);
            if self.hash_dim < bound {
                return bad(
                    "hash_dim",
                    format!(
                        "{} groups at window {} need at least {bound} hash functions",
                        self.k, self.window
                    ),
                );
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be positive".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be positive".into());
        }
        if self.recluster_period == 0 {
            return bad("recluster_period", "must be positive".into());
        }
        if self.case == NonIidCase::Case2 && !self.per_device.is_multiple_of(2) {
            return bad(
                "per_device",
                "case2 needs an even number of samples per device".into(),
            );
        }
        match self.dataset {
            DatasetKind::Synthetic => self
                .synthetic
                .validate()
                .map_err(|e| Error::config(format!("synthetic dataset: {e}"))),
            DatasetKind::Idx => {
                let p = &self.idx;
                for (key, v) in [
                    ("train_images", &p.train_images),
                    ("train_labels", &p.train_labels),
                    ("test_images", &p.test_images),
                    ("test_labels", &p.test_labels),
                ] {
                    if v.is_none() {
                        return bad(key, "required when dataset=idx".into());
                    }
                }
                Ok(())
            }
        }
    }

    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut next = self.clone();
        next.set(key, value)
            .map_err(|m| Error::config(format!("key '{key}': {m}")))?;
        Ok(next)
    }
}

/// Apply `key=value` lines from `text` on top of `base`. Does not validate.
pub fn apply_config_text(
    base: ExperimentConfig,
    text: &str,
    origin: &str,
) -> Result<ExperimentConfig> {
    let mut cfg = base;
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "{origin} line {line_no}: expected key=value, got '{line}'"
            ))
        })?;
        let key = key.trim();
        if !seen.insert(canonical_key(key).to_string()) {
            return Err(Error::config(format!(
                "{origin} line {line_no}: key '{key}' given twice"
            )));
        }
        cfg.set(key, value)
            .map_err(|m| Error::config(format!("{origin} line {line_no}: key '{key}': {m}")))?;
    }
    Ok(cfg)
}

/// Parse and validate a config from text; missing keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg = apply_config_text(ExperimentConfig::default(), text, "config")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file, then apply `overrides` (flag values) before validating.
pub fn parse_config(path: Option<&Path>, overrides: &[(&str, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg = apply_config_text(cfg, &text, &path.display().to_string())?;
    }
    for (key, value) in overrides {
        cfg.set(key, value)
            .map_err(|m| Error::config(format!("flag --{key}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Recover the config echoed at the top of a results CSV.
pub fn parse_config_echo(csv: &str) -> Result<ExperimentConfig> {
    let body: String = csv
        .lines()
        .filter_map(|l| l.strip_prefix(CONFIG_PREFIX))
        .map(|l| format!("{l}\n"))
        .collect();
    parse_config_str(&body)
}

fn load_data(cfg: &ExperimentConfig, streams: &Streams) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synthetic => cfg.synthetic.generate(streams.seed("data", &[])),
        DatasetKind::Idx => {
            let p = &cfg.idx;
            let need =
                |v: &Option<PathBuf>| v.clone().ok_or_else(|| Error::config("missing IDX path"));
            let train = data::load_idx(&need(&p.train_images)?, &need(&p.train_labels)?)?;
            let test = data::load_idx(&need(&p.test_images)?, &need(&p.test_labels)?)?;
            if test.input_dim != train.input_dim {
                return Err(Error::config("train and test images differ in size"));
            }
            let classes = train.class_count.max(test.class_count);
            Ok((
                Dataset {
                    class_count: classes,
                    ..train
                },
                Dataset {
                    class_count: classes,
                    ..test
                },
            ))
        }
    }
}

/// Materialize data, model and strategy for one experiment.
pub fn prepare(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Federation> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let (train, test) = load_data(cfg, &streams)?;
    if test.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let devices = data::partition_with(
        &train,
        cfg.devices,
        cfg.per_device,
        cfg.case,
        cfg.sampling,
        streams.seed("partition", &[]),
    )?;
    let mut dims = vec![train.input_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(train.class_count);
    let extractor = FeatureExtractor::build(
        cfg.extractor,
        train.input_dim,
        cfg.feature_dim,
        streams.seed("projection", &[]),
    )?;
    Ok(Federation {
        devices,
        test: test.samples,
        model: ModelSpec::new(dims)?,
        train: TrainParams {
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
        },
        rounds: cfg.rounds,
        k: cfg.k,
        strategy: cfg.strategy,
        extractor,
        lsh: LshConfig {
            h: cfg.hash_dim,
            r: cfg.window,
            seed: streams.seed("lsh", &[]),
        },
        recluster_period: cfg.recluster_period,
        seed: cfg.seed,
        threads,
    })
}

/// Run one experiment in memory, without writing any file.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Outcome> {
    prepare(cfg, threads)?.run()
}

pub fn csv_row(cfg: &ExperimentConfig, r: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{:.6},{:.6},{},{}",
        r.round,
        cfg.strategy,
        cfg.case,
        r.selected.len(),
        r.test_accuracy,
        r.test_loss,
        r.uplink_bytes,
        r.downlink_bytes
    )
}

pub fn csv_preamble(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    for (k, v) in cfg.to_pairs() {
        s.push_str(CONFIG_PREFIX);
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    s.push_str(CSV_HEADER);
    s.push('\n');
    s
}

/// Run one experiment, streaming rows to `cfg.out` and flushing after each round.
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Outcome> {
    let federation = prepare(cfg, threads)?;
    let path = cfg.out.as_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(csv_preamble(cfg).as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))?;
    federation.run_with(|record| {
        writeln!(out, "{}", csv_row(cfg, record))
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    })
}

/// Output file for one sweep cell, next to `base`.
pub fn sweep_path(base: &Path, strategy: StrategyKind, case: NonIidCase, seed: u64) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    let name = format!("{stem}-{strategy}-{case}-seed{seed}.csv");
    match base.parent() {
        Some(dir) => dir.join(name),
        None => PathBuf::from(name),
    }
}

/// One config per (strategy, case, seed) cell, each writing its own CSV.
pub fn sweep_configs(
    base: &ExperimentConfig,
    strategies: &[StrategyKind],
    cases: &[NonIidCase],
    seeds: &[u64],
) -> Result<Vec<ExperimentConfig>> {
    let mut out = Vec::new();
    for &strategy in strategies {
        for &case in cases {
            for &seed in seeds {
                let cfg = ExperimentConfig {
                    strategy,
                    case,
                    seed,
                    out: sweep_path(&base.out, strategy, case, seed),
                    ..base.clone()
                };
                cfg.validate()?;
                out.push(cfg);
            }
        }
    }
    Ok(out)
}

/// Run every sweep cell; cells execute concurrently and are seed-isolated.
pub fn sweep(
    configs: &[ExperimentConfig],
    threads: Option<usize>,
) -> Result<Vec<(PathBuf, Outcome)>> {
    configs
        .par_iter()
        .map(|cfg| run(cfg, threads).map(|o| (cfg.out.clone(), o)))
        .collect()
}

/// Parse `0..9` (inclusive) or `1,4,7`.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let b = b.trim_start_matches('=');
        let lo: u64 = a
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad seed range '{text}'")))?;
        let hi: u64 = b
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad seed range '{text}'")))?;
        if hi < lo {
            return Err(Error::config(format!("empty seed range '{text}'")));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad seed '{s}'")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingReport {
    pub groups: DeviceGroups,
    pub dominant_labels: Vec<usize>,
    pub purity: f64,
    pub uplink_bytes: u64,
    pub mode: GroupingMode,
}

impl GroupingReport {
    pub fn render(&self) -> String {
        let mut s = String::from("device,group,dominant_label\n");
        for (d, (&g, &l)) in self
            .groups
            .assignment()
            .iter()
            .zip(&self.dominant_labels)
            .enumerate()
        {
            s.push_str(&format!("{d},{g},{l}\n"));
        }
        let mode = match self.mode {
            GroupingMode::Plain => "features".to_string(),
            GroupingMode::Lsh(c) => format!("lsh h={} r={}", c.h, c.r),
        };
        s.push_str(&format!(
            "# groups={} mode={mode} purity={:.6} uplink_bytes={}\n",
            self.groups.group_count(),
            self.purity,
            self.uplink_bytes
        ));
        s
    }
}

/// Preprocessing only: group devices and score the groups against each
/// device's majority label. `fldg-l` groups on LSH codes, all else on features.
pub fn grouping_report(cfg: &ExperimentConfig) -> Result<GroupingReport> {
    let fed = prepare(cfg, None)?;
    let mode = if cfg.strategy == StrategyKind::FldgL {
        GroupingMode::Lsh(fed.lsh)
    } else {
        GroupingMode::Plain
    };
    let streams = Streams::new(cfg.seed);
    let pre = preprocess_detailed(
        &fed.devices,
        &fed.extractor,
        cfg.k,
        mode,
        streams.seed("kmeans", &[]),
    )?;
    let classes = fed.model.class_count();
    let dominant_labels: Vec<usize> = fed
        .devices
        .iter()
        .map(|d| d.majority_label(classes))
        .collect();
    Ok(GroupingReport {
        purity: purity(&pre.groups, &dominant_labels)?,
        groups: pre.groups,
        dominant_labels,
        uplink_bytes: pre.uplink_bytes,
        mode,
    })
}

/// Worker-thread cap from `FEDGROUP_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))),
        },
        Err(_) => Ok(None),
    }
}
