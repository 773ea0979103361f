//! The federated control loop: one-time device grouping, per-round client
//! selection, local training, weighted aggregation and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::clustering::{kmeans, DeviceGroups};
use crate::data::{DeviceDataset, Sample};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::lsh::{min_family_size, LshFamily};
use crate::nn::{self, ModelSpec, ModelWeights, TrainParams, WeightDelta};
use crate::rng::{Stream, Streams};

pub const KMEANS_MAX_ITERS: usize = 100;
pub const DEFAULT_RECLUSTER_PERIOD: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    /// K devices uniformly at random.
    FedAvg,
    /// One device per feature-clustered group.
    Fldg,
    /// One device per group, grouped on LSH codes of the features.
    FldgL,
    /// One device per cluster of model weights, re-clustered periodically.
    KCenter,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::FedAvg,
        StrategyKind::Fldg,
        StrategyKind::FldgL,
        StrategyKind::KCenter,
    ];

    pub fn needs_preprocessing(self) -> bool {
        matches!(self, StrategyKind::Fldg | StrategyKind::FldgL)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::Fldg => "fldg",
            StrategyKind::FldgL => "fldg-l",
            StrategyKind::KCenter => "k-center",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fedavg" | "fedavg-random" => Ok(StrategyKind::FedAvg),
            "fldg" => Ok(StrategyKind::Fldg),
            "fldg-l" | "fldgl" => Ok(StrategyKind::FldgL),
            "k-center" | "kcenter" => Ok(StrategyKind::KCenter),
            other => Err(Error::config(format!(
                "unknown strategy '{other}' (expected fedavg, fldg, fldg-l or k-center)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LshConfig {
    pub h: usize,
    pub r: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupingMode {
    /// Cluster the averaged feature vectors directly.
    Plain,
    /// Cluster LSH codes of the averaged features.
    Lsh(LshConfig),
}

/// What the cloud receives during preprocessing, and the groups it derives.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub groups: DeviceGroups,
    /// One clustering input per device: averaged features, or embedded hash codes.
    pub uploads: Vec<Vec<f64>>,
    pub uplink_bytes: u64,
}

/// Group `devices` into `k` clusters from their averaged features.
pub fn preprocess(
    devices: &[DeviceDataset],
    extractor: &FeatureExtractor,
    k: usize,
    mode: GroupingMode,
    seed: u64,
) -> Result<DeviceGroups> {
    Ok(preprocess_detailed(devices, extractor, k, mode, seed)?.groups)
}

pub fn preprocess_detailed(
    devices: &[DeviceDataset],
    extractor: &FeatureExtractor,
    k: usize,
    mode: GroupingMode,
    seed: u64,
) -> Result<Preprocessed> {
    if k == 0 || k > devices.len() {
        return Err(Error::config(format!(
            "cannot form {k} groups from {} devices",
            devices.len()
        )));
    }
    if let GroupingMode::Lsh(cfg) = mode {
        let bound = min_family_size(cfg.r, k);
        if cfg.h < bound {
            return Err(Error::config(format!(
                "LSH output dimension h={} is below the family-size bound ceil(log_{}({k})) = {bound}",
                cfg.h, cfg.r
            )));
        }
    }
    let features = devices
        .par_iter()
        .map(|d| extractor.device_avg_feature(d))
        .collect::<Result<Vec<_>>>()?;
    let uploads: Vec<Vec<f64>> = match mode {
        GroupingMode::Plain => features.into_iter().map(|f| f.0).collect(),
        GroupingMode::Lsh(cfg) => {
            let family = LshFamily::sample(cfg.h, extractor.output_dim(), cfg.r, cfg.seed)?;
            features
                .iter()
                .map(|f| family.hash(f).map(|hv| hv.embed()))
                .collect::<Result<_>>()?
        }
    };
    let uplink_bytes = uploads.iter().map(|u| u.len() as u64 * 8).sum();
    let groups = kmeans(&uploads, k, seed, KMEANS_MAX_ITERS)?;
    Ok(Preprocessed {
        groups,
        uploads,
        uplink_bytes,
    })
}

/// Client-selection state for one experiment.
#[derive(Debug, Clone)]
pub enum Selector {
    Random {
        devices: usize,
        k: usize,
    },
    /// Fixed groups; one uniformly random member per group each round.
    Grouped {
        groups: DeviceGroups,
    },
    KCenter {
        k: usize,
        period: usize,
        /// Most recent full model known for each device.
        latest: Vec<Vec<f64>>,
        groups: Option<DeviceGroups>,
    },
}

/// Devices picked for one round, plus any weight uploads the pick required.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub devices: Vec<usize>,
    pub recluster_uplink_bytes: u64,
}

impl Selector {
    pub fn random(devices: usize, k: usize) -> Result<Self> {
        if k == 0 || k > devices {
            return Err(Error::config(format!(
                "cannot select {k} of {devices} devices"
            )));
        }
        Ok(Selector::Random { devices, k })
    }

    pub fn grouped(groups: DeviceGroups) -> Self {
        Selector::Grouped { groups }
    }

    pub fn k_center(
        devices: usize,
        k: usize,
        period: usize,
        initial: &ModelWeights,
    ) -> Result<Self> {
        if k == 0 || k > devices {
            return Err(Error::config(format!(
                "cannot select {k} of {devices} devices"
            )));
        }
        if period == 0 {
            return Err(Error::config("recluster period must be positive"));
        }
        Ok(Selector::KCenter {
            k,
            period,
            latest: vec![initial.params().to_vec(); devices],
            groups: None,
        })
    }

    pub fn groups(&self) -> Option<&DeviceGroups> {
        match self {
            Selector::Random { .. } => None,
            Selector::Grouped { groups } => Some(groups),
            Selector::KCenter { groups, .. } => groups.as_ref(),
        }
    }

    /// Pick the devices for round `round` (1-based). The result is sorted.
    pub fn select(&mut self, round: usize, rng: &mut Stream) -> Result<Selection> {
        let mut recluster_uplink_bytes = 0;
        let mut devices = match self {
            Selector::Random { devices, k } => index::sample(rng, *devices, *k).into_vec(),
            Selector::Grouped { groups } => pick_per_group(groups, rng),
            Selector::KCenter {
                k,
                period,
                latest,
                groups,
            } => {
                if groups.is_none() || round % *period == 1 % *period {
                    let seed = rng.random();
                    *groups = Some(kmeans(latest, *k, seed, KMEANS_MAX_ITERS)?);
                    recluster_uplink_bytes = latest.iter().map(|w| w.len() as u64 * 8).sum();
                }
                pick_per_group(groups.as_ref().unwrap(), rng)
            }
        };
        devices.sort_unstable();
        Ok(Selection {
            devices,
            recluster_uplink_bytes,
        })
    }

    /// Record a device's latest full model (used by K-Center).
    pub fn observe(&mut self, device: usize, weights: &ModelWeights) {
        if let Selector::KCenter { latest, .. } = self {
            latest[device].clear();
            latest[device].extend_from_slice(weights.params());
        }
    }
}

fn pick_per_group(groups: &DeviceGroups, rng: &mut Stream) -> Vec<usize> {
    groups
        .members()
        .iter()
        .map(|m| m[rng.random_range(0..m.len())])
        .collect()
}

/// One device's contribution to an aggregation step.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUpdate {
    pub device: usize,
    pub delta: WeightDelta,
    /// Sample count of the device.
    pub samples: usize,
}

/// `w + Σ Dᵢ Δᵢ / Σ Dᵢ`, summed in ascending device order.
pub fn aggregate(w: &ModelWeights, updates: &[DeviceUpdate]) -> Result<ModelWeights> {
    if updates.is_empty() {
        return Err(Error::contract("aggregation needs at least one update"));
    }
    let mut ordered: Vec<&DeviceUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.device);
    if ordered.windows(2).any(|p| p[0].device == p[1].device) {
        return Err(Error::contract("duplicate device in aggregation"));
    }
    for u in &ordered {
        if u.delta.spec() != w.spec() {
            return Err(Error::contract(format!(
                "delta from device {} does not match the model shape",
                u.device
            )));
        }
        if u.samples == 0 {
            return Err(Error::contract(format!(
                "device {} reports zero samples",
                u.device
            )));
        }
    }
    let equal = ordered.iter().all(|u| u.samples == ordered[0].samples);
    let mut acc = vec![0.0; w.params().len()];
    for u in &ordered {
        let weight = if equal { 1.0 } else { u.samples as f64 };
        for (a, d) in acc.iter_mut().zip(u.delta.values()) {
            *a += weight * d;
        }
    }
    let total = if equal {
        ordered.len() as f64
    } else {
        ordered.iter().map(|u| u.samples as f64).sum()
    };
    let params = w
        .params()
        .iter()
        .zip(&acc)
        .map(|(p, a)| p + a / total)
        .collect();
    ModelWeights::from_params(w.spec().clone(), params)
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub selected: Vec<usize>,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Deltas uploaded by the selected devices.
    pub uplink_bytes: u64,
    /// Global weights dispatched to the selected devices.
    pub downlink_bytes: u64,
    /// Full-model uploads for K-Center re-clustering (zero otherwise).
    pub recluster_uplink_bytes: u64,
}

/// Everything the round loop needs, already materialized.
#[derive(Debug, Clone)]
pub struct Federation {
    pub devices: Vec<DeviceDataset>,
    pub test: Vec<Sample>,
    pub model: ModelSpec,
    pub train: TrainParams,
    pub rounds: usize,
    /// Devices per round (and group count for the grouped strategies).
    pub k: usize,
    pub strategy: StrategyKind,
    pub extractor: FeatureExtractor,
    pub lsh: LshConfig,
    pub recluster_period: usize,
    pub seed: u64,
    /// Worker threads for local training; `None` uses the global pool.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub records: Vec<RoundRecord>,
    pub initial_weights: ModelWeights,
    pub final_weights: ModelWeights,
    pub groups: Option<DeviceGroups>,
    pub preprocess_uplink_bytes: u64,
}

impl Federation {
    pub fn run(&self) -> Result<Outcome> {
        self.run_with(|_| Ok(()))
    }

    /// Run every round, handing each record to `sink` as soon as it exists.
    pub fn run_with(&self, mut sink: impl FnMut(&RoundRecord) -> Result<()>) -> Result<Outcome> {
        self.train.validate()?;
        let n = self.devices.len();
        if self.k == 0 || self.k > n {
            return Err(Error::config(format!(
                "cannot select {} of {n} devices",
                self.k
            )));
        }
        if self.test.is_empty() {
            return Err(Error::config("test set is empty"));
        }
        let streams = Streams::new(self.seed);
        let initial = nn::init_weights(&self.model, streams.seed("init", &[]));

        let mut preprocess_uplink_bytes = 0;
        let mut selector = match self.strategy {
            StrategyKind::FedAvg => Selector::random(n, self.k)?,
            StrategyKind::Fldg | StrategyKind::FldgL => {
                let mode = if self.strategy == StrategyKind::FldgL {
                    GroupingMode::Lsh(self.lsh)
                } else {
                    GroupingMode::Plain
                };
                let pre = preprocess_detailed(
                    &self.devices,
                    &self.extractor,
                    self.k,
                    mode,
                    streams.seed("kmeans", &[]),
                )?;
                preprocess_uplink_bytes = pre.uplink_bytes;
                Selector::grouped(pre.groups)
            }
            StrategyKind::KCenter => {
                Selector::k_center(n, self.k, self.recluster_period, &initial)?
            }
        };

        let pool = match self.threads {
            Some(t) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t.max(1))
                    .build()
                    .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?,
            ),
            None => None,
        };

        let wire = self.model.param_count() as u64 * 8;
        let mut global = initial.clone();
        let mut records = Vec::with_capacity(self.rounds);
        for round in 1..=self.rounds {
            let mut select_rng = streams.stream("select", &[round as u64]);
            let selection = selector.select(round, &mut select_rng)?;

            let train_one = |&device: &usize| -> Result<DeviceUpdate> {
                let mut rng = streams.stream("train", &[round as u64, device as u64]);
                let data = &self.devices[device];
                let delta = nn::local_train(&global, data, &self.train, &mut rng)
                    .map_err(|e| e.in_round(round))?;
                Ok(DeviceUpdate {
                    device,
                    delta,
                    samples: data.len(),
                })
            };
            let updates: Vec<DeviceUpdate> = match &pool {
                Some(p) => p.install(|| {
                    selection
                        .devices
                        .par_iter()
                        .map(train_one)
                        .collect::<Result<_>>()
                }),
                None => selection.devices.par_iter().map(train_one).collect(),
            }?;

            if matches!(selector, Selector::KCenter { .. }) {
                for u in &updates {
                    selector.observe(u.device, &global.apply(&u.delta)?);
                }
            }
            global = aggregate(&global, &updates)?;
            let (test_loss, test_accuracy) = nn::evaluate(&global, &self.test)?;
            let k = selection.devices.len() as u64;
            let record = RoundRecord {
                round,
                selected: selection.devices,
                test_accuracy,
                test_loss,
                uplink_bytes: k * wire,
                downlink_bytes: k * wire,
                recluster_uplink_bytes: selection.recluster_uplink_bytes,
            };
            sink(&record)?;
            records.push(record);
        }
        Ok(Outcome {
            records,
            initial_weights: initial,
            final_weights: global,
            groups: selector.groups().cloned(),
            preprocess_uplink_bytes,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::clustering::purity;
    use crate::data::{partition, NonIidCase, SyntheticSpec};
    use crate::nn::{gradient, init_weights, Batch};
    use crate::rng;

    fn spec(dims: &[usize]) -> ModelSpec {
        ModelSpec::new(dims.to_vec()).unwrap()
    }

    fn delta(s: &ModelSpec, v: Vec<f64>) -> WeightDelta {
        WeightDelta::new(s.clone(), v).unwrap()
    }

    fn fixture(
        classes: usize,
        dim: usize,
        n: usize,
        per_device: usize,
        case: NonIidCase,
        seed: u64,
    ) -> (Vec<DeviceDataset>, Vec<Sample>) {
        let syn = SyntheticSpec {
            class_count: classes,
            input_dim: dim,
            per_class: n * per_device / classes + per_device,
            test_per_class: 50,
            ..SyntheticSpec::default()
        };
        let (train, test) = syn.generate(seed).unwrap();
        (
            partition(&train, n, per_device, case, seed).unwrap(),
            test.samples,
        )
    }

    #[test]
    fn opposite_deltas_cancel() {
        let s = spec(&[2, 2]);
        let w = init_weights(&s, 1);
        let d: Vec<f64> = (0..6).map(|i| i as f64 * 0.25 - 0.5).collect();
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let out = aggregate(
            &w,
            &[
                DeviceUpdate {
                    device: 0,
                    delta: delta(&s, d),
                    samples: 10,
                },
                DeviceUpdate {
                    device: 1,
                    delta: delta(&s, neg),
                    samples: 10,
                },
            ],
        )
        .unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn single_update_is_applied_verbatim() {
        let s = spec(&[2, 2]);
        let w = init_weights(&s, 1);
        let d = delta(&s, vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0]);
        let out = aggregate(
            &w,
            &[DeviceUpdate {
                device: 4,
                delta: d.clone(),
                samples: 7,
            }],
        )
        .unwrap();
        assert_eq!(out, w.apply(&d).unwrap());
    }

    #[test]
    fn weighting_follows_sample_counts() {
        let s = spec(&[1, 1]);
        let w = ModelWeights::zeros(s.clone());
        let out = aggregate(
            &w,
            &[
                DeviceUpdate {
                    device: 0,
                    delta: delta(&s, vec![1.0, 0.0]),
                    samples: 3,
                },
                DeviceUpdate {
                    device: 1,
                    delta: delta(&s, vec![0.0, 4.0]),
                    samples: 1,
                },
            ],
        )
        .unwrap();
        assert_eq!(out.params(), &[0.75, 1.0]);
    }

    #[test]
    fn aggregate_contract_errors() {
        let s = spec(&[1, 1]);
        let w = ModelWeights::zeros(s.clone());
        assert!(matches!(aggregate(&w, &[]), Err(Error::Contract(_))));
        let other = spec(&[2, 1]);
        let bad = DeviceUpdate {
            device: 0,
            delta: delta(&other, vec![0.0; 3]),
            samples: 1,
        };
        assert!(matches!(aggregate(&w, &[bad]), Err(Error::Contract(_))));
        let a = DeviceUpdate {
            device: 2,
            delta: delta(&s, vec![0.0; 2]),
            samples: 1,
        };
        assert!(matches!(
            aggregate(&w, &[a.clone(), a]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn full_participation_matches_centralized_step() {
        let s = spec(&[4, 8, 3]);
        let w = init_weights(&s, 2);
        let (devices, _) = fixture(3, 4, 3, 12, NonIidCase::Case1, 2);
        let lr = 0.1;
        let params = TrainParams {
            epochs: 1,
            lr,
            batch_size: 1000,
        };
        let updates: Vec<DeviceUpdate> = devices
            .iter()
            .map(|d| DeviceUpdate {
                device: d.device_id,
                delta: nn::local_train(&w, d, &params, &mut rng::stream(d.device_id as u64))
                    .unwrap(),
                samples: d.len(),
            })
            .collect();
        let next = aggregate(&w, &updates).unwrap();
        let pooled = Batch::from_samples(devices.iter().flat_map(|d| d.samples.iter())).unwrap();
        let g = gradient(&w, &pooled).unwrap();
        for ((a, p), g) in next.params().iter().zip(w.params()).zip(&g) {
            assert!((a - (p - lr * g)).abs() < 1e-8);
        }
    }

    #[test]
    fn grouped_selection_picks_one_per_group() {
        let groups = DeviceGroups::new(vec![0, 1, 2, 0, 1, 2, 2], 3).unwrap();
        let mut sel = Selector::grouped(groups.clone());
        let mut r = rng::stream(3);
        for round in 1..50 {
            let picked = sel.select(round, &mut r).unwrap().devices;
            let mut gs: Vec<usize> = picked.iter().map(|&d| groups.group_of(d)).collect();
            gs.sort_unstable();
            assert_eq!(gs, vec![0, 1, 2]);
        }
    }

    #[test]
    fn singleton_groups_and_full_fedavg_select_everyone() {
        let mut sel = Selector::grouped(DeviceGroups::new((0..5).collect(), 5).unwrap());
        let mut all = Selector::random(5, 5).unwrap();
        let mut r = rng::stream(0);
        for round in 1..10 {
            assert_eq!(
                sel.select(round, &mut r).unwrap().devices,
                vec![0, 1, 2, 3, 4]
            );
            assert_eq!(
                all.select(round, &mut r).unwrap().devices,
                vec![0, 1, 2, 3, 4]
            );
        }
    }

    #[test]
    fn grouped_selection_is_uniform_within_groups() {
        let groups = DeviceGroups::new((0..100).map(|d| d % 10).collect(), 10).unwrap();
        let mut sel = Selector::grouped(groups);
        let mut counts = vec![0usize; 100];
        let mut r = rng::stream(42);
        for round in 1..=1000 {
            for d in sel.select(round, &mut r).unwrap().devices {
                counts[d] += 1;
            }
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - 100.0).powi(2) / 100.0)
            .sum();
        for &c in &counts {
            let f = c as f64 / 1000.0;
            assert!((f - 0.1).abs() <= 0.03, "frequency {f}");
        }
        // 99 degrees of freedom; the 0.999 quantile is about 148.
        assert!(chi2 < 148.0, "chi2 {chi2}");
    }

    #[test]
    fn fedavg_selects_k_distinct() {
        let mut sel = Selector::random(20, 5).unwrap();
        let mut r = rng::stream(1);
        for round in 1..20 {
            let d = sel.select(round, &mut r).unwrap().devices;
            assert_eq!(d.len(), 5);
            assert!(d.windows(2).all(|p| p[0] < p[1]));
        }
        assert!(Selector::random(3, 4).is_err());
    }

    #[test]
    fn k_center_reclusters_on_schedule() {
        let s = spec(&[2, 2]);
        let w = init_weights(&s, 0);
        let mut sel = Selector::k_center(6, 3, 10, &w).unwrap();
        let mut r = rng::stream(5);
        for round in 1..=21 {
            let pick = sel.select(round, &mut r).unwrap();
            assert_eq!(pick.devices.len(), 3);
            let expect = if round % 10 == 1 { 6 * 6 * 8 } else { 0 };
            assert_eq!(pick.recluster_uplink_bytes, expect, "round {round}");
            for &d in &pick.devices {
                let moved: Vec<f64> = w.params().iter().map(|p| p + d as f64).collect();
                sel.observe(d, &ModelWeights::from_params(s.clone(), moved).unwrap());
            }
        }
    }

    #[test]
    fn lsh_bound_is_enforced() {
        let (devices, _) = fixture(10, 8, 20, 10, NonIidCase::Case1, 0);
        let ex = FeatureExtractor::identity(8).unwrap();
        let mode = GroupingMode::Lsh(LshConfig {
            h: 2,
            r: 3.0,
            seed: 0,
        });
        let err = preprocess(&devices, &ex, 10, mode, 0).unwrap_err();
        assert!(err.to_string().contains("= 3"), "{err}");
    }

    #[test]
    fn preprocessing_recovers_labels_on_both_paths() {
        let (devices, _) = fixture(4, 8, 20, 40, NonIidCase::Case1, 9);
        let ex = FeatureExtractor::identity(8).unwrap();
        let labels: Vec<usize> = (0..20).map(|d| d % 4).collect();
        let plain = preprocess(&devices, &ex, 4, GroupingMode::Plain, 1).unwrap();
        let fine = GroupingMode::Lsh(LshConfig {
            h: 8,
            r: 0.01,
            seed: 4,
        });
        let hashed = preprocess(&devices, &ex, 4, fine, 1).unwrap();
        assert_eq!(purity(&plain, &labels).unwrap(), 1.0);
        assert_eq!(purity(&hashed, &labels).unwrap(), 1.0);
        let singletons = preprocess(&devices, &ex, 20, GroupingMode::Plain, 1).unwrap();
        assert!(singletons.members().iter().all(|m| m.len() == 1));
    }

    fn federation(strategy: StrategyKind, rounds: usize) -> Federation {
        let (devices, test) = fixture(4, 8, 8, 20, NonIidCase::Case1, 3);
        Federation {
            devices,
            test,
            model: spec(&[8, 6, 4]),
            train: TrainParams {
                epochs: 1,
                lr: 0.05,
                batch_size: 10,
            },
            rounds,
            k: 4,
            strategy,
            extractor: FeatureExtractor::identity(8).unwrap(),
            lsh: LshConfig {
                h: 5,
                r: 3.0,
                seed: 1,
            },
            recluster_period: DEFAULT_RECLUSTER_PERIOD,
            seed: 11,
            threads: Some(2),
        }
    }

    #[test]
    fn zero_rounds_keeps_initial_model() {
        let out = federation(StrategyKind::FedAvg, 0).run().unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.final_weights, out.initial_weights);
    }

    #[test]
    fn runs_are_reproducible_across_thread_counts() {
        for strategy in StrategyKind::ALL {
            let mut fed = federation(strategy, 12);
            let a = fed.run().unwrap();
            fed.threads = Some(1);
            let b = fed.run().unwrap();
            assert_eq!(a.records, b.records, "{strategy}");
            assert_eq!(a.final_weights, b.final_weights);
            let param_bytes = fed.model.param_count() as u64 * 8;
            for r in &a.records {
                assert_eq!(r.selected.len(), 4);
                assert_eq!(r.uplink_bytes, 4 * param_bytes);
            }
        }
    }

    #[test]
    fn grouped_strategies_cover_every_group_every_round() {
        for strategy in [StrategyKind::Fldg, StrategyKind::FldgL] {
            let out = federation(strategy, 10).run().unwrap();
            let groups = out.groups.unwrap();
            for r in &out.records {
                let mut gs: Vec<usize> = r.selected.iter().map(|&d| groups.group_of(d)).collect();
                gs.sort_unstable();
                assert_eq!(gs, (0..4).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn k_center_pays_more_upload_than_feature_grouping() {
        let fed = federation(StrategyKind::KCenter, 11);
        let kc = fed.run().unwrap();
        let fl = Federation {
            strategy: StrategyKind::Fldg,
            ..fed.clone()
        }
        .run()
        .unwrap();
        let recluster: u64 = kc.records.iter().map(|r| r.recluster_uplink_bytes).sum();
        assert!(fed.model.param_count() > fed.extractor.output_dim());
        assert!(recluster > fl.preprocess_uplink_bytes);
        assert_eq!(
            kc.records[0].recluster_uplink_bytes,
            8 * fed.model.param_count() as u64 * 8
        );
        assert_eq!(
            kc.records[10].recluster_uplink_bytes,
            8 * fed.model.param_count() as u64 * 8
        );
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in StrategyKind::ALL {
            assert_eq!(s.to_string().parse::<StrategyKind>().unwrap(), s);
        }
        assert!("greedy".parse::<StrategyKind>().is_err());
    }

    proptest! {
        #[test]
        fn aggregate_ignores_update_order(
            vals in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..6),
            sizes in prop::collection::vec(1usize..50, 6),
            rot in 0usize..6,
        ) {
            let s = spec(&[2, 2]);
            let w = init_weights(&s, 3);
            let mut updates: Vec<DeviceUpdate> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| DeviceUpdate { device: i, delta: delta(&s, v.clone()), samples: sizes[i] })
                .collect();
            let a = aggregate(&w, &updates).unwrap();
            let len = updates.len();
            updates.rotate_left(rot % len);
            updates.reverse();
            prop_assert_eq!(a, aggregate(&w, &updates).unwrap());
        }

        #[test]
        fn equal_sizes_give_plain_mean(
            vals in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..6),
            size in 1usize..1000,
        ) {
            let s = spec(&[2, 2]);
            let w = init_weights(&s, 3);
            let updates: Vec<DeviceUpdate> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| DeviceUpdate { device: i, delta: delta(&s, v.clone()), samples: size })
                .collect();
            let out = aggregate(&w, &updates).unwrap();
            for j in 0..6 {
                let mut sum = 0.0;
                for v in &vals {
                    sum += v[j];
                }
                prop_assert_eq!(out.params()[j], w.params()[j] + sum / vals.len() as f64);
            }
        }
    }
}
