//! Datasets: IDX loading, synthetic Gaussian classes, and the non-IID
//! device partitioner.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Streams};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// One labeled input. Inputs are shared, so partitioning never copies pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Arc<[f64]>,
    pub label: usize,
}

impl Sample {
    pub fn new(input: Vec<f64>, label: usize) -> Self {
        Self {
            input: Arc::from(input),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_count: usize,
    pub input_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_count: usize, input_dim: usize) -> Result<Self> {
        if class_count == 0 || input_dim == 0 {
            return Err(Error::contract(
                "class count and input dimension must be positive",
            ));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= class_count {
                return Err(Error::contract(format!(
                    "sample {i} has label {} but there are {class_count} classes",
                    s.label
                )));
            }
            if s.input.len() != input_dim {
                return Err(Error::contract(format!(
                    "sample {i} has dimension {}, expected {input_dim}",
                    s.input.len()
                )));
            }
        }
        Ok(Self {
            samples,
            class_count,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(self.samples.iter().map(|s| s.label), self.class_count)
    }

    /// Dump as `label,pixel0,pixel1,...` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
            write!(out, "label")?;
            for j in 0..self.input_dim {
                write!(out, ",pixel{j}")?;
            }
            writeln!(out)?;
            for s in &self.samples {
                write!(out, "{}", s.label)?;
                for v in s.input.iter() {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }
}

fn histogram(labels: impl Iterator<Item = usize>, classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for l in labels {
        h[l] += 1;
    }
    h
}

/// The local data of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub device_id: usize,
    pub samples: Vec<Sample>,
    /// Indices of the samples in the dataset they were drawn from.
    pub source_indices: Vec<usize>,
}

impl DeviceDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        histogram(self.samples.iter().map(|s| s.label), classes)
    }

    /// Most frequent label, ties toward the lowest label.
    pub fn majority_label(&self, classes: usize) -> usize {
        let h = self.label_histogram(classes);
        let mut best = 0;
        for (l, &c) in h.iter().enumerate() {
            if c > h[best] {
                best = l;
            }
        }
        best
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "file ends inside the header".into(),
        })
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = read_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic number {found:#010x}, expected {magic:#010x}"),
        });
    }
    let shape = (0..dims)
        .map(|d| read_u32(&bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * dims;
    let expected = shape.iter().product::<usize>();
    let body = &bytes[header..];
    if body.len() != expected {
        let (offset, message) = if body.len() < expected {
            (
                bytes.len(),
                format!(
                    "truncated: header promises {expected} data bytes, found {}",
                    body.len()
                ),
            )
        } else {
            (
                header + expected,
                format!("{} trailing bytes after data", body.len() - expected),
            )
        };
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        });
    }
    Ok((shape, body.to_vec()))
}

/// Load an IDX image/label file pair (MNIST layout). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (img_shape, pixels) = read_idx(images_path, IMAGES_MAGIC, 3)?;
    let (lbl_shape, labels) = read_idx(labels_path, LABELS_MAGIC, 1)?;
    if img_shape[0] != lbl_shape[0] {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!(
                "label count {} does not match image count {}",
                lbl_shape[0], img_shape[0]
            ),
        });
    }
    let input_dim = img_shape[1] * img_shape[2];
    if input_dim == 0 {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: 8,
            message: "images have zero pixels".into(),
        });
    }
    let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let samples = pixels
        .chunks_exact(input_dim)
        .zip(&labels)
        .map(|(px, &l)| {
            Sample::new(
                px.iter().map(|&p| f64::from(p) / 255.0).collect(),
                l as usize,
            )
        })
        .collect();
    Dataset::new(samples, class_count, input_dim)
}

/// Gaussian class clusters: class `c` is drawn from `N(mean_c, noise² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub input_dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub noise: f64,
    /// Typical distance between two class means.
    pub separation: f64,
    /// Constant added to every coordinate of every mean. Mimics the shared
    /// bright-pixel component of image data, which is what makes skewed local
    /// training drift.
    pub offset: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 10,
            input_dim: 32,
            per_class: 6000,
            test_per_class: 1000,
            noise: 1.0,
            separation: 8.0,
            offset: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.input_dim == 0 || self.per_class == 0 {
            return Err(Error::config(
                "synthetic class count, dimension and size must be positive",
            ));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::config("synthetic noise must be positive"));
        }
        if !self.offset.is_finite() {
            return Err(Error::config("synthetic offset must be finite"));
        }
        if !(self.separation.is_finite() && self.separation >= 4.0 * self.noise) {
            return Err(Error::config(format!(
                "synthetic separation {} must be at least 4x the noise {}",
                self.separation, self.noise
            )));
        }
        Ok(())
    }

    /// Class means, resampled until every pair is at least `4·noise` apart.
    pub fn class_means(&self, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let scale = self.separation / (2.0 * self.input_dim as f64).sqrt();
        let min_dist = 4.0 * self.noise;
        let mut rng = rng::stream(seed);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(self.class_count);
        // Place means one at a time, redrawing any that land too close to an earlier one.
        while means.len() < self.class_count {
            let placed = (0..10_000).find_map(|_| {
                let m: Vec<f64> = (0..self.input_dim)
                    .map(|_| self.offset + scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                means
                    .iter()
                    .all(|o| euclidean(o, &m) >= min_dist)
                    .then_some(m)
            });
            match placed {
                Some(m) => means.push(m),
                None => {
                    return Err(Error::config(format!(
                        "could not place {} class means {} apart in {} dimensions",
                        self.class_count, min_dist, self.input_dim
                    )))
                }
            }
        }
        Ok(means)
    }

    fn draw(&self, means: &[Vec<f64>], per_class: usize, seed: u64) -> Result<Dataset> {
        let mut rng = rng::stream(seed);
        let mut samples = Vec::with_capacity(per_class * self.class_count);
        for (label, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                let x = mean
                    .iter()
                    .map(|m| m + self.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(Sample::new(x, label));
            }
        }
        Dataset::new(samples, self.class_count, self.input_dim)
    }

    /// Training set and an independent test set sharing the same class means.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let streams = Streams::new(seed);
        let means = self.class_means(streams.seed("synthetic-means", &[]))?;
        let train = self.draw(&means, self.per_class, streams.seed("synthetic-train", &[]))?;
        let test = self.draw(
            &means,
            self.test_per_class,
            streams.seed("synthetic-test", &[]),
        )?;
        Ok((train, test))
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Gaussian class clusters with unit noise and the default separation.
pub fn gen_synthetic(
    class_count: usize,
    input_dim: usize,
    per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    let spec = SyntheticSpec {
        class_count,
        input_dim,
        per_class,
        test_per_class: 0,
        ..SyntheticSpec::default()
    };
    Ok(spec.generate(seed)?.0)
}

/// Label skew of each device's data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NonIidCase {
    /// All samples carry one label.
    Case1,
    /// Half the samples each of two labels.
    Case2,
    /// 80% one label, the rest spread over the others.
    Case3,
    /// 50% one label, the rest spread over the others.
    Case4,
    Iid,
}

impl NonIidCase {
    pub const ALL: [NonIidCase; 5] = [
        NonIidCase::Case1,
        NonIidCase::Case2,
        NonIidCase::Case3,
        NonIidCase::Case4,
        NonIidCase::Iid,
    ];

    /// Label that device `device` is built around.
    pub fn dominant_label(device: usize, classes: usize) -> usize {
        device % classes
    }

    /// Number of dominant-label samples in a device of size `per_device`.
    pub fn dominant_count(self, per_device: usize) -> usize {
        match self {
            NonIidCase::Case1 => per_device,
            NonIidCase::Case2 => per_device / 2,
            NonIidCase::Case3 => (4 * per_device).div_ceil(5),
            NonIidCase::Case4 => per_device.div_ceil(2),
            NonIidCase::Iid => 0,
        }
    }
}

impl fmt::Display for NonIidCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NonIidCase::Case1 => "case1",
            NonIidCase::Case2 => "case2",
            NonIidCase::Case3 => "case3",
            NonIidCase::Case4 => "case4",
            NonIidCase::Iid => "iid",
        })
    }
}

impl FromStr for NonIidCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "case1" => Ok(NonIidCase::Case1),
            "2" | "case2" => Ok(NonIidCase::Case2),
            "3" | "case3" => Ok(NonIidCase::Case3),
            "4" | "case4" => Ok(NonIidCase::Case4),
            "iid" | "0" => Ok(NonIidCase::Iid),
            other => Err(Error::config(format!(
                "unknown case '{other}' (expected 1, 2, 3, 4 or iid)"
            ))),
        }
    }
}

/// Whether a dataset sample may be handed to more than one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Every sample goes to at most one device.
    #[default]
    Exclusive,
    /// Devices draw independently; a sample may appear on several devices
    /// but never twice on the same one.
    Shared,
}

/// Per-device label counts for `case`.
fn composition(
    case: NonIidCase,
    device: usize,
    per_device: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut counts = vec![0; classes];
    let dominant = NonIidCase::dominant_label(device, classes);
    match case {
        NonIidCase::Case1 => counts[dominant] = per_device,
        NonIidCase::Case2 => {
            counts[dominant] = per_device / 2;
            counts[(dominant + 1) % classes] = per_device / 2;
        }
        NonIidCase::Case3 | NonIidCase::Case4 => {
            let major = case.dominant_count(per_device);
            counts[dominant] = major;
            for _ in major..per_device {
                let k = rng.random_range(0..classes - 1);
                counts[if k >= dominant { k + 1 } else { k }] += 1;
            }
        }
        NonIidCase::Iid => {
            for _ in 0..per_device {
                counts[rng.random_range(0..classes)] += 1;
            }
        }
    }
    counts
}

/// Split `ds` over `devices` devices of `per_device` samples each, with the
/// label skew of `case`.
pub fn partition(
    ds: &Dataset,
    devices: usize,
    per_device: usize,
    case: NonIidCase,
    seed: u64,
) -> Result<Vec<DeviceDataset>> {
    partition_with(ds, devices, per_device, case, Sampling::Exclusive, seed)
}

pub fn partition_with(
    ds: &Dataset,
    devices: usize,
    per_device: usize,
    case: NonIidCase,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<DeviceDataset>> {
    let classes = ds.class_count;
    if devices == 0 || per_device == 0 {
        return Err(Error::config(
            "device count and samples per device must be positive",
        ));
    }
    if case == NonIidCase::Case2 {
        if !per_device.is_multiple_of(2) {
            return Err(Error::config(format!(
                "case2 splits each device evenly over two labels; per_device {per_device} is odd"
            )));
        }
        if classes < 2 {
            return Err(Error::config("case2 needs at least two classes"));
        }
    }
    if matches!(case, NonIidCase::Case3 | NonIidCase::Case4)
        && classes < 2
        && case.dominant_count(per_device) < per_device
    {
        return Err(Error::config(format!("{case} needs at least two classes")));
    }

    let streams = Streams::new(seed);
    let mut plan_rng = streams.stream("partition-plan", &[]);
    let plans: Vec<Vec<usize>> = (0..devices)
        .map(|d| composition(case, d, per_device, classes, &mut plan_rng))
        .collect();

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in ds.samples.iter().enumerate() {
        pools[s.label].push(i);
    }

    for class in 0..classes {
        let supply = pools[class].len();
        let demand = match sampling {
            Sampling::Exclusive => plans.iter().map(|p| p[class]).sum::<usize>(),
            Sampling::Shared => plans.iter().map(|p| p[class]).max().unwrap_or(0),
        };
        if demand > supply {
            return Err(Error::Capacity {
                class,
                shortfall: demand - supply,
            });
        }
    }

    let mut draw_rng = streams.stream("partition-draw", &[]);
    if sampling == Sampling::Exclusive {
        for pool in &mut pools {
            pool.shuffle(&mut draw_rng);
        }
    }
    let mut cursors = vec![0usize; classes];
    let mut out = Vec::with_capacity(devices);
    for (device_id, plan) in plans.iter().enumerate() {
        let mut picked = Vec::with_capacity(per_device);
        for (class, &count) in plan.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let pool = &pools[class];
            match sampling {
                Sampling::Exclusive => {
                    picked.extend_from_slice(&pool[cursors[class]..cursors[class] + count]);
                    cursors[class] += count;
                }
                Sampling::Shared => {
                    picked.extend(
                        index::sample(&mut draw_rng, pool.len(), count)
                            .into_iter()
                            .map(|k| pool[k]),
                    );
                }
            }
        }
        out.push(DeviceDataset {
            device_id,
            samples: picked.iter().map(|&i| ds.samples[i].clone()).collect(),
            source_indices: picked,
        });
    }
    Ok(out)
}
