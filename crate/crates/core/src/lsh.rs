//! p-stable locality-sensitive hashing with Gaussian (2-stable) projections.
//!
//! Each function maps `v` to `floor((a·v + b) / r)` with `a ~ N(0, I)` and
//! `b ~ U[0, r]`, so nearby vectors in Euclidean distance collide with high
//! probability.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct LshFunction {
    pub a: Vec<f64>,
    pub b: f64,
    pub r: f64,
}

impl LshFunction {
    fn sample(d: usize, r: f64, rng: &mut Stream) -> Self {
        let a = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let b = rng.random_range(0.0..=r);
        Self { a, b, r }
    }

    pub fn eval(&self, v: &[f64]) -> Result<i64> {
        if v.len() != self.a.len() {
            return Err(Error::contract(format!(
                "vector has dimension {}, hash function expects {}",
                v.len(),
                self.a.len()
            )));
        }
        let dot: f64 = self.a.iter().zip(v).map(|(a, x)| a * x).sum();
        let q = ((dot + self.b) / self.r).floor();
        // i64::MIN is exactly -2^63 as a float; i64::MAX is not representable.
        let limit = -(i64::MIN as f64);
        if !q.is_finite() || !(-limit..limit).contains(&q) {
            return Err(Error::Numeric(format!(
                "hash value {q} does not fit in 64 bits"
            )));
        }
        Ok(q as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashVector(pub Vec<i64>);

impl HashVector {
    pub fn values(&self) -> &[i64] {
        &self.0
    }

    /// The codes as reals, for clustering.
    pub fn embed(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

/// `h` hash functions sharing one window size and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LshFamily {
    functions: Vec<LshFunction>,
    r: f64,
    dim: usize,
    /// `None` when the family was read back from text.
    seed: Option<u64>,
}

/// Smallest `h` with `r^h ≥ groups`, i.e. `ceil(log_r groups)`.
///
/// Windows of at most 1 impose no bound beyond `h ≥ 1`.
pub fn min_family_size(r: f64, groups: usize) -> usize {
    if r <= 1.0 || groups <= 1 {
        return 1;
    }
    let target = groups as f64;
    let mut reach = 1.0;
    let mut h = 0;
    while reach < target {
        reach *= r;
        h += 1;
    }
    h.max(1)
}

impl LshFamily {
    pub fn sample(h: usize, d: usize, r: f64, seed: u64) -> Result<Self> {
        if h == 0 {
            return Err(Error::config("LSH family needs at least one function"));
        }
        if d == 0 {
            return Err(Error::config("LSH input dimension must be positive"));
        }
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::config(format!(
                "LSH window size {r} must be positive"
            )));
        }
        let mut rng = rng::stream(seed);
        let functions = (0..h)
            .map(|_| LshFunction::sample(d, r, &mut rng))
            .collect();
        Ok(Self {
            functions,
            r,
            dim: d,
            seed: Some(seed),
        })
    }

    pub fn from_functions(functions: Vec<LshFunction>) -> Result<Self> {
        let first = functions
            .first()
            .ok_or_else(|| Error::config("LSH family needs at least one function"))?;
        let (r, dim) = (first.r, first.a.len());
        if !(r.is_finite() && r > 0.0) || dim == 0 {
            return Err(Error::config(
                "LSH functions need r > 0 and a nonempty projection",
            ));
        }
        for (i, f) in functions.iter().enumerate() {
            if f.r != r || f.a.len() != dim {
                return Err(Error::config(format!(
                    "LSH function {i} disagrees with the family's window or dimension"
                )));
            }
            if !(0.0..=r).contains(&f.b) || f.a.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "LSH function {i} has an invalid offset or projection"
                )));
            }
        }
        Ok(Self {
            functions,
            r,
            dim,
            seed: None,
        })
    }

    pub fn functions(&self) -> &[LshFunction] {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn window(&self) -> f64 {
        self.r
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn hash(&self, v: &FeatureVector) -> Result<HashVector> {
        self.hash_slice(v.values())
    }

    pub fn hash_slice(&self, v: &[f64]) -> Result<HashVector> {
        self.functions
            .iter()
            .map(|f| f.eval(v))
            .collect::<Result<Vec<_>>>()
            .map(HashVector)
    }

    /// One line per function: `r b a_0 a_1 ...`, space separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in &self.functions {
            write!(out, "{} {}", f.r, f.b).unwrap();
            for a in &f.a {
                write!(out, " {a}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut functions = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let values = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::config(format!("line {}: '{t}' is not a number", n + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() < 3 {
                return Err(Error::config(format!(
                    "line {}: expected r, b and at least one projection entry",
                    n + 1
                )));
            }
            functions.push(LshFunction {
                r: values[0],
                b: values[1],
                a: values[2..].to_vec(),
            });
        }
        Self::from_functions(functions)
    }
}

/// Monte-Carlo estimate of `Pr[f(x) = f(y)]` for `‖x − y‖ = distance`, over
/// freshly sampled single functions of dimension `d` and window `r`.
pub fn collision_rate(d: usize, r: f64, distance: f64, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::config("collision estimate needs at least one trial"));
    }
    if d == 0 || !(r.is_finite() && r > 0.0) || !(distance.is_finite() && distance >= 0.0) {
        return Err(Error::config(
            "collision estimate needs d ≥ 1, r > 0, distance ≥ 0",
        ));
    }
    let mut rng = rng::stream(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let f = LshFunction::sample(d, r, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let u: Vec<f64> = loop {
            let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break u.into_iter().map(|v| v / norm).collect();
            }
        };
        let y: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + distance * b).collect();
        if f.eval(&x)? == f.eval(&y)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}
