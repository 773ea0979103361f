//! K-Means device grouping (Lloyd iterations with k-means++ seeding).

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Device index → group index, with every group non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceGroups {
    assignment: Vec<usize>,
    k: usize,
}

impl DeviceGroups {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("group count must be positive"));
        }
        let mut seen = vec![false; k];
        for (d, &g) in assignment.iter().enumerate() {
            if g >= k {
                return Err(Error::contract(format!(
                    "device {d} assigned to group {g} >= {k}"
                )));
            }
            seen[g] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::contract(format!("group {empty} has no devices")));
        }
        Ok(Self { assignment, k })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn group_count(&self) -> usize {
        self.k
    }

    pub fn device_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn group_of(&self, device: usize) -> usize {
        self.assignment[device]
    }

    /// Device indices per group, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (d, &g) in self.assignment.iter().enumerate() {
            groups[g].push(d);
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Independent k-means++ starts; the lowest final WCSS wins.
    pub restarts: usize,
}

/// Starts used by [`kmeans`].
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutcome {
    pub groups: DeviceGroups,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.unwrap()
        } else {
            // Every remaining point coincides with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centroids.push(points[next].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().unwrap()));
        }
    }
    centroids
}

/// Move the point farthest from its centroid into each empty cluster. Donors
/// must keep at least one member.
fn repair_empty(
    points: &[Vec<f64>],
    assignment: &mut [usize],
    centroids: &mut [Vec<f64>],
    counts: &mut [usize],
) {
    for empty in 0..centroids.len() {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let g = assignment[i];
            if counts[g] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[g]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k ≤ n leaves a cluster with a spare point");
        counts[assignment[i]] -= 1;
        assignment[i] = empty;
        counts[empty] = 1;
        centroids[empty] = points[i].clone();
    }
}

fn update_centroids(
    points: &[Vec<f64>],
    assignment: &[usize],
    k: usize,
    dim: usize,
) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &g) in points.iter().zip(assignment) {
        counts[g] += 1;
        for (s, v) in sums[g].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect()
}

fn wcss(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &g)| sq_dist(p, &centroids[g]))
        .sum()
}

/// Cluster `points` into `params.k` non-empty groups.
pub fn kmeans_detailed(points: &[Vec<f64>], params: KMeansParams) -> Result<KMeansOutcome> {
    let KMeansParams {
        k,
        seed,
        max_iters,
        restarts,
    } = params;
    let n = points.len();
    if k == 0 {
        return Err(Error::config("K-Means needs at least one group"));
    }
    if k > n {
        return Err(Error::config(format!(
            "cannot form {k} groups from {n} points"
        )));
    }
    if max_iters == 0 {
        return Err(Error::config("K-Means needs at least one iteration"));
    }
    if restarts == 0 {
        return Err(Error::config("K-Means needs at least one start"));
    }
    let dim = points[0].len();
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return Err(Error::contract(format!(
            "point {i} has dimension {}, expected {dim}",
            points[i].len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "K-Means input has non-finite coordinates".into(),
        ));
    }

    let mut rng = rng::stream(seed);
    let mut best: Option<KMeansOutcome> = None;
    for _ in 0..restarts {
        let run = lloyd(points, k, max_iters, &mut rng)?;
        let better = |b: &KMeansOutcome| run.wcss_history.last() < b.wcss_history.last();
        if best.as_ref().is_none_or(better) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> Result<KMeansOutcome> {
    let (n, dim) = (points.len(), points[0].len());
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let mut counts = vec![0usize; k];
        for &g in &next {
            counts[g] += 1;
        }
        repair_empty(points, &mut next, &mut centroids, &mut counts);
        let changed = next != assignment;
        assignment = next;
        centroids = update_centroids(points, &assignment, k, dim);
        history.push(wcss(points, &assignment, &centroids));
        if !changed {
            break;
        }
    }
    Ok(KMeansOutcome {
        groups: DeviceGroups::new(assignment, k)?,
        centroids,
        wcss_history: history,
        iterations,
    })
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<DeviceGroups> {
    let params = KMeansParams {
        k,
        seed,
        max_iters,
        restarts: DEFAULT_RESTARTS,
    };
    Ok(kmeans_detailed(points, params)?.groups)
}

/// Fraction of devices that share their group's most common label.
pub fn purity(groups: &DeviceGroups, labels: &[usize]) -> Result<f64> {
    if labels.len() != groups.device_count() {
        return Err(Error::contract(format!(
            "{} labels for {} devices",
            labels.len(),
            groups.device_count()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("purity of an empty grouping is undefined"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0usize; classes]; groups.group_count()];
    for (&g, &l) in groups.assignment().iter().zip(labels) {
        counts[g][l] += 1;
    }
    let majority: usize = counts
        .iter()
        .map(|c| c.iter().max().copied().unwrap_or(0))
        .sum();
    Ok(majority as f64 / labels.len() as f64)
}
