//! K-Means with k-means++ seeding and Lloyd iterations.
//!
//! Distances are squared Euclidean throughout and accumulate in `f64`;
//! centroids are stored as `f32` so quantized output is bit-identical to the
//! persisted codebook. The assignment step runs in parallel, but reductions
//! are always done sequentially in point order, so results do not depend on
//! the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once the relative distortion improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Centroids placed verbatim in the first slots at init. They are then
    /// updated by Lloyd like any other centroid unless `freeze_pinned` is set.
    pub pinned_centroids: Vec<Vec<f32>>,
    /// Keep pinned centroids fixed through every Lloyd update.
    pub freeze_pinned: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            pinned_centroids: Vec::new(),
            freeze_pinned: false,
        }
    }
}

impl KMeansConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// A fitted set of `k` centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    /// Mean squared distortion after every assignment step. The last entry
    /// belongs to the centroids stored here.
    trace: Vec<f64>,
    seed: u64,
}

impl Codebook {
    pub fn from_parts(
        centroids: Vec<f32>,
        k: usize,
        dim: usize,
        trace: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::InvalidShape(format!(
                "{k} x {dim} codebook with {} values",
                centroids.len()
            )));
        }
        if let Some(index) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        match trace.last() {
            Some(&d) if d.is_finite() && d >= 0.0 => {}
            _ => {
                return Err(Error::InvalidShape(
                    "distortion must be finite and >= 0".into(),
                ))
            }
        }
        Ok(Self {
            centroids,
            k,
            dim,
            trace,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn distortion_trace(&self) -> &[f64] {
        &self.trace
    }

    /// Final mean squared quantization error on the fit set.
    pub fn distortion(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }

    /// Index and squared distance of the nearest centroid. Ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &[f32]) -> (u32, f64) {
        nearest(&self.centroids, self.dim, x)
    }

    fn check_dim(&self, points: &FeatureMatrix) -> Result<()> {
        if points.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: points.dim(),
            });
        }
        Ok(())
    }

    /// Nearest-centroid token id for every row.
    pub fn assign(&self, points: &FeatureMatrix) -> Result<Vec<u32>> {
        self.check_dim(points)?;
        Ok(points
            .as_slice()
            .par_chunks_exact(self.dim)
            .map(|x| self.nearest(x).0)
            .collect())
    }

    /// Replaces every row by its nearest centroid.
    pub fn quantize(&self, points: &FeatureMatrix) -> Result<(FeatureMatrix, Vec<u32>)> {
        let ids = self.assign(points)?;
        let mut data = Vec::with_capacity(points.as_slice().len());
        for &id in &ids {
            data.extend_from_slice(self.centroid(id as usize));
        }
        Ok((points.with_data(data)?, ids))
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i as u32, d);
        }
    }
    best
}

/// Fits `k` centroids to the rows of `points`.
pub fn fit(points: &FeatureMatrix, k: usize, config: &KMeansConfig) -> Result<Codebook> {
    let n = points.frames();
    let dim = points.dim();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if k > n {
        return Err(Error::TooFewPoints { k, n });
    }
    if config.pinned_centroids.len() > k {
        return Err(Error::InvalidConfig(format!(
            "{} pinned centroids exceed k = {k}",
            config.pinned_centroids.len()
        )));
    }
    for (i, c) in config.pinned_centroids.iter().enumerate() {
        if c.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: c.len(),
            });
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "pinned centroid {i} is not finite"
            )));
        }
    }
    if config.tol.is_nan() || config.tol < 0.0 {
        return Err(Error::InvalidConfig("tol must be >= 0".into()));
    }

    let data = points.as_slice();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = init_plus_plus(data, dim, k, &config.pinned_centroids, &mut rng);

    let frozen = if config.freeze_pinned {
        config.pinned_centroids.len()
    } else {
        0
    };
    let mut trace = Vec::new();
    let mut assignment = assign_all(&centroids, dim, data);
    trace.push(mean_error(&assignment));

    for _ in 0..config.max_iters {
        let prev = *trace.last().unwrap();
        if prev == 0.0 {
            break;
        }
        let updated = update_centroids(&centroids, dim, data, &assignment, frozen);
        let next = assign_all(&updated, dim, data);
        let cur = mean_error(&next);
        // A non-improving step is discarded so the trace stays monotone even
        // when the f32 rounding of the means costs more than Lloyd gains.
        if cur > prev {
            break;
        }
        centroids = updated;
        assignment = next;
        trace.push(cur);
        if (prev - cur) / prev < config.tol {
            break;
        }
    }

    Codebook::from_parts(centroids, k, dim, trace, config.seed)
}

fn assign_all(centroids: &[f32], dim: usize, data: &[f32]) -> Vec<(u32, f64)> {
    data.par_chunks_exact(dim)
        .map(|x| nearest(centroids, dim, x))
        .collect()
}

fn mean_error(assignment: &[(u32, f64)]) -> f64 {
    let total: f64 = assignment.iter().map(|&(_, d)| d).sum();
    total / assignment.len() as f64
}

fn init_plus_plus(
    data: &[f32],
    dim: usize,
    k: usize,
    pinned: &[Vec<f32>],
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let n = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    for c in pinned {
        centroids.extend_from_slice(c);
    }
    if pinned.is_empty() {
        let first = rng.random_range(0..n);
        centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    }

    // Squared distance from each point to its nearest chosen centroid.
    let mut d2: Vec<f64> = data
        .par_chunks_exact(dim)
        .map(|x| nearest(&centroids, dim, x).1)
        .collect();

    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` a hair under `target`; take the last
            // candidate with positive weight.
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        let c = &data[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(c);
        d2.par_iter_mut()
            .zip(data.par_chunks_exact(dim))
            .for_each(|(d, x)| *d = d.min(sq_dist(x, c)));
    }
    centroids
}

/// One Lloyd update. A centroid left without points is re-seeded at the
/// point with the largest current error (each such point used at most once).
/// The first `frozen` centroids are copied through unchanged.
fn update_centroids(
    centroids: &[f32],
    dim: usize,
    data: &[f32],
    assignment: &[(u32, f64)],
    frozen: usize,
) -> Vec<f32> {
    let k = centroids.len() / dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &(id, _)) in data.chunks_exact(dim).zip(assignment) {
        let id = id as usize;
        counts[id] += 1;
        for (s, &v) in sums[id * dim..(id + 1) * dim].iter_mut().zip(x) {
            *s += f64::from(v);
        }
    }

    let mut out = vec![0.0f32; k * dim];
    let mut donors: Option<Vec<usize>> = None;
    let mut next_donor = 0;
    for c in 0..k {
        let dst = &mut out[c * dim..(c + 1) * dim];
        if c < frozen {
            dst.copy_from_slice(&centroids[c * dim..(c + 1) * dim]);
        } else if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (o, &s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *o = (s * inv) as f32;
            }
        } else {
            let order = donors.get_or_insert_with(|| {
                let mut idx: Vec<usize> = (0..assignment.len()).collect();
                idx.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
                idx
            });
            let p = order[next_donor.min(order.len() - 1)];
            next_donor += 1;
            dst.copy_from_slice(&data[p * dim..(p + 1) * dim]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DEFAULT_HOP_US;
    use rand_distr::{Distribution, Normal};

    fn matrix(rows: &[&[f32]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, DEFAULT_HOP_US).unwrap()
    }

    /// Best 2-partition of four points by exhaustive enumeration.
    fn best_two_partition(points: &[[f64; 2]]) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut total = 0.0;
            for side in [true, false] {
                let members: Vec<_> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| points[i])
                    .collect();
                let m = members.len() as f64;
                let cx = members.iter().map(|p| p[0]).sum::<f64>() / m;
                let cy = members.iter().map(|p| p[1]).sum::<f64>() / m;
                total += members
                    .iter()
                    .map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
                    .sum::<f64>();
            }
            best = best.min(total / n as f64);
        }
        best
    }

    #[test]
    fn four_point_example() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        assert_eq!(best_two_partition(&pts), 0.25);

        let m = matrix(&[&[0.0, 0.0], &[0.0, 1.0], &[10.0, 0.0], &[10.0, 1.0]]);
        let cb = fit(&m, 2, &KMeansConfig::default()).unwrap();
        let mut got: Vec<&[f32]> = (0..2).map(|i| cb.centroid(i)).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, vec![&[0.0, 0.5][..], &[10.0, 0.5][..]]);
        assert_eq!(cb.distortion(), 0.25);
    }

    #[test]
    fn k_equals_n_is_exact() {
        let m = matrix(&[&[1.0, 2.0], &[-3.0, 0.5], &[7.0, 7.0]]);
        let cb = fit(&m, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(cb.distortion(), 0.0);
        for row in m.rows() {
            assert_eq!(cb.nearest(row).1, 0.0);
        }
    }

    #[test]
    fn k_one_is_the_mean() {
        let m = matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]);
        let cb = fit(&m, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(cb.centroid(0), &[3.0, 5.0]);
    }

    #[test]
    fn errors() {
        let m = matrix(&[&[1.0], &[2.0]]);
        assert!(matches!(
            fit(&m, 3, &KMeansConfig::default()),
            Err(Error::TooFewPoints { k: 3, n: 2 })
        ));
        assert!(fit(&m, 0, &KMeansConfig::default()).is_err());
        let cb = fit(&m, 1, &KMeansConfig::default()).unwrap();
        let wrong = matrix(&[&[1.0, 2.0]]);
        assert!(matches!(cb.assign(&wrong), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn assign_by_inspection_and_tie_break() {
        let cb = Codebook::from_parts(vec![0.0, 0.5, 10.0, 0.5], 2, 2, vec![0.0], 0).unwrap();
        assert_eq!(cb.assign(&matrix(&[&[9.0, 0.0]])).unwrap(), vec![1]);
        assert_eq!(cb.assign(&matrix(&[&[5.0, 0.5]])).unwrap(), vec![0]);
    }

    #[test]
    fn pinned_centroid_is_used_at_init() {
        // Every point coincides with the pinned zero, so it can never move.
        let m = matrix(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]]);
        let cfg = KMeansConfig {
            pinned_centroids: vec![vec![0.0, 0.0]],
            ..KMeansConfig::default()
        };
        let cb = fit(&m, 2, &cfg).unwrap();
        assert_eq!(cb.centroid(0), &[0.0, 0.0]);
        assert_eq!(cb.centroid(1), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_pin_survives_lloyd() {
        let m = matrix(&[&[1.0, 1.0], &[1.2, 1.0], &[8.0, 8.0], &[9.0, 8.0]]);
        let moving = KMeansConfig {
            pinned_centroids: vec![vec![0.0, 0.0]],
            ..KMeansConfig::default()
        };
        assert_ne!(fit(&m, 2, &moving).unwrap().centroid(0), &[0.0, 0.0]);
        let frozen = KMeansConfig {
            freeze_pinned: true,
            ..moving
        };
        let cb = fit(&m, 2, &frozen).unwrap();
        assert_eq!(cb.centroid(0), &[0.0, 0.0]);
        let trace = cb.distortion_trace();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn duplicate_points_never_produce_nan() {
        let m = FeatureMatrix::new(6, 2, DEFAULT_HOP_US, vec![1.0; 12]).unwrap();
        let cb = fit(&m, 4, &KMeansConfig::default()).unwrap();
        assert!(cb.centroids().iter().all(|v| v.is_finite()));
        assert_eq!(cb.distortion(), 0.0);
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let data: Vec<f32> = (0..300 * 4).map(|_| normal.sample(&mut rng)).collect();
        let m = FeatureMatrix::new(300, 4, DEFAULT_HOP_US, data).unwrap();
        let cb = fit(&m, 10, &KMeansConfig::with_seed(1)).unwrap();
        let (q1, ids1) = cb.quantize(&m).unwrap();
        let (q2, ids2) = cb.quantize(&q1).unwrap();
        assert!(q1.bit_eq(&q2));
        assert_eq!(ids1, ids2);
    }

    #[test]
    fn recovers_separated_blobs() {
        let means = [[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0f32, 0.1).unwrap();
        let mut data = Vec::new();
        for _ in 0..250 {
            for m in &means {
                data.push(m[0] + noise.sample(&mut rng));
                data.push(m[1] + noise.sample(&mut rng));
            }
        }
        let pts = FeatureMatrix::new(1000, 2, DEFAULT_HOP_US, data).unwrap();
        let cb = fit(&pts, 4, &KMeansConfig::with_seed(5)).unwrap();
        for m in &means {
            let (_, d) = cb.nearest(m);
            assert!(d.sqrt() < 0.05, "blob {m:?} missed by {}", d.sqrt());
        }
    }
}
