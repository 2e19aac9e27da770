//! Deep embedded clustering over precomputed behavioral features, plus
//! run-length segment extraction.
//!
//! Clustering operates directly in feature space: soft assignments use a
//! Student-t kernel against K centroids, the self-training target sharpens
//! them, and centroids descend the summed per-animal KL losses. Segmenting a
//! fitted model turns per-frame hard labels into contiguous clips, merging
//! runs shorter than a minimum duration into their longer neighbor.

use crate::par;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("cluster {cluster} died (zero soft mass) and the re-init budget is exhausted")]
    DegenerateCluster { cluster: usize },
}

/// One animal's feature matrix: T frames by D dimensions at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub animal: String,
    pub fps: f64,
    pub features: Array2<f64>,
}

impl FeatureSequence {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<(), DecError> {
        if self.frames() < 2 {
            return Err(DecError::InvalidInput(format!(
                "animal {}: need at least 2 frames, got {}",
                self.animal,
                self.frames()
            )));
        }
        if self.dims() < 1 {
            return Err(DecError::InvalidInput(format!(
                "animal {}: need at least 1 feature dimension",
                self.animal
            )));
        }
        if !(self.fps > 0.0) {
            return Err(DecError::InvalidInput(format!(
                "animal {}: fps must be positive",
                self.animal
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(DecError::InvalidInput(format!(
                "animal {}: non-finite feature entry",
                self.animal
            )));
        }
        Ok(())
    }
}

/// Fitted clustering model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecModel {
    pub k: usize,
    /// Student-t degrees of freedom; fixed to 1 by default.
    pub alpha: f64,
    /// K x D centroid matrix, row-major.
    pub centroids: Vec<Vec<f64>>,
    /// Loss after each accepted descent step; non-increasing.
    pub loss_trace: Vec<f64>,
    pub seed: u64,
}

impl DecModel {
    pub fn centroid_matrix(&self) -> Array2<f64> {
        let d = self.centroids.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.centroids.iter().flatten().copied().collect();
        Array2::from_shape_vec((self.k, d), flat).expect("consistent centroid rows")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecFitConfig {
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for DecFitConfig {
    fn default() -> Self {
        DecFitConfig {
            k: 10,
            epochs: 200,
            learning_rate: 0.5,
            alpha: 1.0,
            seed: 0,
        }
    }
}

/// Student-t soft assignment: `q[t,k] ∝ (1 + ||x_t - mu_k||^2 / alpha)^-((alpha+1)/2)`,
/// rows normalized to sum 1.
pub fn soft_assign(features: ArrayView2<f64>, centroids: ArrayView2<f64>, alpha: f64) -> Array2<f64> {
    let t = features.nrows();
    let k = centroids.nrows();
    let exponent = -(alpha + 1.0) / 2.0;
    let rows: Vec<Vec<f64>> = par::map_range(t, |ti| {
        let x = features.row(ti);
        let mut row = vec![0.0; k];
        let mut sum = 0.0;
        for ki in 0..k {
            let mu = centroids.row(ki);
            let d2: f64 = x
                .iter()
                .zip(mu.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let s = (1.0 + d2 / alpha).powf(exponent);
            row[ki] = s;
            sum += s;
        }
        for v in &mut row {
            *v /= sum;
        }
        row
    });
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((t, k), flat).expect("row-major soft assignment")
}

/// Self-training target: `p[t,k] ∝ q[t,k]^2 / f_k` with `f_k = Σ_t q[t,k]`,
/// rows normalized.
pub fn target_distribution(q: ArrayView2<f64>) -> Result<Array2<f64>, DecError> {
    let freq = q.sum_axis(Axis(0));
    if let Some((cluster, _)) = freq.iter().enumerate().find(|(_, &f)| f == 0.0) {
        return Err(DecError::DegenerateCluster { cluster });
    }
    let mut p = Array2::zeros(q.raw_dim());
    for (ti, row) in q.outer_iter().enumerate() {
        let mut sum = 0.0;
        for (ki, &v) in row.iter().enumerate() {
            let w = v * v / freq[ki];
            p[(ti, ki)] = w;
            sum += w;
        }
        for ki in 0..q.ncols() {
            p[(ti, ki)] /= sum;
        }
    }
    Ok(p)
}

/// `KL(p || q)` summed over rows; zero `p` entries contribute nothing.
pub fn kl_loss(p: ArrayView2<f64>, q: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for (pv, qv) in p.iter().zip(q.iter()) {
        if *pv > 0.0 {
            total += pv * (pv.ln() - qv.ln());
        }
    }
    total
}

/// Analytic gradient of `KL(p || q)` with respect to the centroids, `p` held
/// fixed: `dL/dmu_k = (alpha+1)/alpha * Σ_t (p - q)/(1 + d^2/alpha) * (mu_k - x_t)`.
pub fn centroid_gradient(
    features: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
    p: ArrayView2<f64>,
    alpha: f64,
) -> Array2<f64> {
    let q = soft_assign(features, centroids, alpha);
    let k = centroids.nrows();
    let d = centroids.ncols();
    let scale = (alpha + 1.0) / alpha;
    let rows: Vec<Vec<f64>> = par::map_range(k, |ki| {
        let mu = centroids.row(ki);
        let mut g = vec![0.0; d];
        for ti in 0..features.nrows() {
            let x = features.row(ti);
            let d2: f64 = x
                .iter()
                .zip(mu.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let w = scale * (p[(ti, ki)] - q[(ti, ki)]) / (1.0 + d2 / alpha);
            for di in 0..d {
                g[di] += w * (mu[di] - x[di]);
            }
        }
        g
    });
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((k, d), flat).expect("row-major gradient")
}

/// Seeded k-means++ initialization over pooled frames.
fn kmeans_pp(pooled: ArrayView2<f64>, k: usize, seed: u64) -> Result<Array2<f64>, DecError> {
    let n = pooled.nrows();
    let d = pooled.ncols();
    let mut rng = crate::rng::derive(seed, &[crate::rng::hash_str("kmeans++")]);
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&pooled.row(first));

    let mut dist2 = vec![f64::INFINITY; n];
    for ki in 1..k {
        for (i, row) in pooled.outer_iter().enumerate() {
            let prev = centroids.row(ki - 1);
            let d2: f64 = row
                .iter()
                .zip(prev.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist2[i] = dist2[i].min(d2);
        }
        let total: f64 = dist2.iter().sum();
        if total == 0.0 {
            return Err(DecError::InvalidInput(format!(
                "fewer than {k} distinct points for k-means++ initialization"
            )));
        }
        let mut draw = rng.random::<f64>() * total;
        let mut chosen = n - 1;
        for (i, &w) in dist2.iter().enumerate() {
            draw -= w;
            if draw <= 0.0 {
                chosen = i;
                break;
            }
        }
        centroids.row_mut(ki).assign(&pooled.row(chosen));
    }
    Ok(centroids)
}

const DEAD_CLUSTER_REINITS: usize = 2;
const BACKTRACK_LIMIT: usize = 40;

/// Fits DEC over one or more animals: seeded k-means++ initialization, one
/// self-training target, then backtracking gradient descent on the centroids
/// minimizing the summed per-animal KL losses. The recorded loss trace is
/// non-increasing by construction. Dead clusters are re-initialized at most
/// twice before [`DecError::DegenerateCluster`] is returned.
pub fn dec_fit(sequences: &[FeatureSequence], config: &DecFitConfig) -> Result<DecModel, DecError> {
    if sequences.is_empty() {
        return Err(DecError::InvalidInput("need at least one sequence".into()));
    }
    if config.k < 2 {
        return Err(DecError::InvalidInput(format!(
            "k must be at least 2, got {}",
            config.k
        )));
    }
    for seq in sequences {
        seq.validate()?;
    }
    let dims = sequences[0].dims();
    let frames = sequences[0].frames();
    let fps = sequences[0].fps;
    for seq in sequences {
        if seq.dims() != dims || seq.frames() != frames || seq.fps != fps {
            return Err(DecError::InvalidInput(
                "all sequences in a session must share T, D, and fps".into(),
            ));
        }
    }

    let pooled_rows: Vec<f64> = sequences
        .iter()
        .flat_map(|s| s.features.iter().copied())
        .collect();
    let pooled = Array2::from_shape_vec((frames * sequences.len(), dims), pooled_rows)
        .expect("pooled features");

    let mut centroids = kmeans_pp(pooled.view(), config.k, config.seed)?;

    // One self-training target, recomputed only on dead-cluster re-init; the
    // descent below then provably never increases the recorded loss.
    let mut reinits = 0;
    let mut targets = loop {
        match compute_targets(sequences, centroids.view(), config.alpha) {
            Ok(t) => break t,
            Err(DecError::DegenerateCluster { cluster }) => {
                if reinits >= DEAD_CLUSTER_REINITS {
                    return Err(DecError::DegenerateCluster { cluster });
                }
                reinit_cluster(&mut centroids, cluster, pooled.view());
                reinits += 1;
            }
            Err(other) => return Err(other),
        }
    };

    let mut loss = session_loss(sequences, centroids.view(), &targets, config.alpha);
    let mut trace = vec![loss];
    let mut lr = config.learning_rate;

    for _ in 0..config.epochs {
        let mut gradient = Array2::zeros(centroids.raw_dim());
        for (seq, p) in sequences.iter().zip(&targets) {
            gradient += &centroid_gradient(
                seq.features.view(),
                centroids.view(),
                p.view(),
                config.alpha,
            );
        }

        let mut accepted = false;
        for _ in 0..BACKTRACK_LIMIT {
            let candidate = &centroids - &(&gradient * lr);
            match compute_targets_check(sequences, candidate.view(), config.alpha) {
                Some(()) => {
                    let candidate_loss =
                        session_loss(sequences, candidate.view(), &targets, config.alpha);
                    if candidate_loss <= loss {
                        centroids = candidate;
                        loss = candidate_loss;
                        lr = (lr * 1.2).min(config.learning_rate * 8.0);
                        accepted = true;
                        break;
                    }
                }
                None => {}
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(loss);
        let window = trace.len().saturating_sub(2);
        if trace[window] - loss < 1e-12 * loss.abs().max(1.0) {
            break;
        }
        // `targets` stays fixed: the trace must stay monotone.
        let _ = &mut targets;
    }

    Ok(DecModel {
        k: config.k,
        alpha: config.alpha,
        centroids: centroids
            .outer_iter()
            .map(|row| row.iter().copied().collect())
            .collect(),
        loss_trace: trace,
        seed: config.seed,
    })
}

fn compute_targets(
    sequences: &[FeatureSequence],
    centroids: ArrayView2<f64>,
    alpha: f64,
) -> Result<Vec<Array2<f64>>, DecError> {
    sequences
        .iter()
        .map(|seq| target_distribution(soft_assign(seq.features.view(), centroids, alpha).view()))
        .collect()
}

/// Cheap guard that a candidate step keeps every soft mass alive.
fn compute_targets_check(
    sequences: &[FeatureSequence],
    centroids: ArrayView2<f64>,
    alpha: f64,
) -> Option<()> {
    for seq in sequences {
        let q = soft_assign(seq.features.view(), centroids, alpha);
        if q.iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    Some(())
}

fn session_loss(
    sequences: &[FeatureSequence],
    centroids: ArrayView2<f64>,
    targets: &[Array2<f64>],
    alpha: f64,
) -> f64 {
    sequences
        .iter()
        .zip(targets)
        .map(|(seq, p)| {
            let q = soft_assign(seq.features.view(), centroids, alpha);
            kl_loss(p.view(), q.view())
        })
        .sum()
}

/// Moves a dead centroid onto the pooled point farthest from its nearest
/// centroid.
fn reinit_cluster(centroids: &mut Array2<f64>, cluster: usize, pooled: ArrayView2<f64>) {
    let mut best = (0usize, -1.0f64);
    for (i, row) in pooled.outer_iter().enumerate() {
        let nearest = centroids
            .outer_iter()
            .enumerate()
            .filter(|(ki, _)| *ki != cluster)
            .map(|(_, mu)| {
                row.iter()
                    .zip(mu.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if nearest > best.1 {
            best = (i, nearest);
        }
    }
    let row = pooled.row(best.0).to_owned();
    centroids.row_mut(cluster).assign(&row);
}

/// A contiguous single-animal clip: `[start_frame, end_frame)` in one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSegment {
    pub animal: String,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub cluster: usize,
    pub duration_s: f64,
}

impl ClipSegment {
    pub fn new(animal: &str, start: usize, end: usize, cluster: usize, fps: f64) -> Self {
        ClipSegment {
            animal: animal.to_string(),
            start_frame: start,
            end_frame: end,
            cluster,
            duration_s: (end - start) as f64 / fps,
        }
    }

    pub fn frames(&self) -> usize {
        self.end_frame - self.start_frame
    }
}

/// Per-frame hard labels under a model: argmax of the soft assignment, ties
/// resolved toward the lower cluster id.
pub fn hard_labels(sequence: &FeatureSequence, model: &DecModel) -> Vec<usize> {
    let q = soft_assign(
        sequence.features.view(),
        model.centroid_matrix().view(),
        model.alpha,
    );
    q.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (ki, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = ki;
                }
            }
            best
        })
        .collect()
}

/// Splits a sequence into contiguous cluster runs, then merges runs shorter
/// than `min_duration_s` into the temporally longer neighbor (ties merge
/// left; the first run merges forward, the last backward). The output
/// partitions `[0, T)` and consecutive segments differ in cluster id.
pub fn segment_extract(
    sequence: &FeatureSequence,
    model: &DecModel,
    min_duration_s: f64,
) -> Vec<ClipSegment> {
    let labels = hard_labels(sequence, model);
    segments_from_labels(&sequence.animal, &labels, sequence.fps, min_duration_s)
}

/// Run-length segmentation of explicit labels; exposed for tests and tools.
pub fn segments_from_labels(
    animal: &str,
    labels: &[usize],
    fps: f64,
    min_duration_s: f64,
) -> Vec<ClipSegment> {
    if labels.is_empty() {
        return Vec::new();
    }
    let mut runs: Vec<(usize, usize)> = Vec::new(); // (cluster, frames)
    for &label in labels {
        match runs.last_mut() {
            Some((cluster, len)) if *cluster == label => *len += 1,
            _ => runs.push((label, 1)),
        }
    }

    let is_short = |len: usize| (len as f64) / fps < min_duration_s;
    while runs.len() > 1 {
        let Some(victim) = runs
            .iter()
            .enumerate()
            .filter(|(_, (_, len))| is_short(*len))
            .min_by_key(|(i, (_, len))| (*len, *i))
            .map(|(i, _)| i)
        else {
            break;
        };
        let absorb_into = if victim == 0 {
            1
        } else if victim == runs.len() - 1 {
            victim - 1
        } else if runs[victim + 1].1 > runs[victim - 1].1 {
            victim + 1
        } else {
            victim - 1
        };
        runs[absorb_into].1 += runs[victim].1;
        runs.remove(victim);
        // Coalesce newly adjacent runs of the same cluster.
        let mut i = 1;
        while i < runs.len() {
            if runs[i].0 == runs[i - 1].0 {
                runs[i - 1].1 += runs[i].1;
                runs.remove(i);
            } else {
                i += 1;
            }
        }
    }

    let mut out = Vec::with_capacity(runs.len());
    let mut cursor = 0;
    for (cluster, len) in runs {
        out.push(ClipSegment::new(animal, cursor, cursor + len, cluster, fps));
        cursor += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn seq(animal: &str, fps: f64, data: Array2<f64>) -> FeatureSequence {
        FeatureSequence {
            animal: animal.into(),
            fps,
            features: data,
        }
    }

    #[test]
    fn soft_assign_matches_hand_arithmetic() {
        // 1-D: points 0, 1, 3 against centroids 0, 2 with alpha = 1 give
        // exact rational assignments.
        let x = array![[0.0], [1.0], [3.0]];
        let mu = array![[0.0], [2.0]];
        let q = soft_assign(x.view(), mu.view(), 1.0);
        let expected = [
            [5.0 / 6.0, 1.0 / 6.0],
            [0.5, 0.5],
            [1.0 / 6.0, 5.0 / 6.0],
        ];
        for t in 0..3 {
            for k in 0..2 {
                assert_abs_diff_eq!(q[(t, k)], expected[t][k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn soft_assign_degenerate_and_symmetric_cases() {
        let x = array![[0.0, 0.0]];
        let mu = array![[0.0, 0.0], [1e6, 1e6]];
        let q = soft_assign(x.view(), mu.view(), 1.0);
        assert!(q[(0, 0)] > 1.0 - 1e-9);

        // Equidistant from all centroids: uniform row.
        let x = array![[0.0, 0.0]];
        let mu = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let q = soft_assign(x.view(), mu.view(), 1.0);
        for k in 0..4 {
            assert_abs_diff_eq!(q[(0, k)], 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn target_distribution_matches_hand_arithmetic() {
        let x = array![[0.0], [1.0], [3.0]];
        let mu = array![[0.0], [2.0]];
        let q = soft_assign(x.view(), mu.view(), 1.0);
        let p = target_distribution(q.view()).unwrap();
        let expected = [
            [25.0 / 26.0, 1.0 / 26.0],
            [0.5, 0.5],
            [1.0 / 26.0, 25.0 / 26.0],
        ];
        for t in 0..3 {
            for k in 0..2 {
                assert_abs_diff_eq!(p[(t, k)], expected[t][k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn target_distribution_one_hot_is_fixed_point() {
        let q = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let p = target_distribution(q.view()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn target_distribution_uniform_balanced_stays_uniform() {
        let q = Array2::from_elem((6, 3), 1.0 / 3.0);
        let p = target_distribution(q.view()).unwrap();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn target_distribution_random_matches_direct_recomputation() {
        let mut rng = crate::rng::derive(55, &[]);
        let mut q = Array2::zeros((4, 3));
        for t in 0..4 {
            let mut row: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            for v in &mut row {
                *v /= s;
            }
            for k in 0..3 {
                q[(t, k)] = row[k];
            }
        }
        let p = target_distribution(q.view()).unwrap();
        // Direct formula, written independently.
        for t in 0..4 {
            let mut expect = [0.0; 3];
            let mut norm = 0.0;
            for k in 0..3 {
                let f: f64 = (0..4).map(|tt| q[(tt, k)]).sum();
                expect[k] = q[(t, k)] * q[(t, k)] / f;
                norm += expect[k];
            }
            for k in 0..3 {
                assert_abs_diff_eq!(p[(t, k)], expect[k] / norm, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn target_distribution_rejects_dead_column() {
        let q = array![[1.0, 0.0], [1.0, 0.0]];
        assert!(matches!(
            target_distribution(q.view()),
            Err(DecError::DegenerateCluster { cluster: 1 })
        ));
    }

    #[test]
    fn rows_of_q_and_p_sum_to_one() {
        let mut rng = crate::rng::derive(56, &[]);
        let x = Array2::from_shape_fn((40, 5), |_| rng.random_range(-3.0..3.0));
        let mu = Array2::from_shape_fn((4, 5), |_| rng.random_range(-3.0..3.0));
        let q = soft_assign(x.view(), mu.view(), 1.0);
        let p = target_distribution(q.view()).unwrap();
        for row in q.outer_iter().chain(p.outer_iter()) {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = crate::rng::derive(57, &[]);
        let x = Array2::from_shape_fn((12, 3), |_| rng.random_range(-2.0..2.0));
        let mut mu = Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0));
        let p = target_distribution(soft_assign(x.view(), mu.view(), 1.0).view()).unwrap();
        let analytic = centroid_gradient(x.view(), mu.view(), p.view(), 1.0);

        let h = 1e-6;
        for ki in 0..3 {
            for di in 0..3 {
                let orig = mu[(ki, di)];
                mu[(ki, di)] = orig + h;
                let hi = kl_loss(p.view(), soft_assign(x.view(), mu.view(), 1.0).view());
                mu[(ki, di)] = orig - h;
                let lo = kl_loss(p.view(), soft_assign(x.view(), mu.view(), 1.0).view());
                mu[(ki, di)] = orig;
                let numeric = (hi - lo) / (2.0 * h);
                let denom = numeric.abs().max(analytic[(ki, di)].abs()).max(1e-8);
                assert!(
                    ((analytic[(ki, di)] - numeric) / denom).abs() < 1e-5,
                    "gradient mismatch at ({ki},{di}): analytic {} numeric {}",
                    analytic[(ki, di)],
                    numeric
                );
            }
        }
    }

    fn blob_session(seeds: u64) -> (Vec<FeatureSequence>, Vec<usize>) {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::derive(seeds, &[]);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let centers = [
            vec![6.0; 16],
            vec![-6.0; 16],
            {
                let mut c = vec![0.0; 16];
                for (i, v) in c.iter_mut().enumerate() {
                    *v = if i % 2 == 0 { 6.0 } else { -6.0 };
                }
                c
            },
        ];
        let t = 240;
        let mut labels = Vec::with_capacity(t);
        let mut flat = Vec::with_capacity(t * 16);
        for ti in 0..t {
            let c = ti % 3;
            labels.push(c);
            for d in 0..16 {
                flat.push(centers[c][d] + noise.sample(&mut rng));
            }
        }
        let features = Array2::from_shape_vec((t, 16), flat).unwrap();
        (vec![seq("a0", 10.0, features)], labels)
    }

    /// Adjusted Rand index, written from the contingency-table formula.
    fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
        let ka = a.iter().max().unwrap() + 1;
        let kb = b.iter().max().unwrap() + 1;
        let mut table = vec![vec![0usize; kb]; ka];
        for (&x, &y) in a.iter().zip(b) {
            table[x][y] += 1;
        }
        let comb2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
        let sum_ij: f64 = table.iter().flatten().map(|&n| comb2(n)).sum();
        let sum_a: f64 = table.iter().map(|row| comb2(row.iter().sum())).sum();
        let sum_b: f64 = (0..kb)
            .map(|j| comb2(table.iter().map(|row| row[j]).sum()))
            .sum();
        let total = comb2(a.len());
        let expected = sum_a * sum_b / total;
        let max_index = (sum_a + sum_b) / 2.0;
        (sum_ij - expected) / (max_index - expected)
    }

    #[test]
    fn dec_fit_recovers_separated_blobs() {
        for trial in 0..3 {
            let (session, truth) = blob_session(100 + trial);
            let config = DecFitConfig {
                k: 3,
                epochs: 50,
                seed: trial,
                ..DecFitConfig::default()
            };
            let model = dec_fit(&session, &config).unwrap();
            let predicted = hard_labels(&session[0], &model);
            let ari = adjusted_rand_index(&truth, &predicted);
            assert!(ari >= 0.9, "trial {trial}: ARI {ari}");
            // Trace is non-increasing within tolerance.
            for w in model.loss_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "trace increased: {w:?}");
            }
        }
    }

    #[test]
    fn dec_fit_rejects_k_below_two() {
        let (session, _) = blob_session(1);
        let config = DecFitConfig {
            k: 1,
            ..DecFitConfig::default()
        };
        assert!(matches!(
            dec_fit(&session, &config),
            Err(DecError::InvalidInput(_))
        ));
    }

    #[test]
    fn dec_fit_is_bit_deterministic() {
        let (session, _) = blob_session(9);
        let config = DecFitConfig {
            k: 3,
            epochs: 30,
            seed: 4,
            ..DecFitConfig::default()
        };
        let a = dec_fit(&session, &config).unwrap();
        let b = dec_fit(&session, &config).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn segments_from_labels_rle_example() {
        let segs = segments_from_labels("a0", &[0, 0, 1, 1, 1, 0], 10.0, 0.0);
        assert_eq!(segs.len(), 3);
        assert_eq!((segs[0].start_frame, segs[0].end_frame, segs[0].cluster), (0, 2, 0));
        assert_eq!((segs[1].start_frame, segs[1].end_frame, segs[1].cluster), (2, 5, 1));
        assert_eq!((segs[2].start_frame, segs[2].end_frame, segs[2].cluster), (5, 6, 0));
    }

    #[test]
    fn single_frame_blip_is_absorbed() {
        let mut labels = vec![2usize; 30];
        labels[14] = 7;
        let segs = segments_from_labels("a0", &labels, 10.0, 0.2);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].cluster, 2);
        assert_eq!(segs[0].frames(), 30);
    }

    #[test]
    fn first_short_segment_merges_forward() {
        let mut labels = vec![5usize; 2];
        labels.extend(vec![3usize; 20]);
        let segs = segments_from_labels("a0", &labels, 10.0, 0.5);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].cluster, 3);
    }

    #[test]
    fn segments_partition_and_round_trip() {
        let mut rng = crate::rng::derive(58, &[]);
        for _ in 0..200 {
            let t = rng.random_range(1..120);
            let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..4)).collect();
            let segs = segments_from_labels("a0", &labels, 10.0, 0.0);
            // Partition.
            let mut cursor = 0;
            for (i, s) in segs.iter().enumerate() {
                assert_eq!(s.start_frame, cursor);
                assert!(s.end_frame > s.start_frame);
                if i > 0 {
                    assert_ne!(s.cluster, segs[i - 1].cluster);
                }
                cursor = s.end_frame;
            }
            assert_eq!(cursor, t);
            // Round trip at min duration 0.
            let mut rebuilt = Vec::with_capacity(t);
            for s in &segs {
                rebuilt.extend(std::iter::repeat_n(s.cluster, s.frames()));
            }
            assert_eq!(rebuilt, labels);
        }
    }
}
