//! Shot boundaries by kernel temporal segmentation, and budgeted shot
//! selection by 0/1 knapsack.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Contiguous, non-empty shots covering `0..frames`, described by the frame
/// indices where a new shot starts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSegmentation {
    frames: usize,
    change_points: Vec<usize>,
}

impl ShotSegmentation {
    pub fn new(frames: usize, change_points: Vec<usize>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("segmentation of an empty video"));
        }
        let mut prev = 0;
        for &c in &change_points {
            if c <= prev || c >= frames {
                return Err(Error::invalid(format!(
                    "change points {change_points:?} are not strictly increasing inside (0, {frames})"
                )));
            }
            prev = c;
        }
        Ok(Self {
            frames,
            change_points,
        })
    }

    /// One shot spanning the whole video.
    pub fn single(frames: usize) -> Result<Self> {
        Self::new(frames, Vec::new())
    }

    /// Fixed-length shots (the last one may be shorter).
    pub fn uniform(frames: usize, shot_len: usize) -> Result<Self> {
        if shot_len == 0 {
            return Err(Error::invalid("shot length must be positive"));
        }
        Self::new(frames, (shot_len..frames).step_by(shot_len).collect())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn change_points(&self) -> &[usize] {
        &self.change_points
    }

    pub fn num_shots(&self) -> usize {
        self.change_points.len() + 1
    }

    pub fn shots(&self) -> Vec<Range<usize>> {
        let mut starts = vec![0];
        starts.extend_from_slice(&self.change_points);
        let mut ends = self.change_points.clone();
        ends.push(self.frames);
        starts.into_iter().zip(ends).map(|(a, b)| a..b).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.shots().into_iter().map(|r| r.len()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// Dot product.
    Linear,
    /// `exp(-gamma * |x - y|^2)`.
    Rbf { gamma: f64 },
}

/// How the number of change points is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    /// Minimize raw scatter with at most `max_changes` boundaries.
    None,
    /// Add `weight * k * ln T` for `k` boundaries.
    Fixed { weight: f64 },
    /// Like `Fixed`, with `weight = kappa * v` where `v` is half the median
    /// squared distance between consecutive frames (a noise-scale estimate).
    Auto { kappa: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KtsConfig {
    /// Upper bound on boundaries; clamped to `T - 1` per video.
    pub max_changes: usize,
    pub penalty: Penalty,
    pub kernel: Kernel,
}

impl Default for KtsConfig {
    fn default() -> Self {
        Self {
            max_changes: 20,
            penalty: Penalty::Auto { kappa: 1.0 },
            kernel: Kernel::Linear,
        }
    }
}

impl KtsConfig {
    pub fn segment(&self, features: &Tensor) -> Result<ShotSegmentation> {
        let t = features.shape().first().copied().unwrap_or(0);
        if t < 2 {
            return ShotSegmentation::single(t.max(1));
        }
        kts_segment(
            features,
            self.max_changes.min(t - 1),
            self.penalty,
            self.kernel,
        )
    }
}

/// Within-segment scatter, `sum K_tt - (1/|s|) sum K_tt'`, for any `a..b`.
enum Scatter {
    Linear {
        dim: usize,
        /// prefix sums of rows, `(T+1)×d`
        rows: Vec<f64>,
        /// prefix sums of squared norms
        sq: Vec<f64>,
    },
    Gram {
        n: usize,
        /// 2D prefix sums of the Gram matrix, `(T+1)×(T+1)`
        prefix: Vec<f64>,
        diag: Vec<f64>,
    },
}

impl Scatter {
    fn new(x: &[f64], t: usize, d: usize, kernel: Kernel) -> Self {
        match kernel {
            Kernel::Linear => {
                let mut rows = vec![0.0; (t + 1) * d];
                let mut sq = vec![0.0; t + 1];
                for i in 0..t {
                    let row = &x[i * d..(i + 1) * d];
                    for j in 0..d {
                        rows[(i + 1) * d + j] = rows[i * d + j] + row[j];
                    }
                    sq[i + 1] = sq[i] + row.iter().map(|v| v * v).sum::<f64>();
                }
                Scatter::Linear { dim: d, rows, sq }
            }
            Kernel::Rbf { gamma } => {
                let n = t + 1;
                let mut prefix = vec![0.0; n * n];
                let mut diag = vec![0.0; n];
                for i in 0..t {
                    for j in 0..t {
                        let dist: f64 = (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum();
                        let k = (-gamma * dist).exp();
                        prefix[(i + 1) * n + j + 1] =
                            k + prefix[i * n + j + 1] + prefix[(i + 1) * n + j] - prefix[i * n + j];
                    }
                    diag[i + 1] = diag[i] + 1.0;
                }
                Scatter::Gram { n, prefix, diag }
            }
        }
    }

    fn cost(&self, a: usize, b: usize) -> f64 {
        let len = (b - a) as f64;
        let c = match self {
            Scatter::Linear { dim, rows, sq } => {
                let d = *dim;
                let norm: f64 = (0..d)
                    .map(|j| {
                        let s = rows[b * d + j] - rows[a * d + j];
                        s * s
                    })
                    .sum();
                sq[b] - sq[a] - norm / len
            }
            Scatter::Gram { n, prefix, diag } => {
                let block = prefix[b * n + b] - prefix[a * n + b] - prefix[b * n + a] + prefix[a * n + a];
                diag[b] - diag[a] - block / len
            }
        };
        c.max(0.0)
    }
}

fn noise_scale(x: &[f64], t: usize, d: usize) -> f64 {
    let mut diffs: Vec<f64> = (0..t - 1)
        .map(|i| (0..d).map(|j| (x[(i + 1) * d + j] - x[i * d + j]).powi(2)).sum())
        .collect();
    diffs.sort_by(f64::total_cmp);
    let n = diffs.len();
    let median = if n % 2 == 1 {
        diffs[n / 2]
    } else {
        0.5 * (diffs[n / 2 - 1] + diffs[n / 2])
    };
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / t as f64;
    // keeps the penalty above rounding noise when frames barely change
    (0.5 * median).max(1e-9 * (mean_sq + 1e-12))
}

/// Optimal change points for `T×d` features with at most `max_changes`
/// boundaries. Exact dynamic program over all segmentations.
#[allow(clippy::needless_range_loop)]
pub fn kts_segment(
    features: &Tensor,
    max_changes: usize,
    penalty: Penalty,
    kernel: Kernel,
) -> Result<ShotSegmentation> {
    let (t, d) = match features.shape() {
        [t, d] => (*t, *d),
        s => return Err(Error::shape(format!("segmentation expects T×d features, got {s:?}"))),
    };
    if t < 2 {
        return Err(Error::invalid(format!("segmentation needs at least 2 frames, got {t}")));
    }
    if max_changes >= t {
        return Err(Error::invalid(format!(
            "max_changes {max_changes} must be below the frame count {t}"
        )));
    }
    if !features.is_finite() {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let x: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
    let scatter = Scatter::new(&x, t, d, kernel);

    let cost: Vec<f64> = (0..t * (t + 1))
        .map(|idx| {
            let (a, b) = (idx / (t + 1), idx % (t + 1));
            if b > a {
                scatter.cost(a, b)
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let c = |a: usize, b: usize| cost[a * (t + 1) + b];

    // best[k][e]: minimal cost of splitting 0..e into k+1 segments
    let m = max_changes;
    let mut best = vec![vec![f64::INFINITY; t + 1]; m + 1];
    let mut back = vec![vec![0usize; t + 1]; m + 1];
    for e in 1..=t {
        best[0][e] = c(0, e);
    }
    for k in 1..=m {
        for e in (k + 1)..=t {
            let (mut bv, mut bs) = (f64::INFINITY, 0);
            for s in k..e {
                let v = best[k - 1][s] + c(s, e);
                if v < bv {
                    bv = v;
                    bs = s;
                }
            }
            best[k][e] = bv;
            back[k][e] = bs;
        }
    }

    let weight = match penalty {
        Penalty::None => 0.0,
        Penalty::Fixed { weight } => weight,
        Penalty::Auto { kappa } => kappa * noise_scale(&x, t, d),
    };
    if !(weight >= 0.0) || !weight.is_finite() {
        return Err(Error::invalid(format!("penalty weight {weight} must be finite and non-negative")));
    }
    let log_t = (t as f64).ln();
    let mut chosen = 0;
    let mut chosen_obj = best[0][t];
    for (k, row) in best.iter().enumerate().skip(1) {
        let obj = row[t] + weight * k as f64 * log_t;
        // strict improvement only: ties keep fewer boundaries
        if obj < chosen_obj - 1e-12 * chosen_obj.abs().max(1e-300) {
            chosen = k;
            chosen_obj = obj;
        }
    }

    let mut cps = Vec::with_capacity(chosen);
    let mut e = t;
    for k in (1..=chosen).rev() {
        let s = back[k][e];
        cps.push(s);
        e = s;
    }
    cps.reverse();
    ShotSegmentation::new(t, cps)
}

/// Mean frame score of every shot.
pub fn shot_scores(scores: &[f32], seg: &ShotSegmentation) -> Result<Vec<f64>> {
    if scores.len() != seg.frames() {
        return Err(Error::shape(format!(
            "{} scores for a {}-frame segmentation",
            scores.len(),
            seg.frames()
        )));
    }
    Ok(seg
        .shots()
        .into_iter()
        .map(|r| {
            let n = r.len() as f64;
            scores[r].iter().map(|&v| v as f64).sum::<f64>() / n
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SummarySelection {
    /// Selected shot indices, ascending.
    pub selected: Vec<usize>,
    /// Per-frame membership, length `T`.
    pub mask: Vec<bool>,
    pub total_frames: usize,
}

impl SummarySelection {
    pub fn mask_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// `floor(ratio * T)`, robust to representation error in `ratio`.
pub fn budget_frames(total: usize, ratio: f64) -> usize {
    (ratio * total as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Copy, Debug, Default)]
struct Cell {
    value: f64,
    frames: usize,
}

fn value_tol(a: f64, b: f64) -> f64 {
    1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Exact 0/1 knapsack over shots laid out consecutively: maximize the summed
/// shot scores within `floor(budget_ratio * total)` frames. Ties prefer fewer
/// frames, then the lexicographically smallest index set.
pub fn knapsack_select(
    scores: &[f64],
    lengths: &[usize],
    total: usize,
    budget_ratio: f64,
) -> Result<SummarySelection> {
    if scores.is_empty() {
        return Err(Error::invalid("knapsack over an empty shot list"));
    }
    if scores.len() != lengths.len() {
        return Err(Error::shape(format!(
            "{} shot scores but {} shot lengths",
            scores.len(),
            lengths.len()
        )));
    }
    if lengths.iter().sum::<usize>() != total {
        return Err(Error::invalid(format!(
            "shot lengths sum to {}, expected {total}",
            lengths.iter().sum::<usize>()
        )));
    }
    if !(0.0..=1.0).contains(&budget_ratio) {
        return Err(Error::invalid(format!("budget ratio {budget_ratio} outside [0, 1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("shot scores must be finite"));
    }
    let cap = budget_frames(total, budget_ratio);
    let n = scores.len();
    // table[i][c]: best over items i.. with capacity c
    let mut table = vec![vec![Cell::default(); cap + 1]; n + 1];
    let mut take = vec![vec![false; cap + 1]; n];
    for i in (0..n).rev() {
        for c in 0..=cap {
            let skip = table[i + 1][c];
            let mut cell = skip;
            if lengths[i] <= c {
                let rest = table[i + 1][c - lengths[i]];
                let with = Cell {
                    value: rest.value + scores[i],
                    frames: rest.frames + lengths[i],
                };
                let tol = value_tol(with.value, skip.value);
                let better = if (with.value - skip.value).abs() <= tol {
                    // including a lower index wins the lexicographic tie
                    with.frames <= skip.frames
                } else {
                    with.value > skip.value
                };
                if better {
                    cell = with;
                    take[i][c] = true;
                }
            }
            table[i][c] = cell;
        }
    }
    let mut selected = Vec::new();
    let mut c = cap;
    for (i, row) in take.iter().enumerate() {
        if row[c] {
            selected.push(i);
            c -= lengths[i];
        }
    }
    let mut mask = vec![false; total];
    let mut start = 0;
    let mut selected_iter = selected.iter().peekable();
    for (i, &len) in lengths.iter().enumerate() {
        if selected_iter.peek() == Some(&&i) {
            mask[start..start + len].iter_mut().for_each(|m| *m = true);
            selected_iter.next();
        }
        start += len;
    }
    let total_frames = selected.iter().map(|&i| lengths[i]).sum();
    Ok(SummarySelection {
        selected,
        mask,
        total_frames,
    })
}

/// Frame scores to summary: shot means, then knapsack.
pub fn summarize(scores: &[f32], seg: &ShotSegmentation, budget_ratio: f64) -> Result<SummarySelection> {
    let values = shot_scores(scores, seg)?;
    knapsack_select(&values, &seg.lengths(), seg.frames(), budget_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_validates_boundaries() {
        assert!(ShotSegmentation::new(5, vec![0]).is_err());
        assert!(ShotSegmentation::new(5, vec![5]).is_err());
        assert!(ShotSegmentation::new(5, vec![3, 2]).is_err());
        assert!(ShotSegmentation::new(5, vec![2, 2]).is_err());
        let s = ShotSegmentation::new(5, vec![2, 4]).unwrap();
        assert_eq!(s.shots(), vec![0..2, 2..4, 4..5]);
        assert_eq!(s.lengths(), vec![2, 2, 1]);
        assert_eq!(ShotSegmentation::uniform(7, 3).unwrap().change_points(), &[3, 6]);
    }

    #[test]
    fn two_blocks_split_at_five() {
        let mut data = Vec::new();
        for t in 0..10 {
            data.extend_from_slice(if t < 5 { &[1.0, 0.0] } else { &[0.0, 1.0] });
        }
        let x = Tensor::new(&[10, 2], data).unwrap();
        for kernel in [Kernel::Linear, Kernel::Rbf { gamma: 0.5 }] {
            let s = kts_segment(&x, 1, Penalty::None, kernel).unwrap();
            assert_eq!(s.change_points(), &[5]);
            let s = kts_segment(&x, 3, Penalty::Auto { kappa: 1.0 }, kernel).unwrap();
            assert_eq!(s.change_points(), &[5]);
        }
    }

    #[test]
    fn constant_features_give_one_shot() {
        let x = Tensor::full(&[12, 3], 0.7);
        let s = kts_segment(&x, 5, Penalty::Auto { kappa: 1.0 }, Kernel::Linear).unwrap();
        assert!(s.change_points().is_empty());
        let s = kts_segment(&x, 5, Penalty::None, Kernel::Linear).unwrap();
        assert!(s.change_points().is_empty());
    }

    #[test]
    fn kts_rejects_bad_inputs() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(kts_segment(&x, 4, Penalty::None, Kernel::Linear).is_err());
        assert!(kts_segment(&Tensor::zeros(&[1, 2]), 0, Penalty::None, Kernel::Linear).is_err());
        let mut y = Tensor::zeros(&[4, 2]);
        y.data_mut()[3] = f32::INFINITY;
        assert!(kts_segment(&y, 1, Penalty::None, Kernel::Linear).is_err());
    }

    #[test]
    fn shot_means() {
        let seg = ShotSegmentation::new(4, vec![2]).unwrap();
        let s = shot_scores(&[0.2, 0.4, 0.9, 0.7], &seg).unwrap();
        assert!((s[0] - 0.3).abs() < 1e-7 && (s[1] - 0.8).abs() < 1e-7);
        let one = shot_scores(&[0.1, 0.5], &ShotSegmentation::single(2).unwrap()).unwrap();
        assert!((one[0] - 0.3).abs() < 1e-7);
        let flat = shot_scores(&[0.4; 6], &ShotSegmentation::uniform(6, 2).unwrap()).unwrap();
        assert!(flat.iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn knapsack_examples() {
        let sel = knapsack_select(&[0.9, 0.8, 0.7, 0.6], &[10, 20, 30, 40], 100, 0.15).unwrap();
        assert_eq!(sel.selected, vec![0]);
        assert_eq!(sel.total_frames, 10);
        assert_eq!(sel.mask.iter().filter(|&&m| m).count(), 10);
        assert!(sel.mask[..10].iter().all(|&m| m));

        let all = knapsack_select(&[0.1, 0.2, 0.3], &[3, 3, 4], 10, 1.0).unwrap();
        assert_eq!(all.selected, vec![0, 1, 2]);

        let none = knapsack_select(&[0.9, 0.9], &[10, 10], 20, 0.15).unwrap();
        assert!(none.selected.is_empty());
        assert!(none.mask.iter().all(|&m| !m));

        assert!(knapsack_select(&[], &[], 0, 0.15).is_err());
        assert!(knapsack_select(&[0.5], &[3], 4, 0.15).is_err());
    }

    #[test]
    fn knapsack_ties() {
        // equal value: fewer frames wins
        let s = knapsack_select(&[0.5, 0.5], &[4, 2], 6, 0.7).unwrap();
        assert_eq!(s.selected, vec![1]);
        // equal value and frames: lower index wins
        let s = knapsack_select(&[0.5, 0.5, 0.5], &[2, 2, 2], 6, 0.5).unwrap();
        assert_eq!(s.selected, vec![0]);
        // zero-value shots are never padded in
        let s = knapsack_select(&[0.0, 0.3], &[1, 1], 2, 1.0).unwrap();
        assert_eq!(s.selected, vec![1]);
    }

    #[test]
    fn budget_floor_is_exact_on_round_ratios() {
        assert_eq!(budget_frames(100, 0.15), 15);
        assert_eq!(budget_frames(20, 0.15), 3);
        assert_eq!(budget_frames(7, 0.15), 1);
    }
}
