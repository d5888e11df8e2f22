//! Rank correlations and the cross-validated evaluation protocol.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shots::{summarize, ShotSegmentation};

fn to_f64<T: Copy + Into<f64>>(v: &[T]) -> Vec<f64> {
    v.iter().map(|&x| x.into()).collect()
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "correlating vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two values"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::invalid("correlation input contains NaN"));
    }
    Ok(())
}

/// Sum of `t(t-1)/2` over runs of equal adjacent values.
fn tied_pairs(sorted: impl Iterator<Item = impl PartialEq>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Merge sort counting inversions.
fn count_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = count_swaps(&mut v[..mid], buf) + count_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b, `O(n log n)`.
pub fn kendall_tau<T: Copy + Into<f64>>(x: &[T], y: &[T]) -> Result<f64> {
    let (x, y) = (to_f64(x), to_f64(y));
    check_pair(&x, &y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.into_iter().zip(y).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n0 = n * (n - 1) / 2;
    let n1 = tied_pairs(pairs.iter().map(|p| p.0));
    let n3 = tied_pairs(pairs.iter().copied());
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let swaps = count_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(ys.iter().copied());
    if n1 == n0 || n2 == n0 {
        return Err(Error::UndefinedCorrelation("constant input vector"));
    }
    let num = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    let den = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input vector"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of mid-ranks.
pub fn spearman_rho<T: Copy + Into<f64>>(x: &[T], y: &[T]) -> Result<f64> {
    let (x, y) = (to_f64(x), to_f64(y));
    check_pair(&x, &y)?;
    pearson(&mid_ranks(&x), &mid_ranks(&y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Correlate predicted frame scores with each annotator's scores.
    Score,
    /// Correlate the knapsack summary mask with each annotator's binary summary.
    Summary,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Score => "score",
            Protocol::Summary => "summary",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub tau: f64,
    pub rho: f64,
}

impl Correlation {
    pub fn mean(&self) -> f64 {
        0.5 * (self.tau + self.rho)
    }
}

/// Average (tau, rho) of `pred` against every annotator. Annotators for which
/// the correlation is undefined are skipped; if all are, the result is
/// [`Error::UndefinedCorrelation`].
pub fn correlate_annotators(pred: &[f32], annotations: &[Vec<f32>]) -> Result<Correlation> {
    if annotations.is_empty() {
        return Err(Error::invalid("no annotations to compare against"));
    }
    let (mut tau, mut rho, mut n) = (0.0, 0.0, 0usize);
    for a in annotations {
        if a.len() != pred.len() {
            return Err(Error::shape(format!(
                "annotation of length {} vs prediction of length {}",
                a.len(),
                pred.len()
            )));
        }
        match (kendall_tau(pred, a), spearman_rho(pred, a)) {
            (Ok(t), Ok(r)) => {
                tau += t;
                rho += r;
                n += 1;
            }
            (Err(Error::UndefinedCorrelation(_)), _) | (_, Err(Error::UndefinedCorrelation(_))) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::UndefinedCorrelation("every annotator comparison is degenerate"));
    }
    Ok(Correlation {
        tau: tau / n as f64,
        rho: rho / n as f64,
    })
}

/// Per-video evaluation. Under [`Protocol::Summary`] the scores are first
/// turned into a knapsack summary over `shots`.
pub fn evaluate_video(
    pred: &[f32],
    annotations: &[Vec<f32>],
    protocol: Protocol,
    shots: &ShotSegmentation,
    budget_ratio: f64,
) -> Result<Correlation> {
    match protocol {
        Protocol::Score => correlate_annotators(pred, annotations),
        Protocol::Summary => {
            let mask = summarize(pred, shots, budget_ratio)?.mask_f32();
            correlate_annotators(&mask, annotations)
        }
    }
}

/// Mean of the defined entries, `None` if there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Worker threads for splits; results are aggregated in split order.
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 10,
            seed: 0,
            jobs: 1,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shuffle `0..n` with ChaCha8 seeded by `seed`, then cut it into `folds`
/// contiguous chunks: fold `k` is `perm[k*n/folds .. (k+1)*n/folds]`, sorted.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(Error::invalid(format!(
            "{n} videos cannot fill {folds} folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..folds)
        .map(|k| {
            let mut f = perm[k * n / folds..(k + 1) * n / folds].to_vec();
            f.sort_unstable();
            f
        })
        .collect())
}

/// One train/test split of a cross-validation run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub repeat: usize,
    pub fold: usize,
    /// Seed for everything random inside this split (init, shuffling, dropout).
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seed of repeat `r` is `seed + r`; it drives the fold shuffle. Each split
/// then gets `derive_seed(seed + r, fold)`.
pub fn make_splits(n: usize, cfg: &CvConfig) -> Result<Vec<Split>> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be positive"));
    }
    let mut splits = Vec::with_capacity(cfg.repeats * cfg.folds);
    for repeat in 0..cfg.repeats {
        let rseed = cfg.seed.wrapping_add(repeat as u64);
        let parts = fold_partition(n, cfg.folds, rseed)?;
        for (fold, test) in parts.iter().enumerate() {
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            splits.push(Split {
                repeat,
                fold,
                seed: derive_seed(rseed, fold as u64),
                train,
                test: test.clone(),
            });
        }
    }
    Ok(splits)
}

/// What a split runner reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    pub best_epoch: usize,
    /// One entry per test video, aligned with `Split::test`; `None` when undefined.
    pub videos: Vec<Option<Correlation>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoResult {
    pub repeat: usize,
    pub fold: usize,
    pub video: String,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub test: Vec<String>,
    pub best_epoch: usize,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub videos: Vec<VideoResult>,
    pub folds: Vec<FoldResult>,
    /// Per-repeat seeds (`seed + r`).
    pub seeds: Vec<u64>,
    /// Mean over repeats of the mean over folds.
    pub tau: Option<f64>,
    pub rho: Option<f64>,
}

impl EvalReport {
    /// Assemble from per-split outcomes (in [`make_splits`] order).
    pub fn from_outcomes(
        protocol: Protocol,
        ids: &[String],
        splits: &[Split],
        outcomes: Vec<SplitOutcome>,
        cfg: &CvConfig,
    ) -> Result<Self> {
        let mut videos = Vec::new();
        let mut folds = Vec::new();
        for (split, out) in splits.iter().zip(outcomes) {
            if out.videos.len() != split.test.len() {
                return Err(Error::shape(format!(
                    "split runner returned {} results for {} test videos",
                    out.videos.len(),
                    split.test.len()
                )));
            }
            for (&i, c) in split.test.iter().zip(&out.videos) {
                videos.push(VideoResult {
                    repeat: split.repeat,
                    fold: split.fold,
                    video: ids[i].clone(),
                    tau: c.map(|c| c.tau),
                    rho: c.map(|c| c.rho),
                });
            }
            folds.push(FoldResult {
                repeat: split.repeat,
                fold: split.fold,
                seed: split.seed,
                test: split.test.iter().map(|&i| ids[i].clone()).collect(),
                best_epoch: out.best_epoch,
                tau: mean_defined(out.videos.iter().map(|c| c.map(|c| c.tau))),
                rho: mean_defined(out.videos.iter().map(|c| c.map(|c| c.rho))),
            });
        }
        let per_repeat = |pick: fn(&FoldResult) -> Option<f64>| {
            mean_defined((0..cfg.repeats).map(|r| {
                mean_defined(folds.iter().filter(|f| f.repeat == r).map(pick))
            }))
        };
        let tau = per_repeat(|f| f.tau);
        let rho = per_repeat(|f| f.rho);
        Ok(Self {
            protocol,
            videos,
            folds,
            seeds: (0..cfg.repeats)
                .map(|r| cfg.seed.wrapping_add(r as u64))
                .collect(),
            tau,
            rho,
        })
    }

    pub fn folds_csv(&self) -> String {
        let mut out = String::from("repeat,fold,seed,best_epoch,tau,rho,test_videos\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.repeat,
                f.fold,
                f.seed,
                f.best_epoch,
                opt(f.tau),
                opt(f.rho),
                f.test.join(" ")
            ));
        }
        out
    }

    pub fn videos_csv(&self) -> String {
        let mut out = String::from("repeat,fold,video,tau,rho\n");
        for v in &self.videos {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                v.repeat,
                v.fold,
                v.video,
                opt(v.tau),
                opt(v.rho)
            ));
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "nan".into())
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let repeats = self.seeds.len();
        writeln!(
            f,
            "protocol {} | {} folds x {} repeats | seeds {:?}",
            self.protocol,
            self.folds.len() / repeats.max(1),
            repeats,
            self.seeds
        )?;
        for fr in &self.folds {
            writeln!(
                f,
                "  repeat {:>2} fold {} (best epoch {:>3}): tau {} rho {}",
                fr.repeat,
                fr.fold,
                fr.best_epoch,
                opt(fr.tau),
                opt(fr.rho)
            )?;
        }
        write!(f, "overall: tau {} rho {}", opt(self.tau), opt(self.rho))
    }
}

/// Run `run` on every split of a `folds × repeats` protocol over `ids`.
/// Splits run on up to `cfg.jobs` threads; aggregation order is fixed.
pub fn cross_validate<F>(
    ids: &[String],
    protocol: Protocol,
    cfg: &CvConfig,
    run: F,
) -> Result<EvalReport>
where
    F: Fn(&Split) -> Result<SplitOutcome> + Sync,
{
    let splits = make_splits(ids.len(), cfg)?;
    let outcomes: Vec<SplitOutcome> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        pool.install(|| splits.par_iter().map(&run).collect::<Result<_>>())?
    } else {
        splits.iter().map(&run).collect::<Result<_>>()?
    };
    EvalReport::from_outcomes(protocol, ids, &splits, outcomes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let t = kendall_tau(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn tau_b_tie_correction() {
        // x ties one pair, y has none: C=5, D=0, n0=6, n1=1
        let t = kendall_tau(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((t - 5.0 / (5.0f64 * 6.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_vectors_are_undefined() {
        assert!(matches!(
            kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn rho_examples() {
        let x = [0.3f32, 0.1, 0.9, 0.5];
        assert!((spearman_rho(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f32> = x.iter().map(|v| -v).collect();
        assert!((spearman_rho(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn annotator_average() {
        let pred = [0.1f32, 0.4, 0.2, 0.8];
        let a = vec![0.1f32, 0.4, 0.2, 0.8];
        let b = vec![0.8f32, 0.2, 0.4, 0.1];
        let c = correlate_annotators(&pred, std::slice::from_ref(&a)).unwrap();
        assert_eq!(c.tau, 1.0);
        assert!((c.rho - 1.0).abs() < 1e-12);
        let both = correlate_annotators(&pred, &[a.clone(), b.clone()]).unwrap();
        let tb = kendall_tau(&pred, &b).unwrap();
        let rb = spearman_rho(&pred, &b).unwrap();
        assert!((both.tau - (1.0 + tb) / 2.0).abs() < 1e-12);
        assert!((both.rho - (1.0 + rb) / 2.0).abs() < 1e-12);
        // degenerate annotators are skipped
        let skip = correlate_annotators(&pred, &[a, vec![0.5; 4]]).unwrap();
        assert_eq!(skip.tau, 1.0);
        assert!(correlate_annotators(&pred, &[]).is_err());
    }

    #[test]
    fn summary_protocol_uses_knapsack_mask() {
        let pred = [0.9f32, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        let seg = ShotSegmentation::uniform(10, 2).unwrap();
        let annot = vec![vec![1.0f32, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let c = evaluate_video(&pred, &annot, Protocol::Summary, &seg, 0.2).unwrap();
        assert_eq!(c.tau, 1.0);
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        for n in [5, 10, 13, 50] {
            let parts = fold_partition(n, 5, 3).unwrap();
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            for p in &parts {
                assert!(p.len() == n / 5 || p.len() == n / 5 + 1);
            }
        }
        assert!(fold_partition(4, 5, 0).is_err());
        assert_eq!(fold_partition(10, 5, 9).unwrap(), fold_partition(10, 5, 9).unwrap());
    }

    #[test]
    fn overall_is_mean_of_fold_means() {
        let ids: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        let cfg = CvConfig {
            folds: 5,
            repeats: 3,
            seed: 4,
            jobs: 1,
        };
        let report = cross_validate(&ids, Protocol::Score, &cfg, |s| {
            Ok(SplitOutcome {
                best_epoch: s.fold,
                videos: s
                    .test
                    .iter()
                    .map(|&i| {
                        Some(Correlation {
                            tau: i as f64 / 10.0 + s.repeat as f64,
                            rho: -(i as f64),
                        })
                    })
                    .collect(),
            })
        })
        .unwrap();
        assert_eq!(report.folds.len(), 15);
        assert_eq!(report.seeds, vec![4, 5, 6]);
        let fold_taus: Vec<f64> = report.folds.iter().map(|f| f.tau.unwrap()).collect();
        let hand = fold_taus.iter().sum::<f64>() / 15.0;
        assert!((report.tau.unwrap() - hand).abs() < 1e-12);
        // equal-size folds: the fold mean equals the mean over all videos
        assert!((report.rho.unwrap() + 4.5).abs() < 1e-12);
    }

    #[test]
    fn parallel_matches_sequential() {
        let ids: Vec<String> = (0..12).map(|i| format!("v{i}")).collect();
        let run = |s: &Split| {
            Ok(SplitOutcome {
                best_epoch: 0,
                videos: s
                    .test
                    .iter()
                    .map(|&i| {
                        Some(Correlation {
                            tau: (s.seed % 97) as f64 / 97.0,
                            rho: i as f64,
                        })
                    })
                    .collect(),
            })
        };
        let mut cfg = CvConfig {
            repeats: 2,
            ..CvConfig::default()
        };
        let a = cross_validate(&ids, Protocol::Score, &cfg, run).unwrap();
        cfg.jobs = 4;
        let b = cross_validate(&ids, Protocol::Score, &cfg, run).unwrap();
        assert_eq!(a, b);
    }
}
