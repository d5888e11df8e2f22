//! Dataset container and synthetic data.
//!
//! On disk a dataset is a directory holding `manifest.toml` plus one blob per
//! video. A blob starts with a 16-byte header (`b"CSTV"`, format version, `T`,
//! `D`, each after the magic a little-endian `u32`), followed by the `T×D`
//! features and then `annotators×T` annotation values, all row-major
//! little-endian `f32`.
//!
//! Converting real benchmarks: export per-frame features sampled at 2 fps as
//! the `T×D` matrix, one annotation vector per annotator at the same frame
//! rate (importance scores rescaled to `[0, 1]` with kind `scores`, or binary
//! user summaries with kind `summaries`), and shot boundaries, if available,
//! as `change_points`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureSequence;
use crate::shots::{knapsack_select, shot_scores, KtsConfig, ShotSegmentation};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";
const BLOB_MAGIC: &[u8; 4] = b"CSTV";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    /// Per-frame importance in `[0, 1]`.
    Scores,
    /// Binary per-frame summary membership.
    Summaries,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// `T×D`.
    pub features: Tensor,
    pub annotations: Vec<Vec<f32>>,
    pub kind: AnnotationKind,
    pub change_points: Option<Vec<usize>>,
}

impl VideoRecord {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_sequence(&self) -> Result<FeatureSequence> {
        FeatureSequence::new(self.features.clone())
    }

    /// Mean over annotators, the regression target.
    pub fn target(&self) -> Vec<f32> {
        let n = self.annotations.len() as f64;
        (0..self.frames())
            .map(|t| (self.annotations.iter().map(|a| a[t] as f64).sum::<f64>() / n) as f32)
            .collect()
    }

    /// Stored change points when present, otherwise KTS on the features.
    pub fn segmentation(&self, kts: &KtsConfig) -> Result<ShotSegmentation> {
        match &self.change_points {
            Some(cps) => ShotSegmentation::new(self.frames(), cps.clone()),
            None => kts.segment(&self.features),
        }
    }

    fn invalid(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Validation {
            record: self.id.clone(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.id.starts_with('.')
        {
            return Err(self.invalid("id", "must be non-empty ASCII [A-Za-z0-9._-], not starting with '.'"));
        }
        if self.features.ndim() != 2 {
            return Err(self.invalid("features", format!("expected T×D, got {:?}", self.features.shape())));
        }
        if !self.features.is_finite() {
            return Err(self.invalid("features", "non-finite value"));
        }
        let t = self.frames();
        if self.annotations.is_empty() {
            return Err(self.invalid("annotations", "at least one annotator required"));
        }
        for (i, a) in self.annotations.iter().enumerate() {
            if a.len() != t {
                return Err(self.invalid(
                    "annotations",
                    format!("annotator {i} has {} values, expected {t}", a.len()),
                ));
            }
            let ok = match self.kind {
                AnnotationKind::Scores => a.iter().all(|v| (0.0..=1.0).contains(v)),
                AnnotationKind::Summaries => a.iter().all(|&v| v == 0.0 || v == 1.0),
            };
            if !ok {
                let what = match self.kind {
                    AnnotationKind::Scores => "scores must lie in [0, 1]",
                    AnnotationKind::Summaries => "summaries must be 0 or 1",
                };
                return Err(self.invalid("annotations", format!("annotator {i}: {what}")));
            }
        }
        if let Some(cps) = &self.change_points {
            ShotSegmentation::new(t, cps.clone())
                .map_err(|e| self.invalid("change_points", e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.videos {
            v.validate()?;
            if v.dim() != self.feature_dim {
                return Err(v.invalid(
                    "features",
                    format!("dimension {} differs from dataset dimension {}", v.dim(), self.feature_dim),
                ));
            }
            if !seen.insert(v.id.as_str()) {
                return Err(v.invalid("id", "duplicate id"));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    feature_dim: usize,
    #[serde(default)]
    videos: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    frames: usize,
    feature_dim: usize,
    annotation_kind: AnnotationKind,
    annotators: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    change_points: Option<Vec<usize>>,
    file: String,
}

fn blob_name(id: &str) -> String {
    format!("{id}.bin")
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn encode_blob(v: &VideoRecord) -> Vec<u8> {
    let (t, d) = (v.frames(), v.dim());
    let mut out = Vec::with_capacity(16 + 4 * (t * d + t * v.annotations.len()));
    out.extend_from_slice(BLOB_MAGIC);
    for x in [FORMAT_VERSION, t as u32, d as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for x in v.features.data().iter().chain(v.annotations.iter().flatten()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Write `ds` into `dir` (created if missing). Validates first.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.videos.len());
    for v in &ds.videos {
        let file = blob_name(&v.id);
        fs::write(dir.join(&file), encode_blob(v))?;
        entries.push(ManifestEntry {
            id: v.id.clone(),
            frames: v.frames(),
            feature_dim: v.dim(),
            annotation_kind: v.kind,
            annotators: v.annotations.len(),
            change_points: v.change_points.clone(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: ds.name.clone(),
        feature_dim: ds.feature_dim,
        videos: entries,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::invalid(format!("cannot serialize manifest: {e}")))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn read_blob(path: &Path, entry: &ManifestEntry) -> Result<VideoRecord> {
    let bytes = fs::read(path)?;
    let record_err = |field: &str, message: String| Error::Validation {
        record: entry.id.clone(),
        field: field.into(),
        message,
    };
    if bytes.len() < 16 || &bytes[..4] != BLOB_MAGIC {
        return Err(format_err(path, "missing blob header"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t != entry.frames {
        return Err(record_err(
            "frames",
            format!("manifest declares T={} but blob header has {t}", entry.frames),
        ));
    }
    if d != entry.feature_dim {
        return Err(record_err(
            "feature_dim",
            format!("manifest declares D={} but blob header has {d}", entry.feature_dim),
        ));
    }
    let floats: Vec<f32> = bytes[16..]
        .chunks(4)
        .map(|c| {
            let mut b = [0u8; 4];
            b[..c.len()].copy_from_slice(c);
            f32::from_le_bytes(b)
        })
        .collect();
    let expected = t * d + t * entry.annotators;
    if (bytes.len() - 16) % 4 != 0 || floats.len() != expected {
        let rows = floats.len().min(t * d).checked_div(d).unwrap_or(0);
        return Err(record_err(
            "features",
            format!(
                "blob holds {} values, expected {expected} ({t}×{d} features + {}×{t} annotations; {rows} full feature rows present)",
                floats.len(),
                entry.annotators
            ),
        ));
    }
    if t == 0 || d == 0 {
        return Err(record_err("frames", "empty feature matrix".into()));
    }
    let features = Tensor::new(&[t, d], floats[..t * d].to_vec())?;
    let annotations = floats[t * d..].chunks(t).map(|c| c.to_vec()).collect();
    Ok(VideoRecord {
        id: entry.id.clone(),
        features,
        annotations,
        kind: entry.annotation_kind,
        change_points: entry.change_points.clone(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => format_err(&mpath, "dataset manifest not found"),
        _ => Error::Io(e),
    })?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| format_err(&mpath, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::Validation {
                record: entry.id.clone(),
                field: "file".into(),
                message: format!("`{}` must be a plain file name", entry.file),
            });
        }
        videos.push(read_blob(&dir.join(&entry.file), entry)?);
    }
    let ds = Dataset {
        name: manifest.name,
        feature_dim: manifest.feature_dim,
        videos,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub name: String,
    pub videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub segments: usize,
    pub annotators: usize,
    /// Standard deviation of feature noise and of annotator noise.
    pub noise: f32,
    /// Slope of the importance sigmoid.
    pub sharpness: f32,
    pub kind: AnnotationKind,
    /// Summary budget when `kind` is `summaries`.
    pub budget_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            videos: 20,
            min_frames: 40,
            max_frames: 60,
            feature_dim: 64,
            segments: 6,
            annotators: 5,
            noise: 0.1,
            sharpness: 2.0,
            kind: AnnotationKind::Scores,
            budget_ratio: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("videos", self.videos),
            ("min_frames", self.min_frames),
            ("feature_dim", self.feature_dim),
            ("segments", self.segments),
            ("annotators", self.annotators),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.max_frames < self.min_frames {
            return Err(Error::invalid("max_frames must be at least min_frames"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        if !self.sharpness.is_finite() {
            return Err(Error::invalid("sharpness must be finite"));
        }
        Ok(())
    }
}

/// Segment lengths: each at least `floor(T / (2·k))` (and 1), the rest spread
/// by random weights.
fn segment_lengths(t: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let k = k.min(t);
    let min_len = (t / (2 * k)).max(1);
    let spare = t - k * min_len;
    let weights: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = weights.iter().sum();
    let mut lens: Vec<usize> = weights
        .iter()
        .map(|w| min_len + (w / total * spare as f64).floor() as usize)
        .collect();
    let mut left = t - lens.iter().sum::<usize>();
    let mut i = 0;
    while left > 0 {
        lens[i % k] += 1;
        left -= 1;
        i += 1;
    }
    lens
}

fn gaussian(rng: &mut impl Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

/// Generate a dataset and, per video, the hidden frame importance.
pub fn gen_synthetic_with_truth(cfg: &SyntheticConfig) -> Result<(Dataset, Vec<Vec<f32>>)> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // the hidden direction that decides importance
    let mut u: Vec<f32> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    u.iter_mut().for_each(|v| *v /= norm);

    let id_width = (cfg.videos - 1).to_string().len().max(3);
    let mut videos = Vec::with_capacity(cfg.videos);
    let mut truths = Vec::with_capacity(cfg.videos);
    for vi in 0..cfg.videos {
        let t = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let lens = segment_lengths(t, cfg.segments, &mut rng);
        let mut features = Vec::with_capacity(t * d);
        let mut importance = Vec::with_capacity(t);
        let mut change_points = Vec::with_capacity(lens.len() - 1);
        let mut start = 0;
        for (si, &len) in lens.iter().enumerate() {
            if si > 0 {
                change_points.push(start);
            }
            let proto: Vec<f32> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let z: f32 = proto.iter().zip(&u).map(|(a, b)| a * b).sum();
            let imp = 1.0 / (1.0 + (-cfg.sharpness * z).exp());
            for _ in 0..len {
                for &p in &proto {
                    let noise = if cfg.noise > 0.0 { cfg.noise * gaussian(&mut rng) } else { 0.0 };
                    features.push(p + noise);
                }
                importance.push(imp);
            }
            start += len;
        }
        let mut annotations: Vec<Vec<f32>> = (0..cfg.annotators)
            .map(|_| {
                importance
                    .iter()
                    .map(|&s| {
                        let noise = if cfg.noise > 0.0 { cfg.noise * gaussian(&mut rng) } else { 0.0 };
                        (s + noise).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        if cfg.kind == AnnotationKind::Summaries {
            let seg = ShotSegmentation::new(t, change_points.clone())?;
            for a in annotations.iter_mut() {
                let values = shot_scores(a, &seg)?;
                let sel = knapsack_select(&values, &seg.lengths(), t, cfg.budget_ratio)?;
                *a = sel.mask_f32();
            }
        }
        videos.push(VideoRecord {
            id: format!("video_{vi:0id_width$}"),
            features: Tensor::new(&[t, d], features)?,
            annotations,
            kind: cfg.kind,
            change_points: Some(change_points),
        });
        truths.push(importance);
    }
    let ds = Dataset {
        name: cfg.name.clone(),
        feature_dim: d,
        videos,
    };
    ds.validate()?;
    Ok((ds, truths))
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    Ok(gen_synthetic_with_truth(cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_lengths_cover_the_video() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (t, k) in [(40, 6), (7, 3), (5, 9), (100, 1)] {
            let l = segment_lengths(t, k, &mut rng);
            assert_eq!(l.iter().sum::<usize>(), t);
            assert!(l.iter().all(|&x| x >= 1));
            assert_eq!(l.len(), k.min(t));
        }
    }

    #[test]
    fn record_validation_names_the_field() {
        let mut v = VideoRecord {
            id: "a".into(),
            features: Tensor::zeros(&[3, 2]),
            annotations: vec![vec![0.5; 3]],
            kind: AnnotationKind::Scores,
            change_points: None,
        };
        v.validate().unwrap();
        v.annotations[0].push(0.1);
        assert!(matches!(v.validate(), Err(Error::Validation { ref field, .. }) if field == "annotations"));
        v.annotations[0].pop();
        v.annotations[0][1] = 1.5;
        assert!(v.validate().is_err());
        v.annotations[0][1] = 0.5;
        v.kind = AnnotationKind::Summaries;
        assert!(v.validate().is_err());
        v.kind = AnnotationKind::Scores;
        v.change_points = Some(vec![3]);
        assert!(v.validate().is_err());
        v.change_points = None;
        v.id = "../x".into();
        assert!(v.validate().is_err());
    }
}
