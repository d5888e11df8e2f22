//! Adam and the per-split training loop.

use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::metrics::{
    cross_validate, derive_seed, evaluate_video, mean_defined, Correlation, CvConfig, EvalReport,
    Protocol, Split, SplitOutcome,
};
use crate::model::{mse_loss, CstaModel, FeatureSequence, ModelConfig};
use crate::shots::{KtsConfig, ShotSegmentation};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Apply weight decay directly to the weights instead of adding it to the gradient.
    pub decoupled_weight_decay: bool,
    /// Clip the global gradient norm to this value.
    pub max_grad_norm: Option<f32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            learning_rate: 1e-3,
            weight_decay: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled_weight_decay: false,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "learning_rate and eps must be positive, weight_decay non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::invalid("max_grad_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// One Adam update with bias correction. Every gradient is checked for
/// non-finite values before anything is modified; the error names the
/// parameter by position.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "parameter {i} is {:?}, gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: format!("#{i}"),
                index,
                value,
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    let scale = match cfg.max_grad_norm {
        Some(max) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > max as f64 {
                (max as f64 / norm) as f32
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - (b1 as f64).powi(t);
    let bc2 = 1.0 - (b2 as f64).powi(t);
    let step_size = (cfg.learning_rate as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.data_mut();
        for k in 0..w.len() {
            let mut gk = g[k] * scale;
            if cfg.decoupled_weight_decay {
                w[k] -= cfg.learning_rate * cfg.weight_decay * w[k];
            } else {
                gk += cfg.weight_decay * w[k];
            }
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            w[k] -= step_size * m[k] / (v[k].sqrt() / bc2_sqrt + cfg.eps);
        }
    }
    Ok(())
}

/// How test videos are scored after each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub protocol: Protocol,
    pub budget_ratio: f64,
    pub kts: KtsConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            protocol: Protocol::Score,
            budget_ratio: 0.15,
            kts: KtsConfig::default(),
        }
    }
}

/// A video prepared for repeated evaluation.
pub struct EvalVideo<'a> {
    pub record: &'a VideoRecord,
    pub features: FeatureSequence,
    pub shots: ShotSegmentation,
}

impl<'a> EvalVideo<'a> {
    pub fn prepare(record: &'a VideoRecord, settings: &EvalSettings) -> Result<Self> {
        Ok(Self {
            record,
            features: record.feature_sequence()?,
            shots: record.segmentation(&settings.kts)?,
        })
    }
}

/// Per-video correlations of `model` (inference mode); `None` where undefined.
pub fn evaluate_model(
    model: &CstaModel,
    videos: &[EvalVideo<'_>],
    settings: &EvalSettings,
) -> Result<Vec<Option<Correlation>>> {
    videos
        .iter()
        .map(|v| {
            let scores = model.predict(&v.features)?;
            match evaluate_video(
                scores.as_slice(),
                &v.record.annotations,
                settings.protocol,
                &v.shots,
                settings.budget_ratio,
            ) {
                Ok(c) => Ok(Some(c)),
                Err(Error::UndefinedCorrelation(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Mean (tau, rho) over the defined entries.
pub fn mean_correlation(results: &[Option<Correlation>]) -> Option<Correlation> {
    Some(Correlation {
        tau: mean_defined(results.iter().map(|c| c.map(|c| c.tau)))?,
        rho: mean_defined(results.iter().map(|c| c.map(|c| c.rho)))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's videos.
    pub train_loss: f64,
    pub test: Option<Correlation>,
}

pub struct TrainOutcome {
    pub best: CstaModel,
    pub best_epoch: usize,
    pub best_test: Vec<Option<Correlation>>,
    pub curve: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_tau,test_rho\n");
        for e in &self.curve {
            let (t, r) = match e.test {
                Some(c) => (format!("{:.6}", c.tau), format!("{:.6}", c.rho)),
                None => ("nan".into(), "nan".into()),
            };
            out.push_str(&format!("{},{:.8},{t},{r}\n", e.epoch, e.train_loss));
        }
        out
    }
}

fn named_grads(model: &CstaModel, err: Error) -> Error {
    match err {
        Error::NonFiniteGradient { param, index, value } => {
            let name = param
                .strip_prefix('#')
                .and_then(|i| i.parse::<usize>().ok())
                .and_then(|i| model.named_params().get(i).map(|(n, _)| n.clone()))
                .unwrap_or(param);
            Error::NonFiniteGradient {
                param: name,
                index,
                value,
            }
        }
        e => e,
    }
}

/// Train `model` on `train`, scoring `test` after every epoch, and keep the
/// epoch with the highest mean of test tau and rho (earliest on ties). With no
/// usable test score the final epoch is kept.
pub fn train_split(
    mut model: CstaModel,
    train: &[&VideoRecord],
    test: &[&VideoRecord],
    cfg: &TrainConfig,
    settings: &EvalSettings,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let inputs: Vec<(FeatureSequence, Vec<f32>)> = train
        .iter()
        .map(|v| Ok((v.feature_sequence()?, v.target())))
        .collect::<Result<_>>()?;
    let test_videos: Vec<EvalVideo<'_>> = test
        .iter()
        .map(|v| EvalVideo::prepare(v, settings))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, CstaModel, Vec<Option<Correlation>>)> = None;
    let mut last_test = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (x, target) = &inputs[i];
                let mut fp = model.forward_graph(x, true, true, &mut rng)?;
                let loss = mse_loss(&mut fp.graph, fp.scores, target)?;
                loss_sum += fp.graph.scalar(loss);
                let mut grads = fp.graph.backward(loss)?;
                let g: Vec<Tensor> = fp
                    .param_vars
                    .iter()
                    .zip(model.named_params())
                    .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (dst, src) in a.iter_mut().zip(&g) {
                            dst.data_mut()
                                .iter_mut()
                                .zip(src.data())
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            let mut grads = acc.expect("chunks are non-empty");
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f32;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            }
            let mut params: Vec<&mut Tensor> = model.params_mut().collect();
            adam_step(&mut params, &grads, &mut state, cfg).map_err(|e| named_grads(&model, e))?;
        }
        let train_loss = loss_sum / inputs.len() as f64;
        let results = evaluate_model(&model, &test_videos, settings)?;
        let test_corr = mean_correlation(&results);
        log::debug!(
            "epoch {epoch}: loss {train_loss:.6} test {}",
            test_corr
                .map(|c| format!("tau {:.4} rho {:.4}", c.tau, c.rho))
                .unwrap_or_else(|| "n/a".into())
        );
        if let Some(c) = test_corr {
            let score = c.mean();
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, model.clone(), results.clone()));
            }
        }
        last_test = results;
        curve.push(EpochLog {
            epoch,
            train_loss,
            test: test_corr,
        });
    }
    let (best_epoch, best_model, best_test) = match best {
        Some((_, e, m, r)) => (e, m, r),
        None => (cfg.epochs, model, last_test),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_test,
        curve,
    })
}

/// A finished split of [`cross_validate_dataset`].
pub struct SplitRun {
    pub split: Split,
    pub outcome: TrainOutcome,
}

/// Full protocol on a dataset: for every split a fresh model is built with
/// `model_cfg` (seeded from the split seed), trained with `train_cfg`
/// (seeded from a second stream of the split seed) and its best epoch scored.
pub fn cross_validate_dataset(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    settings: &EvalSettings,
    cv: &CvConfig,
) -> Result<(EvalReport, Vec<SplitRun>)> {
    let ids = ds.ids();
    let runs: Mutex<Vec<SplitRun>> = Mutex::new(Vec::new());
    let report = cross_validate(&ids, settings.protocol, cv, |split| {
        let model = CstaModel::new(ModelConfig {
            seed: split.seed,
            ..model_cfg.clone()
        })?;
        let tcfg = TrainConfig {
            seed: derive_seed(split.seed, 1),
            ..train_cfg.clone()
        };
        let train: Vec<&VideoRecord> = split.train.iter().map(|&i| &ds.videos[i]).collect();
        let test: Vec<&VideoRecord> = split.test.iter().map(|&i| &ds.videos[i]).collect();
        let outcome = train_split(model, &train, &test, &tcfg, settings)?;
        log::info!(
            "repeat {} fold {}: best epoch {} ({})",
            split.repeat,
            split.fold,
            outcome.best_epoch,
            mean_correlation(&outcome.best_test)
                .map(|c| format!("tau {:.4} rho {:.4}", c.tau, c.rho))
                .unwrap_or_else(|| "undefined".into())
        );
        let result = SplitOutcome {
            best_epoch: outcome.best_epoch,
            videos: outcome.best_test.clone(),
        };
        runs.lock().expect("no poisoned lock").push(SplitRun {
            split: split.clone(),
            outcome,
        });
        Ok(result)
    })?;
    let mut runs = runs.into_inner().expect("no poisoned lock");
    runs.sort_by_key(|r| (r.split.repeat, r.split.fold));
    Ok((report, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut w = Tensor::new(&[2], vec![0.3, -1.2]).unwrap();
        let before = w.clone();
        let mut state = AdamState::default();
        adam_step(&mut [&mut w], &[Tensor::zeros(&[2])], &mut state, &cfg).unwrap();
        assert_eq!(w, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        for g in [0.5f32, -3.0, 1e-3] {
            let mut w = scalar(1.0);
            let mut state = AdamState::default();
            adam_step(&mut [&mut w], &[scalar(g)], &mut state, &cfg).unwrap();
            // m_hat = g, v_hat = g^2
            let want = 1.0 - 1e-3 * g as f64 / (g.abs() as f64 + 1e-8);
            assert!((w.data()[0] as f64 - want).abs() < 1e-6, "g={g}");
        }
    }

    #[test]
    fn coupled_weight_decay_enters_the_gradient() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut w = scalar(2.0);
        let mut state = AdamState::default();
        adam_step(&mut [&mut w], &[scalar(0.0)], &mut state, &cfg).unwrap();
        // effective gradient 0.5 * 2 = 1, so a full learning-rate step
        assert!((w.data()[0] - (2.0 - 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut w = scalar(1.0);
        let mut state = AdamState::default();
        for _ in 0..500 {
            let g = scalar(2.0 * w.data()[0]);
            adam_step(&mut [&mut w], &[g], &mut state, &cfg).unwrap();
        }
        assert!(w.data()[0].abs() < 1e-3, "w = {}", w.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let cfg = TrainConfig::default();
        let mut a = scalar(1.0);
        let mut b = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut state = AdamState::default();
        let grads = [scalar(0.1), Tensor::new(&[3], vec![0.0, f32::NAN, 0.0]).unwrap()];
        let err = adam_step(&mut [&mut a, &mut b], &grads, &mut state, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            ..TrainConfig::default()
        };
        let mut w = scalar(0.0);
        let mut state = AdamState::default();
        adam_step(&mut [&mut w], &[scalar(100.0)], &mut state, &cfg).unwrap();
        assert!((state.m[0].data()[0] - 0.1).abs() < 1e-6);
    }
}
