use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use csta::dataio::{gen_synthetic, load_dataset, save_dataset, Dataset};
use csta::macs::count_macs;
use csta::metrics::{CvConfig, EvalReport, Split, SplitOutcome};
use csta::model::{load_checkpoint, save_checkpoint, CstaModel, ModelConfig};
use csta::shots::{shot_scores, summarize as select_summary};
use csta::trainer::{cross_validate_dataset, evaluate_model, train_split, EvalVideo};

use crate::config::RunConfig;

fn create_out(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out_dir()?;
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory `{}`", out.display()))?;
    cfg.write_resolved(out)?;
    Ok(out)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("cannot write `{}`", path.display()))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir()?;
    load_dataset(dir).with_context(|| format!("cannot load dataset `{}`", dir.display()))
}

fn checkpoint_for(path: &Path, ds: &Dataset) -> Result<CstaModel> {
    let model = load_checkpoint(path)
        .with_context(|| format!("cannot load checkpoint `{}`", path.display()))?;
    let d = model.config().feature_dim;
    if d != ds.feature_dim {
        bail!(
            "shape mismatch: checkpoint `{}` expects {d}-dimensional features but dataset `{}` has {}",
            path.display(),
            ds.name,
            ds.feature_dim
        );
    }
    Ok(model)
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let ds = gen_synthetic(&cfg.gen).context("invalid [gen] settings")?;
    let out = cfg.out_dir()?;
    save_dataset(&ds, out).with_context(|| format!("cannot write dataset to `{}`", out.display()))?;
    println!("wrote {} videos (D = {}) to {}", ds.len(), ds.feature_dim, out.display());
    Ok(())
}

pub fn train(cfg: &mut RunConfig, final_model: bool) -> Result<()> {
    let ds = dataset(cfg)?;
    if cfg.model.feature_dim != ds.feature_dim {
        log::info!("model feature_dim set to the dataset's {}", ds.feature_dim);
        cfg.model.feature_dim = ds.feature_dim;
    }
    let out = create_out(cfg)?;
    let (report, runs) = cross_validate_dataset(&ds, &cfg.model, &cfg.train, &cfg.eval, &cfg.cv)?;
    let ckpt = out.join("checkpoints");
    let curves = out.join("curves");
    fs::create_dir_all(&ckpt)?;
    fs::create_dir_all(&curves)?;
    for run in &runs {
        let stem = format!("r{:02}_f{}", run.split.repeat, run.split.fold);
        save_checkpoint(&run.outcome.best, &ckpt.join(format!("{stem}.ckpt")))?;
        write(&curves, &format!("{stem}.csv"), &run.outcome.curve_csv())?;
    }
    write(out, "folds.csv", &report.folds_csv())?;
    write(out, "videos.csv", &report.videos_csv())?;
    write(out, "report.txt", &format!("{report}\n"))?;
    if final_model {
        let model = CstaModel::new(ModelConfig {
            seed: cfg.cv.seed,
            ..cfg.model.clone()
        })?;
        let all: Vec<_> = ds.videos.iter().collect();
        let outcome = train_split(model, &all, &[], &cfg.train, &cfg.eval)?;
        save_checkpoint(&outcome.best, &out.join("final.ckpt"))?;
        write(out, "final_curve.csv", &outcome.curve_csv())?;
    }
    println!("{report}");
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let model = checkpoint_for(checkpoint, &ds)?;
    let videos: Vec<EvalVideo<'_>> = ds
        .videos
        .iter()
        .map(|v| EvalVideo::prepare(v, &cfg.eval))
        .collect::<csta::Result<_>>()?;
    let results = evaluate_model(&model, &videos, &cfg.eval)?;
    // a single pseudo-split holding every video
    let cv = CvConfig {
        folds: 1,
        repeats: 1,
        ..cfg.cv.clone()
    };
    let split = Split {
        repeat: 0,
        fold: 0,
        seed: 0,
        train: Vec::new(),
        test: (0..ds.len()).collect(),
    };
    let outcome = SplitOutcome {
        best_epoch: 0,
        videos: results,
    };
    let report = EvalReport::from_outcomes(cfg.eval.protocol, &ds.ids(), &[split], vec![outcome], &cv)?;
    if let Some(out) = &cfg.out {
        create_out(cfg)?;
        write(out, "videos.csv", &report.videos_csv())?;
        write(out, "report.txt", &format!("{report}\n"))?;
    }
    println!("{report}");
    Ok(())
}

pub fn summarize(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let model = checkpoint_for(checkpoint, &ds)?;
    let mut masks = String::from("video,frames,budget_frames,selected_frames,mask\n");
    let mut shots = String::from("video,shot,start,end,score,selected\n");
    for v in &ds.videos {
        let scores = model.predict(&v.feature_sequence()?)?;
        let seg = v.segmentation(&cfg.eval.kts)?;
        let sel = select_summary(scores.as_slice(), &seg, cfg.eval.budget_ratio)
            .with_context(|| format!("cannot summarize video `{}`", v.id))?;
        let bits: String = sel.mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let budget = csta::shots::budget_frames(v.frames(), cfg.eval.budget_ratio);
        writeln!(masks, "{},{},{budget},{},{bits}", v.id, v.frames(), sel.total_frames)?;
        let values = shot_scores(scores.as_slice(), &seg)?;
        for (k, (range, value)) in seg.shots().into_iter().zip(values).enumerate() {
            let picked = sel.selected.binary_search(&k).is_ok();
            writeln!(shots, "{},{k},{},{},{value:.6},{}", v.id, range.start, range.end, u8::from(picked))?;
        }
        println!(
            "{}: {} of {} frames in {} shots",
            v.id,
            sel.total_frames,
            v.frames(),
            sel.selected.len()
        );
    }
    if let Some(out) = &cfg.out {
        create_out(cfg)?;
        write(out, "summaries.csv", &masks)?;
        write(out, "shots.csv", &shots)?;
    }
    Ok(())
}

pub fn macs(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let model_cfg = match checkpoint {
        Some(p) => load_checkpoint(p)
            .with_context(|| format!("cannot load checkpoint `{}`", p.display()))?
            .config()
            .clone(),
        None => cfg.model.clone(),
    };
    let t = cfg.macs.frames;
    let model = CstaModel::new(model_cfg).context("invalid [model] settings")?;
    let report = count_macs(&model.describe(t), &[t, model.config().feature_dim])?;
    if let Some(out) = &cfg.out {
        create_out(cfg)?;
        write(out, "macs.csv", &report.to_csv())?;
    }
    println!("{report}");
    Ok(())
}
