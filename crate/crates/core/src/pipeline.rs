//! Training, evaluation and single-image scoring.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{normalize_mos, sample_crops, split_dataset, MosNormalizer, Sample, SplitSpec};
use crate::embed::{MultimodalFeatures, Provider};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Model, PreparedCrop};
use crate::optim::{adamw_step, OptimizerState};
use crate::raster::{decode_image, RgbImage};
use crate::seeding::derive_seed;

/// A sample with its decoded image and prompt features.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: Sample,
    pub image: RgbImage,
    pub f_pd: MultimodalFeatures,
    pub f_po: MultimodalFeatures,
}

/// Decodes images and encodes prompts. Every missing image is reported at
/// once; samples without a descriptive prompt are rejected.
pub fn prepare(samples: &[Sample], provider: &Provider) -> Result<Vec<PreparedSample>> {
    let missing: Vec<_> = samples
        .iter()
        .filter(|s| !s.image_path.is_file())
        .map(|s| s.image_path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let no_pd: Vec<&str> = samples
        .iter()
        .filter(|s| s.descriptive_prompt.is_none())
        .map(|s| s.image_id.as_str())
        .collect();
    if !no_pd.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "samples without p_d (run gen-desc first): {}",
            no_pd.join(", ")
        )));
    }
    samples
        .iter()
        .map(|s| {
            let p_d = s.descriptive_prompt.as_deref().expect("checked");
            Ok(PreparedSample {
                image: decode_image(&s.image_path)?,
                f_pd: provider.encode_pair(p_d, &s.image_id)?,
                f_po: provider.encode_pair(&s.prompt, &s.image_id)?,
                sample: s.clone(),
            })
        })
        .collect()
}

pub fn eval_crop_seed(seed: u64, image_id: &str) -> u64 {
    derive_seed(seed, "eval", &[image_id.as_bytes()])
}

fn train_crop_seed(seed: u64, epoch: u32, image_id: &str) -> u64 {
    derive_seed(seed, "train", &[&epoch.to_le_bytes(), image_id.as_bytes()])
}

fn prepared_crops(model: &Model, image: &RgbImage, count: usize, seed: u64) -> Result<Vec<PreparedCrop>> {
    sample_crops(image, count, model.config.crop_size, seed)?
        .into_iter()
        .map(|c| PreparedCrop::new(c, &model.config))
        .collect()
}

/// Per-crop scores on the normalized scale.
pub fn predict_sample(model: &Model, s: &PreparedSample, crops: usize, seed: u64) -> Result<Vec<f64>> {
    let crops = prepared_crops(model, &s.image, crops, eval_crop_seed(seed, &s.sample.image_id))?;
    model.predict_crops(&crops, &s.f_pd, &s.f_po)
}

/// Crop-averaged predictions on the original MOS scale with the report
/// against each sample's `mos`.
pub fn evaluate(
    model: &Model,
    norm: &MosNormalizer,
    samples: &[PreparedSample],
    crops: usize,
    seed: u64,
) -> Result<(MetricReport, Vec<f64>)> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let per_crop = predict_sample(model, s, crops, seed)?;
        let mean = per_crop.iter().sum::<f64>() / per_crop.len() as f64;
        preds.push(norm.denormalize(mean));
    }
    let gt: Vec<f64> = samples.iter().map(|s| s.sample.mos).collect();
    Ok((MetricReport::compute(&preds, &gt)?, preds))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_srcc: f64,
    pub val_plcc: f64,
    pub val_main_score: f64,
    pub best_main_score: f64,
    pub improved: bool,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Mean Smooth-L1 over the crops of one sample, with parameter gradients.
fn sample_step(
    model: &Model,
    s: &PreparedSample,
    target: f64,
    crops: &[PreparedCrop],
    beta: f64,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::with_params(&model.store);
    let sci = model.sci(&mut tape, &s.f_pd, &s.f_po)?;
    let mut scores = Vec::with_capacity(crops.len());
    for c in crops {
        let vqi = model.vqi(&mut tape, c, &s.f_po)?;
        let out = model.head(&mut tape, sci, vqi)?;
        scores.push(out);
    }
    let scores = tape.concat(&scores, 0)?;
    let loss = tape.smooth_l1(scores, &vec![target; crops.len()], beta)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::Diverged(format!(
            "loss is {value} on sample {:?}",
            s.sample.image_id
        )));
    }
    Ok((value, tape.backward(loss)?.into_params()))
}

/// Full training run. `on_epoch` sees each log line as soon as it exists.
pub fn train(cfg: &RunConfig, samples: &[Sample], mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = SplitSpec {
        train_fraction: cfg.train_fraction,
        seed: derive_seed(cfg.seed, "split", &[]),
    };
    let (mut train_s, mut val_s) = split_dataset(samples, &split)?;
    if train_s.is_empty() || val_s.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "split left {} training and {} validation samples; need at least 1 and 2",
            train_s.len(),
            val_s.len()
        )));
    }
    let raw_val = val_s.clone();
    let raw_train = train_s.clone();
    let norm = normalize_mos(&mut train_s, &mut val_s)?;

    let provider = Provider::new(cfg.provider.clone(), cfg.model.dim)?;
    let train_p = prepare(&train_s, &provider)?;
    // validation predictions are compared on the original scale
    let val_p = prepare(&raw_val, &provider)?;

    let mut model = Model::new(cfg.model.clone(), derive_seed(cfg.seed, "init", &[]))?;
    let mut opt = OptimizerState::new(&model.store);
    let mut best: Option<(MetricReport, u32, crate::params::ParamStore)> = None;
    let mut logs = Vec::new();
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_p.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            "shuffle",
            &[&epoch.to_le_bytes()],
        )));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.reset_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train_p[i];
                let seed = train_crop_seed(cfg.seed, epoch, &s.sample.image_id);
                let crops = prepared_crops(&model, &s.image, cfg.train_crops, seed)?;
                let (loss, grads) = sample_step(&model, s, s.sample.mos, &crops, cfg.beta)?;
                loss_sum += loss;
                model.store.accumulate(&grads, scale);
            }
            adamw_step(&mut model.store, &mut opt, &cfg.optimizer, lr)?;
            if !model.store.all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameters after epoch {epoch} update"
                )));
            }
        }
        let (report, _) = evaluate(&model, &norm, &val_p, cfg.eval_crops, cfg.seed)?;
        let improved = best.as_ref().is_none_or(|b| report.main_score > b.0.main_score);
        if improved {
            best = Some((report, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_p.len() as f64,
            val_srcc: report.srcc,
            val_plcc: report.plcc,
            val_main_score: report.main_score,
            best_main_score: best.as_ref().expect("set above").0.main_score,
            improved,
        };
        on_epoch(&log);
        logs.push(log);
        if stale >= cfg.early_stop_patience {
            break;
        }
    }

    let (report, epoch, mut params) = best.expect("at least one epoch ran");
    params.zero_grad();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            normalizer: norm,
            best: report,
            epoch,
            params,
        },
        logs,
        train: raw_train,
        val: raw_val,
    })
}

/// Result of scoring one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub image_id: String,
    pub score: f64,
    pub crop_scores: Vec<f64>,
}

/// Scores one image with the checkpoint's crop protocol. Crop positions
/// depend on the seed and the image id, so this agrees with [`evaluate`].
pub fn score_image(
    ck: &Checkpoint,
    model: &Model,
    provider: &Provider,
    image_path: &Path,
    image_id: &str,
    prompt: &str,
    p_d: &str,
) -> Result<ScoreReport> {
    if !image_path.is_file() {
        return Err(Error::MissingFiles(vec![image_path.to_path_buf()]));
    }
    let s = PreparedSample {
        image: decode_image(image_path)?,
        f_pd: provider.encode_pair(p_d, image_id)?,
        f_po: provider.encode_pair(prompt, image_id)?,
        sample: Sample {
            image_path: image_path.to_path_buf(),
            prompt: prompt.to_string(),
            descriptive_prompt: Some(p_d.to_string()),
            mos: f64::NAN,
            image_id: image_id.to_string(),
        },
    };
    let per_crop = predict_sample(model, &s, ck.config.eval_crops, ck.config.seed)?;
    let crop_scores: Vec<f64> = per_crop.iter().map(|&v| ck.normalizer.denormalize(v)).collect();
    let score = ck
        .normalizer
        .denormalize(per_crop.iter().sum::<f64>() / per_crop.len() as f64);
    Ok(ScoreReport {
        image_id: image_id.to_string(),
        score,
        crop_scores,
    })
}
