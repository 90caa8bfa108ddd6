//! JSONL manifests, crop sampling, splitting and MOS normalization.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_path: PathBuf,
    pub prompt: String,
    pub descriptive_prompt: Option<String>,
    pub mos: f64,
    pub image_id: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    image: String,
    prompt: String,
    mos: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_d: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

fn default_id(image: &str) -> String {
    Path::new(image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image.to_string())
}

/// Parses a JSONL manifest. Relative image paths resolve against the
/// manifest's directory. The whole file loads or nothing does.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(raw).map_err(|e| err(line_no, e.to_string()))?;
        if !rec.mos.is_finite() {
            return Err(err(line_no, "mos must be finite".into()));
        }
        if rec.prompt.is_empty() {
            return Err(err(line_no, "prompt must be non-empty".into()));
        }
        let id = rec.id.clone().unwrap_or_else(|| default_id(&rec.image));
        if !seen.insert(id.clone()) {
            return Err(err(line_no, format!("duplicate id {id:?}")));
        }
        let image = PathBuf::from(&rec.image);
        samples.push(Sample {
            image_path: if image.is_absolute() { image } else { base.join(image) },
            prompt: rec.prompt,
            descriptive_prompt: rec.p_d,
            mos: rec.mos,
            image_id: id,
        });
    }
    Ok(samples)
}

/// Writes a JSONL manifest; image paths under the manifest's directory are
/// stored relative to it.
pub fn write_manifest(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let abs_base = std::path::absolute(base).ok();
    let mut out = Vec::new();
    for s in samples {
        let image = s
            .image_path
            .strip_prefix(base)
            .ok()
            .or_else(|| s.image_path.strip_prefix(abs_base.as_ref()?).ok())
            .unwrap_or(&s.image_path)
            .to_string_lossy()
            .into_owned();
        let line = ManifestLine {
            id: (default_id(&image) != s.image_id).then(|| s.image_id.clone()),
            image,
            prompt: s.prompt.clone(),
            mos: s.mos,
            p_d: s.descriptive_prompt.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("manifest line serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// `count` square crops of side `size` with uniformly drawn top-left
/// corners. Images smaller than `size` are edge-extended first.
pub fn sample_crops(image: &RgbImage, count: usize, size: usize, seed: u64) -> Result<Vec<RgbImage>> {
    if count == 0 || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "need a positive crop count and size, got {count} x {size}"
        )));
    }
    let img = image.edge_extend(size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = (0..count)
        .map(|_| {
            let x = rng.random_range(0..=img.width - size);
            let y = rng.random_range(0..=img.height - size);
            img.crop(x, y, size, size)
        })
        .collect();
    Ok(crops)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Seeded Fisher-Yates shuffle; the first `floor(n * train_fraction)`
/// samples form the training split.
pub fn split_dataset<T: Clone>(samples: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to split, got {}",
            samples.len()
        )));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (samples.len() as f64 * spec.train_fraction).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Affine min-max map fitted on training scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosNormalizer {
    pub min: f64,
    pub max: f64,
}

impl MosNormalizer {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::InvalidArgument(
                "MOS normalization needs at least two distinct values".into(),
            ));
        }
        Ok(MosNormalizer { min, max })
    }

    pub fn normalize(&self, mos: f64) -> f64 {
        (mos - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, score: f64) -> f64 {
        score * (self.max - self.min) + self.min
    }
}

/// Fits on `train` and maps both splits; validation values are not clipped.
pub fn normalize_mos(train: &mut [Sample], val: &mut [Sample]) -> Result<MosNormalizer> {
    let scores: Vec<f64> = train.iter().map(|s| s.mos).collect();
    let norm = MosNormalizer::fit(&scores)?;
    for s in train.iter_mut().chain(val.iter_mut()) {
        s.mos = norm.normalize(s.mos);
    }
    Ok(norm)
}
