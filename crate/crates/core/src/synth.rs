//! Synthetic quality dataset with known ground truth.
//!
//! Each image mixes smooth low-frequency colour fields with band-limited
//! high-frequency noise of amplitude `a`. Each prompt pair carries a planted
//! consistency factor `m`. The target is
//! `clamp(0.6 m + 0.4 (1 - a), 0, 1)`, so a model must read both the image
//! and the prompt features to fit it.
//!
//! The consistency factor is written into the embedding store:
//! original-prompt tokens carry a fixed alternating `+u / -u` pattern that is
//! the same for every sample. Descriptive-prompt tokens carry `(2m - 1) w`.
//! Only attention from descriptive to original tokens can turn this into a
//! score signal. Original-prompt features alone say nothing about `m`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, Sample};
use crate::embed::{deterministic_embedding, store_embedding, MultimodalFeatures};
use crate::error::{Error, Result};
use crate::fft::fft2_complex;
use crate::raster::RgbImage;
use crate::seeding::{derive_seed, Lcg64};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub image_size: usize,
    pub dim: usize,
    pub n_tokens: usize,
    /// Strength of the planted directions relative to unit-norm tokens.
    pub gamma: f64,
    /// Noise RMS in 8-bit levels at `a = 1`.
    pub noise_rms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 512,
            seed: 0,
            image_size: 64,
            dim: 32,
            n_tokens: 8,
            gamma: 1.0,
            noise_rms: 40.0,
        }
    }
}

/// Ground-truth factors of one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub match_factor: f64,
    pub noise: f64,
    pub mos: f64,
}

pub fn target_score(match_factor: f64, noise: f64) -> f64 {
    (0.6 * match_factor + 0.4 * (1.0 - noise)).clamp(0.0, 1.0)
}

/// Lowest radius, in frequency-index units, of the noise band.
pub fn noise_band_start(size: usize) -> f64 {
    size as f64 / 5.0
}

/// Largest radius of the smooth colour components.
pub const SMOOTH_MAX_RADIUS: f64 = 3.0;

fn signed(k: usize, size: usize) -> f64 {
    if k <= size / 2 {
        k as f64
    } else {
        k as f64 - size as f64
    }
}

/// Unit-RMS noise whose spectrum lives only at radii in
/// `[noise_band_start, size / 2]`.
pub fn band_noise(size: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let lo = noise_band_start(size);
    let hi = size as f64 / 2.0;
    let mut grid = vec![Complex64::default(); size * size];
    for v in 0..size {
        for u in 0..size {
            let r = signed(u, size).hypot(signed(v, size));
            if r >= lo && r <= hi {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                grid[v * size + u] = Complex64::new(re, im);
            }
        }
    }
    fft2_complex(&mut grid, size, true)?;
    // the real part is the transform of the Hermitian part of the spectrum,
    // which occupies the same symmetric band
    let mut out: Vec<f64> = grid.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    Ok(out)
}

/// The unquantized three-channel image, row-major `(y, x, c)`.
pub fn image_field(size: usize, noise: f64, noise_rms: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..185.0));
    let n_waves = 3;
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..n_waves)
        .map(|_| loop {
            let kx = rng.random_range(-2i32..=2) as f64;
            let ky = rng.random_range(-2i32..=2) as f64;
            if (kx, ky) != (0.0, 0.0) {
                let amp = rng.random_range(8.0..25.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let gains = std::array::from_fn(|_| rng.random_range(0.5..1.5));
                break (kx, ky, amp, phase, gains);
            }
        })
        .collect();
    let grain = band_noise(size, rng)?;
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let n = noise * noise_rms * grain[y * size + x];
            for c in 0..3 {
                let smooth: f64 = waves
                    .iter()
                    .map(|&(kx, ky, amp, ph, g)| {
                        g[c] * amp * (2.0 * PI * (kx * x as f64 + ky * y as f64) / size as f64 + ph).sin()
                    })
                    .sum();
                out.push(base[c] + smooth + n);
            }
        }
    }
    Ok(out)
}

pub fn quantize(field: &[f64], size: usize) -> RgbImage {
    let data = field.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::new(size, size, data).expect("field has size*size*3 values")
}

fn unit_direction(seed: u64, dim: usize) -> Vec<f64> {
    let mut lcg = Lcg64::new(seed);
    let v: Vec<f64> = (0..dim).map(|_| lcg.next_signed_unit()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Adds `coef(token) * dir` to every token and renormalizes.
fn plant(base: &MultimodalFeatures, dir: &[f64], coef: impl Fn(usize) -> f64) -> MultimodalFeatures {
    let d = base.dim();
    let mut data = base.tokens.data().to_vec();
    for (t, tok) in data.chunks_mut(d).enumerate() {
        let c = coef(t);
        tok.iter_mut().zip(dir).for_each(|(v, u)| *v += c * u);
        let n = tok.iter().map(|x| x * x).sum::<f64>().sqrt();
        tok.iter_mut().for_each(|v| *v /= n);
    }
    MultimodalFeatures::new(Tensor::from_vec(base.tokens.dims(), data).unwrap()).unwrap()
}

const ADJECTIVES: [&str; 8] = [
    "red", "ancient", "glowing", "tiny", "misty", "golden", "wooden", "frozen",
];
const SUBJECTS: [&str; 8] = [
    "lighthouse",
    "fox",
    "teapot",
    "castle",
    "sailboat",
    "robot",
    "violin",
    "orchard",
];
const SCENES: [&str; 6] = [
    "at dusk",
    "in a meadow",
    "on a desk",
    "under the sea",
    "in the snow",
    "in a city street",
];
const STYLES: [&str; 4] = ["an oil painting", "a photograph", "a watercolor", "a 3d render"];

fn prompts(rng: &mut impl Rng, match_factor: f64) -> (String, String) {
    let pick = |rng: &mut dyn rand::RngCore, n: usize| rng.random_range(0..n);
    let (a, s, c, st) = (pick(rng, 8), pick(rng, 8), pick(rng, 6), pick(rng, 4));
    let p_o = format!("a {} {} {}, {}", ADJECTIVES[a], SUBJECTS[s], SCENES[c], STYLES[st]);
    // the wording drifts from the prompt as consistency drops
    let s_d = if match_factor >= 0.5 {
        s
    } else {
        (s + 1 + pick(rng, 7)) % 8
    };
    let c_d = if match_factor >= 0.25 { c } else { (c + 1) % 6 };
    let p_d = format!(
        "An image showing a {} {}, rendered as {}.",
        SUBJECTS[s_d], SCENES[c_d], STYLES[st]
    );
    (p_o, p_d)
}

/// Writes `images/`, `embeddings/`, `manifest.jsonl` and `factors.jsonl`
/// under `out_dir`.
pub fn generate(out_dir: &Path, cfg: &SynthConfig) -> Result<Vec<SynthRecord>> {
    if cfg.n < 10 {
        return Err(Error::InvalidArgument(format!("need n >= 10, got {}", cfg.n)));
    }
    if !cfg.image_size.is_power_of_two() || cfg.image_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be a power of two >= 8, got {}",
            cfg.image_size
        )));
    }
    if cfg.n_tokens < 2 || cfg.dim == 0 {
        return Err(Error::InvalidArgument("need n_tokens >= 2 and dim >= 1".into()));
    }
    let img_dir = out_dir.join("images");
    let emb_dir = out_dir.join("embeddings");
    for d in [&img_dir, &emb_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let anchor = unit_direction(derive_seed(cfg.seed, "synth-anchor", &[]), cfg.dim);
    let probe = unit_direction(derive_seed(cfg.seed, "synth-probe", &[]), cfg.dim);

    let mut samples = Vec::with_capacity(cfg.n);
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let id = format!("img_{i:04}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth", &[id.as_bytes()]));
        let match_factor: f64 = rng.random();
        let noise: f64 = rng.random();
        let mos = target_score(match_factor, noise);

        let field = image_field(cfg.image_size, noise, cfg.noise_rms, &mut rng)?;
        let image_path: PathBuf = img_dir.join(format!("{id}.ppm"));
        fs::write(&image_path, quantize(&field, cfg.image_size).to_ppm()).map_err(|e| Error::io(&image_path, e))?;

        let (p_o, p_d) = prompts(&mut rng, match_factor);
        let g = cfg.gamma;
        let f_po = plant(
            &deterministic_embedding(&p_o, &id, cfg.n_tokens, cfg.dim),
            &anchor,
            |t| if t % 2 == 0 { g } else { -g },
        );
        let f_pd = plant(
            &deterministic_embedding(&p_d, &id, cfg.n_tokens, cfg.dim),
            &probe,
            |_| g * (2.0 * match_factor - 1.0),
        );
        store_embedding(&emb_dir, &p_o, &id, &f_po)?;
        store_embedding(&emb_dir, &p_d, &id, &f_pd)?;

        samples.push(Sample {
            image_path,
            prompt: p_o,
            descriptive_prompt: Some(p_d),
            mos,
            image_id: id.clone(),
        });
        records.push(SynthRecord {
            id,
            match_factor,
            noise,
            mos,
        });
    }
    write_manifest(out_dir.join("manifest.jsonl"), &samples)?;
    let mut factors = String::new();
    for r in &records {
        factors.push_str(&serde_json::to_string(r).expect("record serializes"));
        factors.push('\n');
    }
    let fpath = out_dir.join("factors.jsonl");
    fs::write(&fpath, factors).map_err(|e| Error::io(&fpath, e))?;
    Ok(records)
}
