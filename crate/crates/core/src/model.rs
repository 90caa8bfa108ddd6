//! The quality model: semantic consistency from prompt features, visual
//! quality from a small ViT with perceptually weighted pooling, and a gated
//! mixture of expert regressors on top.
//!
//! Every block is a free function over a [`Tape`] so it can be tested and
//! gradient-checked in isolation; [`Model`] wires them together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embed::MultimodalFeatures;
use crate::error::{Error, Result};
use crate::hvs::{hvs_weights, luminance, HvsWeightMap, PatchGrid, ViewingConfig};
use crate::params::{ParamId, ParamStore};
use crate::raster::RgbImage;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub vit_depth: usize,
    pub heads: usize,
    pub crop_size: usize,
    pub patch_size: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    /// Adds the query tokens back onto the consistency attention output.
    pub tsam_residual: bool,
    /// Keeps the visual features as a residual path through preference fusion.
    pub pref_residual: bool,
    pub freeze_backbone: bool,
    /// Feeds zeros instead of prompt features to the consistency branch.
    pub disable_sci: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            vit_depth: 6,
            heads: 8,
            crop_size: 64,
            patch_size: 16,
            n_experts: 4,
            top_k: 3,
            expert_hidden: 128,
            tsam_residual: false,
            pref_residual: true,
            freeze_backbone: false,
            disable_sci: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.vit_depth < 4 {
            return bad(format!("vit_depth must be at least 4, got {}", self.vit_depth));
        }
        if !self.patch_size.is_power_of_two() {
            return bad(format!("patch_size must be a power of two, got {}", self.patch_size));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "crop_size {} must be a positive multiple of patch_size {}",
                self.crop_size, self.patch_size
            ));
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "need 1 <= top_k ({}) <= n_experts ({})",
                self.top_k, self.n_experts
            ));
        }
        if self.expert_hidden == 0 {
            return bad("expert_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::for_crop(self.crop_size, self.patch_size).expect("validated config")
    }

    pub fn num_patches(&self) -> usize {
        let side = self.crop_size / self.patch_size;
        side * side
    }
}

/// Affine map `x W + b` on row vectors; `W` is `[in x out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: (ParamId, ParamId),
    pub attn: AttnParams,
    pub ln2: (ParamId, ParamId),
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct VitParams {
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct PrefParams {
    pub proj_v: Linear,
    pub proj_t: Linear,
    pub attn: AttnParams,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct Expert {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MoerParams {
    pub gate: Linear,
    pub experts: Vec<Expert>,
}

/// Handles to every parameter of the model inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub tsam: AttnParams,
    pub vit: VitParams,
    pub fuse: Linear,
    pub pref: PrefParams,
    pub spatial: Linear,
    pub channel: Linear,
    pub moer: MoerParams,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let w = self
            .store
            .add(format!("{name}.w"), Tensor::from_vec(&[fan_in, fan_out], w).unwrap());
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b: Some(b) }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnParams {
        AttnParams {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.store.add(format!("{name}.g"), Tensor::full(&[d], 1.0)),
            self.store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        )
    }
}

impl ModelParams {
    /// Registers freshly initialized parameters in `store`.
    pub fn init(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let tsam = init.attn("tsam.attn", d);

        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let patch_embed = init.linear("vit.patch_embed", patch_in, d);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let pos: Vec<f64> = (0..cfg.num_patches() * d)
            .map(|_| normal.sample(&mut init.rng))
            .collect();
        let pos = init
            .store
            .add("vit.pos", Tensor::from_vec(&[cfg.num_patches(), d], pos)?);
        let blocks = (0..cfg.vit_depth)
            .map(|i| BlockParams {
                ln1: init.layer_norm(&format!("vit.blocks.{i}.ln1"), d),
                attn: init.attn(&format!("vit.blocks.{i}.attn"), d),
                ln2: init.layer_norm(&format!("vit.blocks.{i}.ln2"), d),
                fc1: init.linear(&format!("vit.blocks.{i}.fc1"), d, 4 * d),
                fc2: init.linear(&format!("vit.blocks.{i}.fc2"), 4 * d, d),
            })
            .collect();

        let fuse = init.linear("fuse", 4 * d, d);
        let pref = PrefParams {
            proj_v: init.linear("pref.proj_v", d, d),
            proj_t: init.linear("pref.proj_t", d, d),
            attn: init.attn("pref.attn", d),
            out: init.linear("pref.out", d, d),
        };
        let spatial = init.linear("spatial", d, 1);
        let channel = init.linear("channel", d, d);
        let gate = init.linear("moer.gate", 2 * d, cfg.n_experts);
        let experts = (0..cfg.n_experts)
            .map(|e| Expert {
                fc1: init.linear(&format!("moer.experts.{e}.fc1"), 2 * d, cfg.expert_hidden),
                fc2: init.linear(&format!("moer.experts.{e}.fc2"), cfg.expert_hidden, 1),
            })
            .collect();

        Ok(ModelParams {
            tsam,
            vit: VitParams {
                patch_embed,
                pos,
                blocks,
            },
            fuse,
            pref,
            spatial,
            channel,
            moer: MoerParams { gate, experts },
        })
    }
}

/// Output of [`cross_attention`] with the per-head attention matrices.
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention of `query [Nq x D]` over
/// `kv [Nk x D]`, followed by the output projection. No residual.
pub fn cross_attention(tape: &mut Tape, query: Var, kv: Var, p: &AttnParams, heads: usize) -> Result<Attention> {
    let (qd, kd) = (tape.dims(query).to_vec(), tape.dims(kv).to_vec());
    if qd.len() != 2 || kd.len() != 2 || qd[1] != kd[1] {
        return Err(Error::Shape(format!("cross_attention: query {qd:?} vs kv {kd:?}")));
    }
    let d = qd[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = p.q.forward(tape, query)?;
    let k = p.k.forward(tape, kv)?;
    let v = p.v.forward(tape, kv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.narrow(q, 1, h * dh, dh)?,
                tape.narrow(k, 1, h * dh, dh)?,
                tape.narrow(v, 1, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    Ok(Attention {
        output: p.o.forward(tape, cat)?,
        weights,
    })
}

/// Semantic consistency vector `[D]`: descriptive-prompt tokens attend over
/// original-prompt tokens, then the result is averaged over tokens.
pub fn compute_sci(tape: &mut Tape, f_pd: Var, f_po: Var, p: &AttnParams, heads: usize, residual: bool) -> Result<Var> {
    let att = cross_attention(tape, f_pd, f_po, p, heads)?;
    let out = if residual {
        tape.add(att.output, f_pd)?
    } else {
        att.output
    };
    tape.mean_pool(out, 0)
}

/// Splits a crop into row-major patches, each flattened as
/// `(y, x, channel)` and mapped from `[0, 255]` to `[-0.5, 0.5]`.
pub fn patchify(crop: &RgbImage, patch: usize) -> Result<Tensor> {
    if !crop.width.is_multiple_of(patch) || !crop.height.is_multiple_of(patch) {
        return Err(Error::Shape(format!(
            "{}x{} crop is not divisible into {patch}x{patch} patches",
            crop.width, crop.height
        )));
    }
    let (rows, cols) = (crop.height / patch, crop.width / patch);
    let mut data = Vec::with_capacity(crop.data.len());
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..patch {
                let start = ((pr * patch + y) * crop.width + pc * patch) * 3;
                data.extend(
                    crop.data[start..start + 3 * patch]
                        .iter()
                        .map(|&v| v as f64 / 255.0 - 0.5),
                );
            }
        }
    }
    Tensor::from_vec(&[rows * cols, 3 * patch * patch], data)
}

fn vit_block(tape: &mut Tape, x: Var, b: &BlockParams, heads: usize) -> Result<Var> {
    let (g, bb) = (tape.param(b.ln1.0), tape.param(b.ln1.1));
    let h = tape.layer_norm(x, g, bb)?;
    let a = cross_attention(tape, h, h, &b.attn, heads)?;
    let x = tape.add(x, a.output)?;
    let (g, bb) = (tape.param(b.ln2.0), tape.param(b.ln2.1));
    let h = tape.layer_norm(x, g, bb)?;
    let h = b.fc1.forward(tape, h)?;
    let h = tape.gelu(h);
    let h = b.fc2.forward(tape, h)?;
    tape.add(x, h)
}

/// Runs the backbone and returns every block's output `[P x D]`.
pub fn vit_forward(tape: &mut Tape, crop: &RgbImage, p: &VitParams, cfg: &ModelConfig) -> Result<Vec<Var>> {
    if crop.width != cfg.crop_size || crop.height != cfg.crop_size {
        return Err(Error::Shape(format!(
            "crop is {}x{}, model expects {}x{}",
            crop.width, crop.height, cfg.crop_size, cfg.crop_size
        )));
    }
    let patches = patchify(crop, cfg.patch_size)?;
    let patches = tape.leaf(&patches);
    let x = p.patch_embed.forward(tape, patches)?;
    let pos = tape.param(p.pos);
    let mut x = tape.add(x, pos)?;
    let mut outs = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        x = vit_block(tape, x, b, cfg.heads)?;
        outs.push(x);
    }
    Ok(outs)
}

/// Concatenates four feature maps per patch and projects `4D -> D`.
pub fn fuse_multilevel(tape: &mut Tape, last4: &[Var], proj: &Linear) -> Result<Var> {
    if last4.len() != 4 {
        return Err(Error::Shape(format!("expected 4 feature maps, got {}", last4.len())));
    }
    let cat = tape.concat(last4, 1)?;
    proj.forward(tape, cat)
}

/// Refines visual features with original-prompt features.
pub fn fuse_preference(
    tape: &mut Tape,
    f_vq: Var,
    f_po: Var,
    p: &PrefParams,
    heads: usize,
    residual: bool,
) -> Result<Var> {
    let qv = p.proj_v.forward(tape, f_vq)?;
    let kt = p.proj_t.forward(tape, f_po)?;
    let att = cross_attention(tape, qv, kt, &p.attn, heads)?;
    let out = p.out.forward(tape, att.output)?;
    if residual {
        tape.add(f_vq, out)
    } else {
        Ok(out)
    }
}

/// Per-patch importance `[P x 1]`.
pub fn spatial_weights(tape: &mut Tape, f: Var, lin: &Linear) -> Result<Var> {
    let s = lin.forward(tape, f)?;
    Ok(tape.sigmoid(s))
}

/// Per-channel importance `[D]` from the patch-averaged features.
pub fn channel_weights(tape: &mut Tape, f: Var, lin: &Linear) -> Result<Var> {
    let d = tape.dims(f)[1];
    let m = tape.mean_pool(f, 0)?;
    let m = tape.reshape(m, &[1, d])?;
    let c = lin.forward(tape, m)?;
    let c = tape.sigmoid(c);
    tape.reshape(c, &[d])
}

/// Modulates features by `W_s` and `W_c`, then takes the average over
/// patches weighted by the constant `1 + W_h`, normalized to sum to one.
pub fn aqafp_pool(tape: &mut Tape, f: Var, w_s: Var, w_c: Var, w_h: &[f64]) -> Result<Var> {
    let dims = tape.dims(f).to_vec();
    let (p, d) = match dims[..] {
        [p, d] => (p, d),
        _ => return Err(Error::Shape(format!("features must be [P x D], got {dims:?}"))),
    };
    if w_h.len() != p {
        return Err(Error::Shape(format!("{} HVS weights for {p} patches", w_h.len())));
    }
    let w_s = tape.reshape(w_s, &[p])?;
    let m = tape.mul_col(f, w_s)?;
    let m = tape.mul_row(m, w_c)?;
    let total: f64 = w_h.iter().map(|w| 1.0 + w).sum();
    let row: Vec<f64> = w_h.iter().map(|w| (1.0 + w) / total).collect();
    let row = tape.constant(&[1, p], row)?;
    let pooled = tape.matmul(row, m)?;
    tape.reshape(pooled, &[d])
}

/// Top-`k` experts by gate probability (ties go to the lower index) with
/// their probabilities renormalized to sum to one.
pub fn select_top_k(probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    order.into_iter().map(|i| (i, probs[i] / total)).collect()
}

/// Which experts fired for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Gated mixture over `concat(sci, vqi)`; returns the `[1]` score.
pub fn moer_predict(tape: &mut Tape, sci: Var, vqi: Var, p: &MoerParams, top_k: usize) -> Result<(Var, Routing)> {
    if tape.dims(sci) != tape.dims(vqi) || tape.dims(sci).len() != 1 {
        return Err(Error::Shape(format!(
            "sci {:?} and vqi {:?} must be equal-length vectors",
            tape.dims(sci),
            tape.dims(vqi)
        )));
    }
    if top_k == 0 || top_k > p.experts.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k {top_k} for {} experts",
            p.experts.len()
        )));
    }
    let z = tape.concat(&[sci, vqi], 0)?;
    let z = tape.reshape(z, &[1, 2 * tape.dims(sci)[0]])?;
    let logits = p.gate.forward(tape, z)?;
    let probs = tape.softmax(logits, 1)?;
    let chosen = select_top_k(tape.value(probs), top_k);
    let idx: Vec<usize> = chosen.iter().map(|c| c.0).collect();
    let sel = tape.gather(probs, &idx)?;
    let total = tape.sum(sel);
    let gates = tape.div_scalar(sel, total)?;
    let mut outs = Vec::with_capacity(top_k);
    for &e in &idx {
        let ex = &p.experts[e];
        let h = ex.fc1.forward(tape, z)?;
        let h = tape.gelu(h);
        let y = ex.fc2.forward(tape, h)?;
        outs.push(tape.reshape(y, &[1])?);
    }
    let ys = tape.concat(&outs, 0)?;
    let weighted = tape.mul(ys, gates)?;
    let score = tape.sum(weighted);
    let routing = Routing {
        experts: idx,
        weights: tape.value(gates).to_vec(),
    };
    Ok((score, routing))
}

/// A crop with its precomputed HVS weights.
#[derive(Clone, Debug)]
pub struct PreparedCrop {
    pub image: RgbImage,
    pub hvs: HvsWeightMap,
}

impl PreparedCrop {
    pub fn new(image: RgbImage, cfg: &ModelConfig) -> Result<Self> {
        let hvs = hvs_weights(&luminance(&image), &cfg.grid(), &ViewingConfig::default())?;
        Ok(PreparedCrop { image, hvs })
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = ModelParams::init(&config, &mut store, seed)?;
        if config.freeze_backbone {
            store.set_trainable("vit.", false);
        }
        Ok(Model { config, store, params })
    }

    fn features(&self, tape: &mut Tape, f: &MultimodalFeatures, zero: bool) -> Result<Var> {
        if f.dim() != self.config.dim {
            return Err(Error::Shape(format!(
                "features have dimension {}, model expects {}",
                f.dim(),
                self.config.dim
            )));
        }
        Ok(if zero {
            tape.leaf(&f.zeroed().tokens)
        } else {
            tape.leaf(&f.tokens)
        })
    }

    /// Consistency branch; depends only on the prompt features.
    pub fn sci(&self, tape: &mut Tape, f_pd: &MultimodalFeatures, f_po: &MultimodalFeatures) -> Result<Var> {
        let off = self.config.disable_sci;
        let pd = self.features(tape, f_pd, off)?;
        let po = self.features(tape, f_po, off)?;
        compute_sci(
            tape,
            pd,
            po,
            &self.params.tsam,
            self.config.heads,
            self.config.tsam_residual,
        )
    }

    /// Visual branch for one crop.
    pub fn vqi(&self, tape: &mut Tape, crop: &PreparedCrop, f_po: &MultimodalFeatures) -> Result<Var> {
        let cfg = &self.config;
        let levels = vit_forward(tape, &crop.image, &self.params.vit, cfg)?;
        let f_vq = fuse_multilevel(tape, &levels[levels.len() - 4..], &self.params.fuse)?;
        let po = self.features(tape, f_po, false)?;
        let f = fuse_preference(tape, f_vq, po, &self.params.pref, cfg.heads, cfg.pref_residual)?;
        let w_s = spatial_weights(tape, f, &self.params.spatial)?;
        let w_c = channel_weights(tape, f, &self.params.channel)?;
        aqafp_pool(tape, f, w_s, w_c, &crop.hvs.weights)
    }

    pub fn head(&self, tape: &mut Tape, sci: Var, vqi: Var) -> Result<Var> {
        Ok(moer_predict(tape, sci, vqi, &self.params.moer, self.config.top_k)?.0)
    }

    /// Full forward pass for one crop; the result has one element.
    pub fn forward(
        &self,
        tape: &mut Tape,
        crop: &PreparedCrop,
        f_pd: &MultimodalFeatures,
        f_po: &MultimodalFeatures,
    ) -> Result<Var> {
        let sci = self.sci(tape, f_pd, f_po)?;
        let vqi = self.vqi(tape, crop, f_po)?;
        self.head(tape, sci, vqi)
    }

    /// Scores each crop without recording gradients.
    pub fn predict_crops(
        &self,
        crops: &[PreparedCrop],
        f_pd: &MultimodalFeatures,
        f_po: &MultimodalFeatures,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(&self.store);
        let sci = self.sci(&mut tape, f_pd, f_po)?;
        let mut scores = Vec::with_capacity(crops.len());
        for c in crops {
            let vqi = self.vqi(&mut tape, c, f_po)?;
            let s = self.head(&mut tape, sci, vqi)?;
            scores.push(tape.scalar_value(s));
        }
        Ok(scores)
    }
}
