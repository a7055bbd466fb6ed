//! Encoder / classification-head / reconstruction-head bundle with patch
//! masking, class-logit masking, and head growth.
//!
//! The classifier maps mean-pooled encoder tokens to logits over the classes
//! seen so far; its width grows as new classes arrive, copying old rows
//! bit-exact. The reconstructor is a one-block decoder fed the encoded
//! visible tokens plus a learned mask token at masked positions, and predicts
//! raw pixels for the masked patches only.

use crate::corpus::{ClassId, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{
    mean_pool, mean_pool_backward, normal_matrix, sum_rows_at, Linear, Param, Tower, TowerCache,
};
use crate::util::{hash_f64s, rng_for};
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

/// Logit value standing in for minus infinity. Large enough that adding it
/// absorbs any realistic logit in f64 and its softmax weight underflows to
/// exactly zero, so inactive classes get exactly zero gradient.
pub const NEG_MASK: f64 = -1e30;

/// How the reconstruction loss is normalized; the mean form keeps the
/// reconstruction scale comparable across batch sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconNorm {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageShape,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    /// Scale of fresh classifier rows.
    pub head_init_std: f64,
    pub init_std: f64,
    pub recon_norm: ReconNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::new(32, 32, 3),
            patch_size: 8,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_dim: 64,
            decoder_heads: 4,
            mask_ratio: 0.75,
            head_init_std: 0.02,
            init_std: 0.02,
            recon_norm: ReconNorm::Mean,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image.height / self.patch_size, self.image.width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (gy, gx) = self.grid();
        gy * gx
    }

    pub fn patch_elems(&self) -> usize {
        self.patch_size * self.patch_size * self.image.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.height % self.patch_size != 0 || self.image.width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible into {}-pixel patches",
                self.image.height, self.image.width, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0,1]", self.mask_ratio)));
        }
        if self.embed_dim % self.heads != 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::Config("embed dims must divide their head counts".into()));
        }
        Ok(())
    }

    /// Stable hash of the architecture; checkpoints refuse to load into a
    /// different architecture.
    pub fn config_hash(&self) -> String {
        crate::util::sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

/// Active classes of the current time step; logits outside the set are
/// masked out of the softmax support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub active: BTreeSet<ClassId>,
}

impl ClassMask {
    pub fn new(active: BTreeSet<ClassId>) -> Result<Self> {
        if active.is_empty() {
            return Err(Error::Contract("class mask must have a nonempty active set".into()));
        }
        Ok(Self { active })
    }
}

// ---------------------------------------------------------------------------
// Patch extraction and masking

/// Cut one flattened HWC image into row-major patches: output row `p` holds
/// patch `p`'s pixels in (y, x, channel) order.
pub fn patchify(image: &[f64], shape: ImageShape, patch: usize) -> Array2<f64> {
    let (gy, gx) = (shape.height / patch, shape.width / patch);
    let elems = patch * patch * shape.channels;
    let mut out = Array2::zeros((gy * gx, elems));
    for py in 0..gy {
        for px in 0..gx {
            let row = py * gx + px;
            let mut col = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..shape.channels {
                        let y = py * patch + dy;
                        let x = px * patch + dx;
                        out[[row, col]] = image[(y * shape.width + x) * shape.channels + ch];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &ArrayView2<f64>, shape: ImageShape, patch: usize) -> Vec<f64> {
    let (gy, gx) = (shape.height / patch, shape.width / patch);
    let mut out = vec![0.0; shape.len()];
    for py in 0..gy {
        for px in 0..gx {
            let row = py * gx + px;
            let mut col = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..shape.channels {
                        let y = py * patch + dy;
                        let x = px * patch + dx;
                        out[(y * shape.width + x) * shape.channels + ch] = patches[[row, col]];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// A seeded visible/masked split of one image's patches. Masked count is
/// `round(mask_ratio * num_patches)`; both index lists are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Split patch indices into visible and masked sets and return the exact
/// pixel crops of the masked patches as targets.
pub fn mask_patches(
    image: &[f64],
    shape: ImageShape,
    patch: usize,
    mask_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(PatchMask, Array2<f64>)> {
    if shape.height % patch != 0 || shape.width % patch != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible into {patch}-pixel patches",
            shape.height, shape.width
        )));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!("mask ratio {mask_ratio} outside [0,1]")));
    }
    let patches = patchify(image, shape, patch);
    let num = patches.nrows();
    let masked_count = (mask_ratio * num as f64).round() as usize;
    let mut order: Vec<usize> = (0..num).collect();
    order.shuffle(rng);
    let mut masked: Vec<usize> = order[..masked_count].to_vec();
    let mut visible: Vec<usize> = order[masked_count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    let mut targets = Array2::zeros((masked_count, patches.ncols()));
    for (i, &p) in masked.iter().enumerate() {
        targets.row_mut(i).assign(&patches.row(p));
    }
    Ok((PatchMask { visible, masked }, targets))
}

// ---------------------------------------------------------------------------
// Bundle

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    // Encoder.
    patch_embed: Linear,
    enc_pos: Param,
    encoder: Tower,
    // Reconstruction head.
    dec_embed: Linear,
    mask_token: Param,
    dec_pos: Param,
    decoder: Tower,
    dec_out: Linear,
    // Classification head.
    classifier: Linear,
    seen: Vec<ClassId>,
    class_to_idx: HashMap<ClassId, usize>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model-init");
        let d = config.embed_dim;
        let dd = config.decoder_dim;
        let p = config.num_patches();
        let std = config.init_std;
        Ok(Self {
            patch_embed: Linear::new(&mut rng, config.patch_elems(), d, std),
            enc_pos: Param::normal(&mut rng, p, d, std, false),
            encoder: Tower::new(&mut rng, d, config.depth, config.heads, config.mlp_ratio, std),
            dec_embed: Linear::new(&mut rng, d, dd, std),
            mask_token: Param::normal(&mut rng, 1, dd, std, false),
            dec_pos: Param::normal(&mut rng, p, dd, std, false),
            decoder: Tower::new(&mut rng, dd, 1, config.decoder_heads, config.mlp_ratio, std),
            dec_out: Linear::new(&mut rng, dd, config.patch_elems(), std),
            classifier: Linear {
                w: Param::zeros(0, d, true),
                b: Param::zeros(1, 0, false),
            },
            seen: Vec::new(),
            class_to_idx: HashMap::new(),
            config,
        })
    }

    pub fn seen_classes(&self) -> &[ClassId] {
        &self.seen
    }

    pub fn head_width(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Logit column for a class.
    pub fn class_index(&self, class: ClassId) -> Result<usize> {
        self.class_to_idx
            .get(&class)
            .copied()
            .ok_or_else(|| Error::Contract(format!("class {class} not yet seen by the head")))
    }

    /// Class at a logit column.
    pub fn class_at(&self, index: usize) -> Option<ClassId> {
        self.seen.get(index).copied()
    }

    /// Resolve a class mask into sorted logit columns.
    pub fn resolve_mask(&self, mask: &ClassMask) -> Result<Vec<usize>> {
        let mut cols = Vec::with_capacity(mask.active.len());
        for &c in &mask.active {
            cols.push(self.class_index(c)?);
        }
        cols.sort_unstable();
        Ok(cols)
    }

    /// Grow the classifier by the given classes. Existing rows are copied
    /// bit-exact; new rows are seeded small-scale gaussian. Classes already
    /// seen are a contract violation (class-incremental callers); use
    /// [`ModelBundle::expand_head_skip_seen`] where rosters may recur.
    pub fn expand_classification_head(&mut self, new_classes: &[ClassId], seed: u64) -> Result<usize> {
        for c in new_classes {
            if self.class_to_idx.contains_key(c) {
                return Err(Error::Contract(format!(
                    "class {c} already present in classification head"
                )));
            }
        }
        let mut uniq = BTreeSet::new();
        for &c in new_classes {
            if !uniq.insert(c) {
                return Err(Error::Contract(format!("class {c} duplicated in expansion set")));
            }
        }
        if new_classes.is_empty() {
            return Ok(0);
        }
        let old_rows = self.classifier.out_dim();
        let d = self.config.embed_dim;
        let added = uniq.len();
        let mut rng = rng_for(seed, "head-expand");
        let fresh_w = normal_matrix(&mut rng, added, d, self.config.head_init_std);

        let mut w = Array2::zeros((old_rows + added, d));
        if old_rows > 0 {
            w.slice_mut(s![..old_rows, ..]).assign(&self.classifier.w.value);
        }
        w.slice_mut(s![old_rows.., ..]).assign(&fresh_w);
        let mut b = Array2::zeros((1, old_rows + added));
        if old_rows > 0 {
            b.slice_mut(s![.., ..old_rows]).assign(&self.classifier.b.value);
        }
        self.classifier.w = Param::new(w, true);
        self.classifier.b = Param::new(b, false);
        for c in uniq {
            self.class_to_idx.insert(c, self.seen.len());
            self.seen.push(c);
        }
        Ok(added)
    }

    /// Expansion for time-incremental rosters: recurring classes are a no-op.
    pub fn expand_head_skip_seen(&mut self, classes: &[ClassId], seed: u64) -> Result<usize> {
        let fresh: Vec<ClassId> = classes
            .iter()
            .copied()
            .filter(|c| !self.class_to_idx.contains_key(c))
            .collect();
        self.expand_classification_head(&fresh, seed)
    }

    // -- Forward paths ------------------------------------------------------

    fn check_images(&self, images: &ArrayView2<f64>) -> Result<()> {
        if images.ncols() != self.config.image.len() {
            return Err(Error::Input(format!(
                "batch has {} pixels per image, expected {}",
                images.ncols(),
                self.config.image.len()
            )));
        }
        Ok(())
    }

    /// Eval-path logits over all seen classes: `[batch, head_width]`.
    /// Deterministic for fixed weights; no dropout or masking anywhere.
    pub fn forward_classify(&self, images: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.classify_with_cache(images)?.0)
    }

    /// Training-path classification forward; keep the cache for backward.
    pub fn classify_with_cache(&self, images: &ArrayView2<f64>) -> Result<(Array2<f64>, ClassifyCache)> {
        self.check_images(images)?;
        let b = images.nrows();
        let p = self.config.num_patches();
        let mut patches = Array2::zeros((b * p, self.config.patch_elems()));
        for i in 0..b {
            let img: Vec<f64> = images.row(i).to_vec();
            let pp = patchify(&img, self.config.image, self.config.patch_size);
            patches.slice_mut(s![i * p..(i + 1) * p, ..]).assign(&pp);
        }
        let mut embedded = self.patch_embed.forward(&patches.view());
        for i in 0..b {
            let mut block = embedded.slice_mut(s![i * p..(i + 1) * p, ..]);
            block += &self.enc_pos.value;
        }
        let (tokens, enc_cache) = self.encoder.forward(&embedded.view(), b, p);
        let pooled = mean_pool(&tokens.view(), b, p);
        let logits = self.classifier.forward(&pooled.view());
        for v in logits.iter() {
            if !v.is_finite() {
                return Err(Error::Numerical { component: "logits", value: *v });
            }
        }
        Ok((
            logits,
            ClassifyCache { patches, enc_cache, pooled, batch: b },
        ))
    }

    /// Backward from `dlogits`; accumulates gradients in every touched
    /// parameter.
    pub fn classify_backward(&mut self, dlogits: &ArrayView2<f64>, cache: &ClassifyCache) {
        let p = self.config.num_patches();
        let dpool = self.classifier.backward(&cache.pooled.view(), dlogits);
        let dtokens = mean_pool_backward(&dpool.view(), p);
        let dembedded = self.encoder.backward(&dtokens.view(), &cache.enc_cache);
        for i in 0..cache.batch {
            let block = dembedded.slice(s![i * p..(i + 1) * p, ..]);
            self.enc_pos.grad += &block;
        }
        self.patch_embed.backward(&cache.patches.view(), &dembedded.view());
    }

    /// Masked reconstruction forward: encode visible patches, decode the
    /// full grid with mask tokens at masked slots, predict masked-patch
    /// pixels. Returns per-masked-patch predictions, their exact crops, and
    /// the cache. With mask ratio 0 there is nothing to predict and both
    /// matrices have zero rows.
    pub fn reconstruct_with_cache(
        &self,
        images: &ArrayView2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, Array2<f64>, ReconCache)> {
        self.check_images(images)?;
        let b = images.nrows();
        let cfg = &self.config;
        let p = cfg.num_patches();
        let elems = cfg.patch_elems();

        // Per-image masks are drawn sequentially from the caller's stream so
        // batch composition stays reproducible.
        let mut masks = Vec::with_capacity(b);
        let mut targets_rows = Vec::with_capacity(b);
        for i in 0..b {
            let img: Vec<f64> = images.row(i).to_vec();
            let (mask, targets) = mask_patches(&img, cfg.image, cfg.patch_size, cfg.mask_ratio, rng)?;
            masks.push(mask);
            targets_rows.push(targets);
        }
        let v = masks[0].visible.len();
        let m = masks[0].masked.len();
        if m == 0 {
            return Ok((
                Array2::zeros((0, elems)),
                Array2::zeros((0, elems)),
                ReconCache::empty(b),
            ));
        }

        // Gather visible patches.
        let mut vis_patches = Array2::zeros((b * v, elems));
        let mut all_patches = Array2::zeros((b * p, elems));
        for i in 0..b {
            let img: Vec<f64> = images.row(i).to_vec();
            let pp = patchify(&img, cfg.image, cfg.patch_size);
            all_patches.slice_mut(s![i * p..(i + 1) * p, ..]).assign(&pp);
            for (r, &pos) in masks[i].visible.iter().enumerate() {
                vis_patches.row_mut(i * v + r).assign(&pp.row(pos));
            }
        }

        let mut embedded = self.patch_embed.forward(&vis_patches.view());
        for i in 0..b {
            for (r, &pos) in masks[i].visible.iter().enumerate() {
                let mut row = embedded.row_mut(i * v + r);
                row += &self.enc_pos.value.row(pos);
            }
        }
        let (enc_tokens, enc_cache) = self.encoder.forward(&embedded.view(), b, v);

        // Decoder input: embed visible tokens, mask token elsewhere, plus
        // decoder positional embeddings over the full grid.
        let dec_vis = self.dec_embed.forward(&enc_tokens.view());
        let dd = cfg.decoder_dim;
        let mut dec_in = Array2::zeros((b * p, dd));
        for i in 0..b {
            for pos in 0..p {
                let mut row = dec_in.row_mut(i * p + pos);
                row += &self.dec_pos.value.row(pos);
            }
            for (r, &pos) in masks[i].visible.iter().enumerate() {
                let mut row = dec_in.row_mut(i * p + pos);
                row += &dec_vis.row(i * v + r);
            }
            for &pos in &masks[i].masked {
                let mut row = dec_in.row_mut(i * p + pos);
                row += &self.mask_token.value.row(0);
            }
        }
        let (dec_tokens, dec_cache) = self.decoder.forward(&dec_in.view(), b, p);

        // Predict pixels at masked slots only.
        let mut masked_tokens = Array2::zeros((b * m, dd));
        let mut targets = Array2::zeros((b * m, elems));
        for i in 0..b {
            for (r, &pos) in masks[i].masked.iter().enumerate() {
                masked_tokens.row_mut(i * m + r).assign(&dec_tokens.row(i * p + pos));
                targets.row_mut(i * m + r).assign(&targets_rows[i].row(r));
            }
        }
        let pred = self.dec_out.forward(&masked_tokens.view());
        Ok((
            pred,
            targets,
            ReconCache {
                masks,
                vis_patches,
                enc_cache: Some(enc_cache),
                enc_tokens,
                dec_cache: Some(dec_cache),
                masked_tokens,
                batch: b,
            },
        ))
    }

    /// Backward from `dpred` (`[b*m, elems]`).
    pub fn reconstruct_backward(&mut self, dpred: &ArrayView2<f64>, cache: &ReconCache) {
        if dpred.nrows() == 0 {
            return;
        }
        let cfg = &self.config;
        let p = cfg.num_patches();
        let b = cache.batch;
        let v = cache.masks[0].visible.len();
        let m = cache.masks[0].masked.len();
        let dd = cfg.decoder_dim;

        let dmasked = self.dec_out.backward(&cache.masked_tokens.view(), dpred);
        let mut ddec_tokens = Array2::zeros((b * p, dd));
        for i in 0..b {
            for (r, &pos) in cache.masks[i].masked.iter().enumerate() {
                ddec_tokens.row_mut(i * p + pos).assign(&dmasked.row(i * m + r));
            }
        }
        let ddec_in = self
            .decoder
            .backward(&ddec_tokens.view(), cache.dec_cache.as_ref().expect("nonempty cache"));

        // Split decoder-input gradient into positional, mask-token, and
        // visible-token shares.
        let mut ddec_vis = Array2::zeros((b * v, dd));
        for i in 0..b {
            for pos in 0..p {
                let mut dst = self.dec_pos.grad.row_mut(pos);
                dst += &ddec_in.row(i * p + pos);
            }
            for (r, &pos) in cache.masks[i].visible.iter().enumerate() {
                ddec_vis.row_mut(i * v + r).assign(&ddec_in.row(i * p + pos));
            }
            for &pos in &cache.masks[i].masked {
                let mut dst = self.mask_token.grad.row_mut(0);
                dst += &ddec_in.row(i * p + pos);
            }
        }
        let denc_tokens = self.dec_embed.backward(&cache.enc_tokens.view(), &ddec_vis.view());
        let dembedded = self
            .encoder
            .backward(&denc_tokens.view(), cache.enc_cache.as_ref().expect("nonempty cache"));
        for i in 0..b {
            let positions = &cache.masks[i].visible;
            let block = dembedded.slice(s![i * v..(i + 1) * v, ..]);
            sum_rows_at(&block, positions, &mut self.enc_pos.grad);
        }
        self.patch_embed.backward(&cache.vis_patches.view(), &dembedded.view());
    }

    // -- Parameter plumbing --------------------------------------------------

    /// All trainable tensors in a fixed order (classifier last, so head
    /// growth only ever changes the final slots).
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.patch_embed.params_mut();
        p.push(&mut self.enc_pos);
        p.extend(self.encoder.params_mut());
        p.extend(self.dec_embed.params_mut());
        p.push(&mut self.mask_token);
        p.push(&mut self.dec_pos);
        p.extend(self.decoder.params_mut());
        p.extend(self.dec_out.params_mut());
        p.extend(self.classifier.params_mut());
        p
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Flat copy of every parameter value, in `params_mut` order.
    pub fn flat_params(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params_mut() {
            out.extend(p.value.iter());
        }
        out
    }

    /// Bit-exact hash of the encoder and reconstruction parameters
    /// (everything except the classifier). Used to verify reinitialization.
    pub fn backbone_hash(&mut self) -> String {
        let head_w = self.classifier.w.value.len();
        let head_b = self.classifier.b.value.len();
        let flat = self.flat_params();
        hash_f64s(&flat[..flat.len() - head_w - head_b])
    }

    // -- Checkpointing --------------------------------------------------------

    /// Write `<prefix>.json` (metadata) and `<prefix>.bin` (little-endian
    /// f64 parameters in `params_mut` order).
    pub fn save_checkpoint(&mut self, prefix: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config_hash: self.config.config_hash(),
            config: self.config.clone(),
            seen_classes: self.seen.clone(),
            shapes: self
                .params_mut()
                .iter()
                .map(|p| (p.value.nrows(), p.value.ncols()))
                .collect(),
        };
        std::fs::write(prefix.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
        let flat = self.flat_params();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(prefix.with_extension("bin"), bytes)?;
        Ok(())
    }

    /// Reload a checkpoint into a fresh bundle; bit-exact.
    pub fn load_checkpoint(prefix: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
        if meta.config.config_hash() != meta.config_hash {
            return Err(Error::Serde("checkpoint config hash mismatch".into()));
        }
        let mut model = ModelBundle::new(meta.config, 0)?;
        // Rebuild head geometry, then overwrite every tensor from the blob.
        model.expand_classification_head(&meta.seen_classes, 0)?;
        let bytes = std::fs::read(prefix.with_extension("bin"))?;
        let mut values = Vec::with_capacity(bytes.len() / 8);
        for chunk in bytes.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        let mut cursor = 0;
        let params = model.params_mut();
        if meta.shapes.len() != params.len() {
            return Err(Error::Serde(format!(
                "checkpoint has {} tensors, model needs {}",
                meta.shapes.len(),
                params.len()
            )));
        }
        for (p, (r, c)) in params.into_iter().zip(meta.shapes) {
            if p.value.dim() != (r, c) {
                return Err(Error::Serde(format!(
                    "checkpoint tensor {r}x{c} does not match {:?}",
                    p.value.dim()
                )));
            }
            let n = r * c;
            p.value = Array2::from_shape_vec((r, c), values[cursor..cursor + n].to_vec())
                .expect("shape checked");
            cursor += n;
        }
        if cursor != values.len() {
            return Err(Error::Serde("checkpoint blob length mismatch".into()));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    config: ModelConfig,
    seen_classes: Vec<ClassId>,
    shapes: Vec<(usize, usize)>,
}

pub struct ClassifyCache {
    patches: Array2<f64>,
    enc_cache: TowerCache,
    pooled: Array2<f64>,
    batch: usize,
}

pub struct ReconCache {
    masks: Vec<PatchMask>,
    vis_patches: Array2<f64>,
    enc_cache: Option<TowerCache>,
    enc_tokens: Array2<f64>,
    dec_cache: Option<TowerCache>,
    masked_tokens: Array2<f64>,
    batch: usize,
}

impl ReconCache {
    fn empty(batch: usize) -> Self {
        Self {
            masks: Vec::new(),
            vis_patches: Array2::zeros((0, 0)),
            enc_cache: None,
            enc_tokens: Array2::zeros((0, 0)),
            dec_cache: None,
            masked_tokens: Array2::zeros((0, 0)),
            batch,
        }
    }
}

/// Add the masking surrogate to inactive columns: active logits unchanged,
/// inactive logits absorbed to [`NEG_MASK`] so their softmax weight and
/// gradient are exactly zero.
pub fn apply_class_mask(logits: &ArrayView2<f64>, active_cols: &[usize]) -> Result<Array2<f64>> {
    if active_cols.is_empty() {
        return Err(Error::Contract("class mask has no active columns".into()));
    }
    let mut active = vec![false; logits.ncols()];
    for &c in active_cols {
        if c >= logits.ncols() {
            return Err(Error::Contract(format!(
                "mask column {c} outside head width {}",
                logits.ncols()
            )));
        }
        active[c] = true;
    }
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            if !active[j] {
                *v += NEG_MASK;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_rows;
    use crate::util::rng_for;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image: ImageShape::new(8, 8, 1),
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            decoder_dim: 8,
            decoder_heads: 2,
            mask_ratio: 0.5,
            ..Default::default()
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Array2<f64> {
        use rand::Rng;
        Array2::from_shape_fn((n, len), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn patchify_partition_roundtrip() {
        let shape = ImageShape::new(8, 8, 2);
        let image: Vec<f64> = (0..shape.len()).map(|i| i as f64).collect();
        let patches = patchify(&image, shape, 4);
        assert_eq!(patches.dim(), (4, 32));
        let back = unpatchify(&patches.view(), shape, 4);
        assert_eq!(back, image);
    }

    #[test]
    fn mask_patches_counts_and_partition() {
        let shape = ImageShape::new(32, 32, 1);
        let image = vec![0.5; shape.len()];
        let mut rng = rng_for(1, "mask");
        let (mask, targets) = mask_patches(&image, shape, 8, 0.75, &mut rng).unwrap();
        assert_eq!(mask.masked.len(), 12);
        assert_eq!(mask.visible.len(), 4);
        assert_eq!(targets.dim(), (12, 64));
        let mut all: Vec<usize> = mask.visible.iter().chain(&mask.masked).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn mask_ratio_zero_masks_nothing() {
        let shape = ImageShape::new(8, 8, 1);
        let image = vec![0.1; shape.len()];
        let mut rng = rng_for(2, "mask");
        let (mask, targets) = mask_patches(&image, shape, 4, 0.0, &mut rng).unwrap();
        assert!(mask.masked.is_empty());
        assert_eq!(targets.nrows(), 0);
    }

    #[test]
    fn indivisible_image_is_config_error() {
        let shape = ImageShape::new(10, 8, 1);
        let image = vec![0.1; shape.len()];
        let mut rng = rng_for(3, "mask");
        assert!(matches!(
            mask_patches(&image, shape, 4, 0.5, &mut rng).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn masked_crops_reassemble_bit_exact() {
        let shape = ImageShape::new(8, 8, 1);
        let mut rng = rng_for(4, "mask");
        let image: Vec<f64> = {
            use rand::Rng;
            (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let (mask, targets) = mask_patches(&image, shape, 4, 0.5, &mut rng).unwrap();
        let patches = patchify(&image, shape, 4);
        let mut rebuilt = Array2::zeros(patches.raw_dim());
        for &vpos in &mask.visible {
            rebuilt.row_mut(vpos).assign(&patches.row(vpos));
        }
        for (r, &mpos) in mask.masked.iter().enumerate() {
            rebuilt.row_mut(mpos).assign(&targets.row(r));
        }
        assert_eq!(unpatchify(&rebuilt.view(), shape, 4), image);
    }

    #[test]
    fn classify_shape_and_determinism() {
        let mut model = ModelBundle::new(tiny_config(), 7).unwrap();
        model.expand_classification_head(&[0, 1, 2, 3, 4, 5, 6, 7], 1).unwrap();
        let mut rng = rng_for(5, "model");
        let batch = random_batch(&mut rng, 2, 64);
        let a = model.forward_classify(&batch.view()).unwrap();
        let b = model.forward_classify(&batch.view()).unwrap();
        assert_eq!(a.dim(), (2, 8));
        assert_eq!(a, b, "eval forward must be bit-stable");
    }

    #[test]
    fn zero_weight_classifier_gives_uniform_softmax() {
        let mut model = ModelBundle::new(tiny_config(), 7).unwrap();
        model.expand_classification_head(&[0, 1, 2], 1).unwrap();
        // Zero out the head.
        model.classifier.w.value.fill(0.0);
        let mut rng = rng_for(6, "model");
        let batch = random_batch(&mut rng, 2, 64);
        let mut logits = model.forward_classify(&batch.view()).unwrap();
        assert!(logits.iter().all(|v| v.abs() < 1e-12));
        softmax_rows(&mut logits);
        assert!(logits.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn head_expansion_preserves_old_logits_bit_exact() {
        let mut model = ModelBundle::new(tiny_config(), 7).unwrap();
        model.expand_classification_head(&[10, 11, 12, 13, 14], 1).unwrap();
        let mut rng = rng_for(7, "model");
        let batch = random_batch(&mut rng, 3, 64);
        let before = model.forward_classify(&batch.view()).unwrap();
        model.expand_classification_head(&[20, 21, 22], 2).unwrap();
        let after = model.forward_classify(&batch.view()).unwrap();
        assert_eq!(after.dim(), (3, 8));
        assert_eq!(before, after.slice(s![.., ..5]).to_owned());
    }

    #[test]
    fn empty_expansion_is_identity() {
        let mut model = ModelBundle::new(tiny_config(), 7).unwrap();
        model.expand_classification_head(&[1, 2], 1).unwrap();
        let added = model.expand_classification_head(&[], 2).unwrap();
        assert_eq!(added, 0);
        assert_eq!(model.seen_classes(), &[1, 2]);
    }

    #[test]
    fn overlap_expansion_is_contract_violation_but_skip_seen_is_noop() {
        let mut model = ModelBundle::new(tiny_config(), 7).unwrap();
        model.expand_classification_head(&[1, 2], 1).unwrap();
        assert!(matches!(
            model.expand_classification_head(&[2, 3], 2).unwrap_err(),
            Error::Contract(_)
        ));
        let added = model.expand_head_skip_seen(&[2, 3], 2).unwrap();
        assert_eq!(added, 1);
        assert_eq!(model.seen_classes(), &[1, 2, 3]);
    }

    #[test]
    fn twenty_expansions_reach_full_class_roster() {
        // Mirror of the 20-step schedule over 9459 classes: nineteen groups
        // of 473 plus one of 472.
        let mut cfg = tiny_config();
        cfg.embed_dim = 8;
        cfg.heads = 2;
        let mut model = ModelBundle::new(cfg, 1).unwrap();
        let mut next = 0u32;
        for t in 0..20 {
            let n = if t < 19 { 473 } else { 472 };
            let classes: Vec<ClassId> = (next..next + n).collect();
            next += n;
            model.expand_classification_head(&classes, t as u64).unwrap();
        }
        assert_eq!(model.head_width(), 9459);
    }

    #[test]
    fn class_mask_restricts_softmax_support() {
        let logits = Array2::from_shape_vec((1, 3), vec![2.0, 1.0, 0.0]).unwrap();
        let masked = apply_class_mask(&logits.view(), &[1, 2]).unwrap();
        let mut probs = masked.clone();
        softmax_rows(&mut probs);
        assert_eq!(probs[[0, 0]], 0.0);
        let expected = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((probs[[0, 1]] - expected).abs() < 1e-12);
        assert!((probs[[0, 0]] + probs[[0, 1]] + probs[[0, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_mask_is_softmax_identity() {
        let logits = Array2::from_shape_vec((2, 3), vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let masked = apply_class_mask(&logits.view(), &[0, 1, 2]).unwrap();
        assert_eq!(masked, logits);
    }

    #[test]
    fn masked_argmax_stays_in_active_set() {
        let mut rng = rng_for(8, "mask-argmax");
        for _ in 0..50 {
            let logits = crate::nn::normal_matrix(&mut rng, 1, 6, 3.0);
            let masked = apply_class_mask(&logits.view(), &[2, 4]).unwrap();
            let argmax = masked
                .row(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(argmax == 2 || argmax == 4);
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let logits = Array2::zeros((1, 3));
        assert!(matches!(
            apply_class_mask(&logits.view(), &[]).unwrap_err(),
            Error::Contract(_)
        ));
        assert!(ClassMask::new(BTreeSet::new()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ModelBundle::new(tiny_config(), 9).unwrap();
        model.expand_classification_head(&[0, 1, 2], 3).unwrap();
        let prefix = dir.path().join("ckpt");
        model.save_checkpoint(&prefix).unwrap();
        let mut loaded = ModelBundle::load_checkpoint(&prefix).unwrap();
        assert_eq!(model.seen_classes(), loaded.seen_classes());
        assert_eq!(model.flat_params(), loaded.flat_params());
        let mut rng = rng_for(10, "model");
        let batch = random_batch(&mut rng, 2, 64);
        assert_eq!(
            model.forward_classify(&batch.view()).unwrap(),
            loaded.forward_classify(&batch.view()).unwrap()
        );
    }

    #[test]
    fn reconstruction_grad_matches_finite_differences_on_scale() {
        // Full-path FD over a handful of parameters: perturb, recompute the
        // mean-squared loss, compare to backprop.
        let mut model = ModelBundle::new(tiny_config(), 11).unwrap();
        let mut rng = rng_for(11, "model-fd");
        let batch = random_batch(&mut rng, 1, 64);

        let loss_of = |m: &ModelBundle, seed: u64| -> f64 {
            let mut r = rng_for(seed, "fd-mask");
            let (pred, targets, _) = m.reconstruct_with_cache(&batch.view(), &mut r).unwrap();
            let diff = &pred - &targets;
            diff.iter().map(|v| v * v).sum::<f64>() / pred.len() as f64
        };

        let mut r = rng_for(99, "fd-mask");
        let (pred, targets, cache) = model.reconstruct_with_cache(&batch.view(), &mut r).unwrap();
        let n = pred.len() as f64;
        let dpred = (&pred - &targets).mapv(|v| 2.0 * v / n);
        model.zero_grads();
        model.reconstruct_backward(&dpred.view(), &cache);

        // Spot-check three parameters: a patch-embed weight, an encoder-pos
        // entry, and the mask token.
        let h = 1e-5;
        let checks: Vec<(usize, usize, usize)> = vec![(0, 0, 0), (2, 0, 1), (19, 0, 0)];
        for (pidx, r0, c0) in checks {
            let analytic = {
                let params = model.params_mut();
                params[pidx].grad[[r0, c0]]
            };
            let orig = {
                let params = model.params_mut();
                params[pidx].value[[r0, c0]]
            };
            {
                let mut params = model.params_mut();
                params[pidx].value[[r0, c0]] = orig + h;
            }
            let lp = loss_of(&model, 99);
            {
                let mut params = model.params_mut();
                params[pidx].value[[r0, c0]] = orig - h;
            }
            let lm = loss_of(&model, 99);
            {
                let mut params = model.params_mut();
                params[pidx].value[[r0, c0]] = orig;
            }
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "param {pidx}[{r0},{c0}]: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
