//! Desk-scale promptable mask predictor: a patch/convolution image encoder,
//! a Fourier box-prompt encoder, and a two-way transformer mask decoder with
//! a mask head and an IoU head.

use std::collections::BTreeSet;
use std::f32::consts::PI;
use std::sync::Arc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::losses::sigmoid;
use crate::mask::{BinaryMask, BoundingBox};
use crate::nn::{Graph, ParamStore, Tensor, Var, GATHER_ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Encoder,
    PromptEncoder,
    Decoder,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Encoder, Part::PromptEncoder, Part::Decoder];

    pub fn prefix(self) -> &'static str {
        match self {
            Part::Encoder => "encoder.",
            Part::PromptEncoder => "prompt.",
            Part::Decoder => "decoder.",
        }
    }

    pub fn parse(s: &str) -> Option<Part> {
        match s.trim() {
            "encoder" => Some(Part::Encoder),
            "prompt_encoder" | "prompt" => Some(Part::PromptEncoder),
            "decoder" => Some(Part::Decoder),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::PromptEncoder => "prompt_encoder",
            Part::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    /// Per-pixel channel count of the upscaled mask features.
    pub upscale_dim: usize,
    /// Spread of the random Fourier frequencies used for positional encoding.
    pub pe_scale: f32,
    pub trainable_parts: BTreeSet<Part>,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            embed_dim: 32,
            encoder_depth: 2,
            decoder_depth: 2,
            num_heads: 2,
            upscale_dim: 8,
            pe_scale: 4.0,
            trainable_parts: [Part::Decoder].into_iter().collect(),
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.decoder_depth < 1 {
            return bad("decoder_depth must be >= 1".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.embed_dim % 2 != 0 {
            return bad("embed_dim must be even".into());
        }
        if self.upscale_dim == 0 {
            return bad("upscale_dim must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn is_trainable(&self, part: Part) -> bool {
        self.trainable_parts.contains(&part)
    }
}

/// Decoder output for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptedPrediction {
    pub height: usize,
    pub width: usize,
    /// Row-major mask logits at input resolution.
    pub mask_logits: Vec<f32>,
    /// Estimated IoU of the thresholded mask, squashed into `[0, 1]`.
    pub iou_estimate: f64,
}

impl PromptedPrediction {
    /// Pixels whose probability exceeds 0.5.
    pub fn mask(&self) -> BinaryMask {
        let bits = self.mask_logits.iter().map(|&z| z > 0.0).collect();
        BinaryMask::from_bits(self.height, self.width, bits).expect("sizes agree")
    }
}

/// Graph handles of one forward pass.
pub(crate) struct ForwardVars {
    pub mask_logits: Var,
    pub iou_logit: Var,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    cfg: PredictorConfig,
    pub(crate) params: ParamStore,
    pe_gaussian: Tensor,
    image_pe: Tensor,
    im2col: Arc<Vec<u32>>,
    upscale_index: Arc<Vec<u32>>,
}

impl Predictor {
    pub fn new(cfg: PredictorConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let g = cfg.grid();
        let p = cfg.patch_size;
        let mut s = ParamStore::default();
        let linear = |s: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            s.insert(&format!("{name}.w"), Tensor::randn(i, o, (1.0 / i as f32).sqrt(), rng));
            s.insert(&format!("{name}.b"), Tensor::zeros(1, o));
        };
        let norm = |s: &mut ParamStore, name: &str| {
            s.insert(&format!("{name}.g"), Tensor::filled(1, d, 1.0));
            s.insert(&format!("{name}.b"), Tensor::zeros(1, d));
        };

        // encoder
        linear(&mut s, "encoder.patch", p * p * 3, d, &mut rng);
        s.insert("encoder.pos_embed", Tensor::randn(g * g, d, 0.02, &mut rng));
        for i in 0..cfg.encoder_depth {
            norm(&mut s, &format!("encoder.blocks.{i}.norm"));
            linear(&mut s, &format!("encoder.blocks.{i}.conv"), 9 * d, d, &mut rng);
            linear(&mut s, &format!("encoder.blocks.{i}.fc"), d, d, &mut rng);
        }
        norm(&mut s, "encoder.neck_norm");

        // prompt encoder
        // fixed frequencies; read as a constant input, never differentiated
        s.insert("prompt.pe_gaussian", Tensor::randn(2, d / 2, cfg.pe_scale, &mut rng));
        s.insert("prompt.corner_embed", Tensor::randn(2, d, 1.0, &mut rng));
        s.insert("prompt.no_mask_embed", Tensor::randn(1, d, 1.0, &mut rng));

        // decoder
        s.insert("decoder.iou_token", Tensor::randn(1, d, 1.0, &mut rng));
        s.insert("decoder.mask_token", Tensor::randn(1, d, 1.0, &mut rng));
        let attn = |s: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            for k in ["q", "k", "v", "o"] {
                s.insert(&format!("{name}.{k}.w"), Tensor::randn(d, d, (1.0 / d as f32).sqrt(), rng));
                s.insert(&format!("{name}.{k}.b"), Tensor::zeros(1, d));
            }
        };
        for i in 0..cfg.decoder_depth {
            let l = format!("decoder.layers.{i}");
            attn(&mut s, &format!("{l}.self_attn"), &mut rng);
            norm(&mut s, &format!("{l}.norm1"));
            attn(&mut s, &format!("{l}.cross_t2i"), &mut rng);
            norm(&mut s, &format!("{l}.norm2"));
            linear(&mut s, &format!("{l}.mlp.fc1"), d, 2 * d, &mut rng);
            linear(&mut s, &format!("{l}.mlp.fc2"), 2 * d, d, &mut rng);
            norm(&mut s, &format!("{l}.norm3"));
            attn(&mut s, &format!("{l}.cross_i2t"), &mut rng);
            norm(&mut s, &format!("{l}.norm4"));
        }
        attn(&mut s, "decoder.final_attn", &mut rng);
        norm(&mut s, "decoder.final_norm");
        let c = cfg.upscale_dim;
        linear(&mut s, "decoder.upscale", d, p * p * c, &mut rng);
        linear(&mut s, "decoder.hyper.fc1", d, d, &mut rng);
        linear(&mut s, "decoder.hyper.fc2", d, c + BOX_FEATURES, &mut rng);
        linear(&mut s, "decoder.iou_head.fc1", d, d, &mut rng);
        linear(&mut s, "decoder.iou_head.fc2", d, d, &mut rng);
        linear(&mut s, "decoder.iou_head.fc3", d, 1, &mut rng);

        Ok(Self::assemble(cfg, s))
    }

    pub(crate) fn assemble(cfg: PredictorConfig, params: ParamStore) -> Self {
        let pe_gaussian = params.get(params.expect("prompt.pe_gaussian")).clone();
        let g = cfg.grid();
        let coords: Vec<(f32, f32)> = (0..g * g)
            .map(|i| (((i % g) as f32 + 0.5) / g as f32, ((i / g) as f32 + 0.5) / g as f32))
            .collect();
        let image_pe = fourier(&pe_gaussian, &coords);
        let im2col = Arc::new(im2col_index(g, cfg.embed_dim));
        let upscale_index = Arc::new(upscale_index(g, cfg.patch_size, cfg.upscale_dim));
        Self { cfg, params, pe_gaussian, image_pe, im2col, upscale_index }
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_trainable_parts(&mut self, parts: BTreeSet<Part>) {
        self.cfg.trainable_parts = parts;
    }

    /// SHA-256 over one sub-network's parameters.
    pub fn checksum(&self, part: Part) -> String {
        self.params.checksum(part.prefix())
    }

    /// Normalised patches of an image already at `image_size`.
    fn patches(&self, image: &RgbImage) -> Tensor {
        let g = self.cfg.grid();
        let p = self.cfg.patch_size;
        let cols = p * p * 3;
        let mut t = Tensor::zeros(g * g, cols);
        for gy in 0..g {
            for gx in 0..g {
                let row = gy * g + gx;
                for dy in 0..p {
                    for dx in 0..p {
                        let px = image.get_pixel((gx * p + dx) as u32, (gy * p + dy) as u32);
                        for ch in 0..3 {
                            let v = px.0[ch] as f32 / 255.0;
                            t.data[row * cols + (dy * p + dx) * 3 + ch] = (v - 0.5) / 0.25;
                        }
                    }
                }
            }
        }
        t
    }

    fn linear(&self, g: &mut Graph, name: &str, x: Var, train: bool) -> Var {
        let w = g.param(&self.params, self.params.expect(&format!("{name}.w")), train);
        let b = g.param(&self.params, self.params.expect(&format!("{name}.b")), train);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, name: &str, x: Var, train: bool) -> Var {
        let gm = g.param(&self.params, self.params.expect(&format!("{name}.g")), train);
        let bt = g.param(&self.params, self.params.expect(&format!("{name}.b")), train);
        g.layer_norm(x, gm, bt)
    }

    fn attention(&self, g: &mut Graph, name: &str, q: Var, k: Var, v: Var, train: bool) -> Var {
        let q = self.linear(g, &format!("{name}.q"), q, train);
        let k = self.linear(g, &format!("{name}.k"), k, train);
        let v = self.linear(g, &format!("{name}.v"), v, train);
        let heads = self.cfg.num_heads;
        let dh = self.cfg.embed_dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let s = g.matmul_bt(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.linear(g, &format!("{name}.o"), o, train)
    }

    /// Image encoder on an `image_size` image.
    pub(crate) fn encode_graph(&self, g: &mut Graph, image: &RgbImage) -> Var {
        let train = self.cfg.is_trainable(Part::Encoder);
        let x = g.input(self.patches(image));
        let x = self.linear(g, "encoder.patch", x, train);
        let pos = g.param(&self.params, self.params.expect("encoder.pos_embed"), train);
        let mut x = g.add(x, pos);
        let grid = self.cfg.grid();
        let d = self.cfg.embed_dim;
        for i in 0..self.cfg.encoder_depth {
            let b = format!("encoder.blocks.{i}");
            let y = self.norm(g, &format!("{b}.norm"), x, train);
            let y = g.gather(y, self.im2col.clone(), grid * grid, 9 * d);
            let y = self.linear(g, &format!("{b}.conv"), y, train);
            let y = g.gelu(y);
            let y = self.linear(g, &format!("{b}.fc"), y, train);
            x = g.add(x, y);
        }
        self.norm(g, "encoder.neck_norm", x, train)
    }

    /// Frozen-path image embedding (`grid² x embed_dim`).
    pub fn embed(&self, image: &RgbImage) -> Result<Tensor, ModelError> {
        let image = self.ingest_image(image);
        let mut g = Graph::new();
        let v = self.encode_graph(&mut g, &image);
        Ok(g.into_value(v))
    }

    fn box_tokens(&self, b: &BoundingBox) -> Tensor {
        let s = self.cfg.image_size as f32;
        let corners = [
            (b.x as f32 / s, b.y as f32 / s),
            ((b.x + b.w) as f32 / s, (b.y + b.h) as f32 / s),
        ];
        fourier(&self.pe_gaussian, &corners)
    }

    /// Sparse prompt tokens (`2 x embed_dim`) for a box in model coordinates.
    fn prompt_graph(&self, g: &mut Graph, b: &BoundingBox) -> Var {
        let train = self.cfg.is_trainable(Part::PromptEncoder);
        let pe = g.input(self.box_tokens(b));
        let corner = g.param(&self.params, self.params.expect("prompt.corner_embed"), train);
        g.add(pe, corner)
    }

    fn two_way_block(&self, g: &mut Graph, i: usize, queries: Var, keys: Var, qpe: Var, kpe: Var, train: bool) -> (Var, Var) {
        let l = format!("decoder.layers.{i}");
        let queries = if i == 0 {
            self.attention(g, &format!("{l}.self_attn"), queries, queries, queries, train)
        } else {
            let q = g.add(queries, qpe);
            let a = self.attention(g, &format!("{l}.self_attn"), q, q, queries, train);
            g.add(queries, a)
        };
        let queries = self.norm(g, &format!("{l}.norm1"), queries, train);

        let q = g.add(queries, qpe);
        let k = g.add(keys, kpe);
        let a = self.attention(g, &format!("{l}.cross_t2i"), q, k, keys, train);
        let queries = g.add(queries, a);
        let queries = self.norm(g, &format!("{l}.norm2"), queries, train);

        let h = self.linear(g, &format!("{l}.mlp.fc1"), queries, train);
        let h = g.relu(h);
        let h = self.linear(g, &format!("{l}.mlp.fc2"), h, train);
        let queries = g.add(queries, h);
        let queries = self.norm(g, &format!("{l}.norm3"), queries, train);

        let q = g.add(queries, qpe);
        let k = g.add(keys, kpe);
        let a = self.attention(g, &format!("{l}.cross_i2t"), k, q, queries, train);
        let keys = g.add(keys, a);
        let keys = self.norm(g, &format!("{l}.norm4"), keys, train);
        (queries, keys)
    }

    fn mlp3(&self, g: &mut Graph, name: &str, x: Var, layers: usize, train: bool) -> Var {
        let mut x = x;
        for l in 1..=layers {
            x = self.linear(g, &format!("{name}.fc{l}"), x, train);
            if l < layers {
                x = g.relu(x);
            }
        }
        x
    }

    /// Mask decoder from an image embedding node and a model-space box.
    pub(crate) fn decode_graph(&self, g: &mut Graph, embedding: Var, b: &BoundingBox) -> ForwardVars {
        let train = self.cfg.is_trainable(Part::Decoder);
        let sparse = self.prompt_graph(g, b);
        let iou_tok = g.param(&self.params, self.params.expect("decoder.iou_token"), train);
        let mask_tok = g.param(&self.params, self.params.expect("decoder.mask_token"), train);
        let tokens = g.concat_rows(&[iou_tok, mask_tok, sparse]);
        let dense = g.param(
            &self.params,
            self.params.expect("prompt.no_mask_embed"),
            self.cfg.is_trainable(Part::PromptEncoder),
        );
        let mut keys = g.add_row(embedding, dense);
        let kpe = g.input(self.image_pe.clone());
        let qpe = tokens;
        let mut queries = tokens;
        for i in 0..self.cfg.decoder_depth {
            (queries, keys) = self.two_way_block(g, i, queries, keys, qpe, kpe, train);
        }
        let q = g.add(queries, qpe);
        let k = g.add(keys, kpe);
        let a = self.attention(g, "decoder.final_attn", q, k, keys, train);
        let queries = g.add(queries, a);
        let queries = self.norm(g, "decoder.final_norm", queries, train);

        let grid = self.cfg.grid();
        let size = self.cfg.image_size;
        let up = self.linear(g, "decoder.upscale", keys, train);
        let up = g.gelu(up);
        let pixels = g.gather(up, self.upscale_index.clone(), size * size, self.cfg.upscale_dim);
        debug_assert_eq!(g.value(up).rows, grid * grid);
        let rel = g.input(box_relative_features(b, size));
        let pixels = g.concat_cols(&[pixels, rel]);

        let mask_out = g.slice_rows(queries, 1, 1);
        let hyper = self.mlp3(g, "decoder.hyper", mask_out, 2, train);
        let mask_logits = g.matmul_bt(pixels, hyper);

        let iou_out = g.slice_rows(queries, 0, 1);
        let iou_logit = self.mlp3(g, "decoder.iou_head", iou_out, 3, train);
        ForwardVars { mask_logits, iou_logit }
    }

    fn ingest_image(&self, image: &RgbImage) -> RgbImage {
        let s = self.cfg.image_size as u32;
        if image.width() == s && image.height() == s {
            image.clone()
        } else {
            image::imageops::resize(image, s, s, image::imageops::FilterType::Nearest)
        }
    }

    /// Maps an image-space box into model space, failing on empty boxes.
    fn model_box(&self, image: &RgbImage, b: &BoundingBox) -> Result<BoundingBox, ModelError> {
        let clamped = b
            .clamp(image.width() as usize, image.height() as usize)
            .ok_or(ModelError::DegenerateBox(*b))?;
        let s = self.cfg.image_size as f64;
        Ok(clamped.scaled(s / image.width() as f64, s / image.height() as f64))
    }

    /// Amodal mask logits and IoU estimate for one box prompt. Logits are
    /// returned at the input image's resolution.
    pub fn predict(&self, image: &RgbImage, b: &BoundingBox) -> Result<PromptedPrediction, ModelError> {
        let mb = self.model_box(image, b)?;
        let resized = self.ingest_image(image);
        let mut g = Graph::new();
        let emb = self.encode_graph(&mut g, &resized);
        let out = self.decode_graph(&mut g, emb, &mb);
        Ok(self.finish(&g, &out, image.height() as usize, image.width() as usize))
    }

    /// Prediction from a precomputed [`Predictor::embed`] output.
    pub fn predict_with_embedding(
        &self,
        embedding: &Tensor,
        image_height: usize,
        image_width: usize,
        b: &BoundingBox,
    ) -> Result<PromptedPrediction, ModelError> {
        let clamped = b.clamp(image_width, image_height).ok_or(ModelError::DegenerateBox(*b))?;
        let s = self.cfg.image_size as f64;
        let mb = clamped.scaled(s / image_width as f64, s / image_height as f64);
        let mut g = Graph::new();
        let emb = g.input(embedding.clone());
        let out = self.decode_graph(&mut g, emb, &mb);
        Ok(self.finish(&g, &out, image_height, image_width))
    }

    fn finish(&self, g: &Graph, out: &ForwardVars, height: usize, width: usize) -> PromptedPrediction {
        let size = self.cfg.image_size;
        let logits = &g.value(out.mask_logits).data;
        let mask_logits = if height == size && width == size {
            logits.clone()
        } else {
            let mut v = Vec::with_capacity(height * width);
            for y in 0..height {
                for x in 0..width {
                    let sx = (((x as f64 + 0.5) * size as f64 / width as f64) as usize).min(size - 1);
                    let sy = (((y as f64 + 0.5) * size as f64 / height as f64) as usize).min(size - 1);
                    v.push(logits[sy * size + sx]);
                }
            }
            v
        };
        let iou_estimate = sigmoid(g.value(out.iou_logit).data[0] as f64);
        PromptedPrediction { height, width, mask_logits, iou_estimate }
    }
}

/// Random Fourier features `[sin(2π c·G), cos(2π c·G)]` of coordinates in `[0, 1]`.
/// Dense box encoding appended to every pixel's features.
pub(crate) const BOX_FEATURES: usize = 5;

/// Per-pixel coordinates relative to the prompt box: with `(u, v)` the
/// offset from the box centre in half-widths, the features are
/// `[1, max(|u|, |v|), sqrt(u² + v²), |u|, |v|]`, each capped at 3.
fn box_relative_features(b: &BoundingBox, size: usize) -> Tensor {
    let (cx, cy) = b.center();
    let hx = (b.w / 2.0).max(0.5);
    let hy = (b.h / 2.0).max(0.5);
    let mut t = Tensor::zeros(size * size, BOX_FEATURES);
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 + 0.5 - cx) / hx).abs().min(3.0);
            let v = ((y as f64 + 0.5 - cy) / hy).abs().min(3.0);
            let row = &mut t.data[(y * size + x) * BOX_FEATURES..][..BOX_FEATURES];
            row[0] = 1.0;
            row[1] = u.max(v) as f32;
            row[2] = u.hypot(v).min(3.0) as f32;
            row[3] = u as f32;
            row[4] = v as f32;
        }
    }
    t
}

fn fourier(gaussian: &Tensor, coords: &[(f32, f32)]) -> Tensor {
    let half = gaussian.cols;
    let mut t = Tensor::zeros(coords.len(), 2 * half);
    for (r, &(u, v)) in coords.iter().enumerate() {
        let (u, v) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        for j in 0..half {
            let a = 2.0 * PI * (u * gaussian.at(0, j) + v * gaussian.at(1, j));
            t.data[r * 2 * half + j] = a.sin();
            t.data[r * 2 * half + half + j] = a.cos();
        }
    }
    t
}

/// 3x3 zero-padded neighbourhood gather over a `grid x grid` token map.
fn im2col_index(grid: usize, d: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(grid * grid * 9 * d);
    for gy in 0..grid as i64 {
        for gx in 0..grid as i64 {
            for ky in -1..=1i64 {
                for kx in -1..=1i64 {
                    let (sy, sx) = (gy + ky, gx + kx);
                    let inside = sy >= 0 && sx >= 0 && sy < grid as i64 && sx < grid as i64;
                    for c in 0..d {
                        idx.push(if inside {
                            ((sy as usize * grid + sx as usize) * d + c) as u32
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    idx
}

/// Scatter of per-token `patch² x channels` blocks into a per-pixel map.
fn upscale_index(grid: usize, patch: usize, channels: usize) -> Vec<u32> {
    let size = grid * patch;
    let cols = patch * patch * channels;
    let mut idx = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let token = (y / patch) * grid + x / patch;
            let sub = (y % patch) * patch + x % patch;
            for c in 0..channels {
                idx.push((token * cols + sub * channels + c) as u32);
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PredictorConfig {
        PredictorConfig { image_size: 16, patch_size: 4, embed_dim: 8, ..Default::default() }
    }

    fn image(size: u32) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| image::Rgb([(x * 13 % 255) as u8, (y * 7 % 255) as u8, 90]))
    }

    #[test]
    fn output_shape_and_range() {
        let p = Predictor::new(tiny()).unwrap();
        let out = p.predict(&image(16), &BoundingBox::new(2.0, 3.0, 8.0, 6.0)).unwrap();
        assert_eq!(out.mask_logits.len(), 256);
        assert!((0.0..=1.0).contains(&out.iou_estimate));
        // other input sizes are resampled back to the input grid
        let out = p.predict(&image(24), &BoundingBox::new(2.0, 3.0, 8.0, 6.0)).unwrap();
        assert_eq!((out.height, out.width, out.mask_logits.len()), (24, 24, 576));
    }

    #[test]
    fn deterministic() {
        let p = Predictor::new(tiny()).unwrap();
        let b = BoundingBox::new(1.0, 1.0, 5.0, 9.0);
        let a = p.predict(&image(16), &b).unwrap();
        let c = Predictor::new(tiny()).unwrap().predict(&image(16), &b).unwrap();
        assert_eq!(a, c);
        let emb = p.embed(&image(16)).unwrap();
        assert_eq!(p.predict_with_embedding(&emb, 16, 16, &b).unwrap(), a);
    }

    #[test]
    fn degenerate_box_rejected() {
        let p = Predictor::new(tiny()).unwrap();
        let err = p.predict(&image(16), &BoundingBox::new(20.0, 20.0, 3.0, 3.0)).unwrap_err();
        assert!(matches!(err, ModelError::DegenerateBox(_)));
    }

    #[test]
    fn config_validation() {
        assert!(PredictorConfig { image_size: 30, ..tiny() }.validate().is_err());
        assert!(PredictorConfig { decoder_depth: 0, ..tiny() }.validate().is_err());
        assert!(PredictorConfig { num_heads: 3, ..tiny() }.validate().is_err());
    }

    #[test]
    fn upscale_index_is_a_permutation() {
        let mut idx = upscale_index(4, 4, 2);
        idx.sort_unstable();
        assert_eq!(idx, (0..(16 * 16 * 2) as u32).collect::<Vec<_>>());
    }
}
