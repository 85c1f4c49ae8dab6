//! Patch-based masked autoencoder over channel matrices.
//!
//! Tokens are non-overlapping `patch_rows x patch_cols` blocks in row-major
//! patch order, each flattened to `[re(block) row-major; im(block) row-major]`.
//! The encoder sees only visible tokens (patch projection + learned position
//! embedding + pre-norm transformer blocks). The decoder projects them to its
//! own width, inserts a learned mask token at every hidden position, adds its
//! own position embedding, and predicts every token.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelDataset, ChannelMatrix};
use crate::error::{Error, Result};
use crate::nn::{adam_step, decode_checkpoint, encode_checkpoint, AdamState, Graph, ParamGroup, Tensor, Var};
use crate::rng::{stream_seed, Stream};

pub const ENCODER: usize = 0;
pub const DECODER: usize = 1;

/// Decoder share of the parameter count required of ladder configs.
pub const DECODER_FRACTION_RANGE: (f64, f64) = (0.08, 0.14);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub encoder_depth: usize,
    pub decoder_embed_dim: usize,
    pub decoder_heads: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub target_params: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_rows: 128,
            grid_cols: 76,
            patch_rows: 4,
            patch_cols: 4,
            embed_dim: 32,
            n_heads: 2,
            encoder_depth: 2,
            decoder_embed_dim: 16,
            decoder_heads: 1,
            decoder_depth: 1,
            mlp_ratio: 4,
            mask_ratio: 0.5,
            target_params: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.grid_rows,
            self.grid_cols,
            self.patch_rows,
            self.patch_cols,
            self.embed_dim,
            self.n_heads,
            self.encoder_depth,
            self.decoder_embed_dim,
            self.decoder_heads,
            self.decoder_depth,
            self.mlp_ratio,
        ];
        if positive.contains(&0) {
            return Err(Error::arg("model config dimensions must be positive"));
        }
        if !self.grid_rows.is_multiple_of(self.patch_rows) || !self.grid_cols.is_multiple_of(self.patch_cols) {
            return Err(Error::shape(
                "model_config",
                format!(
                    "patch {}x{} does not tile grid {}x{}",
                    self.patch_rows, self.patch_cols, self.grid_rows, self.grid_cols
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) || !self.decoder_embed_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::shape("model_config", "head count must divide the embedding width"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::arg(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        Ok(())
    }

    /// Structural validity plus the decoder-fraction band.
    pub fn validate_strict(&self) -> Result<()> {
        self.validate()?;
        let f = self.decoder_fraction();
        let (lo, hi) = DECODER_FRACTION_RANGE;
        if !(lo..=hi).contains(&f) {
            return Err(Error::InfeasibleConfig(format!("decoder fraction {:.3} outside [{lo}, {hi}]", f)));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        (self.grid_rows / self.patch_rows) * (self.grid_cols / self.patch_cols)
    }

    pub fn patch_dim(&self) -> usize {
        2 * self.patch_rows * self.patch_cols
    }

    pub fn n_masked(&self) -> usize {
        (self.mask_ratio * self.n_tokens() as f64).floor() as usize
    }

    pub fn n_visible(&self) -> usize {
        self.n_tokens() - self.n_masked()
    }

    pub fn patching(&self) -> Patching {
        Patching {
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            patch_rows: self.patch_rows,
            patch_cols: self.patch_cols,
        }
    }

    fn block_params(&self, d: usize) -> usize {
        let r = self.mlp_ratio;
        (4 + 2 * r) * d * d + (9 + r) * d
    }

    pub fn encoder_params(&self) -> usize {
        let (d, t, pd) = (self.embed_dim, self.n_tokens(), self.patch_dim());
        pd * d + d + t * d + self.encoder_depth * self.block_params(d) + 2 * d
    }

    pub fn decoder_params(&self) -> usize {
        let (d, dd, t, pd) = (self.embed_dim, self.decoder_embed_dim, self.n_tokens(), self.patch_dim());
        d * dd + dd + dd + t * dd + self.decoder_depth * self.block_params(dd) + 2 * dd + dd * pd + pd
    }

    pub fn param_count(&self) -> usize {
        self.encoder_params() + self.decoder_params()
    }

    pub fn decoder_fraction(&self) -> f64 {
        self.decoder_params() as f64 / self.param_count() as f64
    }
}

/// Token geometry shared by every predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patching {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl Patching {
    pub fn n_tokens(&self) -> usize {
        (self.grid_rows / self.patch_rows) * (self.grid_cols / self.patch_cols)
    }

    pub fn patch_dim(&self) -> usize {
        2 * self.patch_rows * self.patch_cols
    }

    fn patches_per_row(&self) -> usize {
        self.grid_cols / self.patch_cols
    }

    /// Token holding grid cell `(m, k)` and the offset of its real part.
    pub fn locate(&self, m: usize, k: usize) -> (usize, usize) {
        let t = (m / self.patch_rows) * self.patches_per_row() + k / self.patch_cols;
        let off = (m % self.patch_rows) * self.patch_cols + k % self.patch_cols;
        (t, off)
    }

    /// Tokens that contain at least one of the given columns.
    pub fn tokens_touching_columns(&self, cols: &[usize]) -> Vec<bool> {
        let mut touched = vec![false; self.n_tokens()];
        let per_row = self.patches_per_row();
        for pr in 0..self.grid_rows / self.patch_rows {
            for &c in cols {
                touched[pr * per_row + c / self.patch_cols] = true;
            }
        }
        touched
    }
}

/// Token matrix of one channel, `n_tokens x patch_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub n_tokens: usize,
    pub patch_dim: usize,
    pub data: Vec<f64>,
}

impl Tokens {
    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.patch_dim..(t + 1) * self.patch_dim]
    }
}

pub fn patchify(h: &ChannelMatrix, p: &Patching) -> Result<Tokens> {
    if !h.rows().is_multiple_of(p.patch_rows) || !h.cols().is_multiple_of(p.patch_cols) {
        return Err(Error::shape(
            "patchify",
            format!("{}x{} grid with {}x{} patches", h.rows(), h.cols(), p.patch_rows, p.patch_cols),
        ));
    }
    if (h.rows(), h.cols()) != (p.grid_rows, p.grid_cols) {
        return Err(Error::shape(
            "patchify",
            format!("{}x{} grid, model expects {}x{}", h.rows(), h.cols(), p.grid_rows, p.grid_cols),
        ));
    }
    let (pd, half) = (p.patch_dim(), p.patch_rows * p.patch_cols);
    let mut data = vec![0.0; p.n_tokens() * pd];
    for m in 0..h.rows() {
        for k in 0..h.cols() {
            let (t, off) = p.locate(m, k);
            let z = h.get(m, k);
            data[t * pd + off] = z.re;
            data[t * pd + half + off] = z.im;
        }
    }
    Ok(Tokens {
        n_tokens: p.n_tokens(),
        patch_dim: pd,
        data,
    })
}

pub fn unpatchify(tokens: &Tokens, p: &Patching) -> Result<ChannelMatrix> {
    if tokens.n_tokens != p.n_tokens() || tokens.patch_dim != p.patch_dim() {
        return Err(Error::shape(
            "unpatchify",
            format!("{}x{} tokens for patching {p:?}", tokens.n_tokens, tokens.patch_dim),
        ));
    }
    let (pd, half) = (p.patch_dim(), p.patch_rows * p.patch_cols);
    Ok(ChannelMatrix::from_fn(p.grid_rows, p.grid_cols, |m, k| {
        let (t, off) = p.locate(m, k);
        num_complex::Complex64::new(tokens.data[t * pd + off], tokens.data[t * pd + half + off])
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl Mask {
    pub fn from_visibility(visible: &[bool]) -> Self {
        let (mut v, mut m) = (Vec::new(), Vec::new());
        for (t, &vis) in visible.iter().enumerate() {
            if vis {
                v.push(t)
            } else {
                m.push(t)
            }
        }
        Mask { visible: v, masked: m }
    }
}

/// Uniformly random subset of `floor(ratio * n)` masked tokens.
pub fn apply_mask(n_tokens: usize, mask_ratio: f64, seed: u64) -> Result<Mask> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::arg(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    let n_masked = (mask_ratio * n_tokens as f64).floor() as usize;
    if n_masked == 0 || n_masked >= n_tokens {
        return Err(Error::arg(format!(
            "mask ratio {mask_ratio} over {n_tokens} tokens leaves no masked or no visible token"
        )));
    }
    let perm = Stream::new(seed).permutation(n_tokens);
    let mut masked = perm[..n_masked].to_vec();
    let mut visible = perm[n_masked..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(Mask { visible, masked })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
}

/// Training log as `step,loss,loss_db` rows.
pub fn log_csv(log: &[LogEntry]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "loss_db"])?;
    for e in log {
        w.write_record([e.step.to_string(), e.loss.to_string(), (10.0 * e.loss.log10()).to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// `[encoder, decoder]`.
    pub groups: Vec<ParamGroup>,
    pub log: Vec<LogEntry>,
}

const BLOCK_TENSORS: usize = 16;

fn linear(g: &mut ParamGroup, rng: &mut Stream, name: &str, d_in: usize, d_out: usize, std: f64) {
    let w = (0..d_in * d_out).map(|_| rng.normal() * std).collect();
    g.push(format!("{name}.w"), Tensor::new(vec![d_in, d_out], w).unwrap());
    g.push(format!("{name}.b"), Tensor::zeros(vec![d_out]));
}

fn norm(g: &mut ParamGroup, name: &str, d: usize) {
    g.push(format!("{name}.gamma"), Tensor::filled(vec![d], 1.0));
    g.push(format!("{name}.beta"), Tensor::zeros(vec![d]));
}

fn embedding(g: &mut ParamGroup, rng: &mut Stream, name: &str, rows: usize, d: usize, std: f64) {
    let v = (0..rows * d).map(|_| rng.normal() * std).collect();
    g.push(name, Tensor::new(vec![rows, d], v).unwrap());
}

/// Learned position table initialized with 2-D sine/cosine features: the
/// first half of the width encodes the patch row, the second the patch column
/// (all of it goes to the other axis when one axis has a single patch).
fn sincos_embedding(g: &mut ParamGroup, name: &str, grid: (usize, usize), d: usize) {
    let (rows, cols) = grid;
    let mut v = vec![0.0; rows * cols * d];
    let half = match (rows, cols) {
        (1, _) => 0,
        (_, 1) => d,
        _ => d / 2,
    };
    for r in 0..rows {
        for c in 0..cols {
            let t = r * cols + c;
            for (offset, width, pos) in [(0, half, r), (half, d - half, c)] {
                for i in 0..width {
                    let freq = 1.0 / 10_000f64.powf((i / 2 * 2) as f64 / width.max(1) as f64);
                    let a = pos as f64 * freq;
                    v[t * d + offset + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
                }
            }
        }
    }
    g.push(name, Tensor::new(vec![rows * cols, d], v).unwrap());
}

fn block(g: &mut ParamGroup, rng: &mut Stream, name: &str, d: usize, mlp_ratio: usize) {
    let s = 1.0 / (d as f64).sqrt();
    let h = d * mlp_ratio;
    norm(g, &format!("{name}.ln1"), d);
    for p in ["q", "k", "v", "o"] {
        linear(g, rng, &format!("{name}.{p}"), d, d, s);
    }
    norm(g, &format!("{name}.ln2"), d);
    linear(g, rng, &format!("{name}.fc1"), d, h, s);
    linear(g, rng, &format!("{name}.fc2"), h, d, 1.0 / (h as f64).sqrt());
}

const MASK_TOKEN_STD: f64 = 0.2;
const HEAD_STD: f64 = 0.02;

impl ModelState {
    /// Randomly initialized model; deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::new(seed);
        let (d, dd, pd) = (config.embed_dim, config.decoder_embed_dim, config.patch_dim());

        let mut enc = ParamGroup::new("encoder");
        linear(&mut enc, &mut rng, "patch", pd, d, 1.0 / (pd as f64).sqrt());
        let grid = (config.grid_rows / config.patch_rows, config.grid_cols / config.patch_cols);
        sincos_embedding(&mut enc, "pos", grid, d);
        for i in 0..config.encoder_depth {
            block(&mut enc, &mut rng, &format!("enc{i}"), d, config.mlp_ratio);
        }
        norm(&mut enc, "enc_norm", d);

        let mut dec = ParamGroup::new("decoder");
        linear(&mut dec, &mut rng, "dec_embed", d, dd, 1.0 / (d as f64).sqrt());
        embedding(&mut dec, &mut rng, "mask_token", 1, dd, MASK_TOKEN_STD);
        sincos_embedding(&mut dec, "dec_pos", grid, dd);
        for i in 0..config.decoder_depth {
            block(&mut dec, &mut rng, &format!("dec{i}"), dd, config.mlp_ratio);
        }
        norm(&mut dec, "dec_norm", dd);
        linear(&mut dec, &mut rng, "head", dd, pd, HEAD_STD);

        let state = Self {
            config: config.clone(),
            groups: vec![enc, dec],
            log: Vec::new(),
        };
        debug_assert_eq!(state.groups[ENCODER].param_count(), config.encoder_params());
        debug_assert_eq!(state.groups[DECODER].param_count(), config.decoder_params());
        Ok(state)
    }

    pub fn encoder(&self) -> &ParamGroup {
        &self.groups[ENCODER]
    }

    pub fn decoder(&self) -> &ParamGroup {
        &self.groups[DECODER]
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(ParamGroup::param_count).sum()
    }

    /// Forward pass over a batch; returns predictions for every token of
    /// every sample, `(batch * n_tokens) x patch_dim`.
    pub(crate) fn forward(&self, graph: &mut Graph, vars: &[Vec<Var>], tokens: &[&Tokens], visible: &[Vec<usize>]) -> Result<Var> {
        let cfg = &self.config;
        let (t, pd) = (cfg.n_tokens(), cfg.patch_dim());
        let batch = tokens.len();
        if batch == 0 || visible.len() != batch {
            return Err(Error::arg("forward needs a non-empty batch with one visibility list per sample"));
        }
        let v = visible[0].len();
        if v == 0 {
            return Err(Error::arg("at least one token must be visible"));
        }
        if visible.iter().any(|vis| vis.len() != v) {
            return Err(Error::arg("every sample in a batch must expose the same number of tokens"));
        }
        for (tok, vis) in tokens.iter().zip(visible) {
            if tok.n_tokens != t || tok.patch_dim != pd {
                return Err(Error::shape(
                    "forward",
                    format!("{}x{} tokens, model expects {t}x{pd}", tok.n_tokens, tok.patch_dim),
                ));
            }
            if vis.iter().any(|&i| i >= t) || vis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::arg("visible token ids must be sorted, unique and in range"));
            }
        }

        // Inputs are divided by the RMS of each sample's visible values and
        // predictions multiplied back, so the model works at unit scale.
        let mut x = Vec::with_capacity(batch * v * pd);
        let mut pos_ids = Vec::with_capacity(batch * v);
        let mut scales = Vec::with_capacity(batch);
        for (tok, vis) in tokens.iter().zip(visible) {
            let start = x.len();
            for &i in vis {
                x.extend_from_slice(tok.token(i));
                pos_ids.push(i);
            }
            let ms = x[start..].iter().map(|a| a * a).sum::<f64>() / (v * pd) as f64;
            let s = if ms > 0.0 && ms.is_finite() { ms.sqrt() } else { 1.0 };
            x[start..].iter_mut().for_each(|a| *a /= s);
            scales.push(s);
        }
        let enc = &vars[ENCODER];
        let dec = &vars[DECODER];
        let mut c = 0;
        let mut next = |list: &[Var]| {
            c += 1;
            list[c - 1]
        };

        let x = graph.constant(batch * v, pd, x)?;
        let (pw, pb, pos) = (next(enc), next(enc), next(enc));
        let h = graph.matmul(x, pw)?;
        let h = graph.add_bias(h, pb)?;
        let p = graph.gather_rows(pos, &pos_ids)?;
        let mut h = graph.add(h, p)?;
        for _ in 0..cfg.encoder_depth {
            let params: Vec<Var> = (0..BLOCK_TENSORS).map(|_| next(enc)).collect();
            h = transformer_block(graph, h, &params, cfg.n_heads, v)?;
        }
        let (ng, nb) = (next(enc), next(enc));
        let h = graph.layer_norm(h, ng, nb)?;

        let mut c = 0;
        let mut next = |list: &[Var]| {
            c += 1;
            list[c - 1]
        };
        let (ew, eb, mask_tok, dpos) = (next(dec), next(dec), next(dec), next(dec));
        let z = graph.matmul(h, ew)?;
        let z = graph.add_bias(z, eb)?;
        let with_mask = graph.concat_rows(z, mask_tok)?;
        let mask_row = batch * v;
        let mut index = Vec::with_capacity(batch * t);
        for (b, vis) in visible.iter().enumerate() {
            let mut slot = vec![mask_row; t];
            for (j, &i) in vis.iter().enumerate() {
                slot[i] = b * v + j;
            }
            index.extend(slot);
        }
        let full = graph.gather_rows(with_mask, &index)?;
        let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let dp = graph.gather_rows(dpos, &tiled)?;
        let mut y = graph.add(full, dp)?;
        for _ in 0..cfg.decoder_depth {
            let params: Vec<Var> = (0..BLOCK_TENSORS).map(|_| next(dec)).collect();
            y = transformer_block(graph, y, &params, cfg.decoder_heads, t)?;
        }
        let (ng, nb, hw, hb) = (next(dec), next(dec), next(dec), next(dec));
        let y = graph.layer_norm(y, ng, nb)?;
        let y = graph.matmul(y, hw)?;
        let y = graph.add_bias(y, hb)?;
        let scale: Vec<f64> = scales.iter().flat_map(|&s| std::iter::repeat_n(s, t * pd)).collect();
        let scale = graph.constant(batch * t, pd, scale)?;
        graph.mul(y, scale)
    }

    /// Predictions for every token (inference only, no gradients).
    pub fn predict_tokens(&self, tokens: &[&Tokens], visible: &[Vec<usize>]) -> Result<Vec<Tokens>> {
        let mut graph = Graph::new();
        let frozen: Vec<ParamGroup> = self
            .groups
            .iter()
            .map(|g| ParamGroup {
                trainable: false,
                ..g.clone()
            })
            .collect();
        let vars = graph.bind(&frozen);
        let pred = self.forward(&mut graph, &vars, tokens, visible)?;
        let (t, pd) = (self.config.n_tokens(), self.config.patch_dim());
        Ok(graph
            .value(pred)
            .chunks_exact(t * pd)
            .map(|c| Tokens {
                n_tokens: t,
                patch_dim: pd,
                data: c.to_vec(),
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&serde_json::to_string(&self.config)?, &self.groups)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (cfg_json, groups) = decode_checkpoint(bytes)?;
        let config: ModelConfig = serde_json::from_str(&cfg_json)?;
        let mut state = ModelState::init(&config, 0)?;
        if groups.len() != state.groups.len() {
            return Err(Error::arg(format!("checkpoint has {} groups, expected 2", groups.len())));
        }
        for (dst, src) in state.groups.iter_mut().zip(groups) {
            if dst.name != src.name || dst.tensors.len() != src.tensors.len() {
                return Err(Error::arg(format!("checkpoint group {} does not match its config", src.name)));
            }
            for (d, s) in dst.tensors.iter_mut().zip(src.tensors) {
                if d.shape() != s.shape() {
                    return Err(Error::arg(format!("tensor shape {:?} does not match {:?}", s.shape(), d.shape())));
                }
                *d = s;
            }
            dst.trainable = src.trainable;
        }
        Ok(state)
    }
}

fn transformer_block(g: &mut Graph, x: Var, p: &[Var], heads: usize, seq: usize) -> Result<Var> {
    let a = g.layer_norm(x, p[0], p[1])?;
    let q = g.matmul(a, p[2])?;
    let q = g.add_bias(q, p[3])?;
    let k = g.matmul(a, p[4])?;
    let k = g.add_bias(k, p[5])?;
    let v = g.matmul(a, p[6])?;
    let v = g.add_bias(v, p[7])?;
    let att = g.attention(q, k, v, heads, seq)?;
    let o = g.matmul(att, p[8])?;
    let o = g.add_bias(o, p[9])?;
    let x = g.add(x, o)?;
    let a = g.layer_norm(x, p[10], p[11])?;
    let hdn = g.matmul(a, p[12])?;
    let hdn = g.add_bias(hdn, p[13])?;
    let hdn = g.gelu(hdn);
    let m = g.matmul(hdn, p[14])?;
    let m = g.add_bias(m, p[15])?;
    g.add(x, m)
}

/// Weights selecting every element of the listed tokens, per sample.
pub(crate) fn token_weights(n_tokens: usize, patch_dim: usize, selected: &[Vec<usize>]) -> Vec<f64> {
    let mut w = vec![0.0; selected.len() * n_tokens * patch_dim];
    for (b, sel) in selected.iter().enumerate() {
        for &t in sel {
            let start = (b * n_tokens + t) * patch_dim;
            w[start..start + patch_dim].iter_mut().for_each(|x| *x = 1.0);
        }
    }
    w
}

/// Masked-channel-modeling loss: mean squared error per complex entry
/// (`|h_hat - h|^2`) over masked tokens only, for one channel under the mask
/// drawn from `mask_seed`.
pub fn mcm_loss(model: &ModelState, h: &ChannelMatrix, mask_seed: u64) -> Result<f64> {
    Ok(mcm_loss_detail(model, h, mask_seed)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmLoss {
    pub loss: f64,
    /// Mean `|h|^2` of the target entries at masked positions.
    pub signal_power: f64,
}

impl McmLoss {
    pub fn loss_db(&self) -> f64 {
        10.0 * (self.loss / self.signal_power).log10()
    }
}

pub fn mcm_loss_detail(model: &ModelState, h: &ChannelMatrix, mask_seed: u64) -> Result<McmLoss> {
    let cfg = &model.config;
    let tokens = patchify(h, &cfg.patching())?;
    let mask = apply_mask(cfg.n_tokens(), cfg.mask_ratio, mask_seed)?;
    let pred = model.predict_tokens(&[&tokens], std::slice::from_ref(&mask.visible))?;
    let (mut err, mut sig, mut n) = (0.0, 0.0, 0usize);
    for &t in &mask.masked {
        for (p, y) in pred[0].token(t).iter().zip(tokens.token(t)) {
            err += (p - y) * (p - y);
            sig += y * y;
        }
        n += cfg.patch_dim() / 2;
    }
    Ok(McmLoss {
        loss: err / n as f64,
        signal_power: sig / n as f64,
    })
}

/// `mcm_loss` together with its gradient, indexed `[group][tensor][element]`
/// like `model.groups`.
pub fn mcm_loss_gradients(model: &ModelState, h: &ChannelMatrix, mask_seed: u64) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let cfg = &model.config;
    let (t, pd) = (cfg.n_tokens(), cfg.patch_dim());
    let tokens = patchify(h, &cfg.patching())?;
    let mask = apply_mask(t, cfg.mask_ratio, mask_seed)?;
    let mut groups = model.groups.clone();
    groups.iter_mut().for_each(|g| g.trainable = true);
    let mut graph = Graph::new();
    let vars = graph.bind(&groups);
    let pred = model.forward(&mut graph, &vars, &[&tokens], &[mask.visible])?;
    let target = graph.constant(t, pd, tokens.data.clone())?;
    let weights = token_weights(t, pd, &[mask.masked]);
    let loss = graph.masked_mse(pred, target, &weights)?;
    let loss = graph.scale(loss, 2.0);
    graph.backward(loss)?;
    let grads = vars
        .iter()
        .zip(&groups)
        .map(|(vs, g)| {
            vs.iter()
                .zip(&g.tensors)
                .map(|(&v, t)| graph.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect()
        })
        .collect();
    Ok((graph.scalar(loss), grads))
}

/// Mean MCM loss over a fixed evaluation set: sample `i` uses mask seeds
/// `stream_seed(seed, i * masks_per_sample + j)`.
pub fn evaluate_mcm(model: &ModelState, ds: &ChannelDataset, masks_per_sample: usize, seed: u64) -> Result<McmLoss> {
    let cfg = &model.config;
    let p = cfg.patching();
    let (t, pd) = (cfg.n_tokens(), cfg.patch_dim());
    let (mut err, mut sig, mut n) = (0.0, 0.0, 0usize);
    let mut jobs = Vec::new();
    for (i, h) in ds.samples.iter().enumerate() {
        let tokens = patchify(h, &p)?;
        for j in 0..masks_per_sample {
            let mask = apply_mask(t, cfg.mask_ratio, stream_seed(seed, (i * masks_per_sample + j) as u64))?;
            jobs.push((tokens.clone(), mask));
        }
    }
    for chunk in jobs.chunks(32) {
        let toks: Vec<&Tokens> = chunk.iter().map(|j| &j.0).collect();
        let vis: Vec<Vec<usize>> = chunk.iter().map(|j| j.1.visible.clone()).collect();
        let pred = model.predict_tokens(&toks, &vis)?;
        for ((tok, mask), pr) in chunk.iter().zip(&pred) {
            for &m in &mask.masked {
                for (a, b) in pr.token(m).iter().zip(tok.token(m)) {
                    err += (a - b) * (a - b);
                    sig += b * b;
                }
                n += pd / 2;
            }
        }
    }
    Ok(McmLoss {
        loss: err / n as f64,
        signal_power: sig / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

const MASK_STREAM: u64 = 0x6d61_736b;

/// Adam on the MCM loss over encoder and decoder. Batches walk seeded
/// per-epoch permutations of the dataset; every sample draws its own mask.
pub fn pretrain(mut model: ModelState, ds: &ChannelDataset, opts: &PretrainOptions) -> Result<ModelState> {
    if ds.is_empty() {
        return Err(Error::arg("pretraining needs a non-empty dataset"));
    }
    if opts.steps == 0 {
        return Err(Error::arg("pretraining needs at least one step"));
    }
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::arg("batch_size and lr must be positive"));
    }
    let cfg = model.config.clone();
    let p = cfg.patching();
    let tokens: Vec<Tokens> = ds.samples.iter().map(|h| patchify(h, &p)).collect::<Result<_>>()?;
    for g in &mut model.groups {
        g.trainable = true;
    }
    let mut adam = AdamState::new(&model.groups, opts.lr);
    let n = tokens.len();
    let mut order = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        let mut visible = Vec::with_capacity(opts.batch_size);
        let mut masked = Vec::with_capacity(opts.batch_size);
        for b in 0..opts.batch_size {
            if cursor == order.len() {
                order = Stream::derived(opts.seed, epoch).permutation(n);
                epoch += 1;
                cursor = 0;
            }
            batch.push(&tokens[order[cursor]]);
            cursor += 1;
            let seed = stream_seed(opts.seed ^ MASK_STREAM, (step * opts.batch_size + b) as u64);
            let mask = apply_mask(cfg.n_tokens(), cfg.mask_ratio, seed)?;
            visible.push(mask.visible);
            masked.push(mask.masked);
        }
        let loss = train_step(&mut model, &mut adam, &batch, &visible, &masked, opts.clip_norm)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        model.log.push(LogEntry { step, loss });
    }
    Ok(model)
}

/// One forward/backward/Adam step on masked-token reconstruction; returns
/// the loss before the update.
pub(crate) fn train_step(
    model: &mut ModelState,
    adam: &mut AdamState,
    batch: &[&Tokens],
    visible: &[Vec<usize>],
    loss_tokens: &[Vec<usize>],
    clip_norm: Option<f64>,
) -> Result<f64> {
    let (t, pd) = (model.config.n_tokens(), model.config.patch_dim());
    let mut graph = Graph::new();
    let vars = graph.bind(&model.groups);
    let pred = model.forward(&mut graph, &vars, batch, visible)?;
    let target: Vec<f64> = batch.iter().flat_map(|tok| tok.data.iter().copied()).collect();
    let target = graph.constant(batch.len() * t, pd, target)?;
    let weights = token_weights(t, pd, loss_tokens);
    let loss = graph.masked_mse(pred, target, &weights)?;
    let loss = graph.scale(loss, 2.0);
    let value = graph.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    graph.backward(loss)?;
    graph.accumulate_param_grads(&mut model.groups);
    if let Some(max) = clip_norm {
        clip_gradients(&mut model.groups, max);
    }
    adam_step(&mut model.groups, adam)?;
    Ok(value)
}

fn clip_gradients(groups: &mut [ParamGroup], max_norm: f64) {
    let sq: f64 = groups
        .iter()
        .filter(|g| g.trainable)
        .flat_map(|g| g.tensors.iter())
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter().map(|v| v * v))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in groups.iter_mut().filter(|g| g.trainable) {
            for t in &mut g.tensors {
                if let Some(grad) = t.grad().map(|g| g.iter().map(|v| (s - 1.0) * v).collect::<Vec<_>>()) {
                    t.accumulate_grad(&grad);
                }
            }
        }
    }
}

/// Anything that predicts all tokens of a channel from a visible subset.
pub trait TokenPredictor {
    fn patching(&self) -> Patching;
    fn predict(&self, tokens: &[&Tokens], visible: &[Vec<usize>]) -> Result<Vec<Tokens>>;
}

impl TokenPredictor for ModelState {
    fn patching(&self) -> Patching {
        self.config.patching()
    }

    fn predict(&self, tokens: &[&Tokens], visible: &[Vec<usize>]) -> Result<Vec<Tokens>> {
        self.predict_tokens(tokens, visible)
    }
}

/// Fills masked patches from the predictor; visible patches pass through.
pub fn reconstruct<P: TokenPredictor + ?Sized>(model: &P, h_partial: &ChannelMatrix, visible: &[bool]) -> Result<ChannelMatrix> {
    let p = model.patching();
    if visible.len() != p.n_tokens() {
        return Err(Error::shape(
            "reconstruct",
            format!("{} visibility flags for {} tokens", visible.len(), p.n_tokens()),
        ));
    }
    let mask = Mask::from_visibility(visible);
    if mask.visible.is_empty() {
        return Err(Error::arg("reconstruct needs at least one visible token"));
    }
    let tokens = patchify(h_partial, &p)?;
    if mask.masked.is_empty() {
        return Ok(h_partial.clone());
    }
    let pred = model.predict(&[&tokens], std::slice::from_ref(&mask.visible))?;
    let mut out = tokens.clone();
    let pd = p.patch_dim();
    for &t in &mask.masked {
        out.data[t * pd..(t + 1) * pd].copy_from_slice(pred[0].token(t));
    }
    let h = unpatchify(&out, &p)?;
    if !h.is_finite() {
        return Err(Error::InvalidState("reconstruction produced non-finite values".into()));
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMode {
    Inference,
    TttStep,
}

/// Multiply-accumulates of one forward pass for a single channel, split into
/// encoder (on the visible tokens) and decoder (on all tokens).
pub fn forward_macs(config: &ModelConfig) -> (u64, u64) {
    let (d, dd, t, pd) = (
        config.embed_dim as u64,
        config.decoder_embed_dim as u64,
        config.n_tokens() as u64,
        config.patch_dim() as u64,
    );
    let v = config.n_visible() as u64;
    let r = config.mlp_ratio as u64;
    let block = |n: u64, w: u64| 4 * n * w * w + 2 * n * n * w + 2 * n * w * (r * w);
    let enc = v * pd * d + config.encoder_depth as u64 * block(v, d);
    let dec = v * d * dd + config.decoder_depth as u64 * block(t, dd) + t * dd * pd;
    (enc, dec)
}

/// GFLOPs (2 x multiply-accumulates) for one channel.
///
/// `Inference` is one forward pass. `TttStep` is a frozen-encoder forward
/// plus decoder forward and backward, the backward counted as twice the
/// forward (input and weight gradients). Element-wise ops are not counted.
pub fn flops_estimate(config: &ModelConfig, mode: FlopMode) -> f64 {
    let (enc, dec) = forward_macs(config);
    let macs = match mode {
        FlopMode::Inference => enc + dec,
        FlopMode::TttStep => enc + 3 * dec,
    };
    2.0 * macs as f64 / 1e9
}

/// Fixed part of a ladder: grid, patching and training-independent knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderBase {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
}

impl Default for LadderBase {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            grid_rows: c.grid_rows,
            grid_cols: c.grid_cols,
            patch_rows: c.patch_rows,
            patch_cols: c.patch_cols,
            mlp_ratio: c.mlp_ratio,
            mask_ratio: c.mask_ratio,
        }
    }
}

pub const LADDER_TOLERANCE: f64 = 0.2;
const EMBED_WIDTHS: [usize; 12] = [8, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512];

fn heads_for(width: usize) -> usize {
    (width / 16).max(1)
}

/// Configs whose parameter counts are within 20% of each target, with the
/// decoder share in [8%, 14%] and every scaled dimension non-decreasing
/// along the ladder. Among feasible candidates the closest count wins, with
/// a mild preference for depth growing with width (depth ~ width / 32).
pub fn build_ladder(targets: &[usize], base: &LadderBase) -> Result<Vec<ModelConfig>> {
    if targets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::arg("ladder targets must be ascending"));
    }
    let mut out: Vec<ModelConfig> = Vec::new();
    for &target in targets {
        let prev = out.last().cloned();
        let mut best: Option<(f64, ModelConfig)> = None;
        for &d in &EMBED_WIDTHS {
            for depth in 1..=12 {
                for &dd in EMBED_WIDTHS.iter().filter(|&&w| w <= d) {
                    for ddepth in 1..=4 {
                        let cfg = ModelConfig {
                            grid_rows: base.grid_rows,
                            grid_cols: base.grid_cols,
                            patch_rows: base.patch_rows,
                            patch_cols: base.patch_cols,
                            embed_dim: d,
                            n_heads: heads_for(d),
                            encoder_depth: depth,
                            decoder_embed_dim: dd,
                            decoder_heads: heads_for(dd),
                            decoder_depth: ddepth,
                            mlp_ratio: base.mlp_ratio,
                            mask_ratio: base.mask_ratio,
                            target_params: target,
                        };
                        if let Some(p) = &prev {
                            if d < p.embed_dim || depth < p.encoder_depth || dd < p.decoder_embed_dim || ddepth < p.decoder_depth {
                                continue;
                            }
                        }
                        if cfg.validate_strict().is_err() {
                            continue;
                        }
                        let ratio = cfg.param_count() as f64 / target as f64;
                        if (ratio - 1.0).abs() > LADDER_TOLERANCE {
                            continue;
                        }
                        let pref_depth = (d as f64 / 32.0).max(2.0);
                        let score =
                            ratio.ln().abs() + 0.1 * (depth as f64 / pref_depth).ln().abs() + 0.5 * (cfg.decoder_fraction() - 0.11).abs();
                        if best.as_ref().is_none_or(|(s, _)| score < *s) {
                            best = Some((score, cfg));
                        }
                    }
                }
            }
        }
        match best {
            Some((_, cfg)) => out.push(cfg),
            None => {
                return Err(Error::InfeasibleConfig(format!(
                    "no config within {}% of {target} parameters with decoder share in [8%, 14%]",
                    LADDER_TOLERANCE * 100.0
                )))
            }
        }
    }
    if let Some(bad) = out.iter().find(|c| base.mask_ratio * (c.n_tokens() as f64) < 1.0) {
        return Err(Error::InfeasibleConfig(format!(
            "mask ratio masks nothing over {} tokens",
            bad.n_tokens()
        )));
    }
    Ok(out)
}
