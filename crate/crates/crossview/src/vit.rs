//! Vision-transformer encoder for one image stream.
//!
//! Patchify → linear projection → class token → position embedding →
//! `L` pre-norm blocks of multi-head self-attention + MLP → final norm →
//! linear head → l2-normalized embedding. The class-token attention row
//! of the last layer, averaged over heads, is exposed as an
//! [`AttentionMap`] to guide token cropping.
//!
//! Token sets carry explicit grid positions, so an arbitrary subset of
//! patches can be removed without touching the position encoding of the
//! survivors.

use crate::data::Image;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VitError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("patch size {p} does not divide image {h}x{w}")]
    PatchDivide { p: usize, h: usize, w: usize },
    #[error("token grid {got:?} does not match position table grid {want:?}")]
    GridMismatch {
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("grid position {0:?} outside table grid or duplicated")]
    BadPosition((usize, usize)),
    #[error("position interpolation requires the learnable kind")]
    FixedInterp,
    #[error("degenerate grid {0}x{1}")]
    DegenerateGrid(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEmbedKind {
    Learnable,
    FixedSincos2d,
}

#[derive(Clone, Debug)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_out: usize,
    pub pos_embed: PosEmbedKind,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(VitError::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.embed_out < 1 {
            return Err(VitError::Config("embed_out must be >= 1".into()));
        }
        if self.patch_size == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return Err(VitError::Config(
                "patch_size, layers and mlp_ratio must be positive".into(),
            ));
        }
        if self.pos_embed == PosEmbedKind::FixedSincos2d && self.model_dim % 4 != 0 {
            return Err(VitError::Config(
                "fixed_sincos_2d needs model_dim divisible by 4".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Ordered patch tokens plus a class token at row 0. Each patch token
/// remembers its own grid cell, which is what survives cropping.
pub struct TokenSet {
    pub tokens: Var,
    pub grid_positions: Vec<(usize, usize)>,
    pub grid_shape: (usize, usize),
}

impl TokenSet {
    pub fn n_patches(&self) -> usize {
        self.grid_positions.len()
    }

    fn check(&self) -> Result<(), VitError> {
        let (rows, cols) = self.grid_shape;
        let mut seen = vec![false; rows * cols];
        for &(r, c) in &self.grid_positions {
            if r >= rows || c >= cols || seen[r * cols + c] {
                return Err(VitError::BadPosition((r, c)));
            }
            seen[r * cols + c] = true;
        }
        Ok(())
    }
}

/// Per-patch relevance scores from the class-token attention row of the
/// last encoder layer, head-averaged, laid out row-major on the grid.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub grid_shape: (usize, usize),
    pub values: Vec<f64>,
    /// Post-softmax weight the class token assigns to itself;
    /// `values.sum() + class_weight == 1` for a full token set.
    pub class_weight: f64,
}

/// Additive per-token position table for a full grid; row 0 belongs to
/// the class token.
#[derive(Clone, Debug)]
pub struct PositionEmbedding<S> {
    pub kind: PosEmbedKind,
    pub grid: (usize, usize),
    pub table: Tensor<S>,
}

impl<S: Scalar> PositionEmbedding<S> {
    pub fn learnable<R: Rng>(grid: (usize, usize), dim: usize, rng: &mut R) -> Self {
        let table = trunc_normal(rng, vec![grid.0 * grid.1 + 1, dim], 0.02);
        Self {
            kind: PosEmbedKind::Learnable,
            grid,
            table,
        }
    }

    /// Deterministic 2D sin/cos table. The first half of each row
    /// encodes the column coordinate, the second half the row
    /// coordinate, each as interleaved (sin, cos) bands. The class row
    /// is all zeros.
    pub fn fixed_sincos(grid: (usize, usize), dim: usize) -> Result<Self, VitError> {
        if dim % 4 != 0 {
            return Err(VitError::Config(
                "fixed_sincos_2d needs model_dim divisible by 4".into(),
            ));
        }
        let (rows, cols) = grid;
        if rows == 0 || cols == 0 {
            return Err(VitError::DegenerateGrid(rows, cols));
        }
        let quarter = dim / 4;
        let mut data = vec![S::zero(); (rows * cols + 1) * dim];
        for r in 0..rows {
            for c in 0..cols {
                let row_off = (1 + r * cols + c) * dim;
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let (xc, xr) = (c as f64 * omega, r as f64 * omega);
                    data[row_off + i] = S::from_f64(xc.sin());
                    data[row_off + quarter + i] = S::from_f64(xc.cos());
                    data[row_off + 2 * quarter + i] = S::from_f64(xr.sin());
                    data[row_off + 3 * quarter + i] = S::from_f64(xr.cos());
                }
            }
        }
        Ok(Self {
            kind: PosEmbedKind::FixedSincos2d,
            grid,
            table: Tensor::new(vec![rows * cols + 1, dim], data)?,
        })
    }

    /// Row index in the table for a grid cell.
    pub fn row_index(&self, pos: (usize, usize)) -> Result<usize, VitError> {
        let (rows, cols) = self.grid;
        if pos.0 >= rows || pos.1 >= cols {
            return Err(VitError::BadPosition(pos));
        }
        Ok(1 + pos.0 * cols + pos.1)
    }

    /// Bilinearly resample the patch rows as a 2D field per channel onto
    /// a new grid; the class row is copied unchanged. Learnable kind
    /// only. Resampling onto the same grid is bit-identical.
    pub fn interpolate(&self, new_grid: (usize, usize)) -> Result<Self, VitError> {
        if self.kind != PosEmbedKind::Learnable {
            return Err(VitError::FixedInterp);
        }
        let (r0, c0) = self.grid;
        let (r1, c1) = new_grid;
        if r0 == 0 || c0 == 0 || r1 == 0 || c1 == 0 {
            return Err(VitError::DegenerateGrid(r1, c1));
        }
        let dim = self.table.cols();
        let old = self.table.data();
        let mut data = vec![S::zero(); (r1 * c1 + 1) * dim];
        data[..dim].copy_from_slice(&old[..dim]);
        for i in 0..r1 {
            let sy = axis_coord(i, r1, r0);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(r0 - 1);
            let fy = S::from_f64(sy - y0 as f64);
            for j in 0..c1 {
                let sx = axis_coord(j, c1, c0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(c0 - 1);
                let fx = S::from_f64(sx - x0 as f64);
                let dst = (1 + i * c1 + j) * dim;
                for d in 0..dim {
                    let v00 = old[(1 + y0 * c0 + x0) * dim + d];
                    let v01 = old[(1 + y0 * c0 + x1) * dim + d];
                    let v10 = old[(1 + y1 * c0 + x0) * dim + d];
                    let v11 = old[(1 + y1 * c0 + x1) * dim + d];
                    let top = v00 * (S::one() - fx) + v01 * fx;
                    let bot = v10 * (S::one() - fx) + v11 * fx;
                    data[dst + d] = top * (S::one() - fy) + bot * fy;
                }
            }
        }
        Ok(Self {
            kind: PosEmbedKind::Learnable,
            grid: new_grid,
            table: Tensor::new(vec![r1 * c1 + 1, dim], data)?,
        })
    }
}

/// Source coordinate for aligned-corner resampling of `n1` samples onto
/// an `n0`-sample axis.
fn axis_coord(i: usize, n1: usize, n0: usize) -> f64 {
    if n1 == 1 {
        0.0
    } else {
        i as f64 * (n0 - 1) as f64 / (n1 - 1) as f64
    }
}

/// Split an image into `P×P` patches, row-major over the grid, each
/// flattened in (row, col, channel) order.
pub fn patchify<S: Scalar>(
    image: &Image,
    p: usize,
) -> Result<(Tensor<S>, (usize, usize)), VitError> {
    if p == 0 || image.h % p != 0 || image.w % p != 0 {
        return Err(VitError::PatchDivide {
            p,
            h: image.h,
            w: image.w,
        });
    }
    let (rows, cols) = (image.h / p, image.w / p);
    let chans = image.c;
    let mut data = Vec::with_capacity(rows * cols * p * p * chans);
    for gr in 0..rows {
        for gc in 0..cols {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..chans {
                        data.push(S::from_f64(image.get(gr * p + py, gc * p + px, ch) as f64));
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![rows * cols, p * p * chans], data)?,
        (rows, cols),
    ))
}

struct Block<S> {
    ln1_g: Tensor<S>,
    ln1_b: Tensor<S>,
    wq: Tensor<S>,
    bq: Tensor<S>,
    wk: Tensor<S>,
    bk: Tensor<S>,
    wv: Tensor<S>,
    bv: Tensor<S>,
    wo: Tensor<S>,
    bo: Tensor<S>,
    ln2_g: Tensor<S>,
    ln2_b: Tensor<S>,
    w1: Tensor<S>,
    b1: Tensor<S>,
    w2: Tensor<S>,
    b2: Tensor<S>,
}

const BLOCK_PARAMS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1",
    "b1", "w2", "b2",
];

struct BoundBlock {
    vars: [Var; 16],
}

/// Tape handles for every encoder parameter, in canonical order.
pub struct BoundEncoder {
    patch_w: Var,
    patch_b: Var,
    cls: Var,
    pos: Var,
    blocks: Vec<BoundBlock>,
    ln_f_g: Var,
    ln_f_b: Var,
    head_w: Var,
    head_b: Var,
}

impl BoundEncoder {
    /// All parameter vars in the same order as [`ViTEncoder::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            out.extend_from_slice(&b.vars);
        }
        out.extend_from_slice(&[self.ln_f_g, self.ln_f_b, self.head_w, self.head_b]);
        out
    }

    pub fn pos_table(&self) -> Var {
        self.pos
    }
}

/// One image stream's encoder. Street and aerial streams each own a
/// separate instance; nothing is shared.
pub struct ViTEncoder<S> {
    pub cfg: ViTConfig,
    pub channels: usize,
    patch_w: Tensor<S>,
    patch_b: Tensor<S>,
    cls: Tensor<S>,
    pub pos: PositionEmbedding<S>,
    blocks: Vec<Block<S>>,
    ln_f_g: Tensor<S>,
    ln_f_b: Tensor<S>,
    head_w: Tensor<S>,
    head_b: Tensor<S>,
}

impl<S: Scalar> ViTEncoder<S> {
    /// Fresh encoder for a `grid.0 × grid.1` patch grid. Projections and
    /// the position table start truncated-normal (sigma 0.02), biases at
    /// zero, norm gains at one.
    pub fn new<R: Rng>(
        cfg: ViTConfig,
        grid: (usize, usize),
        channels: usize,
        rng: &mut R,
    ) -> Result<Self, VitError> {
        cfg.validate()?;
        if grid.0 == 0 || grid.1 == 0 {
            return Err(VitError::DegenerateGrid(grid.0, grid.1));
        }
        let d = cfg.model_dim;
        let in_dim = cfg.patch_size * cfg.patch_size * channels;
        let hidden = cfg.mlp_ratio * d;
        let pos = match cfg.pos_embed {
            PosEmbedKind::Learnable => PositionEmbedding::learnable(grid, d, rng),
            PosEmbedKind::FixedSincos2d => PositionEmbedding::fixed_sincos(grid, d)?,
        };
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1_g: Tensor::full(vec![1, d], S::one()),
                ln1_b: Tensor::zeros(vec![1, d]),
                wq: trunc_normal(rng, vec![d, d], 0.02),
                bq: Tensor::zeros(vec![1, d]),
                wk: trunc_normal(rng, vec![d, d], 0.02),
                bk: Tensor::zeros(vec![1, d]),
                wv: trunc_normal(rng, vec![d, d], 0.02),
                bv: Tensor::zeros(vec![1, d]),
                wo: trunc_normal(rng, vec![d, d], 0.02),
                bo: Tensor::zeros(vec![1, d]),
                ln2_g: Tensor::full(vec![1, d], S::one()),
                ln2_b: Tensor::zeros(vec![1, d]),
                w1: trunc_normal(rng, vec![d, hidden], 0.02),
                b1: Tensor::zeros(vec![1, hidden]),
                w2: trunc_normal(rng, vec![hidden, d], 0.02),
                b2: Tensor::zeros(vec![1, d]),
            })
            .collect();
        Ok(Self {
            patch_w: trunc_normal(rng, vec![in_dim, d], 0.02),
            patch_b: Tensor::zeros(vec![1, d]),
            cls: trunc_normal(rng, vec![1, d], 0.02),
            pos,
            blocks,
            ln_f_g: Tensor::full(vec![1, d], S::one()),
            ln_f_b: Tensor::zeros(vec![1, d]),
            head_w: trunc_normal(rng, vec![d, cfg.embed_out], 0.02),
            head_b: Tensor::zeros(vec![1, cfg.embed_out]),
            cfg,
            channels,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.pos.grid
    }

    /// Replace the position table, e.g. with an interpolated one when
    /// the grid resolution changes between stages.
    pub fn set_position_embedding(&mut self, pos: PositionEmbedding<S>) {
        self.pos = pos;
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "patch_w".to_string(),
            "patch_b".to_string(),
            "cls".to_string(),
            "pos".to_string(),
        ];
        for i in 0..self.blocks.len() {
            for p in BLOCK_PARAMS {
                names.push(format!("blk{i}.{p}"));
            }
        }
        for n in ["ln_f_g", "ln_f_b", "head_w", "head_b"] {
            names.push(n.to_string());
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> =
            vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos.table];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.ln_f_g, &self.ln_f_b, &self.head_w, &self.head_b]);
        out
    }

    /// True for parameters the sharpness perturbation may touch:
    /// everything except the normalization gains/biases, whose O(1)
    /// magnitude would dominate the adaptive perturbation budget.
    pub fn param_perturb_flags(&self) -> Vec<bool> {
        self.param_names()
            .iter()
            .map(|n| !n.contains("ln"))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls,
            &mut self.pos.table,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([
            &mut self.ln_f_g,
            &mut self.ln_f_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Register every parameter on the tape. With `trainable` false the
    /// leaves carry no gradient, which makes evaluation passes cheap.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<BoundEncoder, VitError> {
        let mut it = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), trainable));
        let mut next = || -> Result<Var, TensorError> { it.next().expect("param order") };
        let patch_w = next()?;
        let patch_b = next()?;
        let cls = next()?;
        let pos = next()?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for _ in 0..self.blocks.len() {
            let mut vars = [patch_w; 16];
            for v in vars.iter_mut() {
                *v = next()?;
            }
            blocks.push(BoundBlock { vars });
        }
        Ok(BoundEncoder {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            ln_f_g: next()?,
            ln_f_b: next()?,
            head_w: next()?,
            head_b: next()?,
        })
    }

    /// Patchify and project an image into a [`TokenSet`]. `keep` selects
    /// a subset of patch indices (row-major) before projection; the
    /// resulting set keeps the original grid positions of the survivors.
    pub fn embed(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundEncoder,
        image: &Image,
        keep: Option<&[usize]>,
    ) -> Result<TokenSet, VitError> {
        let (patches, grid) = patchify::<S>(image, self.cfg.patch_size)?;
        let (all_rows, cols) = (grid.0 * grid.1, grid.1);
        let (rows_tensor, positions): (Tensor<S>, Vec<(usize, usize)>) = match keep {
            None => (
                patches,
                (0..all_rows).map(|i| (i / cols, i % cols)).collect(),
            ),
            Some(kept) => {
                if let Some(&bad) = kept.iter().find(|&&i| i >= all_rows) {
                    return Err(VitError::BadPosition((bad / cols, bad % cols)));
                }
                let width = patches.cols();
                let mut data = Vec::with_capacity(kept.len() * width);
                for &i in kept {
                    data.extend_from_slice(patches.row(i));
                }
                (
                    Tensor::new(vec![kept.len(), width], data)?,
                    kept.iter().map(|&i| (i / cols, i % cols)).collect(),
                )
            }
        };
        let raw = tape.constant(rows_tensor)?;
        let proj = tape.matmul(raw, bound.patch_w)?;
        let proj = tape.add(proj, bound.patch_b)?;
        let tokens = tape.concat(&[bound.cls, proj], 0)?;
        let ts = TokenSet {
            tokens,
            grid_positions: positions,
            grid_shape: grid,
        };
        ts.check()?;
        Ok(ts)
    }

    /// Add each token's own position row: row 0 of the table for the
    /// class token, row `1 + r*cols + c` for a patch at `(r, c)`.
    /// Cropped sets receive exactly the rows of their surviving cells.
    pub fn add_position(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundEncoder,
        ts: TokenSet,
    ) -> Result<TokenSet, VitError> {
        if ts.grid_shape != self.pos.grid {
            return Err(VitError::GridMismatch {
                got: ts.grid_shape,
                want: self.pos.grid,
            });
        }
        let mut idx = Vec::with_capacity(1 + ts.grid_positions.len());
        idx.push(0);
        for &pos in &ts.grid_positions {
            idx.push(self.pos.row_index(pos)?);
        }
        let rows = tape.gather_rows(bound.pos, &idx)?;
        let tokens = tape.add(ts.tokens, rows)?;
        Ok(TokenSet { tokens, ..ts })
    }

    /// Run the encoder blocks and the head. Returns the l2-normalized
    /// embedding (`1×embed_out`) and, on request, the last layer's
    /// class-token attention map.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundEncoder,
        ts: &TokenSet,
        want_attention: bool,
    ) -> Result<(Var, Option<AttentionMap>), VitError> {
        let dh = self.cfg.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let eps = S::from_f64(1e-6);
        let mut x = ts.tokens;
        let mut last_attn: Vec<Var> = Vec::new();
        for (li, b) in bound.blocks.iter().enumerate() {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
                b.vars;
            let h = tape.layer_norm(x, ln1_g, ln1_b, eps)?;
            let q = tape.matmul(h, wq)?;
            let q = tape.add(q, bq)?;
            let k = tape.matmul(h, wk)?;
            let k = tape.add(k, bk)?;
            let v = tape.matmul(h, wv)?;
            let v = tape.add(v, bv)?;
            let mut ctx_heads = Vec::with_capacity(self.cfg.heads);
            let mut attn_heads = Vec::with_capacity(self.cfg.heads);
            for hd in 0..self.cfg.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax(scores, 1)?;
                attn_heads.push(attn);
                ctx_heads.push(tape.matmul(attn, vh)?);
            }
            let ctx = tape.concat(&ctx_heads, 1)?;
            let proj = tape.matmul(ctx, wo)?;
            let proj = tape.add(proj, bo)?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, ln2_g, ln2_b, eps)?;
            let m = tape.matmul(h2, w1)?;
            let m = tape.add(m, b1)?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, w2)?;
            let m = tape.add(m, b2)?;
            x = tape.add(x, m)?;

            if li + 1 == bound.blocks.len() {
                last_attn = attn_heads;
            }
        }
        let x = tape.layer_norm(x, bound.ln_f_g, bound.ln_f_b, eps)?;
        let cls_row = tape.gather_rows(x, &[0])?;
        let emb = tape.matmul(cls_row, bound.head_w)?;
        let emb = tape.add(emb, bound.head_b)?;
        let emb = tape.l2_normalize_rows(emb)?;

        let attn_map = if want_attention {
            Some(class_attention_map(tape, &last_attn, ts))
        } else {
            None
        };
        Ok((emb, attn_map))
    }

    /// Convenience: embed, position-encode and run in one call.
    pub fn forward_image(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundEncoder,
        image: &Image,
        keep: Option<&[usize]>,
        want_attention: bool,
    ) -> Result<(Var, Option<AttentionMap>), VitError> {
        let ts = self.embed(tape, bound, image, keep)?;
        let ts = self.add_position(tape, bound, ts)?;
        self.forward(tape, bound, &ts, want_attention)
    }

    /// Copy this encoder's arrays into a checkpoint under `prefix/`.
    pub fn store(
        &self,
        ck: &mut crate::checkpoint::Checkpoint,
        prefix: &str,
    ) -> Result<(), crate::checkpoint::CheckpointError> {
        ck.insert(
            &format!("{prefix}/grid"),
            Tensor::new(
                vec![2],
                vec![self.pos.grid.0 as f32, self.pos.grid.1 as f32],
            )
            .expect("grid tensor"),
        )?;
        for (name, p) in self.param_names().iter().zip(self.params()) {
            ck.insert(&format!("{prefix}/{name}"), p.cast())?;
        }
        Ok(())
    }

    /// Fill this encoder's arrays from a checkpoint written by `store`.
    pub fn restore(
        &mut self,
        ck: &crate::checkpoint::Checkpoint,
        prefix: &str,
    ) -> Result<(), VitError> {
        let names = self.param_names();
        for (name, p) in names.iter().zip(self.params_mut()) {
            let t = ck
                .get(&format!("{prefix}/{name}"))
                .ok_or_else(|| VitError::Config(format!("checkpoint missing {prefix}/{name}")))?;
            if t.shape() != p.shape() {
                return Err(VitError::Config(format!(
                    "checkpoint array {prefix}/{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t.cast();
        }
        Ok(())
    }
}

/// Head-mean of the class-token attention row, scattered onto the grid
/// cells the surviving tokens occupy; absent cells read zero.
fn class_attention_map<S: Scalar>(
    tape: &Tape<S>,
    attn_heads: &[Var],
    ts: &TokenSet,
) -> AttentionMap {
    let (rows, cols) = ts.grid_shape;
    let mut values = vec![0.0f64; rows * cols];
    let mut class_weight = 0.0f64;
    let heads = attn_heads.len().max(1);
    for &attn in attn_heads {
        let a = tape.value(attn);
        let row0 = a.row(0);
        class_weight += row0[0].as_f64();
        for (t, &(r, c)) in ts.grid_positions.iter().enumerate() {
            values[r * cols + c] += row0[1 + t].as_f64();
        }
    }
    for v in values.iter_mut() {
        *v /= heads as f64;
    }
    AttentionMap {
        grid_shape: ts.grid_shape,
        values,
        class_weight: class_weight / heads as f64,
    }
}

/// Truncated-normal init: normal samples redrawn until within two sigma.
pub fn trunc_normal<S: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, sigma: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * sigma {
                break S::from_f64(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            patch_size: 2,
            model_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_out: 4,
            pos_embed: PosEmbedKind::Learnable,
        }
    }

    fn checker_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    img.set(y, x, ch, rng.gen_range(0.0..1.0));
                }
            }
        }
        img
    }



    #[test]
    fn patchify_grid_counts() {
        let img = checker_image(256, 256, 3, 0);
        let (patches, grid) = patchify::<f32>(&img, 16).unwrap();
        assert_eq!(grid, (16, 16));
        assert_eq!(patches.shape(), &[256, 16 * 16 * 3]);

        let img = checker_image(320, 320, 3, 1);
        let (patches, grid) = patchify::<f32>(&img, 16).unwrap();
        assert_eq!(grid, (20, 20));
        assert_eq!(patches.rows(), 400);
    }

    #[test]
    fn patchify_single_patch_is_flattened_image() {
        let img = checker_image(16, 16, 3, 2);
        let (patches, grid) = patchify::<f32>(&img, 16).unwrap();
        assert_eq!(grid, (1, 1));
        assert_eq!(patches.rows(), 1);
        let mut expect = Vec::new();
        for y in 0..16 {
            for x in 0..16 {
                for ch in 0..3 {
                    expect.push(img.get(y, x, ch));
                }
            }
        }
        assert_eq!(patches.data(), expect.as_slice());
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = checker_image(30, 32, 1, 3);
        assert!(matches!(
            patchify::<f32>(&img, 16),
            Err(VitError::PatchDivide { .. })
        ));
    }

    #[test]
    fn add_position_full_grid_adds_whole_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg();
        let enc = ViTEncoder::<f64>::new(cfg, (2, 3), 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false).unwrap();
        let zeros = tape.constant(Tensor::zeros(vec![7, 8])).unwrap();
        let ts = TokenSet {
            tokens: zeros,
            grid_positions: (0..6).map(|i| (i / 3, i % 3)).collect(),
            grid_shape: (2, 3),
        };
        let ts = enc.add_position(&mut tape, &bound, ts).unwrap();
        assert_eq!(tape.value(ts.tokens).data(), enc.pos.table.data());
    }

    #[test]
    fn add_position_cropped_set_gets_its_own_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_cfg();
        let enc = ViTEncoder::<f64>::new(cfg, (5, 5), 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false).unwrap();
        let zeros = tape.constant(Tensor::zeros(vec![3, 8])).unwrap();
        let kept = [5usize, 17];
        let ts = TokenSet {
            tokens: zeros,
            grid_positions: kept.iter().map(|&i| (i / 5, i % 5)).collect(),
            grid_shape: (5, 5),
        };
        let ts = enc.add_position(&mut tape, &bound, ts).unwrap();
        let got = tape.value(ts.tokens);
        for (row_out, &patch) in kept.iter().enumerate() {
            assert_eq!(got.row(1 + row_out), enc.pos.table.row(1 + patch));
        }
    }

    #[test]
    fn fixed_sincos_matches_independent_derivation() {
        let pe = PositionEmbedding::<f64>::fixed_sincos((2, 2), 8).unwrap();
        // Independent re-derivation: quarter = 2, omega_i = 10000^-(i/2),
        // row layout [sin(c w), cos(c w), sin(r w), cos(r w)].
        for r in 0..2usize {
            for c in 0..2usize {
                let row = pe.table.row(1 + r * 2 + c);
                for i in 0..2usize {
                    let omega = 1.0 / 10000f64.powf(i as f64 / 2.0);
                    assert!((row[i] - (c as f64 * omega).sin()).abs() < 1e-12);
                    assert!((row[2 + i] - (c as f64 * omega).cos()).abs() < 1e-12);
                    assert!((row[4 + i] - (r as f64 * omega).sin()).abs() < 1e-12);
                    assert!((row[6 + i] - (r as f64 * omega).cos()).abs() < 1e-12);
                }
            }
        }
        assert!(pe.table.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolate_identity_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pe = PositionEmbedding::<f32>::learnable((3, 4), 8, &mut rng);
        let same = pe.interpolate((3, 4)).unwrap();
        let bits: Vec<u32> = pe.table.data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u32> = same.table.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, bits2);
    }

    #[test]
    fn interpolate_preserves_constants() {
        let mut pe = PositionEmbedding::<f64>::learnable((2, 2), 4, &mut ChaCha8Rng::seed_from_u64(7));
        for v in pe.table.data_mut().iter_mut().skip(4) {
            *v = 3.5;
        }
        let up = pe.interpolate((5, 7)).unwrap();
        assert!(up.table.data().iter().skip(4).all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn interpolate_2x2_to_3x3_center_is_corner_mean() {
        let mut pe =
            PositionEmbedding::<f64>::learnable((2, 2), 4, &mut ChaCha8Rng::seed_from_u64(8));
        let up = pe.interpolate((3, 3)).unwrap();
        let dim = 4;
        for d in 0..dim {
            let corners: f64 = (1..5).map(|r| pe.table.row(r)[d]).sum::<f64>() / 4.0;
            let center = up.table.row(1 + 1 * 3 + 1)[d];
            assert!((center - corners).abs() < 1e-12);
        }
        // fixed tables cannot be interpolated
        pe.kind = PosEmbedKind::FixedSincos2d;
        assert!(matches!(pe.interpolate((3, 3)), Err(VitError::FixedInterp)));
    }

    #[test]
    fn embedding_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = ViTEncoder::<f64>::new(tiny_cfg(), (2, 4), 1, &mut rng).unwrap();
        let img = checker_image(4, 8, 1, 10);
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false).unwrap();
        let (emb, _) = enc
            .forward_image(&mut tape, &bound, &img, None, false)
            .unwrap();
        let norm: f64 = tape.value(emb).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_map_sums_with_class_weight_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = ViTEncoder::<f64>::new(tiny_cfg(), (3, 3), 2, &mut rng).unwrap();
        let img = checker_image(6, 6, 2, 12);
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false).unwrap();
        let (_, attn) = enc
            .forward_image(&mut tape, &bound, &img, None, true)
            .unwrap();
        let attn = attn.unwrap();
        assert_eq!(attn.values.len(), 9);
        assert!(attn.values.iter().all(|&v| v >= 0.0));
        let total: f64 = attn.values.iter().sum::<f64>() + attn.class_weight;
        assert!((total - 1.0).abs() < 1e-5, "total {total}");
    }

    #[test]
    fn two_token_attention_matches_manual_computation() {
        // One patch + class token, one layer: the map's single value must
        // equal the softmax weight computed by hand from q and k.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = ViTConfig {
            layers: 1,
            ..tiny_cfg()
        };
        let enc = ViTEncoder::<f64>::new(cfg.clone(), (1, 1), 1, &mut rng).unwrap();
        let img = checker_image(2, 2, 1, 14);
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false).unwrap();
        let ts = enc.embed(&mut tape, &bound, &img, None).unwrap();
        let ts = enc.add_position(&mut tape, &bound, ts).unwrap();
        let tokens = tape.value(ts.tokens).clone();
        let (_, attn) = enc.forward(&mut tape, &bound, &ts, true).unwrap();
        let attn = attn.unwrap();

        // Manual: pre-norm, project, per-head scores for row 0.
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let b = &enc.blocks[0];
        let mut normed = vec![0.0; 2 * d];
        for i in 0..2 {
            let row = tokens.row(i);
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-6).sqrt();
            for j in 0..d {
                normed[i * d + j] =
                    (row[j] - mean) * inv * b.ln1_g.data()[j] + b.ln1_b.data()[j];
            }
        }
        let project = |w: &Tensor<f64>, bias: &Tensor<f64>| -> Vec<f64> {
            let mut out = vec![0.0; 2 * d];
            for i in 0..2 {
                for j in 0..d {
                    let mut s = bias.data()[j];
                    for p in 0..d {
                        s += normed[i * d + p] * w.data()[p * d + j];
                    }
                    out[i * d + j] = s;
                }
            }
            out
        };
        let q = project(&b.wq, &b.bq);
        let k = project(&b.wk, &b.bk);
        let mut mean_w = 0.0;
        for h in 0..cfg.heads {
            let dot = |a: &[f64], bvec: &[f64]| -> f64 {
                (0..dh).map(|j| a[h * dh + j] * bvec[h * dh + j]).sum()
            };
            let s00 = dot(&q[0..d], &k[0..d]) / (dh as f64).sqrt();
            let s01 = dot(&q[0..d], &k[d..2 * d]) / (dh as f64).sqrt();
            let m = s00.max(s01);
            let e0 = (s00 - m).exp();
            let e1 = (s01 - m).exp();
            mean_w += e1 / (e0 + e1);
        }
        mean_w /= cfg.heads as f64;
        assert_eq!(attn.values.len(), 1);
        assert!(
            (attn.values[0] - mean_w).abs() < 1e-10,
            "{} vs {}",
            attn.values[0],
            mean_w
        );
    }

    #[test]
    fn permuting_cropped_tokens_leaves_embedding_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let enc = ViTEncoder::<f64>::new(tiny_cfg(), (4, 4), 1, &mut rng).unwrap();
        let img = checker_image(8, 8, 1, 16);
        let kept: Vec<usize> = vec![1, 3, 6, 10, 13];
        let mut permuted = kept.clone();
        permuted.swap(0, 3);
        permuted.swap(1, 4);

        let embed_with = |order: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = enc.bind(&mut tape, false).unwrap();
            let (emb, _) = enc
                .forward_image(&mut tape, &bound, &img, Some(order), false)
                .unwrap();
            tape.value(emb).data().to_vec()
        };
        let a = embed_with(&kept);
        let b = embed_with(&permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn separate_encoders_share_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut street = ViTEncoder::<f32>::new(tiny_cfg(), (2, 2), 1, &mut rng).unwrap();
        let aerial = ViTEncoder::<f32>::new(tiny_cfg(), (2, 2), 1, &mut rng).unwrap();
        let before = aerial.params()[0].clone();
        street.params_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(aerial.params()[0], &before);
    }

    #[test]
    fn store_restore_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let enc = ViTEncoder::<f32>::new(tiny_cfg(), (2, 3), 1, &mut rng).unwrap();
        let mut ck = crate::checkpoint::Checkpoint::new();
        enc.store(&mut ck, "street").unwrap();
        let mut enc2 = ViTEncoder::<f32>::new(tiny_cfg(), (2, 3), 1, &mut rng).unwrap();
        enc2.restore(&ck, "street").unwrap();
        for (a, b) in enc.params().iter().zip(enc2.params()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        // Small but full encoder: embedding summed against fixed weights,
        // checked against the central-difference oracle at 64-bit.
        let cfg = ViTConfig {
            patch_size: 2,
            model_dim: 4,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            embed_out: 3,
            pos_embed: PosEmbedKind::Learnable,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let enc = ViTEncoder::<f64>::new(cfg.clone(), (2, 2), 1, &mut rng).unwrap();
        let img = checker_image(4, 4, 1, 20);
        let w_loss: Vec<f64> = (0..3).map(|i| 0.3 + 0.2 * i as f64).collect();

        let loss_for = |enc: &ViTEncoder<f64>| -> f64 {
            let mut tape = Tape::new();
            let bound = enc.bind(&mut tape, true).unwrap();
            let (emb, _) = enc
                .forward_image(&mut tape, &bound, &img, None, false)
                .unwrap();
            let w = tape
                .constant(Tensor::new(vec![1, 3], w_loss.clone()).unwrap())
                .unwrap();
            let p = tape.mul(emb, w).unwrap();
            let loss = tape.sum_all(p).unwrap();
            tape.value(loss).data()[0]
        };

        // analytic
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, true).unwrap();
        let (emb, _) = enc
            .forward_image(&mut tape, &bound, &img, None, false)
            .unwrap();
        let w = tape
            .constant(Tensor::new(vec![1, 3], w_loss.clone()).unwrap())
            .unwrap();
        let p = tape.mul(emb, w).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        let vars = bound.vars();

        // numeric, one parameter tensor at a time
        let params: Vec<Tensor<f64>> = enc.params().into_iter().cloned().collect();
        let names = enc.param_names();
        for (pi, name) in names.iter().enumerate() {
            let f = |ps: &[Tensor<f64>]| -> f64 {
                let mut e2 = ViTEncoder::<f64>::new(cfg.clone(), (2, 2), 1, &mut ChaCha8Rng::seed_from_u64(19))
                    .unwrap();
                for (slot, val) in e2.params_mut().into_iter().zip(ps) {
                    *slot = val.clone();
                }
                loss_for(&e2)
            };
            let mut probe = params.clone();
            let num = gradcheck::central_diff_single(&f, &mut probe, pi, 1e-5);
            let ana = tape.grad(vars[pi]).unwrap();
            let err = gradcheck::max_rel_err(&ana, &num);
            assert!(err < 1e-5, "param {name}: max rel err {err}");
        }
    }
}
