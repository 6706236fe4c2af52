//! Attention-guided non-uniform cropping: keep the β highest-scoring
//! patches, optionally after scaling the grid resolution by √γ, plus the
//! analytic multiply-add model that prices the savings.

use crate::tensor::{Scalar, Tape};
use crate::vit::{AttentionMap, TokenSet, ViTConfig, VitError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CropError {
    #[error("beta must be in (0, 1], got {0}")]
    BadBeta(f64),
    #[error("gamma must be >= 1, got {0}")]
    BadGamma(f64),
    #[error("beta*gamma = {0} exceeds the token budget {1}")]
    BudgetExceeded(f64, f64),
    #[error("patch size {p} does not divide side {side}")]
    SideNotDivisible { side: usize, p: usize },
    #[error("keep count is zero for beta {beta} on a {rows}x{cols} grid")]
    NothingKept { beta: f64, rows: usize, cols: usize },
    #[error("mask grid {mask:?} does not match token grid {tokens:?}")]
    GridMismatch {
        mask: (usize, usize),
        tokens: (usize, usize),
    },
    #[error("mask keeps patch {0} but the token set does not contain it")]
    MissingToken(usize),
    #[error(transparent)]
    Vit(#[from] VitError),
}

/// Keep fraction β and area scale γ. βγ may not exceed the budget, so a
/// stage-2 model never runs more tokens than stage-1 granted.
#[derive(Clone, Copy, Debug)]
pub struct CropPolicy {
    pub beta: f64,
    pub gamma: f64,
    pub patch_size: usize,
}

pub const DEFAULT_BUDGET: f64 = 1.0 + 1e-9;

impl CropPolicy {
    pub fn new(beta: f64, gamma: f64, patch_size: usize) -> Result<Self, CropError> {
        let p = Self {
            beta,
            gamma,
            patch_size,
        };
        p.validate(DEFAULT_BUDGET)?;
        Ok(p)
    }

    pub fn validate(&self, budget: f64) -> Result<(), CropError> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(CropError::BadBeta(self.beta));
        }
        if self.gamma < 1.0 {
            return Err(CropError::BadGamma(self.gamma));
        }
        if self.beta * self.gamma > budget {
            return Err(CropError::BudgetExceeded(self.beta * self.gamma, budget));
        }
        Ok(())
    }
}

/// Row-major indices of the surviving patches on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask {
    pub grid_shape: (usize, usize),
    pub kept: Vec<usize>,
}

/// Scale a square image side by √γ, rounding up to the next multiple of
/// the patch size, and report the resulting grid.
pub fn scaled_grid(
    side_px: usize,
    gamma: f64,
    p: usize,
) -> Result<(usize, (usize, usize)), CropError> {
    if gamma < 1.0 {
        return Err(CropError::BadGamma(gamma));
    }
    if p == 0 || side_px % p != 0 {
        return Err(CropError::SideNotDivisible { side: side_px, p });
    }
    let scaled = (side_px as f64 * gamma.sqrt()).round() as usize;
    let new_side = scaled.div_ceil(p) * p;
    Ok((new_side, (new_side / p, new_side / p)))
}

/// Bilinearly resample the score field onto a new grid (corner-aligned);
/// nonnegativity is preserved and the same grid returns identical
/// values.
pub fn resize_attention(map: &AttentionMap, new_grid: (usize, usize)) -> AttentionMap {
    let (r0, c0) = map.grid_shape;
    let (r1, c1) = new_grid;
    let mut values = vec![0.0f64; r1 * c1];
    for i in 0..r1 {
        let sy = axis_coord(i, r1, r0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(r0 - 1);
        let fy = sy - y0 as f64;
        for j in 0..c1 {
            let sx = axis_coord(j, c1, c0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(c0 - 1);
            let fx = sx - x0 as f64;
            let v00 = map.values[y0 * c0 + x0];
            let v01 = map.values[y0 * c0 + x1];
            let v10 = map.values[y1 * c0 + x0];
            let v11 = map.values[y1 * c0 + x1];
            let top = v00 * (1.0 - fx) + v01 * fx;
            let bot = v10 * (1.0 - fx) + v11 * fx;
            values[i * c1 + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    AttentionMap {
        grid_shape: new_grid,
        values,
        class_weight: map.class_weight,
    }
}

fn axis_coord(i: usize, n1: usize, n0: usize) -> f64 {
    if n1 == 1 {
        0.0
    } else {
        i as f64 * (n0 - 1) as f64 / (n1 - 1) as f64
    }
}

/// Keep the `floor(β·N)` highest-scoring patches. Ties break toward the
/// lower row-major index; the kept list is sorted row-major.
pub fn select_tokens(map: &AttentionMap, beta: f64) -> Result<TokenMask, CropError> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(CropError::BadBeta(beta));
    }
    let (rows, cols) = map.grid_shape;
    let n = rows * cols;
    let keep_count = (beta * n as f64).floor() as usize;
    if keep_count == 0 {
        return Err(CropError::NothingKept { beta, rows, cols });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        map.values[b]
            .partial_cmp(&map.values[a])
            .expect("finite attention scores")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..keep_count].to_vec();
    kept.sort_unstable();
    Ok(TokenMask {
        grid_shape: map.grid_shape,
        kept,
    })
}

/// Gather the surviving patch tokens (plus the class token) out of a
/// token set, keeping their original grid positions.
pub fn crop_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    ts: &TokenSet,
    mask: &TokenMask,
) -> Result<TokenSet, CropError> {
    if mask.grid_shape != ts.grid_shape {
        return Err(CropError::GridMismatch {
            mask: mask.grid_shape,
            tokens: ts.grid_shape,
        });
    }
    let cols = ts.grid_shape.1;
    let mut rows = Vec::with_capacity(mask.kept.len() + 1);
    let mut positions = Vec::with_capacity(mask.kept.len());
    rows.push(0);
    for &patch in &mask.kept {
        let pos = (patch / cols, patch % cols);
        let at = ts
            .grid_positions
            .iter()
            .position(|&p| p == pos)
            .ok_or(CropError::MissingToken(patch))?;
        rows.push(1 + at);
        positions.push(pos);
    }
    let tokens = tape.gather_rows(ts.tokens, &rows).map_err(VitError::from)?;
    Ok(TokenSet {
        tokens,
        grid_positions: positions,
        grid_shape: ts.grid_shape,
    })
}

/// Exact multiply-add counts for one encoder forward pass over
/// `n_tokens` tokens (class token included).
#[derive(Clone, Debug)]
pub struct FlopReport {
    pub n_tokens: usize,
    pub layers: usize,
    /// per layer: Q, K, V and output projections, 4·n·D²
    pub projection_per_layer: u64,
    /// per layer: QKᵀ scores over all heads, n²·D
    pub attention_scores_per_layer: u64,
    /// per layer: attention-weighted value sum, n²·D
    pub attention_apply_per_layer: u64,
    /// per layer: both MLP projections, 2·n·ratio·D²
    pub mlp_per_layer: u64,
    /// once: patch projection of the n-1 patch tokens
    pub patch_embed: u64,
    /// once: class-token head projection
    pub head: u64,
}

impl FlopReport {
    pub fn per_layer(&self) -> u64 {
        self.projection_per_layer
            + self.attention_scores_per_layer
            + self.attention_apply_per_layer
            + self.mlp_per_layer
    }

    pub fn total(&self) -> u64 {
        self.per_layer() * self.layers as u64 + self.patch_embed + self.head
    }

    /// CSV breakdown, one row per term.
    pub fn csv(&self) -> String {
        let mut out = String::from("term,per_layer,total\n");
        let l = self.layers as u64;
        out.push_str(&format!(
            "projection,{},{}\n",
            self.projection_per_layer,
            self.projection_per_layer * l
        ));
        out.push_str(&format!(
            "attention_scores,{},{}\n",
            self.attention_scores_per_layer,
            self.attention_scores_per_layer * l
        ));
        out.push_str(&format!(
            "attention_apply,{},{}\n",
            self.attention_apply_per_layer,
            self.attention_apply_per_layer * l
        ));
        out.push_str(&format!(
            "mlp,{},{}\n",
            self.mlp_per_layer,
            self.mlp_per_layer * l
        ));
        out.push_str(&format!("patch_embed,,{}\n", self.patch_embed));
        out.push_str(&format!("head,,{}\n", self.head));
        out.push_str(&format!("total,{},{}\n", self.per_layer(), self.total()));
        out
    }
}

/// Price an encoder forward pass in multiply-adds. `n_tokens` counts the
/// class token; the attention terms scale as n², everything else as n.
pub fn flops(cfg: &ViTConfig, n_tokens: usize, channels: usize) -> FlopReport {
    let n = n_tokens as u64;
    let d = cfg.model_dim as u64;
    let r = cfg.mlp_ratio as u64;
    let p = cfg.patch_size as u64;
    FlopReport {
        n_tokens,
        layers: cfg.layers,
        projection_per_layer: 4 * n * d * d,
        attention_scores_per_layer: n * n * d,
        attention_apply_per_layer: n * n * d,
        mlp_per_layer: 2 * n * r * d * d,
        patch_embed: n.saturating_sub(1) * p * p * channels as u64 * d,
        head: d * cfg.embed_out as u64,
    }
}
