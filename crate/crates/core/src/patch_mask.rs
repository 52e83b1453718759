//! Patch tokens and mask plans.
//!
//! Images are `[H, W, 3]` tensors, channel-last. A patch row is the raster
//! scan of one `p x p` tile, channel fastest. Mask plans split the token
//! index set into visible and masked parts; plans used with convolution
//! stages additionally carry the token mask upsampled to each stage grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHANNELS: usize = 3;

/// Epsilon of the per-patch target normalization.
pub const PATCH_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(image_height: usize, image_width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !image_height.is_multiple_of(patch) || !image_width.is_multiple_of(patch) {
            return Err(Error::shape(
                "patchify",
                format!("{image_height}x{image_width} image is not divisible into {patch}x{patch} patches"),
            ));
        }
        Ok(Self {
            image_height,
            image_width,
            patch,
        })
    }

    pub fn square(image_size: usize, patch: usize) -> Result<Self> {
        Self::new(image_size, image_size, patch)
    }

    pub fn rows(&self) -> usize {
        self.image_height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.image_width / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

fn image_dims<T: Element>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w, CHANNELS] => Ok((h, w)),
        s => Err(Error::shape("patchify", format!("expected [H, W, 3], got {s:?}"))),
    }
}

/// `[H, W, 3] -> [n, p*p*3]`, row `i` is the tile at grid cell `(i / w, i % w)`.
pub fn patchify<T: Element>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (h, w) = image_dims(image)?;
    let grid = PatchGrid::new(h, w, patch)?;
    let mut out = Vec::with_capacity(image.numel());
    let row_len = patch * CHANNELS;
    for gy in 0..grid.rows() {
        for gx in 0..grid.cols() {
            for y in 0..patch {
                let start = ((gy * patch + y) * w + gx * patch) * CHANNELS;
                out.extend_from_slice(&image.data()[start..start + row_len]);
            }
        }
    }
    Tensor::new(vec![grid.tokens(), grid.patch_dim()], out)
}

pub fn unpatchify<T: Element>(patches: &Tensor<T>, grid: PatchGrid) -> Result<Tensor<T>> {
    if patches.shape() != [grid.tokens(), grid.patch_dim()] {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} does not match grid {grid:?}", patches.shape()),
        ));
    }
    let (p, w) = (grid.patch, grid.image_width);
    let row_len = p * CHANNELS;
    let mut out = vec![T::zero(); patches.numel()];
    for (i, tile) in patches.data().chunks(grid.patch_dim()).enumerate() {
        let (gy, gx) = (i / grid.cols(), i % grid.cols());
        for y in 0..p {
            let start = ((gy * p + y) * w + gx * p) * CHANNELS;
            out[start..start + row_len].copy_from_slice(&tile[y * row_len..(y + 1) * row_len]);
        }
    }
    Tensor::new(vec![grid.image_height, w, CHANNELS], out)
}

/// Boolean mask over a 2-D grid, `true` = masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMask {
    pub rows: usize,
    pub cols: usize,
    pub masked: Vec<bool>,
}

impl GridMask {
    pub fn from_masked(rows: usize, cols: usize, masked_cells: &[usize]) -> Self {
        let mut masked = vec![false; rows * cols];
        for &i in masked_cells {
            masked[i] = true;
        }
        Self { rows, cols, masked }
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.masked[r * self.cols + c]
    }

    /// Nearest-neighbour upsample: each cell becomes a `factor x factor` block.
    pub fn upsample(&self, factor: usize) -> GridMask {
        let (rows, cols) = (self.rows * factor, self.cols * factor);
        let masked = (0..rows * cols)
            .map(|i| self.is_masked(i / cols / factor, i % cols / factor))
            .collect();
        GridMask { rows, cols, masked }
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub tokens: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub visible_ratio: f64,
    /// Token grid `(rows, cols)` when the plan is spatial.
    pub grid: Option<(usize, usize)>,
    /// Token mask upsampled to each convolution stage, finest first.
    pub stage_masks: Vec<GridMask>,
}

/// `round_half_up(n * ratio)`, rejecting splits with an empty side.
pub fn visible_count(n: usize, visible_ratio: f64) -> Result<usize> {
    if !(visible_ratio > 0.0 && visible_ratio < 1.0) {
        return Err(Error::Mask(format!("visible ratio {visible_ratio} outside (0, 1)")));
    }
    let lv = (n as f64 * visible_ratio + 0.5).floor() as usize;
    if lv == 0 || lv >= n {
        return Err(Error::Mask(format!(
            "ratio {visible_ratio} over {n} tokens leaves an empty visible or masked set"
        )));
    }
    Ok(lv)
}

/// Stage grid scale factors, finest stage first: stage `i` is
/// `product(factors[i..])` times the token grid.
fn stage_scales(stage_factors: &[usize]) -> Result<Vec<usize>> {
    if stage_factors.contains(&0) {
        return Err(Error::Mask(format!("invalid upsampling factors {stage_factors:?}")));
    }
    Ok((0..stage_factors.len())
        .map(|i| stage_factors[i..].iter().product())
        .collect())
}

impl MaskPlan {
    fn from_visible(tokens: usize, mut visible: Vec<usize>, visible_ratio: f64) -> Self {
        visible.sort_unstable();
        let mut is_visible = vec![false; tokens];
        for &v in &visible {
            is_visible[v] = true;
        }
        let masked = (0..tokens).filter(|&i| !is_visible[i]).collect();
        Self {
            tokens,
            visible,
            masked,
            visible_ratio,
            grid: None,
            stage_masks: Vec::new(),
        }
    }

    /// Every token visible. Used for probing and visualisation, where the
    /// encoder sees the whole image.
    pub fn full(rows: usize, cols: usize, stage_factors: &[usize]) -> Result<Self> {
        let tokens = rows * cols;
        Self {
            tokens,
            visible: (0..tokens).collect(),
            masked: Vec::new(),
            visible_ratio: 1.0,
            grid: None,
            stage_masks: Vec::new(),
        }
        .with_grid(rows, cols, stage_factors)
    }

    /// Attach the token grid and derive one upsampled mask per stage.
    pub fn with_grid(mut self, rows: usize, cols: usize, stage_factors: &[usize]) -> Result<Self> {
        if rows * cols != self.tokens {
            return Err(Error::Mask(format!(
                "{rows}x{cols} grid does not hold {} tokens",
                self.tokens
            )));
        }
        self.grid = Some((rows, cols));
        let token_mask = self.token_mask().expect("grid just set");
        self.stage_masks = stage_scales(stage_factors)?
            .into_iter()
            .map(|s| token_mask.upsample(s))
            .collect();
        Ok(self)
    }

    pub fn token_mask(&self) -> Option<GridMask> {
        let (rows, cols) = self.grid?;
        Some(GridMask::from_masked(rows, cols, &self.masked))
    }

    pub fn visible_len(&self) -> usize {
        self.visible.len()
    }

    pub fn masked_len(&self) -> usize {
        self.masked.len()
    }

    /// Check the partition and, for spatial plans, stage-mask consistency.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u8; self.tokens];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= self.tokens {
                return Err(Error::Mask(format!("index {i} outside {} tokens", self.tokens)));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Mask("visible and masked sets do not partition the tokens".into()));
        }
        if !self.visible.windows(2).all(|w| w[0] < w[1]) || !self.masked.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Mask("index lists are not sorted".into()));
        }
        if let Some(mask) = self.token_mask() {
            for stage in &self.stage_masks {
                let factor = stage.rows / mask.rows;
                if factor == 0
                    || stage.rows != mask.rows * factor
                    || stage.cols != mask.cols * factor
                    || *stage != mask.upsample(factor)
                {
                    return Err(Error::Mask(format!(
                        "{}x{} stage mask is not an upsample of the token mask",
                        stage.rows, stage.cols
                    )));
                }
            }
        } else if !self.stage_masks.is_empty() {
            return Err(Error::Mask("stage masks without a token grid".into()));
        }
        Ok(())
    }
}

/// Uniformly random visible set of size `round(n * ratio)`.
pub fn random_plan(n: usize, visible_ratio: f64, seed: u64) -> Result<MaskPlan> {
    let lv = visible_count(n, visible_ratio)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(lv);
    Ok(MaskPlan::from_visible(n, order, visible_ratio))
}

/// Random mask drawn on the coarse token grid, then nearest-neighbour
/// upsampled through `stage_factors` (finest stage first) so every stage
/// masks the same image regions.
pub fn blockwise_plan(
    coarse_grid: (usize, usize),
    visible_ratio: f64,
    stage_factors: &[usize],
    seed: u64,
) -> Result<MaskPlan> {
    let (rows, cols) = coarse_grid;
    random_plan(rows * cols, visible_ratio, seed)?.with_grid(rows, cols, stage_factors)
}

/// Visible set = the `round(n * ratio)` most salient tokens, ties broken by
/// ascending index. `_seed` is accepted so every generator has one signature.
pub fn focused_plan(saliency: &[f64], visible_ratio: f64, _seed: u64) -> Result<MaskPlan> {
    if let Some(i) = saliency.iter().position(|s| s.is_nan()) {
        return Err(Error::Mask(format!("saliency is NaN at token {i}")));
    }
    let n = saliency.len();
    let lv = visible_count(n, visible_ratio)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    order.truncate(lv);
    Ok(MaskPlan::from_visible(n, order, visible_ratio))
}

/// Focused selection on the token grid combined with block-wise stage masks.
/// Saliency is given per token; the token grid is the coarsest level, so the
/// selection itself needs no pooling.
pub fn focused_blockwise_plan(
    saliency: &[f64],
    grid: (usize, usize),
    visible_ratio: f64,
    stage_factors: &[usize],
) -> Result<MaskPlan> {
    focused_plan(saliency, visible_ratio, 0)?.with_grid(grid.0, grid.1, stage_factors)
}

/// Visible and masked pixel rows of one image under a plan.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    /// `I_v`: `l_v x p*p*3`, rows in `plan.visible` order.
    pub visible: Tensor<T>,
    /// `I_m`: `l_m x p*p*3`, rows in `plan.masked` order; `None` for a full plan.
    pub masked: Option<Tensor<T>>,
    pub plan: MaskPlan,
    /// Whether `masked` rows were normalised per patch.
    pub normalized_targets: bool,
}

impl<T: Element> PatchBatch<T> {
    pub fn new(image: &Tensor<T>, patch: usize, plan: MaskPlan, per_patch_norm: bool) -> Result<Self> {
        let patches = patchify(image, patch)?;
        if patches.shape()[0] != plan.tokens {
            return Err(Error::Mask(format!(
                "plan covers {} tokens but the image has {}",
                plan.tokens,
                patches.shape()[0]
            )));
        }
        let visible = patches.gather_rows(&plan.visible)?;
        let masked = if plan.masked.is_empty() {
            None
        } else {
            let mut m = patches.gather_rows(&plan.masked)?;
            if per_patch_norm {
                normalize_rows(&mut m);
            }
            Some(m)
        };
        Ok(Self {
            visible,
            masked,
            plan,
            normalized_targets: per_patch_norm,
        })
    }
}

/// `(x - mean) / sqrt(var + eps)` per row.
pub fn normalize_rows<T: Element>(t: &mut Tensor<T>) {
    let (_, cols) = t.rows_cols();
    let inv = T::one() / T::of(cols as f64);
    let eps = T::of(PATCH_NORM_EPS);
    for row in t.data_mut().chunks_mut(cols) {
        let mean = row.iter().copied().sum::<T>() * inv;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
        let denom = (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
}
