//! Local–global aggregation: overlapping tiles encoded independently,
//! merged by per-cell averaging and averaged with the full-image features.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::LgaConfig;
use crate::error::{arg_err, config_err, shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, ImageTensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub overlap: usize,
    pub stride: usize,
    /// `(row, col)` pixel origins, row-major.
    pub origins: Vec<(usize, usize)>,
}

/// Origins `0, s, 2s, …` along one axis, the last clamped to `size − window`.
pub fn axis_origins(size: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        let clamped = o.min(size - window);
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if o + window >= size {
            break;
        }
        o += stride;
    }
    out
}

pub fn plan_tiles_for(height: usize, width: usize, window: usize, overlap: usize) -> Result<TilePlan> {
    if overlap >= window {
        return Err(config_err!("overlap ({overlap}) must be smaller than window ({window})"));
    }
    if window == 0 || window > height || window > width {
        return Err(config_err!("window ({window}) must fit the {height}x{width} image"));
    }
    let stride = window - overlap;
    let rows = axis_origins(height, window, stride);
    let cols = axis_origins(width, window, stride);
    let origins = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TilePlan { height, width, window, overlap, stride, origins })
}

pub fn plan_tiles(cfg: &LgaConfig) -> Result<TilePlan> {
    cfg.validate()?;
    plan_tiles_for(cfg.resize, cfg.resize, cfg.window, cfg.overlap)
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of tiles covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for &(r, c) in &self.origins {
            for y in r..r + self.window {
                for x in c..c + self.window {
                    counts[y * self.width + x] += 1;
                }
            }
        }
        counts
    }
}

/// Averages tile features into one map on the full grid. Each cell is the
/// mean of every tile covering it, accumulated in tile order as a running
/// mean (equal to sum/count, and exact when the contributions agree).
pub fn merge_tiles(tiles: &[((usize, usize), FeatureMap)], plan: &TilePlan, patch: usize) -> Result<FeatureMap> {
    if tiles.is_empty() {
        return Err(arg_err!("no tiles to merge"));
    }
    if plan.height % patch != 0 || plan.width % patch != 0 {
        return Err(Error::Alignment(alloc::format!(
            "image {}x{} is not a multiple of the patch size {patch}",
            plan.height,
            plan.width
        )));
    }
    let (gh, gw) = (plan.height / patch, plan.width / patch);
    let c = tiles[0].1.channels();
    let mut mean = vec![0.0; c * gh * gw];
    let mut count = vec![0u32; gh * gw];
    for ((r, col), feat) in tiles {
        if r % patch != 0 || col % patch != 0 {
            return Err(Error::Alignment(alloc::format!(
                "tile origin ({r}, {col}) is not a multiple of the patch size {patch}"
            )));
        }
        let (th, tw) = (feat.height(), feat.width());
        if feat.channels() != c || r / patch + th > gh || col / patch + tw > gw {
            return Err(shape_err!(
                "tile {}x{}x{} at ({r}, {col}) does not fit the {c}x{gh}x{gw} grid",
                feat.channels(),
                th,
                tw
            ));
        }
        let d = feat.tensor().data();
        for y in 0..th {
            for x in 0..tw {
                let cell = (r / patch + y) * gw + col / patch + x;
                count[cell] += 1;
                let k = count[cell] as f64;
                for ch in 0..c {
                    let m = &mut mean[ch * gh * gw + cell];
                    *m += (d[(ch * th + y) * tw + x] - *m) / k;
                }
            }
        }
    }
    if let Some(cell) = count.iter().position(|&k| k == 0) {
        return Err(arg_err!("cell ({}, {}) is covered by no tile", cell / gw, cell % gw));
    }
    FeatureMap::new(Tensor::from_parts(vec![c, gh, gw], mean))
}

/// Encodes every tile of `plan` and merges the results.
pub fn encode_tiles(
    image: &ImageTensor,
    plan: &TilePlan,
    patch: usize,
    mut encode: impl FnMut(&ImageTensor) -> Result<FeatureMap>,
) -> Result<FeatureMap> {
    let mut tiles = Vec::with_capacity(plan.len());
    for &(r, c) in &plan.origins {
        let tile = image.crop(r, c, plan.window, plan.window)?;
        tiles.push(((r, c), encode(&tile)?));
    }
    merge_tiles(&tiles, plan, patch)
}

/// Elementwise `(a + b) / 2`.
pub fn average(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if !a.same_shape(b) {
        return Err(shape_err!("cannot average {:?} with {:?}", a.tensor().shape(), b.tensor().shape()));
    }
    let d = a.tensor().data().iter().zip(b.tensor().data()).map(|(x, y)| (x + y) * 0.5).collect();
    FeatureMap::new(Tensor::from_parts(a.tensor().shape().to_vec(), d))
}

/// Aggregated dense features of an image already resized to the target:
/// `½(merged tiles + global)` with `lga_vlm` on, the global features alone
/// otherwise.
pub fn lga_features(
    image: &ImageTensor,
    cfg: &LgaConfig,
    patch: usize,
    mut encode: impl FnMut(&ImageTensor) -> Result<FeatureMap>,
) -> Result<FeatureMap> {
    let global = encode(image)?;
    if !cfg.lga_vlm {
        return Ok(global);
    }
    let plan = plan_tiles_for(image.height(), image.width(), cfg.window, cfg.overlap)?;
    let merged = encode_tiles(image, &plan, patch, encode)?;
    average(&merged, &global)
}
