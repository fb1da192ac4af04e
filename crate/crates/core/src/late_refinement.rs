//! Late refinement of the correlation volume: per-class window and shifted
//! window attention guided by prior features, then attention across the
//! class axis guided by the mean text embeddings.

use alloc::vec::Vec;

use crate::autograd::Var;
use crate::config::LateConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Builder, Forward, Mlp, ParamStore, PathEvent, TransformerBlock, WindowPartition};
use crate::types::{CorrelationVolume, FeatureMap, GuidancePyramid, TextEmbeddingSet};

#[derive(Clone, Debug)]
pub struct SpatialBlock {
    pub guide: Mlp,
    pub window_block: TransformerBlock,
    pub shifted_block: TransformerBlock,
    pub window: usize,
}

impl SpatialBlock {
    pub fn new(b: &mut Builder, cfg: &LateConfig, corr: usize, guide_dim: usize) -> Self {
        let mut s = b.scope("spatial");
        SpatialBlock {
            guide: Mlp::new(&mut s, "guide", guide_dim, corr, corr),
            window_block: TransformerBlock::new(&mut s, "wmsa", corr, cfg.heads, cfg.mlp_ratio),
            shifted_block: TransformerBlock::new(&mut s, "swmsa", corr, cfg.heads, cfg.mlp_ratio),
            window: cfg.window,
        }
    }

    pub fn partitions(&self, h: usize, w: usize) -> (WindowPartition, WindowPartition) {
        (WindowPartition::grid(h, w, self.window, 0), WindowPartition::grid(h, w, self.window, self.window / 2))
    }

    /// Only the unshifted window block, for partition-level checks.
    pub fn forward_window_only(&self, f: &mut Forward, x: Var) -> Var {
        let s = f.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let t = f.reshape(x, &[n, h * w, c]);
        let (part, _) = self.partitions(h, w);
        let t = self.window_block.forward(f, t, &part);
        f.reshape(t, &[n, h, w, c])
    }

    /// `x [N, h, w, C]`, `guidance [1, h, w, C_spe]` → `[N, h, w, C]`.
    pub fn forward(&self, f: &mut Forward, x: Var, guidance: Var) -> Var {
        let s = f.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let g = self.guide.forward(f, guidance);
        let g = f.reshape(g, &[1, h * w, c]);
        let t = f.reshape(x, &[n, h * w, c]);
        let t = f.add(t, g);
        let (part, shifted) = self.partitions(h, w);
        let t = self.window_block.forward(f, t, &part);
        let t = self.shifted_block.forward(f, t, &shifted);
        f.record(PathEvent::SpatialRefinement);
        f.reshape(t, &[n, h, w, c])
    }
}

#[derive(Clone, Debug)]
pub struct ClassBlock {
    pub guide: Mlp,
    pub block: TransformerBlock,
}

impl ClassBlock {
    pub fn new(b: &mut Builder, cfg: &LateConfig, corr: usize, text_dim: usize) -> Self {
        let mut s = b.scope("class");
        ClassBlock {
            guide: Mlp::new(&mut s, "guide", text_dim, corr, corr),
            block: TransformerBlock::new(&mut s, "attn", corr, cfg.heads, cfg.mlp_ratio),
        }
    }

    /// `x [N, h, w, C]`, `mean_text [N, C_t]` → `[N, h, w, C]`; attention
    /// runs over the N class tokens at each location.
    pub fn forward(&self, f: &mut Forward, x: Var, mean_text: Var) -> Var {
        let s = f.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let g = self.guide.forward(f, mean_text);
        let g = f.reshape(g, &[1, n, c]);
        let t = f.permute(x, &[1, 2, 0, 3]);
        let t = f.reshape(t, &[h * w, n, c]);
        let t = self.block.forward_dense(f, t, Some(g));
        let t = f.reshape(t, &[h, w, n, c]);
        f.record(PathEvent::ClassRefinement);
        f.permute(t, &[2, 0, 1, 3])
    }
}

#[derive(Clone, Debug)]
pub struct LateStage {
    pub spatial: SpatialBlock,
    pub class: ClassBlock,
}

#[derive(Clone, Debug)]
pub struct LateRefiner {
    pub stages: Vec<LateStage>,
}

impl LateRefiner {
    pub fn new(b: &mut Builder, cfg: &LateConfig, corr: usize, guide_dim: usize, text_dim: usize) -> Self {
        let mut s = b.scope("late");
        let stages = (0..cfg.stages)
            .map(|i| {
                let mut st = s.scope(&alloc::format!("stage{i}"));
                LateStage {
                    spatial: SpatialBlock::new(&mut st, cfg, corr, guide_dim),
                    class: ClassBlock::new(&mut st, cfg, corr, text_dim),
                }
            })
            .collect();
        LateRefiner { stages }
    }

    pub fn forward(&self, f: &mut Forward, x: Var, guidance: Var, mean_text: Var) -> Var {
        let mut x = x;
        for stage in &self.stages {
            x = stage.spatial.forward(f, x, guidance);
            x = stage.class.forward(f, x, mean_text);
        }
        x
    }

    fn stage(&self, i: usize) -> Result<&LateStage> {
        self.stages
            .get(i)
            .ok_or_else(|| crate::error::arg_err!("stage {i} out of range ({} stages)", self.stages.len()))
    }

    pub fn spatial_refine(
        &self,
        store: &ParamStore,
        stage: usize,
        corr: &CorrelationVolume,
        guidance: &FeatureMap,
    ) -> Result<CorrelationVolume> {
        let st = self.stage(stage)?;
        check_guidance(corr, guidance)?;
        let mut f = Forward::new(store, false);
        let x = f.constant(corr.to_nhwc());
        let g = f.constant(guidance.to_nhwc());
        let y = st.spatial.forward(&mut f, x, g);
        CorrelationVolume::from_nhwc(f.value(y))
    }

    pub fn class_refine(
        &self,
        store: &ParamStore,
        stage: usize,
        corr: &CorrelationVolume,
        texts: &TextEmbeddingSet,
    ) -> Result<CorrelationVolume> {
        let st = self.stage(stage)?;
        check_texts(corr, texts)?;
        let mut f = Forward::new(store, false);
        let x = f.constant(corr.to_nhwc());
        let t = f.constant(texts.mean.clone());
        let y = st.class.forward(&mut f, x, t);
        CorrelationVolume::from_nhwc(f.value(y))
    }

    pub fn refine(
        &self,
        store: &ParamStore,
        corr: &CorrelationVolume,
        guidance: &GuidancePyramid,
        texts: &TextEmbeddingSet,
    ) -> Result<CorrelationVolume> {
        check_guidance(corr, &guidance.f_last)?;
        check_texts(corr, texts)?;
        let mut f = Forward::new(store, false);
        let x = f.constant(corr.to_nhwc());
        let g = f.constant(guidance.f_last.to_nhwc());
        let t = f.constant(texts.mean.clone());
        let y = self.forward(&mut f, x, g, t);
        CorrelationVolume::from_nhwc(f.value(y))
    }
}

fn check_guidance(corr: &CorrelationVolume, guidance: &FeatureMap) -> Result<()> {
    if (corr.height(), corr.width()) != (guidance.height(), guidance.width()) {
        return Err(shape_err!(
            "guidance grid {}x{} does not match correlation grid {}x{}",
            guidance.height(),
            guidance.width(),
            corr.height(),
            corr.width()
        ));
    }
    Ok(())
}

fn check_texts(corr: &CorrelationVolume, texts: &TextEmbeddingSet) -> Result<()> {
    if texts.len() != corr.classes() {
        return Err(shape_err!("{} text classes for {} correlation classes", texts.len(), corr.classes()));
    }
    Ok(())
}
