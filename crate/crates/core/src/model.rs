//! The full segmentation model: stub backbones, early refinement,
//! correlation, late refinement and decoder over one parameter store.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::{LgaConfig, ModelConfig, Toggles};
use crate::correlation::CorrelationProjector;
use crate::decoder::{predict, Decoder};
use crate::early_refinement::{EarlyRefiner, Refined};
use crate::encoders::{image_var, SemanticPriorEncoder, TextEncoder, VisionEncoder};
use crate::error::{arg_err, shape_err, Result};
use crate::late_refinement::LateRefiner;
use crate::lga;
use crate::nn::{Builder, Forward, ParamGroup, ParamStore, PathEvent};
use crate::types::{
    ClsToken, CorrelationVolume, FeatureMap, GuidancePyramid, ImageTensor, LogitMap, SegMap, SimilarityVolume,
    TextEmbeddingSet,
};

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    toggles: Toggles,
    store: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub spe: SemanticPriorEncoder,
    pub refiner: EarlyRefiner,
    pub correlation: CorrelationProjector,
    pub late: LateRefiner,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: &ModelConfig, toggles: Toggles, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &config.encoder;
        let c = config.corr_channels;
        let (vision, text, spe, refiner) = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Backbone);
            let vision = VisionEncoder::new(&mut b, enc);
            let text = TextEncoder::new(&mut b, enc);
            let spe = SemanticPriorEncoder::new(&mut b, enc);
            let refiner = EarlyRefiner::new(&mut b, &config.refiner, enc.patch_size, enc.vision_dim);
            (vision, text, spe, refiner)
        };
        let (correlation, late, decoder) = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Head);
            let correlation = CorrelationProjector::new(&mut b, c);
            let late = LateRefiner::new(&mut b, &config.late, c, enc.spe_dim, enc.vision_dim);
            let decoder = Decoder::new(&mut b, c, enc.spe_dim, enc.patch_size);
            (correlation, late, decoder)
        };
        Ok(Model { config: config.clone(), toggles, store, vision, text, spe, refiner, correlation, late, decoder })
    }

    /// Rebuilds a model and replaces its parameters with `params`, which
    /// must match the architecture name-for-name and shape-for-shape.
    pub fn with_params(config: &ModelConfig, toggles: Toggles, params: &ParamStore) -> Result<Self> {
        let mut model = Model::new(config, toggles, 0)?;
        if params.len() != model.store.len() {
            return Err(shape_err!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                model.store.len()
            ));
        }
        for (dst, src) in model.store.entries_mut().iter_mut().zip(params.entries()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(shape_err!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn toggles(&self) -> Toggles {
        self.toggles
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn patch_size(&self) -> usize {
        self.config.encoder.patch_size
    }

    pub fn vision_encode(&self, image: &ImageTensor) -> Result<(ClsToken, FeatureMap)> {
        self.vision.encode(&self.store, image)
    }

    pub fn text_encode(&self, class_names: &[String]) -> Result<TextEmbeddingSet> {
        self.text.encode(&self.store, class_names)
    }

    pub fn spe_encode(&self, image: &ImageTensor) -> Result<GuidancePyramid> {
        self.spe.encode(&self.store, image)
    }

    pub fn early_refine(&self, image: &ImageTensor, phi: &FeatureMap) -> Result<Refined> {
        self.refiner.refine(&self.store, image, phi)
    }

    pub fn project_correlation(&self, sg: &SimilarityVolume, sl: &SimilarityVolume) -> Result<CorrelationVolume> {
        self.correlation.project(&self.store, sg, sl)
    }

    pub fn late_refine(
        &self,
        corr: &CorrelationVolume,
        guidance: &GuidancePyramid,
        texts: &TextEmbeddingSet,
    ) -> Result<CorrelationVolume> {
        self.late.refine(&self.store, corr, guidance, texts)
    }

    pub fn decode(&self, corr: &CorrelationVolume, guidance: &GuidancePyramid) -> Result<LogitMap> {
        self.decoder.decode(&self.store, corr, guidance)
    }

    /// Everything after feature extraction, on the graph:
    /// `image [1, H, W, 3]`, `phi [1, h, w, C]`, taps `[1, h, w, C_spe]`,
    /// text `[N, C]` → logits `[N, H, W]`. Text rows are unit-normalized
    /// on entry, so only their directions matter.
    pub fn head(&self, f: &mut Forward, image: Var, phi: Var, taps: [Var; 3], global: Var, local: Var) -> Var {
        let global = f.l2_normalize(global);
        let local = f.l2_normalize(local);
        let phi = if self.toggles.early_refine {
            f.record(PathEvent::EarlyRefinement);
            self.refiner.forward(f, image, phi).out
        } else {
            phi
        };
        let corr = self.correlation.correlate(f, phi, global, local, self.toggles.text_ensemble);
        let sum = f.add(global, local);
        let mean = f.scale(sum, 0.5);
        let corr = self.late.forward(f, corr, taps[2], mean);
        self.decoder.forward(f, corr, taps[0], taps[1])
    }

    /// Single-pass forward on the graph (the training path): logits
    /// `[N, H, W]` for one image.
    pub fn forward(&self, f: &mut Forward, image: &ImageTensor, class_names: &[String]) -> Var {
        let img = image_var(f, image);
        let (_, phi) = self.vision.forward(f, img);
        let taps = self.spe.forward(f, img);
        let (g, l) = self.text.forward(f, class_names);
        self.head(f, img, phi, taps, g, l)
    }

    fn check_inputs(&self, image: &ImageTensor, class_names: &[String]) -> Result<()> {
        TextEncoder::validate_names(class_names)?;
        image.check_patch_multiple(self.patch_size())
    }

    /// Single-pass logits at the image's own resolution.
    pub fn logits(&self, image: &ImageTensor, class_names: &[String]) -> Result<LogitMap> {
        self.check_inputs(image, class_names)?;
        let mut f = Forward::new(&self.store, false);
        let y = self.forward(&mut f, image, class_names);
        LogitMap::new(f.value(y).clone())
    }

    /// Head applied to precomputed features.
    pub fn head_logits(
        &self,
        image: &ImageTensor,
        phi: &FeatureMap,
        guidance: &GuidancePyramid,
        texts: &TextEmbeddingSet,
    ) -> Result<LogitMap> {
        image.check_patch_multiple(self.patch_size())?;
        let p = self.patch_size();
        let grid = (image.height() / p, image.width() / p);
        if grid != (phi.height(), phi.width()) || grid != (guidance.height(), guidance.width()) {
            return Err(shape_err!("feature grids do not match the {}x{} image grid", grid.0, grid.1));
        }
        if texts.dim() != phi.channels() {
            return Err(shape_err!("text width {} does not match feature width {}", texts.dim(), phi.channels()));
        }
        if texts.is_empty() {
            return Err(arg_err!("class list is empty"));
        }
        let mut f = Forward::new(&self.store, false);
        let img = image_var(&mut f, image);
        let phi = f.constant(phi.to_nhwc());
        let taps = [
            f.constant(guidance.f7.to_nhwc()),
            f.constant(guidance.f15.to_nhwc()),
            f.constant(guidance.f_last.to_nhwc()),
        ];
        let g = f.constant(texts.global.clone());
        let l = f.constant(texts.local.clone());
        let y = self.head(&mut f, img, phi, taps, g, l);
        LogitMap::new(f.value(y).clone())
    }

    /// Aggregated dense VLM features of an image already at the target size.
    pub fn lga_features(&self, image: &ImageTensor, cfg: &LgaConfig) -> Result<FeatureMap> {
        lga::lga_features(image, cfg, self.patch_size(), |im| Ok(self.vision_encode(im)?.1))
    }

    /// Guidance taps of an image already at the target size, tile-averaged
    /// the same way as the VLM features when `lga_spe` is on.
    pub fn lga_guidance(&self, image: &ImageTensor, cfg: &LgaConfig) -> Result<GuidancePyramid> {
        let global = self.spe_encode(image)?;
        if !cfg.lga_spe {
            return Ok(global);
        }
        let plan = lga::plan_tiles_for(image.height(), image.width(), cfg.window, cfg.overlap)?;
        let mut tiles: [Vec<((usize, usize), FeatureMap)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for &(r, c) in &plan.origins {
            let g = self.spe_encode(&image.crop(r, c, plan.window, plan.window)?)?;
            tiles[0].push(((r, c), g.f7));
            tiles[1].push(((r, c), g.f15));
            tiles[2].push(((r, c), g.f_last));
        }
        let p = self.patch_size();
        GuidancePyramid::new(
            lga::average(&lga::merge_tiles(&tiles[0], &plan, p)?, &global.f7)?,
            lga::average(&lga::merge_tiles(&tiles[1], &plan, p)?, &global.f15)?,
            lga::average(&lga::merge_tiles(&tiles[2], &plan, p)?, &global.f_last)?,
        )
    }

    /// Full inference: resize to the LGA target, aggregate features, run
    /// the head and take the per-pixel decision at the resized resolution.
    pub fn infer(&self, image: &ImageTensor, class_names: &[String], cfg: &LgaConfig) -> Result<SegMap> {
        TextEncoder::validate_names(class_names)?;
        cfg.validate()?;
        let resized = image.resize(cfg.resize, cfg.resize);
        resized.check_patch_multiple(self.patch_size())?;
        let phi = self.lga_features(&resized, cfg)?;
        let guidance = self.lga_guidance(&resized, cfg)?;
        let texts = self.text_encode(class_names)?;
        Ok(predict(&self.head_logits(&resized, &phi, &guidance, &texts)?))
    }
}
