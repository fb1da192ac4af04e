//! Image–text cosine similarity volumes and their projection into
//! correlation features.


use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{Builder, Conv2d, Forward, ParamStore, PathEvent};
use crate::tensor::Tensor;
use crate::types::{CorrelationVolume, FeatureMap, SimilarityKind, SimilarityVolume, TextEmbeddingSet};

/// Cosine similarity of every text row `[N, C]` against every feature
/// vector of `phi [1, h, w, C]`, shaped `[N, h, w]`.
pub fn similarity(f: &mut Forward, phi: Var, text: Var) -> Var {
    let s = f.shape(phi).to_vec();
    let (h, w, c) = (s[1], s[2], s[3]);
    let n = f.shape(text)[0];
    let v = f.reshape(phi, &[h * w, c]);
    let v = f.l2_normalize(v);
    let t = f.l2_normalize(text);
    let sim = f.matmul_t(t, v, false, true);
    f.reshape(sim, &[n, h, w])
}

pub fn cosine_volumes(phi: &FeatureMap, texts: &TextEmbeddingSet) -> Result<(SimilarityVolume, SimilarityVolume)> {
    if phi.channels() != texts.dim() {
        return Err(shape_err!(
            "feature width {} does not match text width {}",
            phi.channels(),
            texts.dim()
        ));
    }
    let store = ParamStore::new();
    let mut f = Forward::new(&store, false);
    let p = f.constant(phi.to_nhwc());
    let g = f.constant(texts.global.clone());
    let l = f.constant(texts.local.clone());
    let sg = similarity(&mut f, p, g);
    let sl = similarity(&mut f, p, l);
    Ok((
        SimilarityVolume { data: f.value(sg).clone(), kind: SimilarityKind::Global },
        SimilarityVolume { data: f.value(sl).clone(), kind: SimilarityKind::Local },
    ))
}

/// 1×1 convolution mapping the stacked `[S^g; S^l]` pair to `C_corr`
/// channels, shared across classes.
#[derive(Clone, Debug)]
pub struct CorrelationProjector {
    pub conv: Conv2d,
    pub channels: usize,
}

impl CorrelationProjector {
    pub fn new(b: &mut Builder, channels: usize) -> Self {
        let mut s = b.scope("corr");
        CorrelationProjector { conv: Conv2d::new(&mut s, "proj", 2, channels, 1, 1, 0, true), channels }
    }

    /// `sg`, `sl [N, h, w]` → `[N, h, w, C_corr]`.
    pub fn forward(&self, f: &mut Forward, sg: Var, sl: Var) -> Var {
        let s = f.shape(sg).to_vec();
        let (n, h, w) = (s[0], s[1], s[2]);
        let a = f.reshape(sg, &[n, h, w, 1]);
        let b = f.reshape(sl, &[n, h, w, 1]);
        let stacked = f.concat(&[a, b], 3);
        self.conv.forward(f, stacked)
    }

    /// Similarities plus projection. With `ensemble` off only the local
    /// similarities feed both input channels.
    pub fn correlate(&self, f: &mut Forward, phi: Var, global: Var, local: Var, ensemble: bool) -> Var {
        let sl = similarity(f, phi, local);
        f.record(PathEvent::LocalSimilarity);
        if ensemble {
            let sg = similarity(f, phi, global);
            f.record(PathEvent::GlobalSimilarity);
            self.forward(f, sg, sl)
        } else {
            f.record(PathEvent::LocalOnlyProjection);
            self.forward(f, sl, sl)
        }
    }

    pub fn project(&self, store: &ParamStore, sg: &SimilarityVolume, sl: &SimilarityVolume) -> Result<CorrelationVolume> {
        if sg.data.shape() != sl.data.shape() || sg.data.rank() != 3 {
            return Err(shape_err!(
                "similarity volumes differ: {:?} vs {:?}",
                sg.data.shape(),
                sl.data.shape()
            ));
        }
        let mut f = Forward::new(store, false);
        let a = f.constant(sg.data.clone());
        let b = f.constant(sl.data.clone());
        let out = self.forward(&mut f, a, b);
        CorrelationVolume::from_nhwc(f.value(out))
    }
}

/// Builds a similarity volume from raw data (values are not checked).
pub fn similarity_volume(data: Tensor, kind: SimilarityKind) -> Result<SimilarityVolume> {
    if data.rank() != 3 {
        return Err(shape_err!("similarity volume must be N×H×W, got {:?}", data.shape()));
    }
    Ok(SimilarityVolume { data, kind })
}
