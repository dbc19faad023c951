//! Prototype extraction, self-support matching and mask prediction.
//!
//! Every prediction keeps a foreground and a background prototype and
//! softmaxes the two temperature-scaled cosine similarities per pixel, so a
//! soft mask is a pair of probabilities summing to one.
//!
//! The graph-level functions (`*_on`) record their work on a [`Graph`] so
//! losses can be differentiated back into the encoder. The value-level
//! functions ([`map`], [`sim_map`], [`predict_mask`], [`ssp_prototype`],
//! [`bce_loss`]) wrap them for direct use on [`FeatureMap`]s.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::image::{BinaryMask, FeatureMap};
use crate::real::Real;

/// Clamp applied to probabilities inside the binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Knobs of the self-support matching step.
#[derive(Debug, Clone, PartialEq)]
pub struct SspConfig {
    /// Pixels whose foreground probability exceeds this form the
    /// self-support foreground region.
    pub fg_threshold: f64,
    /// Pixels whose background probability exceeds this form the
    /// self-support background region.
    pub bg_threshold: f64,
    /// Weight of the self-support prototype in the blend with the incoming
    /// prototype. `0` leaves the incoming prototype untouched.
    pub blend: f64,
    /// Extra matching passes run on the blended output.
    pub refinement_passes: usize,
    /// Scale applied to cosine similarities before the softmax.
    pub temperature: f64,
    /// Replace the global background vector with a per-pixel background
    /// field attended from the self-support background region.
    pub adaptive_bg: bool,
    /// Scale applied to the cosine logits of the background attention.
    pub adaptive_bg_scale: f64,
}

impl Default for SspConfig {
    fn default() -> Self {
        SspConfig {
            fg_threshold: 0.7,
            bg_threshold: 0.6,
            blend: 0.5,
            refinement_passes: 1,
            temperature: 10.0,
            adaptive_bg: true,
            adaptive_bg_scale: 2.0,
        }
    }
}

impl SspConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.fg_threshold) || !unit(self.bg_threshold) {
            return Err(Error::Config(format!(
                "ssp thresholds must lie in (0, 1), got fg {} bg {}",
                self.fg_threshold, self.bg_threshold
            )));
        }
        if self.bg_threshold >= self.fg_threshold {
            return Err(Error::Config(format!(
                "ssp bg threshold {} must be below fg threshold {}",
                self.bg_threshold, self.fg_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!(
                "ssp blend {} outside [0, 1]",
                self.blend
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.adaptive_bg_scale > 0.0 && self.adaptive_bg_scale.is_finite()) {
            return Err(Error::Config(format!(
                "adaptive background scale must be positive, got {}",
                self.adaptive_bg_scale
            )));
        }
        Ok(())
    }
}

/// Foreground / background prototype nodes. `bg_field`, when present, is a
/// `[C, N]` per-pixel background tied to the feature map it was computed
/// on; it is used for that map's prediction only and never carried into
/// the next matching step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prototype {
    pub fg: Var,
    pub bg: Var,
    pub bg_field: Option<Var>,
}

impl Prototype {
    /// The same prototype without its per-pixel background.
    pub fn global(self) -> Prototype {
        Prototype {
            bg_field: None,
            ..self
        }
    }
}

fn feature_dims<F: Real>(g: &Graph<F>, feat: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(feat) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!(
            "expected a [C, H, W] feature map, got {s:?}"
        ))),
    }
}

/// Brings `mask` to the spatial size of `feat` (bilinear, threshold 0.5).
pub fn mask_for<F: Real>(g: &Graph<F>, feat: Var, mask: &BinaryMask) -> Result<BinaryMask> {
    let (_, h, w) = feature_dims(g, feat)?;
    Ok(mask.resize_bilinear(h, w))
}

/// Masked average pooling of `feat` over `mask`.
pub fn map_on<F: Real>(g: &mut Graph<F>, feat: Var, mask: &BinaryMask) -> Result<Var> {
    let m = mask_for(g, feat, mask)?;
    g.masked_mean(feat, m.to_weights()).map_err(|e| match e {
        Error::DegenerateMask(_) => Error::DegenerateMask(String::from(
            "mask has no foreground pixel at feature resolution",
        )),
        other => other,
    })
}

/// Support prototype from an annotated feature map: foreground by masked
/// average pooling over the mask, background over its complement. An
/// all-foreground mask falls back to global average pooling for the
/// background.
pub fn support_prototype_on<F: Real>(
    g: &mut Graph<F>,
    feat: Var,
    mask: &BinaryMask,
) -> Result<Prototype> {
    let m = mask_for(g, feat, mask)?;
    let fg = map_on(g, feat, &m)?;
    let bg_mask = m.complement();
    let bg = if bg_mask.is_empty() {
        g.masked_mean(feat, BinaryMask::ones(m.height(), m.width()).to_weights())?
    } else {
        g.masked_mean(feat, bg_mask.to_weights())?
    };
    Ok(Prototype {
        fg,
        bg,
        bg_field: None,
    })
}

/// Per-pixel cosine similarity to the foreground and background prototypes.
pub fn similarity_on<F: Real>(
    g: &mut Graph<F>,
    feat: Var,
    proto: &Prototype,
) -> Result<(Var, Var)> {
    let fg = g.cosine(feat, proto.fg)?;
    let bg = g.cosine(feat, proto.bg_field.unwrap_or(proto.bg))?;
    Ok((fg, bg))
}

/// Foreground probability per pixel: the first entry of
/// `softmax(α · [sim_fg, sim_bg])`, written as `σ(α · (sim_fg - sim_bg))`.
pub fn predict_on<F: Real>(
    g: &mut Graph<F>,
    feat: Var,
    proto: &Prototype,
    temperature: f64,
) -> Result<Var> {
    let (fg, bg) = similarity_on(g, feat, proto)?;
    let d = g.sub(fg, bg)?;
    let d = g.scale(d, F::of(temperature));
    Ok(g.sigmoid(d))
}

/// Mean binary cross entropy of a foreground probability node against a
/// mask, resized to the prediction's feature grid.
pub fn bce_on<F: Real>(g: &mut Graph<F>, prob: Var, feat: Var, target: &BinaryMask) -> Result<Var> {
    let m = mask_for(g, feat, target)?;
    g.bce(prob, m.to_weights(), F::of(BCE_EPS))
}

fn first_argmax<F: Real>(vals: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in vals.iter().enumerate() {
        if v > vals[best] {
            best = i;
        }
    }
    best
}

/// Self-support matching: finds the confident foreground / background
/// regions of `feat` under `proto_in`, re-pools prototypes from them and
/// blends with `proto_in`. Repeated `1 + refinement_passes` times, each pass
/// starting from the previous output.
///
/// An empty confident region falls back to the single most confident pixel
/// (first maximum in row-major order).
pub fn ssp_on<F: Real>(
    g: &mut Graph<F>,
    feat: Var,
    proto_in: &Prototype,
    cfg: &SspConfig,
) -> Result<Prototype> {
    let (_, h, w) = feature_dims(g, feat)?;
    let n = h * w;
    let beta = F::of(cfg.blend);
    let fg_t = F::of(cfg.fg_threshold);
    let bg_t = F::of(cfg.bg_threshold);
    let mut cur = proto_in.global();
    let mut field = None;
    for _ in 0..=cfg.refinement_passes {
        let prob = predict_on(g, feat, &cur, cfg.temperature)?;
        let p_fg: Vec<F> = g.value(prob).to_vec();
        let p_bg: Vec<F> = p_fg.iter().map(|&p| F::one() - p).collect();
        let select = |probs: &[F], t: F| -> Vec<usize> {
            let sel: Vec<usize> = (0..n).filter(|&i| probs[i] > t).collect();
            if sel.is_empty() {
                alloc::vec![first_argmax(probs)]
            } else {
                sel
            }
        };
        let fg_sel = select(&p_fg, fg_t);
        let bg_sel = select(&p_bg, bg_t);
        let weights = |sel: &[usize]| {
            let mut wts = alloc::vec![F::zero(); n];
            for &i in sel {
                wts[i] = F::one();
            }
            wts
        };
        let self_fg = g.masked_mean(feat, weights(&fg_sel))?;
        let self_bg = g.masked_mean(feat, weights(&bg_sel))?;
        let fg = g.lerp(self_fg, cur.fg, beta)?;
        let bg = g.lerp(self_bg, cur.bg, beta)?;
        field = if cfg.adaptive_bg {
            let local = adaptive_background(g, feat, bg_sel, cfg.adaptive_bg_scale)?;
            let base = g.broadcast(cur.bg, n)?;
            Some(g.lerp(local, base, beta)?)
        } else {
            None
        };
        cur = Prototype {
            fg,
            bg,
            bg_field: None,
        };
    }
    Ok(Prototype {
        bg_field: field,
        ..cur
    })
}

/// Per-pixel background: every pixel attends over the background region
/// with softmax weights on scaled cosine similarity.
fn adaptive_background<F: Real>(
    g: &mut Graph<F>,
    feat: Var,
    bg_sel: Vec<usize>,
    scale: f64,
) -> Result<Var> {
    let (_, h, w) = feature_dims(g, feat)?;
    let region = g.select_cols(feat, bg_sel)?;
    let flat = g.select_cols(feat, (0..h * w).collect())?;
    let fn_ = g.normalize_cols(flat);
    let rn = g.normalize_cols(region);
    let ft = g.transpose(fn_)?;
    let logits = g.matmul(ft, rn)?;
    let logits = g.scale(logits, F::of(scale));
    let att = g.softmax_rows(logits)?;
    let att_t = g.transpose(att)?;
    g.matmul(region, att_t)
}

/// Nodes produced by one bi-directional prediction.
#[derive(Debug, Clone, Copy)]
pub struct BfpOutput {
    /// Support prototype pooled from the annotation.
    pub support: Prototype,
    /// Query prototype matched from the support prototype.
    pub query: Prototype,
    /// Support prototype matched back from the query prototype.
    pub support_back: Prototype,
    /// Foreground probabilities on the support from `support`.
    pub support_pred: Var,
    /// Foreground probabilities on the query from `query`.
    pub query_pred: Var,
    /// Foreground probabilities on the support from `support_back`.
    pub support_back_pred: Var,
}

/// One support-to-query and query-to-support round trip.
pub fn bfp_forward_on<F: Real>(
    g: &mut Graph<F>,
    support_feat: Var,
    support_mask: &BinaryMask,
    query_feat: Var,
    cfg: &SspConfig,
) -> Result<BfpOutput> {
    let support = support_prototype_on(g, support_feat, support_mask)?;
    let support_pred = predict_on(g, support_feat, &support, cfg.temperature)?;
    let query = ssp_on(g, query_feat, &support, cfg)?;
    let query_pred = predict_on(g, query_feat, &query, cfg.temperature)?;
    let support_back = ssp_on(g, support_feat, &query.global(), cfg)?;
    let support_back_pred = predict_on(g, support_feat, &support_back, cfg.temperature)?;
    Ok(BfpOutput {
        support,
        query,
        support_back,
        support_pred,
        query_pred,
        support_back_pred,
    })
}

/// Prototype values detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePair<F> {
    pub fg: Vec<F>,
    pub bg: Vec<F>,
    /// Optional `[C, N]` per-pixel background.
    pub bg_field: Option<Vec<F>>,
}

impl<F: Real> PrototypePair<F> {
    pub fn new(fg: Vec<F>, bg: Vec<F>) -> Self {
        PrototypePair {
            fg,
            bg,
            bg_field: None,
        }
    }

    pub fn from_graph(g: &Graph<F>, p: &Prototype) -> Self {
        PrototypePair {
            fg: g.value(p.fg).to_vec(),
            bg: g.value(p.bg).to_vec(),
            bg_field: p.bg_field.map(|f| g.value(f).to_vec()),
        }
    }

    fn bind(&self, g: &mut Graph<F>, n: usize) -> Result<Prototype> {
        let c = self.fg.len();
        let fg = g.constant(self.fg.clone(), &[c])?;
        let bg = g.constant(self.bg.clone(), &[self.bg.len()])?;
        let bg_field = match &self.bg_field {
            Some(f) => Some(g.constant(f.clone(), &[c, n])?),
            None => None,
        };
        Ok(Prototype { fg, bg, bg_field })
    }
}

/// Two-channel similarity map: foreground and background cosine per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap<F> {
    pub height: usize,
    pub width: usize,
    pub fg: Vec<F>,
    pub bg: Vec<F>,
}

/// Per-pixel foreground / background probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask<F> {
    height: usize,
    width: usize,
    fg: Vec<F>,
    bg: Vec<F>,
}

impl<F: Real> SoftMask<F> {
    /// Builds a soft mask from foreground probabilities; the background is
    /// their complement.
    pub fn from_fg(height: usize, width: usize, fg: Vec<F>) -> Result<Self> {
        if fg.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} soft mask needs {} values, got {}",
                height * width,
                fg.len()
            )));
        }
        let bg = fg.iter().map(|&p| F::one() - p).collect();
        Ok(SoftMask {
            height,
            width,
            fg,
            bg,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fg(&self) -> &[F] {
        &self.fg
    }

    pub fn bg(&self) -> &[F] {
        &self.bg
    }

    /// Foreground where the foreground probability is at least `threshold`.
    pub fn binarize(&self, threshold: F) -> BinaryMask {
        let data = self.fg.iter().map(|&p| (p >= threshold) as u8).collect();
        BinaryMask::new(self.height, self.width, data).expect("soft mask dims are consistent")
    }

    /// Bilinear upsampling of the foreground probability to `height x width`.
    pub fn resize(&self, height: usize, width: usize) -> SoftMask<F> {
        let plane: Vec<f32> = self.fg.iter().map(|v| v.as_f64() as f32).collect();
        let up = crate::image::bilinear(&plane, self.height, self.width, height, width);
        let fg: Vec<F> = up.into_iter().map(|v| F::of(v as f64)).collect();
        SoftMask::from_fg(height, width, fg).expect("resized dims are consistent")
    }
}

fn bind_feature<F: Real>(g: &mut Graph<F>, feature: &FeatureMap<F>) -> Result<Var> {
    g.constant(feature.values().to_vec(), &feature.shape())
}

/// Masked average pooling. Errors with [`Error::DegenerateMask`] when the
/// mask has no foreground at feature resolution.
pub fn map<F: Real>(feature: &FeatureMap<F>, mask: &BinaryMask) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let f = bind_feature(&mut g, feature)?;
    let p = map_on(&mut g, f, mask)?;
    Ok(g.value(p).to_vec())
}

/// Cosine similarity of every pixel to both prototypes. Zero-norm pixels or
/// prototypes give similarity 0.
pub fn sim_map<F: Real>(
    feature: &FeatureMap<F>,
    proto: &PrototypePair<F>,
) -> Result<SimilarityMap<F>> {
    check_channels(feature, proto)?;
    let mut g = Graph::new();
    let f = bind_feature(&mut g, feature)?;
    let p = proto.bind(&mut g, feature.height() * feature.width())?;
    let (fg, bg) = similarity_on(&mut g, f, &p)?;
    Ok(SimilarityMap {
        height: feature.height(),
        width: feature.width(),
        fg: g.value(fg).to_vec(),
        bg: g.value(bg).to_vec(),
    })
}

/// Softmax over the temperature-scaled similarity pair at every pixel.
pub fn predict_mask<F: Real>(
    feature: &FeatureMap<F>,
    proto: &PrototypePair<F>,
    temperature: f64,
) -> Result<SoftMask<F>> {
    let sims = sim_map(feature, proto)?;
    let a = F::of(temperature);
    let fg = sims
        .fg
        .iter()
        .zip(&sims.bg)
        .map(|(&f, &b)| sigmoid(a * (f - b)))
        .collect();
    let bg = sims
        .fg
        .iter()
        .zip(&sims.bg)
        .map(|(&f, &b)| sigmoid(a * (b - f)))
        .collect();
    Ok(SoftMask {
        height: sims.height,
        width: sims.width,
        fg,
        bg,
    })
}

/// Self-support matching on detached values. Any incoming background field
/// is ignored.
pub fn ssp_prototype<F: Real>(
    feature: &FeatureMap<F>,
    proto_in: &PrototypePair<F>,
    cfg: &SspConfig,
) -> Result<PrototypePair<F>> {
    cfg.validate()?;
    check_channels(feature, proto_in)?;
    let mut g = Graph::new();
    let f = bind_feature(&mut g, feature)?;
    let p = proto_in.bind(&mut g, feature.height() * feature.width())?;
    let out = ssp_on(&mut g, f, &p.global(), cfg)?;
    Ok(PrototypePair::from_graph(&g, &out))
}

/// Mean over pixels of `-[t ln p_fg + (1 - t) ln p_bg]`, probabilities
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<F: Real>(pred: &SoftMask<F>, target: &BinaryMask) -> Result<F> {
    let t = target.resize_bilinear(pred.height, pred.width);
    let eps = F::of(BCE_EPS);
    let hi = F::one() - eps;
    let mut acc = F::zero();
    for ((&pf, &pb), &tv) in pred.fg.iter().zip(&pred.bg).zip(t.data()) {
        acc = acc
            - if tv == 1 {
                pf.max(eps).min(hi).ln()
            } else {
                pb.max(eps).min(hi).ln()
            };
    }
    Ok(acc / F::of(pred.fg.len() as f64))
}

fn check_channels<F: Real>(feature: &FeatureMap<F>, proto: &PrototypePair<F>) -> Result<()> {
    let c = feature.channels();
    let n = feature.height() * feature.width();
    let field_ok = proto.bg_field.as_ref().is_none_or(|f| f.len() == c * n);
    if proto.fg.len() != c || proto.bg.len() != c || !field_ok {
        return Err(Error::Shape(format!(
            "prototype of {} / {} channels against a {c}-channel feature map",
            proto.fg.len(),
            proto.bg.len()
        )));
    }
    Ok(())
}
