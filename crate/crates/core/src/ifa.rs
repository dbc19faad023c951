//! Iterative few-shot adaptor.
//!
//! One step pools the (averaged) support prototype, then runs `T` rounds of
//! support-to-query and query-to-support matching, supervising every round:
//!
//! ```text
//! L = λ_bs·L_bs + λ_bq·L_q¹ + λ_s'·L_s¹ + λ_i·Σ_{j=1}^{T-1} (L_q^{j+1} + L_s^{j+1})
//! ```
//!
//! With `K > 1` supports the support prototypes are averaged before matching
//! the query, and the query prototype is matched back onto every support
//! separately; those `K` prototypes are averaged into the next round's
//! support prototype and their losses averaged into `L_s`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{BinaryMask, FeatureMap};
use crate::protonet::{
    bce_on, predict_on, ssp_on, support_prototype_on, Prototype, PrototypePair, SoftMask, SspConfig,
};
use crate::real::Real;

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// λ_bs, support prediction from the pooled support prototype.
    pub support_base: f64,
    /// λ_bq, first-round query prediction.
    pub query_base: f64,
    /// λ_s', first-round support prediction matched back from the query.
    pub support_back: f64,
    /// λ_i, shared by both terms of every later round.
    pub iteration: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            support_base: 0.2,
            query_base: 1.0,
            support_back: 0.4,
            iteration: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            support_base: 0.0,
            query_base: 0.0,
            support_back: 0.0,
            iteration: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.support_base,
            self.query_base,
            self.support_back,
            self.iteration,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfaConfig {
    /// Number of bi-directional rounds `T`.
    pub iterations: usize,
    pub weights: LossWeights,
    pub ssp: SspConfig,
}

impl Default for IfaConfig {
    fn default() -> Self {
        IfaConfig {
            iterations: 3,
            weights: LossWeights::default(),
            ssp: SspConfig::default(),
        }
    }
}

impl IfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(String::from(
                "at least one iteration is required",
            )));
        }
        self.weights.validate()?;
        self.ssp.validate()
    }

    /// Same configuration with a single round: plain bi-directional
    /// prediction.
    pub fn bfp(&self) -> Self {
        IfaConfig {
            iterations: 1,
            ..self.clone()
        }
    }
}

/// What one round produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord<F> {
    pub query_proto: PrototypePair<F>,
    /// Averaged support prototype matched back from the query.
    pub support_proto: PrototypePair<F>,
    pub query_pred: Vec<F>,
    /// One foreground probability map per support.
    pub support_preds: Vec<Vec<F>>,
    pub query_loss: F,
    pub support_loss: F,
}

/// A named, weighted loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm<F> {
    pub name: String,
    pub weight: f64,
    pub value: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfaTrace<F> {
    pub support_base_loss: F,
    pub iterations: Vec<IterationRecord<F>>,
    pub total: F,
    weights: LossWeights,
}

impl<F: Real> IfaTrace<F> {
    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    /// All recorded terms in loss order; `3 + 2(T - 1)` of them.
    pub fn loss_terms(&self) -> Vec<LossTerm<F>> {
        let w = self.weights;
        let mut out = Vec::with_capacity(1 + 2 * self.iterations.len());
        out.push(LossTerm {
            name: String::from("support_base"),
            weight: w.support_base,
            value: self.support_base_loss,
        });
        for (j, it) in self.iterations.iter().enumerate() {
            let (wq, ws) = if j == 0 {
                (w.query_base, w.support_back)
            } else {
                (w.iteration, w.iteration)
            };
            out.push(LossTerm {
                name: format!("query[{}]", j + 1),
                weight: wq,
                value: it.query_loss,
            });
            out.push(LossTerm {
                name: format!("support[{}]", j + 1),
                weight: ws,
                value: it.support_loss,
            });
        }
        out
    }

    /// Weighted sum of the recorded terms, recomputed in `f64`.
    pub fn reconstruct_total(&self) -> f64 {
        self.loss_terms()
            .iter()
            .map(|t| t.weight * t.value.as_f64())
            .sum()
    }
}

fn check_inputs(feats: &[Var], masks: &[BinaryMask], cfg: &IfaConfig) -> Result<()> {
    cfg.validate()?;
    if feats.is_empty() {
        return Err(Error::Config(String::from(
            "at least one support is required",
        )));
    }
    if feats.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} support features but {} support masks",
            feats.len(),
            masks.len()
        )));
    }
    Ok(())
}

fn finite<F: Real>(g: &Graph<F>, v: Var, what: &str, iteration: Option<usize>) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: String::from(what),
            iteration,
        })
    }
}

fn averaged_support<F: Real>(g: &mut Graph<F>, protos: &[Prototype]) -> Result<Prototype> {
    let fgs: Vec<Var> = protos.iter().map(|p| p.fg).collect();
    let bgs: Vec<Var> = protos.iter().map(|p| p.bg).collect();
    Ok(Prototype {
        fg: g.mean(&fgs)?,
        bg: g.mean(&bgs)?,
        bg_field: None,
    })
}

/// One adaptor step. Returns the total loss node and the trace of every
/// round.
pub fn ifa_step_on<F: Real>(
    g: &mut Graph<F>,
    support_feats: &[Var],
    support_masks: &[BinaryMask],
    query_feat: Var,
    query_mask: &BinaryMask,
    cfg: &IfaConfig,
) -> Result<(Var, IfaTrace<F>)> {
    check_inputs(support_feats, support_masks, cfg)?;
    let w = cfg.weights;
    let ssp = &cfg.ssp;

    let mut protos = Vec::with_capacity(support_feats.len());
    for (&f, m) in support_feats.iter().zip(support_masks) {
        protos.push(support_prototype_on(g, f, m)?);
    }
    let mean_support = averaged_support(g, &protos)?;

    let mut base_terms = Vec::with_capacity(protos.len());
    for (&f, m) in support_feats.iter().zip(support_masks) {
        let pred = predict_on(g, f, &mean_support, ssp.temperature)?;
        base_terms.push(bce_on(g, pred, f, m)?);
    }
    let support_base = g.mean(&base_terms)?;
    finite(g, support_base, "support base loss", None)?;

    let mut terms: Vec<(Var, F)> = alloc::vec![(support_base, F::of(w.support_base))];
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut current = mean_support;
    for j in 0..cfg.iterations {
        let query = ssp_on(g, query_feat, &current, ssp)?;
        let query_pred = predict_on(g, query_feat, &query, ssp.temperature)?;
        let query_loss = bce_on(g, query_pred, query_feat, query_mask)?;
        finite(g, query_loss, "query loss", Some(j))?;

        let mut back = Vec::with_capacity(support_feats.len());
        let mut preds = Vec::with_capacity(support_feats.len());
        let mut losses = Vec::with_capacity(support_feats.len());
        for (&f, m) in support_feats.iter().zip(support_masks) {
            let p = ssp_on(g, f, &query.global(), ssp)?;
            let pred = predict_on(g, f, &p, ssp.temperature)?;
            losses.push(bce_on(g, pred, f, m)?);
            preds.push(pred);
            back.push(p);
        }
        let support_loss = g.mean(&losses)?;
        finite(g, support_loss, "support loss", Some(j))?;
        let next = averaged_support(g, &back)?;

        let (wq, ws) = if j == 0 {
            (w.query_base, w.support_back)
        } else {
            (w.iteration, w.iteration)
        };
        terms.push((query_loss, F::of(wq)));
        terms.push((support_loss, F::of(ws)));
        records.push(IterationRecord {
            query_proto: PrototypePair::from_graph(g, &query),
            support_proto: PrototypePair::from_graph(g, &next),
            query_pred: g.value(query_pred).to_vec(),
            support_preds: preds.iter().map(|&p| g.value(p).to_vec()).collect(),
            query_loss: g.scalar(query_loss),
            support_loss: g.scalar(support_loss),
        });
        current = next;
    }
    let total = g.lin_comb(&terms)?;
    finite(g, total, "total loss", None)?;
    let trace = IfaTrace {
        support_base_loss: g.scalar(support_base),
        iterations: records,
        total: g.scalar(total),
        weights: w,
    };
    Ok((total, trace))
}

/// Source-domain training objective: a single bi-directional round.
pub fn bfp_train_step_on<F: Real>(
    g: &mut Graph<F>,
    support_feats: &[Var],
    support_masks: &[BinaryMask],
    query_feat: Var,
    query_mask: &BinaryMask,
    weights: LossWeights,
    ssp: &SspConfig,
) -> Result<(Var, IfaTrace<F>)> {
    let cfg = IfaConfig {
        iterations: 1,
        weights,
        ssp: ssp.clone(),
    };
    ifa_step_on(
        g,
        support_feats,
        support_masks,
        query_feat,
        query_mask,
        &cfg,
    )
}

/// Inference: averaged support prototype, one self-support match on the
/// query, then the mask prediction. No iteration.
pub fn test_predict_on<F: Real>(
    g: &mut Graph<F>,
    support_feats: &[Var],
    support_masks: &[BinaryMask],
    query_feat: Var,
    ssp: &SspConfig,
) -> Result<Var> {
    if support_feats.is_empty() || support_feats.len() != support_masks.len() {
        return Err(Error::Shape(format!(
            "{} support features with {} masks",
            support_feats.len(),
            support_masks.len()
        )));
    }
    ssp.validate()?;
    let mut protos = Vec::with_capacity(support_feats.len());
    for (&f, m) in support_feats.iter().zip(support_masks) {
        protos.push(support_prototype_on(g, f, m)?);
    }
    let mean_support = averaged_support(g, &protos)?;
    let query = ssp_on(g, query_feat, &mean_support, ssp)?;
    predict_on(g, query_feat, &query, ssp.temperature)
}

fn bind_all<F: Real>(g: &mut Graph<F>, feats: &[FeatureMap<F>]) -> Result<Vec<Var>> {
    feats
        .iter()
        .map(|f| g.constant(f.values().to_vec(), &f.shape()))
        .collect()
}

/// [`ifa_step_on`] over detached feature maps; returns the total loss and
/// the trace.
pub fn ifa_step<F: Real>(
    support_feats: &[FeatureMap<F>],
    support_masks: &[BinaryMask],
    query_feat: &FeatureMap<F>,
    query_mask: &BinaryMask,
    cfg: &IfaConfig,
) -> Result<(F, IfaTrace<F>)> {
    let mut g = Graph::new();
    let fs = bind_all(&mut g, support_feats)?;
    let fq = g.constant(query_feat.values().to_vec(), &query_feat.shape())?;
    let (total, trace) = ifa_step_on(&mut g, &fs, support_masks, fq, query_mask, cfg)?;
    Ok((g.scalar(total), trace))
}

/// [`test_predict_on`] over detached feature maps.
pub fn test_predict<F: Real>(
    support_feats: &[FeatureMap<F>],
    support_masks: &[BinaryMask],
    query_feat: &FeatureMap<F>,
    ssp: &SspConfig,
) -> Result<SoftMask<F>> {
    let mut g = Graph::new();
    let fs = bind_all(&mut g, support_feats)?;
    let fq = g.constant(query_feat.values().to_vec(), &query_feat.shape())?;
    let p = test_predict_on(&mut g, &fs, support_masks, fq, ssp)?;
    SoftMask::from_fg(query_feat.height(), query_feat.width(), g.value(p).to_vec())
}
