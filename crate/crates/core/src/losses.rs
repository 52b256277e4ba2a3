//! Segmentation, adversarial and memory-regularization losses.
//!
//! Every loss is a pixel mean over NCHW probability maps so the fixed
//! combination weights do not depend on image resolution.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Floor applied to probabilities and scores before taking logs.
pub const LOG_EPS: f64 = 1e-7;

/// Fixed combination weights of the two stage objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub aux_seg: f64,
    pub adv_primary: f64,
    pub adv_aux: f64,
    pub lambda_mr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            aux_seg: 0.5,
            adv_primary: 0.001,
            adv_aux: 0.0002,
            lambda_mr: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("aux_seg", self.aux_seg),
            ("adv_primary", self.adv_primary),
            ("adv_aux", self.adv_aux),
            ("lambda_mr", self.lambda_mr),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-class multipliers for the pseudo-label cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBalanceWeights(Vec<f64>);

impl ClassBalanceWeights {
    pub const MIN: f64 = 0.5;
    pub const MAX: f64 = 5.0;

    pub fn uniform(num_classes: usize) -> Self {
        ClassBalanceWeights(vec![1.0; num_classes])
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Argument(format!("class weights must be finite and positive: {weights:?}")));
        }
        Ok(ClassBalanceWeights(
            weights.into_iter().map(|w| w.clamp(Self::MIN, Self::MAX)).collect(),
        ))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How the pseudo-label rule combined the two classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionRule {
    /// `argmax(p_primary + 0.5 * p_aux)`, ties to the lower class index.
    PrimaryPlusHalfAux,
}

/// Dense per-pixel labels for one target image. Every pixel is labelled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub rule: FusionRule,
}

fn pixel_count<E: Element>(pred: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = pred.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected [N, C, H, W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

fn log_clamped<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    t.clamp(E::lit(LOG_EPS), E::one()).log()
}

/// Pixel-mean cross-entropy `-w[y] * log p[y]` of softmax maps against
/// integer labels laid out as `[N, H, W]`.
pub fn seg_ce<E: Element>(
    pred: &Tensor<E>,
    labels: &[u8],
    weights: Option<&ClassBalanceWeights>,
) -> Result<Tensor<E>> {
    let (n, c, hw) = pixel_count(pred, "seg_ce")?;
    if labels.len() != n * hw {
        return Err(Error::shape(
            "seg_ce",
            format!("{} labels for {} pixels", labels.len(), n * hw),
        ));
    }
    if let Some(w) = weights {
        if w.len() != c {
            return Err(Error::Argument(format!("{} class weights for {c} classes", w.len())));
        }
    }
    let mut mask = vec![E::zero(); n * c * hw];
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= c {
            return Err(Error::Argument(format!("label {y} out of range for {c} classes")));
        }
        let (img, px) = (i / hw, i % hw);
        let w = weights.map_or(1.0, |w| w.as_slice()[y]);
        mask[(img * c + y) * hw + px] = E::lit(w);
    }
    let mask = Tensor::from_vec(mask, pred.shape())?;
    let picked = log_clamped(pred).mul(&mask)?.sum();
    Ok(picked.scale(E::lit(-1.0 / (n * hw) as f64)))
}

fn check_scores<E: Element>(scores: &[Tensor<E>], op: &'static str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Argument(format!("{op}: no score maps")));
    }
    Ok(())
}

/// Discriminator objective `-E[log D(src)] - E[log(1 - D(tgt))]`, averaged
/// over positions and over the score maps of every scale.
pub fn adv_d_loss<E: Element>(src: &[Tensor<E>], tgt: &[Tensor<E>]) -> Result<Tensor<E>> {
    check_scores(src, "adv_d_loss")?;
    if src.len() != tgt.len() {
        return Err(Error::Argument(format!(
            "adv_d_loss: {} source scales vs {} target scales",
            src.len(),
            tgt.len()
        )));
    }
    let mut total: Option<Tensor<E>> = None;
    for (s, t) in src.iter().zip(tgt) {
        let real = log_clamped(s).mean();
        let fake = log_clamped(&t.scale(-E::one()).add_scalar(E::one())).mean();
        let term = real.add(&fake)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty");
    Ok(total.scale(E::lit(-1.0 / src.len() as f64)))
}

/// Non-saturating generator term `-E[log D(tgt)]` averaged over scales.
pub fn adv_g_loss<E: Element>(tgt: &[Tensor<E>]) -> Result<Tensor<E>> {
    check_scores(tgt, "adv_g_loss")?;
    let mut total: Option<Tensor<E>> = None;
    for t in tgt {
        let term = log_clamped(t).mean();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty");
    Ok(total.scale(E::lit(-1.0 / tgt.len() as f64)))
}

/// Which operands of the memory regularizer carry gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MrGradient {
    /// Each direction treats the other head's distribution as a fixed target.
    #[default]
    Detached,
    /// Both operands of both directions are differentiated.
    Both,
}

/// Symmetric cross-entropy between the two heads,
/// `-Σ p_aux log p_primary - Σ p_primary log p_aux`, averaged over pixels.
pub fn memory_reg<E: Element>(p_aux: &Tensor<E>, p_primary: &Tensor<E>, mode: MrGradient) -> Result<Tensor<E>> {
    let (n, _, hw) = pixel_count(p_aux, "memory_reg")?;
    if p_aux.shape() != p_primary.shape() {
        return Err(Error::shape(
            "memory_reg",
            format!("{:?} vs {:?}", p_aux.shape(), p_primary.shape()),
        ));
    }
    let (aux_target, primary_target) = match mode {
        MrGradient::Detached => (p_aux.detach(), p_primary.detach()),
        MrGradient::Both => (p_aux.clone(), p_primary.clone()),
    };
    let aux_to_primary = aux_target.mul(&log_clamped(p_primary))?.sum();
    let primary_to_aux = primary_target.mul(&log_clamped(p_aux))?.sum();
    Ok(aux_to_primary
        .add(&primary_to_aux)?
        .scale(E::lit(-1.0 / (n * hw) as f64)))
}

/// Fused class per pixel from `[C, HW]` planes of both heads.
pub fn fuse_scores(primary: &[f32], aux: &[f32], num_classes: usize) -> Result<Vec<u8>> {
    if primary.len() != aux.len() {
        return Err(Error::Argument(format!(
            "fusion inputs differ in size: {} vs {}",
            primary.len(),
            aux.len()
        )));
    }
    if num_classes == 0 || num_classes > u8::MAX as usize + 1 || !primary.len().is_multiple_of(num_classes) {
        return Err(Error::Argument(format!(
            "{} values do not split into {num_classes} class planes",
            primary.len()
        )));
    }
    let hw = primary.len() / num_classes;
    let mut out = vec![0u8; hw];
    for (px, slot) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..num_classes {
            let i = c * hw + px;
            let score = primary[i] as f64 + 0.5 * aux[i] as f64;
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        *slot = best as u8;
    }
    Ok(out)
}

/// Pseudo labels `argmax(p_primary + 0.5 p_aux)` for a batch of `[N, C, H, W]` maps.
pub fn fuse_pseudo_labels(p_primary: &Tensor<f32>, p_aux: &Tensor<f32>) -> Result<Vec<PseudoLabelMap>> {
    if p_primary.shape() != p_aux.shape() {
        return Err(Error::Argument(format!(
            "fusion needs aligned maps, got {:?} and {:?}",
            p_primary.shape(),
            p_aux.shape()
        )));
    }
    let (n, c, hw) = pixel_count(p_primary, "fuse_pseudo_labels")?;
    let (h, w) = (p_primary.shape()[2], p_primary.shape()[3]);
    let (pp, pa) = (p_primary.data(), p_aux.data());
    (0..n)
        .map(|i| {
            let range = i * c * hw..(i + 1) * c * hw;
            Ok(PseudoLabelMap {
                height: h,
                width: w,
                labels: fuse_scores(&pp[range.clone()], &pa[range], c)?,
                rule: FusionRule::PrimaryPlusHalfAux,
            })
        })
        .collect()
}

/// Median-frequency weights with square-root damping, clipped to
/// `[0.5, 5.0]`. Classes that never occur get the ceiling.
pub fn class_balance_weights(maps: &[PseudoLabelMap], num_classes: usize) -> Result<ClassBalanceWeights> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for m in maps {
        for &y in &m.labels {
            let y = y as usize;
            if y >= num_classes {
                return Err(Error::Argument(format!("label {y} out of range for {num_classes} classes")));
            }
            counts[y] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Argument("class balance needs at least one labelled pixel".into()));
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let mid = present.len() / 2;
    let median = if present.len().is_multiple_of(2) {
        (present[mid - 1] + present[mid]) / 2.0
    } else {
        present[mid]
    };
    let weights = freqs
        .iter()
        .map(|&f| {
            if f == 0.0 {
                ClassBalanceWeights::MAX
            } else {
                (median / f).sqrt()
            }
        })
        .collect();
    ClassBalanceWeights::new(weights)
}

/// Components of the Stage-I objective for one batch.
pub struct Stage1Parts<E: Element> {
    pub seg_primary: Tensor<E>,
    pub seg_aux: Tensor<E>,
    pub adv_primary: Tensor<E>,
    pub adv_aux: Tensor<E>,
    pub mr: Tensor<E>,
}

/// Components of the Stage-II objective for one batch.
pub struct Stage2Parts<E: Element> {
    pub pseg_primary: Tensor<E>,
    pub pseg_aux: Tensor<E>,
    pub mr: Tensor<E>,
}

fn weighted_sum<E: Element>(terms: &[(&Tensor<E>, f64)]) -> Result<Tensor<E>> {
    let mut acc: Option<Tensor<E>> = None;
    for (t, w) in terms {
        let term = if *w == 1.0 { (*t).clone() } else { t.scale(E::lit(*w)) };
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Argument("empty loss sum".into()))
}

/// `L_seg^p + 0.5 L_seg^a + 0.001 L_adv^p + 0.0002 L_adv^a + λ L_mr` under the given weights.
pub fn stage1_total<E: Element>(w: &LossWeights, parts: &Stage1Parts<E>) -> Result<Tensor<E>> {
    weighted_sum(&[
        (&parts.seg_primary, 1.0),
        (&parts.seg_aux, w.aux_seg),
        (&parts.adv_primary, w.adv_primary),
        (&parts.adv_aux, w.adv_aux),
        (&parts.mr, w.lambda_mr),
    ])
}

/// `L_pseg^p + 0.5 L_pseg^a + λ L_mr` under the given weights.
pub fn stage2_total<E: Element>(w: &LossWeights, parts: &Stage2Parts<E>) -> Result<Tensor<E>> {
    weighted_sum(&[
        (&parts.pseg_primary, 1.0),
        (&parts.pseg_aux, w.aux_seg),
        (&parts.mr, w.lambda_mr),
    ])
}
