//! Objective terms: H/E contrastive hinge, pseudo-label averaging and
//! sharpening, MixUp, and the combined batch loss with its gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;
/// Probability floor inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("label distribution needs at least one class".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput(format!("negative or non-finite probability in {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        assert!(class < num_classes, "class {class} out of range for {num_classes} classes");
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Lowest index among ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// H and E features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub f_h: Vec<f64>,
    pub f_e: Vec<f64>,
}

impl FeaturePair {
    pub fn new(f_h: Vec<f64>, f_e: Vec<f64>) -> Result<Self> {
        if f_h.len() != f_e.len() {
            return Err(Error::InvalidInput(format!(
                "feature dimensions differ: {} vs {}",
                f_h.len(),
                f_e.len()
            )));
        }
        if f_h.iter().chain(&f_e).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        Ok(Self { f_h, f_e })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslHyperParams {
    pub margin: f64,
    pub temperature: f64,
    pub k: usize,
    pub alpha: f64,
    pub lambda_u: f64,
    pub lambda_c: f64,
}

impl Default for SslHyperParams {
    fn default() -> Self {
        Self {
            margin: 37.0,
            temperature: 0.5,
            k: 2,
            alpha: 2.0,
            lambda_u: 7.5,
            lambda_c: 0.1,
        }
    }
}

impl SslHyperParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.margin >= 0.0
            && self.temperature > 0.0
            && self.k >= 1
            && self.alpha > 0.0
            && self.lambda_u >= 0.0
            && self.lambda_c >= 0.0
            && [self.margin, self.temperature, self.alpha, self.lambda_u, self.lambda_c]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SSL hyperparameters: {self:?}")))
        }
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(|f_h_i - f_e_i| - |f_h_i - f_e_k| + m, 0)`.
pub fn contrastive_loss(pair_i: &FeaturePair, f_e_k: &[f64], margin: f64) -> Result<f64> {
    if f_e_k.len() != pair_i.f_h.len() || pair_i.f_e.len() != pair_i.f_h.len() {
        return Err(Error::InvalidInput(format!(
            "feature dimensions differ: {} / {} / {}",
            pair_i.f_h.len(),
            pair_i.f_e.len(),
            f_e_k.len()
        )));
    }
    let pos = l2_distance(&pair_i.f_h, &pair_i.f_e);
    let neg = l2_distance(&pair_i.f_h, f_e_k);
    Ok((pos - neg + margin).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_f_h_i: Vec<f64>,
    pub d_f_e_i: Vec<f64>,
    pub d_f_e_k: Vec<f64>,
}

/// Loss and subgradient. At a zero distance the corresponding unit vector is
/// taken as zero; on the inactive side of the hinge all gradients are zero.
pub fn contrastive_loss_grad(pair_i: &FeaturePair, f_e_k: &[f64], margin: f64) -> Result<ContrastiveGrad> {
    let loss = contrastive_loss(pair_i, f_e_k, margin)?;
    let d = pair_i.f_h.len();
    let mut grad = ContrastiveGrad {
        loss,
        d_f_h_i: vec![0.0; d],
        d_f_e_i: vec![0.0; d],
        d_f_e_k: vec![0.0; d],
    };
    if loss <= 0.0 {
        return Ok(grad);
    }
    let pos = l2_distance(&pair_i.f_h, &pair_i.f_e);
    let neg = l2_distance(&pair_i.f_h, f_e_k);
    for j in 0..d {
        let up = if pos > 0.0 { (pair_i.f_h[j] - pair_i.f_e[j]) / pos } else { 0.0 };
        let un = if neg > 0.0 { (pair_i.f_h[j] - f_e_k[j]) / neg } else { 0.0 };
        grad.d_f_h_i[j] = up - un;
        grad.d_f_e_i[j] = -up;
        grad.d_f_e_k[j] = un;
    }
    Ok(grad)
}

/// Elementwise mean of K predictions.
pub fn average_predictions(preds: &[LabelDistribution]) -> Result<LabelDistribution> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average an empty prediction list".into()))?;
    let c = first.num_classes();
    if preds.iter().any(|p| p.num_classes() != c) {
        return Err(Error::InvalidInput("predictions have different class counts".into()));
    }
    let k = preds.len() as f64;
    let mut probs = vec![0.0; c];
    for p in preds {
        for (acc, v) in probs.iter_mut().zip(p.probs()) {
            *acc += v;
        }
    }
    for v in &mut probs {
        *v /= k;
    }
    Ok(LabelDistribution { probs })
}

/// `y_c^(1/T) / sum_j y_j^(1/T)`, with `0^(1/T) = 0`.
pub fn sharpen(y: &LabelDistribution, temperature: f64) -> Result<LabelDistribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    if temperature == 1.0 {
        return Ok(y.clone());
    }
    let inv_t = 1.0 / temperature;
    // Scale by the max first so large 1/T cannot underflow every entry.
    let max = y.probs.iter().copied().fold(0.0, f64::max);
    let powered: Vec<f64> = y
        .probs
        .iter()
        .map(|&p| if p > 0.0 { (p / max).powf(inv_t) } else { 0.0 })
        .collect();
    let z: f64 = powered.iter().sum();
    Ok(LabelDistribution {
        probs: powered.into_iter().map(|p| p / z).collect(),
    })
}

/// One network input: an H image and an E image of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct HeSample {
    pub width: usize,
    pub height: usize,
    pub h: Vec<f64>,
    pub e: Vec<f64>,
}

impl HeSample {
    pub fn new(width: usize, height: usize, h: Vec<f64>, e: Vec<f64>) -> Result<Self> {
        if h.len() != width * height || e.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "H/E sample {width}x{height} has {} / {} values",
                h.len(),
                e.len()
            )));
        }
        Ok(Self { width, height, h, e })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub x: HeSample,
    pub y: LabelDistribution,
    pub lambda_prime: f64,
    pub is_labeled: bool,
}

#[inline]
pub fn lambda_prime(lambda_raw: f64) -> f64 {
    lambda_raw.max(1.0 - lambda_raw)
}

/// Convex combination with `lambda' = max(lambda, 1 - lambda)`, applied to
/// both images and the label. The labeled flag follows `x_i`.
pub fn mixup(
    x_i: &HeSample,
    x_j: &HeSample,
    y_i: &LabelDistribution,
    y_j: &LabelDistribution,
    lambda_raw: f64,
    x_i_labeled: bool,
) -> Result<Mixed> {
    if !(0.0..=1.0).contains(&lambda_raw) {
        return Err(Error::InvalidInput(format!("mixing coefficient {lambda_raw} outside [0, 1]")));
    }
    if x_i.width != x_j.width || x_i.height != x_j.height {
        return Err(Error::InvalidInput(format!(
            "cannot mix {}x{} with {}x{}",
            x_i.width, x_i.height, x_j.width, x_j.height
        )));
    }
    if y_i.num_classes() != y_j.num_classes() {
        return Err(Error::InvalidInput("labels have different class counts".into()));
    }
    let lp = lambda_prime(lambda_raw);
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| lp * p + (1.0 - lp) * q).collect() };
    Ok(Mixed {
        x: HeSample {
            width: x_i.width,
            height: x_i.height,
            h: mix(&x_i.h, &x_j.h),
            e: mix(&x_i.e, &x_j.e),
        },
        y: LabelDistribution {
            probs: mix(y_i.probs(), y_j.probs()),
        },
        lambda_prime: lp,
        is_labeled: x_i_labeled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean cross-entropy over the labeled set.
    pub ce: f64,
    /// Unweighted squared-L2 term, `sum |y - y_hat|^2 / (C |U'|)`.
    pub l2: f64,
    /// Unweighted sum of contrastive terms.
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLossGrad {
    pub breakdown: LossBreakdown,
    /// dL/d(prediction) for each labeled entry.
    pub d_labeled: Vec<Vec<f64>>,
    /// dL/d(prediction) for each unlabeled entry.
    pub d_unlabeled: Vec<Vec<f64>>,
    /// dL/d(term) for every contrastive term (all equal to `lambda_c`).
    pub d_contrastive: f64,
}

/// `(prediction, target)`.
pub type Scored = (LabelDistribution, LabelDistribution);

fn check_classes(entries: &[Scored], c: usize) -> Result<()> {
    for (p, t) in entries {
        if p.num_classes() != c || t.num_classes() != c {
            return Err(Error::InvalidInput("inconsistent class count in loss inputs".into()));
        }
    }
    Ok(())
}

pub fn total_loss(labeled: &[Scored], unlabeled: &[Scored], contrastive_terms: &[f64], params: &SslHyperParams) -> Result<LossBreakdown> {
    Ok(total_loss_grad(labeled, unlabeled, contrastive_terms, params)?.breakdown)
}

pub fn total_loss_grad(
    labeled: &[Scored],
    unlabeled: &[Scored],
    contrastive_terms: &[f64],
    params: &SslHyperParams,
) -> Result<TotalLossGrad> {
    let (first, _) = labeled
        .first()
        .ok_or_else(|| Error::InvalidInput("total loss needs at least one labeled sample".into()))?;
    let c = first.num_classes();
    check_classes(labeled, c)?;
    check_classes(unlabeled, c)?;

    let nl = labeled.len() as f64;
    let mut ce = 0.0;
    let mut d_labeled = Vec::with_capacity(labeled.len());
    for (pred, target) in labeled {
        let mut d = vec![0.0; c];
        for j in 0..c {
            let y = target.probs[j];
            if y == 0.0 {
                continue;
            }
            let p = pred.probs[j];
            ce -= y * p.max(PROB_FLOOR).ln();
            if p > PROB_FLOOR {
                d[j] = -y / (p * nl);
            }
        }
        d_labeled.push(d);
    }
    ce /= nl;

    let mut l2 = 0.0;
    let mut d_unlabeled = Vec::with_capacity(unlabeled.len());
    if !unlabeled.is_empty() {
        let denom = c as f64 * unlabeled.len() as f64;
        for (pred, target) in unlabeled {
            let mut d = vec![0.0; c];
            for j in 0..c {
                let diff = target.probs[j] - pred.probs[j];
                l2 += diff * diff;
                d[j] = -2.0 * params.lambda_u * diff / denom;
            }
            d_unlabeled.push(d);
        }
        l2 /= denom;
    }

    let contrastive: f64 = contrastive_terms.iter().sum();
    let total = ce + params.lambda_u * l2 + params.lambda_c * contrastive;
    Ok(TotalLossGrad {
        breakdown: LossBreakdown { ce, l2, contrastive, total },
        d_labeled,
        d_unlabeled,
        d_contrastive: params.lambda_c,
    })
}
