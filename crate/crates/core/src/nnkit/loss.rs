use super::{sigmoid, NnError};

pub const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy of a probability against a {0, 1} target.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// BCE on `sigmoid(logit)` with the positive term weighted by `pos_weight`.
/// Returns `(loss, dloss/dlogit, p)`.
pub fn bce_with_logit(logit: f64, y: f64, pos_weight: f64) -> (f64, f64, f64) {
    let p = sigmoid(logit);
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(pos_weight * y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let d = pos_weight * y * (p - 1.0) + (1.0 - y) * p;
    (loss, d, p)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]` and its gradient with respect to the logits.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), NnError> {
    if target >= logits.len() {
        return Err(NnError::Bounds {
            index: target,
            size: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_z).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    super::layers::dot(a, b) / (na * nb)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// InfoNCE over cosine similarities scaled by `1 / temperature`, with the
/// positive in slot 0.
pub fn contrastive_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutput, NnError> {
    if cfg.temperature <= 0.0 {
        return Err(NnError::Domain(format!(
            "temperature {} must be positive",
            cfg.temperature
        )));
    }
    if negatives.is_empty() {
        return Err(NnError::Domain("at least one negative is required".into()));
    }
    let na = norm(anchor);
    let others: Vec<&[f64]> = std::iter::once(positive).chain(negatives.iter().copied()).collect();
    let norms: Vec<f64> = others.iter().map(|v| norm(v)).collect();
    if na == 0.0 || norms.iter().any(|&n| n == 0.0) {
        return Err(NnError::Domain("zero-norm embedding".into()));
    }
    for v in &others {
        if v.len() != anchor.len() {
            return Err(NnError::Shape(format!(
                "embedding of length {} against anchor of length {}",
                v.len(),
                anchor.len()
            )));
        }
    }
    let tau = cfg.temperature;
    let cos: Vec<f64> = others
        .iter()
        .zip(&norms)
        .map(|(v, nv)| super::layers::dot(anchor, v) / (na * nv))
        .collect();
    let scores: Vec<f64> = cos.iter().map(|c| c / tau).collect();
    let probs = softmax(&scores);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let loss = lse - scores[0];

    let mut d_anchor = vec![0.0; anchor.len()];
    let mut d_others = Vec::with_capacity(others.len());
    for (k, v) in others.iter().enumerate() {
        let ds = (probs[k] - if k == 0 { 1.0 } else { 0.0 }) / tau;
        let nv = norms[k];
        let c = cos[k];
        let mut dv = vec![0.0; v.len()];
        for j in 0..anchor.len() {
            d_anchor[j] += ds * (v[j] / (na * nv) - c * anchor[j] / (na * na));
            dv[j] = ds * (anchor[j] / (na * nv) - c * v[j] / (nv * nv));
        }
        d_others.push(dv);
    }
    let d_positive = d_others.remove(0);
    Ok(ContrastiveOutput {
        loss,
        d_anchor,
        d_positive,
        d_negatives: d_others,
    })
}
