//! Classification, domain-alignment and budget objectives.
//!
//! Adversarial alignment follows the gradient-reversal formulation: the
//! scalar that gets minimized is the domain classification loss evaluated on
//! reversed inputs, so the discriminator descends it while everything
//! upstream of the reversal ascends it. The alignment loss proper is the
//! negated domain classification loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bindings, ModelBundle};
use crate::tensor::{Tape, Tensor, Var};

/// Lower/upper clamp applied to discriminator outputs before the logarithm.
pub const DISCRIMINATOR_EPS: f64 = 1e-7;

/// Which alignment objective couples the two domains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AlignmentVariant {
    /// Discriminator on extracted features.
    Dann {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    /// Discriminator on class probabilities, samples re-weighted by
    /// `exp(-entropy)`.
    Dannpe {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    /// Squared MMD between feature batches under an RBF kernel. A missing
    /// `sigma` is filled in from the first batch by the median heuristic.
    Mmd {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        sigma: Option<f64>,
    },
}

fn default_lambda() -> f64 {
    1.0
}

impl AlignmentVariant {
    pub fn lambda(&self) -> f64 {
        match *self {
            AlignmentVariant::Dann { lambda }
            | AlignmentVariant::Dannpe { lambda }
            | AlignmentVariant::Mmd { lambda, .. } => lambda,
        }
    }

    pub fn is_adversarial(&self) -> bool {
        !matches!(self, AlignmentVariant::Mmd { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlignmentVariant::Dann { .. } => "dann",
            AlignmentVariant::Dannpe { .. } => "dannpe",
            AlignmentVariant::Mmd { .. } => "mmd",
        }
    }

    /// Discriminator input width for an extractor of width `features` and
    /// `classes` outputs; `None` when the variant has no discriminator.
    pub fn discriminator_input(&self, features: usize, classes: usize) -> Option<usize> {
        match self {
            AlignmentVariant::Dann { .. } => Some(features),
            AlignmentVariant::Dannpe { .. } => Some(classes),
            AlignmentVariant::Mmd { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambda = self.lambda();
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config("variant.lambda", "must be finite and >= 0"));
        }
        if let AlignmentVariant::Mmd { sigma: Some(s), .. } = self {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::config("variant.sigma", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of `n x K` logits against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(ls, labels)?;
    let m = tape.mean(picked, None)?;
    tape.neg(m)
}

/// Domain classification loss plus whether any output had to be clamped.
#[derive(Clone, Copy, Debug)]
pub struct DomainLoss {
    pub loss: Var,
    pub clamped: bool,
}

fn normalized_weights(name: &'static str, w: &[f64], n: usize) -> Result<Vec<f64>> {
    if w.len() != n {
        return Err(Error::shape("domain_cls_loss", format!("{} weights for {n} outputs", w.len())));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(name, "weights must be finite and nonnegative"));
    }
    let mean = w.iter().sum::<f64>() / n as f64;
    if !(mean > 0.0) {
        return Err(Error::invalid(name, "weights are all zero"));
    }
    Ok(w.iter().map(|v| v / mean).collect())
}

fn weighted_mean_log(tape: &mut Tape, p: Var, weights: Option<&[f64]>, name: &'static str) -> Result<Var> {
    let logp = tape.log(p)?;
    let shaped = match weights {
        None => logp,
        Some(w) => {
            let shape = tape.value(p)?.shape().to_vec();
            let w = normalized_weights(name, w, shape[0])?;
            let c = tape.constant(Tensor::new(shape, w)?);
            tape.mul(logp, c)?
        }
    };
    tape.mean(shaped, None)
}

/// `-mean_s[w log d_s] - mean_t[w log(1 - d_t)]` on `n x 1` discriminator
/// outputs. Weights, when given, are rescaled to mean one per domain.
/// Outputs are clamped into `[eps, 1 - eps]` first; `clamped` reports whether
/// that changed anything.
pub fn domain_cls_loss(
    tape: &mut Tape,
    d_src: Var,
    d_tgt: Var,
    w_src: Option<&[f64]>,
    w_tgt: Option<&[f64]>,
) -> Result<DomainLoss> {
    let eps = DISCRIMINATOR_EPS;
    let outside = |t: &Tensor| t.data().iter().any(|&v| !(eps..=1.0 - eps).contains(&v));
    let clamped = outside(tape.value(d_src)?) || outside(tape.value(d_tgt)?);

    let ds = tape.clamp(d_src, eps, 1.0 - eps)?;
    let dt = tape.clamp(d_tgt, eps, 1.0 - eps)?;
    let src_term = weighted_mean_log(tape, ds, w_src, "w_src")?;
    let neg_dt = tape.neg(dt)?;
    let one_minus = tape.add_scalar(neg_dt, 1.0)?;
    let tgt_term = weighted_mean_log(tape, one_minus, w_tgt, "w_tgt")?;
    let total = tape.add(src_term, tgt_term)?;
    Ok(DomainLoss {
        loss: tape.neg(total)?,
        clamped,
    })
}

/// `exp(-H(p_i))` for each row of a probability matrix, with `0 log 0 = 0`.
/// Computed from plain values, so no gradient flows through the weights.
pub fn entropy_weights(probs: &Tensor) -> Result<Vec<f64>> {
    let k = match probs.shape() {
        [_, k] => *k,
        s => return Err(Error::shape("entropy_weights", format!("expected a matrix, got {s:?}"))),
    };
    probs
        .data()
        .chunks(k)
        .enumerate()
        .map(|(i, row)| {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid("probs", format!("row {i} is not a distribution")));
            }
            let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            Ok((-h).exp())
        })
        .collect()
}

/// Biased squared MMD between two feature batches under
/// `K(f, f') = exp(-||f - f'||^2 / (2 sigma))`.
pub fn mmd2_rbf(tape: &mut Tape, fs: Var, ft: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("{sigma} must be positive")));
    }
    let mut kernel_mean = |a: Var, b: Var| -> Result<Var> {
        let d = tape.pairwise_sq_dist(a, b)?;
        let scaled = tape.scale(d, -1.0 / (2.0 * sigma))?;
        let k = tape.exp(scaled)?;
        tape.mean(k, None)
    };
    let ss = kernel_mean(fs, fs)?;
    let tt = kernel_mean(ft, ft)?;
    let st = kernel_mean(fs, ft)?;
    let within = tape.add(ss, tt)?;
    let cross = tape.scale(st, 2.0)?;
    tape.sub(within, cross)
}

/// Median pairwise squared distance over the rows of `features`, used as the
/// RBF bandwidth when none is configured. Falls back to 1 when all rows
/// coincide.
pub fn median_bandwidth(features: &Tensor) -> f64 {
    let n = features.rows();
    let mut d = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (features.row(i), features.row(j));
            d.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// `|sum(beta) - budget|`, with subgradient 0 at the kink.
pub fn beta_penalty(tape: &mut Tape, betas: &[Var], budget: f64) -> Result<Var> {
    let stacked = tape.stack(betas)?;
    let total = tape.sum(stacked)?;
    let shifted = tape.add_scalar(total, -budget)?;
    tape.abs(shifted)
}

/// Per-pass inputs of [`alignment_loss`]: extracted features of both
/// domains and, for the probability-input variant, the classifier logits.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentInputs {
    pub features_src: Var,
    pub features_tgt: Var,
    pub logits_src: Option<Var>,
    pub logits_tgt: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentOutput {
    /// Scalar to minimize: reversed-input domain classification loss for the
    /// adversarial variants, `lambda * MMD^2` otherwise.
    pub objective: Var,
    /// Domain classification loss value (adversarial variants only).
    pub dom_cls: Option<f64>,
    /// Alignment loss value: `-dom_cls`, or `MMD^2`.
    pub dom: f64,
    pub clamped: bool,
}

/// Builds the alignment objective of `variant` on the current tape.
pub fn alignment_loss(
    tape: &mut Tape,
    bound: &Bindings,
    model: &ModelBundle,
    variant: &AlignmentVariant,
    inputs: AlignmentInputs,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<AlignmentOutput> {
    match *variant {
        AlignmentVariant::Mmd { lambda, sigma } => {
            let sigma = sigma.ok_or_else(|| Error::Contract("MMD bandwidth not resolved".into()))?;
            let m = mmd2_rbf(tape, inputs.features_src, inputs.features_tgt, sigma)?;
            let dom = tape.value(m)?.item()?;
            Ok(AlignmentOutput {
                objective: tape.scale(m, lambda)?,
                dom_cls: None,
                dom,
                clamped: false,
            })
        }
        AlignmentVariant::Dann { lambda } | AlignmentVariant::Dannpe { lambda } => {
            let disc = model
                .discriminator
                .as_ref()
                .ok_or_else(|| Error::Contract("adversarial alignment needs a discriminator".into()))?;
            let (zs, zt, ws, wt) = if let AlignmentVariant::Dannpe { .. } = variant {
                let (ls, lt) = inputs
                    .logits_src
                    .zip(inputs.logits_tgt)
                    .ok_or_else(|| Error::Contract("probability-input alignment needs logits".into()))?;
                let ps = tape.softmax(ls)?;
                let pt = tape.softmax(lt)?;
                let ws = entropy_weights(tape.value(ps)?)?;
                let wt = entropy_weights(tape.value(pt)?)?;
                (ps, pt, Some(ws), Some(wt))
            } else {
                (inputs.features_src, inputs.features_tgt, None, None)
            };
            let rs = tape.grl(zs, lambda)?;
            let rt = tape.grl(zt, lambda)?;
            let mut rng = rng;
            let ds = disc.forward(tape, bound, rs, rng.as_deref_mut())?;
            let dt = disc.forward(tape, bound, rt, rng.as_deref_mut())?;
            let dl = domain_cls_loss(tape, ds, dt, ws.as_deref(), wt.as_deref())?;
            let value = tape.value(dl.loss)?.item()?;
            Ok(AlignmentOutput {
                objective: dl.loss,
                dom_cls: Some(value),
                dom: -value,
                clamped: dl.clamped,
            })
        }
    }
}
