//! Training losses over per-voxel class probabilities and their gradients.
//!
//! Probabilities are flat `n_voxels x n_class` row-major arrays. Each loss
//! returns its value and the gradient with respect to those probabilities;
//! [`total_loss_logits`] chains the sum through the softmax.

use serde::{Deserialize, Serialize};

use crate::linalg::{softmax, softmax_backward};
use crate::{Error, Result};

/// Floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lovasz: f64,
    pub scal_geo: f64,
    pub scal_sem: f64,
    pub total: f64,
}

/// A scalar loss and its gradient with respect to the probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check(probs: &[f64], n_class: usize, labels: &[u8]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if n_class < 2 || probs.len() != labels.len() * n_class {
        return Err(Error::Shape(format!(
            "{} probabilities for {} voxels of {} classes",
            probs.len(),
            labels.len(),
            n_class
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= n_class) {
        return Err(Error::LabelOutOfRange { label: l as usize, n_class });
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("class probabilities".into()));
    }
    Ok(())
}

fn floored_ln(x: f64) -> (f64, f64) {
    if x > PROB_FLOOR {
        (x.ln(), 1.0 / x)
    } else {
        (PROB_FLOOR.ln(), 0.0)
    }
}

/// Mean negative log-likelihood of the labels.
pub fn cross_entropy(probs: &[f64], n_class: usize, labels: &[u8]) -> Result<LossGrad> {
    check(probs, n_class, labels)?;
    let n = labels.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut value = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        let j = v * n_class + l as usize;
        let (ln, d) = floored_ln(probs[j]);
        value -= ln;
        grad[j] = -d / n;
    }
    Ok(LossGrad { value: value / n, grad })
}

/// Per-position weights of the Lovász extension of the Jaccard loss for a
/// ground-truth vector already sorted by descending error.
fn lovasz_weights(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let w = jac - prev;
            prev = jac;
            w
        })
        .collect()
}

/// Lovász-softmax averaged over the classes present in `labels`.
pub fn lovasz_softmax(probs: &[f64], n_class: usize, labels: &[u8]) -> Result<LossGrad> {
    check(probs, n_class, labels)?;
    let mut present = vec![false; n_class];
    labels.iter().for_each(|&l| present[l as usize] = true);
    let classes: Vec<usize> = (0..n_class).filter(|&c| present[c]).collect();
    let inv = 1.0 / classes.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut value = 0.0;
    for &c in &classes {
        let mut errs: Vec<(f64, usize, bool)> = labels
            .iter()
            .enumerate()
            .map(|(v, &l)| {
                let p = probs[v * n_class + c];
                let fg = l as usize == c;
                (if fg { 1.0 - p } else { p }, v, fg)
            })
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let gt_sorted: Vec<bool> = errs.iter().map(|e| e.2).collect();
        for ((e, v, fg), w) in errs.iter().zip(lovasz_weights(&gt_sorted)) {
            value += inv * e * w;
            grad[v * n_class + c] += inv * w * if *fg { -1.0 } else { 1.0 };
        }
    }
    Ok(LossGrad { value, grad })
}

/// Precision/recall/specificity affinity for one soft class. Returns the
/// loss and its derivative with respect to each `p_hat`.
fn scal_class(p_hat: &[f64], y: &[bool]) -> (f64, Vec<f64>) {
    let a: f64 = p_hat.iter().zip(y).filter(|(_, &t)| t).map(|(p, _)| p).sum();
    let b: f64 = p_hat.iter().sum();
    let ny = y.iter().filter(|&&t| t).count() as f64;
    let d: f64 = p_hat.iter().zip(y).filter(|(_, &t)| !t).map(|(p, _)| 1.0 - p).sum();
    let nneg = y.len() as f64 - ny;

    let mut sum_ln = 0.0;
    // d(sum_ln)/d p_hat_i = ca * [y_i] + cb + cd * [!y_i]
    let (mut ca, mut cb, mut cd) = (0.0, 0.0, 0.0);
    if b > 0.0 {
        let (ln, dl) = floored_ln(a / b);
        sum_ln += ln;
        ca += dl / b;
        cb -= dl * a / (b * b);
    }
    if ny > 0.0 {
        let (ln, dl) = floored_ln(a / ny);
        sum_ln += ln;
        ca += dl / ny;
    }
    if nneg > 0.0 {
        let (ln, dl) = floored_ln(d / nneg);
        sum_ln += ln;
        cd -= dl / nneg;
    }
    let grad = y
        .iter()
        .map(|&t| -(if t { ca } else { cd } + cb) / 3.0)
        .collect();
    (-sum_ln / 3.0, grad)
}

/// `(scal_geo, scal_sem)`. Geometry treats every non-empty class as
/// occupied; semantics averages over the non-empty classes present in
/// `labels` and is zero when there are none.
pub fn scal_losses(probs: &[f64], n_class: usize, labels: &[u8]) -> Result<(LossGrad, LossGrad)> {
    check(probs, n_class, labels)?;
    let nv = labels.len();

    let occ: Vec<f64> = (0..nv).map(|v| 1.0 - probs[v * n_class]).collect();
    let y: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let (geo, dgeo) = scal_class(&occ, &y);
    let mut geo_grad = vec![0.0; probs.len()];
    for v in 0..nv {
        geo_grad[v * n_class] = -dgeo[v];
    }

    let mut present = vec![false; n_class];
    labels.iter().for_each(|&l| present[l as usize] = true);
    let classes: Vec<usize> = (1..n_class).filter(|&c| present[c]).collect();
    let mut sem = 0.0;
    let mut sem_grad = vec![0.0; probs.len()];
    if !classes.is_empty() {
        let inv = 1.0 / classes.len() as f64;
        for &c in &classes {
            let p: Vec<f64> = (0..nv).map(|v| probs[v * n_class + c]).collect();
            let y: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
            let (val, dp) = scal_class(&p, &y);
            sem += inv * val;
            for v in 0..nv {
                sem_grad[v * n_class + c] += inv * dp[v];
            }
        }
    }
    Ok((
        LossGrad { value: geo, grad: geo_grad },
        LossGrad { value: sem, grad: sem_grad },
    ))
}

/// Unweighted sum of the four losses; the gradient is with respect to the
/// probabilities.
pub fn total_loss(probs: &[f64], n_class: usize, labels: &[u8]) -> Result<(LossBreakdown, Vec<f64>)> {
    let ce = cross_entropy(probs, n_class, labels)?;
    let ls = lovasz_softmax(probs, n_class, labels)?;
    let (geo, sem) = scal_losses(probs, n_class, labels)?;
    let total = ce.value + ls.value + geo.value + sem.value;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let grad = (0..probs.len())
        .map(|i| ce.grad[i] + ls.grad[i] + geo.grad[i] + sem.grad[i])
        .collect();
    Ok((
        LossBreakdown {
            ce: ce.value,
            lovasz: ls.value,
            scal_geo: geo.value,
            scal_sem: sem.value,
            total,
        },
        grad,
    ))
}

/// Row-wise softmax of flat logits.
pub fn softmax_rows(logits: &[f64], n_class: usize) -> Vec<f64> {
    logits.chunks(n_class).flat_map(softmax).collect()
}

/// [`total_loss`] on `softmax(logits)` with the gradient taken through the
/// softmax. Returns the probabilities as well.
pub fn total_loss_logits(logits: &[f64], n_class: usize, labels: &[u8]) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let probs = softmax_rows(logits, n_class);
    let (lb, gp) = total_loss(&probs, n_class, labels)?;
    let mut gl = vec![0.0; logits.len()];
    for ((p, g), out) in probs.chunks(n_class).zip(gp.chunks(n_class)).zip(gl.chunks_mut(n_class)) {
        softmax_backward(p, g, out);
    }
    Ok((lb, gl, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn one_hot(labels: &[u8], n: usize) -> Vec<f64> {
        labels
            .iter()
            .flat_map(|&l| (0..n).map(move |c| if c == l as usize { 1.0 } else { 0.0 }))
            .collect()
    }

    #[test]
    fn perfect_predictions_are_free() {
        let labels = [0u8, 2, 1, 2, 0, 3];
        let (lb, _) = total_loss(&one_hot(&labels, 4), 4, &labels).unwrap();
        assert_eq!(lb, LossBreakdown::default());
    }

    #[test]
    fn cross_entropy_examples() {
        let labels = [3u8, 16];
        let u = vec![1.0 / 17.0; 34];
        assert!((cross_entropy(&u, 17, &labels).unwrap().value - 17f64.ln()).abs() < 1e-12);
        let probs = [0.5, 0.5, 0.75, 0.25];
        let v = cross_entropy(&probs, 2, &[0, 1]).unwrap().value;
        assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((v - 1.0397).abs() < 5e-5);
        assert!(matches!(cross_entropy(&probs, 2, &[0, 2]), Err(Error::LabelOutOfRange { label: 2, .. })));
        assert!(matches!(cross_entropy(&[], 2, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn lovasz_single_element() {
        for e in [0.0, 0.1, 0.37, 0.9] {
            let v = lovasz_softmax(&[1.0 - e, e], 2, &[0]).unwrap().value;
            assert!((v - e).abs() < 1e-15);
        }
    }

    /// Materializes the Jaccard loss of every prefix of the error ordering.
    fn lovasz_oracle(probs: &[f64], n: usize, labels: &[u8]) -> f64 {
        let present: Vec<usize> = (0..n).filter(|&c| labels.iter().any(|&l| l as usize == c)).collect();
        let mut total = 0.0;
        for &c in &present {
            let nv = labels.len();
            let err = |v: usize| {
                let p = probs[v * n + c];
                if labels[v] as usize == c {
                    1.0 - p
                } else {
                    p
                }
            };
            let mut order: Vec<usize> = (0..nv).collect();
            order.sort_by(|&a, &b| err(b).total_cmp(&err(a)).then(a.cmp(&b)));
            let gt: std::collections::BTreeSet<usize> = (0..nv).filter(|&v| labels[v] as usize == c).collect();
            let jaccard_loss = |set: &std::collections::BTreeSet<usize>| {
                let union = gt.union(set).count();
                set.len() as f64 / union as f64
            };
            let mut prefix = std::collections::BTreeSet::new();
            let mut prev = 0.0;
            for &v in &order {
                prefix.insert(v);
                let cur = jaccard_loss(&prefix);
                total += err(v) * (cur - prev);
                prev = cur;
            }
        }
        total / present.len() as f64
    }

    fn random_instance(seed: u64, nv: usize, n: usize) -> (Vec<f64>, Vec<u8>) {
        let mut rng = stream_rng(seed, 1);
        let logits: Vec<f64> = (0..nv * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..nv).map(|_| rng.random_range(0..n as u8)).collect();
        (logits, labels)
    }

    #[test]
    fn lovasz_matches_oracle() {
        for seed in 0..30 {
            let (logits, labels) = random_instance(seed, 12, 4);
            let probs = softmax_rows(&logits, 4);
            let got = lovasz_softmax(&probs, 4, &labels).unwrap().value;
            assert!((got - lovasz_oracle(&probs, 4, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn lovasz_on_hard_predictions_is_one_minus_jaccard() {
        let labels = [0u8, 1, 1, 2, 2, 0, 1];
        let pred = [0u8, 1, 2, 2, 0, 0, 1];
        let got = lovasz_softmax(&one_hot(&pred, 3), 3, &labels).unwrap().value;
        let mut want = 0.0;
        for c in 0..3u8 {
            let inter = labels.iter().zip(&pred).filter(|(l, p)| **l == c && **p == c).count() as f64;
            let union = labels.iter().zip(&pred).filter(|(l, p)| **l == c || **p == c).count() as f64;
            want += 1.0 - inter / union;
        }
        assert!((got - want / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scal_geo_hand_case() {
        // occupied probability (1, 1, 0.5, 0) written through p_empty
        let probs = [0.0, 1.0, 0.0, 1.0, 0.5, 0.5, 1.0, 0.0];
        let (geo, _) = scal_losses(&probs, 2, &[1, 0, 1, 0]).unwrap();
        let want = -(0.6f64.ln() + 0.75f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((geo.value - want).abs() < 1e-15);
        assert!((geo.value - 0.4972).abs() < 1e-4);
    }

    #[test]
    fn scal_degenerate_inputs_stay_finite() {
        let probs = [0.7, 0.3, 0.9, 0.1];
        let (geo, sem) = scal_losses(&probs, 2, &[0, 0]).unwrap();
        assert!(geo.value.is_finite() && geo.value >= 0.0);
        assert_eq!(sem.value, 0.0);
        let (geo, _) = scal_losses(&[0.0, 1.0, 0.0, 1.0], 2, &[1, 1]).unwrap();
        assert_eq!(geo.value, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let (logits, labels) = random_instance(seed + 100, 9, 4);
            let (_, grad, _) = total_loss_logits(&logits, 4, &labels).unwrap();
            let mut probe = logits.clone();
            for i in 0..logits.len() {
                probe[i] = logits[i] + h;
                let up = total_loss_logits(&probe, 4, &labels).unwrap().0.total;
                probe[i] = logits[i] - h;
                let down = total_loss_logits(&probe, 4, &labels).unwrap().0.total;
                probe[i] = logits[i];
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(rel <= 1e-4, "seed {seed} logit {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn components_sum_to_total() {
        let (logits, labels) = random_instance(5, 20, 5);
        let (lb, _, _) = total_loss_logits(&logits, 5, &labels).unwrap();
        assert_eq!(lb.total, lb.ce + lb.lovasz + lb.scal_geo + lb.scal_sem);
        assert!(lb.ce > 0.0 && lb.lovasz > 0.0 && lb.scal_geo > 0.0 && lb.scal_sem > 0.0);
    }
}
