use ndarray::{Array2, ArrayView1};
use serde::Serialize;

use crate::layout::{AugmentedSequence, TokenKind};

/// Cross-entropy over raw targets plus training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    /// Mean cross-entropy in nats over contributing positions.
    pub mean_ce: f64,
    pub predicting_positions: usize,
    /// Per raw index; `None` for a raw token without a predecessor slot.
    pub per_position_ce: Vec<Option<f64>>,
    /// Global gradient L2 norm, before clipping. Zero when no backward ran.
    pub grad_norm: f64,
}

fn log_softmax_at(row: ArrayView1<f64>, target: usize) -> (f64, f64, f64) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    (row[target] - m - z.ln(), m, z)
}

/// `(predecessor slot, raw index, target id)` for every raw slot that has a predecessor.
pub(crate) fn loss_targets(seq: &AugmentedSequence) -> Vec<(usize, usize, usize)> {
    seq.slots
        .iter()
        .filter(|s| s.kind == TokenKind::Raw && s.aug_index > 0)
        .map(|s| (s.aug_index - 1, s.raw_index.unwrap(), s.token_id as usize))
        .collect()
}

/// Each raw token is predicted by the slot right before it, whatever its kind.
/// Gist and sink targets never contribute.
pub fn lm_loss(logits: &Array2<f64>, seq: &AugmentedSequence) -> LossReport {
    lm_loss_with_grad(logits, seq, None).0
}

/// Loss plus `d(sum CE) / d logits * grad_scale`; the gradient is only built
/// when `grad_scale` is given.
pub(crate) fn lm_loss_with_grad(
    logits: &Array2<f64>,
    seq: &AugmentedSequence,
    grad_scale: Option<f64>,
) -> (LossReport, Option<Array2<f64>>, f64) {
    let targets = loss_targets(seq);
    let mut per_position = vec![None; seq.raw_len];
    let mut grad = grad_scale.map(|_| Array2::zeros(logits.raw_dim()));
    let mut total = 0.0;
    for &(pred, raw, target) in &targets {
        let row = logits.row(pred);
        let (logp, m, z) = log_softmax_at(row, target);
        per_position[raw] = Some(-logp);
        total -= logp;
        if let (Some(g), Some(scale)) = (grad.as_mut(), grad_scale) {
            let mut grow = g.row_mut(pred);
            for (gv, &lv) in grow.iter_mut().zip(row.iter()) {
                *gv = (lv - m).exp() / z * scale;
            }
            grow[target] -= scale;
        }
    }
    let n = targets.len();
    let report = LossReport {
        mean_ce: if n > 0 { total / n as f64 } else { 0.0 },
        predicting_positions: n,
        per_position_ce: per_position,
        grad_norm: 0.0,
    };
    (report, grad, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{augment, CompressionConfig};

    #[test]
    fn uniform_logits_give_log_vocab() {
        let c = CompressionConfig::new(4, 3, 1, 8).unwrap();
        let seq = augment(&[1, 2, 3, 4, 5, 6, 7, 8], &c, 20).unwrap();
        let logits = Array2::zeros((seq.len(), 20 + 3 + 1));
        let r = lm_loss(&logits, &seq);
        assert!((r.mean_ce - (24f64).ln()).abs() < 1e-12);
        assert_eq!(r.per_position_ce.len(), 8);
    }

    #[test]
    fn single_unit_predictors() {
        let c = CompressionConfig::new(4, 2, 0, 8).unwrap();
        let seq = augment(&[1, 2, 3, 4], &c, 10).unwrap();
        let t = loss_targets(&seq);
        // s_2 predicts x1, x1..x3 predict x2..x4.
        assert_eq!(t.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(lm_loss(&Array2::zeros((seq.len(), 13)), &seq).predicting_positions, 4);
        // No sinks: the first raw token has nothing to be predicted from.
        let c0 = CompressionConfig::new(4, 0, 0, 8).unwrap();
        let seq0 = augment(&[1, 2, 3, 4, 5, 6, 7, 8], &c0, 10).unwrap();
        let r = lm_loss(&Array2::zeros((seq0.len(), 11)), &seq0);
        assert_eq!(r.predicting_positions, 7);
        assert_eq!(r.per_position_ce[0], None);
        // x5 (raw 4) is predicted by the gist of unit 0.
        assert_eq!(loss_targets(&seq0)[3], (4, 4, 5));
    }

    #[test]
    fn gist_and_sink_target_rows_do_not_matter() {
        let c = CompressionConfig::new(2, 2, 0, 8).unwrap();
        let seq = augment(&[1, 2, 3, 4, 5, 6], &c, 10).unwrap();
        let base = Array2::from_shape_fn((seq.len(), 13), |(i, j)| ((i * 13 + j) as f64 * 0.3).sin());
        let want = lm_loss(&base, &seq).mean_ce;
        // Rows whose successor is a gist, plus the first sink (successor is a sink).
        for slot in seq.slots.iter().filter(|s| s.aug_index + 1 < seq.len()) {
            let next = seq.slots[slot.aug_index + 1].kind;
            if next != TokenKind::Raw {
                let mut l = base.clone();
                l.row_mut(slot.aug_index).fill(42.0);
                assert_eq!(lm_loss(&l, &seq).mean_ce, want);
            }
        }
        let mut l = base.clone();
        l.row_mut(seq.len() - 1).fill(-3.0);
        assert_eq!(lm_loss(&l, &seq).mean_ce, want);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = CompressionConfig::new(2, 1, 0, 8).unwrap();
        let seq = augment(&[1, 2, 0, 3], &c, 4).unwrap();
        let logits = Array2::from_shape_fn((seq.len(), 6), |(i, j)| ((i * 7 + j) as f64).cos());
        let (_, g, _) = lm_loss_with_grad(&logits, &seq, Some(1.0));
        let g = g.unwrap();
        let sum = |l: &Array2<f64>| lm_loss_with_grad(l, &seq, None).2;
        for i in 0..seq.len() {
            for j in 0..6 {
                let mut p = logits.clone();
                p[[i, j]] += 1e-6;
                let mut m = logits.clone();
                m[[i, j]] -= 1e-6;
                let fd = (sum(&p) - sum(&m)) / 2e-6;
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
    }
}
