use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy {
    /// Summed over positions.
    pub total: Var,
    pub positions: usize,
    /// Gold probabilities that hit [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Token-level cross-entropy of probability rows `probs: [T×V]` against
/// `gold`, with the target smoothed to `(1-ε)·onehot + ε/V`.
///
/// Per position: `-(1-ε)·log p[gold] - (ε/V)·Σ_v log p[v]`.
pub fn cross_entropy(
    g: &mut Graph,
    probs: Var,
    gold: &[usize],
    smoothing: f64,
) -> Result<CrossEntropy> {
    let pv = g.value(probs);
    if pv.rank() != 2 || pv.rows() != gold.len() {
        return Err(Error::shape("cross_entropy", pv.shape(), &[gold.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} not in [0, 1)")));
    }
    let vocab = pv.cols();
    let clamped = gold
        .iter()
        .enumerate()
        .filter(|(r, &c)| c < vocab && pv.at(*r, c) < PROB_FLOOR)
        .count();
    if clamped > 0 {
        log::warn!("{clamped} gold probabilities clamped at {PROB_FLOOR:e}");
    }
    let logp = g.log_clamped(probs, PROB_FLOOR);
    let picked = g.pick_cols(logp, gold)?;
    let nll = g.sum(picked);
    let mut total = g.scale(nll, -(1.0 - smoothing));
    if smoothing > 0.0 {
        let all = g.sum(logp);
        let smooth = g.scale(all, -smoothing / vocab as f64);
        total = g.add(total, smooth)?;
    }
    Ok(CrossEntropy {
        total,
        positions: gold.len(),
        clamped,
    })
}

/// Mean loss over positions.
pub fn mean_cross_entropy(g: &mut Graph, ce: &CrossEntropy) -> Var {
    g.scale(ce.total, 1.0 / ce.positions as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn loss(rows: &[Vec<f64>], gold: &[usize], eps: f64) -> (f64, usize) {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(rows).unwrap());
        let ce = cross_entropy(&mut g, p, gold, eps).unwrap();
        let m = mean_cross_entropy(&mut g, &ce);
        (g.value(m).item().unwrap(), ce.clamped)
    }

    #[test]
    fn one_hot_correct_is_zero() {
        let (l, _) = loss(&[vec![0., 1., 0.], vec![1., 0., 0.]], &[1, 0], 0.0);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_is_log_vocab() {
        let (l, _) = loss(&[vec![0.25; 4], vec![0.25; 4]], &[3, 0], 0.0);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        // smoothing does not change the uniform case
        let (l, _) = loss(&[vec![0.25; 4]], &[2], 0.1);
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn smoothed_one_hot_closed_form() {
        // p = onehot(gold): -(1-ε)·0 - (ε/V)·(0 + (V-1)·ln 1e-12)
        let (eps, v) = (0.1, 4.0);
        let (l, clamped) = loss(&[vec![0., 0., 1., 0.]], &[2], eps);
        let want = -(eps / v) * (v - 1.0) * PROB_FLOOR.ln();
        assert!((l - want).abs() < 1e-12);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn zero_gold_probability_is_clamped_and_flagged() {
        let (l, clamped) = loss(&[vec![1., 0.]], &[1], 0.0);
        assert_eq!(clamped, 1);
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-12);
    }
}
