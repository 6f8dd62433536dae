//! CTC loss, its gradient with respect to logits, and greedy decoding.
//!
//! The loss is computed with the standard blank-interleaved forward–backward
//! recursion, entirely in log-space. The gradient uses the softmax-residual
//! form: `softmax(logits) − γ`, where γ is the per-frame symbol occupancy
//! assembled from the forward and backward lattices. Blank is symbol 0; the
//! alphabet width is taken from the logits rows, so small alphabets can be
//! tested against exhaustive path enumeration.

use thiserror::Error;

/// Blank symbol index (always 0).
pub const BLANK: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("logits are empty")]
    EmptyLogits,
    #[error("logits rows have inconsistent widths")]
    RaggedLogits,
    #[error("logit at frame {frame}, class {class} is {value}, not finite")]
    NonFiniteLogit { frame: usize, class: usize, value: f64 },
    #[error("target label sequence is empty")]
    EmptyTarget,
    #[error("target symbol {label} at position {position} is outside [1, {max})")]
    InvalidLabel { position: usize, label: usize, max: usize },
    #[error("{frames} frames cannot align a target needing at least {required}")]
    InfeasibleAlignment { frames: usize, required: usize },
}

/// Loss and per-logit gradient for one (logits, target) pair.
#[derive(Debug, Clone)]
pub struct CtcResult {
    /// −log p(target | logits); finite whenever alignment is feasible.
    pub loss: f64,
    /// Same shape as the input logits; each row sums to zero.
    pub grad_logits: Vec<Vec<f64>>,
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-softmax of one logits row.
fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

fn validate(logits: &[Vec<f64>], target: &[usize]) -> Result<usize, CtcError> {
    if logits.is_empty() {
        return Err(CtcError::EmptyLogits);
    }
    let width = logits[0].len();
    if width < 2 || logits.iter().any(|row| row.len() != width) {
        return Err(CtcError::RaggedLogits);
    }
    for (frame, row) in logits.iter().enumerate() {
        for (class, &value) in row.iter().enumerate() {
            if !value.is_finite() {
                return Err(CtcError::NonFiniteLogit { frame, class, value });
            }
        }
    }
    if target.is_empty() {
        return Err(CtcError::EmptyTarget);
    }
    for (position, &label) in target.iter().enumerate() {
        if label == BLANK || label >= width {
            return Err(CtcError::InvalidLabel {
                position,
                label,
                max: width,
            });
        }
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    let required = target.len() + repeats;
    if logits.len() < required {
        return Err(CtcError::InfeasibleAlignment {
            frames: logits.len(),
            required,
        });
    }
    Ok(width)
}

/// Computes the CTC loss and its gradient with respect to every logit.
pub fn ctc_loss_grad(logits: &[Vec<f64>], target: &[usize]) -> Result<CtcResult, CtcError> {
    let width = validate(logits, target)?;
    let t_len = logits.len();

    // Extended label sequence: blanks interleaved around every symbol.
    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { BLANK } else { target[s / 2] };

    let log_probs: Vec<Vec<f64>> = logits.iter().map(|row| log_softmax_row(row)).collect();

    // Forward lattice; α[t][s] includes the emission at frame t.
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = log_probs[0][ext(0)];
    if s_len > 1 {
        alpha[0][1] = log_probs[0][ext(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_sum_exp2(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext(s) != BLANK && ext(s) != ext(s - 2) {
                acc = log_sum_exp2(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + log_probs[t][ext(s)];
        }
    }
    let log_p = log_sum_exp2(alpha[t_len - 1][s_len - 1], alpha[t_len - 1][s_len.saturating_sub(2)]);
    let loss = -log_p;

    // Backward lattice; β[t][s] excludes the emission at frame t, so
    // α[t][s] + β[t][s] is the log-mass of all paths passing through (t, s).
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + log_probs[t + 1][ext(s)];
            if s + 1 < s_len {
                acc = log_sum_exp2(acc, beta[t + 1][s + 1] + log_probs[t + 1][ext(s + 1)]);
            }
            if s + 2 < s_len && ext(s + 2) != BLANK && ext(s + 2) != ext(s) {
                acc = log_sum_exp2(acc, beta[t + 1][s + 2] + log_probs[t + 1][ext(s + 2)]);
            }
            beta[t][s] = acc;
        }
    }

    let mut grad_logits = vec![vec![0.0; width]; t_len];
    for t in 0..t_len {
        // γ[t][k]: posterior probability that frame t emits symbol k,
        // exp(α + β − log p); adding `loss` is subtracting log p.
        let mut gamma = vec![0.0; width];
        for s in 0..s_len {
            gamma[ext(s)] += (alpha[t][s] + beta[t][s] + loss).exp();
        }
        for k in 0..width {
            grad_logits[t][k] = log_probs[t][k].exp() - gamma[k];
        }
    }

    Ok(CtcResult { loss, grad_logits })
}

/// Collapses a raw frame-label path: merge consecutive repeats, drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != BLANK {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// Per-frame argmax (ties broken toward the lowest index), then collapse.
pub fn greedy_decode(logits: &[Vec<f64>]) -> Vec<usize> {
    let path: Vec<usize> = logits
        .iter()
        .map(|row| {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse_path(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Exhaustive path enumeration: sums softmax path probabilities whose
    /// collapsed form equals the target. Only tractable for tiny T and
    /// alphabet, which is exactly where it is used.
    fn oracle_loss(logits: &[Vec<f64>], target: &[usize]) -> f64 {
        let t_len = logits.len();
        let width = logits[0].len();
        let log_probs: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax_row(r)).collect();
        let mut total = f64::NEG_INFINITY;
        let n_paths = width.pow(t_len as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push(c % width);
                c /= width;
            }
            if collapse_path(&path) == target {
                let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs[t][k]).sum();
                total = log_sum_exp2(total, lp);
            }
        }
        -total
    }

    fn uniform_logits(t_len: usize, width: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; width]; t_len]
    }

    #[test]
    fn single_frame_single_symbol() {
        // softmax = (0.2 blank, 0.8 'a') via ln probabilities as logits.
        let logits = vec![vec![0.2f64.ln(), 0.8f64.ln()]];
        let res = ctc_loss_grad(&logits, &[1]).unwrap();
        assert!((res.loss - -(0.8f64.ln())).abs() < 1e-12);
        // Single path: gradient = softmax − one-hot('a').
        assert!((res.grad_logits[0][0] - 0.2).abs() < 1e-12);
        assert!((res.grad_logits[0][1] - -0.2).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform_28_symbols() {
        // Paths (a,a), (−,a), (a,−), each (1/28)²; loss = −ln(3/784).
        let logits = uniform_logits(2, 28);
        let res = ctc_loss_grad(&logits, &[1]).unwrap();
        assert!((res.loss - 5.5657967316822985).abs() < 1e-12);
    }

    #[test]
    fn repeated_symbol_needs_a_separating_blank() {
        let logits = uniform_logits(2, 28);
        let err = ctc_loss_grad(&logits, &[1, 1]).unwrap_err();
        assert_eq!(
            err,
            CtcError::InfeasibleAlignment {
                frames: 2,
                required: 3
            }
        );
        assert!(ctc_loss_grad(&uniform_logits(3, 28), &[1, 1]).is_ok());
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert_eq!(ctc_loss_grad(&[], &[1]).unwrap_err(), CtcError::EmptyLogits);
        assert_eq!(
            ctc_loss_grad(&uniform_logits(2, 4), &[]).unwrap_err(),
            CtcError::EmptyTarget
        );
        assert_eq!(
            ctc_loss_grad(&uniform_logits(2, 4), &[0]).unwrap_err(),
            CtcError::InvalidLabel {
                position: 0,
                label: 0,
                max: 4
            }
        );
        assert_eq!(
            ctc_loss_grad(&uniform_logits(2, 4), &[4]).unwrap_err(),
            CtcError::InvalidLabel {
                position: 0,
                label: 4,
                max: 4
            }
        );
        let ragged = vec![vec![0.0; 4], vec![0.0; 3]];
        assert_eq!(
            ctc_loss_grad(&ragged, &[1]).unwrap_err(),
            CtcError::RaggedLogits
        );
        let nonfinite = vec![vec![0.0, f64::NAN, 0.0]];
        assert!(matches!(
            ctc_loss_grad(&nonfinite, &[1]).unwrap_err(),
            CtcError::NonFiniteLogit { frame: 0, class: 1, .. }
        ));
    }

    #[test]
    fn matches_enumeration_oracle_on_fixed_cases() {
        let mut rng = crate::seeding::rng_from(7, "ctc-oracle-fixed");
        for (t_len, target) in [
            (1usize, vec![1usize]),
            (2, vec![1]),
            (3, vec![1, 2]),
            (4, vec![2, 2]),
            (5, vec![1, 2, 1]),
            (6, vec![2, 1, 2]),
            (6, vec![1, 1, 2]),
        ] {
            let logits: Vec<Vec<f64>> = (0..t_len)
                .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let res = ctc_loss_grad(&logits, &target).unwrap();
            let oracle = oracle_loss(&logits, &target);
            assert!(
                (res.loss - oracle).abs() < 1e-9,
                "T={t_len} target={target:?}: {} vs {}",
                res.loss,
                oracle
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::seeding::rng_from(11, "ctc-fd");
        let t_len = 5;
        let width = 4;
        let target = [1usize, 2, 3];
        let logits: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..width).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let analytic = ctc_loss_grad(&logits, &target).unwrap();
        let h = 1e-5;
        for t in 0..t_len {
            for k in 0..width {
                let mut plus = logits.clone();
                plus[t][k] += h;
                let mut minus = logits.clone();
                minus[t][k] -= h;
                let fd = (ctc_loss_grad(&plus, &target).unwrap().loss
                    - ctc_loss_grad(&minus, &target).unwrap().loss)
                    / (2.0 * h);
                let diff = (fd - analytic.grad_logits[t][k]).abs();
                let scale = fd.abs().max(analytic.grad_logits[t][k].abs()).max(1.0);
                assert!(
                    diff / scale < 1e-6,
                    "grad[{t}][{k}]: fd {fd} vs analytic {}",
                    analytic.grad_logits[t][k]
                );
            }
        }
    }

    #[test]
    fn grad_rows_sum_to_zero() {
        let mut rng = crate::seeding::rng_from(13, "ctc-rowsum");
        let logits: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..28).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let res = ctc_loss_grad(&logits, &[3, 1, 4, 1, 5]).unwrap();
        for (t, row) in res.grad_logits.iter().enumerate() {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-10, "row {t} sums to {s}");
        }
    }

    #[test]
    fn log_space_stability_at_extreme_logits() {
        // Entries at the [−100, 100] extremes must not overflow.
        let logits = vec![
            vec![100.0, -100.0, -100.0],
            vec![-100.0, 100.0, -100.0],
            vec![-100.0, -100.0, 100.0],
        ];
        let res = ctc_loss_grad(&logits, &[1, 2]).unwrap();
        assert!(res.loss.is_finite());
        for row in &res.grad_logits {
            for &g in row {
                assert!(g.is_finite());
            }
        }
    }

    #[test]
    fn relabeling_non_target_symbols_preserves_loss() {
        // Uniform logits over symbols outside the target: swapping those
        // symbols' identities must not change the loss.
        let mut logits = uniform_logits(4, 6);
        for row in &mut logits {
            row[1] = 1.3; // target symbol stays put
        }
        let base = ctc_loss_grad(&logits, &[1]).unwrap().loss;
        // Swap columns 2 and 5 everywhere (both outside the target).
        for row in &mut logits {
            row.swap(2, 5);
        }
        let swapped = ctc_loss_grad(&logits, &[1]).unwrap().loss;
        assert!((base - swapped).abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_collapse_rules() {
        // Row builder: one-hot-ish logits with the peak at `k`.
        let peak = |k: usize| {
            let mut row = vec![0.0; 4];
            row[k] = 5.0;
            row
        };
        // [blank, a, a, blank, b] → "ab"
        let logits = vec![peak(0), peak(1), peak(1), peak(0), peak(2)];
        assert_eq!(greedy_decode(&logits), vec![1, 2]);
        // all-blank → empty
        let logits = vec![peak(0), peak(0), peak(0)];
        assert_eq!(greedy_decode(&logits), Vec::<usize>::new());
        // [a, blank, a] → "aa"
        let logits = vec![peak(1), peak(0), peak(1)];
        assert_eq!(greedy_decode(&logits), vec![1, 1]);
    }

    #[test]
    fn greedy_decode_breaks_ties_toward_lowest_index() {
        let logits = vec![vec![1.0, 1.0, 1.0]];
        // All symbols tie; blank (index 0) wins, so the decode is empty.
        assert_eq!(greedy_decode(&logits), Vec::<usize>::new());
        let logits = vec![vec![0.0, 2.0, 2.0]];
        assert_eq!(greedy_decode(&logits), vec![1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Analytic loss equals the exhaustive-enumeration loss for every
        /// feasible (logits, target) pair over a 3-symbol alphabet.
        #[test]
        fn oracle_equivalence(
            t_len in 1usize..=6,
            target_len in 1usize..=3,
            raw in proptest::collection::vec(-3.0f64..3.0, 6 * 3),
            labels in proptest::collection::vec(1usize..3, 3),
        ) {
            let target: Vec<usize> = labels[..target_len].to_vec();
            let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
            prop_assume!(t_len >= target.len() + repeats);
            let logits: Vec<Vec<f64>> = (0..t_len)
                .map(|t| raw[t * 3..(t + 1) * 3].to_vec())
                .collect();
            let res = ctc_loss_grad(&logits, &target).unwrap();
            let oracle = oracle_loss(&logits, &target);
            prop_assert!((res.loss - oracle).abs() < 1e-9);
            prop_assert!(res.loss.is_finite() && res.loss >= -1e-12);
            for row in &res.grad_logits {
                let s: f64 = row.iter().sum();
                prop_assert!(s.abs() < 1e-10);
            }
        }

        /// Decoding is insensitive to adding a constant to a whole frame row
        /// (softmax shift invariance carries to argmax).
        #[test]
        fn decode_shift_invariance(
            shift in -5.0f64..5.0,
            raw in proptest::collection::vec(-3.0f64..3.0, 4 * 3),
        ) {
            let logits: Vec<Vec<f64>> = (0..4).map(|t| raw[t * 3..(t + 1) * 3].to_vec()).collect();
            let shifted: Vec<Vec<f64>> = logits
                .iter()
                .map(|row| row.iter().map(|v| v + shift).collect())
                .collect();
            prop_assert_eq!(greedy_decode(&logits), greedy_decode(&shifted));
        }
    }
}
