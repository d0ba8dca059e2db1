use candle_core::{DType, Device, Tensor};
use log::warn;

use crate::error::{Error, Result};

pub(crate) fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frames needed to emit `target`: one per label plus a blank
/// between each pair of repeated labels.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &c in target {
        ext.push(c);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Log-space forward variables `alpha[t][s]` over the blank-extended target.
fn forward(lp: &[Vec<f64>], ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (lp.len(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = lp[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = lp[0][ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = logsumexp2(a, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s, blank) {
                a = logsumexp2(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + lp[t][ext[s]];
        }
    }
    alpha
}

fn backward(lp: &[Vec<f64>], ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (lp.len(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = lp[t_len - 1][ext[s_len - 1]];
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = lp[t_len - 1][ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = logsumexp2(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                b = logsumexp2(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + lp[t][ext[s]];
        }
    }
    beta
}

fn check(lp: &[Vec<f64>], target: &[usize], blank: usize) -> Result<()> {
    let Some(width) = lp.first().map(Vec::len) else {
        return Err(Error::Shape("CTC needs at least one frame".into()));
    };
    if lp.iter().any(|r| r.len() != width) || blank >= width {
        return Err(Error::Shape("ragged CTC log-probabilities or blank out of range".into()));
    }
    if let Some(&c) = target.iter().find(|&&c| c >= width || c == blank) {
        return Err(Error::InvalidArgument(format!("target label {c} is blank or out of range")));
    }
    Ok(())
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `lp` (`T x (V + 1)`), summed over all blank-augmented alignments.
/// Infeasible targets give `+inf`.
pub fn ctc_loss(lp: &[Vec<f64>], target: &[usize], blank: usize) -> Result<f64> {
    check(lp, target, blank)?;
    if min_frames(target) > lp.len() {
        warn!("CTC target of {} labels cannot fit in {} frames", target.len(), lp.len());
        return Ok(f64::INFINITY);
    }
    let ext = extended(target, blank);
    let alpha = forward(lp, &ext, blank);
    let last = &alpha[lp.len() - 1];
    let s = ext.len();
    let ll = if s > 1 { logsumexp2(last[s - 1], last[s - 2]) } else { last[0] };
    Ok(-ll)
}

/// Loss and its gradient with respect to every entry of `lp`, treating the
/// entries as free variables.
pub fn ctc_loss_and_grad(lp: &[Vec<f64>], target: &[usize], blank: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let loss = ctc_loss(lp, target, blank)?;
    let width = lp[0].len();
    let mut grad = vec![vec![0.0; width]; lp.len()];
    if !loss.is_finite() {
        return Ok((loss, grad));
    }
    let ext = extended(target, blank);
    let alpha = forward(lp, &ext, blank);
    let beta = backward(lp, &ext, blank);
    let ll = -loss;
    for t in 0..lp.len() {
        let mut occ = vec![f64::NEG_INFINITY; width];
        for (s, &k) in ext.iter().enumerate() {
            occ[k] = logsumexp2(occ[k], alpha[t][s] + beta[t][s]);
        }
        for k in 0..width {
            if occ[k] > f64::NEG_INFINITY {
                grad[t][k] = -(occ[k] - lp[t][k] - ll).exp();
            }
        }
    }
    Ok((loss, grad))
}

/// Differentiable CTC loss on a `(T, V + 1)` log-probability tensor. The
/// forward algorithm runs in `f64` outside the graph; the result is
/// re-attached as `sum(lp * G) + c`, whose value is the loss and whose
/// gradient with respect to `lp` is `G`.
pub fn ctc_loss_tensor(lp: &Tensor, target: &[usize], blank: usize) -> Result<(Tensor, f64)> {
    let rows = lp.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let (loss, grad) = ctc_loss_and_grad(&rows, target, blank)?;
    if !loss.is_finite() {
        return Ok((Tensor::new(loss, &Device::Cpu)?.to_dtype(lp.dtype())?, loss));
    }
    let linear: f64 = rows.iter().flatten().zip(grad.iter().flatten()).map(|(a, g)| a * g).sum();
    let (t, w) = (rows.len(), rows[0].len());
    let g = Tensor::from_vec(grad.concat(), (t, w), &Device::Cpu)?.to_dtype(lp.dtype())?;
    let surrogate = ((lp * g)?.sum_all()? + (loss - linear))?;
    Ok((surrogate, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// All label paths of length `t` over `width` classes.
    fn paths(t: usize, width: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| (0..width).map(move |c| [p.clone(), vec![c]].concat()))
                .collect();
        }
        out
    }

    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &c in path {
            if Some(c) != prev && c != blank {
                out.push(c);
            }
            prev = Some(c);
        }
        out
    }

    fn brute(lp: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
        let mut p = 0.0;
        for path in paths(lp.len(), lp[0].len()) {
            if collapse(&path, blank) == target {
                p += path.iter().enumerate().map(|(t, &c)| lp[t][c]).sum::<f64>().exp();
            }
        }
        -p.ln()
    }

    #[test]
    fn single_certain_frame() {
        let lp = vec![vec![0.0, f64::NEG_INFINITY]];
        assert_eq!(ctc_loss(&lp, &[0], 1).unwrap(), 0.0);
    }

    #[test]
    fn uniform_two_frames() {
        let h = 0.5f64.ln();
        let lp = vec![vec![h, h], vec![h, h]];
        let l = ctc_loss(&lp, &[0], 1).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_infinite() {
        let h = 0.5f64.ln();
        let lp = vec![vec![h, h], vec![h, h]];
        assert_eq!(ctc_loss(&lp, &[0, 0], 1).unwrap(), f64::INFINITY);
    }

    #[test]
    fn matches_enumeration_on_a_fixed_case() {
        let lp: Vec<Vec<f64>> = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.3, 0.3, 0.4]]
            .iter()
            .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
            .collect();
        for target in [vec![0], vec![1], vec![0, 1], vec![1, 1], vec![0, 0]] {
            let a = ctc_loss(&lp, &target, 2).unwrap();
            let b = brute(&lp, &target, 2);
            assert!((a - b).abs() < 1e-12, "{target:?}: {a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lp: Vec<Vec<f64>> = vec![vec![-1.2, -0.7, -1.5], vec![-0.3, -2.0, -1.1], vec![-0.9, -0.8, -1.7]];
        let target = [0, 1];
        let (_, g) = ctc_loss_and_grad(&lp, &target, 2).unwrap();
        let h = 1e-6;
        for t in 0..3 {
            for k in 0..3 {
                let mut up = lp.clone();
                up[t][k] += h;
                let mut dn = lp.clone();
                dn[t][k] -= h;
                let fd = (ctc_loss(&up, &target, 2).unwrap() - ctc_loss(&dn, &target, 2).unwrap()) / (2.0 * h);
                assert!((fd - g[t][k]).abs() < 1e-6, "({t},{k}) {fd} vs {}", g[t][k]);
            }
        }
    }
}
