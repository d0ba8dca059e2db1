use crate::finetune::ctc::logsumexp2;

/// Prefix-score state of one hypothesis: log-probabilities of having emitted
/// exactly the prefix by frame `t`, ending in a label (`r_n`) or a blank
/// (`r_b`), plus the log prefix probability itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    pub r_n: Vec<f64>,
    pub r_b: Vec<f64>,
    pub logp: f64,
    pub last: Option<usize>,
}

impl PrefixState {
    /// State of the empty prefix.
    pub fn initial(lp: &[Vec<f64>], blank: usize) -> Self {
        let mut r_b = Vec::with_capacity(lp.len());
        let mut acc = 0.0;
        for row in lp {
            acc += row[blank];
            r_b.push(acc);
        }
        PrefixState { r_n: vec![f64::NEG_INFINITY; lp.len()], r_b, logp: 0.0, last: None }
    }

    /// Log probability that the whole output equals this prefix.
    pub fn full_logp(&self) -> f64 {
        match (self.r_n.last(), self.r_b.last()) {
            (Some(&n), Some(&b)) => logsumexp2(n, b),
            _ => f64::NEG_INFINITY,
        }
    }

    /// State after appending label `c`.
    pub fn extend(&self, lp: &[Vec<f64>], c: usize, blank: usize) -> Self {
        let t_len = lp.len();
        let mut r_n = vec![f64::NEG_INFINITY; t_len];
        let mut r_b = vec![f64::NEG_INFINITY; t_len];
        if t_len == 0 {
            return PrefixState { r_n, r_b, logp: f64::NEG_INFINITY, last: Some(c) };
        }
        // Only the empty prefix can start emitting `c` at the first frame.
        if self.last.is_none() {
            r_n[0] = lp[0][c];
        }
        let mut psi = r_n[0];
        for t in 1..t_len {
            let phi = if self.last == Some(c) {
                self.r_b[t - 1]
            } else {
                logsumexp2(self.r_b[t - 1], self.r_n[t - 1])
            };
            r_n[t] = logsumexp2(r_n[t - 1], phi) + lp[t][c];
            r_b[t] = logsumexp2(r_b[t - 1], r_n[t - 1]) + lp[t][blank];
            psi = logsumexp2(psi, phi + lp[t][c]);
        }
        PrefixState { r_n, r_b, logp: psi, last: Some(c) }
    }
}

/// Log probability that the CTC output sequence starts with `prefix`.
pub fn ctc_prefix_logp(lp: &[Vec<f64>], prefix: &[usize], blank: usize) -> f64 {
    let mut state = PrefixState::initial(lp, blank);
    for &c in prefix {
        state = state.extend(lp, c, blank);
    }
    state.logp
}

/// Log probability that the CTC output is exactly `seq`.
pub fn ctc_full_logp(lp: &[Vec<f64>], seq: &[usize], blank: usize) -> f64 {
    let mut state = PrefixState::initial(lp, blank);
    for &c in seq {
        state = state.extend(lp, c, blank);
    }
    state.full_logp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prefix_is_certain() {
        let h = 0.5f64.ln();
        let lp = vec![vec![h, h]; 3];
        assert_eq!(ctc_prefix_logp(&lp, &[], 1), 0.0);
    }

    #[test]
    fn uniform_two_frames_over_nine_paths() {
        // Classes {a, b, blank}, each 1/3 per frame. Outputs starting with
        // "a": paths aa, a-, ab, -a -> 4 of 9.
        let third = (1.0f64 / 3.0).ln();
        let lp = vec![vec![third; 3]; 2];
        let p = ctc_prefix_logp(&lp, &[0], 2);
        assert!((p - (4.0f64 / 9.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn too_long_prefix_is_impossible() {
        let h = 0.5f64.ln();
        let lp = vec![vec![h, h]; 2];
        assert_eq!(ctc_prefix_logp(&lp, &[0, 0], 1), f64::NEG_INFINITY);
        assert_eq!(ctc_prefix_logp(&lp, &[0, 0, 0], 1), f64::NEG_INFINITY);
    }

    #[test]
    fn extensions_partition_the_prefix_mass() {
        let lp: Vec<Vec<f64>> = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.3, 0.3, 0.4], [0.1, 0.2, 0.7]]
            .iter()
            .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
            .collect();
        for prefix in [vec![], vec![0], vec![1, 0], vec![0, 0]] {
            let s = PrefixState::initial(&lp, 2);
            let s = prefix.iter().fold(s, |s, &c| s.extend(&lp, c, 2));
            let mut total = s.full_logp().exp();
            for c in 0..2 {
                total += s.extend(&lp, c, 2).logp.exp();
            }
            assert!((total - s.logp.exp()).abs() < 1e-12, "{prefix:?}");
        }
    }
}
