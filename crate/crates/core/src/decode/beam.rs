use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use super::prefix::PrefixState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub ctc_weight: f64,
    /// Maximum output length as a fraction of the encoder length. `None`
    /// picks 1.0 for subword and 0.5 for character vocabularies.
    pub max_len_ratio: Option<f64>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 40, ctc_weight: 0.1, max_len_ratio: None }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config("ctc_weight must lie in [0, 1]".into()));
        }
        if matches!(self.max_len_ratio, Some(r) if r.is_nan() || r <= 0.0) {
            return Err(Error::Config("max_len_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub att_logp: f64,
    pub ctc_logp: f64,
    pub combined: f64,
    pub finished: bool,
}

/// `w * ctc + (1 - w) * att`, with a zero weight dropping its term so that
/// an impossible CTC prefix does not poison pure attention decoding.
pub fn combine(ctc_weight: f64, att: f64, ctc: f64) -> f64 {
    if ctc_weight == 0.0 {
        att
    } else if ctc_weight == 1.0 {
        ctc
    } else {
        ctc_weight * ctc + (1.0 - ctc_weight) * att
    }
}

/// Source of next-token attention log-probabilities. `prefixes` all have
/// the same length and exclude the start token; each returned row covers
/// the full decoder vocabulary.
pub trait AttentionScorer {
    fn next_logp(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// Best first; equal scores go to the lexicographically smaller sequence,
/// and an unfinished hypothesis sorts after a finished one with the same
/// tokens.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.combined
        .partial_cmp(&a.combined)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

/// Problem description independent of any network.
pub struct SearchSpace<'a> {
    /// Per-frame CTC log-probabilities, `T x (V + 1)`.
    pub ctc_lp: &'a [Vec<f64>],
    pub blank: usize,
    pub eos: u32,
    /// Tokens that may be emitted before the end token.
    pub candidates: &'a [u32],
    pub max_len: usize,
}

struct Running {
    hyp: Hypothesis,
    ctc: PrefixState,
}

/// Joint CTC/attention beam search. Every step extends each running
/// hypothesis by every candidate token and by the end token, scores each
/// extension, and keeps the best `beam_size` of the pooled extensions;
/// those ending in the end token move to the finished list. At `max_len`
/// only the end token is allowed. Returns all finished hypotheses, best
/// first.
pub fn beam_search_core(
    scorer: &dyn AttentionScorer,
    space: &SearchSpace,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let lp = space.ctc_lp;
    let w = cfg.ctc_weight;
    let mut running = vec![Running {
        hyp: Hypothesis { tokens: vec![], att_logp: 0.0, ctc_logp: 0.0, combined: 0.0, finished: false },
        ctc: PrefixState::initial(lp, space.blank),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..=space.max_len {
        if running.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = running.iter().map(|r| r.hyp.tokens.clone()).collect();
        let att = scorer.next_logp(&prefixes)?;
        if att.len() != running.len() {
            return Err(Error::Shape("scorer returned a wrong number of rows".into()));
        }
        let mut pool: Vec<(Hypothesis, Option<(usize, usize)>)> = Vec::new();
        for (i, r) in running.iter().enumerate() {
            let row = &att[i];
            let eos_att = r.hyp.att_logp + row[space.eos as usize];
            let eos_ctc = r.ctc.full_logp();
            let mut tokens = r.hyp.tokens.clone();
            tokens.push(space.eos);
            pool.push((
                Hypothesis {
                    tokens,
                    att_logp: eos_att,
                    ctc_logp: eos_ctc,
                    combined: combine(w, eos_att, eos_ctc),
                    finished: true,
                },
                None,
            ));
            if step == space.max_len {
                continue;
            }
            for (j, &c) in space.candidates.iter().enumerate() {
                let a = r.hyp.att_logp + row[c as usize];
                // Prefix scores are only needed when CTC contributes.
                let ctc = if w > 0.0 { r.ctc.extend(lp, c as usize, space.blank).logp } else { 0.0 };
                let mut tokens = r.hyp.tokens.clone();
                tokens.push(c);
                pool.push((
                    Hypothesis { tokens, att_logp: a, ctc_logp: ctc, combined: combine(w, a, ctc), finished: false },
                    Some((i, j)),
                ));
            }
        }
        pool.retain(|(h, _)| h.combined > f64::NEG_INFINITY && !h.combined.is_nan());
        pool.sort_by(|a, b| rank(&a.0, &b.0));
        pool.truncate(cfg.beam_size);
        let mut next = Vec::new();
        for (h, origin) in pool {
            match origin {
                None => finished.push(h),
                Some((i, j)) => {
                    let parent = &running[i];
                    let c = space.candidates[j] as usize;
                    let state = if w > 0.0 {
                        parent.ctc.extend(lp, c, space.blank)
                    } else {
                        PrefixState { last: Some(c), ..parent.ctc.clone() }
                    };
                    next.push(Running { hyp: h, ctc: state });
                }
            }
        }
        running = next;
    }
    if finished.is_empty() {
        warn!("beam search finished no hypothesis");
    }
    finished.sort_by(rank);
    Ok(finished)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Attention scores that ignore the prefix.
    struct Fixed(Vec<f64>);

    impl AttentionScorer for Fixed {
        fn next_logp(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![self.0.clone(); prefixes.len()])
        }
    }

    #[test]
    fn pure_attention_greedy_when_peaked() {
        // Vocabulary {0, 1, eos=2}; token 1 dominates, eos is unlikely until
        // the length limit forces it.
        let scorer = Fixed(vec![-5.0, -0.01, -6.0]);
        let lp = vec![vec![0.0f64.ln(); 3]; 4];
        let space = SearchSpace { ctc_lp: &lp, blank: 2, eos: 2, candidates: &[0, 1], max_len: 3 };
        let cfg = BeamConfig { beam_size: 1, ctc_weight: 0.0, max_len_ratio: None };
        let best = &beam_search_core(&scorer, &space, &cfg).unwrap()[0];
        assert_eq!(best.tokens, vec![1, 1, 1, 2]);
        assert!(best.finished);
    }

    #[test]
    fn ties_prefer_smaller_sequences() {
        let scorer = Fixed(vec![-1.0, -1.0, -1.0]);
        let lp = vec![vec![0.0; 3]; 2];
        let space = SearchSpace { ctc_lp: &lp, blank: 2, eos: 2, candidates: &[0, 1], max_len: 2 };
        let cfg = BeamConfig { beam_size: 50, ctc_weight: 0.0, max_len_ratio: None };
        let out = beam_search_core(&scorer, &space, &cfg).unwrap();
        assert_eq!(out[0].tokens, vec![2]);
        assert_eq!(out.len(), 7);
    }

    #[test]
    fn config_checks() {
        assert!(BeamConfig { beam_size: 0, ..Default::default() }.validate().is_err());
        assert!(BeamConfig { ctc_weight: 1.5, ..Default::default() }.validate().is_err());
        assert_eq!(BeamConfig::default().beam_size, 40);
        assert_eq!(BeamConfig::default().ctc_weight, 0.1);
    }
}
