use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor used by the guarded similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Mean cosine similarity between two equal-length vector sequences.
/// With `eps = None`, any zero-norm vector is an error.
pub fn cosine_sim(p: &[Vec<f64>], e: &[Vec<f64>], eps: Option<f64>) -> Result<f64> {
    if p.len() != e.len() || p.is_empty() {
        return Err(Error::Shape(format!("cosine_sim over {} and {} positions", p.len(), e.len())));
    }
    let mut total = 0.0;
    for (t, (a, b)) in p.iter().zip(e).enumerate() {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("position {t}: dims {} and {}", a.len(), b.len())));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (na, nb) = match eps {
            Some(eps) => (na.max(eps), nb.max(eps)),
            None if na == 0.0 || nb == 0.0 => return Err(Error::ZeroNorm(t)),
            None => (na, nb),
        };
        total += dot / (na * nb);
    }
    Ok(total / p.len() as f64)
}

/// Differentiable mean cosine similarity of `(1, T, D)` or `(T, D)` tensors
/// over the positions selected by `support` (all positions when `None`).
pub fn cosine_sim_tensor(p: &Tensor, e: &Tensor, support: Option<&[bool]>) -> Result<Tensor> {
    if p.dims() != e.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", p.dims(), e.dims())));
    }
    let d = p.dim(D::Minus1)?;
    let p = p.reshape(((), d))?;
    let e = e.reshape(((), d))?;
    let dot = (&p * &e)?.sum(1)?;
    let np = p.sqr()?.sum(1)?.sqrt()?.clamp(COSINE_EPS, f64::INFINITY)?;
    let ne = e.sqr()?.sum(1)?.sqrt()?.clamp(COSINE_EPS, f64::INFINITY)?;
    let sim = (dot / (np * ne)?)?;
    match support {
        None => Ok(sim.mean_all()?),
        Some(flags) => {
            if flags.len() != sim.dim(0)? {
                return Err(Error::Shape("support length differs from sequence length".into()));
            }
            let n = flags.iter().filter(|&&f| f).count();
            if n == 0 {
                return Ok(sim.mean_all()?);
            }
            let w: Vec<f64> = flags.iter().map(|&f| if f { 1.0 / n as f64 } else { 0.0 }).collect();
            let w = Tensor::from_vec(w, flags.len(), &Device::Cpu)?.to_dtype(sim.dtype())?;
            Ok((sim * w)?.sum_all()?)
        }
    }
}

/// Student predictions and detached teacher targets of one clip.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub p_a_to_v: Tensor,
    pub p_v_to_a: Tensor,
    pub p_a_to_a: Tensor,
    pub e_t_v: Tensor,
    pub e_t_a: Tensor,
}

/// Positions each similarity term averages over. `None` means all.
#[derive(Debug, Clone, Default)]
pub struct LossSupport<'a> {
    pub audio_masked: Option<&'a [bool]>,
    pub video_masked: Option<&'a [bool]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub term_av: f64,
    pub term_va: f64,
    pub term_aa: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.term_av.is_finite() && self.term_va.is_finite() && self.term_aa.is_finite()
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let term_av = items.iter().map(|b| b.term_av).sum::<f64>() / n;
        let term_va = items.iter().map(|b| b.term_va).sum::<f64>() / n;
        let term_aa = items.iter().map(|b| b.term_aa).sum::<f64>() / n;
        LossBreakdown { term_av, term_va, term_aa, total: term_av + term_va + term_aa }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Sum of the three similarity terms. Returns the objective to minimize
/// (the negated sum, still attached to the student graph) and the term
/// values. Targets are detached here regardless of how they were built.
pub fn raven_loss(inputs: &LossInputs, support: &LossSupport) -> Result<(Tensor, LossBreakdown)> {
    let LossInputs { p_a_to_v, p_v_to_a, p_a_to_a, e_t_v, e_t_a } = inputs;
    let (tv, ta) = (e_t_v.detach(), e_t_a.detach());
    let av = cosine_sim_tensor(p_a_to_v, &tv, support.audio_masked)?;
    let va = cosine_sim_tensor(p_v_to_a, &ta, support.video_masked)?;
    let aa = cosine_sim_tensor(p_a_to_a, &ta, support.audio_masked)?;
    let (term_av, term_va, term_aa) = (scalar(&av)?, scalar(&va)?, scalar(&aa)?);
    let objective = ((av + va)? + aa)?.neg()?;
    Ok((
        objective,
        LossBreakdown { term_av, term_va, term_aa, total: term_av + term_va + term_aa },
    ))
}
