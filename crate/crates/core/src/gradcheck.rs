//! Finite-difference verification of tape gradients.
//!
//! A check owns a set of named leaf tensors and a builder closure that maps
//! bound leaves to a scalar loss. Analytic gradients come from one backward
//! pass; each probed coordinate is then re-evaluated at +-h and compared via
//!
//!   rel = |analytic - fd| / max(1e-8, |analytic| + |fd|)
//!
//! Probing every coordinate of a full model is wasteful, so `max_probes` caps
//! the number of sampled coordinates per tensor (0 = probe all).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: Option<Probe>,
}

impl GradReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub struct GradCheck {
    pub h: f64,
    /// Coordinates sampled per tensor; 0 probes everything.
    pub max_probes: usize,
    /// Skip scoring a coordinate when both the analytic and numeric values
    /// fall below this magnitude: central differences on 64-bit reals carry
    /// ~1e-10 of rounding noise, below which the relative-error metric only
    /// measures that noise. 0 scores every coordinate. A coordinate where
    /// either side is large is always scored, so a dropped gradient path
    /// still registers.
    pub min_grad: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: FD_STEP,
            max_probes: 0,
            min_grad: 0.0,
        }
    }
}

impl GradCheck {
    pub fn sampled(max_probes: usize) -> Self {
        GradCheck {
            h: FD_STEP,
            max_probes,
            min_grad: 0.0,
        }
    }

    /// Compare analytic and central-difference gradients of `build` w.r.t.
    /// every named parameter. `build` must be deterministic in its inputs.
    pub fn run(
        &self,
        rng: &mut Rng,
        params: &[(String, Tensor)],
        build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    ) -> Result<GradReport> {
        let eval = |values: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
            let root = build(&mut tape, &ids)?;
            let loss = tape.value(root).item();
            tape.backward(root)?;
            let grads = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();
            Ok((loss, grads))
        };

        let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let (base_loss, grads) = eval(&values)?;
        if !base_loss.is_finite() {
            return Err(Error::domain("gradcheck", "loss is not finite at the base point"));
        }

        let mut report = GradReport {
            probes: 0,
            max_rel_err: 0.0,
            worst: None,
        };

        for (p, (name, tensor)) in params.iter().enumerate() {
            let n = tensor.numel();
            let coords: Vec<usize> = if self.max_probes == 0 || self.max_probes >= n {
                (0..n).collect()
            } else {
                rng.sample_without_replacement(n, self.max_probes)
            };
            for i in coords {
                let orig = values[p].data()[i];

                values[p].data_mut()[i] = orig + self.h;
                let (lp, _) = eval_loss_only(&values, &build)?;
                values[p].data_mut()[i] = orig - self.h;
                let (lm, _) = eval_loss_only(&values, &build)?;
                values[p].data_mut()[i] = orig;

                if !lp.is_finite() || !lm.is_finite() {
                    return Err(Error::NonFiniteProbe {
                        param: name.clone(),
                        index: i,
                    });
                }
                let numeric = (lp - lm) / (2.0 * self.h);
                let analytic = grads[p][i];
                if analytic.abs() < self.min_grad && numeric.abs() < self.min_grad {
                    continue;
                }
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
                report.probes += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some(Probe {
                        param: name.clone(),
                        index: i,
                        analytic,
                        numeric,
                        rel_err: rel,
                    });
                }
            }
        }
        Ok(report)
    }
}

fn eval_loss_only(
    values: &[Tensor],
    build: &impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<(f64, ())> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    Ok((tape.value(root).item(), ()))
}

/// Random tensor with entries ~ N(0, std), for building check fixtures.
pub fn random_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, std)).expect("random tensor shape")
}
