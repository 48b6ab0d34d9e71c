//! Central-difference gradient verification.
//!
//! A check rebuilds the same computation from scratch for every probe, so it
//! works for anything expressible as "tensors in, scalar out": single graph
//! ops, fused blocks, or the full model loss. Coordinates can be checked
//! exhaustively or as a seeded random sample for large parameter sets.

use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Which coordinates of the inputs to probe.
#[derive(Debug, Clone, Copy)]
pub enum Sample {
    /// Every coordinate of every input.
    All,
    /// Each coordinate independently with the given probability; at least one
    /// coordinate is always kept. Deterministic for a fixed seed.
    Fraction { fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass gate on the worst relative error.
    pub tolerance: f64,
    pub sample: Sample,
}

impl Default for CheckConfig {
    fn default() -> CheckConfig {
        CheckConfig { step: 1e-6, tolerance: 1e-4, sample: Sample::All }
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl CheckReport {
    pub fn passed(&self, cfg: &CheckConfig) -> bool {
        self.max_rel_err < cfg.tolerance
    }
}

/// `|a - n| / max(1, |a|, |n|)`: absolute near zero, relative at scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks the gradients of `builder`, a closure that reconstructs the
/// computation from leaf tensors and returns a scalar output node. The
/// analytic gradients come from one backward sweep; each probed coordinate is
/// then verified against a two-sided finite difference of the rebuilt value.
pub fn check_builder(
    inputs: &[Tensor],
    builder: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    cfg: &CheckConfig,
) -> Result<CheckReport> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = builder(&mut g, &ids);
        let v = g.value(out);
        assert_eq!(v.numel(), 1, "gradient check target must be scalar");
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite { context: "gradient check evaluation".to_string() });
        }
        Ok(y)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = builder(&mut g, &ids);
    assert_eq!(g.value(out).numel(), 1, "gradient check target must be scalar");
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.of(id)).collect();

    // Coordinate selection.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    match cfg.sample {
        Sample::All => {
            for (i, t) in inputs.iter().enumerate() {
                for j in 0..t.numel() {
                    coords.push((i, j));
                }
            }
        }
        Sample::Fraction { fraction, seed } => {
            let total: usize = inputs.iter().map(Tensor::numel).sum();
            let picks = rng::uniform_vec(seed, "gradcheck-sample", total, 0.0, 1.0);
            let mut flat = 0;
            for (i, t) in inputs.iter().enumerate() {
                for j in 0..t.numel() {
                    if picks[flat] < fraction {
                        coords.push((i, j));
                    }
                    flat += 1;
                }
            }
            if coords.is_empty() {
                coords.push((0, 0));
            }
        }
    }

    // Numeric probes.
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = CheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    for (i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + cfg.step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - cfg.step;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[i].data()[j];
        let err = relative_error(a, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some((i, j, a, numeric));
        }
    }
    Ok(report)
}
