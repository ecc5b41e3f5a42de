//! Analytic gradients against central finite differences, in `f64`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{loss_and_grads, loss_on, TrainConfig};
use crate::cells::ParamTree;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::network::{record_rollout, NetworkConfig, Parameters};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Sequence length of the random instance.
    pub steps: usize,
    pub seed: u64,
    /// Entries checked per tensor; `None` checks every entry.
    pub samples_per_tensor: Option<usize>,
    /// Test hook: perturbs the analytic gradient of the named tensor.
    pub corrupt: Option<String>,
}

impl GradCheckOptions {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheckOptions { eps, tol, steps: 3, seed: 0, samples_per_tensor: Some(12), corrupt: None }
    }
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self::new(1e-5, 1e-4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation crossed a rectifier or pooling boundary.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    /// Tensors whose error is not below the tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !(t.max_rel_err < self.tol)).map(|t| t.name.as_str()).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let mark = if t.max_rel_err < self.tol { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "{mark} {:<40} checked {:>4} skipped {:>3} max rel {:.3e} max abs {:.3e}",
                t.name, t.checked, t.skipped, t.max_rel_err, t.max_abs_err
            )?;
        }
        write!(f, "max relative error {:.3e} (tol {:.1e}): {}", self.max_rel_err(), self.tol, if self.passed() { "pass" } else { "fail" })
    }
}

/// Checks every parameter tensor of `netcfg` on a random instance with
/// default sampling.
pub fn gradient_check(netcfg: &NetworkConfig, eps: f64, tol: f64) -> Result<GradCheckReport> {
    gradient_check_with(netcfg, &GradCheckOptions::new(eps, tol))
}

struct Instance {
    config: NetworkConfig,
    frames: Vec<Tensor<f64>>,
    actions: Vec<Tensor<f64>>,
    cfg: TrainConfig,
}

impl Instance {
    fn loss(&self, params: &Parameters<Tensor<f64>>) -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let pv = params.map_ref(&mut |t| tape.leaf(t.clone()));
        let rec = record_rollout(&mut tape, &self.config, &pv, &self.frames, &self.actions)?;
        let (loss, _) = loss_on(&mut tape, &rec.errors, &self.cfg)?;
        Ok((tape.value(loss).data()[0], tape.activation_pattern()))
    }
}

pub fn gradient_check_with(netcfg: &NetworkConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    netcfg.validate()?;
    if !(opts.eps > 0.0) || opts.tol.is_nan() || opts.tol < 0.0 {
        return Err(Error::invalid("eps must be positive and tol non-negative"));
    }
    if opts.steps < 2 {
        return Err(Error::invalid("gradient check needs at least 2 steps"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = Parameters::<Tensor<f64>>::init(netcfg, opts.seed);
    // move biases off zero so no rectifier sits exactly on its kink
    params.visit_mut("", &mut |name, t| {
        if name.ends_with("bias") || name.ends_with("b1") || name.ends_with("b2") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    });
    let shape = [netcfg.channels, netcfg.height, netcfg.width];
    let inst = Instance {
        config: netcfg.clone(),
        frames: (0..opts.steps).map(|_| Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0))).collect(),
        actions: (0..opts.steps).map(|_| Tensor::from_fn(&[netcfg.action_dim], |_| rng.random_range(0.0..1.0))).collect(),
        cfg: TrainConfig::default(),
    };

    let mut analytic = loss_and_grads(netcfg, &params, &inst.frames, &inst.actions, &inst.cfg)?.grads;
    if let Some(target) = &opts.corrupt {
        let mut found = false;
        analytic.visit_mut("", &mut |name, g| {
            if &name == target {
                found = true;
                *g = g.map(|v| v + 1e-2 * (1.0 + v.abs()));
            }
        });
        if !found {
            return Err(Error::invalid(format!("no parameter named {target:?}")));
        }
    }
    let (_, base_pattern) = inst.loss(&params)?;

    // a deterministic visiting order per tensor, drawn up front
    let jobs: Vec<(usize, String, Vec<usize>)> = params
        .named()
        .into_iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut order: Vec<usize> = (0..t.len()).collect();
            order.shuffle(&mut rng);
            (i, name, order)
        })
        .collect();
    let grads: Vec<Tensor<f64>> = analytic.named().into_iter().map(|(_, g)| g.clone()).collect();
    let want = opts.samples_per_tensor.unwrap_or(usize::MAX);

    let tensors = jobs
        .into_par_iter()
        .map(|(ti, name, order)| -> Result<TensorCheck> {
            let mut p = params.clone();
            let mut check = TensorCheck { name, checked: 0, skipped: 0, max_rel_err: 0.0, max_abs_err: 0.0 };
            for idx in order {
                if check.checked >= want {
                    break;
                }
                let orig = entry(&mut p, ti, idx, None);
                entry(&mut p, ti, idx, Some(orig + opts.eps));
                let (plus, pat_plus) = inst.loss(&p)?;
                entry(&mut p, ti, idx, Some(orig - opts.eps));
                let (minus, pat_minus) = inst.loss(&p)?;
                entry(&mut p, ti, idx, Some(orig));
                if pat_plus != base_pattern || pat_minus != base_pattern {
                    check.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * opts.eps);
                let a = grads[ti].data()[idx];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
                check.max_abs_err = check.max_abs_err.max(abs);
                check.max_rel_err = check.max_rel_err.max(rel);
                check.checked += 1;
            }
            Ok(check)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { tol: opts.tol, tensors })
}

/// Reads entry `idx` of the `ti`-th tensor, writing `set` first when given.
fn entry(p: &mut Parameters<Tensor<f64>>, ti: usize, idx: usize, set: Option<f64>) -> f64 {
    let mut i = 0;
    let mut out = 0.0;
    p.visit_mut("", &mut |_, t| {
        if i == ti {
            if let Some(v) = set {
                t.data_mut()[idx] = v;
            }
            out = t.data()[idx];
        }
        i += 1;
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig::new(1, 4, 4, 1, 2)
    }

    #[test]
    fn tiny_net_passes_on_every_entry() {
        let opts = GradCheckOptions { samples_per_tensor: None, ..GradCheckOptions::default() };
        let report = gradient_check_with(&tiny(), &opts).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.tensors.iter().all(|t| t.checked > 0));
    }

    #[test]
    fn corrupted_tensor_is_named() {
        let name = "layer0.unit1.output_gate.hidden_kernels".to_string();
        let opts = GradCheckOptions { corrupt: Some(name.clone()), ..GradCheckOptions::default() };
        let report = gradient_check_with(&tiny(), &opts).unwrap();
        assert_eq!(report.failures(), vec![name.as_str()]);
        assert!(gradient_check_with(&tiny(), &GradCheckOptions { corrupt: Some("nope".into()), ..opts }).is_err());
    }

    #[test]
    fn zero_tolerance_fails() {
        let report = gradient_check(&tiny(), 1e-5, 0.0).unwrap();
        assert!(!report.passed());
    }
}
