//! Central-difference verification of tape gradients.
//!
//! `grad_check` evaluates a scalar program once with reverse-mode
//! differentiation and then re-evaluates it 2 times per parameter entry
//! with the entry nudged by ±eps. The program must be differentiable at the
//! evaluation point; for L1-style losses callers keep prediction and target
//! apart so no |.| kink is crossed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, Variant};
use crate::params::{accumulate_grads, bind_all, Bindings, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::DenseArray;

pub struct GradCheckReport {
    /// max over all entries of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_err: f64,
    pub worst_param: String,
    /// per-parameter worst relative error, in store order
    pub per_param: Vec<(String, f64)>,
}

fn eval_scalar<F>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let binds = bind_all(store, &mut tape)?;
    let out = f(&mut tape, &binds)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("program must be scalar, got {:?}", tape.value(out).shape()),
        });
    }
    Ok(tape.value(out).data()[0])
}

pub fn grad_check<F>(store: &mut ParameterStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    grad_check_multi(store, &[eps], f)
}

/// `grad_check` probed at several step sizes: an entry's error is the best
/// central-difference agreement among the probes. The difference error curve
/// is U-shaped in eps (rounding noise below, truncation above), so entries
/// with tiny gradients and entries with high curvature each get compared at
/// a step size that conditions them well.
pub fn grad_check_multi<F>(
    store: &mut ParameterStore,
    eps_list: &[f64],
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if eps_list.is_empty() || eps_list.iter().any(|&e| e <= 0.0) {
        return Err(Error::Config("grad check needs positive eps values".into()));
    }
    // analytic pass
    store.zero_grads();
    {
        let mut tape = Tape::new();
        let binds = bind_all(store, &mut tape)?;
        let out = f(&mut tape, &binds)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Shape {
                op: "grad_check",
                detail: format!("program must be scalar, got {:?}", tape.value(out).shape()),
            });
        }
        tape.value(out).check_finite("grad_check target")?;
        tape.backward(out)?;
        accumulate_grads(store, &tape, &binds)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(name, e)| (name.to_string(), e.grad.data().to_vec()))
        .collect();

    // numeric pass, one entry at a time
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        per_param: Vec::new(),
    };
    for (name, grads) in &analytic {
        let mut param_worst = 0.0f64;
        for idx in 0..grads.len() {
            let original = store.get(name)?.value.data()[idx];
            let a = grads[idx];
            let mut entry_best = f64::INFINITY;
            for &eps in eps_list {
                store.entry_mut(name)?.value.data_mut()[idx] = original + eps;
                let f_plus = eval_scalar(store, &f)?;
                store.entry_mut(name)?.value.data_mut()[idx] = original - eps;
                let f_minus = eval_scalar(store, &f)?;
                store.entry_mut(name)?.value.data_mut()[idx] = original;

                let numeric = (f_plus - f_minus) / (2.0 * eps);
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                entry_best = entry_best.min(rel);
            }
            param_worst = param_worst.max(entry_best);
            if entry_best > report.max_rel_err {
                report.max_rel_err = entry_best;
                report.worst_param = format!("{name}[{idx}]");
            }
        }
        report.per_param.push((name.clone(), param_worst));
    }
    Ok(report)
}

/// Step sizes probed by the whole-model check: entries with tiny gradients
/// need the large step to beat f64 cancellation, entries on high-curvature
/// coordinates need the small one to beat truncation.
pub const MODEL_CHECK_EPS: &[f64] = &[1e-3, 1e-5];

/// The small configuration the gradient-fidelity gate runs on.
pub fn default_check_config() -> ModelConfig {
    ModelConfig {
        n_nodes: 4,
        input_dim: 1,
        input_len: 4,
        horizon: 2,
        embed_dim: 3,
        hidden_dim: 4,
        cheb_k: 2,
        heads: 1,
        window: 2,
        stack: "MS-SS".into(),
        variant: Variant::Full,
        seed: 251,
        static_adjacency: None,
    }
}

/// Checks every parameter of every module of a freshly built model against
/// central differences of the L1 training loss. The target is placed one
/// unit below the prediction so prediction and truth differ elementwise and
/// the loss is smooth at the evaluation point.
pub fn model_grad_check(cfg: &ModelConfig) -> Result<GradCheckReport> {
    let (model, mut store) = build_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let numel = cfg.input_len * cfg.n_nodes * cfg.input_dim;
    let x = DenseArray::new(
        vec![cfg.input_len, cfg.n_nodes, cfg.input_dim],
        (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )?;

    let target = {
        let mut tape = Tape::new();
        let binds = bind_all(&store, &mut tape)?;
        let pred = model.forward_var(&mut tape, &binds, &x)?;
        let mut t = tape.value(pred).clone();
        for v in t.data_mut() {
            *v -= 1.0;
        }
        t
    };

    grad_check_multi(&mut store, MODEL_CHECK_EPS, |tape, binds| {
        model.loss_var(tape, binds, &x, &target)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_central_difference() {
        // f(x) = x^2 at x = 3: analytic 6, numeric 6
        let mut store = ParameterStore::new();
        store.register("x", DenseArray::scalar(3.0), true).unwrap();
        let report = grad_check(&mut store, 1e-5, |tape, binds| {
            let x = binds.var("x")?;
            let y = tape.mul(x, x)?;
            tape.sum_all(y)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
        assert_eq!(store.get("x").unwrap().grad.data(), &[6.0]);
    }

    #[test]
    fn unused_parameter_grad_is_exactly_zero() {
        let mut store = ParameterStore::new();
        store.register("x", DenseArray::scalar(2.0), true).unwrap();
        store.register("dead", DenseArray::scalar(5.0), true).unwrap();
        let report = grad_check(&mut store, 1e-5, |tape, binds| {
            let x = binds.var("x")?;
            let y = tape.mul(x, x)?;
            tape.sum_all(y)
        })
        .unwrap();
        assert_eq!(store.get("dead").unwrap().grad.data(), &[0.0]);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn linear_layer_with_l1_loss() {
        // y = w*x + b, loss = |y - t| with y - t kept away from 0
        let mut store = ParameterStore::new();
        store
            .register("w", DenseArray::new(vec![1, 1], vec![1.5]).unwrap(), true)
            .unwrap();
        store
            .register("b", DenseArray::new(vec![1, 1], vec![-0.25]).unwrap(), false)
            .unwrap();
        let report = grad_check(&mut store, 1e-5, |tape, binds| {
            let w = binds.var("w")?;
            let b = binds.var("b")?;
            let x = tape.leaf(DenseArray::new(vec![1, 1], vec![2.0]).unwrap())?;
            let t = tape.leaf(DenseArray::new(vec![1, 1], vec![-7.0]).unwrap())?;
            let y = tape.matmul(x, w)?;
            let y = tape.add(y, b)?;
            let d = tape.sub(y, t)?;
            let a = tape.abs(d)?;
            tape.sum_all(a)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
