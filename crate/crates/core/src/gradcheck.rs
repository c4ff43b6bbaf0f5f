//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Trainable};
use crate::params::ParamGroup;
use crate::pipeline::Target;
use crate::slots::SlotRegistry;
use crate::synth::gen_synthetic;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{build_instances, build_vocab, instance_losses, loss_and_grads, Instance};

/// Which coordinates of each input tensor to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `per_tensor` coordinates per input, drawn without replacement.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator guard.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward gradients of `f` against central differences with step
/// `step`.
///
/// `f` builds a scalar from the input variables; it is re-run on a fresh tape
/// for every perturbation, so it must be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let evaluate = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant_ref(t)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::Contract("grad_check function must return a scalar".into()));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v}")));
        }
        Ok(v)
    };

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut rng = match coords {
        Coords::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coords::All => None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (i, grad) in analytic.iter().enumerate() {
        let numel = inputs[i].numel();
        let picks: Vec<usize> = match (coords, rng.as_mut()) {
            (Coords::Sample { per_tensor, .. }, Some(rng)) if per_tensor < numel => {
                let mut p = sample(rng, numel, per_tensor).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..numel).collect(),
        };
        for j in picks {
            let original = inputs[i].data()[j];
            work[i].data_mut()[j] = original + step;
            let plus = evaluate(&work)?;
            work[i].data_mut()[j] = original - step;
            let minus = evaluate(&work)?;
            work[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            if !a.is_finite() {
                return Err(Error::Numeric(format!("analytic gradient {a} at input {i}[{j}]")));
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Result of [`check_model_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Finite-difference estimator for [`check_model_gradients`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difference {
    /// `D(h) = (f(x + h) - f(x - h)) / 2h`.
    Central,
    /// `(4 D(h/2) - D(h)) / 3`, fourth order in `h`. Lets `h` be large
    /// enough that rounding in the loss stays far below small gradients.
    Richardson,
}

/// Checks the summed training loss of `batch` against finite differences
/// for up to `per_tensor` sampled coordinates of every parameter tensor the
/// batch touches (encoder, heads and the prompts of the batch's slots).
pub fn check_model_gradients(
    params: &ModelParams,
    batch: &[&Instance],
    step: f64,
    difference: Difference,
    per_tensor: usize,
    seed: u64,
) -> Result<ModelGradReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let (_, grads) = loss_and_grads(params, batch, Trainable::ALL)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = ModelGradReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let groups: Vec<(String, ParamGroup)> = params.named_tensors().into_iter().map(|(n, g, _)| (n, g)).collect();
    for (name, grad) in &grads {
        // Instances that cannot see this tensor difference to exactly zero.
        let group = groups.iter().find(|(n, _)| n == name).map(|(_, g)| g);
        let reached: Vec<&Instance> = batch.iter().copied().filter(|i| group.is_none_or(|g| reaches(g, i))).collect();
        let numel = grad.numel();
        let mut picks = if per_tensor < numel {
            sample(&mut rng, numel, per_tensor).into_vec()
        } else {
            (0..numel).collect()
        };
        picks.sort_unstable();
        for j in picks {
            let mut evaluate = |delta: f64| -> Result<Vec<f64>> {
                let original = set_coord(&mut work, name, j, None);
                set_coord(&mut work, name, j, Some(original + delta));
                let v = instance_losses(&work, &reached);
                set_coord(&mut work, name, j, Some(original));
                let v = v?;
                if let Some(bad) = v.iter().find(|l| !l.is_finite()) {
                    return Err(Error::Numeric(format!("loss {bad} with `{name}`[{j}] perturbed")));
                }
                Ok(v)
            };
            // Differencing per instance keeps the rounding of the summed
            // loss out of the numerator.
            let mut central = |h: f64| -> Result<f64> {
                let plus = evaluate(h)?;
                let minus = evaluate(-h)?;
                Ok(plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * h))
            };
            let numeric = match difference {
                Difference::Central => central(step)?,
                Difference::Richardson => {
                    let coarse = central(step)?;
                    (4.0 * central(step / 2.0)? - coarse) / 3.0
                }
            };
            let a = grad.data()[j];
            if !a.is_finite() {
                return Err(Error::Numeric(format!("analytic gradient {a} at `{name}`[{j}]")));
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

/// Settings for [`model_gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelCheckSettings {
    pub step: f64,
    pub difference: Difference,
    /// Standard deviation of the Gaussian noise added to every parameter
    /// after init. At the N(0, 0.02²) init the attention projections have
    /// gradients near 1e-9, which central differences cannot resolve.
    pub jitter: f64,
    pub examples: usize,
    pub instances: usize,
    pub per_tensor: usize,
}

impl Default for ModelCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-3,
            difference: Difference::Richardson,
            jitter: 0.1,
            examples: 5,
            instances: 3,
            per_tensor: 4,
        }
    }
}

/// Gradient check of the full model for one seed: a small synthetic corpus,
/// freshly initialised (and jittered) parameters, a few training instances.
pub fn model_gradcheck(
    config: &ModelConfig,
    registry: &SlotRegistry,
    seed: u64,
    settings: &ModelCheckSettings,
) -> Result<ModelGradReport> {
    if !(settings.jitter >= 0.0 && settings.jitter.is_finite()) {
        return Err(Error::Config(format!("jitter must be >= 0, got {}", settings.jitter)));
    }
    if settings.instances == 0 {
        return Err(Error::Config("gradcheck needs at least one instance".into()));
    }
    let corpus = gen_synthetic(seed, settings.examples, registry)?;
    let mut params = ModelParams::init(config.clone(), build_vocab(&corpus, registry), &registry.ids(), seed)?;
    if settings.jitter > 0.0 {
        let noise = Normal::new(0.0, settings.jitter).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
        for (_, _, t) in params.named_tensors_mut() {
            for v in t.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let instances = build_instances(&corpus, registry, &params.vocab, &params.config)?;
    // Spread the picks so different slots and kinds show up.
    let stride = (instances.len() / settings.instances).max(1);
    let batch: Vec<&Instance> = instances.iter().step_by(stride).take(settings.instances).collect();
    check_model_gradients(&params, &batch, settings.step, settings.difference, settings.per_tensor, seed)
}

/// Reads coordinate `j` of parameter `name`, writing `value` if given.
fn reaches(group: &ParamGroup, inst: &Instance) -> bool {
    match group {
        ParamGroup::Encoder => true,
        ParamGroup::Prompt(slot) => *slot == inst.slot,
        ParamGroup::SpanHead => matches!(inst.target, Target::Span { .. }),
        ParamGroup::BinaryHead => matches!(inst.target, Target::Binary(_)),
    }
}

fn set_coord(params: &mut ModelParams, name: &str, j: usize, value: Option<f64>) -> f64 {
    let mut tensors = params.named_tensors_mut();
    let (_, _, t) = tensors
        .iter_mut()
        .find(|(n, _, _)| n == name)
        .expect("gradient names come from the model");
    let slot = &mut t.data_mut()[j];
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact_to_fd_precision() {
        // f(x) = xᵀ A x
        let a = Tensor::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, -0.3], vec![0.0, -0.3, 3.0]])
            .unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.7, -1.1, 0.4]).unwrap();
        let report = grad_check(
            |tape, v| {
                let ax = tape.matmul(v[0], v[1])?;
                let prod = tape.mul(ax, v[1])?;
                Ok(tape.sum(prod))
            },
            &[a, x],
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert_eq!(report.checked, 12);
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn linear_function_is_machine_exact() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]);
        let report = grad_check(
            |tape, v| {
                let s = tape.scale(v[0], 3.0);
                Ok(tape.sum(s))
            },
            &[x],
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::vector(vec![1.0]);
        let f = |tape: &mut Tape<'_>, v: &[Var]| Ok(tape.sum(v[0]));
        assert!(grad_check(f, &[x.clone()], 0.0, Coords::All).is_err());
        let inf = Tensor::vector(vec![f64::INFINITY]);
        assert!(matches!(
            grad_check(f, &[inf], 1e-5, Coords::All),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relative_error_guard() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
