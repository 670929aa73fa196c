//! Parameter registry, Adam with bias correction, warmup learning-rate
//! schedule, and global-norm gradient clipping.

use std::collections::HashMap;

use crate::error::{XmError, XmResult};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

/// Ordered collection of named trainable tensors.
///
/// Iteration order is the registration order, which is fixed by model
/// construction code and therefore identical across fresh builds and
/// checkpoint loads of the same architecture.
#[derive(Default)]
pub struct ParameterRegistry {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.by_name.contains_key(name),
            "parameter '{name}' registered twice"
        );
        assert!(tensor.requires_grad(), "parameter '{name}' must require grad");
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Plain-data copy of all parameters, safe to move across threads.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec()))
                .collect(),
        }
    }

    /// Gradient copies in registry order (used to merge worker results).
    pub fn grads(&self) -> XmResult<Vec<Vec<f64>>> {
        self.entries
            .iter()
            .map(|(n, t)| t.grad().ok_or_else(|| XmError::MissingGradient(n.clone())))
            .collect()
    }

    /// Accumulate externally computed gradients, in registry order.
    pub fn accumulate_grads(&self, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.entries.len());
        for ((_, t), g) in self.entries.iter().zip(grads) {
            t.accumulate_grad(g);
        }
    }

    /// Scale all present gradients by a constant.
    pub fn scale_grads(&self, factor: f64) -> XmResult<()> {
        for (name, t) in &self.entries {
            let g = t.grad().ok_or_else(|| XmError::MissingGradient(name.clone()))?;
            t.zero_grad();
            t.accumulate_grad(&g.iter().map(|x| x * factor).collect::<Vec<_>>());
        }
        Ok(())
    }
}

/// Flat, `Send` copy of a registry's contents.
#[derive(Clone, Debug)]
pub struct ParamSnapshot {
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl ParamSnapshot {
    pub fn as_map(&self) -> HashMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(n, _, d)| (n.clone(), d.clone()))
            .collect()
    }
}

/// Where a model builder gets its parameter values from.
pub enum ParamInit<'a> {
    /// Fresh values drawn from the given stream.
    Fresh(&'a mut Rng),
    /// Stored values keyed by parameter name (checkpoint load, worker copy).
    Stored(&'a HashMap<String, Vec<f64>>),
}

/// Creates and registers parameters while a model is being constructed,
/// drawing either fresh initial values or stored ones.
pub struct ParamBuilder<'a> {
    pub registry: &'a mut ParameterRegistry,
    source: ParamInit<'a>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(registry: &'a mut ParameterRegistry, source: ParamInit<'a>) -> Self {
        ParamBuilder { registry, source }
    }

    fn take(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fresh: impl FnOnce(&mut Rng, usize) -> Vec<f64>,
    ) -> XmResult<Tensor> {
        let n: usize = shape.iter().product();
        let data = match &mut self.source {
            ParamInit::Fresh(rng) => fresh(rng, n),
            ParamInit::Stored(map) => {
                let stored = map.get(name).ok_or_else(|| {
                    XmError::Checkpoint(format!("missing parameter '{name}'"))
                })?;
                if stored.len() != n {
                    return Err(XmError::Checkpoint(format!(
                        "parameter '{name}' has {} values, expected {n}",
                        stored.len()
                    )));
                }
                stored.clone()
            }
        };
        let t = Tensor::param(shape, data);
        self.registry.register(name, t.clone());
        Ok(t)
    }

    /// Weight matrix (in×out) with uniform Glorot initialization.
    pub fn linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> XmResult<Tensor> {
        self.linear_weight_scaled(name, fan_in, fan_out, 1.0)
    }

    /// Glorot-uniform weight matrix with the limit scaled by `gain`.
    pub fn linear_weight_scaled(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> XmResult<Tensor> {
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.take(name, vec![fan_in, fan_out], |rng, n| {
            (0..n).map(|_| rng.uniform_in(-limit, limit)).collect()
        })
    }

    /// Convolution kernel (C_out×C_in×3×3) with fan counts over the 3×3 patch.
    pub fn conv_weight(&mut self, name: &str, c_out: usize, c_in: usize) -> XmResult<Tensor> {
        let limit = (6.0 / ((c_in * 9 + c_out * 9) as f64)).sqrt();
        self.take(name, vec![c_out, c_in, 3, 3], |rng, n| {
            (0..n).map(|_| rng.uniform_in(-limit, limit)).collect()
        })
    }

    /// Embedding table (V×d), entries from N(0, 1/d).
    pub fn embedding(&mut self, name: &str, vocab: usize, d_model: usize) -> XmResult<Tensor> {
        let std = (d_model as f64).powf(-0.5);
        self.take(name, vec![vocab, d_model], |rng, n| {
            (0..n).map(|_| rng.normal() * std).collect()
        })
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> XmResult<Tensor> {
        self.take(name, shape, |_, n| vec![0.0; n])
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> XmResult<Tensor> {
        self.take(name, shape, |_, n| vec![1.0; n])
    }
}

/// Per-parameter Adam moments plus the shared step counter.
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(registry: &ParameterRegistry, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState {
            m: registry.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: registry.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Transformer-convention defaults.
    pub fn adam_default(registry: &ParameterRegistry) -> Self {
        OptimizerState::new(registry, 0.9, 0.98, 1e-9)
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// One bias-corrected Adam update over every registered parameter.
/// All gradients must be present; they are zeroed after the update.
pub fn adam_step(
    registry: &ParameterRegistry,
    state: &mut OptimizerState,
    lr: f64,
) -> XmResult<()> {
    // reject before mutating anything
    let grads = registry.grads()?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (idx, (_, param)) in registry.iter().enumerate() {
        let g = &grads[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        param.update_data(|data| {
            for i in 0..data.len() {
                m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        });
        param.zero_grad();
    }
    Ok(())
}

/// Noam schedule: d_model^(-1/2) · min(step^(-1/2), step · warmup^(-3/2)).
/// Peaks exactly at step == warmup.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize) -> f64 {
    assert!(step >= 1, "noam_lr needs step >= 1");
    let s = step as f64;
    let w = warmup as f64;
    (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(registry: &ParameterRegistry, max_norm: f64) -> XmResult<f64> {
    let grads = registry.grads()?;
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        registry.scale_grads(max_norm / norm)?;
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_registry(value: f64) -> (ParameterRegistry, Tensor) {
        let mut reg = ParameterRegistry::new();
        let p = Tensor::param(vec![1], vec![value]);
        reg.register("w", p.clone());
        (reg, p)
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let (reg, p) = single_param_registry(1.0);
        let mut state = OptimizerState::adam_default(&reg);
        p.accumulate_grad(&[0.37]);
        adam_step(&reg, &mut state, 0.01).unwrap();
        // bias-corrected first step: m_hat = g, v_hat = g^2, update = lr·g/(|g|+eps)
        let moved = 1.0 - p.data()[0];
        assert!((moved - 0.01).abs() < 1e-8, "moved {moved}");
        assert!(p.grad().is_none(), "gradients must be zeroed by the step");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter_unchanged() {
        let (reg, p) = single_param_registry(2.5);
        let mut state = OptimizerState::adam_default(&reg);
        p.accumulate_grad(&[0.0]);
        adam_step(&reg, &mut state, 0.1).unwrap();
        assert_eq!(p.data()[0], 2.5);
    }

    #[test]
    fn adam_two_opposite_steps_hand_computed() {
        // beta1=0.9, beta2=0.98, lr=0.1, g1=+1, g2=-1:
        //   step 1: m=0.1, v=0.02, m_hat=1, v_hat=1        -> θ -= 0.1
        //   step 2: m=-0.01, v=0.0396, m_hat=-0.01/0.19,
        //           v_hat=0.0396/0.0396=1                  -> θ += 0.1·(0.01/0.19)
        let (reg, p) = single_param_registry(0.0);
        let mut state = OptimizerState::adam_default(&reg);
        p.accumulate_grad(&[1.0]);
        adam_step(&reg, &mut state, 0.1).unwrap();
        p.accumulate_grad(&[-1.0]);
        adam_step(&reg, &mut state, 0.1).unwrap();
        let expected = -0.1 + 0.1 * (0.01 / 0.19);
        assert!((p.data()[0] - expected).abs() < 5e-9, "{} vs {expected}", p.data()[0]);
        assert!(state.v[0][0] > 0.0);
    }

    #[test]
    fn adam_missing_gradient_is_rejected() {
        let (reg, _p) = single_param_registry(1.0);
        let mut state = OptimizerState::adam_default(&reg);
        let err = adam_step(&reg, &mut state, 0.1).unwrap_err();
        assert!(matches!(err, XmError::MissingGradient(_)));
        assert_eq!(state.step(), 0, "failed step must not advance the counter");
    }

    #[test]
    fn adam_is_bit_reproducible() {
        let run = || {
            let (reg, p) = single_param_registry(0.123456789);
            let mut state = OptimizerState::adam_default(&reg);
            for k in 1..=25 {
                p.accumulate_grad(&[(k as f64 * 0.731).sin()]);
                adam_step(&reg, &mut state, noam_lr(k, 64, 10)).unwrap();
            }
            let bits = p.data()[0].to_bits();
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noam_closed_forms() {
        let lr = noam_lr(25_000, 256, 25_000);
        assert!((lr - 3.952847075210474e-4).abs() < 1e-12, "{lr}");
        let lr = noam_lr(1, 64, 400);
        assert!((lr - 1.5625e-5).abs() < 1e-18, "{lr}");
    }

    #[test]
    fn noam_peaks_exactly_at_warmup() {
        let warmup = 400;
        assert!(noam_lr(2 * warmup, 64, warmup) < noam_lr(warmup, 64, warmup));
        assert!(noam_lr(warmup / 2, 64, warmup) < noam_lr(warmup, 64, warmup));
        for s in 2..=warmup {
            assert!(noam_lr(s, 64, warmup) > noam_lr(s - 1, 64, warmup));
        }
        for s in warmup + 1..warmup + 200 {
            assert!(noam_lr(s, 64, warmup) < noam_lr(s - 1, 64, warmup));
        }
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut reg = ParameterRegistry::new();
        let a = Tensor::param(vec![2], vec![0.0, 0.0]);
        let b = Tensor::param(vec![1], vec![0.0]);
        reg.register("a", a.clone());
        reg.register("b", b.clone());
        a.accumulate_grad(&[3.0, 4.0]);
        b.accumulate_grad(&[12.0]);
        let pre = clip_gradients(&reg, 5.0).unwrap();
        assert!((pre - 13.0).abs() < 1e-12);
        let post: f64 = reg
            .grads()
            .unwrap()
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!(post <= 5.0 + 1e-9, "post-clip norm {post}");
    }

    #[test]
    fn builder_registers_in_order_and_rejects_foreign_sizes() {
        let mut reg = ParameterRegistry::new();
        let mut rng = Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut reg, ParamInit::Fresh(&mut rng));
        b.linear_weight("w1", 4, 8).unwrap();
        b.zeros("b1", vec![8]).unwrap();
        let names: Vec<&str> = reg.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["w1", "b1"]);
        assert_eq!(reg.total_params(), 40);

        let mut stored = HashMap::new();
        stored.insert("w1".to_string(), vec![0.0; 3]);
        let mut reg2 = ParameterRegistry::new();
        let mut b2 = ParamBuilder::new(&mut reg2, ParamInit::Stored(&stored));
        assert!(b2.linear_weight("w1", 4, 8).is_err());
    }
}
