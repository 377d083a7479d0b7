use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Optimizer group. Each group carries its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Network,
    GroundTruth,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Network => 0,
            ParamGroup::GroundTruth => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ParamGroup::Network),
            1 => Some(ParamGroup::GroundTruth),
            _ => None,
        }
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// First and second moment estimates of the adaptive optimizer.
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// He-style initialization: weights ~ N(0, 2/fan_in), bias zero.
    pub fn insert_he<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        self.insert(name, group, Tensor::from_vec(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.scale(s);
        }
    }

    /// Weight and bias values for a layer, if both handles are present.
    pub fn pair(&self, ids: (ParamId, ParamId)) -> (&Tensor<T>, &Tensor<T>) {
        (&self.params[ids.0 .0].value, &self.params[ids.1 .0].value)
    }

    /// Parameter values borrowed immutably alongside the gradient buffers of
    /// a weight/bias pair borrowed mutably.
    pub fn pair_with_grads(
        &mut self,
        ids: (ParamId, ParamId),
    ) -> ((&Tensor<T>, &Tensor<T>), (&mut Tensor<T>, &mut Tensor<T>)) {
        let (w, b) = (ids.0 .0, ids.1 .0);
        assert_ne!(w, b, "weight and bias must be distinct parameters");
        // Split so that the two parameters can be borrowed independently.
        let (first, second, swapped) = if w < b { (w, b, false) } else { (b, w, true) };
        let (lo, hi) = self.params.split_at_mut(second);
        let p_first = &mut lo[first];
        let p_second = &mut hi[0];
        let (pw, pb) = if swapped {
            (p_second, p_first)
        } else {
            (p_first, p_second)
        };
        ((&pw.value, &pb.value), (&mut pw.grad, &mut pb.grad))
    }

    /// Copy of the store in another precision. Moments and step are carried over.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                })
                .collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }

    /// Overwrites every parameter whose name appears in `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if !p.name.starts_with(prefix) {
                continue;
            }
            if let Some(src) = other.by_name(&p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&Param<T>) -> bool) {
        self.params.retain(|p| keep(p));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub network: f64,
    pub ground_truth: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        GroupRates {
            network: lr,
            ground_truth: lr,
        }
    }

    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Network => self.network,
            ParamGroup::GroundTruth => self.ground_truth,
        }
    }
}

/// Applies one update to every parameter, zeroes gradients and advances the
/// step counter. Parameters are left untouched if any gradient is non-finite.
pub fn optimizer_step<T: Real>(
    store: &mut ParamStore<T>,
    rates: GroupRates,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if let Some(bad) = store.params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", bad.name)));
    }
    let t = store.step + 1;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for p in &mut store.params {
        let lr = rates.get(p.group);
        let wd = T::from_f64(cfg.weight_decay);
        match cfg.kind {
            OptimizerKind::Sgd => {
                let lr = T::from_f64(lr);
                for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    let g = g + wd * *w;
                    *w -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
                let one = T::one();
                let step_size = T::from_f64(lr / bc1);
                let bc2_sqrt = T::from_f64(bc2.sqrt());
                let eps = T::from_f64(cfg.eps);
                let values = p.value.data_mut();
                let grads = p.grad.data();
                let ms = p.m.data_mut();
                let vs = p.v.data_mut();
                for i in 0..values.len() {
                    let g = grads[i] + wd * values[i];
                    ms[i] = b1t * ms[i] + (one - b1t) * g;
                    vs[i] = b2t * vs[i] + (one - b2t) * g * g;
                    let denom = vs[i].sqrt() / bc2_sqrt + eps;
                    values[i] -= step_size * ms[i] / denom;
                }
            }
        }
        p.grad.fill(T::zero());
    }
    store.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", ParamGroup::Network, Tensor::from_vec(&[1], vec![v]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = scalar_store(0.75);
        for _ in 0..5 {
            optimizer_step(&mut s, GroupRates::uniform(1e-3), &OptimizerConfig::default()).unwrap();
        }
        assert_eq!(s.by_name("w").unwrap().value.data()[0], 0.75);
        assert_eq!(s.step(), 5);
    }

    #[test]
    fn adam_matches_hand_stepped_scalar_reference() {
        let (lr, g, b1, b2, eps) = (0.01, 0.3, 0.9, 0.999, 1e-8);
        let mut s = scalar_store(1.0);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            s.get_mut(ParamId(0)).grad.data_mut()[0] = g;
            optimizer_step(&mut s, GroupRates::uniform(lr), &OptimizerConfig::default()).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * mhat / (vhat.sqrt() + eps);
            let got = s.by_name("w").unwrap().value.data()[0];
            assert!((got - w).abs() < 1e-12, "step {t}: {got} vs {w}");
        }
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut s = scalar_store(1.0);
        s.get_mut(ParamId(0)).grad.data_mut()[0] = 2.0;
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Default::default()
        };
        optimizer_step(&mut s, GroupRates::uniform(0.1), &cfg).unwrap();
        assert!((s.by_name("w").unwrap().value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.by_name("w").unwrap().grad.data()[0], 0.0);
    }

    #[test]
    fn group_learning_rates_scale_step_magnitude() {
        let mut s = ParamStore::<f64>::new();
        s.insert("net", ParamGroup::Network, Tensor::from_vec(&[1], vec![0.0]).unwrap())
            .unwrap();
        s.insert("gt", ParamGroup::GroundTruth, Tensor::from_vec(&[1], vec![0.0]).unwrap())
            .unwrap();
        for p in s.iter_mut() {
            p.grad.data_mut()[0] = 1.0;
        }
        let rates = GroupRates {
            network: 1e-3,
            ground_truth: 1e-4,
        };
        optimizer_step(&mut s, rates, &OptimizerConfig::default()).unwrap();
        let dn = s.by_name("net").unwrap().value.data()[0].abs();
        let dg = s.by_name("gt").unwrap().value.data()[0].abs();
        assert!((dn / dg - 10.0).abs() < 1e-6, "{dn} / {dg}");
    }

    #[test]
    fn non_finite_gradient_is_reported_by_name() {
        let mut s = scalar_store(1.0);
        s.insert("bad.bias", ParamGroup::Network, Tensor::zeros(&[2])).unwrap();
        s.get_mut(ParamId(1)).grad.data_mut()[1] = f64::NAN;
        let err = optimizer_step(&mut s, GroupRates::uniform(0.1), &OptimizerConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("bad.bias"));
        assert_eq!(s.by_name("w").unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(1.0);
        assert!(s.insert("w", ParamGroup::Network, Tensor::zeros(&[1])).is_err());
    }
}
