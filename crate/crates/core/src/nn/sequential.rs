use rand::Rng;

use super::layers::LayerSpec;
use super::store::{ParamGroup, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    params: Option<(ParamId, ParamId)>,
}

/// A chain of layers whose parameters live in a shared [`ParamStore`] under
/// `"{name}.{index}.weight"` / `"{name}.{index}.bias"`.
#[derive(Clone, Debug)]
pub struct Sequential {
    name: String,
    layers: Vec<Layer>,
}

/// Saved activations of one forward pass; `acts[0]` is the input.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    acts: Vec<Tensor<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace always holds the input")
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.acts[0]
    }
}

impl Sequential {
    pub fn build<T: Real, R: Rng + ?Sized>(
        name: &str,
        specs: Vec<LayerSpec>,
        group: ParamGroup,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let params = match spec.param_shapes() {
                Some((wshape, bshape)) => {
                    let w = store.insert_he(
                        &format!("{name}.{i}.weight"),
                        group,
                        &wshape,
                        spec.fan_in(),
                        rng,
                    )?;
                    let b = store.insert(
                        &format!("{name}.{i}.bias"),
                        group,
                        Tensor::zeros(&bshape),
                    )?;
                    Some((w, b))
                }
                None => None,
            };
            layers.push(Layer { spec, params });
        }
        Ok(Sequential {
            name: name.to_string(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| l.params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in &self.layers {
            shape = l.spec.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for l in &self.layers {
            x = l.spec.forward(&x, l.params.map(|ids| store.pair(ids)))?;
        }
        Ok(x)
    }

    pub fn forward_trace<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: Tensor<T>,
    ) -> Result<Trace<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for l in &self.layers {
            let next = l
                .spec
                .forward(acts.last().unwrap(), l.params.map(|ids| store.pair(ids)))?;
            acts.push(next);
        }
        Ok(Trace { acts })
    }

    /// Back-propagates `grad_out` through the traced pass, accumulating
    /// parameter gradients into `store`. Returns the gradient w.r.t. the input.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        trace: &Trace<T>,
        grad_out: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (input, output) = (&trace.acts[i], &trace.acts[i + 1]);
            g = match l.params {
                Some(ids) => {
                    let (p, gr) = store.pair_with_grads(ids);
                    l.spec.backward(input, output, &g, Some(p), Some(gr))?
                }
                None => l.spec.backward(input, output, &g, None, None)?,
            };
        }
        Ok(g)
    }
}
