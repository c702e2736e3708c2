//! Named parameter storage, layer helpers and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{numel, Scalar, Tensor};

/// Ordered collection of named parameter tensors.
///
/// Parameters are reference counted so a training graph can borrow them
/// without copying; updates go through [`Arc::make_mut`] once the graph
/// has been dropped.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf_shared(Arc::clone(v), trainable)))
            .collect();
        Bound { vars }
    }

    /// Extracts the gradient of every bound parameter, zero-filled where no
    /// gradient reached the parameter.
    pub fn grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(k, v)| {
                let g = bound
                    .vars
                    .get(k)
                    .and_then(|&var| grads.take(var))
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Flattened copy of every parameter in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Bitwise equality of every parameter.
    pub fn same_values(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape() && va.data() == vb.data())
    }
}

/// Parameters of one model bound to a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

/// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..numel(shape))
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Adds a convolution `<name>.weight` of shape `[out, in, *kernel]` and its bias.
pub fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: &[usize],
) {
    let fan_in = in_ch * kernel.iter().product::<usize>();
    let mut shape = vec![out_ch, in_ch];
    shape.extend_from_slice(kernel);
    store.insert(format!("{name}.weight"), init_uniform(rng, &shape, fan_in));
    store.insert(format!("{name}.bias"), init_uniform(rng, &[out_ch], fan_in));
}

/// Adds a dense layer `<name>.weight` of shape `[in, out]` and its bias.
pub fn add_linear<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, input: usize, output: usize) {
    store.insert(format!("{name}.weight"), init_uniform(rng, &[input, output], input));
    store.insert(format!("{name}.bias"), init_uniform(rng, &[output], input));
}

pub fn conv<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var, stride: &[usize], padding: &[usize]) -> Var {
    let y = g.conv(x, p.var(&format!("{name}.weight")), stride, padding);
    g.bias_axis1(y, p.var(&format!("{name}.bias")))
}

/// `x[N, in] -> [N, out]`.
pub fn linear<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    let y = g.matmul(x, p.var(&format!("{name}.weight")));
    g.bias_axis1(y, p.var(&format!("{name}.bias")))
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((w, &gr), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let wf = w.as_f64();
                let gf = gr.as_f64() + self.weight_decay * wf;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gf;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gf * gf;
                let update = self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w = T::from_f64_lossy(wf - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64_slice(&[2], &[3.0, -2.0]));
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..500 {
            let g = Graph::new();
            let p = store.bind(&g, true);
            let loss = g.sum_all(g.square(p.var("w")));
            let mut grads = g.backward(loss);
            let grads = store.grads(&p, &mut grads);
            drop(g);
            opt.step(&mut store, &grads);
        }
        assert!(store.get("w").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn frozen_binding_yields_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        add_linear(&mut store, &mut rng, "fc", 3, 2);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.leaf(Tensor::ones(&[1, 3]));
        let loss = g.sum_all(linear(&g, &p, "fc", x));
        let mut grads = g.backward(loss);
        assert!(grads.get(x).is_some());
        let pg = store.grads(&p, &mut grads);
        assert!(pg.values().all(|t| t.max_abs() == 0.0));
    }
}
