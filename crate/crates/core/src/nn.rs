//! Parameter storage, initialization, and the AdamW optimizer.
//!
//! All model weights live in one [`ParamStore`], keyed by stable names.
//! Initialization draws from a per-name RNG stream, so the initial weights
//! depend only on the seed and the name, never on registration order or on
//! which fine-tuning strategy is active.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Arr, Tape, Var};
use crate::rng::named_rng;

/// Index of a parameter in the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// How a parameter tensor is filled at registration.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform(-limit, limit) with limit = sqrt(1 / fan_in).
    UniformFanIn { fan_in: usize },
    /// Gaussian with the given standard deviation.
    Normal { std: f64 },
}

/// Named collection of f64 weight tensors plus per-parameter trainability.
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    trainable: Vec<bool>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            seed,
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        let n: usize = shape.iter().product();
        let mut rng = named_rng(self.seed, name);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::UniformFanIn { fan_in } => {
                let limit = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        self.names.push(name.to_string());
        self.values
            .push(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, v: Arr) {
        assert_eq!(self.values[id.0].shape(), v.shape());
        self.values[id.0] = v;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Set the trainable mask from a name predicate; returns ids now trainable.
    pub fn set_trainable_by(&mut self, pred: impl Fn(&str) -> bool) -> Vec<ParamId> {
        let mut on = Vec::new();
        for i in 0..self.names.len() {
            let t = pred(&self.names[i]);
            self.trainable[i] = t;
            if t {
                on.push(ParamId(i));
            }
        }
        on
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.values.len())
            .filter(|&i| self.trainable[i])
            .map(ParamId)
            .collect()
    }

    /// Total element count of trainable parameters.
    pub fn trainable_param_count(&self) -> usize {
        (0..self.values.len())
            .filter(|&i| self.trainable[i])
            .map(|i| self.values[i].len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }
}

/// Per-tape lazy binding of store parameters to graph leaves.
///
/// Frozen parameters enter the tape as constants, which prunes their
/// backward subgraph entirely.
pub struct Binding<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: std::cell::RefCell<Vec<Option<usize>>>,
}

impl<'t, 's> Binding<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            vars: std::cell::RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        if let Some(idx) = self.vars.borrow()[id.0] {
            return self.tape.var_at(idx);
        }
        let v = self
            .tape
            .leaf(self.store.value(id).clone(), self.store.is_trainable(id));
        self.vars.borrow_mut()[id.0] = Some(v.index());
        v
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Collect gradients for all bound trainable parameters.
    pub fn grads(&self, grads: &crate::graph::Gradients) -> Vec<(ParamId, Arr)> {
        let vars = self.vars.borrow();
        let mut out = Vec::new();
        for (i, slot) in vars.iter().enumerate() {
            let Some(idx) = slot else { continue };
            if !self.store.trainable[i] {
                continue;
            }
            if let Some(g) = grads.get(self.tape.var_at(*idx)) {
                out.push((ParamId(i), g.clone()));
            }
        }
        out
    }
}

/// Accumulates per-sample gradients in a fixed order.
pub struct GradBuffer {
    grads: Vec<Option<Arr>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn add(&mut self, contributions: Vec<(ParamId, Arr)>) {
        for (id, g) in contributions {
            match &mut self.grads[id.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= c;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Arr> {
        self.grads[id.0].as_ref()
    }
}

/// AdamW: Adam moments plus decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Arr>>,
    v: Vec<Option<Arr>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// Apply one update to every trainable parameter with a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..store.len() {
            if !store.trainable[i] {
                continue;
            }
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            if self.m[i].is_none() {
                self.m[i] = Some(Arr::zeros(g.raw_dim()));
                self.v[i] = Some(Arr::zeros(g.raw_dim()));
            }
            let m = self.m[i].as_mut().unwrap();
            let v = self.v[i].as_mut().unwrap();
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(&(g * g) * (1.0 - self.beta2));
            let p = &mut store.values[i];
            // decoupled decay, then the Adam step
            *p *= 1.0 - self.lr * self.weight_decay;
            let mhat = m.mapv(|x| x / bc1);
            let vhat = v.mapv(|x| x / bc2);
            let upd = &mhat / &(vhat.mapv(f64::sqrt) + self.eps);
            *p -= &(&upd * self.lr);
        }
    }
}

/// Fully connected layer: y = x W + b, with W of shape in×out.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            &[d_in, d_out],
            Init::UniformFanIn { fan_in: d_in },
        );
        let b = store.register(&format!("{name}.b"), &[d_out], Init::Zeros);
        Self { w, b, d_in, d_out }
    }

    /// Apply to a token matrix (rows are tokens).
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.matmul(bind.var(self.w)).add_bias_row(bind.var(self.b))
    }

    /// Apply to a single vector.
    pub fn forward_vec<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let row = x.as_row_matrix();
        self.forward(bind, row).row(0)
    }
}

/// Convolution layer wrapper.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            &[c_out, c_in, k, k],
            Init::UniformFanIn {
                fan_in: c_in * k * k,
            },
        );
        let b = store.register(&format!("{name}.b"), &[c_out], Init::Zeros);
        Self {
            w,
            b,
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.conv2d(bind.var(self.w), bind.var(self.b), self.stride, self.pad)
    }
}
