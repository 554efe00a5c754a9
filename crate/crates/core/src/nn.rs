//! Layer building blocks over the autodiff graph.

use std::collections::HashMap;

use avatar_tensor::{Graph, Mat, ParamId, ParamStore, Var};
use rand::Rng;

/// A graph under construction together with the parameters it reads. In
/// training mode parameters are bound as differentiable leaves; otherwise
/// they are plain constants and no gradient bookkeeping happens.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self { g: Graph::new(), store, train, bound: HashMap::new() }
    }

    /// Binds a parameter once per graph.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = if self.train { self.g.param(self.store, id) } else { self.g.constant(self.store.value(id).clone()) };
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.g.constant(m)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.g.value(v)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self { w: store.add_weight(format!("{name}.w"), fan_in, fan_out, rng), b: store.add_zeros(format!("{name}.b"), 1, fan_out) }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.g.linear(x, w, Some(b))
    }
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims.windows(2).enumerate().map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng)).collect();
        Self { layers }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        self.forward_with_hidden(cx, x).0
    }

    /// Output plus the activation entering the last layer.
    pub fn forward_with_hidden(&self, cx: &mut Ctx, mut x: Var) -> (Var, Var) {
        let n = self.layers.len();
        for l in &self.layers[..n - 1] {
            let y = l.forward(cx, x);
            x = cx.g.relu(y);
        }
        (self.layers[n - 1].forward(cx, x), x)
    }

    /// Zeroes the last layer (used for neutral initial outputs).
    pub fn zero_last(&self, store: &mut ParamStore) {
        let l = self.layers.last().expect("non-empty mlp");
        store.value_mut(l.w).data_mut().fill(0.0);
        store.value_mut(l.b).data_mut().fill(0.0);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}
