//! Small layer helpers shared by the tokenizer, condition encoders and model.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Registers `{name}.w` `[fan_in, fan_out]` (normal, `std`) and `{name}.b` (zeros).
pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut impl Rng,
) {
    store.insert_normal(&format!("{name}.w"), &[fan_in, fan_out], std, rng);
    store.insert_full(&format!("{name}.b"), &[fan_out], 0.0);
}

/// Standard fan-in scaled initialization width.
pub fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `x · W + b`.
pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param_named(store, &format!("{name}.w"))?;
    let b = g.param_named(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `x · W` without bias.
pub fn linear_nobias<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param_named(store, &format!("{name}.w"))?;
    g.matmul(x, w)
}

/// Two-layer GELU perceptron `{name}.fc1`, `{name}.fc2`.
pub fn mlp<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{name}.fc2"), h)
}

pub fn init_mlp<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    dims: (usize, usize, usize),
    out_std: f64,
    rng: &mut impl Rng,
) {
    init_linear(store, &format!("{name}.fc1"), dims.0, dims.1, fan_in_std(dims.0), rng);
    init_linear(store, &format!("{name}.fc2"), dims.1, dims.2, out_std, rng);
}

pub const LN_EPS: f64 = 1e-5;
