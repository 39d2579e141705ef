//! Composite layers built from tape primitives.

use super::params::{BoundParams, ParamSet};
use super::tape::{NnError, Tape, Var};
use super::tensor::Tensor;
use crate::rng::DetRng;

/// Minimal Gated Unit: a single forget gate drives both the blend and the
/// candidate state.
///
/// f = sigmoid([h; x] Wf + bf)
/// h~ = tanh([f (.) h; x] Wh + bh)
/// h' = (1 - f) (.) h + f (.) h~
pub fn mgu_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    wf: Var,
    bf: Var,
    wh: Var,
    bh: Var,
) -> Result<Var, NnError> {
    let hx = tape.concat_cols(&[h, x])?;
    let f_pre = tape.matmul(hx, wf)?;
    let f_pre = tape.add_bcast_row(f_pre, bf)?;
    let f = tape.sigmoid(f_pre);

    let fh = tape.mul(f, h)?;
    let fhx = tape.concat_cols(&[fh, x])?;
    let cand_pre = tape.matmul(fhx, wh)?;
    let cand_pre = tape.add_bcast_row(cand_pre, bh)?;
    let cand = tape.tanh(cand_pre);

    let f_cand = tape.mul(f, cand)?;
    let f_h = tape.mul(f, h)?;
    let keep = tape.sub(h, f_h)?;
    tape.add(keep, f_cand)
}

/// Inserts MGU weights for the given input/hidden widths.
pub fn init_mgu(params: &mut ParamSet, prefix: &str, in_dim: usize, hidden: usize, rng: &mut DetRng) {
    let fan = in_dim + hidden;
    params.insert(&format!("{prefix}.wf"), Tensor::kaiming(fan, hidden, rng));
    params.insert(&format!("{prefix}.bf"), Tensor::zeros(&[1, hidden]));
    params.insert(&format!("{prefix}.wh"), Tensor::kaiming(fan, hidden, rng));
    params.insert(&format!("{prefix}.bh"), Tensor::zeros(&[1, hidden]));
}

pub fn mgu_from(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    h: Var,
) -> Result<Var, NnError> {
    mgu_cell(
        tape,
        x,
        h,
        bound.var(&format!("{prefix}.wf")),
        bound.var(&format!("{prefix}.bf")),
        bound.var(&format!("{prefix}.wh")),
        bound.var(&format!("{prefix}.bh")),
    )
}

/// Two gates (forget, candidate) of width (in+hidden) x hidden plus biases.
pub fn mgu_param_count(in_dim: usize, hidden: usize) -> usize {
    2 * ((in_dim + hidden) * hidden + hidden)
}

/// GRU reference count: update, reset, and candidate gates.
pub fn gru_param_count(in_dim: usize, hidden: usize) -> usize {
    3 * ((in_dim + hidden) * hidden + hidden)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

/// Multi-layer perceptron over row-batched inputs.
pub struct Mlp {
    prefix: String,
    layers: usize,
    hidden_act: Activation,
}

impl Mlp {
    /// Registers weights for dims[0] -> dims[1] -> ... -> dims.last().
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        hidden_act: Activation,
        rng: &mut DetRng,
    ) -> Self {
        for l in 0..dims.len() - 1 {
            params.insert(
                &format!("{prefix}.l{l}.w"),
                Tensor::kaiming(dims[l], dims[l + 1], rng),
            );
            params.insert(&format!("{prefix}.l{l}.b"), Tensor::zeros(&[1, dims[l + 1]]));
        }
        Self {
            prefix: prefix.to_string(),
            layers: dims.len() - 1,
            hidden_act,
        }
    }

    pub fn named(prefix: &str, layers: usize, hidden_act: Activation) -> Self {
        Self {
            prefix: prefix.to_string(),
            layers,
            hidden_act,
        }
    }

    /// Hidden activations between layers, linear final layer.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var, NnError> {
        let mut cur = x;
        for l in 0..self.layers {
            let w = bound.var(&format!("{}.l{l}.w", self.prefix));
            let b = bound.var(&format!("{}.l{l}.b", self.prefix));
            cur = tape.matmul(cur, w)?;
            cur = tape.add_bcast_row(cur, b)?;
            if l + 1 < self.layers {
                cur = match self.hidden_act {
                    Activation::Relu => tape.relu(cur),
                    Activation::Tanh => tape.tanh(cur),
                    Activation::None => cur,
                };
            }
        }
        Ok(cur)
    }
}

/// Normalizes each column of x to zero mean, unit variance over its rows.
/// Differentiable through the batch statistics.
pub fn batch_norm_cols(tape: &mut Tape, x: Var, eps: f64) -> Result<Var, NnError> {
    let rows = tape.shape(x)[0];
    let mu = tape.mean_rows(x)?;
    let mu_b = tape.broadcast(mu, rows)?;
    let centered = tape.sub(x, mu_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_rows(sq)?;
    let var_eps = tape.add_scalar(var, eps);
    let inv_std = tape.rsqrt(var_eps);
    let inv_b = tape.broadcast(inv_std, rows)?;
    tape.mul(centered, inv_b)
}

/// Normalizes columns with fixed statistics (evaluation mode).
pub fn normalize_with_stats(
    tape: &mut Tape,
    x: Var,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<Var, NnError> {
    let rows = tape.shape(x)[0];
    let inv: Vec<f64> = var.data.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mean_leaf = tape.leaf(mean);
    let inv_leaf = tape.leaf_owned(Tensor::from_vec(&mean.shape, inv));
    let mean_b = tape.broadcast(mean_leaf, rows)?;
    let inv_b = tape.broadcast(inv_leaf, rows)?;
    let centered = tape.sub(x, mean_b)?;
    tape.mul(centered, inv_b)
}

/// Sinusoidal positional features: for each input coordinate, sin/cos at
/// `freqs` octaves plus the raw value.
pub fn fourier_encode(values: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * (2 * freqs + 1));
    for &v in values {
        out.push(v);
        for k in 0..freqs {
            let arg = v * std::f64::consts::PI * f64::powi(2.0, k as i32);
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

pub const fn fourier_dim(coords: usize, freqs: usize) -> usize {
    coords * (2 * freqs + 1)
}
