//! Dense feed-forward evaluation: forward pass, forward-mode tangents and
//! reverse-mode vector-Jacobian products over a flat parameter slice.

use super::spec::ModelSpec;
use crate::linalg::DenseVector;

/// Activations retained for a backward pass.
///
/// `inputs[l]` is the input of dense layer `l` (so `inputs[0] = x`) and
/// `pre[l]` its pre-activation. The logits are `pre[L-1]`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

fn layer_offsets(spec: &ModelSpec) -> Vec<usize> {
    let mut offs = Vec::with_capacity(spec.n_layers());
    let mut o = 0;
    for l in 0..spec.n_layers() {
        offs.push(o);
        let (i, out) = spec.layer_shape(l);
        o += i * out + out;
    }
    offs
}

#[inline]
fn dense(w: &[f64], b: &[f64], a: &[f64], out: &mut [f64]) {
    let fan_in = a.len();
    for (o, z) in out.iter_mut().enumerate() {
        let row = &w[o * fan_in..(o + 1) * fan_in];
        *z = b[o] + row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
    }
}

pub fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> ForwardCache {
    let offs = layer_offsets(spec);
    let n_layers = spec.n_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut a = x.to_vec();
    for l in 0..n_layers {
        let (fan_in, fan_out) = spec.layer_shape(l);
        let w = &theta[offs[l]..offs[l] + fan_in * fan_out];
        let b = &theta[offs[l] + fan_in * fan_out..offs[l] + fan_in * fan_out + fan_out];
        let mut z = vec![0.0; fan_out];
        dense(w, b, &a, &mut z);
        let next = if l + 1 < n_layers {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            Vec::new()
        };
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    ForwardCache { inputs, pre }
}

/// Logits and their directional derivative along `u` by dual-number
/// propagation.
pub fn forward_tangent(spec: &ModelSpec, theta: &[f64], x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let offs = layer_offsets(spec);
    let n_layers = spec.n_layers();
    let mut a = x.to_vec();
    let mut a_dot = vec![0.0; x.len()];
    for l in 0..n_layers {
        let (fan_in, fan_out) = spec.layer_shape(l);
        let wr = offs[l]..offs[l] + fan_in * fan_out;
        let br = offs[l] + fan_in * fan_out..offs[l] + fan_in * fan_out + fan_out;
        let (w, b) = (&theta[wr.clone()], &theta[br.clone()]);
        let (uw, ub) = (&u[wr], &u[br]);
        let mut z = vec![0.0; fan_out];
        let mut z_dot = vec![0.0; fan_out];
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let urow = &uw[o * fan_in..(o + 1) * fan_in];
            let mut s = b[o];
            let mut sd = ub[o];
            for i in 0..fan_in {
                s += row[i] * a[i];
                sd += urow[i] * a[i] + row[i] * a_dot[i];
            }
            z[o] = s;
            z_dot[o] = sd;
        }
        if l + 1 == n_layers {
            return (z, z_dot);
        }
        a = z.iter().map(|&v| spec.activation.apply(v)).collect();
        a_dot = z
            .iter()
            .zip(&a)
            .zip(&z_dot)
            .map(|((&zv, &av), &zd)| spec.activation.derivative(zv, av) * zd)
            .collect();
    }
    unreachable!("model has at least one layer")
}

/// Gradient of `wᵀ h(x; θ)` with respect to θ.
pub fn backward(spec: &ModelSpec, theta: &[f64], cache: &ForwardCache, w_out: &[f64]) -> DenseVector {
    let offs = layer_offsets(spec);
    let n_layers = spec.n_layers();
    let mut grad = DenseVector::zeros(spec.n_params());
    let g = grad.as_mut_slice();
    let mut delta = w_out.to_vec();
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = spec.layer_shape(l);
        let a = &cache.inputs[l];
        let wo = offs[l];
        let bo = wo + fan_in * fan_out;
        for o in 0..fan_out {
            let d = delta[o];
            g[bo + o] += d;
            if d != 0.0 {
                let row = &mut g[wo + o * fan_in..wo + (o + 1) * fan_in];
                for (gi, ai) in row.iter_mut().zip(a) {
                    *gi += d * ai;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &theta[wo..bo];
        let z_prev = &cache.pre[l - 1];
        let mut next = vec![0.0; fan_in];
        for o in 0..fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &w[o * fan_in..(o + 1) * fan_in];
            for (n, wi) in next.iter_mut().zip(row) {
                *n += wi * d;
            }
        }
        for (i, n) in next.iter_mut().enumerate() {
            *n *= spec.activation.derivative(z_prev[i], a[i]);
        }
        delta = next;
    }
    grad
}

/// Smallest `|pre-activation|` over hidden units, `+∞` without hidden layers.
pub fn min_hidden_preactivation(cache: &ForwardCache) -> f64 {
    let n = cache.pre.len();
    cache.pre[..n.saturating_sub(1)]
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, z| m.min(z.abs()))
}
