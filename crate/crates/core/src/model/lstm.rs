use crate::scalar::Scalar;

use super::LstmLayer;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Activations of one layer at one time step.
#[derive(Clone, Debug)]
pub(crate) struct StepCache<T> {
    input: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    i: Vec<T>,
    f: Vec<T>,
    g: Vec<T>,
    o: Vec<T>,
    tanh_c: Vec<T>,
}

/// Per-layer, per-step caches of a full sequence.
pub(crate) struct SequenceCache<T> {
    layers: Vec<Vec<StepCache<T>>>,
}

/// `y += W x` for a row-major `[rows, cols]` matrix.
fn matvec_acc<T: Scalar>(w: &[T], cols: usize, x: &[T], y: &mut [T]) {
    for (r, out) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *out = *out + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
    }
}

/// `x += Wᵀ y`.
fn matvec_t_acc<T: Scalar>(w: &[T], cols: usize, y: &[T], x: &mut [T]) {
    for (r, &yr) in y.iter().enumerate() {
        if yr == T::zero() {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (xc, &wc) in x.iter_mut().zip(row) {
            *xc = *xc + wc * yr;
        }
    }
}

/// `W += y xᵀ`.
fn outer_acc<T: Scalar>(w: &mut [T], cols: usize, y: &[T], x: &[T]) {
    for (r, &yr) in y.iter().enumerate() {
        if yr == T::zero() {
            continue;
        }
        let row = &mut w[r * cols..(r + 1) * cols];
        for (wc, &xc) in row.iter_mut().zip(x) {
            *wc = *wc + yr * xc;
        }
    }
}

/// Runs the stack over `inputs` from zero state and returns the top-layer
/// hidden state at every step.
pub(crate) fn forward<T: Scalar>(
    layers: &[LstmLayer<T>],
    dim: usize,
    inputs: Vec<Vec<T>>,
    keep_cache: bool,
) -> (Vec<Vec<T>>, Option<SequenceCache<T>>) {
    let mut current = inputs;
    let mut caches = Vec::new();
    for layer in layers {
        let mut h = vec![T::zero(); dim];
        let mut c = vec![T::zero(); dim];
        let mut outputs = Vec::with_capacity(current.len());
        let mut steps = Vec::new();
        for x in current {
            let mut gates = layer.b_ih.data.clone();
            for (g, &b) in gates.iter_mut().zip(&layer.b_hh.data) {
                *g = *g + b;
            }
            matvec_acc(&layer.w_ih.data, dim, &x, &mut gates);
            matvec_acc(&layer.w_hh.data, dim, &h, &mut gates);
            let i: Vec<T> = gates[..dim].iter().map(|&z| sigmoid(z)).collect();
            let f: Vec<T> = gates[dim..2 * dim].iter().map(|&z| sigmoid(z)).collect();
            let g: Vec<T> = gates[2 * dim..3 * dim].iter().map(|&z| z.tanh()).collect();
            let o: Vec<T> = gates[3 * dim..].iter().map(|&z| sigmoid(z)).collect();
            let c_new: Vec<T> = (0..dim).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
            let tanh_c: Vec<T> = c_new.iter().map(|&v| v.tanh()).collect();
            let h_new: Vec<T> = (0..dim).map(|j| o[j] * tanh_c[j]).collect();
            if keep_cache {
                steps.push(StepCache {
                    input: x,
                    h_prev: h,
                    c_prev: c,
                    i,
                    f,
                    g,
                    o,
                    tanh_c,
                });
            }
            h = h_new;
            c = c_new;
            outputs.push(h.clone());
        }
        caches.push(steps);
        current = outputs;
    }
    (current, keep_cache.then_some(SequenceCache { layers: caches }))
}

/// Backpropagation through time. `d_top[t]` is the loss gradient with respect
/// to the top hidden state at step `t`; returns gradients for the inputs.
pub(crate) fn backward<T: Scalar>(
    layers: &[LstmLayer<T>],
    dim: usize,
    cache: &SequenceCache<T>,
    d_top: Vec<Vec<T>>,
    grads: &mut [LstmLayer<T>],
) -> Vec<Vec<T>> {
    let mut d_out = d_top;
    for (l, layer) in layers.iter().enumerate().rev() {
        let steps = &cache.layers[l];
        let grad = &mut grads[l];
        let mut d_in = vec![vec![T::zero(); dim]; steps.len()];
        let mut dh_next = vec![T::zero(); dim];
        let mut dc_next = vec![T::zero(); dim];
        for t in (0..steps.len()).rev() {
            let s = &steps[t];
            let mut da = vec![T::zero(); 4 * dim];
            let mut dc_prev = vec![T::zero(); dim];
            for j in 0..dim {
                let dh = d_out[t][j] + dh_next[j];
                let d_o = dh * s.tanh_c[j];
                let dc = dh * s.o[j] * (T::one() - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
                let di = dc * s.g[j];
                let dg = dc * s.i[j];
                let df = dc * s.c_prev[j];
                dc_prev[j] = dc * s.f[j];
                da[j] = di * s.i[j] * (T::one() - s.i[j]);
                da[dim + j] = df * s.f[j] * (T::one() - s.f[j]);
                da[2 * dim + j] = dg * (T::one() - s.g[j] * s.g[j]);
                da[3 * dim + j] = d_o * s.o[j] * (T::one() - s.o[j]);
            }
            outer_acc(&mut grad.w_ih.data, dim, &da, &s.input);
            outer_acc(&mut grad.w_hh.data, dim, &da, &s.h_prev);
            for (b, &a) in grad.b_ih.data.iter_mut().zip(&da) {
                *b = *b + a;
            }
            for (b, &a) in grad.b_hh.data.iter_mut().zip(&da) {
                *b = *b + a;
            }
            matvec_t_acc(&layer.w_ih.data, dim, &da, &mut d_in[t]);
            let mut dh_prev = vec![T::zero(); dim];
            matvec_t_acc(&layer.w_hh.data, dim, &da, &mut dh_prev);
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        d_out = d_in;
    }
    d_out
}
