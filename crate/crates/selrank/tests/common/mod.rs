//! Shared oracles for the acceptance suite: central finite differences
//! over parameter stores and independent double-loop re-implementations of
//! the forward operations. Everything here is deliberately written with
//! plain nested loops, separate from the library's compute paths.

#![allow(dead_code)]

use selrank::autodiff::{ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a small-denominator floor; below the floor the
/// check degenerates to an absolute bound at the same scale, which keeps
/// finite-difference rounding noise from dominating near-zero gradients.
pub fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3)
}

/// Central-difference check of analytic gradients for an arbitrary scalar
/// function of the store. `eval` computes the scalar from current values;
/// `grads` fills the store's gradients analytically (and is called once).
pub fn fd_check_fn(
    store: &mut ParamStore,
    eval: impl Fn(&ParamStore) -> f64,
    grads: impl Fn(&mut ParamStore),
    label: &str,
) {
    store.zero_grads();
    grads(store);
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| store.grad(id).data().to_vec())
        .collect();
    store.zero_grads();
    for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        for c in 0..store.value(id).len() {
            let orig = store.value(id).data()[c];
            let mut poke = |store: &mut ParamStore, v: f64| -> f64 {
                let mut t = store.value(id).clone();
                t.data_mut()[c] = v;
                store.set_value(id, t).unwrap();
                eval(store)
            };
            let up = poke(store, orig + FD_STEP);
            let down = poke(store, orig - FD_STEP);
            let mut t = store.value(id).clone();
            t.data_mut()[c] = orig;
            store.set_value(id, t).unwrap();
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi][c];
            assert!(
                rel_err(fd, a) < FD_TOL,
                "{}: param {} coord {}: fd {} vs analytic {}",
                label,
                pi,
                c,
                fd,
                a
            );
        }
    }
}

/// [`fd_check_fn`] specialized to closures that rebuild a graph on a fresh
/// tape from the store's current values.
pub fn fd_check(
    store: &mut ParamStore,
    build: impl Fn(&mut Tape, &ParamStore) -> Var,
    label: &str,
) {
    fd_check_fn(
        store,
        |store| {
            let mut tape = Tape::new(store);
            let root = build(&mut tape, store);
            tape.value(root).as_scalar().unwrap()
        },
        |store| {
            let mut tape = Tape::new(store);
            let root = build(&mut tape, store);
            tape.backward(root, store).unwrap();
        },
        label,
    );
}

// ---- independent double-loop forward oracles ----

pub fn oracle_conv1d_pre(e: &Tensor, filters: &Tensor, bias: &Tensor, h: usize) -> Vec<Vec<f64>> {
    let m = e.shape()[0];
    let dim = e.shape()[1];
    let nf = filters.shape()[1];
    let mut out = vec![vec![0.0; nf]; m];
    for (i, row) in out.iter_mut().enumerate() {
        for (f, cell) in row.iter_mut().enumerate() {
            let mut acc = bias.data()[f];
            for j in 0..h {
                for c in 0..dim {
                    let r = i + j;
                    let e_val = if r < m { e.data()[r * dim + c] } else { 0.0 };
                    acc += e_val * filters.data()[(j * dim + c) * nf + f];
                }
            }
            *cell = acc;
        }
    }
    out
}

pub fn oracle_conv1d(e: &Tensor, filters: &Tensor, bias: &Tensor, h: usize) -> Vec<Vec<f64>> {
    oracle_conv1d_pre(e, filters, bias, h)
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|v| if v > 0.0 { v } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn oracle_cosine(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let m = a.shape()[0];
    let n = b.shape()[0];
    let f = a.shape()[1];
    let mut out = vec![vec![0.0; n]; m];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for c in 0..f {
                let x = a.data()[i * f + c];
                let y = b.data()[j * f + c];
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let na = na.sqrt();
            let nb = nb.sqrt();
            *cell = if na < 1e-12 || nb < 1e-12 {
                0.0
            } else {
                dot / (na * nb)
            };
        }
    }
    out
}

pub fn oracle_kernel_pool(m: &Tensor, mus: &[f64], deltas: &[f64]) -> Vec<f64> {
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    let mut phi = vec![0.0; mus.len()];
    for (k, p) in phi.iter_mut().enumerate() {
        for i in 0..rows {
            let mut inner = 0.0;
            for j in 0..cols {
                let d = m.data()[i * cols + j] - mus[k];
                inner += (-d * d / (2.0 * deltas[k] * deltas[k])).exp();
            }
            *p += inner.max(1e-10).ln();
        }
    }
    phi
}

pub fn oracle_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out_dim = w.shape()[0];
    let in_dim = w.shape()[1];
    let mut out = vec![0.0; out_dim];
    for (o, cell) in out.iter_mut().enumerate() {
        let mut acc = b.data()[o];
        for c in 0..in_dim {
            acc += w.data()[o * in_dim + c] * x.data()[c];
        }
        *cell = acc;
    }
    out
}
