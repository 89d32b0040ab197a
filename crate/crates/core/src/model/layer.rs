//! One post-norm trunk layer over a batch of canvases.
//!
//! Activations are `[batch * 900, d]`, one block of 900 rows per canvas in
//! row-major cell order. Per layer:
//!
//! ```text
//! a   = u + (rowmix(u) + colmix(u)) / sqrt(30)
//! h   = rmsnorm(a) * g_mix
//! c   = h + W_out silu(W_in h + b_in) + b_out
//! out = rmsnorm(c) * g_ffn
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, NdFloat, Zip};

use super::params::{cast, LayerParams};
use crate::arc_data::{CANVAS_CELLS, CANVAS_SIDE};

const NORM_EPS: f64 = 1e-6;

/// Fan-in normalization of the axial mixing sums.
fn mix_alpha<F: NdFloat>() -> F {
    cast(1.0 / (CANVAS_SIDE as f64).sqrt())
}

pub(crate) struct LayerCache<F> {
    u: Array2<F>,
    a: Array2<F>,
    a_inv_rms: Array1<F>,
    h: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
    c: Array2<F>,
    c_inv_rms: Array1<F>,
}

fn silu<F: NdFloat>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

fn silu_grad<F: NdFloat>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

fn rmsnorm<F: NdFloat>(x: &Array2<F>, gain: &Array1<F>) -> (Array2<F>, Array1<F>) {
    let d: F = cast(x.ncols() as f64);
    let eps: F = cast(NORM_EPS);
    let inv: Array1<F> = x.map_axis(Axis(1), |row| {
        let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
        F::one() / (ms + eps).sqrt()
    });
    let mut y = x.clone();
    Zip::from(y.rows_mut()).and(&inv).for_each(|mut row, &s| {
        Zip::from(&mut row).and(gain).for_each(|v, &g| *v = *v * s * g);
    });
    (y, inv)
}

/// Returns dx and accumulates the gain gradient.
fn rmsnorm_backward<F: NdFloat>(
    x: &Array2<F>,
    inv: &Array1<F>,
    gain: &Array1<F>,
    dy: &Array2<F>,
    dgain: &mut Array1<F>,
) -> Array2<F> {
    let d: F = cast(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    Zip::from(dx.rows_mut())
        .and(x.rows())
        .and(dy.rows())
        .and(inv)
        .for_each(|mut dxr, xr, dyr, &s| {
            let mut dot = F::zero();
            for ((&xv, &dv), &g) in xr.iter().zip(dyr).zip(gain) {
                dot += g * dv * xv;
            }
            let coef = s * s * s * dot / d;
            for (((o, &xv), &dv), &g) in dxr.iter_mut().zip(xr).zip(dyr).zip(gain) {
                *o = s * g * dv - xv * coef;
            }
        });
    for (xr, (dyr, &s)) in x.rows().into_iter().zip(dy.rows().into_iter().zip(inv)) {
        for ((dg, &xv), &dv) in dgain.iter_mut().zip(xr).zip(dyr) {
            *dg += dv * xv * s;
        }
    }
    dx
}

fn block_as_rows<F>(block: ArrayView2<'_, F>) -> ArrayView2<'_, F> {
    let d = block.ncols();
    let slice = block.to_slice().expect("standard layout block");
    ArrayView2::from_shape((CANVAS_SIDE, CANVAS_SIDE * d), slice).expect("900 rows")
}

fn block_as_rows_mut<F>(block: ArrayViewMut2<'_, F>) -> ArrayViewMut2<'_, F> {
    let d = block.ncols();
    let slice = block.into_slice().expect("standard layout block");
    ArrayViewMut2::from_shape((CANVAS_SIDE, CANVAS_SIDE * d), slice).expect("900 rows")
}

/// `out += (rowmix(u) + colmix(u)) / sqrt(30)` for every canvas block.
fn mix_into<F: NdFloat>(p: &LayerParams<F>, u: &Array2<F>, out: &mut Array2<F>) {
    let one = F::one();
    let alpha = mix_alpha::<F>();
    for (ub, ob) in u
        .axis_chunks_iter(Axis(0), CANVAS_CELLS)
        .zip(out.axis_chunks_iter_mut(Axis(0), CANVAS_CELLS))
    {
        // Row axis: treat the block as [30 rows, 30 * d].
        let mut ob = ob;
        general_mat_mul(alpha, &p.row_mix, &block_as_rows(ub.view()), one, &mut block_as_rows_mut(ob.view_mut()));
        // Column axis: each canvas row is a [30, d] slab.
        for (us, mut os) in ub
            .axis_chunks_iter(Axis(0), CANVAS_SIDE)
            .zip(ob.axis_chunks_iter_mut(Axis(0), CANVAS_SIDE))
        {
            general_mat_mul(alpha, &p.col_mix, &us, one, &mut os);
        }
    }
}

fn mix_backward<F: NdFloat>(
    p: &LayerParams<F>,
    u: &Array2<F>,
    dout: &Array2<F>,
    du: &mut Array2<F>,
    grad: &mut LayerParams<F>,
) {
    let one = F::one();
    let alpha = mix_alpha::<F>();
    for ((ub, db), dub) in u
        .axis_chunks_iter(Axis(0), CANVAS_CELLS)
        .zip(dout.axis_chunks_iter(Axis(0), CANVAS_CELLS))
        .zip(du.axis_chunks_iter_mut(Axis(0), CANVAS_CELLS))
    {
        let mut dub = dub;
        let u_rows = block_as_rows(ub.view());
        let d_rows = block_as_rows(db.view());
        general_mat_mul(alpha, &d_rows, &u_rows.t(), one, &mut grad.row_mix);
        general_mat_mul(alpha, &p.row_mix.t(), &d_rows, one, &mut block_as_rows_mut(dub.view_mut()));
        for ((us, ds), mut dus) in ub
            .axis_chunks_iter(Axis(0), CANVAS_SIDE)
            .zip(db.axis_chunks_iter(Axis(0), CANVAS_SIDE))
            .zip(dub.axis_chunks_iter_mut(Axis(0), CANVAS_SIDE))
        {
            general_mat_mul(alpha, &ds, &us.t(), one, &mut grad.col_mix);
            general_mat_mul(alpha, &p.col_mix.t(), &ds, one, &mut dus);
        }
    }
}

pub(crate) fn forward<F: NdFloat>(p: &LayerParams<F>, u: Array2<F>) -> Array2<F> {
    forward_cached(p, u).0
}

pub(crate) fn forward_cached<F: NdFloat>(p: &LayerParams<F>, u: Array2<F>) -> (Array2<F>, LayerCache<F>) {
    let mut a = u.clone();
    mix_into(p, &u, &mut a);
    let (h, a_inv_rms) = rmsnorm(&a, &p.mix_norm_gain);
    let mut pre = h.dot(&p.ffn_in);
    pre += &p.ffn_in_bias;
    let act = pre.mapv(silu);
    let mut c = act.dot(&p.ffn_out);
    c += &p.ffn_out_bias;
    c += &h;
    let (out, c_inv_rms) = rmsnorm(&c, &p.ffn_norm_gain);
    (out, LayerCache { u, a, a_inv_rms, h, pre, act, c, c_inv_rms })
}

/// Accumulates parameter gradients into `grad` and returns the input gradient.
pub(crate) fn backward<F: NdFloat>(
    p: &LayerParams<F>,
    cache: &LayerCache<F>,
    dout: &Array2<F>,
    grad: &mut LayerParams<F>,
) -> Array2<F> {
    let one = F::one();
    let dc = rmsnorm_backward(&cache.c, &cache.c_inv_rms, &p.ffn_norm_gain, dout, &mut grad.ffn_norm_gain);
    grad.ffn_out_bias += &dc.sum_axis(Axis(0));
    general_mat_mul(one, &cache.act.t(), &dc, one, &mut grad.ffn_out);
    let mut dpre = dc.dot(&p.ffn_out.t());
    Zip::from(&mut dpre).and(&cache.pre).for_each(|g, &x| *g *= silu_grad(x));
    grad.ffn_in_bias += &dpre.sum_axis(Axis(0));
    general_mat_mul(one, &cache.h.t(), &dpre, one, &mut grad.ffn_in);
    let mut dh = dc;
    general_mat_mul(one, &dpre, &p.ffn_in.t(), one, &mut dh);
    let da = rmsnorm_backward(&cache.a, &cache.a_inv_rms, &p.mix_norm_gain, &dh, &mut grad.mix_norm_gain);
    let mut du = da.clone();
    mix_backward(p, &cache.u, &da, &mut du, grad);
    du
}

/// Bytes held by one layer cache for `rows` activation rows.
pub(crate) fn cache_bytes<F>(rows: usize, d: usize, hidden: usize) -> usize {
    (rows * (4 * d + 2 * hidden) + 2 * rows) * std::mem::size_of::<F>()
}
