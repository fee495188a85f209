//! Gradients of the training objective with respect to the three 1×1
//! projections. The quantizer is bypassed with a straight-through estimator:
//! the gradient reaching `z_q` is passed unchanged to `F_r`.

use rayon::prelude::*;

use super::losses::{ortho_loss, ortho_loss_gradient};
use crate::codec::CodecModel;
use crate::error::{shape_err, Result};
use crate::tensor::{
    apply_projection, group_normalize, group_statistics, FeatureMap, GroupNormParams, GroupStats,
};

const PIXEL_CHUNK: usize = 512;

/// Gradients for every trained parameter, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub reduce_w: Vec<f64>,
    pub reduce_b: Vec<f64>,
    pub post_w: Vec<f64>,
    pub post_b: Vec<f64>,
    pub expand_w: Vec<f64>,
    pub expand_b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &CodecModel) -> Self {
        let z = |n: usize| vec![0.0; n];
        Self {
            reduce_w: z(model.reduce_proj().weights().len()),
            reduce_b: z(model.reduce_proj().bias().len()),
            post_w: z(model.post_affine().weights().len()),
            post_b: z(model.post_affine().bias().len()),
            expand_w: z(model.expand_proj().weights().len()),
            expand_b: z(model.expand_proj().bias().len()),
        }
    }

    fn parts(&self) -> [&Vec<f64>; 6] {
        [
            &self.reduce_w,
            &self.reduce_b,
            &self.post_w,
            &self.post_b,
            &self.expand_w,
            &self.expand_b,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.reduce_w,
            &mut self.reduce_b,
            &mut self.post_w,
            &mut self.post_b,
            &mut self.expand_w,
            &mut self.expand_b,
        ]
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    /// Concatenation in [`parameter_vector`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.parts().into_iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.parts().into_iter().flatten().all(|v| v.is_finite())
    }
}

/// Trained parameters concatenated: reduce W, b; post-affine W, b; expand W, b.
pub fn parameter_vector(model: &CodecModel) -> Vec<f64> {
    let mut out = Vec::new();
    for p in [
        model.reduce_proj(),
        model.post_affine(),
        model.expand_proj(),
    ] {
        out.extend_from_slice(p.weights());
        out.extend_from_slice(p.bias());
    }
    out
}

/// Inverse of [`parameter_vector`]. Fails on a frozen model.
pub fn set_parameter_vector(model: &mut CodecModel, params: &[f64]) -> Result<()> {
    if params.len() != parameter_vector(model).len() {
        return shape_err(format!(
            "parameter vector has {} values, model has {}",
            params.len(),
            parameter_vector(model).len()
        ));
    }
    let (r, p, e) = model.projections_mut()?;
    let mut at = 0;
    for proj in [r, p, e] {
        let w = proj.weights_mut();
        w.copy_from_slice(&params[at..at + w.len()]);
        at += w.len();
        let b = proj.bias_mut();
        b.copy_from_slice(&params[at..at + b.len()]);
        at += b.len();
    }
    Ok(())
}

/// Sender-side activations: projection output `a` and its group statistics,
/// plus the normalized result `F_r`.
#[derive(Debug, Clone)]
pub struct ReduceTrace {
    pub projected: FeatureMap,
    pub stats: GroupStats,
    pub reduced: FeatureMap,
}

pub fn reduce_trace(model: &CodecModel, f: &FeatureMap) -> Result<ReduceTrace> {
    if f.channels() != model.config().channels {
        return shape_err(format!(
            "codec expects {} channels, map has {}",
            model.config().channels,
            f.channels()
        ));
    }
    let projected = apply_projection(f, model.reduce_proj())?;
    let stats = group_statistics(&projected, model.reduce_norm())?;
    let reduced = group_normalize(&projected, model.reduce_norm())?;
    Ok(ReduceTrace {
        projected,
        stats,
        reduced,
    })
}

/// Per-map loss terms. `ortho` is zero unless it was added explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub recon: f64,
    pub commit: f64,
    pub ortho: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.recon + self.commit + self.ortho
    }
}

/// Backward pass of group normalization. `x` is the un-normalized input,
/// `dy` the upstream gradient; both `P × C` row-major.
fn group_norm_backward(x: &[f64], stats: &GroupStats, p: &GroupNormParams, dy: &[f64]) -> Vec<f64> {
    let c = p.channels();
    let gs = p.group_size();
    let n = (x.len() / c * gs) as f64;
    let inv_std: Vec<f64> = stats
        .variance
        .iter()
        .map(|v| 1.0 / (v + p.epsilon()).sqrt())
        .collect();
    let mut s1 = vec![0.0; p.groups()];
    let mut s2 = vec![0.0; p.groups()];
    for (xp, dp) in x.chunks_exact(c).zip(dy.chunks_exact(c)) {
        for ch in 0..c {
            let g = ch / gs;
            let xhat = (xp[ch] - stats.mean[g]) * inv_std[g];
            let dxhat = dp[ch] * p.gain()[ch];
            s1[g] += dxhat;
            s2[g] += dxhat * xhat;
        }
    }
    let mut dx = vec![0.0; x.len()];
    for ((xp, dp), out) in x
        .chunks_exact(c)
        .zip(dy.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        for ch in 0..c {
            let g = ch / gs;
            let xhat = (xp[ch] - stats.mean[g]) * inv_std[g];
            let dxhat = dp[ch] * p.gain()[ch];
            out[ch] = inv_std[g] * (dxhat - s1[g] / n - xhat * s2[g] / n);
        }
    }
    dx
}

/// Sums per-chunk partial gradients in chunk order, so the result does not
/// depend on how rayon schedules the chunks.
fn ordered_sum(
    parts: Vec<(Vec<f64>, Vec<f64>)>,
    w_len: usize,
    b_len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; w_len];
    let mut b = vec![0.0; b_len];
    for (pw, pb) in parts {
        w.iter_mut().zip(&pw).for_each(|(a, v)| *a += v);
        b.iter_mut().zip(&pb).for_each(|(a, v)| *a += v);
    }
    (w, b)
}

/// `dW += dout ⊗ input`, `db += dout` over all pixels, chunked.
fn outer_product_grad(
    dout: &[f64],
    input: &[f64],
    n_out: usize,
    n_in: usize,
) -> (Vec<f64>, Vec<f64>) {
    let parts: Vec<(Vec<f64>, Vec<f64>)> = dout
        .par_chunks(PIXEL_CHUNK * n_out)
        .zip(input.par_chunks(PIXEL_CHUNK * n_in))
        .map(|(d, x)| {
            let mut dw = vec![0.0; n_out * n_in];
            let mut db = vec![0.0; n_out];
            for (dp, xp) in d.chunks_exact(n_out).zip(x.chunks_exact(n_in)) {
                for (o, &g) in dp.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for (w, xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(xp) {
                        *w += g * xi;
                    }
                }
            }
            (dw, db)
        })
        .collect();
    ordered_sum(parts, n_out * n_in, n_out)
}

/// Reconstruction and commitment terms of one map and their gradients, with
/// `z_q` treated as the decoder input and the straight-through estimator
/// carrying its gradient back to `F_r`. The orthogonality term is not
/// included; see [`loss_and_gradients`].
pub fn map_gradients(
    model: &CodecModel,
    f: &FeatureMap,
    trace: &ReduceTrace,
    zq: &FeatureMap,
    beta: f64,
) -> Result<(LossTerms, Gradients)> {
    if !zq.same_shape(&trace.reduced) {
        return shape_err("z_q and F_r differ in shape");
    }
    let dec = model.decode_trace(zq)?;
    let c = model.config().channels;
    let c_r = model.config().reduced_channels();
    let pixels = f.num_pixels();
    let terms = LossTerms {
        recon: dec.output.mse(f)?,
        commit: beta * trace.reduced.mse(zq)?,
        ortho: 0.0,
    };

    // Expand projection and its ReLU.
    let scale = 2.0 / (pixels * c) as f64;
    let we = model.expand_proj().weights();
    let mut dv = vec![0.0; pixels * c_r];
    let parts: Vec<(Vec<f64>, Vec<f64>)> = dv
        .par_chunks_mut(PIXEL_CHUNK * c_r)
        .enumerate()
        .map(|(ci, dv_chunk)| {
            let mut dw = vec![0.0; c * c_r];
            let mut db = vec![0.0; c];
            for (j, dvp) in dv_chunk.chunks_exact_mut(c_r).enumerate() {
                let px = ci * PIXEL_CHUNK + j;
                let (y, x, o, v) = (
                    dec.output.pixel(px),
                    f.pixel(px),
                    dec.expand_pre.pixel(px),
                    dec.normalized.pixel(px),
                );
                for ch in 0..c {
                    if o[ch] <= 0.0 {
                        continue;
                    }
                    let g = scale * (y[ch] - x[ch]);
                    if g == 0.0 {
                        continue;
                    }
                    db[ch] += g;
                    let row = ch * c_r..(ch + 1) * c_r;
                    for ((w, d), (&wv, &vv)) in dw[row.clone()]
                        .iter_mut()
                        .zip(dvp.iter_mut())
                        .zip(we[row].iter().zip(v))
                    {
                        *w += g * vv;
                        *d += g * wv;
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let (expand_w, expand_b) = ordered_sum(parts, c * c_r, c);

    // Expand group norm, then the post-affine ReLU.
    let h = &dec.post_affine_out;
    let h_stats = group_statistics(h, model.expand_norm())?;
    let mut du = group_norm_backward(h.data(), &h_stats, model.expand_norm(), &dv);
    for (d, &u) in du.iter_mut().zip(dec.post_affine_pre.data()) {
        if u <= 0.0 {
            *d = 0.0;
        }
    }

    // Post-affine projection.
    let (post_w, mut post_b) = outer_product_grad(&du, zq.data(), c_r, c_r);
    if !model.config().post_affine_bias {
        post_b.fill(0.0);
    }
    let wp = model.post_affine().weights();
    let commit_scale = 2.0 * beta / (pixels * c_r) as f64;
    let mut dfr = vec![0.0; pixels * c_r];
    for (px, out) in dfr.chunks_exact_mut(c_r).enumerate() {
        let d = &du[px * c_r..(px + 1) * c_r];
        let (fr, q) = (trace.reduced.pixel(px), zq.pixel(px));
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &dj) in d.iter().enumerate() {
                acc += dj * wp[j * c_r + k];
            }
            *o = acc + commit_scale * (fr[k] - q[k]);
        }
    }

    // Reduce group norm and projection.
    let da = group_norm_backward(
        trace.projected.data(),
        &trace.stats,
        model.reduce_norm(),
        &dfr,
    );
    let (reduce_w, reduce_b) = outer_product_grad(&da, f.data(), c_r, c);

    Ok((
        terms,
        Gradients {
            reduce_w,
            reduce_b,
            post_w,
            post_b,
            expand_w,
            expand_b,
        },
    ))
}

/// Full single-map objective `recon + commit + ortho` and its gradient.
pub fn loss_and_gradients(
    model: &CodecModel,
    f: &FeatureMap,
    zq: &FeatureMap,
    beta: f64,
    lambda: f64,
) -> Result<(LossTerms, Gradients)> {
    let trace = reduce_trace(model, f)?;
    let (mut terms, mut grads) = map_gradients(model, f, &trace, zq, beta)?;
    terms.ortho = ortho_loss(model.reduce_proj(), lambda);
    for (g, o) in grads
        .reduce_w
        .iter_mut()
        .zip(ortho_loss_gradient(model.reduce_proj(), lambda))
    {
        *g += o;
    }
    Ok((terms, grads))
}

/// The objective whose exact gradient [`loss_and_gradients`] returns at the
/// anchor parameters: the decoder sees `F_r + (z_q − F_r^anchor)`, so the
/// quantization offset stays fixed while `F_r` follows the parameters, and
/// the commitment target `z_q` is a constant.
pub fn surrogate_loss(
    model: &CodecModel,
    f: &FeatureMap,
    zq_anchor: &FeatureMap,
    fr_anchor: &FeatureMap,
    beta: f64,
    lambda: f64,
) -> Result<LossTerms> {
    let fr = model.reduce(f)?;
    if !fr.same_shape(zq_anchor) || !fr.same_shape(fr_anchor) {
        return shape_err("anchors do not match the reduced map");
    }
    let (h, w, c) = fr.shape();
    let shifted: Vec<f64> = fr
        .data()
        .iter()
        .zip(zq_anchor.data().iter().zip(fr_anchor.data()))
        .map(|(z, (q, a))| z + (q - a))
        .collect();
    let z = FeatureMap::from_parts(h, w, c, shifted);
    Ok(LossTerms {
        recon: model.decode_quantized(&z)?.mse(f)?,
        commit: beta * fr.mse(zq_anchor)?,
        ortho: ortho_loss(model.reduce_proj(), lambda),
    })
}
