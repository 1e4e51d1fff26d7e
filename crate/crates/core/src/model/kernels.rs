//! Row-level forward kernels. Every path through the model (hidden-state
//! collection, cached generation, training) goes through `block_step`, so
//! they agree bit for bit.

use super::{Block, ModelConfig};
use crate::numeric::{axpy, dot, vec_mat, Real};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct Scratch<F> {
    qkv: Vec<F>,
    scores: Vec<F>,
    atty: Vec<F>,
    tmp: Vec<F>,
    normed: Vec<F>,
    fc: Vec<F>,
    act: Vec<F>,
}

impl<F: Real> Scratch<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Scratch {
            qkv: vec![F::zero(); 3 * d],
            scores: vec![F::zero(); cfg.max_seq_len],
            atty: vec![F::zero(); d],
            tmp: vec![F::zero(); d],
            normed: vec![F::zero(); d],
            fc: vec![F::zero(); cfg.d_ff()],
            act: vec![F::zero(); cfg.d_ff()],
        }
    }
}

/// Saved activations of one block at one position, for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockActs<F> {
    pub ln1_xhat: Vec<F>,
    pub ln1_rstd: F,
    pub ln1_out: Vec<F>,
    pub q: Vec<F>,
    /// `[n_heads, pos + 1]` attention probabilities
    pub att: Vec<F>,
    pub atty: Vec<F>,
    pub ln2_xhat: Vec<F>,
    pub ln2_rstd: F,
    pub ln2_out: Vec<F>,
    pub fc: Vec<F>,
    pub act: Vec<F>,
}

pub(crate) struct LnSave<'a, F> {
    pub xhat: &'a mut Vec<F>,
    pub rstd: &'a mut F,
}

pub(crate) fn layer_norm<F: Real>(x: &[F], g: &[F], b: &[F], out: &mut [F], save: Option<LnSave<'_, F>>) {
    let n = F::of(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / n;
    let rstd = F::one() / (var + F::of(LN_EPS)).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * g[i] + b[i];
    }
    if let Some(s) = save {
        s.xhat.clear();
        s.xhat.extend(x.iter().map(|v| (*v - mean) * rstd));
        *s.rstd = rstd;
    }
}

/// `dx += rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))`
pub(crate) fn layer_norm_backward<F: Real>(
    xhat: &[F],
    rstd: F,
    g: &[F],
    dout: &[F],
    dx: &mut [F],
    grads: Option<(&mut [F], &mut [F])>,
) {
    let n = F::of(xhat.len() as f64);
    let mut mean_d = F::zero();
    let mut mean_dx = F::zero();
    for i in 0..xhat.len() {
        let dxh = dout[i] * g[i];
        mean_d = mean_d + dxh;
        mean_dx = mean_dx + dxh * xhat[i];
    }
    mean_d = mean_d / n;
    mean_dx = mean_dx / n;
    for i in 0..xhat.len() {
        let dxh = dout[i] * g[i];
        dx[i] = dx[i] + rstd * (dxh - mean_d - xhat[i] * mean_dx);
    }
    if let Some((dg, db)) = grads {
        for i in 0..xhat.len() {
            dg[i] = dg[i] + dout[i] * xhat[i];
            db[i] = db[i] + dout[i];
        }
    }
}

const GELU_C: f64 = 0.044715;

#[inline]
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let k = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    half * x * (F::one() + (k * (x + F::of(GELU_C) * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    let t = (k * (x + F::of(GELU_C) * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0 * GELU_C) * x * x)
}

/// One block at the cache's next position: appends this position's key and
/// value, writes the block output (after both residual adds) into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_step<F: Real>(
    cfg: &ModelConfig,
    blk: &Block<F>,
    x: &[F],
    keys: &mut Vec<F>,
    values: &mut Vec<F>,
    s: &mut Scratch<F>,
    mut acts: Option<&mut BlockActs<F>>,
    out: &mut [F],
) {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = F::one() / F::of(hd as f64).sqrt();

    match acts.as_deref_mut() {
        Some(a) => layer_norm(
            x,
            &blk.ln1_g,
            &blk.ln1_b,
            &mut s.normed,
            Some(LnSave {
                xhat: &mut a.ln1_xhat,
                rstd: &mut a.ln1_rstd,
            }),
        ),
        None => layer_norm(x, &blk.ln1_g, &blk.ln1_b, &mut s.normed, None),
    }
    vec_mat(&s.normed, &blk.w_qkv, Some(&blk.b_qkv), &mut s.qkv);
    keys.extend_from_slice(&s.qkv[d..2 * d]);
    values.extend_from_slice(&s.qkv[2 * d..3 * d]);
    let t = keys.len() / d;

    if let Some(a) = acts.as_deref_mut() {
        a.ln1_out.clear();
        a.ln1_out.extend_from_slice(&s.normed);
        a.q.clear();
        a.q.extend_from_slice(&s.qkv[..d]);
        a.att.clear();
    }
    for h in 0..cfg.n_heads {
        let q = &s.qkv[h * hd..(h + 1) * hd];
        let scores = &mut s.scores[..t];
        let mut max = F::neg_infinity();
        for (j, sc) in scores.iter_mut().enumerate() {
            let k = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            *sc = dot(q, k) * scale;
            max = max.max(*sc);
        }
        let mut sum = F::zero();
        for sc in scores.iter_mut() {
            *sc = (*sc - max).exp();
            sum = sum + *sc;
        }
        let inv = F::one() / sum;
        let y = &mut s.atty[h * hd..(h + 1) * hd];
        y.iter_mut().for_each(|v| *v = F::zero());
        for (j, sc) in scores.iter_mut().enumerate() {
            *sc = *sc * inv;
            axpy(y, *sc, &values[j * d + h * hd..j * d + (h + 1) * hd]);
        }
        if let Some(a) = acts.as_deref_mut() {
            a.att.extend_from_slice(scores);
        }
    }
    vec_mat(&s.atty, &blk.w_o, Some(&blk.b_o), &mut s.tmp);
    // residual 1
    for i in 0..d {
        s.tmp[i] = s.tmp[i] + x[i];
    }
    match acts.as_deref_mut() {
        Some(a) => {
            a.atty.clear();
            a.atty.extend_from_slice(&s.atty);
            layer_norm(
                &s.tmp,
                &blk.ln2_g,
                &blk.ln2_b,
                &mut s.normed,
                Some(LnSave {
                    xhat: &mut a.ln2_xhat,
                    rstd: &mut a.ln2_rstd,
                }),
            )
        }
        None => layer_norm(&s.tmp, &blk.ln2_g, &blk.ln2_b, &mut s.normed, None),
    }
    vec_mat(&s.normed, &blk.w_fc, Some(&blk.b_fc), &mut s.fc);
    for (a, f) in s.act.iter_mut().zip(&s.fc) {
        *a = gelu(*f);
    }
    vec_mat(&s.act, &blk.w_proj, Some(&blk.b_proj), out);
    for i in 0..d {
        out[i] = out[i] + s.tmp[i];
    }
    if let Some(a) = acts {
        a.ln2_out.clear();
        a.ln2_out.extend_from_slice(&s.normed);
        a.fc.clear();
        a.fc.extend_from_slice(&s.fc);
        a.act.clear();
        a.act.extend_from_slice(&s.act);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.2, 0.0, 0.4, 1.5, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let x = [0.3f64, -1.2, 2.0, 0.7];
        let g = [1.0, 0.5, -2.0, 1.5];
        let b = [0.0, 0.1, 0.2, -0.3];
        let w = [0.9, -0.4, 0.25, 1.1];
        let loss = |x: &[f64]| {
            let mut out = [0.0; 4];
            layer_norm(x, &g, &b, &mut out, None);
            out.iter().zip(&w).map(|(o, w)| o * w).sum::<f64>()
        };
        let mut xhat = Vec::new();
        let mut rstd = 0.0;
        let mut out = [0.0; 4];
        layer_norm(
            &x,
            &g,
            &b,
            &mut out,
            Some(LnSave {
                xhat: &mut xhat,
                rstd: &mut rstd,
            }),
        );
        let mut dx = [0.0; 4];
        layer_norm_backward(&xhat, rstd, &g, &w, &mut dx, None);
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "i={i}: {fd} vs {}", dx[i]);
        }
    }
}
