//! Reverse-mode gradients for the toy model and its pre-training loop.
//!
//! The backward pass is written out by hand. It produces gradients for the
//! base weights (pre-training) and, through [`HookGrad`], for whatever
//! parameters a differentiable hook carries (learned steering).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{block_step, gelu_grad, layer_norm, layer_norm_backward, BlockActs, LnSave, Scratch};
use super::{KvCache, LayerHook, Model, ModelConfig, Weights};
use crate::corpus::{CellKind, ParallelCorpus};
use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, vec_mat, vec_mat_backward, Real};

/// Sequences per work unit. Gradients are summed within a chunk and then
/// across chunks in index order, so results do not depend on thread count.
const CHUNK: usize = 4;

/// A hook whose effect can be back-propagated.
pub trait HookGrad<F: Real>: LayerHook<F> {
    type Grads: Send;

    fn zero_grads(&self) -> Self::Grads;

    fn merge(into: &mut Self::Grads, other: &Self::Grads);

    /// Given `grad_output = dL/d rewrite(input)`, add `dL/d input` into
    /// `grad_input` and parameter gradients into `grads`.
    fn backward(
        &self,
        layer: usize,
        position: usize,
        input: &[F],
        grad_output: &[F],
        grad_input: &mut [F],
        grads: &mut Self::Grads,
    );
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoHook;

impl<F: Real> LayerHook<F> for NoHook {
    fn touches(&self, _layer: usize) -> bool {
        false
    }
    fn rewrite(&self, _layer: usize, _position: usize, _h: &mut [F]) {}
}

impl<F: Real> HookGrad<F> for NoHook {
    type Grads = ();
    fn zero_grads(&self) {}
    fn merge(_into: &mut (), _other: &()) {}
    fn backward(&self, _: usize, _: usize, _: &[F], g: &[F], gi: &mut [F], _: &mut ()) {
        axpy(gi, F::one(), g);
    }
}

struct PosActs<F> {
    blocks: Vec<BlockActs<F>>,
    pre_hook: Vec<Vec<F>>,
}

impl<F: Real> Model<F> {
    /// Forward and backward over one sequence. Position `p` is scored against
    /// `tokens[p + 1]` when `mask[p]` is set. `dlogit_scale` multiplies the
    /// per-position cross-entropy gradient (use `1 / total_targets` for a
    /// mean loss). Returns the summed loss and the number of scored
    /// positions.
    pub fn backprop<H: HookGrad<F>>(
        &self,
        tokens: &[u32],
        mask: &[bool],
        hook: Option<&H>,
        dlogit_scale: F,
        mut weight_grads: Option<&mut Weights<F>>,
        hook_grads: &mut H::Grads,
    ) -> Result<(f64, usize)> {
        self.check_tokens(tokens)?;
        let cfg = self.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let n_layers = cfg.n_layers;
        let w = &self.weights;
        let Some(last) = (0..tokens.len().saturating_sub(1))
            .rev()
            .find(|&p| mask.get(p) == Some(&true))
        else {
            return Ok((0.0, 0));
        };
        let n = last + 1;

        // forward, keeping activations
        let mut cache = KvCache::new(n_layers);
        let mut scratch = Scratch::new(&cfg);
        let mut acts: Vec<PosActs<F>> = Vec::with_capacity(n);
        let mut dx: Vec<Vec<F>> = vec![vec![F::zero(); d]; n];
        let mut logits = vec![F::zero(); v];
        let mut normed = vec![F::zero(); d];
        let mut loss = 0.0f64;
        let mut count = 0usize;
        for p in 0..n {
            let tok = tokens[p] as usize;
            let mut x: Vec<F> = w.wte[tok * d..(tok + 1) * d]
                .iter()
                .zip(&w.wpe[p * d..(p + 1) * d])
                .map(|(a, b)| *a + *b)
                .collect();
            let mut pa = PosActs {
                blocks: Vec::with_capacity(n_layers),
                pre_hook: Vec::with_capacity(n_layers),
            };
            for (l, blk) in w.blocks.iter().enumerate() {
                let mut ba = BlockActs::default();
                let mut out = vec![F::zero(); d];
                block_step(
                    &cfg,
                    blk,
                    &x,
                    &mut cache.keys[l],
                    &mut cache.values[l],
                    &mut scratch,
                    Some(&mut ba),
                    &mut out,
                );
                pa.pre_hook.push(out.clone());
                if let Some(h) = hook {
                    if h.touches(l + 1) {
                        h.rewrite(l + 1, p, &mut out);
                    }
                }
                pa.blocks.push(ba);
                x = out;
            }
            cache.len += 1;
            acts.push(pa);

            if mask[p] {
                let mut xhat = Vec::new();
                let mut rstd = F::zero();
                layer_norm(
                    &x,
                    &w.lnf_g,
                    &w.lnf_b,
                    &mut normed,
                    Some(LnSave {
                        xhat: &mut xhat,
                        rstd: &mut rstd,
                    }),
                );
                vec_mat(&normed, &w.w_lm, None, &mut logits);
                let target = tokens[p + 1] as usize;
                let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
                let sum: F = logits.iter().map(|z| (*z - max).exp()).sum();
                let lse = max + sum.ln();
                let l = (lse - logits[target]).widen();
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss);
                }
                loss += l;
                count += 1;
                // dlogits = softmax - onehot
                let mut dlogits: Vec<F> = logits.iter().map(|z| (*z - lse).exp() * dlogit_scale).collect();
                dlogits[target] = dlogits[target] - dlogit_scale;
                let mut dnormed = vec![F::zero(); d];
                let dw_lm = weight_grads.as_deref_mut().map(|g| g.w_lm.as_mut_slice());
                vec_mat_backward(&normed, &w.w_lm, &dlogits, &mut dnormed, dw_lm);
                let lnf_grads = weight_grads
                    .as_deref_mut()
                    .map(|g| (g.lnf_g.as_mut_slice(), g.lnf_b.as_mut_slice()));
                layer_norm_backward(&xhat, rstd, &w.lnf_g, &dnormed, &mut dx[p], lnf_grads);
            }
        }

        // backward through the blocks
        let hd = cfg.head_dim();
        let scale = F::one() / F::of(hd as f64).sqrt();
        let ff = cfg.d_ff();
        for l in (0..n_layers).rev() {
            let blk = &w.blocks[l];
            let keys = &cache.keys[l];
            let values = &cache.values[l];
            let mut bg = weight_grads.as_deref_mut().map(|g| &mut g.blocks[l]);

            let mut dres: Vec<Vec<F>> = Vec::with_capacity(n);
            let mut datty: Vec<Vec<F>> = Vec::with_capacity(n);
            for p in 0..n {
                let a = &acts[p].blocks[l];
                let mut dpre = vec![F::zero(); d];
                match hook {
                    Some(h) if h.touches(l + 1) => {
                        h.backward(l + 1, p, &acts[p].pre_hook[l], &dx[p], &mut dpre, hook_grads)
                    }
                    _ => dpre.copy_from_slice(&dx[p]),
                }
                let mut dr = dpre.clone();
                let mut dact = vec![F::zero(); ff];
                vec_mat_backward(
                    &a.act,
                    &blk.w_proj,
                    &dpre,
                    &mut dact,
                    bg.as_deref_mut().map(|g| g.w_proj.as_mut_slice()),
                );
                if let Some(g) = bg.as_deref_mut() {
                    axpy(&mut g.b_proj, F::one(), &dpre);
                }
                let dfc: Vec<F> = dact.iter().zip(&a.fc).map(|(g, x)| *g * gelu_grad(*x)).collect();
                let mut dln2 = vec![F::zero(); d];
                vec_mat_backward(
                    &a.ln2_out,
                    &blk.w_fc,
                    &dfc,
                    &mut dln2,
                    bg.as_deref_mut().map(|g| g.w_fc.as_mut_slice()),
                );
                if let Some(g) = bg.as_deref_mut() {
                    axpy(&mut g.b_fc, F::one(), &dfc);
                }
                layer_norm_backward(
                    &a.ln2_xhat,
                    a.ln2_rstd,
                    &blk.ln2_g,
                    &dln2,
                    &mut dr,
                    bg.as_deref_mut()
                        .map(|g| (g.ln2_g.as_mut_slice(), g.ln2_b.as_mut_slice())),
                );
                let mut dy = vec![F::zero(); d];
                vec_mat_backward(
                    &a.atty,
                    &blk.w_o,
                    &dr,
                    &mut dy,
                    bg.as_deref_mut().map(|g| g.w_o.as_mut_slice()),
                );
                if let Some(g) = bg.as_deref_mut() {
                    axpy(&mut g.b_o, F::one(), &dr);
                }
                dres.push(dr);
                datty.push(dy);
            }

            // attention
            let mut dqkv: Vec<Vec<F>> = vec![vec![F::zero(); 3 * d]; n];
            for p in 0..n {
                let a = &acts[p].blocks[l];
                let t = p + 1;
                for h in 0..cfg.n_heads {
                    let probs = &a.att[h * t..(h + 1) * t];
                    let dy = &datty[p][h * hd..(h + 1) * hd];
                    let mut dprob = vec![F::zero(); t];
                    for j in 0..t {
                        let vj = &values[j * d + h * hd..j * d + (h + 1) * hd];
                        dprob[j] = dot(dy, vj);
                        let off = 2 * d + h * hd;
                        axpy(&mut dqkv[j][off..off + hd], probs[j], dy);
                    }
                    let inner: F = (0..t).map(|j| probs[j] * dprob[j]).sum();
                    let q = &a.q[h * hd..(h + 1) * hd];
                    for j in 0..t {
                        let ds = probs[j] * (dprob[j] - inner) * scale;
                        let kj = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                        axpy(&mut dqkv[p][h * hd..(h + 1) * hd], ds, kj);
                        let off = d + h * hd;
                        axpy(&mut dqkv[j][off..off + hd], ds, q);
                    }
                }
            }
            for p in 0..n {
                let a = &acts[p].blocks[l];
                let mut dln1 = vec![F::zero(); d];
                vec_mat_backward(
                    &a.ln1_out,
                    &blk.w_qkv,
                    &dqkv[p],
                    &mut dln1,
                    bg.as_deref_mut().map(|g| g.w_qkv.as_mut_slice()),
                );
                if let Some(g) = bg.as_deref_mut() {
                    axpy(&mut g.b_qkv, F::one(), &dqkv[p]);
                }
                let mut dxin = std::mem::take(&mut dres[p]);
                layer_norm_backward(
                    &a.ln1_xhat,
                    a.ln1_rstd,
                    &blk.ln1_g,
                    &dln1,
                    &mut dxin,
                    bg.as_deref_mut()
                        .map(|g| (g.ln1_g.as_mut_slice(), g.ln1_b.as_mut_slice())),
                );
                dx[p] = dxin;
            }
        }
        if let Some(g) = weight_grads {
            for p in 0..n {
                let tok = tokens[p] as usize;
                axpy(&mut g.wte[tok * d..(tok + 1) * d], F::one(), &dx[p]);
                axpy(&mut g.wpe[p * d..(p + 1) * d], F::one(), &dx[p]);
            }
        }
        Ok((loss, count))
    }

    /// Mean next-token loss over `items` and the gradient of that mean with
    /// respect to each item's hook parameters, summed. Base weights are
    /// treated as constants; the model must be frozen.
    pub fn hook_gradients<H: HookGrad<F>>(
        &self,
        items: &[(Vec<u32>, Vec<bool>, H)],
    ) -> Result<(f64, Option<H::Grads>)> {
        if !self.frozen {
            return Err(Error::ModelNotFrozen);
        }
        let total: usize = items.iter().map(|(t, m, _)| scored_positions(t, m)).sum();
        if total == 0 {
            return Ok((0.0, None));
        }
        let scale = F::of(1.0 / total as f64);
        let parts: Vec<Result<(f64, H::Grads)>> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = chunk[0].2.zero_grads();
                let mut loss = 0.0;
                for (tokens, mask, hook) in chunk {
                    let (l, _) = self.backprop(tokens, mask, Some(hook), scale, None, &mut grads)?;
                    loss += l;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut loss = 0.0;
        let mut acc: Option<H::Grads> = None;
        for part in parts {
            let (l, g) = part?;
            loss += l;
            match acc.as_mut() {
                Some(a) => H::merge(a, &g),
                None => acc = Some(g),
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok((loss / total as f64, acc))
    }
}

fn scored_positions(tokens: &[u32], mask: &[bool]) -> usize {
    (0..tokens.len().saturating_sub(1))
        .filter(|&p| mask.get(p) == Some(&true))
        .count()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Sequences used to measure the loss before and after training.
    pub eval_sequences: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 2,
            lr: 1e-3,
            batch: 32,
            weight_decay: 0.0,
            seed: 0,
            eval_sequences: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean batch loss per optimizer step.
    pub step_losses: Vec<f64>,
}

struct Adam<F> {
    m: Weights<F>,
    v: Weights<F>,
    t: i32,
}

impl<F: Real> Adam<F> {
    fn step(&mut self, w: &mut Weights<F>, g: &mut Weights<F>, lr: f64, wd: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let ws = w.tensors_mut();
        let gs = g.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((w, g), m), v) in ws.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..w.len() {
                let gi = g[i].widen();
                let mi = B1 * m[i].widen() + (1.0 - B1) * gi;
                let vi = B2 * v[i].widen() + (1.0 - B2) * gi * gi;
                m[i] = F::of(mi);
                v[i] = F::of(vi);
                let upd = (mi / c1) / ((vi / c2).sqrt() + EPS) + wd * w[i].widen();
                w[i] = w[i] - F::of(lr * upd);
            }
        }
    }
}

fn mean_loss<F: Real>(model: &Model<F>, seqs: &[&Vec<u32>]) -> Result<f64> {
    let parts: Vec<Result<(f64, usize)>> = seqs
        .par_iter()
        .map(|s| model.sequence_loss(s, &vec![true; s.len()], None))
        .collect();
    let mut total = 0.0;
    let mut n = 0;
    for p in parts {
        let (l, c) = p?;
        total += l;
        n += c;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Train a fresh model on every token sequence of `corpus` with Adam and
/// next-token cross-entropy. The returned model is frozen.
pub fn pretrain_toy(
    config: ModelConfig,
    corpus: &ParallelCorpus,
    opts: &PretrainOptions,
) -> Result<(Model, PretrainReport)> {
    if corpus.kind() != CellKind::Tokens {
        return Err(Error::CellKindMismatch {
            expected: "tokens",
            found: corpus.kind().name(),
        });
    }
    if opts.batch == 0 {
        return Err(Error::InvalidConfig("batch must be positive".into()));
    }
    let mut model: Model = Model::new(config)?;
    let mut seqs: Vec<Vec<u32>> = Vec::new();
    for id in corpus.alignment() {
        for tag in corpus.languages() {
            let tokens = super::tokenize(corpus.cell(id, &tag.code).expect("aligned"));
            model.check_tokens(&tokens)?;
            seqs.push(tokens);
        }
    }
    if seqs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let stride = (seqs.len() / opts.eval_sequences.max(1)).max(1);
    let eval: Vec<&Vec<u32>> = seqs.iter().step_by(stride).take(opts.eval_sequences.max(1)).collect();
    let initial_loss = mean_loss(&model, &eval)?;

    let mut adam = Adam {
        m: model.weights.zeros_like(),
        v: model.weights.zeros_like(),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut step_losses = Vec::new();
    for _epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch) {
            let total: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
            if total == 0 {
                continue;
            }
            let scale = 1.0f32 / total as f32;
            let m = &model;
            let parts: Vec<Result<(f64, Weights<f32>)>> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = m.weights.zeros_like();
                    let mut loss = 0.0;
                    for &i in chunk {
                        let s = &seqs[i];
                        let (l, _) =
                            m.backprop::<NoHook>(s, &vec![true; s.len()], None, scale, Some(&mut g), &mut ())?;
                        loss += l;
                    }
                    Ok((loss, g))
                })
                .collect();
            let mut grads: Option<Weights<f32>> = None;
            let mut loss = 0.0;
            for p in parts {
                let (l, g) = p?;
                loss += l;
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            let loss = loss / total as f64;
            if !loss.is_finite() {
                return Err(Error::DivergedTraining {
                    step: step_losses.len(),
                });
            }
            step_losses.push(loss);
            let mut grads = grads.expect("non-empty batch");
            adam.step(&mut model.weights, &mut grads, opts.lr, opts.weight_decay);
        }
        log::debug!("epoch done, last batch loss {:?}", step_losses.last());
    }
    let final_loss = mean_loss(&model, &eval)?;
    if !final_loss.is_finite() {
        return Err(Error::DivergedTraining {
            step: step_losses.len(),
        });
    }
    model.freeze();
    Ok((
        model,
        PretrainReport {
            initial_loss,
            final_loss,
            step_losses,
        },
    ))
}
