//! Small pre-norm decoder-only transformer with per-layer hook points.
//!
//! Layers are numbered from 1: layer `i` is the output of block `i` after its
//! residual add. Layer 0 is the embedding sum and is never passed to a hook.
//! Positions handed to hooks are 0-based sequence indices, so the first token
//! is position 0.

mod checkpoint;
mod kernels;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Cell;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::numeric::{self, Real};

pub use checkpoint::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{pretrain_toy, HookGrad, NoHook, PretrainOptions, PretrainReport};

use kernels::{block_step, layer_norm, Scratch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::InvalidConfig("need at least 2 layers".into()));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig(
                "vocab_size and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F = f32> {
    pub ln1_g: Vec<F>,
    pub ln1_b: Vec<F>,
    /// `[d, 3d]`, columns are q | k | v
    pub w_qkv: Vec<F>,
    pub b_qkv: Vec<F>,
    pub w_o: Vec<F>,
    pub b_o: Vec<F>,
    pub ln2_g: Vec<F>,
    pub ln2_b: Vec<F>,
    pub w_fc: Vec<F>,
    pub b_fc: Vec<F>,
    pub w_proj: Vec<F>,
    pub b_proj: Vec<F>,
}

/// All trainable tensors. Matrices are row-major `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F = f32> {
    pub wte: Vec<F>,
    pub wpe: Vec<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_g: Vec<F>,
    pub lnf_b: Vec<F>,
    pub w_lm: Vec<F>,
}

impl<F: Real> Weights<F> {
    fn init(cfg: &ModelConfig) -> Weights<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, v, t, ff) = (cfg.d_model, cfg.vocab_size, cfg.max_seq_len, cfg.d_ff());
        let mut normal = |n: usize, std: f64| -> Vec<F> {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| F::of(dist.sample(&mut rng))).collect()
        };
        let std = 0.02;
        let proj_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let wte = normal(v * d, std);
        let wpe = normal(t * d, std);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_g: vec![F::one(); d],
                ln1_b: vec![F::zero(); d],
                w_qkv: normal(d * 3 * d, std),
                b_qkv: vec![F::zero(); 3 * d],
                w_o: normal(d * d, proj_std),
                b_o: vec![F::zero(); d],
                ln2_g: vec![F::one(); d],
                ln2_b: vec![F::zero(); d],
                w_fc: normal(d * ff, std),
                b_fc: vec![F::zero(); ff],
                w_proj: normal(ff * d, proj_std),
                b_proj: vec![F::zero(); d],
            })
            .collect();
        let w_lm = normal(d * v, std);
        Weights {
            wte,
            wpe,
            blocks,
            lnf_g: vec![F::one(); d],
            lnf_b: vec![F::zero(); d],
            w_lm,
        }
    }

    /// Tensors with their names and shapes, in checkpoint order.
    pub fn named(&self, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, &[F])> {
        let (d, v, t, ff) = (cfg.d_model, cfg.vocab_size, cfg.max_seq_len, cfg.d_ff());
        let mut out: Vec<(String, Vec<usize>, &[F])> = vec![
            ("wte".into(), vec![v, d], &self.wte),
            ("wpe".into(), vec![t, d], &self.wpe),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1_g"), vec![d], &b.ln1_g));
            out.push((p("ln1_b"), vec![d], &b.ln1_b));
            out.push((p("w_qkv"), vec![d, 3 * d], &b.w_qkv));
            out.push((p("b_qkv"), vec![3 * d], &b.b_qkv));
            out.push((p("w_o"), vec![d, d], &b.w_o));
            out.push((p("b_o"), vec![d], &b.b_o));
            out.push((p("ln2_g"), vec![d], &b.ln2_g));
            out.push((p("ln2_b"), vec![d], &b.ln2_b));
            out.push((p("w_fc"), vec![d, ff], &b.w_fc));
            out.push((p("b_fc"), vec![ff], &b.b_fc));
            out.push((p("w_proj"), vec![ff, d], &b.w_proj));
            out.push((p("b_proj"), vec![d], &b.b_proj));
        }
        out.push(("lnf_g".into(), vec![d], &self.lnf_g));
        out.push(("lnf_b".into(), vec![d], &self.lnf_b));
        out.push(("w_lm".into(), vec![d, v], &self.w_lm));
        out
    }

    /// Mutable views in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out: Vec<&mut Vec<F>> = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.w_qkv,
                &mut b.b_qkv,
                &mut b.w_o,
                &mut b.b_o,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w_fc,
                &mut b.b_fc,
                &mut b.w_proj,
                &mut b.b_proj,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_lm]);
        out
    }

    pub fn zeros_like(&self) -> Weights<F> {
        self.map(|_| F::zero())
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G + Copy) -> Weights<G> {
        let m = |xs: &Vec<F>| xs.iter().map(|x| f(*x)).collect::<Vec<G>>();
        Weights {
            wte: m(&self.wte),
            wpe: m(&self.wpe),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: m(&b.ln1_g),
                    ln1_b: m(&b.ln1_b),
                    w_qkv: m(&b.w_qkv),
                    b_qkv: m(&b.b_qkv),
                    w_o: m(&b.w_o),
                    b_o: m(&b.b_o),
                    ln2_g: m(&b.ln2_g),
                    ln2_b: m(&b.ln2_b),
                    w_fc: m(&b.w_fc),
                    b_fc: m(&b.b_fc),
                    w_proj: m(&b.w_proj),
                    b_proj: m(&b.b_proj),
                })
                .collect(),
            lnf_g: m(&self.lnf_g),
            lnf_b: m(&self.lnf_b),
            w_lm: m(&self.w_lm),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Weights<F>) {
        let mut other = other.clone();
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors_mut()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x = *x + *y;
            }
        }
    }
}

/// Rewrites a layer's output row before it feeds the next layer.
///
/// Implementations must be pure functions of `(layer, position, h)` and their
/// own configuration; the model may call them in any order and more than once
/// for the same position.
pub trait LayerHook<F: Real = f32>: Send + Sync {
    fn touches(&self, layer: usize) -> bool;
    fn rewrite(&self, layer: usize, position: usize, h: &mut [F]);
}

/// A hook that never changes anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl<F: Real> LayerHook<F> for IdentityHook {
    fn touches(&self, _layer: usize) -> bool {
        false
    }
    fn rewrite(&self, _layer: usize, _position: usize, _h: &mut [F]) {}
}

/// Adds a fixed vector to every position of selected layers. Mostly useful in
/// tests and for quick probing.
#[derive(Debug, Clone)]
pub struct AddVectorHook<F = f32> {
    pub layers: Vec<usize>,
    pub vector: Vec<F>,
}

impl<F: Real> LayerHook<F> for AddVectorHook<F> {
    fn touches(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
    fn rewrite(&self, _layer: usize, _position: usize, h: &mut [F]) {
        for (x, u) in h.iter_mut().zip(&self.vector) {
            *x = *x + *u;
        }
    }
}

/// Post-hook hidden states of every layer for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<F = f32> {
    n_layers: usize,
    seq_len: usize,
    d: usize,
    // [(n_layers + 1) * seq_len * d]; layer 0 holds the embeddings
    values: Vec<F>,
}

impl<F: Real> HiddenStates<F> {
    fn new(n_layers: usize, seq_len: usize, d: usize) -> Self {
        HiddenStates {
            n_layers,
            seq_len,
            d,
            values: vec![F::zero(); (n_layers + 1) * seq_len * d],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
    pub fn d_model(&self) -> usize {
        self.d
    }

    /// All positions of `layer` (0 = embeddings), `[seq_len, d]`.
    pub fn layer(&self, layer: usize) -> &[F] {
        let n = self.seq_len * self.d;
        &self.values[layer * n..(layer + 1) * n]
    }

    pub fn at(&self, layer: usize, position: usize) -> &[F] {
        let start = (layer * self.seq_len + position) * self.d;
        &self.values[start..start + self.d]
    }

    fn at_mut(&mut self, layer: usize, position: usize) -> &mut [F] {
        let start = (layer * self.seq_len + position) * self.d;
        &mut self.values[start..start + self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// Keys and values of past positions, one buffer per layer.
#[derive(Debug, Clone)]
pub struct KvCache<F = f32> {
    pub(crate) keys: Vec<Vec<F>>,
    pub(crate) values: Vec<Vec<F>>,
    len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F = f32> {
    config: ModelConfig,
    weights: Weights<F>,
    frozen: bool,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config,
            weights: Weights::init(&config),
            frozen: false,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights<F>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let expected: Vec<usize> = Weights::<F>::init(&ModelConfig { seed: 0, ..config })
            .named(&config)
            .iter()
            .map(|(_, _, t)| t.len())
            .collect();
        let found: Vec<usize> = weights.named(&config).iter().map(|(_, _, t)| t.len()).collect();
        if weights.blocks.len() != config.n_layers || expected != found {
            return Err(Error::InvalidConfig(
                "weights do not match the model configuration".into(),
            ));
        }
        Ok(Model {
            config,
            weights,
            frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<F> {
        &self.weights
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config,
            weights: self.weights.map(|x| G::of(x.widen())),
            frozen: self.frozen,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Run one position through the network, appending to `cache`. When
    /// `record` is given it receives `(layer, h)` for every layer including
    /// the embeddings. Returns the logits at this position.
    pub(crate) fn step(
        &self,
        token: u32,
        cache: &mut KvCache<F>,
        hook: Option<&dyn LayerHook<F>>,
        scratch: &mut Scratch<F>,
        mut record: impl FnMut(usize, &[F]),
        logits: Option<&mut [F]>,
    ) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let pos = cache.len;
        let w = &self.weights;
        let mut x: Vec<F> = w.wte[token as usize * d..(token as usize + 1) * d]
            .iter()
            .zip(&w.wpe[pos * d..(pos + 1) * d])
            .map(|(a, b)| *a + *b)
            .collect();
        record(0, &x);
        for (l, block) in w.blocks.iter().enumerate() {
            let mut out = vec![F::zero(); d];
            block_step(
                cfg,
                block,
                &x,
                &mut cache.keys[l],
                &mut cache.values[l],
                scratch,
                None,
                &mut out,
            );
            if let Some(h) = hook {
                if h.touches(l + 1) {
                    h.rewrite(l + 1, pos, &mut out);
                }
            }
            record(l + 1, &out);
            x = out;
        }
        cache.len += 1;
        if let Some(logits) = logits {
            let mut normed = vec![F::zero(); d];
            layer_norm(&x, &w.lnf_g, &w.lnf_b, &mut normed, None);
            numeric::vec_mat(&normed, &w.w_lm, None, logits);
        }
    }

    /// Hidden states of every layer (post-hook) and the logits at the final
    /// position.
    pub fn forward_collect(
        &self,
        tokens: &[u32],
        hook: Option<&dyn LayerHook<F>>,
    ) -> Result<(HiddenStates<F>, Vec<F>)> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let mut states = HiddenStates::new(cfg.n_layers, tokens.len(), cfg.d_model);
        let mut cache = KvCache::new(cfg.n_layers);
        let mut scratch = Scratch::new(cfg);
        let mut logits = vec![F::zero(); cfg.vocab_size];
        for (p, &tok) in tokens.iter().enumerate() {
            let last = p + 1 == tokens.len();
            self.step(
                tok,
                &mut cache,
                hook,
                &mut scratch,
                |layer, h| states.at_mut(layer, p).copy_from_slice(h),
                if last { Some(&mut logits) } else { None },
            );
        }
        Ok((states, logits))
    }

    /// Greedy decoding with a key/value cache. The hook is applied to every
    /// newly computed position; cached positions are never recomputed.
    pub fn generate(&self, prompt: &[u32], hook: Option<&dyn LayerHook<F>>, max_new: usize) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        let cfg = &self.config;
        if prompt.len() + max_new > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: prompt.len() + max_new,
                max: cfg.max_seq_len,
            });
        }
        let mut out = prompt.to_vec();
        if max_new == 0 {
            return Ok(out);
        }
        let mut cache = KvCache::new(cfg.n_layers);
        let mut scratch = Scratch::new(cfg);
        let mut logits = vec![F::zero(); cfg.vocab_size];
        for (p, &tok) in prompt.iter().enumerate() {
            let last = p + 1 == prompt.len();
            self.step(
                tok,
                &mut cache,
                hook,
                &mut scratch,
                |_, _| {},
                if last { Some(&mut logits) } else { None },
            );
        }
        for i in 0..max_new {
            let next = argmax(&logits);
            out.push(next);
            if i + 1 < max_new {
                self.step(next, &mut cache, hook, &mut scratch, |_, _| {}, Some(&mut logits));
            }
        }
        Ok(out)
    }

    /// Summed next-token cross-entropy over the positions where `mask[p]` is
    /// set (position `p` predicts `tokens[p + 1]`), and the number of such
    /// positions.
    pub fn sequence_loss(
        &self,
        tokens: &[u32],
        mask: &[bool],
        hook: Option<&dyn LayerHook<F>>,
    ) -> Result<(f64, usize)> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let mut cache = KvCache::new(cfg.n_layers);
        let mut scratch = Scratch::new(cfg);
        let mut logits = vec![F::zero(); cfg.vocab_size];
        let mut total = 0.0f64;
        let mut count = 0;
        let n = tokens.len();
        for p in 0..n - 1 {
            let counted = mask.get(p).copied().unwrap_or(false);
            self.step(
                tokens[p],
                &mut cache,
                hook,
                &mut scratch,
                |_, _| {},
                if counted { Some(&mut logits) } else { None },
            );
            if counted {
                total += cross_entropy(&logits, tokens[p + 1]).widen();
                count += 1;
            }
        }
        Ok((total, count))
    }

    /// SHA-256 of the checkpoint encoding, independent of the frozen flag.
    pub fn hash(&self) -> [u8; 32] {
        fsutil::sha256(&checkpoint::encode_with_flag(&self.cast::<f32>(), true))
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}

/// Lowest index wins ties.
pub fn argmax<F: Real>(xs: &[F]) -> u32 {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn cross_entropy<F: Real>(logits: &[F], target: u32) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = logits.iter().map(|x| (*x - max).exp()).sum();
    max + sum.ln() - logits[target as usize]
}

/// Token ids for a corpus cell: the identity for token cells, UTF-8 bytes for
/// text.
pub fn tokenize(cell: &Cell) -> Vec<u32> {
    match cell {
        Cell::Tokens(t) => t.clone(),
        Cell::Text(s) => tokenize_text(s),
    }
}

pub fn tokenize_text(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize_text`]; ids above 255 are dropped and invalid UTF-8
/// is replaced.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
