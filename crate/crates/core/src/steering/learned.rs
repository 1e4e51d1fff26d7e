//! Learned low-rank correction on top of unsupervised cross steering.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{apply_unit, norm_f64, unit, SteeringConfig, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::fsutil::{self, put_f32s, Reader};
use crate::model::{HookGrad, LayerHook, Model};
use crate::numeric::{cast_vec, hash_words, unit_interval, vec_mat, vec_mat_backward, Real};
use crate::vectors::LanguageVectorBank;

pub const LEARNED_MAGIC: &[u8; 4] = b"STVL";
pub const LEARNED_VERSION: u32 = 1;

/// Per-layer factors `A: [3d, rank]` and `B: [rank, d]` (row-major). The
/// correction added to the steered state is `[h; r_t; r_s] · A · B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedSteering<F = f32> {
    pub n_layers: usize,
    pub d_model: usize,
    pub rank: usize,
    pub alpha: f64,
    pub beta: f64,
    pub norm_restore: bool,
    pub a: Vec<Vec<F>>,
    pub b: Vec<Vec<F>>,
}

impl<F: Real> LearnedSteering<F> {
    /// `A ~ N(0, 1/(3d))`, `B = 0`, so a fresh instance reproduces
    /// unsupervised steering exactly.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        rank: usize,
        alpha: f64,
        beta: f64,
        norm_restore: bool,
        seed: u64,
    ) -> Result<Self> {
        if n_layers == 0 || d_model == 0 || rank == 0 {
            return Err(Error::InvalidConfig(
                "learned steering needs layers, width and rank > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / (3 * d_model) as f64).sqrt()).expect("valid std");
        let a = (0..n_layers)
            .map(|_| {
                (0..3 * d_model * rank)
                    .map(|_| F::of(normal.sample(&mut rng)))
                    .collect()
            })
            .collect();
        let b = vec![vec![F::zero(); rank * d_model]; n_layers];
        Ok(LearnedSteering {
            n_layers,
            d_model,
            rank,
            alpha,
            beta,
            norm_restore,
            a,
            b,
        })
    }

    pub fn cast<G: Real>(&self) -> LearnedSteering<G> {
        LearnedSteering {
            n_layers: self.n_layers,
            d_model: self.d_model,
            rank: self.rank,
            alpha: self.alpha,
            beta: self.beta,
            norm_restore: self.norm_restore,
            a: self.a.iter().map(|v| cast_vec(v)).collect(),
            b: self.b.iter().map(|v| cast_vec(v)).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_layers * (3 * self.d_model * self.rank + self.rank * self.d_model)
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.b).all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// `θ -= lr · g`.
    pub fn sgd_step(&mut self, grads: &LearnedGrads<F>, lr: f64) {
        let lr = F::of(lr);
        for (p, g) in self
            .a
            .iter_mut()
            .chain(self.b.iter_mut())
            .zip(grads.a.iter().chain(&grads.b))
        {
            for (x, d) in p.iter_mut().zip(g) {
                *x = *x - lr * *d;
            }
        }
    }

    /// Flat parameter `index` in the order: every layer's `A`, then every
    /// layer's `B`.
    pub fn param_mut(&mut self, index: usize) -> &mut F {
        let sa = 3 * self.d_model * self.rank;
        let sb = self.rank * self.d_model;
        if index < self.n_layers * sa {
            &mut self.a[index / sa][index % sa]
        } else {
            let i = index - self.n_layers * sa;
            &mut self.b[i / sb][i % sb]
        }
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer {layer} outside 1..={}",
                self.n_layers
            )));
        }
        Ok(())
    }

    /// `r_t - beta · r_s`, normalized.
    fn direction(&self, r_t: &[F], r_s: &[F]) -> Option<Vec<F>> {
        let beta = F::of(self.beta);
        let num: Vec<F> = r_t.iter().zip(r_s).map(|(t, s)| *t - beta * *s).collect();
        unit(&num, DEFAULT_EPSILON)
    }
}

impl LearnedSteering<f32> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.n_params() + 64);
        out.extend_from_slice(LEARNED_MAGIC);
        out.extend_from_slice(&LEARNED_VERSION.to_le_bytes());
        for v in [self.n_layers, self.d_model, self.rank] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.alpha.to_bits().to_le_bytes());
        out.extend_from_slice(&self.beta.to_bits().to_le_bytes());
        out.push(self.norm_restore as u8);
        for l in 0..self.n_layers {
            put_f32s(&mut out, &self.a[l]);
            put_f32s(&mut out, &self.b[l]);
        }
        fsutil::seal_crc(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != LEARNED_MAGIC {
            return Err(Error::CorruptFile("not an STVL file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != LEARNED_VERSION {
            return Err(Error::VersionMismatch {
                expected: LEARNED_VERSION,
                found: version,
            });
        }
        let body = fsutil::check_crc(bytes)?;
        let mut r = Reader::new(&body[8..]);
        let n_layers = r.u32()? as usize;
        let d_model = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let alpha = f64::from_bits(r.u64()?);
        let beta = f64::from_bits(r.u64()?);
        let norm_restore = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::CorruptFile(format!("bad norm-restore flag {b}"))),
        };
        let mut a = Vec::with_capacity(n_layers);
        let mut b = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            a.push(r.f32s(3 * d_model * rank)?);
            b.push(r.f32s(rank * d_model)?);
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptFile("trailing bytes".into()));
        }
        Ok(LearnedSteering {
            n_layers,
            d_model,
            rank,
            alpha,
            beta,
            norm_restore,
            a,
            b,
        })
    }
}

pub fn save_learned(params: &LearnedSteering, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &params.encode())
}

pub fn load_learned(path: &Path) -> Result<LearnedSteering> {
    LearnedSteering::decode(&fsutil::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedGrads<F = f32> {
    pub a: Vec<Vec<F>>,
    pub b: Vec<Vec<F>>,
}

impl<F: Real> LearnedGrads<F> {
    pub fn zeros(params: &LearnedSteering<F>) -> Self {
        LearnedGrads {
            a: params.a.iter().map(|v| vec![F::zero(); v.len()]).collect(),
            b: params.b.iter().map(|v| vec![F::zero(); v.len()]).collect(),
        }
    }

    /// Same flat order as [`LearnedSteering::param_mut`].
    pub fn flat(&self) -> Vec<F> {
        self.a.iter().chain(&self.b).flatten().copied().collect()
    }

    pub fn l2_norm(&self) -> f64 {
        norm_f64(&self.flat())
    }
}

/// Per-layer language representations of every language in a bank, in the
/// working precision.
#[derive(Debug, Clone)]
pub struct RepresentationTable<F = f32> {
    reps: BTreeMap<String, Vec<Vec<F>>>,
}

impl<F: Real> RepresentationTable<F> {
    pub fn from_bank(bank: &LanguageVectorBank) -> Result<Self> {
        let mut reps = BTreeMap::new();
        for code in bank.codes() {
            let r = bank.representations(code)?;
            reps.insert(code.to_string(), r.iter().map(|v| cast_vec(v)).collect());
        }
        Ok(RepresentationTable { reps })
    }

    pub fn get(&self, code: &str) -> Result<&[Vec<F>]> {
        self.reps
            .get(code)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnknownLanguage(code.into()))
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.reps.keys().map(|s| s.as_str())
    }
}

/// Learned steering bound to one language pair.
pub struct LearnedHook<'a, F: Real = f32> {
    params: &'a LearnedSteering<F>,
    r_t: &'a [Vec<F>],
    r_s: &'a [Vec<F>],
    units: Vec<Option<Vec<F>>>,
    exclude_first: bool,
    dropout: Option<(f64, u64)>,
}

impl<'a, F: Real> LearnedHook<'a, F> {
    /// `dropout` is `(rate, key)`: the rank bottleneck is dropped with that
    /// rate using a mask hashed from `key`, layer, position and unit.
    pub fn new(
        params: &'a LearnedSteering<F>,
        r_t: &'a [Vec<F>],
        r_s: &'a [Vec<F>],
        config: &SteeringConfig,
        dropout: Option<(f64, u64)>,
    ) -> Result<Self> {
        if r_t.len() != params.n_layers || r_s.len() != params.n_layers {
            return Err(Error::ShapeMismatch {
                expected: params.n_layers,
                found: r_t.len().min(r_s.len()),
            });
        }
        if let Some((rate, _)) = dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!("dropout must be in [0, 1), got {rate}")));
            }
        }
        let mut units = Vec::with_capacity(params.n_layers);
        for l in 1..=params.n_layers {
            if config.layer_active(l) {
                units.push(Some(
                    params
                        .direction(&r_t[l - 1], &r_s[l - 1])
                        .ok_or(Error::NoLanguageSignal)?,
                ));
            } else {
                units.push(None);
            }
        }
        Ok(LearnedHook {
            params,
            r_t,
            r_s,
            units,
            exclude_first: config.exclude_first_token,
            dropout,
        })
    }

    fn skips(&self, position: usize) -> bool {
        self.exclude_first && position == 0
    }

    fn keep_scale(&self, layer: usize, position: usize) -> Vec<F> {
        let r = self.params.rank;
        match self.dropout {
            None | Some((0.0, _)) => vec![F::one(); r],
            Some((rate, key)) => (0..r)
                .map(|k| {
                    let u = unit_interval(hash_words(&[key, layer as u64, position as u64, k as u64]));
                    if u < rate {
                        F::zero()
                    } else {
                        F::of(1.0 / (1.0 - rate))
                    }
                })
                .collect(),
        }
    }

    fn concat(&self, layer: usize, h: &[F]) -> Vec<F> {
        let mut x = Vec::with_capacity(3 * h.len());
        x.extend_from_slice(h);
        x.extend_from_slice(&self.r_t[layer - 1]);
        x.extend_from_slice(&self.r_s[layer - 1]);
        x
    }
}

fn learned_forward<F: Real>(params: &LearnedSteering<F>, layer: usize, x: &[F], unit: &[F], keep: &[F], h: &mut [F]) {
    let (d, r) = (params.d_model, params.rank);
    let mut z = vec![F::zero(); r];
    vec_mat(x, &params.a[layer - 1], None, &mut z);
    for (zi, k) in z.iter_mut().zip(keep) {
        *zi = *zi * *k;
    }
    let mut corr = vec![F::zero(); d];
    vec_mat(&z, &params.b[layer - 1], None, &mut corr);
    apply_unit(h, unit, F::of(params.alpha), params.norm_restore);
    for (hi, c) in h.iter_mut().zip(&corr) {
        *hi = *hi + *c;
    }
}

impl<F: Real> LayerHook<F> for LearnedHook<'_, F> {
    fn touches(&self, layer: usize) -> bool {
        self.units.get(layer.wrapping_sub(1)).is_some_and(|u| u.is_some())
    }

    fn rewrite(&self, layer: usize, position: usize, h: &mut [F]) {
        if self.skips(position) {
            return;
        }
        let Some(Some(unit)) = self.units.get(layer - 1) else {
            return;
        };
        let x = self.concat(layer, h);
        let keep = self.keep_scale(layer, position);
        learned_forward(self.params, layer, &x, unit, &keep, h);
    }
}

impl<F: Real> HookGrad<F> for LearnedHook<'_, F> {
    type Grads = LearnedGrads<F>;

    fn zero_grads(&self) -> LearnedGrads<F> {
        LearnedGrads::zeros(self.params)
    }

    fn merge(into: &mut LearnedGrads<F>, other: &LearnedGrads<F>) {
        for (a, b) in into
            .a
            .iter_mut()
            .chain(into.b.iter_mut())
            .zip(other.a.iter().chain(&other.b))
        {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    fn backward(
        &self,
        layer: usize,
        position: usize,
        input: &[F],
        grad_output: &[F],
        grad_input: &mut [F],
        grads: &mut LearnedGrads<F>,
    ) {
        let unit = match self.units.get(layer - 1) {
            Some(Some(u)) if !self.skips(position) => u,
            _ => {
                for (gi, g) in grad_input.iter_mut().zip(grad_output) {
                    *gi = *gi + *g;
                }
                return;
            }
        };
        let p = self.params;
        let (d, r) = (p.d_model, p.rank);
        let x = self.concat(layer, input);
        let keep = self.keep_scale(layer, position);
        let mut z = vec![F::zero(); r];
        vec_mat(&x, &p.a[layer - 1], None, &mut z);
        let zd: Vec<F> = z.iter().zip(&keep).map(|(a, k)| *a * *k).collect();

        let mut dzd = vec![F::zero(); r];
        vec_mat_backward(
            &zd,
            &p.b[layer - 1],
            grad_output,
            &mut dzd,
            Some(&mut grads.b[layer - 1]),
        );
        let dz: Vec<F> = dzd.iter().zip(&keep).map(|(a, k)| *a * *k).collect();
        let mut dx = vec![F::zero(); 3 * d];
        vec_mat_backward(&x, &p.a[layer - 1], &dz, &mut dx, Some(&mut grads.a[layer - 1]));
        for (gi, v) in grad_input.iter_mut().zip(&dx[..d]) {
            *gi = *gi + *v;
        }

        if !p.norm_restore {
            for (gi, g) in grad_input.iter_mut().zip(grad_output) {
                *gi = *gi + *g;
            }
            return;
        }
        // hat = ‖h‖ u / ‖u‖ with u = h + alpha·unit.
        let alpha = p.alpha;
        let u: Vec<f64> = input
            .iter()
            .zip(unit)
            .map(|(h, e)| h.widen() + alpha * e.widen())
            .collect();
        let nh = norm_f64(input);
        let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nh == 0.0 || nu == 0.0 {
            return;
        }
        let ug: f64 = u.iter().zip(grad_output).map(|(a, g)| a * g.widen()).sum();
        let c1 = ug / (nh * nu);
        let c2 = nh * ug / (nu * nu * nu);
        for j in 0..d {
            let v = nh / nu * grad_output[j].widen() + c1 * input[j].widen() - c2 * u[j];
            grad_input[j] = grad_input[j] + F::of(v);
        }
    }
}

/// Learned steering of a single vector; `r_s = r_t` gives the monolingual
/// variant.
pub fn steer_learned<F: Real>(
    h: &[F],
    r_target: &[F],
    r_source: &[F],
    params: &LearnedSteering<F>,
    layer: usize,
) -> Result<Vec<F>> {
    params.check_layer(layer)?;
    for v in [h, r_target, r_source] {
        if v.len() != params.d_model {
            return Err(Error::ShapeMismatch {
                expected: params.d_model,
                found: v.len(),
            });
        }
    }
    let unit = params.direction(r_target, r_source).ok_or(Error::NoLanguageSignal)?;
    let mut x = Vec::with_capacity(3 * h.len());
    x.extend_from_slice(h);
    x.extend_from_slice(r_target);
    x.extend_from_slice(r_source);
    let mut out = h.to_vec();
    learned_forward(params, layer, &x, &unit, &vec![F::one(); params.rank], &mut out);
    Ok(out)
}

/// One training sequence for learned steering. `loss_mask[p]` marks the
/// positions whose next-token prediction is scored.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringExample {
    pub source: String,
    pub target: String,
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// Mean response-token loss over `items` under learned steering and its
/// gradient with respect to `A` and `B`. The model stays frozen.
pub fn grad_steering_params<F: Real>(
    model: &Model<F>,
    reps: &RepresentationTable<F>,
    params: &LearnedSteering<F>,
    items: &[SteeringExample],
    config: &SteeringConfig,
    dropout: Option<(f64, u64)>,
) -> Result<(f64, LearnedGrads<F>)> {
    let mut batch = Vec::with_capacity(items.len());
    for (i, ex) in items.iter().enumerate() {
        let drop = dropout.map(|(rate, key)| (rate, hash_words(&[key, i as u64])));
        let hook = LearnedHook::new(params, reps.get(&ex.target)?, reps.get(&ex.source)?, config, drop)?;
        batch.push((ex.tokens.clone(), ex.loss_mask.clone(), hook));
    }
    let (loss, grads) = model.hook_gradients(&batch)?;
    Ok((loss, grads.unwrap_or_else(|| LearnedGrads::zeros(params))))
}
