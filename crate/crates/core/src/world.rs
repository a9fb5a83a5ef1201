//! The frozen toy world: codebook, decoder, multi-tap feature backbone and
//! a synthetic class-conditional token distribution whose probabilities are
//! known in closed form.
//!
//! Each class owns `M` template sequences. A draw picks a template
//! uniformly, then independently replaces every position with a uniform
//! vocabulary token with probability `rho`, so
//!
//! ```text
//! p(z | c) = 1/M * sum_m prod_i [(1 - rho) * 1{z_i = T_cm,i} + rho / K]
//! ```
//!
//! With `M = 1` the positions are independent given the class. With
//! `M >= 2` they are correlated, which is what separates one-shot
//! factorized sampling from iterative decoding.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Tensor, Var};
use crate::masking::ensure_complete;
use crate::rng::Rng;
use crate::{Error, Result, Token, TokenSeq};

/// Number of backbone blocks (and therefore taps).
pub const TAPS: usize = 4;

/// Largest `K^L` for which the decoder injectivity scan runs at
/// construction.
pub const INJECTIVITY_SCAN_LIMIT: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    /// Vocabulary size `K`.
    pub vocab: usize,
    /// Sequence length `L`.
    pub len: usize,
    /// Codebook embedding dimension `d`.
    pub embed_dim: usize,
    /// Decoder output ("pixel") dimension `P`.
    pub pixel_dim: usize,
    /// Feature dimension per cell `F`.
    pub feature_dim: usize,
    /// Spatial grid side `G`; each tap has `G * G` cells.
    pub grid: usize,
    pub classes: usize,
    /// Templates per class `M`.
    pub templates: usize,
    /// Per-position resampling probability.
    pub rho: f64,
    pub decoder_hidden: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            len: 16,
            embed_dim: 8,
            pixel_dim: 32,
            feature_dim: 24,
            grid: 2,
            classes: 4,
            templates: 1,
            rho: 0.1,
            decoder_hidden: 64,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// `K = 3, L = 4`: all 81 sequences can be enumerated.
    pub fn enumeration() -> Self {
        Self {
            vocab: 3,
            len: 4,
            templates: 2,
            rho: 0.02,
            ..Self::default()
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn mask_id(&self) -> Token {
        self.vocab as Token
    }

    /// `K^L` as a float (it overflows integers at default sizes).
    pub fn space_size(&self) -> f64 {
        libm::pow(self.vocab as f64, self.len as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("world.K", self.vocab),
            ("world.L", self.len),
            ("world.d", self.embed_dim),
            ("world.P", self.pixel_dim),
            ("world.F", self.feature_dim),
            ("world.G", self.grid),
            ("world.C", self.classes),
            ("world.templates", self.templates),
            ("world.decoder_hidden", self.decoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::arg(name, "must be positive"));
            }
        }
        if self.vocab >= u32::MAX as usize {
            return Err(Error::arg("world.K", "too large"));
        }
        if self.templates > 1 && self.vocab < 2 {
            return Err(Error::arg("world.templates", "distinct templates need K >= 2"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::arg("world.rho", format!("{} is outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// `K x d` embedding table. The mask symbol has no row here.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    table: Tensor,
}

impl Codebook {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.ndim() != 2 {
            return Err(Error::operand("codebook", "table must be K x d"));
        }
        let d = table.shape()[1];
        let rows: Vec<&[f64]> = table.data().chunks(d).collect();
        for i in 0..rows.len() {
            for j in 0..i {
                if rows[i] == rows[j] {
                    return Err(Error::operand("codebook", format!("rows {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn mask_id(&self) -> Token {
        self.vocab() as Token
    }

    pub fn row(&self, token: Token) -> &[f64] {
        let d = self.dim();
        let t = token as usize;
        &self.table.data()[t * d..(t + 1) * d]
    }

    /// Flat row indices for a token batch, rejecting masks and out-of-range
    /// ids.
    pub fn indices(&self, tokens: &[Token], len: usize) -> Result<Vec<usize>> {
        let k = self.vocab();
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                if t as usize == k {
                    Err(Error::MaskedSequence { position: i % len })
                } else if t as usize > k {
                    Err(Error::TokenOutOfRange {
                        token: t,
                        position: i % len,
                        vocab: k,
                    })
                } else {
                    Ok(t as usize)
                }
            })
            .collect()
    }
}

/// Frozen map from `L x d` embeddings (plus a fixed class offset) to a
/// `P`-vector: `tanh((flat(e) + o_c) W1 + b1) W2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDecoder {
    class_offsets: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
}

impl FrozenDecoder {
    fn generate(cfg: &WorldConfig, rng: &mut Rng) -> Self {
        let input = cfg.len * cfg.embed_dim;
        let hidden = cfg.decoder_hidden;
        Self {
            class_offsets: normal(&[cfg.classes, input], 0.5, rng),
            w1: normal(&[input, hidden], 1.0 / libm::sqrt(input as f64), rng),
            b1: normal(&[hidden], 0.1, rng),
            w2: normal(&[hidden, cfg.pixel_dim], 1.0 / libm::sqrt(hidden as f64), rng),
        }
    }

    pub fn pixel_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Graph forward: `emb` is `[B, L, d]`, result `[B, P]`.
    pub fn forward(&self, g: &mut Graph, emb: Var, classes: &[usize]) -> Result<Var> {
        let shape = g.value(emb).shape().to_vec();
        if shape.len() != 3 || shape[0] != classes.len() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: shape,
                rhs: vec![classes.len()],
            });
        }
        let flat = g.reshape(emb, &[shape[0], shape[1] * shape[2]])?;
        let offsets = g.constant(self.class_offsets.clone());
        let off = g.gather_rows(offsets, classes)?;
        let x = g.add(flat, off)?;
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h);
        g.matmul(h, w2)
    }
}

/// Frozen 4-block residual network on the pixel vector. Every block output
/// is a tap of `G*G` cells of `F` features, scaled so that the root mean
/// square cell norm is one.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    cells: usize,
    feature_dim: usize,
}

/// Which taps to read and whether to keep the spatial grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LiftConfig {
    /// 1-based tap indices, ascending and distinct.
    pub taps: Vec<usize>,
    pub spatial: bool,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            taps: (1..=TAPS).collect(),
            spatial: true,
        }
    }
}

impl LiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::arg("drift.taps", "tap set is empty"));
        }
        if self.taps.iter().any(|&t| t == 0 || t > TAPS) {
            return Err(Error::arg("drift.taps", format!("taps must lie in 1..={TAPS}")));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("drift.taps", "taps must be ascending and distinct"));
        }
        Ok(())
    }
}

impl FrozenBackbone {
    fn generate(cfg: &WorldConfig, rng: &mut Rng) -> Self {
        let width = cfg.cells() * cfg.feature_dim;
        let mut weights = Vec::with_capacity(TAPS);
        let mut biases = Vec::with_capacity(TAPS);
        for k in 0..TAPS {
            let input = if k == 0 { cfg.pixel_dim } else { width };
            weights.push(normal(&[input, width], 1.0 / libm::sqrt(input as f64), rng));
            biases.push(normal(&[width], 0.1, rng));
        }
        Self {
            weights,
            biases,
            cells: cfg.cells(),
            feature_dim: cfg.feature_dim,
        }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Graph forward: `x` is `[B, P]`; result `[B, taps, cells, F]`, or
    /// `[B, taps, 1, F]` with `spatial = false`.
    pub fn lift(&self, g: &mut Graph, x: Var, cfg: &LiftConfig) -> Result<Var> {
        cfg.validate()?;
        let batch = g.value(x).shape()[0];
        let (s, f) = (self.cells, self.feature_dim);
        let last = *cfg.taps.last().expect("validated");
        let mut h = x;
        let mut outs = Vec::with_capacity(cfg.taps.len());
        for k in 0..last {
            let w = g.constant(self.weights[k].clone());
            let b = g.constant(self.biases[k].clone());
            let pre = g.matmul(h, w)?;
            let pre = g.add(pre, b)?;
            let act = g.gelu(pre);
            h = if k == 0 { act } else { g.add(h, act)? };
            if !cfg.taps.contains(&(k + 1)) {
                continue;
            }
            let cellwise = g.reshape(h, &[batch, s, f])?;
            let sq = g.square(cellwise);
            let norms = g.sum(sq, 2)?;
            let ms = g.mean(norms, 1)?;
            let eps = g.constant(Tensor::scalar(1e-12));
            let ms = g.add(ms, eps)?;
            let rms = g.sqrt(ms);
            let rms = g.reshape(rms, &[batch, 1, 1])?;
            let tap = g.div(cellwise, rms)?;
            let tap = if cfg.spatial {
                g.reshape(tap, &[batch, 1, s, f])?
            } else {
                let pooled = g.mean(tap, 1)?;
                g.reshape(pooled, &[batch, 1, 1, f])?
            };
            outs.push(tap);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    vocab: usize,
    len: usize,
    rho: f64,
    /// `templates[c][m]` is template `m` of class `c`.
    templates: Vec<Vec<TokenSeq>>,
}

impl SyntheticDataset {
    pub fn new(vocab: usize, len: usize, rho: f64, templates: Vec<Vec<TokenSeq>>) -> Result<Self> {
        if templates.is_empty() || templates.iter().any(|t| t.is_empty()) {
            return Err(Error::arg("world.templates", "every class needs a template"));
        }
        for seq in templates.iter().flatten() {
            if seq.len() != len || seq.iter().any(|&t| t as usize >= vocab) {
                return Err(Error::arg("world.templates", "template outside the vocabulary"));
            }
        }
        Ok(Self {
            vocab,
            len,
            rho,
            templates,
        })
    }

    fn generate(cfg: &WorldConfig, rng: &mut Rng) -> Self {
        let templates = (0..cfg.classes)
            .map(|_| {
                let mut set: Vec<TokenSeq> = Vec::with_capacity(cfg.templates);
                let first: TokenSeq = (0..cfg.len).map(|_| rng.below(cfg.vocab) as Token).collect();
                set.push(first);
                for _ in 1..cfg.templates {
                    // Each further template differs from the previous one at
                    // every position.
                    let prev = set.last().expect("non-empty");
                    let next = prev
                        .iter()
                        .map(|&t| ((t as usize + 1 + rng.below(cfg.vocab - 1)) % cfg.vocab) as Token)
                        .collect();
                    set.push(next);
                }
                set
            })
            .collect();
        Self {
            vocab: cfg.vocab,
            len: cfg.len,
            rho: cfg.rho,
            templates,
        }
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn templates(&self, class: usize) -> Result<&[TokenSeq]> {
        self.check_class(class)?;
        Ok(&self.templates[class])
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::UnknownClass {
                class,
                classes: self.classes(),
            });
        }
        Ok(())
    }

    /// `n` i.i.d. draws from class `class`.
    pub fn sample(&self, class: usize, n: usize, rng: &mut Rng) -> Result<Vec<TokenSeq>> {
        self.check_class(class)?;
        if n == 0 {
            return Err(Error::arg("n", "must be at least 1"));
        }
        let set = &self.templates[class];
        Ok((0..n)
            .map(|_| {
                let mut z = set[rng.below(set.len())].clone();
                for t in z.iter_mut() {
                    if rng.uniform() < self.rho {
                        *t = rng.below(self.vocab) as Token;
                    }
                }
                z
            })
            .collect())
    }

    /// Closed-form `p(z | class)`.
    pub fn exact_prob(&self, z: &[Token], class: usize) -> Result<f64> {
        self.check_class(class)?;
        ensure_complete(z, self.vocab as Token)?;
        if z.len() != self.len {
            return Err(Error::arg("z", format!("length {} != {}", z.len(), self.len)));
        }
        let noise = self.rho / self.vocab as f64;
        let set = &self.templates[class];
        let total: f64 = set
            .iter()
            .map(|tpl| {
                z.iter()
                    .zip(tpl)
                    .map(|(a, b)| if a == b { 1.0 - self.rho + noise } else { noise })
                    .product::<f64>()
            })
            .sum();
        Ok(total / set.len() as f64)
    }

    /// Exact `p(z_position = v | visible tokens, class)` for every `v`,
    /// where masked entries of `state` (value `K`) are marginalized out.
    pub fn exact_conditional(&self, state: &[Token], class: usize, position: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let mask = self.vocab as Token;
        let noise = self.rho / self.vocab as f64;
        let keep = 1.0 - self.rho + noise;
        let mut out = vec![0.0; self.vocab];
        for tpl in &self.templates[class] {
            // Weight of the visible evidence under this template.
            let evidence: f64 = state
                .iter()
                .zip(tpl)
                .enumerate()
                .filter(|&(i, (&s, _))| s != mask && i != position)
                .map(|(_, (s, t))| if s == t { keep } else { noise })
                .product();
            for (v, o) in out.iter_mut().enumerate() {
                let here = if v as Token == tpl[position] { keep } else { noise };
                *o += evidence * here;
            }
        }
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= total);
        Ok(out)
    }
}

/// Base-`K` index of a complete sequence (first position most significant).
pub fn sequence_index(z: &[Token], vocab: usize) -> usize {
    z.iter().fold(0, |acc, &t| acc * vocab + t as usize)
}

pub fn sequence_from_index(mut index: usize, vocab: usize, len: usize) -> TokenSeq {
    let mut z = vec![0; len];
    for slot in z.iter_mut().rev() {
        *slot = (index % vocab) as Token;
        index /= vocab;
    }
    z
}

/// Codebook, decoder, backbone and dataset built from one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    config: WorldConfig,
    codebook: Codebook,
    decoder: FrozenDecoder,
    backbone: FrozenBackbone,
    dataset: SyntheticDataset,
}

impl World {
    /// Builds the world and, when `K^L` is small, checks that the decoder
    /// separates every pair of sequences of each class by at least 1e-6.
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(config.seed, 0);
        let codebook = Codebook::new(normal(&[config.vocab, config.embed_dim], 1.0, &mut rng))?;
        let decoder = FrozenDecoder::generate(config, &mut rng);
        let backbone = FrozenBackbone::generate(config, &mut rng);
        let dataset = SyntheticDataset::generate(config, &mut rng);
        let world = Self {
            config: config.clone(),
            codebook,
            decoder,
            backbone,
            dataset,
        };
        if world.config.space_size() <= INJECTIVITY_SCAN_LIMIT as f64 {
            world.check_injective()?;
        }
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn decoder(&self) -> &FrozenDecoder {
        &self.decoder
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.dataset
    }

    pub fn mask_id(&self) -> Token {
        self.codebook.mask_id()
    }

    /// Exhaustive pairwise scan over all `K^L` sequences of every class.
    pub fn check_injective(&self) -> Result<()> {
        let (k, l) = (self.config.vocab, self.config.len);
        let n = libm::pow(k as f64, l as f64) as usize;
        let seqs: Vec<TokenSeq> = (0..n).map(|i| sequence_from_index(i, k, l)).collect();
        let flat: Vec<Token> = seqs.iter().flatten().copied().collect();
        for c in 0..self.config.classes {
            let classes = vec![c; n];
            let px = self.decode_batch(&flat, &classes)?;
            let p = px.shape()[1];
            let rows: Vec<&[f64]> = px.data().chunks(p).collect();
            for i in 0..n {
                for j in 0..i {
                    let d = euclid(rows[i], rows[j]);
                    if d < 1e-6 {
                        return Err(Error::DecoderCollision {
                            class: c,
                            a: seqs[j].clone(),
                            b: seqs[i].clone(),
                            distance: d,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Embeddings `[B, L, d]` of a flat batch of complete sequences.
    pub fn embed(&self, g: &mut Graph, tokens: &[Token]) -> Result<Var> {
        let l = self.config.len;
        if tokens.is_empty() || tokens.len() % l != 0 {
            return Err(Error::arg("tokens", "batch must be a positive multiple of L"));
        }
        let idx = self.codebook.indices(tokens, l)?;
        let table = g.constant(self.codebook.table.clone());
        let rows = g.gather_rows(table, &idx)?;
        g.reshape(rows, &[tokens.len() / l, l, self.codebook.dim()])
    }

    /// Decoded pixel vectors `[B, P]` for a flat batch of complete sequences.
    pub fn decode_batch(&self, tokens: &[Token], classes: &[usize]) -> Result<Tensor> {
        self.check_classes(classes)?;
        let mut g = Graph::new();
        let e = self.embed(&mut g, tokens)?;
        let x = self.decoder.forward(&mut g, e, classes)?;
        Ok(g.value(x).clone())
    }

    /// `D(E[z]; c)` for one sequence.
    pub fn decode(&self, z: &[Token], class: usize) -> Result<Vec<f64>> {
        ensure_complete(z, self.mask_id())?;
        Ok(self.decode_batch(z, &[class])?.into_data())
    }

    /// Backbone features of pixel vectors `[B, P]`.
    pub fn lift(&self, pixels: &Tensor, cfg: &LiftConfig) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let f = self.backbone.lift(&mut g, x, cfg)?;
        Ok(g.value(f).clone())
    }

    pub fn sample_data(&self, class: usize, n: usize, rng: &mut Rng) -> Result<Vec<TokenSeq>> {
        self.dataset.sample(class, n, rng)
    }

    pub fn exact_prob(&self, z: &[Token], class: usize) -> Result<f64> {
        self.dataset.exact_prob(z, class)
    }

    pub fn check_classes(&self, classes: &[usize]) -> Result<()> {
        match classes.iter().find(|&&c| c >= self.config.classes) {
            Some(&class) => Err(Error::UnknownClass {
                class,
                classes: self.config.classes,
            }),
            None => Ok(()),
        }
    }

    /// All frozen tensors by name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("codebook".to_string(), self.codebook.table.clone()),
            ("decoder.class_offsets".to_string(), self.decoder.class_offsets.clone()),
            ("decoder.w1".to_string(), self.decoder.w1.clone()),
            ("decoder.b1".to_string(), self.decoder.b1.clone()),
            ("decoder.w2".to_string(), self.decoder.w2.clone()),
        ];
        for k in 0..TAPS {
            out.push((format!("backbone.{k}.w"), self.backbone.weights[k].clone()));
            out.push((format!("backbone.{k}.b"), self.backbone.biases[k].clone()));
        }
        let c = self.config.classes;
        let m = self.config.templates;
        let l = self.config.len;
        let tpl: Vec<f64> = self
            .dataset
            .templates
            .iter()
            .flatten()
            .flatten()
            .map(|&t| t as f64)
            .collect();
        out.push((
            "dataset.templates".to_string(),
            Tensor::new(&[c, m, l], tpl).expect("template shape"),
        ));
        out
    }

    /// Inverse of [`World::named_tensors`].
    pub fn from_named_tensors(config: &WorldConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::arg("world", format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "world",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Ok(t)
        };
        let cfg = config;
        let input = cfg.len * cfg.embed_dim;
        let width = cfg.cells() * cfg.feature_dim;
        let codebook = Codebook::new(get("codebook", &[cfg.vocab, cfg.embed_dim])?)?;
        let decoder = FrozenDecoder {
            class_offsets: get("decoder.class_offsets", &[cfg.classes, input])?,
            w1: get("decoder.w1", &[input, cfg.decoder_hidden])?,
            b1: get("decoder.b1", &[cfg.decoder_hidden])?,
            w2: get("decoder.w2", &[cfg.decoder_hidden, cfg.pixel_dim])?,
        };
        let mut weights = Vec::with_capacity(TAPS);
        let mut biases = Vec::with_capacity(TAPS);
        for k in 0..TAPS {
            let inp = if k == 0 { cfg.pixel_dim } else { width };
            weights.push(get(&format!("backbone.{k}.w"), &[inp, width])?);
            biases.push(get(&format!("backbone.{k}.b"), &[width])?);
        }
        let backbone = FrozenBackbone {
            weights,
            biases,
            cells: cfg.cells(),
            feature_dim: cfg.feature_dim,
        };
        let raw = get("dataset.templates", &[cfg.classes, cfg.templates, cfg.len])?;
        let templates = raw
            .data()
            .chunks(cfg.templates * cfg.len)
            .map(|class| class.chunks(cfg.len).map(|s| s.iter().map(|&v| v as Token).collect()).collect())
            .collect();
        let dataset = SyntheticDataset::new(cfg.vocab, cfg.len, cfg.rho, templates)?;
        Ok(Self {
            config: cfg.clone(),
            codebook,
            decoder,
            backbone,
            dataset,
        })
    }
}

pub(crate) fn normal(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * scale)
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enum_world() -> World {
        World::generate(&WorldConfig::enumeration()).unwrap()
    }

    #[test]
    fn exact_prob_plug_in_single_template() {
        let cfg = WorldConfig {
            templates: 1,
            rho: 0.1,
            ..WorldConfig::enumeration()
        };
        let w = World::generate(&cfg).unwrap();
        let tpl = w.dataset().templates(0).unwrap()[0].clone();
        let p = w.exact_prob(&tpl, 0).unwrap();
        assert!((p - libm::pow(0.9 + 0.1 / 3.0, 4.0)).abs() < 1e-15);
    }

    #[test]
    fn exact_prob_uniform_at_rho_one() {
        let cfg = WorldConfig {
            rho: 1.0,
            ..WorldConfig::enumeration()
        };
        let w = World::generate(&cfg).unwrap();
        for i in 0..81 {
            let z = sequence_from_index(i, 3, 4);
            assert!((w.exact_prob(&z, 2).unwrap() - 1.0 / 81.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_prob_normalizes() {
        let w = enum_world();
        for c in 0..4 {
            let total: f64 = (0..81)
                .map(|i| w.exact_prob(&sequence_from_index(i, 3, 4), c).unwrap())
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_conditional_matches_enumeration() {
        let w = enum_world();
        let mask = w.mask_id();
        let state = [1, mask, mask, 2];
        for pos in [1, 2] {
            let cond = w.dataset().exact_conditional(&state, 3, pos).unwrap();
            let mut brute = vec![0.0; 3];
            for i in 0..81 {
                let z = sequence_from_index(i, 3, 4);
                if z[0] == 1 && z[3] == 2 {
                    brute[z[pos] as usize] += w.exact_prob(&z, 3).unwrap();
                }
            }
            let total: f64 = brute.iter().sum();
            for v in 0..3 {
                assert!((cond[v] - brute[v] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn templates_differ_everywhere() {
        let w = enum_world();
        for c in 0..4 {
            let t = w.dataset().templates(c).unwrap();
            assert!(t[0].iter().zip(&t[1]).all(|(a, b)| a != b));
        }
    }

    #[test]
    fn decode_rejects_masks_and_is_deterministic() {
        let w = enum_world();
        assert_eq!(
            w.decode(&[0, 3, 1, 1], 0),
            Err(Error::MaskedSequence { position: 1 })
        );
        let a = w.decode(&[0, 2, 1, 1], 1).unwrap();
        let b = w.decode(&[0, 2, 1, 1], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn sample_data_edge_cases() {
        let cfg = WorldConfig {
            rho: 0.0,
            ..WorldConfig::enumeration()
        };
        let w = World::generate(&cfg).unwrap();
        let mut rng = Rng::seeded(3);
        let tpls = w.dataset().templates(1).unwrap().to_vec();
        for z in w.sample_data(1, 100, &mut rng).unwrap() {
            assert!(tpls.contains(&z));
        }
        assert!(matches!(
            w.sample_data(9, 1, &mut rng),
            Err(Error::UnknownClass { class: 9, .. })
        ));
        assert!(w.sample_data(0, 0, &mut rng).is_err());
    }

    #[test]
    fn lift_shapes_and_pooling() {
        let w = enum_world();
        let px = w.decode_batch(&[0, 1, 2, 0, 2, 2, 1, 0], &[0, 3]).unwrap();
        let spatial = w.lift(&px, &LiftConfig::default()).unwrap();
        assert_eq!(spatial.shape(), &[2, 4, 4, 24]);
        let pooled = w
            .lift(
                &px,
                &LiftConfig {
                    taps: vec![1, 2, 3, 4],
                    spatial: false,
                },
            )
            .unwrap();
        assert_eq!(pooled.shape(), &[2, 4, 1, 24]);
        for b in 0..2 {
            for t in 0..4 {
                for f in 0..24 {
                    let mean: f64 = (0..4)
                        .map(|s| spatial.data()[((b * 4 + t) * 4 + s) * 24 + f])
                        .sum::<f64>()
                        / 4.0;
                    let p = pooled.data()[(b * 4 + t) * 24 + f];
                    assert!((mean - p).abs() < 1e-12);
                }
            }
        }
        // Unit RMS cell norm per tap.
        for b in 0..2 {
            for t in 0..4 {
                let ms: f64 = (0..4)
                    .map(|s| {
                        let at = ((b * 4 + t) * 4 + s) * 24;
                        spatial.data()[at..at + 24].iter().map(|v| v * v).sum::<f64>()
                    })
                    .sum::<f64>()
                    / 4.0;
                assert!((ms - 1.0).abs() < 1e-9);
            }
        }
        let empty = LiftConfig {
            taps: vec![],
            spatial: true,
        };
        assert!(w.lift(&px, &empty).is_err());
    }

    #[test]
    fn named_tensor_round_trip() {
        let w = enum_world();
        let back = World::from_named_tensors(w.config(), &w.named_tensors()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = WorldConfig {
            vocab: 0,
            ..WorldConfig::default()
        };
        match World::generate(&cfg) {
            Err(Error::InvalidArgument { name, .. }) => assert_eq!(name, "world.K"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
