//! The position-mixing denoiser shared by teacher and student, its
//! parameter container and the RMS-scaled optimizer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{Graph, Tensor, Var};
use crate::rng::Rng;
use crate::world::{normal, WorldConfig};
use crate::{Error, Result, Token};

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor by the same-named one in `other`; shapes must
    /// agree.
    pub fn load(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::arg("params", format!("missing tensor {name}")))?;
            if src.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    lhs: src.shape().to_vec(),
                    rhs: slot.shape().to_vec(),
                });
            }
            *slot = src.clone();
        }
        if other.len() != self.len() {
            return Err(Error::arg("params", "unexpected extra tensors"));
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Puts every tensor on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Sizes of a [`DenoiserNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub vocab: usize,
    pub len: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl NetShape {
    pub fn for_world(world: &WorldConfig, hidden: usize) -> Self {
        Self {
            vocab: world.vocab,
            len: world.len,
            embed_dim: world.embed_dim,
            classes: world.classes,
            hidden,
            blocks: 2,
        }
    }
}

/// Default width; about 50k parameters at the default world sizes.
pub const DEFAULT_HIDDEN: usize = 76;

/// `f(z_t, c, t) -> L x K` logits.
///
/// Tokens are embedded through the frozen codebook plus one learned mask
/// row, projected to width `H`, and offset by class, time and position
/// embeddings. Each residual block applies a learned `L x L` mix over
/// positions and then a GELU channel MLP of width `2H`, both behind a
/// layer norm.
#[derive(Debug)]
pub struct DenoiserNet {
    shape: NetShape,
    codebook: Tensor,
    params: ParamSet,
    evaluations: AtomicU64,
}

impl Clone for DenoiserNet {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape,
            codebook: self.codebook.clone(),
            params: self.params.clone(),
            evaluations: AtomicU64::new(self.evaluations()),
        }
    }
}

impl PartialEq for DenoiserNet {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.codebook == other.codebook && self.params == other.params
    }
}

const P_MASK: usize = 0;
const P_W_IN: usize = 1;
const P_CLASS: usize = 2;
const P_TIME: usize = 3;
const P_POS: usize = 4;
const P_BLOCKS: usize = 5;
const PER_BLOCK: usize = 6;

impl DenoiserNet {
    pub fn new(shape: NetShape, codebook: &Tensor, seed: u64) -> Result<Self> {
        let (k, l, d, c, h) = (shape.vocab, shape.len, shape.embed_dim, shape.classes, shape.hidden);
        if [k, l, d, c, h, shape.blocks].contains(&0) {
            return Err(Error::arg("teacher.hidden", "network sizes must be positive"));
        }
        if codebook.shape() != [k, d] {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                lhs: codebook.shape().to_vec(),
                rhs: vec![k, d],
            });
        }
        let mut rng = Rng::stream(seed, 1);
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
        let mut p = ParamSet::new();
        p.push("mask", normal(&[1, d], 0.1, &mut rng));
        p.push("w_in", normal(&[d, h], inv(d), &mut rng));
        p.push("class", normal(&[c, h], 0.1, &mut rng));
        p.push("time", normal(&[h], 0.1, &mut rng));
        p.push("pos", normal(&[l, h], 0.1, &mut rng));
        for b in 0..shape.blocks {
            p.push(format!("block{b}.mix"), normal(&[l, l], inv(l), &mut rng));
            p.push(format!("block{b}.mix_bias"), Tensor::zeros(&[l, 1]));
            p.push(format!("block{b}.fc1"), normal(&[h, 2 * h], inv(h), &mut rng));
            p.push(format!("block{b}.fc1_bias"), Tensor::zeros(&[2 * h]));
            p.push(format!("block{b}.fc2"), normal(&[2 * h, h], inv(2 * h), &mut rng));
            p.push(format!("block{b}.fc2_bias"), Tensor::zeros(&[h]));
        }
        p.push("out", normal(&[h, k], inv(h), &mut rng));
        p.push("out_bias", Tensor::zeros(&[k]));
        Ok(Self {
            shape,
            codebook: codebook.clone(),
            params: p,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn mask_id(&self) -> Token {
        self.shape.vocab as Token
    }

    /// Number of forward passes run so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// `[B, L, d]` embeddings of a flat token batch; `K` maps to the mask
    /// row.
    pub fn embed(&self, g: &mut Graph, bound: &[Var], tokens: &[Token]) -> Result<Var> {
        let (k, l) = (self.shape.vocab, self.shape.len);
        if tokens.is_empty() || tokens.len() % l != 0 {
            return Err(Error::arg("tokens", "batch must be a positive multiple of L"));
        }
        let mut idx = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize > k {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    position: i % l,
                    vocab: k,
                });
            }
            idx.push(t as usize);
        }
        let frozen = g.constant(self.codebook.clone());
        let table = g.concat(&[frozen, bound[P_MASK]], 0)?;
        let rows = g.gather_rows(table, &idx)?;
        g.reshape(rows, &[tokens.len() / l, l, self.shape.embed_dim])
    }

    /// Logits `[B, L, K]` from embeddings `[B, L, d]`.
    pub fn forward_embedded(
        &self,
        g: &mut Graph,
        bound: &[Var],
        emb: Var,
        classes: &[usize],
        times: &[f64],
    ) -> Result<Var> {
        let s = self.shape;
        let batch = classes.len();
        if g.value(emb).shape() != [batch, s.len, s.embed_dim] || times.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                lhs: g.value(emb).shape().to_vec(),
                rhs: vec![batch, s.len, s.embed_dim],
            });
        }
        if let Some(&class) = classes.iter().find(|&&c| c >= s.classes) {
            return Err(Error::UnknownClass {
                class,
                classes: s.classes,
            });
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let mut h = g.matmul(emb, bound[P_W_IN])?;
        let cls = g.gather_rows(bound[P_CLASS], classes)?;
        let cls = g.reshape(cls, &[batch, 1, s.hidden])?;
        h = g.add(h, cls)?;
        let t = g.constant(Tensor::new(&[batch, 1, 1], times.to_vec())?);
        let temb = g.mul(t, bound[P_TIME])?;
        h = g.add(h, temb)?;
        h = g.add(h, bound[P_POS])?;
        for b in 0..s.blocks {
            let w = &bound[P_BLOCKS + b * PER_BLOCK..P_BLOCKS + (b + 1) * PER_BLOCK];
            let n = g.layer_norm(h)?;
            let mixed = g.matmul(w[0], n)?;
            let mixed = g.add(mixed, w[1])?;
            h = g.add(h, mixed)?;
            let n = g.layer_norm(h)?;
            let u = g.matmul(n, w[2])?;
            let u = g.add(u, w[3])?;
            let u = g.gelu(u);
            let u = g.matmul(u, w[4])?;
            let u = g.add(u, w[5])?;
            h = g.add(h, u)?;
        }
        let out = P_BLOCKS + s.blocks * PER_BLOCK;
        let n = g.layer_norm(h)?;
        let logits = g.matmul(n, bound[out])?;
        g.add(logits, bound[out + 1])
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[Var],
        tokens: &[Token],
        classes: &[usize],
        times: &[f64],
    ) -> Result<Var> {
        let e = self.embed(g, bound, tokens)?;
        self.forward_embedded(g, bound, e, classes, times)
    }

    /// Inference-only softmax probabilities `[B, L, K]`.
    pub fn probs(&self, tokens: &[Token], classes: &[usize], times: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let logits = self.forward(&mut g, &bound, tokens, classes, times)?;
        let p = g.softmax(logits, 2)?;
        Ok(g.value(p).clone())
    }
}

/// Per-parameter RMS-scaled gradient descent without momentum:
/// `v <- beta v + (1 - beta) g^2`, `x <- x - lr g / (sqrt(v / (1 - beta^t)) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsScaling {
    pub lr: f64,
    pub beta: f64,
    pub eps: f64,
    step: u64,
    second_moment: Vec<Tensor>,
}

impl RmsScaling {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta: 0.99,
            eps: 1e-8,
            step: 0,
            second_moment: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// Restores serialized state.
    pub fn restore(&mut self, step: u64, second_moment: Vec<Tensor>) -> Result<()> {
        if second_moment.len() != self.second_moment.len()
            || second_moment
                .iter()
                .zip(&self.second_moment)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::arg("optimizer", "state does not match the parameters"));
        }
        self.step = step;
        self.second_moment = second_moment;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::arg("grads", "one gradient per parameter required"));
        }
        self.step += 1;
        let correction = 1.0 - libm::pow(self.beta, self.step as f64);
        for ((x, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.second_moment) {
            if g.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer",
                    lhs: g.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            for ((xi, &gi), vi) in x.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.beta * *vi + (1.0 - self.beta) * gi * gi;
                *xi -= self.lr * gi / (libm::sqrt(*vi / correction) + self.eps);
            }
        }
        Ok(())
    }
}

/// Gradients of `bound` leaves after backward.
pub fn collect_grads(g: &Graph, bound: &[Var]) -> Vec<Tensor> {
    bound.iter().map(|&v| g.grad(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::World;

    fn net(hidden: usize) -> (World, DenoiserNet) {
        let w = World::generate(&WorldConfig::enumeration()).unwrap();
        let n = DenoiserNet::new(NetShape::for_world(w.config(), hidden), w.codebook().table(), 7).unwrap();
        (w, n)
    }

    #[test]
    fn default_size_is_about_fifty_thousand() {
        let w = WorldConfig::default();
        let cb = Tensor::zeros(&[w.vocab, w.embed_dim]);
        let n = DenoiserNet::new(NetShape::for_world(&w, DEFAULT_HIDDEN), &cb, 0).unwrap();
        let count = n.params().numel();
        assert!((45_000..55_000).contains(&count), "{count}");
    }

    #[test]
    fn output_rows_are_distributions_for_any_mask_pattern() {
        let (_, n) = net(16);
        let tokens = [3, 3, 3, 3, 0, 3, 2, 1, 0, 1, 2, 2];
        let p = n.probs(&tokens, &[0, 1, 3], &[1.0, 0.4, 0.0]).unwrap();
        assert_eq!(p.shape(), &[3, 4, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(n.evaluations(), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (_, n) = net(8);
        assert!(n.probs(&[0, 1, 4, 0], &[0], &[0.5]).is_err());
        assert!(n.probs(&[0, 1, 2, 0], &[9], &[0.5]).is_err());
        assert!(n.probs(&[0, 1, 2], &[0], &[0.5]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (_, mut n) = net(8);
        let before = n.params().clone();
        let mut opt = RmsScaling::new(n.params(), 0.0);
        let grads: Vec<Tensor> = before.tensors().iter().map(|t| t.map(|_| 1.0)).collect();
        opt.step(n.params_mut(), &grads).unwrap();
        assert_eq!(n.params(), &before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.push("x", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = RmsScaling::new(&p, 0.1);
        opt.step(&mut p, &[Tensor::new(&[2], vec![3.0, -0.5]).unwrap()]).unwrap();
        assert!((p.tensors()[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((p.tensors()[0].data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn load_round_trips_and_checks_shapes() {
        let (_, n) = net(8);
        let (_, mut m) = net(8);
        m.params_mut().tensors_mut()[0] = Tensor::filled(&[1, 8], 2.0);
        m.params_mut().load(&n.params().named()).unwrap();
        assert_eq!(m.params(), n.params());
        let (_, wide) = net(12);
        assert!(m.params_mut().load(&wide.params().named()).is_err());
    }
}
