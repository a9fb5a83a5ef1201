//! Masked cross-entropy pretraining, the single refinement operator and
//! the multi-step sampler.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Tensor, Var};
use crate::masking::{corrupt, select_top_confidence, ConfidenceRule, MaskState, NoiseSchedule};
use crate::nn::{collect_grads, DenoiserNet, RmsScaling};
use crate::rng::Rng;
use crate::world::World;
use crate::{Error, Result, Token, TokenSeq};

/// Stream ids for per-step generators: `purpose << 40 | step`.
pub(crate) fn step_stream(purpose: u64, step: u64) -> u64 {
    (purpose << 40) | step
}

pub(crate) const PURPOSE_TEACHER: u64 = 1;
pub(crate) const PURPOSE_SAMPLER: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeSampler {
    Uniform,
    Fixed(f64),
}

/// Mean over the batch of the summed negative log-likelihood of the masked
/// positions. Returns the scalar loss and the total masked count.
#[allow(clippy::too_many_arguments)]
pub fn teacher_loss(
    g: &mut Graph,
    net: &DenoiserNet,
    bound: &[Var],
    data: &[TokenSeq],
    classes: &[usize],
    times: TimeSampler,
    schedule: NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Var, usize)> {
    if data.is_empty() || data.len() != classes.len() {
        return Err(Error::arg("batch", "need one class per sequence and at least one sequence"));
    }
    let shape = net.shape();
    let (l, k) = (shape.len, shape.vocab);
    let mask = net.mask_id();
    let mut tokens = Vec::with_capacity(data.len() * l);
    let mut ts = Vec::with_capacity(data.len());
    let mut target = vec![0.0; data.len() * l * k];
    let mut masked = 0;
    for (b, z) in data.iter().enumerate() {
        if z.len() != l {
            return Err(Error::arg("batch", format!("sequence length {} != {l}", z.len())));
        }
        let t = match times {
            TimeSampler::Uniform => rng.uniform(),
            TimeSampler::Fixed(t) => t,
        };
        let state = corrupt(z, t, schedule, mask, rng)?;
        for &i in state.mask_set() {
            target[(b * l + i) * k + z[i] as usize] = 1.0;
        }
        masked += state.mask_set().len();
        tokens.extend_from_slice(state.tokens());
        ts.push(t);
    }
    let logits = net.forward(g, bound, &tokens, classes, &ts)?;
    let p = g.softmax(logits, 2)?;
    let logp = g.log(p);
    let onehot = g.constant(Tensor::new(&[data.len(), l, k], target)?);
    let picked = g.mul(logp, onehot)?;
    let total = g.sum_all(picked);
    Ok((g.scale(total, -1.0 / data.len() as f64), masked))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub hidden: usize,
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: crate::nn::DEFAULT_HIDDEN,
            steps: 5000,
            lr: 3e-3,
            batch: 64,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::arg("teacher.hidden", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::arg("teacher.batch", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("teacher.lr", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One optimizer step of teacher pretraining. Step `step` draws from its own
/// stream, so a run can stop and resume anywhere.
pub fn teacher_step(
    world: &World,
    net: &mut DenoiserNet,
    opt: &mut RmsScaling,
    cfg: &TeacherConfig,
    schedule: NoiseSchedule,
    step: u64,
) -> Result<f64> {
    let mut rng = Rng::stream(cfg.seed, step_stream(PURPOSE_TEACHER, step));
    let classes: Vec<usize> = (0..cfg.batch).map(|_| rng.below(world.config().classes)).collect();
    let mut data = Vec::with_capacity(cfg.batch);
    for &c in &classes {
        data.extend(world.sample_data(c, 1, &mut rng)?);
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let (loss, _) = teacher_loss(
        &mut g,
        net,
        &bound,
        &data,
        &classes,
        TimeSampler::Uniform,
        schedule,
        &mut rng,
    )?;
    g.backward(loss)?;
    let value = g.value(loss).item();
    let grads = collect_grads(&g, &bound);
    opt.step(net.params_mut(), &grads)?;
    Ok(value)
}

/// Runs steps `start..cfg.steps`, reporting `(step, loss)` after each.
pub fn train_teacher(
    world: &World,
    net: &mut DenoiserNet,
    opt: &mut RmsScaling,
    cfg: &TeacherConfig,
    schedule: NoiseSchedule,
    start: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    cfg.validate()?;
    for step in start..cfg.steps {
        let loss = teacher_step(world, net, opt, cfg, schedule, step)?;
        on_step(step, loss);
    }
    Ok(())
}

/// How revealed tokens are chosen from the teacher's distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Decode {
    #[default]
    Sample,
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RefineOptions {
    pub decode: Decode,
    pub confidence: ConfidenceRule,
}

/// Batched single refinement: for each state, draws every masked position
/// from `p(. | z_t, c, t_eff)`, reveals the `keep` most confident and leaves
/// the rest masked. Revealed tokens are never touched.
///
/// `visible` optionally replaces the embeddings of visible positions with
/// the given `[B, L, d]` values.
#[allow(clippy::too_many_arguments)]
pub fn refine_batch(
    net: &DenoiserNet,
    states: &mut [MaskState],
    classes: &[usize],
    t_eff: &[f64],
    keep: &[usize],
    opts: RefineOptions,
    rng: &mut Rng,
    visible: Option<&Tensor>,
) -> Result<()> {
    let b = states.len();
    if classes.len() != b || t_eff.len() != b || keep.len() != b {
        return Err(Error::arg("refine", "per-state argument lengths differ"));
    }
    for (s, &n) in states.iter().zip(keep) {
        if n > s.mask_set().len() {
            return Err(Error::arg(
                "keep",
                format!("{n} exceeds the {} masked positions", s.mask_set().len()),
            ));
        }
    }
    // Only states with something to reveal need a network pass.
    let active: Vec<usize> = (0..b).filter(|&i| keep[i] > 0).collect();
    if active.is_empty() {
        return Ok(());
    }
    let shape = net.shape();
    let (l, k, d) = (shape.len, shape.vocab, shape.embed_dim);
    let tokens: Vec<Token> = active.iter().flat_map(|&i| states[i].tokens().to_vec()).collect();
    let cls: Vec<usize> = active.iter().map(|&i| classes[i]).collect();
    let ts: Vec<f64> = active.iter().map(|&i| t_eff[i]).collect();
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let emb = match visible {
        None => net.embed(&mut g, &bound, &tokens)?,
        Some(v) => {
            if v.shape() != [b, l, d] {
                return Err(Error::ShapeMismatch {
                    op: "refine",
                    lhs: v.shape().to_vec(),
                    rhs: vec![b, l, d],
                });
            }
            let hard = net.embed(&mut g, &bound, &tokens)?;
            let mut data = g.value(hard).data().to_vec();
            for (row, &i) in active.iter().enumerate() {
                for p in 0..l {
                    if states[i].tokens()[p] != net.mask_id() {
                        let dst = (row * l + p) * d;
                        let src = (i * l + p) * d;
                        data[dst..dst + d].copy_from_slice(&v.data()[src..src + d]);
                    }
                }
            }
            g.constant(Tensor::new(&[active.len(), l, d], data)?)
        }
    };
    let logits = net.forward_embedded(&mut g, &bound, emb, &cls, &ts)?;
    let probs = g.softmax(logits, 2)?;
    let probs = g.value(probs).data();
    for (row, &i) in active.iter().enumerate() {
        let mut drawn = vec![0 as Token; l];
        let mut confidence = vec![f64::NEG_INFINITY; l];
        for &p in states[i].mask_set() {
            let dist = &probs[(row * l + p) * k..(row * l + p + 1) * k];
            let v = match opts.decode {
                Decode::Sample => rng.categorical(dist),
                Decode::Argmax => argmax(dist),
            };
            drawn[p] = v as Token;
            confidence[p] = match opts.confidence {
                ConfidenceRule::Plain => dist[v],
                ConfidenceRule::Gumbel { temperature } => {
                    libm::log(dist[v].max(crate::autodiff::LOG_FLOOR)) + temperature * rng.gumbel()
                }
            };
        }
        let chosen = select_top_confidence(&confidence, states[i].mask_set(), keep[i])?;
        for p in chosen {
            states[i].reveal(p, drawn[p])?;
        }
    }
    Ok(())
}

/// Single-state form of [`refine_batch`].
pub fn refine_step(
    net: &DenoiserNet,
    state: &MaskState,
    class: usize,
    t_eff: f64,
    keep: usize,
    opts: RefineOptions,
    rng: &mut Rng,
) -> Result<MaskState> {
    let mut states = [state.clone()];
    refine_batch(net, &mut states, &[class], &[t_eff], &[keep], opts, rng, None)?;
    let [out] = states;
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-step reveal budgets of a `T`-step sampler.
///
/// After step `k` exactly `ceil(gamma(1 - k/T) * L)` positions stay masked.
/// When `T > L` some budgets are zero; those steps are no-ops.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    steps: usize,
    len: usize,
    schedule: NoiseSchedule,
    budgets: Vec<usize>,
}

impl SamplerPlan {
    pub fn new(steps: usize, len: usize, schedule: NoiseSchedule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::arg("eval.steps", "sampler needs at least one step"));
        }
        if len == 0 {
            return Err(Error::arg("world.L", "must be positive"));
        }
        let masked_after = |k: usize| -> usize {
            let r = schedule.gamma(1.0 - k as f64 / steps as f64);
            (libm::ceil(r * len as f64 - 1e-9).max(0.0) as usize).min(len)
        };
        let budgets = (1..=steps).map(|k| masked_after(k - 1) - masked_after(k)).collect();
        Ok(Self {
            steps,
            len,
            schedule,
            budgets,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    /// Masked count after each step.
    pub fn trajectory(&self) -> Vec<usize> {
        let mut m = self.len;
        self.budgets
            .iter()
            .map(|n| {
                m -= n;
                m
            })
            .collect()
    }
}

/// Multi-step generation from a fully masked start, one sequence per entry
/// of `classes`. With Gumbel confidence the temperature is annealed as
/// `tau * (1 - k/T)` at step `k`.
pub fn sample_iterative(
    net: &DenoiserNet,
    classes: &[usize],
    plan: &SamplerPlan,
    opts: RefineOptions,
    rng: &mut Rng,
) -> Result<Vec<TokenSeq>> {
    let l = net.shape().len;
    if plan.len != l {
        return Err(Error::arg("plan", "plan length differs from the network"));
    }
    let mut states: Vec<MaskState> = classes
        .iter()
        .map(|_| MaskState::fully_masked(l, net.mask_id()))
        .collect();
    let mut masked = l;
    for (k, &budget) in plan.budgets.iter().enumerate() {
        let t = plan.schedule.inverse(masked as f64 / l as f64);
        let step_opts = RefineOptions {
            confidence: match opts.confidence {
                ConfidenceRule::Gumbel { temperature } => ConfidenceRule::Gumbel {
                    temperature: temperature * (1.0 - (k + 1) as f64 / plan.steps as f64),
                },
                plain => plain,
            },
            ..opts
        };
        let n = states.len();
        refine_batch(
            net,
            &mut states,
            classes,
            &vec![t; n],
            &vec![budget; n],
            step_opts,
            rng,
            None,
        )?;
        masked -= budget;
    }
    Ok(states.into_iter().map(MaskState::into_tokens).collect())
}

/// [`sample_iterative`] over a large request in fixed chunks, with chunk
/// `i` drawing from its own stream of `seed`.
pub fn sample_iterative_chunked(
    net: &DenoiserNet,
    classes: &[usize],
    plan: &SamplerPlan,
    opts: RefineOptions,
    seed: u64,
    chunk: usize,
) -> Result<Vec<TokenSeq>> {
    let mut out = Vec::with_capacity(classes.len());
    for (i, part) in classes.chunks(chunk.max(1)).enumerate() {
        let mut rng = Rng::stream(seed, step_stream(PURPOSE_SAMPLER, i as u64));
        out.extend(sample_iterative(net, part, plan, opts, &mut rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetShape;
    use crate::world::WorldConfig;

    fn setup() -> (World, DenoiserNet) {
        let w = World::generate(&WorldConfig::enumeration()).unwrap();
        let n = DenoiserNet::new(NetShape::for_world(w.config(), 8), w.codebook().table(), 1).unwrap();
        (w, n)
    }

    /// Zeroes the head so every logit is 0.
    fn uniform(net: &mut DenoiserNet) {
        let names: Vec<_> = net.params().names().to_vec();
        for (name, t) in names.iter().zip(net.params_mut().tensors_mut()) {
            if name.starts_with("out") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    /// Head whose logits strongly favor token `v` everywhere.
    fn one_hot(net: &mut DenoiserNet, v: usize) {
        let names: Vec<_> = net.params().names().to_vec();
        for (name, t) in names.iter().zip(net.params_mut().tensors_mut()) {
            if name == "out" {
                *t = Tensor::zeros(t.shape());
            } else if name == "out_bias" {
                *t = Tensor::from_fn(t.shape(), |i| if i == v { 1e3 } else { 0.0 });
            }
        }
    }

    #[test]
    fn loss_is_zero_at_t0_and_m_log_k_for_uniform_logits() {
        let (w, mut n) = setup();
        uniform(&mut n);
        let data = vec![vec![0, 1, 2, 0], vec![2, 2, 1, 0]];
        let mut rng = Rng::seeded(0);
        let mut g = Graph::new();
        let bound = n.bind(&mut g, false);
        let sched = NoiseSchedule::Cosine;
        let (loss, m) = teacher_loss(&mut g, &n, &bound, &data, &[0, 1], TimeSampler::Fixed(0.0), sched, &mut rng).unwrap();
        assert_eq!(m, 0);
        assert_eq!(g.value(loss).item(), 0.0);
        let (loss, m) = teacher_loss(&mut g, &n, &bound, &data, &[0, 1], TimeSampler::Fixed(1.0), sched, &mut rng).unwrap();
        assert_eq!(m, 8);
        let expected = (m as f64 / 2.0) * libm::log(3.0);
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
        let _ = w;
    }

    #[test]
    fn plan_trajectory_and_budgets() {
        let p = SamplerPlan::new(8, 4, NoiseSchedule::Cosine).unwrap();
        assert_eq!(p.budgets(), &[0, 1, 1, 0, 1, 0, 0, 1]);
        assert_eq!(p.budgets().iter().sum::<usize>(), 4);
        let p = SamplerPlan::new(1, 16, NoiseSchedule::Cosine).unwrap();
        assert_eq!(p.budgets(), &[16]);
        for t in [2, 4, 8, 16] {
            let p = SamplerPlan::new(t, 16, NoiseSchedule::Linear).unwrap();
            for (k, m) in p.trajectory().iter().enumerate() {
                let r = 1.0 - (k + 1) as f64 / t as f64;
                assert_eq!(*m, libm::ceil(r * 16.0 - 1e-9) as usize);
            }
        }
        assert!(SamplerPlan::new(0, 4, NoiseSchedule::Cosine).is_err());
    }

    #[test]
    fn refine_reveals_argmax_for_deterministic_teacher() {
        let (_, mut n) = setup();
        one_hot(&mut n, 2);
        let state = MaskState::new(vec![3, 0, 3, 1], 3);
        for seed in 0..5 {
            let mut rng = Rng::seeded(seed);
            let out = refine_step(&n, &state, 1, 0.5, 2, RefineOptions::default(), &mut rng).unwrap();
            assert_eq!(out.tokens(), &[2, 0, 2, 1]);
            assert!(out.is_complete());
        }
    }

    #[test]
    fn refine_keeps_revealed_and_handles_empty() {
        let (_, n) = setup();
        let mut rng = Rng::seeded(3);
        let state = MaskState::new(vec![3, 0, 3, 1], 3);
        let out = refine_step(&n, &state, 0, 0.5, 1, RefineOptions::default(), &mut rng).unwrap();
        assert_eq!(out.mask_set().len(), 1);
        assert_eq!((out.tokens()[1], out.tokens()[3]), (0, 1));
        let full = MaskState::new(vec![1, 0, 2, 1], 3);
        let same = refine_step(&n, &full, 0, 0.5, 0, RefineOptions::default(), &mut rng).unwrap();
        assert_eq!(same, full);
        assert!(refine_step(&n, &state, 0, 0.5, 3, RefineOptions::default(), &mut rng).is_err());
    }

    #[test]
    fn one_step_sampler_equals_full_refine() {
        let (_, n) = setup();
        let plan = SamplerPlan::new(1, 4, NoiseSchedule::Cosine).unwrap();
        let a = sample_iterative(&n, &[2, 3], &plan, RefineOptions::default(), &mut Rng::seeded(9)).unwrap();
        let mut states = vec![MaskState::fully_masked(4, 3); 2];
        refine_batch(
            &n,
            &mut states,
            &[2, 3],
            &[1.0, 1.0],
            &[4, 4],
            RefineOptions::default(),
            &mut Rng::seeded(9),
            None,
        )
        .unwrap();
        let b: Vec<_> = states.into_iter().map(MaskState::into_tokens).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let (w, n0) = setup();
        let cfg = TeacherConfig {
            hidden: 8,
            steps: 60,
            batch: 16,
            ..TeacherConfig::default()
        };
        let run = || {
            let mut n = n0.clone();
            let mut opt = RmsScaling::new(n.params(), cfg.lr);
            let mut losses = Vec::new();
            train_teacher(&w, &mut n, &mut opt, &cfg, NoiseSchedule::Cosine, 0, |_, l| losses.push(l)).unwrap();
            (n, losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let head: f64 = la[..10].iter().sum();
        let tail: f64 = la[50..].iter().sum();
        assert!(tail < head);
    }
}
