//! One-step student distillation against re-mask-and-refine targets.
//!
//! A training step:
//!
//! 1. the student predicts every position from a nearly fully masked
//!    random start and a draft `z` is sampled from its distribution;
//! 2. the draft is embedded (straight-through or soft), decoded and lifted
//!    to features `X`;
//! 3. the draft is re-masked at a random ratio and completed by one teacher
//!    refinement, giving `z_T`, which is decoded and lifted to `Y`;
//! 4. the student descends the drift loss between `X` and `Y`, plus an
//!    optional non-saturating GAN term on the decoded draft.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Tensor, Var};
use crate::drift::{drift_loss, DriftConfig, DriftSpace};
use crate::masking::{init_draft, mask_count, remask, MaskState, NoiseSchedule};
use crate::nn::{collect_grads, DenoiserNet, ParamSet, RmsScaling};
use crate::rng::Rng;
use crate::teacher::{refine_batch, step_stream, Decode, RefineOptions};
use crate::world::{normal, LiftConfig, World};
use crate::{Error, Result, Token, TokenSeq};

pub(crate) const PURPOSE_DISTILL: u64 = 3;
pub(crate) const PURPOSE_STUDENT_SAMPLE: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Hard codebook rows forward, soft-mixture gradient backward.
    #[default]
    Ste,
    /// Probability-weighted codebook mixture in both directions.
    Soft,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ste => "ste",
            Estimator::Soft => "soft",
        }
    }
}

impl core::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ste" => Ok(Estimator::Ste),
            "soft" => Ok(Estimator::Soft),
            other => Err(Error::arg("distill.estimator", format!("unknown estimator {other:?}"))),
        }
    }
}

/// What the teacher refines to build the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RefinementSource {
    /// The re-masked student draft.
    #[default]
    Student,
    /// A fresh random start at the same mask ratio.
    Random,
}

impl RefinementSource {
    pub fn name(self) -> &'static str {
        match self {
            RefinementSource::Student => "student",
            RefinementSource::Random => "random",
        }
    }
}

impl core::str::FromStr for RefinementSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(RefinementSource::Student),
            "random" => Ok(RefinementSource::Random),
            other => Err(Error::arg("distill.source", format!("unknown source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub r_init: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    /// GAN weight; 0 disables the discriminator entirely.
    pub lambda: f64,
    pub source: RefinementSource,
    pub estimator: Estimator,
    pub decode: Decode,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub disc_lr: f64,
    pub disc_hidden: usize,
    pub seed: u64,
    pub drift: DriftConfig,
    pub lift: LiftConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            r_init: 0.95,
            r_lo: 0.3,
            r_hi: 0.7,
            lambda: 0.0,
            source: RefinementSource::Student,
            estimator: Estimator::Ste,
            decode: Decode::Sample,
            batch: 8,
            steps: 2000,
            lr: 1e-4,
            disc_lr: 1e-4,
            disc_hidden: 32,
            seed: 0,
            drift: DriftConfig::default(),
            lift: LiftConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_init > 0.0 && self.r_init <= 1.0) {
            return Err(Error::arg("distill.r_init", "must lie in (0, 1]"));
        }
        if !(0.0 < self.r_lo && self.r_lo < self.r_hi && self.r_hi < 1.0) {
            return Err(Error::arg("distill.r_lo", "need 0 < r_lo < r_hi < 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::arg("distill.lambda", "must be finite and non-negative"));
        }
        if self.batch < 2 {
            return Err(Error::arg("distill.batch", "drift needs a batch of at least 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("distill.lr", "must be finite and non-negative"));
        }
        if !(self.disc_lr >= 0.0 && self.disc_lr.is_finite()) {
            return Err(Error::arg("distill.disc_lr", "must be finite and non-negative"));
        }
        if self.disc_hidden == 0 {
            return Err(Error::arg("distill.disc_hidden", "must be positive"));
        }
        self.drift.validate()?;
        self.lift.validate()
    }

    /// Time fed to the student for its start, from the realized mask
    /// fraction.
    pub fn student_time(&self, len: usize, schedule: NoiseSchedule) -> f64 {
        schedule.inverse(mask_count(self.r_init, len) as f64 / len as f64)
    }
}

/// A one-shot student draft on a graph.
#[derive(Clone, Debug)]
pub struct Draft {
    pub logits: Var,
    pub probs: Var,
    /// Flat `B * L` sampled tokens.
    pub tokens: Vec<Token>,
}

/// Runs the student once on fresh random starts, one per class entry, and
/// samples a complete draft. Training and inference both go through here.
pub fn student_draft(
    g: &mut Graph,
    student: &DenoiserNet,
    bound: &[Var],
    classes: &[usize],
    cfg: &DistillConfig,
    schedule: NoiseSchedule,
    rng: &mut Rng,
) -> Result<Draft> {
    let shape = student.shape();
    let (l, k) = (shape.len, shape.vocab);
    let mut start = Vec::with_capacity(classes.len() * l);
    for _ in classes {
        start.extend(init_draft(cfg.r_init, l, k, rng)?.into_tokens());
    }
    let t = cfg.student_time(l, schedule);
    let logits = student.forward(g, bound, &start, classes, &vec![t; classes.len()])?;
    let probs = g.softmax(logits, 2)?;
    let p = g.value(probs).data();
    let tokens = p
        .chunks(k)
        .map(|row| match cfg.decode {
            Decode::Sample => rng.categorical(row) as Token,
            Decode::Argmax => argmax(row) as Token,
        })
        .collect();
    Ok(Draft { logits, probs, tokens })
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

/// `sum_v p_iv E_v`: `[B, L, K] -> [B, L, d]`.
pub fn soft_embed(g: &mut Graph, probs: Var, codebook: &Tensor) -> Result<Var> {
    let e = g.constant(codebook.clone());
    g.matmul(probs, e)
}

/// `E[z] + soft - sg(soft)`: exactly the hard rows forward, the soft
/// mixture's Jacobian backward.
pub fn ste_embed(g: &mut Graph, tokens: &[Token], probs: Var, codebook: &Tensor) -> Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    if shape.len() != 3 || shape[0] * shape[1] != tokens.len() {
        return Err(Error::ShapeMismatch {
            op: "ste_embed",
            lhs: shape,
            rhs: vec![tokens.len()],
        });
    }
    let (b, l) = (shape[0], shape[1]);
    let k = codebook.shape()[0];
    let mut idx = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize == k {
            return Err(Error::MaskedSequence { position: i % l });
        }
        if t as usize > k {
            return Err(Error::TokenOutOfRange {
                token: t,
                position: i % l,
                vocab: k,
            });
        }
        idx.push(t as usize);
    }
    let table = g.constant(codebook.clone());
    let hard = g.gather_rows(table, &idx)?;
    let hard = g.reshape(hard, &[b, l, codebook.shape()[1]])?;
    let soft = soft_embed(g, probs, codebook)?;
    let frozen = g.stop_gradient(soft);
    let zero = g.sub(soft, frozen)?;
    g.add(hard, zero)
}

/// Embedding of a draft under the chosen estimator.
pub fn draft_embedding(g: &mut Graph, draft: &Draft, estimator: Estimator, codebook: &Tensor) -> Result<Var> {
    match estimator {
        Estimator::Ste => ste_embed(g, &draft.tokens, draft.probs, codebook),
        Estimator::Soft => soft_embed(g, draft.probs, codebook),
    }
}

/// Re-masks each draft at `r ~ U[r_lo, r_hi]` (or replaces it with a random
/// start at that ratio) and completes it with one teacher refinement at
/// `t = gamma^-1(r)`. `visible` optionally overrides the teacher's view of
/// visible positions with soft embeddings `[B, L, d]`.
#[allow(clippy::too_many_arguments)]
pub fn make_target(
    teacher: &DenoiserNet,
    drafts: &[TokenSeq],
    classes: &[usize],
    cfg: &DistillConfig,
    schedule: NoiseSchedule,
    rng: &mut Rng,
    visible: Option<&Tensor>,
) -> Result<Vec<TokenSeq>> {
    let shape = teacher.shape();
    let (l, k) = (shape.len, shape.vocab);
    let mut states: Vec<MaskState> = Vec::with_capacity(drafts.len());
    let mut times = Vec::with_capacity(drafts.len());
    for z in drafts {
        let r = rng.uniform_in(cfg.r_lo, cfg.r_hi);
        let state = match cfg.source {
            RefinementSource::Student => remask(z, r, teacher.mask_id(), rng)?,
            RefinementSource::Random => init_draft(r, l, k, rng)?,
        };
        states.push(state);
        times.push(schedule.inverse(r));
    }
    let keep: Vec<usize> = states.iter().map(|s| s.mask_set().len()).collect();
    let opts = RefineOptions {
        decode: cfg.decode,
        ..RefineOptions::default()
    };
    let visible = match cfg.source {
        RefinementSource::Student => visible,
        RefinementSource::Random => None,
    };
    refine_batch(teacher, &mut states, classes, &times, &keep, opts, rng, visible)?;
    Ok(states.into_iter().map(MaskState::into_tokens).collect())
}

/// Decoded batch `[B, P]` lifted into the drift space as `[B, T, S, F]`.
pub fn lift_pixels(g: &mut Graph, world: &World, pixels: Var, cfg: &DistillConfig) -> Result<Var> {
    match cfg.drift.space {
        DriftSpace::Feature => world.backbone().lift(g, pixels, &cfg.lift),
        DriftSpace::Pixel => {
            let shape = g.value(pixels).shape().to_vec();
            g.reshape(pixels, &[shape[0], 1, 1, shape[1]])
        }
    }
}

/// Lifted features of complete token sequences, as plain values.
pub fn lift_tokens(world: &World, seqs: &[TokenSeq], classes: &[usize], cfg: &DistillConfig) -> Result<Tensor> {
    let flat: Vec<Token> = seqs.iter().flatten().copied().collect();
    let mut g = Graph::new();
    let e = world.embed(&mut g, &flat)?;
    let px = world.decoder().forward(&mut g, e, classes)?;
    let f = lift_pixels(&mut g, world, px, cfg)?;
    Ok(g.value(f).clone())
}

/// Mean over slots of `|X - Y|`, the last axis being the feature axis.
pub fn slot_distance(x: &Tensor, y: &Tensor) -> f64 {
    let f = *x.shape().last().expect("non-scalar");
    let slots = x.numel() / f;
    let total: f64 = x
        .data()
        .chunks(f)
        .zip(y.data().chunks(f))
        .map(|(a, b)| crate::world::euclid(a, b))
        .sum();
    total / slots as f64
}

/// Unconditional realness MLP on decoded vectors: `P -> H -> 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    params: ParamSet,
}

impl Discriminator {
    pub fn new(pixel_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, 2);
        let mut p = ParamSet::new();
        p.push("w1", normal(&[pixel_dim, hidden], 1.0 / libm::sqrt(pixel_dim as f64), &mut rng));
        p.push("b1", Tensor::zeros(&[hidden]));
        p.push("w2", normal(&[hidden, 1], 1.0 / libm::sqrt(hidden as f64), &mut rng));
        p.push("b2", Tensor::zeros(&[1]));
        Self { params: p }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// `[B, P] -> [B, 1]` logits.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, bound[0])?;
        let h = g.add(h, bound[1])?;
        let h = g.gelu(h);
        let o = g.matmul(h, bound[2])?;
        g.add(o, bound[3])
    }
}

/// Non-saturating losses `(gen, disc)`:
/// `gen = mean softplus(-D(fake))`,
/// `disc = mean [softplus(-D(real)) + softplus(D(sg(fake)))]`.
pub fn gan_losses(
    g: &mut Graph,
    disc: &Discriminator,
    bound: &[Var],
    fake: Var,
    real: &Tensor,
) -> Result<(Var, Var)> {
    let real = g.constant(real.clone());
    let d_fake = disc.forward(g, bound, fake)?;
    let neg = g.scale(d_fake, -1.0);
    let sp = g.softplus(neg);
    let gen = g.mean_all(sp);
    let fake_sg = g.stop_gradient(fake);
    let d_fake_sg = disc.forward(g, bound, fake_sg)?;
    let d_real = disc.forward(g, bound, real)?;
    let neg_real = g.scale(d_real, -1.0);
    let a = g.softplus(neg_real);
    let a = g.mean_all(a);
    let b = g.softplus(d_fake_sg);
    let b = g.mean_all(b);
    let d = g.add(a, b)?;
    Ok((gen, d))
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub drift_loss: f64,
    pub gan_gen: Option<f64>,
    pub gan_disc: Option<f64>,
    pub total: f64,
    pub fp_residual: f64,
}

/// Student, its optimizer, the optional discriminator and a step counter.
/// Step `n` draws only from stream `n` of the configured seed, so this is
/// all that is needed to resume.
#[derive(Clone, Debug)]
pub struct Distiller<'a> {
    world: &'a World,
    teacher: &'a DenoiserNet,
    cfg: DistillConfig,
    schedule: NoiseSchedule,
    student: DenoiserNet,
    opt: RmsScaling,
    disc: Option<(Discriminator, RmsScaling)>,
    step: u64,
}

impl<'a> Distiller<'a> {
    /// Student starts as a copy of the teacher.
    pub fn new(world: &'a World, teacher: &'a DenoiserNet, cfg: DistillConfig, schedule: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        let student = teacher.clone();
        student.reset_evaluations();
        let opt = RmsScaling::new(student.params(), cfg.lr);
        let disc = (cfg.lambda > 0.0).then(|| {
            let d = Discriminator::new(world.config().pixel_dim, cfg.disc_hidden, cfg.seed);
            let o = RmsScaling::new(d.params(), cfg.disc_lr);
            (d, o)
        });
        Ok(Self {
            world,
            teacher,
            cfg,
            schedule,
            student,
            opt,
            disc,
            step: 0,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn student(&self) -> &DenoiserNet {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut DenoiserNet {
        &mut self.student
    }

    pub fn optimizer(&self) -> &RmsScaling {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut RmsScaling {
        &mut self.opt
    }

    pub fn discriminator(&self) -> Option<&(Discriminator, RmsScaling)> {
        self.disc.as_ref()
    }

    pub fn discriminator_mut(&mut self) -> Option<&mut (Discriminator, RmsScaling)> {
        self.disc.as_mut()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// One update of the student (and of the discriminator when enabled).
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let cfg = &self.cfg;
        let world = self.world;
        let mut rng = Rng::stream(cfg.seed, step_stream(PURPOSE_DISTILL, step));
        let classes: Vec<usize> = (0..cfg.batch).map(|_| rng.below(world.config().classes)).collect();
        let codebook = world.codebook().table();

        let mut g = Graph::new();
        let bound = self.student.bind(&mut g, true);
        let draft = student_draft(&mut g, &self.student, &bound, &classes, cfg, self.schedule, &mut rng)?;
        let emb = draft_embedding(&mut g, &draft, cfg.estimator, codebook)?;
        let pixels = world.decoder().forward(&mut g, emb, &classes)?;
        let x = lift_pixels(&mut g, world, pixels, cfg)?;

        let l = world.config().len;
        let drafts: Vec<TokenSeq> = draft.tokens.chunks(l).map(<[Token]>::to_vec).collect();
        let visible = match cfg.estimator {
            Estimator::Soft => {
                let soft = soft_embed(&mut g, draft.probs, codebook)?;
                Some(g.value(soft).clone())
            }
            Estimator::Ste => None,
        };
        let targets = make_target(self.teacher, &drafts, &classes, cfg, self.schedule, &mut rng, visible.as_ref())?;
        let y = lift_tokens(world, &targets, &classes, cfg)?;
        let fp_residual = slot_distance(g.value(x), &y);

        let terms = drift_loss(&mut g, x, &y, &cfg.drift)?;
        let drift_value = g.value(terms.loss).item();
        let mut total = terms.loss;
        let mut gan = None;
        if let Some((disc, _)) = &self.disc {
            let real_seqs: Vec<TokenSeq> = classes
                .iter()
                .map(|&c| world.sample_data(c, 1, &mut rng).map(|mut v| v.remove(0)))
                .collect::<Result<_>>()?;
            let real_flat: Vec<Token> = real_seqs.iter().flatten().copied().collect();
            let real = world.decode_batch(&real_flat, &classes)?;
            let dbound = disc.bind(&mut g, false);
            let (gen, _) = gan_losses(&mut g, disc, &dbound, pixels, &real)?;
            let weighted = g.scale(gen, cfg.lambda);
            total = g.add(total, weighted)?;
            gan = Some((g.value(gen).item(), real, g.value(pixels).clone()));
        }
        g.backward(total)?;
        let total_value = g.value(total).item();
        let grads = collect_grads(&g, &bound);
        self.opt.step(self.student.params_mut(), &grads)?;

        let (gan_gen, gan_disc) = match (gan, self.disc.as_mut()) {
            (Some((gen, real, fake)), Some((disc, dopt))) => {
                let mut dg = Graph::new();
                let dbound = disc.bind(&mut dg, true);
                let fake = dg.constant(fake);
                let (_, dloss) = gan_losses(&mut dg, disc, &dbound, fake, &real)?;
                dg.backward(dloss)?;
                let dval = dg.value(dloss).item();
                let dgrads = collect_grads(&dg, &dbound);
                dopt.step(disc.params_mut(), &dgrads)?;
                (Some(gen), Some(dval))
            }
            _ => (None, None),
        };
        self.step += 1;
        Ok(StepMetrics {
            step,
            drift_loss: drift_value,
            gan_gen,
            gan_disc,
            total: total_value,
            fp_residual,
        })
    }

    /// Runs until `cfg.steps`, reporting each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.step < self.cfg.steps {
            let m = self.step()?;
            on_step(&m);
        }
        Ok(())
    }
}

/// Single-pass generation: one student evaluation per call.
pub fn student_sample(
    student: &DenoiserNet,
    classes: &[usize],
    cfg: &DistillConfig,
    schedule: NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<TokenSeq>> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false);
    let draft = student_draft(&mut g, student, &bound, classes, cfg, schedule, rng)?;
    let l = student.shape().len;
    Ok(draft.tokens.chunks(l).map(<[Token]>::to_vec).collect())
}

/// [`student_sample`] in chunks, chunk `i` on its own stream of `seed`.
pub fn student_sample_chunked(
    student: &DenoiserNet,
    classes: &[usize],
    cfg: &DistillConfig,
    schedule: NoiseSchedule,
    seed: u64,
    chunk: usize,
) -> Result<Vec<TokenSeq>> {
    let mut out = Vec::with_capacity(classes.len());
    for (i, part) in classes.chunks(chunk.max(1)).enumerate() {
        let mut rng = Rng::stream(seed, step_stream(PURPOSE_STUDENT_SAMPLE, i as u64));
        out.extend(student_sample(student, part, cfg, schedule, &mut rng)?);
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

    fn small_cfg() -> DistillConfig {
        DistillConfig {
            r_init: 0.5,
            batch: 4,
            steps: 3,
            lr: 1e-3,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn ste_forward_is_the_hard_lookup() {
        let (w, _) = setup();
        let mut g = Graph::new();
        let logits = g.param(Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 0.37).sin()));
        let probs = g.softmax(logits, 2).unwrap();
        let tokens = [0, 2, 1, 1, 2, 2, 0, 1];
        let e = ste_embed(&mut g, &tokens, probs, w.codebook().table()).unwrap();
        let mut hard = Vec::new();
        for &t in &tokens {
            hard.extend_from_slice(w.codebook().row(t));
        }
        assert_eq!(g.value(e).data(), &hard[..]);
        assert!(matches!(
            ste_embed(&mut g, &[0, 3, 1, 1, 2, 2, 0, 1], probs, w.codebook().table()),
            Err(Error::MaskedSequence { position: 1 })
        ));
    }

    #[test]
    fn lambda_zero_reports_no_gan_terms() {
        let (w, t) = setup();
        let mut d = Distiller::new(&w, &t, small_cfg(), NoiseSchedule::Cosine).unwrap();
        let m = d.step().unwrap();
        assert_eq!((m.gan_gen, m.gan_disc), (None, None));
        assert_eq!(m.total, m.drift_loss);
        assert!(m.fp_residual >= 0.0);
    }

    #[test]
    fn gan_step_updates_discriminator() {
        let (w, t) = setup();
        let cfg = DistillConfig {
            lambda: 0.05,
            ..small_cfg()
        };
        let mut d = Distiller::new(&w, &t, cfg, NoiseSchedule::Cosine).unwrap();
        let before = d.discriminator().unwrap().0.clone();
        let m = d.step().unwrap();
        assert!(m.gan_gen.is_some() && m.gan_disc.is_some());
        assert_ne!(d.discriminator().unwrap().0, before);
    }

    #[test]
    fn zero_learning_rate_leaves_student_unchanged() {
        let (w, t) = setup();
        let cfg = DistillConfig {
            lr: 0.0,
            ..small_cfg()
        };
        let mut d = Distiller::new(&w, &t, cfg, NoiseSchedule::Cosine).unwrap();
        d.step().unwrap();
        assert_eq!(d.student().params(), t.params());
    }

    #[test]
    fn target_keeps_unmasked_tokens() {
        let (w, t) = setup();
        let cfg = DistillConfig {
            r_lo: 0.2,
            r_hi: 0.3,
            ..small_cfg()
        };
        let drafts = vec![vec![0, 1, 2, 0]; 16];
        let classes = vec![1; 16];
        let mut rng = Rng::seeded(4);
        let out = make_target(&t, &drafts, &classes, &cfg, NoiseSchedule::Cosine, &mut rng, None).unwrap();
        for z in &out {
            let changed = z.iter().zip(&drafts[0]).filter(|(a, b)| a != b).count();
            assert!(changed <= 2);
            assert!(z.iter().all(|&v| v < 3));
        }
        let _ = w;
    }

    #[test]
    fn student_sample_is_one_evaluation() {
        let (w, t) = setup();
        t.reset_evaluations();
        let out = student_sample(&t, &[0, 1, 2], &small_cfg(), NoiseSchedule::Cosine, &mut Rng::seeded(0)).unwrap();
        assert_eq!(t.evaluations(), 1);
        assert_eq!(out.len(), 3);
        assert!(out.iter().flatten().all(|&v| v < 3));
        let _ = w;
    }

    #[test]
    fn config_validation() {
        let bad = DistillConfig {
            r_lo: 0.7,
            r_hi: 0.3,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            lambda: -1.0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(DistillConfig::default().validate().is_ok());
    }
}
