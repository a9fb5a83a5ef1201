//! The pipeline subcommands. Each reads its inputs from and writes its
//! outputs to one run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fpd_core::autodiff::Tensor;
use fpd_core::distill::{student_sample_chunked, Distiller, StepMetrics};
use fpd_core::gradcheck::{primitives, run_suite, CheckRow};
use fpd_core::metrics::{fixed_point_residual, frechet_proxy, pooled_rows, tv_from_samples, EvalReport, ENUMERATION_LIMIT};
use fpd_core::nn::{DenoiserNet, NetShape, RmsScaling};
use fpd_core::rng::Rng;
use fpd_core::teacher::{sample_iterative_chunked, train_teacher, SamplerPlan};
use fpd_core::world::{LiftConfig, World, TAPS};
use fpd_core::TokenSeq;

use crate::checkpoint::{write_atomic, Checkpoint, Tensors};
use crate::config::{fingerprint, render, EvalModel, RawConfig, RunConfig, Stage, TvMode};

pub const WORLD_FILE: &str = "world.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const TEACHER_CSV: &str = "teacher.csv";
pub const DISTILL_CSV: &str = "distill.csv";
pub const TEACHER_CSV_HEADER: &str = "step,loss,wall_ms";
pub const DISTILL_CSV_HEADER: &str = "step,drift_loss,gan_gen,gan_disc,fp_residual,wall_ms";

/// Samples are generated in batches of this many sequences.
const SAMPLE_CHUNK: usize = 1000;
/// Stream for the reference data drawn by `eval`.
const REFERENCE_STREAM: u64 = 5 << 40;

/// A resolved configuration bound to an output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub resolved: BTreeMap<&'static str, String>,
    pub out: PathBuf,
}

impl Run {
    pub fn new(raw: &RawConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let cfg = raw.build()?;
        let out = out.into();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            resolved: raw.resolved(),
            out,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn fingerprint(&self, stage: Stage) -> u64 {
        fingerprint(&self.resolved, stage)
    }

    /// Writes `<command>.cfg` next to the outputs.
    fn write_resolved(&self, command: &str) -> Result<()> {
        write_file(&self.path(&format!("{command}.cfg")), render(&self.resolved).as_bytes())
    }

    fn wall(&self, start: &Instant) -> String {
        if self.cfg.wall_clock {
            start.elapsed().as_millis().to_string()
        } else {
            String::new()
        }
    }

    pub fn load_world(&self) -> Result<World> {
        let path = self.path(WORLD_FILE);
        if !path.exists() {
            bail!("no frozen world at {}; run gen-world first", path.display());
        }
        let ck = Checkpoint::load_expecting(&path, self.fingerprint(Stage::World))?;
        Ok(World::from_named_tensors(&self.cfg.world, ck.block("frozen-world")?)?)
    }

    fn net_shape(&self) -> NetShape {
        NetShape::for_world(&self.cfg.world, self.cfg.teacher.hidden)
    }

    pub fn load_teacher(&self, world: &World) -> Result<DenoiserNet> {
        let path = self.path(TEACHER_FILE);
        if !path.exists() {
            bail!("no teacher at {}; run train-teacher first", path.display());
        }
        let ck = Checkpoint::load_expecting(&path, self.fingerprint(Stage::Teacher))?;
        let mut net = DenoiserNet::new(self.net_shape(), world.codebook().table(), self.cfg.teacher.seed)?;
        net.params_mut().load(ck.block("teacher")?)?;
        Ok(net)
    }

    pub fn load_student(&self, world: &World) -> Result<DenoiserNet> {
        let path = self.path(STUDENT_FILE);
        if !path.exists() {
            bail!("no student at {}; run distill first", path.display());
        }
        let ck = Checkpoint::load_expecting(&path, self.fingerprint(Stage::Distill))?;
        let mut net = DenoiserNet::new(self.net_shape(), world.codebook().table(), self.cfg.teacher.seed)?;
        net.params_mut().load(ck.block("student")?)?;
        Ok(net)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    Ok(write_atomic(path, bytes)?)
}

/// Builds the frozen world and writes `world.ckpt`.
pub fn cmd_gen_world(run: &Run) -> Result<PathBuf> {
    let world = World::generate(&run.cfg.world)?;
    let path = run.path(WORLD_FILE);
    Checkpoint::new(run.fingerprint(Stage::World))
        .with_block("frozen-world", world.named_tensors())
        .save(&path)?;
    run.write_resolved("gen-world")?;
    Ok(path)
}

/// Trains the teacher from scratch; writes `teacher.ckpt` and `teacher.csv`.
/// Returns the final loss.
pub fn cmd_train_teacher(run: &Run) -> Result<f64> {
    let world = run.load_world()?;
    let cfg = &run.cfg;
    let mut net = DenoiserNet::new(run.net_shape(), world.codebook().table(), cfg.teacher.seed)?;
    let mut opt = RmsScaling::new(net.params(), cfg.teacher.lr);
    let mut csv = String::from(TEACHER_CSV_HEADER);
    csv.push('\n');
    let start = Instant::now();
    let mut last = f64::NAN;
    train_teacher(&world, &mut net, &mut opt, &cfg.teacher, cfg.schedule, 0, |step, loss| {
        let _ = writeln!(csv, "{step},{loss},{}", run.wall(&start));
        last = loss;
    })?;
    write_file(&run.path(TEACHER_CSV), csv.as_bytes())?;
    Checkpoint::new(run.fingerprint(Stage::Teacher))
        .with_block("teacher", net.params().named())
        .save(&run.path(TEACHER_FILE))?;
    run.write_resolved("train-teacher")?;
    Ok(last)
}

fn optimizer_tensors(prefix: &str, opt: &RmsScaling, names: &[String]) -> Tensors {
    let mut out = vec![(format!("{prefix}.step"), Tensor::scalar(opt.steps_taken() as f64))];
    for (n, t) in names.iter().zip(opt.second_moment()) {
        out.push((format!("{prefix}.{n}"), t.clone()));
    }
    out
}

fn restore_optimizer(prefix: &str, opt: &mut RmsScaling, names: &[String], block: &[(String, Tensor)]) -> Result<()> {
    let find = |name: &str| {
        block
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .with_context(|| format!("distill state lacks {name}"))
    };
    let step = find(&format!("{prefix}.step"))?.item() as u64;
    let moments = names
        .iter()
        .map(|n| find(&format!("{prefix}.{n}")))
        .collect::<Result<Vec<_>>>()?;
    opt.restore(step, moments)?;
    Ok(())
}

fn student_checkpoint(run: &Run, d: &Distiller<'_>) -> Checkpoint {
    let names = d.student().params().names().to_vec();
    let mut state = vec![("step".to_string(), Tensor::scalar(d.step_count() as f64))];
    state.extend(optimizer_tensors("opt", d.optimizer(), &names));
    let mut ck = Checkpoint::new(run.fingerprint(Stage::Distill)).with_block("student", d.student().params().named());
    if let Some((disc, dopt)) = d.discriminator() {
        state.extend(optimizer_tensors("disc_opt", dopt, disc.params().names()));
        ck = ck.with_block("discriminator", disc.params().named());
    }
    ck.with_block("distill-state", state)
}

fn restore_distiller(d: &mut Distiller<'_>, ck: &Checkpoint) -> Result<()> {
    d.student_mut().params_mut().load(ck.block("student")?)?;
    let state = ck.block("distill-state")?;
    let names = d.student().params().names().to_vec();
    restore_optimizer("opt", d.optimizer_mut(), &names, state)?;
    if let Some((disc, dopt)) = d.discriminator_mut() {
        disc.params_mut().load(ck.block("discriminator")?)?;
        let names = disc.params().names().to_vec();
        restore_optimizer("disc_opt", dopt, &names, state)?;
    }
    let step = state
        .iter()
        .find(|(n, _)| n == "step")
        .context("distill state lacks step")?
        .1
        .item();
    d.set_step_count(step as u64);
    Ok(())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Keeps the header and the rows logged before `step`.
fn truncate_csv(text: &str, step: u64) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Distills the student up to `distill.steps`, optionally resuming from
/// `student.ckpt`. Returns every step's metrics logged by this invocation.
pub fn cmd_distill(run: &Run, resume: bool) -> Result<Vec<StepMetrics>> {
    let world = run.load_world()?;
    let teacher = run.load_teacher(&world)?;
    let cfg = &run.cfg;
    let mut d = Distiller::new(&world, &teacher, cfg.distill.clone(), cfg.schedule)?;
    let student_path = run.path(STUDENT_FILE);
    let csv_path = run.path(DISTILL_CSV);
    let mut csv = format!("{DISTILL_CSV_HEADER}\n");
    if resume {
        let ck = Checkpoint::load_expecting(&student_path, run.fingerprint(Stage::Distill))
            .context("resuming distillation")?;
        restore_distiller(&mut d, &ck)?;
        if let Ok(text) = std::fs::read_to_string(&csv_path) {
            csv = truncate_csv(&text, d.step_count());
        }
    }
    run.write_resolved("distill")?;
    let start = Instant::now();
    let mut logged = Vec::new();
    while d.step_count() < cfg.distill.steps {
        let m = d.step()?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            m.step,
            m.drift_loss,
            opt_cell(m.gan_gen),
            opt_cell(m.gan_disc),
            m.fp_residual,
            run.wall(&start)
        );
        logged.push(m);
        let every = cfg.checkpoint_every;
        if every > 0 && d.step_count() % every == 0 && d.step_count() < cfg.distill.steps {
            write_file(&csv_path, csv.as_bytes())?;
            student_checkpoint(run, &d).save(&student_path)?;
        }
    }
    write_file(&csv_path, csv.as_bytes())?;
    student_checkpoint(run, &d).save(&student_path)?;
    Ok(logged)
}

/// Samples the configured model, scores it and writes
/// `eval_<model>.txt` plus `samples_<model>.csv`.
pub fn cmd_eval(run: &Run) -> Result<EvalReport> {
    let world = run.load_world()?;
    let teacher = run.load_teacher(&world)?;
    let cfg = &run.cfg;
    let ev = &cfg.eval;
    let c = cfg.world.classes;
    let enumerable = cfg.world.space_size() <= ENUMERATION_LIMIT as f64;
    if ev.tv == TvMode::Required && !enumerable {
        bail!(
            "eval.tv requires an enumerable sequence space, but K^L = {} exceeds {}; set eval.tv = auto to use the Fréchet proxy",
            cfg.world.space_size(),
            ENUMERATION_LIMIT
        );
    }
    let classes: Vec<usize> = (0..ev.samples * c).map(|i| i % c).collect();
    if ev.dump > classes.len() {
        bail!("eval.dump = {} exceeds the {} generated samples", ev.dump, classes.len());
    }
    let (model_name, samples, fingerprint) = match ev.model {
        EvalModel::Teacher => {
            let plan = SamplerPlan::new(ev.steps, cfg.world.len, cfg.schedule)?;
            let s = sample_iterative_chunked(&teacher, &classes, &plan, run.cfg.refine_options(), ev.seed, SAMPLE_CHUNK)?;
            ("teacher", s, run.fingerprint(Stage::Teacher))
        }
        EvalModel::Student => {
            let student = run.load_student(&world)?;
            let s = student_sample_chunked(&student, &classes, &cfg.distill, cfg.schedule, ev.seed, SAMPLE_CHUNK)?;
            ("student", s, run.fingerprint(Stage::Distill))
        }
    };

    let mut report = EvalReport {
        sample_count: samples.len(),
        seed: ev.seed,
        fingerprint,
        ..EvalReport::default()
    };
    if enumerable && ev.tv != TvMode::Off {
        for k in 0..c {
            let mine: Vec<TokenSeq> = samples
                .iter()
                .zip(&classes)
                .filter(|(_, &cc)| cc == k)
                .map(|(z, _)| z.clone())
                .collect();
            report.tv_by_class.push(tv_from_samples(world.dataset(), &mine, k)?);
        }
    }
    if samples.len() > cfg.world.feature_dim {
        let mut rng = Rng::stream(ev.seed, REFERENCE_STREAM);
        let mut reference = Vec::with_capacity(samples.len());
        for &k in &classes {
            reference.extend(world.sample_data(k, 1, &mut rng)?);
        }
        let a = pooled_features(&world, &samples, &classes)?;
        let b = pooled_features(&world, &reference, &classes)?;
        report.frechet = Some(frechet_proxy(&a, &b)?);
    }
    let scored = match ev.model {
        EvalModel::Teacher => teacher.clone(),
        EvalModel::Student => run.load_student(&world)?,
    };
    if ev.residual_samples > 0 {
        report.fp_residual = Some(fixed_point_residual(
            &world,
            &scored,
            &teacher,
            &cfg.distill,
            cfg.schedule,
            ev.residual_samples,
            ev.seed,
        )?);
    }

    write_file(
        &run.path(&format!("eval_{model_name}.txt")),
        render_report(&report, model_name, ev.steps).as_bytes(),
    )?;
    let mut dump = String::from("class,tokens");
    for p in 0..cfg.world.pixel_dim {
        let _ = write!(dump, ",p{p}");
    }
    dump.push('\n');
    for (z, &k) in samples.iter().zip(&classes).take(ev.dump) {
        let tokens: Vec<String> = z.iter().map(u32::to_string).collect();
        let _ = write!(dump, "{k},{}", tokens.join(" "));
        for v in world.decode(z, k)? {
            let _ = write!(dump, ",{v}");
        }
        dump.push('\n');
    }
    write_file(&run.path(&format!("samples_{model_name}.csv")), dump.as_bytes())?;
    run.write_resolved("eval")?;
    Ok(report)
}

/// Last backbone tap, averaged over cells: one `F`-vector per sample.
fn pooled_features(world: &World, seqs: &[TokenSeq], classes: &[usize]) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<u32> = seqs.iter().flatten().copied().collect();
    let pixels = world.decode_batch(&flat, classes)?;
    let lift = LiftConfig {
        taps: vec![TAPS],
        spatial: false,
    };
    Ok(pooled_rows(&world.lift(&pixels, &lift)?))
}

pub fn render_report(r: &EvalReport, model: &str, steps: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model = {model}");
    if model == "teacher" {
        let _ = writeln!(s, "sampler_steps = {steps}");
    }
    let _ = writeln!(s, "sample_count = {}", r.sample_count);
    let _ = writeln!(s, "seed = {}", r.seed);
    let _ = writeln!(s, "fingerprint = {:016x}", r.fingerprint);
    for (k, tv) in r.tv_by_class.iter().enumerate() {
        let _ = writeln!(s, "tv.class{k} = {tv}");
    }
    if let Some(m) = r.tv_mean() {
        let _ = writeln!(s, "tv_mean = {m}");
    }
    if let Some(f) = r.frechet {
        let _ = writeln!(s, "frechet = {}", f.value);
        let _ = writeln!(s, "frechet_regularized = {}", f.regularized);
    }
    if let Some(fp) = r.fp_residual {
        let _ = writeln!(s, "fp_residual = {fp}");
    }
    s
}

/// Runs the finite-difference suite and prints one row per check.
/// `fault` names an operator whose backward pass is corrupted.
pub fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> Result<(Vec<CheckRow>, String)> {
    let fault = match fault {
        None => None,
        Some(name) => Some(
            primitives()
                .iter()
                .map(|p| p.name())
                .find(|&n| n == name)
                .with_context(|| format!("unknown operator {name:?}"))?,
        ),
    };
    let rows = run_suite(seed, fault)?;
    let mut table = format!("{:<16} {:>6} {:>12} {:>10}  status\n", "check", "cases", "max_error", "tolerance");
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<16} {:>6} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.cases,
            r.max_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok((rows, table))
}

#[cfg(test)]
mod tests {
    use super::truncate_csv;

    #[test]
    fn truncation_keeps_earlier_rows() {
        let text = "step,x\n0,a\n1,b\n2,c\n";
        assert_eq!(truncate_csv(text, 2), "step,x\n0,a\n1,b\n");
        assert_eq!(truncate_csv(text, 0), "step,x\n");
    }
}
