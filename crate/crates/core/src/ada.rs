//! Video adversarial data augmentation on the relational feature pyramid.
//!
//! Adversarial clips are produced by raw gradient ascent on
//! `ℓ(h(R), y₀) − γ · c(R, R₀)` with respect to the sampled `[M, h, w, C]`
//! frames, where `R` is the feature at the selected pyramid level and `R₀`
//! its value on the unperturbed clip. They are consumed by a minimization
//! step inside the same [`train_step`] and then dropped.

use std::cell::Cell;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApnError, Result};
use crate::optim::{GradAccumulator, Sgd};
use crate::pyramid::{ApnModel, Mode, PyramidVars, VideoClip};
use crate::rng::rng_from_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feature anchor used to generate adversarial examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdaLevel {
    /// Global within-relation feature `R_global` from level I.
    #[serde(rename = "global")]
    Global,
    /// Cross-relation feature `R_II`.
    #[serde(rename = "ii")]
    II,
    /// Cross-relation sum `R_III`.
    #[serde(rename = "iii")]
    III,
}

impl fmt::Display for AdaLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaLevel::Global => "global",
            AdaLevel::II => "ii",
            AdaLevel::III => "iii",
        })
    }
}

impl AdaLevel {
    pub fn feature(self, vars: &PyramidVars) -> Var {
        match self {
            AdaLevel::Global => vars.r1_global,
            AdaLevel::II => vars.r2,
            AdaLevel::III => vars.r3,
        }
    }

    /// Logits trained on in the minimization step for this level's clips.
    /// Level II trains `h(R_II)`; the other anchors train the final
    /// prediction `h(R_III)`.
    fn min_feature(self, vars: &PyramidVars) -> Var {
        match self {
            AdaLevel::II => vars.r2,
            AdaLevel::III | AdaLevel::Global => vars.r3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaConfig {
    /// Ascent step size `η`.
    pub eta: f64,
    /// Transport penalty `γ`.
    pub gamma: f64,
    /// Maximization iterations `T_max`.
    pub t_max: usize,
    /// Anchors that generate examples, in minimization order. Empty means
    /// plain empirical risk minimization.
    pub levels: Vec<AdaLevel>,
    pub clamp_pixels: bool,
}

impl Default for AdaConfig {
    fn default() -> Self {
        AdaConfig { eta: 1.0, gamma: 0.1, t_max: 5, levels: vec![AdaLevel::II, AdaLevel::III], clamp_pixels: false }
    }
}

impl AdaConfig {
    pub fn erm() -> Self {
        AdaConfig { eta: 0.0, t_max: 0, levels: Vec::new(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !(self.gamma >= 0.0) {
            return Err(ApnError::Config(format!("eta and gamma must be >= 0, got {} / {}", self.eta, self.gamma)));
        }
        let mut seen = self.levels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.levels.len() {
            return Err(ApnError::Config(format!("duplicate ADA levels in {:?}", self.levels)));
        }
        Ok(())
    }
}

/// `½ · mean((r − r₀)²)` for matching labels; infinite (an error) otherwise.
pub fn transport_cost(tape: &Tape, r: Var, r0: Var, y: usize, y0: usize) -> Result<Var> {
    if y != y0 {
        return Err(ApnError::LabelMismatch { y, y0 });
    }
    tape.half_sq_dist(r, r0, true)
}

pub fn transport_cost_value(r: &Tensor, r0: &Tensor, y: usize, y0: usize) -> Result<f64> {
    let tape = Tape::new(r.dtype());
    let a = tape.constant(r.clone())?;
    let b = tape.constant(r0.to_dtype(r.dtype()))?;
    let c = transport_cost(&tape, a, b, y, y0)?;
    tape.scalar_value(c)
}

/// Source features that anchor the transport cost of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub r1_global: Tensor,
    pub r2: Tensor,
    pub r3: Tensor,
}

impl Anchors {
    pub fn get(&self, level: AdaLevel) -> &Tensor {
        match level {
            AdaLevel::Global => &self.r1_global,
            AdaLevel::II => &self.r2,
            AdaLevel::III => &self.r3,
        }
    }
}

/// Eval-mode pyramid features of prepared frames under the current parameters.
pub fn compute_anchors(model: &ApnModel, frames: &Tensor) -> Result<Anchors> {
    let tape = Tape::new(model.dtype());
    let bound = model.params.bind(&tape, false)?;
    let x = tape.constant(frames.to_dtype(model.dtype()))?;
    let vars = model.forward_frames(&tape, x, &bound, Mode::Eval, &mut rng_from_seed(0))?;
    let anchors = Anchors {
        r1_global: tape.value(vars.r1_global).clone(),
        r2: tape.value(vars.r2).clone(),
        r3: tape.value(vars.r3).clone(),
    };
    Ok(anchors)
}

/// Surrogate value and its parts at one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateValue {
    pub objective: f64,
    pub loss: f64,
    pub cost: f64,
}

/// `ℓ(h(R_level(x)), y₀) − γ c(R_level(x), anchor)` with parameters frozen
/// and dropout off. Returns the value and, when `with_grad`, `∇_x`.
pub fn surrogate_objective(
    model: &ApnModel,
    frames: &Tensor,
    y0: usize,
    anchor: &Tensor,
    level: AdaLevel,
    gamma: f64,
    with_grad: bool,
) -> Result<(SurrogateValue, Option<Tensor>)> {
    let tape = Tape::new(model.dtype());
    let bound = model.params.bind(&tape, false)?;
    let x = if with_grad { tape.input(frames.clone())? } else { tape.constant(frames.clone())? };
    let vars = model.forward_frames(&tape, x, &bound, Mode::Eval, &mut rng_from_seed(0))?;
    let feature = level.feature(&vars);
    let logits = model.classify(&tape, feature, &bound)?;
    let loss = tape.cross_entropy(logits, y0)?;
    let a = tape.constant(anchor.to_dtype(model.dtype()))?;
    let cost = transport_cost(&tape, feature, a, y0, y0)?;
    let obj = tape.sub(loss, tape.scale(cost, gamma)?)?;
    let value = SurrogateValue {
        objective: tape.scalar_value(obj)?,
        loss: tape.scalar_value(loss)?,
        cost: tape.scalar_value(cost)?,
    };
    let grad = if with_grad {
        let g = tape.backward(obj)?;
        Some(g.get(x).cloned().unwrap_or(Tensor::zeros(frames.dims(), model.dtype())?))
    } else {
        None
    };
    Ok((value, grad))
}

thread_local! {
    static LIVE_ADVERSARIAL: Cell<usize> = const { Cell::new(0) };
}

/// Number of adversarial clips currently alive on this thread.
pub fn live_adversarial_clips() -> usize {
    LIVE_ADVERSARIAL.with(|c| c.get())
}

/// A perturbed clip. Construction and drop are counted so tests can assert
/// that nothing outlives the step that produced it.
#[derive(Debug)]
pub struct AdversarialClip {
    pub level: AdaLevel,
    pub frames: Tensor,
    pub label: usize,
    pub anchor: Tensor,
    /// Surrogate objective at iterates `0..=T_max`.
    pub objective_trace: Vec<f64>,
    /// Transport cost of the final iterate.
    pub final_cost: f64,
}

impl AdversarialClip {
    fn new(level: AdaLevel, frames: Tensor, label: usize, anchor: Tensor) -> Self {
        LIVE_ADVERSARIAL.with(|c| c.set(c.get() + 1));
        AdversarialClip { level, frames, label, anchor, objective_trace: Vec::new(), final_cost: 0.0 }
    }
}

impl Drop for AdversarialClip {
    fn drop(&mut self) {
        LIVE_ADVERSARIAL.with(|c| c.set(c.get() - 1));
    }
}

/// Training-step phases, reported to an instrumentation hook in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SourceMin,
    Max { level: AdaLevel, iteration: usize },
    AdvMin { level: AdaLevel },
}

/// One source clip entering the maximization phase.
#[derive(Debug, Clone)]
pub struct MaxInput<'a> {
    pub frames: &'a Tensor,
    pub label: usize,
    pub anchors: &'a Anchors,
}

/// Run `T_max` ascent iterations for every item and level. Iteration `t`
/// updates all items at one level before moving to the next level, and
/// `hook` sees one [`Phase::Max`] per (iteration, level).
pub fn maximize_batch(
    model: &ApnModel,
    items: &[MaxInput<'_>],
    cfg: &AdaConfig,
    hook: &mut dyn FnMut(Phase),
) -> Result<Vec<Vec<AdversarialClip>>> {
    let mut out: Vec<Vec<AdversarialClip>> = items
        .iter()
        .map(|it| {
            cfg.levels
                .iter()
                .map(|&l| AdversarialClip::new(l, it.frames.clone(), it.label, it.anchors.get(l).clone()))
                .collect()
        })
        .collect();
    for t in 1..=cfg.t_max {
        for (li, &level) in cfg.levels.iter().enumerate() {
            for adv in out.iter_mut() {
                let a = &mut adv[li];
                let (v, g) = surrogate_objective(model, &a.frames, a.label, &a.anchor, level, cfg.gamma, true)?;
                a.objective_trace.push(v.objective);
                let g = g.expect("gradient requested");
                a.frames.axpy(cfg.eta, &g)?;
                if cfg.clamp_pixels {
                    a.frames.data_mut().iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
                }
            }
            hook(Phase::Max { level, iteration: t });
        }
    }
    for adv in out.iter_mut().flatten() {
        let (v, _) = surrogate_objective(model, &adv.frames, adv.label, &adv.anchor, adv.level, cfg.gamma, false)?;
        adv.objective_trace.push(v.objective);
        adv.final_cost = v.cost;
    }
    Ok(out)
}

/// Maximization phase for a single clip.
pub fn maximize_phase(
    model: &ApnModel,
    frames: &Tensor,
    label: usize,
    anchors: &Anchors,
    cfg: &AdaConfig,
) -> Result<Vec<AdversarialClip>> {
    let mut none = |_: Phase| {};
    let mut v = maximize_batch(model, &[MaxInput { frames, label, anchors }], cfg, &mut none)?;
    Ok(v.pop().unwrap())
}

/// Per-step averages reported by [`train_step`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub source_loss: f64,
    pub source_correct: usize,
    pub items: usize,
    /// `(level, mean classification loss on its adversarial clips)`.
    pub adv_loss: Vec<(AdaLevel, f64)>,
    /// `(level, mean transport cost of its final adversarial clips)`.
    pub adv_cost: Vec<(AdaLevel, f64)>,
}

impl StepMetrics {
    pub fn adv_loss(&self, level: AdaLevel) -> Option<f64> {
        self.adv_loss.iter().find(|(l, _)| *l == level).map(|(_, v)| *v)
    }

    pub fn adv_cost(&self, level: AdaLevel) -> Option<f64> {
        self.adv_cost.iter().find(|(l, _)| *l == level).map(|(_, v)| *v)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

/// One minimax training step over a minibatch:
///
/// 1. forward the source clips and capture their anchors;
/// 2. SGD on the source cross-entropy of `h(R_III)`;
/// 3. with parameters frozen, `T_max` ascent iterations per level;
/// 4. one SGD step per level on its adversarial clips, in `cfg.levels` order.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut ApnModel,
    sgd: &mut Sgd,
    batch: &[VideoClip],
    cfg: &AdaConfig,
    epoch: usize,
    rng: &mut R,
    hook: &mut dyn FnMut(Phase),
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(ApnError::Usage("train_step on an empty batch".into()));
    }
    cfg.validate()?;
    let mut metrics = StepMetrics { items: batch.len(), ..StepMetrics::default() };
    let mut acc = GradAccumulator::new(model.params.len());
    let mut sources = Vec::with_capacity(batch.len());
    for clip in batch {
        let tape = Tape::new(model.dtype());
        let bound = model.params.bind(&tape, true)?;
        let sampled = model.prepare(clip, Mode::Train, rng)?;
        let x = tape.constant(sampled.frames.clone())?;
        let vars = model.forward_frames(&tape, x, &bound, Mode::Train, rng)?;
        let loss = tape.cross_entropy(vars.logits, clip.category)?;
        metrics.source_loss += tape.scalar_value(loss)?;
        if argmax(tape.value(vars.logits).data()) == clip.category {
            metrics.source_correct += 1;
        }
        acc.add(&tape.backward(loss)?)?;
        if !cfg.levels.is_empty() {
            let anchors = compute_anchors(model, &sampled.frames)?;
            sources.push((sampled.frames, clip.category, anchors));
        }
    }
    metrics.source_loss /= batch.len() as f64;
    sgd.step(&mut model.params, &acc, epoch)?;
    hook(Phase::SourceMin);

    if cfg.levels.is_empty() {
        return Ok(metrics);
    }

    let items: Vec<MaxInput<'_>> =
        sources.iter().map(|(f, y, a)| MaxInput { frames: f, label: *y, anchors: a }).collect();
    let adversarial = maximize_batch(model, &items, cfg, hook)?;

    for (li, &level) in cfg.levels.iter().enumerate() {
        let mut acc = GradAccumulator::new(model.params.len());
        let mut loss_sum = 0.0;
        let mut cost_sum = 0.0;
        for per_item in &adversarial {
            let adv = &per_item[li];
            let tape = Tape::new(model.dtype());
            let bound = model.params.bind(&tape, true)?;
            let x = tape.constant(adv.frames.clone())?;
            let vars = model.forward_frames(&tape, x, &bound, Mode::Train, rng)?;
            let logits = model.classify(&tape, level.min_feature(&vars), &bound)?;
            let loss = tape.cross_entropy(logits, adv.label)?;
            loss_sum += tape.scalar_value(loss)?;
            cost_sum += adv.final_cost;
            acc.add(&tape.backward(loss)?)?;
        }
        sgd.step(&mut model.params, &acc, epoch)?;
        hook(Phase::AdvMin { level });
        let n = adversarial.len() as f64;
        metrics.adv_loss.push((level, loss_sum / n));
        metrics.adv_cost.push((level, cost_sum / n));
    }
    Ok(metrics)
}

/// Average of per-model softmax outputs (eval-mode, centre sampling and crop).
pub fn ensemble_predict(models: &[ApnModel], clip: &VideoClip) -> Result<Vec<f64>> {
    let Some(first) = models.first() else {
        return Err(ApnError::Usage("ensemble_predict needs at least one model".into()));
    };
    let k = first.config.num_classes;
    let mut avg = vec![0.0; k];
    for m in models {
        if m.config.num_classes != k || m.config.segments != first.config.segments {
            return Err(ApnError::Usage("ensemble members disagree on configuration".into()));
        }
        for (a, p) in avg.iter_mut().zip(m.predict_proba(clip)?) {
            *a += p;
        }
    }
    let n = models.len() as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    Ok(avg)
}
