//! Central finite-difference checks of every gradient the trainer uses.
//!
//! Each case is a scalar function of a few leaf tensors. The analytic
//! gradient comes from the tape at the case's dtype; the reference is a
//! central difference evaluated in f64. Coordinates whose difference
//! quotient changes between step `h` and `h/2` straddle a ReLU kink and are
//! resampled rather than compared.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ada::{transport_cost, AdaLevel};
use crate::attention::{attention_block, multi_head_attention, AttentionBlockParams, BlockMode, MhaParams};
use crate::error::{ApnError, Result};
use crate::params::{Bound, ParamSet};
use crate::pyramid::{ApnModel, Mode, PyramidConfig};
use crate::rng::{rng_from_seed, ApnRng};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

pub const F64_TOLERANCE: f64 = 1e-6;
pub const F32_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;
const COORDS_PER_LEAF: usize = 6;
const MAX_RESAMPLES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Kernels,
    Attention,
    Pyramid,
    Ada,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Kernels, Scope::Attention, Scope::Pyramid, Scope::Ada];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Kernels => "kernels",
            Scope::Attention => "attention",
            Scope::Pyramid => "pyramid",
            Scope::Ada => "ada",
        }
    }
}

impl FromStr for Scope {
    type Err = ApnError;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ApnError::Config(format!("unknown gradcheck scope `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub scope: Scope,
    pub name: String,
    pub dtype: DType,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_err(&self, scope: Scope, dtype: DType) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.scope == scope && e.dtype == dtype)
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn extend(&mut self, other: GradReport) {
        self.entries.extend(other.entries);
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<4} {:<9} {:<3} {:<44} max_rel_err={:.3e} tol={:.0e} coords={}",
                if e.passed { "ok" } else { "FAIL" },
                e.scope.name(),
                match e.dtype {
                    DType::F32 => "f32",
                    DType::F64 => "f64",
                },
                e.name,
                e.max_rel_err,
                e.tolerance,
                e.coords
            )?;
        }
        Ok(())
    }
}

/// Scalar function of leaf variables recorded on the given tape.
pub type CaseFn<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a;

fn eval_f64(f: &CaseFn<'_>, leaves: &[Tensor]) -> Result<f64> {
    let tape = Tape::new(DType::F64);
    let vars = leaves.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    tape.scalar_value(out)
}

/// Analytic gradients of `f` at `leaves` on a `dtype` tape. Leaves listed in
/// `wrt` are inputs; the rest enter as constants.
pub fn analytic_grads(f: &CaseFn<'_>, leaves: &[Tensor], wrt: &[usize], dtype: DType) -> Result<Vec<Tensor>> {
    let tape = Tape::new(dtype);
    let vars = leaves
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = t.to_dtype(dtype);
            if wrt.contains(&i) {
                tape.input(t)
            } else {
                tape.constant(t)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let g = tape.backward(out)?;
    wrt.iter()
        .map(|&i| match g.get(vars[i]) {
            Some(t) => Ok(t.clone()),
            None => Tensor::zeros(leaves[i].dims(), dtype),
        })
        .collect()
}

fn central(f: &CaseFn<'_>, leaves: &mut [Tensor], leaf: usize, j: usize, h: f64) -> Result<f64> {
    let x0 = leaves[leaf].data()[j];
    leaves[leaf].data_mut()[j] = x0 + h;
    let up = eval_f64(f, leaves)?;
    leaves[leaf].data_mut()[j] = x0 - h;
    let down = eval_f64(f, leaves)?;
    leaves[leaf].data_mut()[j] = x0;
    Ok((up - down) / (2.0 * h))
}

/// Compare analytic and numerical gradients on sampled coordinates.
/// `corrupt` lets a test tamper with the analytic gradients first.
#[allow(clippy::too_many_arguments)]
pub fn check_case(
    scope: Scope,
    name: &str,
    leaves: &[Tensor],
    wrt: &[usize],
    dtype: DType,
    f: &CaseFn<'_>,
    corrupt: Option<&dyn Fn(&mut [Tensor])>,
    rng: &mut ApnRng,
) -> Result<GradEntry> {
    let mut base: Vec<Tensor> = leaves.iter().map(|t| t.to_dtype(DType::F64)).collect();
    if dtype == DType::F32 {
        // Compare both paths at the same (f32-representable) point.
        base = base.iter().map(|t| t.to_dtype(DType::F32).to_dtype(DType::F64)).collect();
    }
    let mut analytic = analytic_grads(f, &base, wrt, dtype)?;
    if let Some(c) = corrupt {
        c(&mut analytic);
    }
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    let mut coords = 0;
    for (k, &leaf) in wrt.iter().enumerate() {
        let len = base[leaf].len();
        let want = COORDS_PER_LEAF.max(24 / wrt.len()).min(len);
        let mut taken = Vec::with_capacity(want);
        let mut attempts = 0;
        while taken.len() < want && attempts < want + MAX_RESAMPLES {
            attempts += 1;
            let exhaustive = len <= want;
            let j = if exhaustive { taken.len() } else { rng.random_range(0..len) };
            if !exhaustive && taken.contains(&j) {
                continue;
            }
            let n_h = central(f, &mut base, leaf, j, STEP)?;
            let n_h2 = central(f, &mut base, leaf, j, STEP / 2.0)?;
            if (n_h - n_h2).abs() > 1e-4 * n_h.abs().max(n_h2.abs()) + 1e-9 {
                if exhaustive {
                    taken.push(j);
                }
                continue;
            }
            taken.push(j);
            let a = analytic[k].data()[j];
            diff2 += (a - n_h).powi(2);
            a2 += a * a;
            n2 += n_h * n_h;
            coords += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
    let tolerance = match dtype {
        DType::F64 => F64_TOLERANCE,
        DType::F32 => F32_TOLERANCE,
    };
    Ok(GradEntry {
        scope,
        name: name.to_string(),
        dtype,
        max_rel_err: rel,
        tolerance,
        coords,
        passed: coords > 0 && rel <= tolerance,
    })
}

/// `Σ out ⊙ W` with a fixed random `W`, turning any output into a scalar
/// whose gradient exercises every output element.
fn project(tape: &Tape, out: Var, seed: u64) -> Result<Var> {
    let dims = tape.dims(out);
    let w = Tensor::randn(&dims, 1.0, tape.dtype(), &mut rng_from_seed(seed))?;
    let w = tape.constant(w)?;
    tape.sum(tape.mul(out, w)?)
}

fn randn(dims: &[usize], rng: &mut ApnRng) -> Tensor {
    Tensor::randn(dims, 1.0, DType::F64, rng).expect("valid dims")
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

struct Runner {
    report: GradReport,
    dtypes: Vec<DType>,
    rng: ApnRng,
}

impl Runner {
    fn run(&mut self, scope: Scope, name: &str, leaves: &[Tensor], wrt: &[usize], f: &CaseFn<'_>) -> Result<()> {
        for &dt in &self.dtypes.clone() {
            let e = check_case(scope, name, leaves, wrt, dt, f, None, &mut self.rng)?;
            self.report.entries.push(e);
        }
        Ok(())
    }
}

fn kernels(r: &mut Runner) -> Result<()> {
    let s = Scope::Kernels;
    let mut g = rng_from_seed(11);
    let a = randn(&[3, 4], &mut g);
    let b = randn(&[3, 4], &mut g);
    r.run(s, "add", &[a.clone(), b.clone()], &[0, 1], &|t, v| project(t, t.add(v[0], v[1])?, 1))?;
    r.run(s, "sub", &[a.clone(), b.clone()], &[0, 1], &|t, v| project(t, t.sub(v[0], v[1])?, 2))?;
    r.run(s, "mul", &[a.clone(), b.clone()], &[0, 1], &|t, v| project(t, t.mul(v[0], v[1])?, 3))?;
    r.run(s, "add_bias", &[a.clone(), randn(&[4], &mut g)], &[0, 1], &|t, v| {
        project(t, t.add_bias(v[0], v[1])?, 4)
    })?;
    r.run(s, "scale", &[a.clone()], &[0], &|t, v| project(t, t.scale(v[0], -1.7)?, 5))?;
    r.run(s, "matmul", &[a.clone(), randn(&[4, 5], &mut g)], &[0, 1], &|t, v| {
        project(t, t.matmul(v[0], v[1])?, 6)
    })?;
    r.run(s, "matmul_shared_rhs", &[randn(&[2, 3, 4], &mut g), randn(&[4, 2], &mut g)], &[0, 1], &|t, v| {
        project(t, t.matmul(v[0], v[1])?, 7)
    })?;
    r.run(s, "matmul_batched", &[randn(&[2, 3, 4], &mut g), randn(&[2, 4, 2], &mut g)], &[0, 1], &|t, v| {
        project(t, t.matmul(v[0], v[1])?, 8)
    })?;
    r.run(s, "transpose", &[a.clone()], &[0], &|t, v| project(t, t.transpose(v[0])?, 9))?;
    r.run(s, "relu", &[a.clone()], &[0], &|t, v| project(t, t.relu(v[0])?, 10))?;
    r.run(s, "dropout", &[a.clone()], &[0], &|t, v| {
        project(t, t.dropout(v[0], 0.5, true, &mut rng_from_seed(3))?, 11)
    })?;
    r.run(s, "concat_axis0", &[a.clone(), randn(&[2, 4], &mut g)], &[0, 1], &|t, v| {
        project(t, t.concat(&[v[0], v[1]], 0)?, 12)
    })?;
    r.run(s, "concat_axis1", &[a.clone(), randn(&[3, 2], &mut g)], &[0, 1], &|t, v| {
        project(t, t.concat(&[v[0], v[1]], 1)?, 13)
    })?;
    r.run(s, "slice", &[a.clone()], &[0], &|t, v| project(t, t.slice(v[0], 1, 1, 2)?, 14))?;
    r.run(s, "mean_axis0", &[a.clone()], &[0], &|t, v| project(t, t.mean_axis(v[0], 0)?, 15))?;
    r.run(s, "mean_axis1", &[a.clone()], &[0], &|t, v| project(t, t.mean_axis(v[0], 1)?, 16))?;
    r.run(s, "sum", &[a.clone()], &[0], &|t, v| t.sum(v[0]))?;
    r.run(s, "reshape", &[a.clone()], &[0], &|t, v| project(t, t.reshape(v[0], &[2, 6])?, 17))?;
    r.run(s, "softmax_lastdim", &[a.clone()], &[0], &|t, v| project(t, t.softmax_lastdim(v[0])?, 18))?;
    let gain = Tensor::from_f64(&[4], vec![1.2, 0.7, -0.4, 1.0])?;
    let bias = randn(&[4], &mut g);
    r.run(s, "layer_norm", &[a.clone(), gain, bias], &[0, 1, 2], &|t, v| {
        project(t, t.layer_norm(v[0], v[1], v[2], 1e-5)?, 19)
    })?;
    r.run(s, "cross_entropy", &[randn(&[6], &mut g)], &[0], &|t, v| t.cross_entropy(v[0], 4))?;
    r.run(s, "half_sq_dist", &[a.clone(), b.clone()], &[0, 1], &|t, v| t.half_sq_dist(v[0], v[1], true))?;
    r.run(s, "half_sq_dist_sum", &[a.clone(), b.clone()], &[0, 1], &|t, v| t.half_sq_dist(v[0], v[1], false))?;
    r.run(s, "gather", &[a.clone()], &[0], &|t, v| project(t, t.gather(v[0], vec![0, 5, 5, 11, 2, 7], &[2, 3])?, 20))?;
    r.run(s, "embedding", &[randn(&[5, 3], &mut g)], &[0], &|t, v| project(t, t.embedding(v[0], &[4, 0, 4])?, 21))?;
    Ok(())
}

/// Leaves `[inputs..., params...]` and a bound built from the tail.
fn split_params<'a>(v: &'a [Var], n_inputs: usize) -> (&'a [Var], Bound) {
    (&v[..n_inputs], Bound::from_vars(v[n_inputs..].to_vec()))
}

fn param_leaves(p: &ParamSet, rng: &mut ApnRng) -> Vec<Tensor> {
    // Perturb every tensor so biases and norm gains are not at their
    // special initial values.
    p.iter()
        .map(|(_, t)| {
            let noise = Tensor::randn(t.dims(), 0.1, DType::F64, rng).expect("valid dims");
            t.to_dtype(DType::F64).add(&noise).expect("same dims")
        })
        .collect()
}

fn attention(r: &mut Runner) -> Result<()> {
    let s = Scope::Attention;
    for (d, h) in [(8, 1), (8, 2), (16, 4)] {
        let mut g = rng_from_seed(100 + d as u64 + h as u64);
        let mut ps = ParamSet::new();
        let mha = MhaParams::init(&mut ps, "mha", d, h, DType::F64, &mut g)?;
        let mut leaves = vec![randn(&[3, d], &mut g), randn(&[4, d], &mut g), randn(&[4, d], &mut g)];
        leaves.extend(param_leaves(&ps, &mut g));
        let f = |t: &Tape, v: &[Var]| {
            let (x, bound) = split_params(v, 3);
            project(t, multi_head_attention(t, x[0], x[1], x[2], &mha, &bound)?, 31)
        };
        r.run(s, &format!("mha_d{d}_h{h}"), &leaves, &all(leaves.len()), &f)?;

        let mut ps = ParamSet::new();
        let blk = AttentionBlockParams::init(&mut ps, "blk", d, h, 2, DType::F64, &mut g)?;
        let mut leaves = vec![randn(&[3, d], &mut g), randn(&[2, d], &mut g)];
        leaves.extend(param_leaves(&ps, &mut g));
        let f = |t: &Tape, v: &[Var]| {
            let (x, bound) = split_params(v, 2);
            let out = attention_block(t, x[0], x[1], &blk, &bound, BlockMode::EVAL, &mut rng_from_seed(0))?;
            project(t, out, 32)
        };
        r.run(s, &format!("block_d{d}_h{h}"), &leaves, &all(leaves.len()), &f)?;
    }
    Ok(())
}

/// Small pyramid used by the pyramid and ADA scopes.
pub fn check_model_config(segments: usize, feature_dim: usize) -> PyramidConfig {
    PyramidConfig {
        segments,
        feature_dim,
        head_count: 2,
        ff_mult: 2,
        num_classes: 4,
        crop_height: 8,
        crop_width: 8,
        channels: 3,
        patch_size: 4,
        patch_channels: 4,
        encoder_hidden: 12,
        feature_dropout: 0.5,
        attention_dropout: 0.1,
        positional_embedding: true,
        dtype: DType::F64,
    }
}

/// Checked `(M, D)` grid.
pub const PYRAMID_GRID: [(usize, usize); 4] = [(3, 8), (3, 16), (5, 8), (5, 16)];

fn pyramid(r: &mut Runner) -> Result<()> {
    let s = Scope::Pyramid;
    for (m, d) in PYRAMID_GRID {
        let cfg = check_model_config(m, d);
        let mut g = rng_from_seed(200 + 10 * m as u64 + d as u64);
        let model = ApnModel::new(cfg.clone(), &mut g)?;
        let frames = Tensor::uniform(&[m, 8, 8, 3], 0.0, 1.0, DType::F64, &mut g)?;
        let mut leaves = vec![frames];
        leaves.extend(param_leaves(&model.params, &mut g));
        let n = leaves.len();
        let label = 2;
        // Training-mode forward; the rng is reseeded per evaluation so the
        // dropout masks and snippet positions are fixed.
        let loss = |t: &Tape, v: &[Var]| {
            let (x, bound) = split_params(v, 1);
            let vars = model.forward_frames(t, x[0], &bound, Mode::Train, &mut rng_from_seed(5))?;
            t.cross_entropy(vars.logits, label)
        };
        r.run(s, &format!("theta_M{m}_D{d}"), &leaves, &(1..n).collect::<Vec<_>>(), &loss)?;
        r.run(s, &format!("x_logits_M{m}_D{d}"), &leaves, &[0], &loss)?;
        let level = |which: usize| {
            let model = &model;
            move |t: &Tape, v: &[Var]| {
                let (x, bound) = split_params(v, 1);
                let vars = model.forward_frames(t, x[0], &bound, Mode::Eval, &mut rng_from_seed(5))?;
                let out = match which {
                    0 => vars.r1_global,
                    1 => t.concat(&vars.r1_locals, 0)?,
                    2 => vars.r2,
                    _ => vars.r3,
                };
                project(t, out, 40 + which as u64)
            }
        };
        for (which, tag) in ["r1_global", "r1_locals", "r2", "r3"].iter().enumerate() {
            r.run(s, &format!("x_{tag}_M{m}_D{d}"), &leaves, &[0], &level(which))?;
        }
    }
    Ok(())
}

fn ada(r: &mut Runner) -> Result<()> {
    let s = Scope::Ada;
    let mut g = rng_from_seed(300);
    let (a, b) = (randn(&[3, 8], &mut g), randn(&[3, 8], &mut g));
    r.run(s, "transport_cost", &[a, b], &[0, 1], &|t, v| transport_cost(t, v[0], v[1], 1, 1))?;
    for (m, d) in PYRAMID_GRID {
        let cfg = check_model_config(m, d);
        let mut g = rng_from_seed(400 + 10 * m as u64 + d as u64);
        let model = ApnModel::new(cfg.clone(), &mut g)?;
        let frames = Tensor::uniform(&[m, 8, 8, 3], 0.0, 1.0, DType::F64, &mut g)?;
        let anchor_frames = Tensor::uniform(&[m, 8, 8, 3], 0.0, 1.0, DType::F64, &mut g)?;
        let anchors = crate::ada::compute_anchors(&model, &anchor_frames)?;
        for level in [AdaLevel::II, AdaLevel::III, AdaLevel::Global] {
            let anchor = anchors.get(level).clone();
            let gamma = 0.5;
            let f = |t: &Tape, v: &[Var]| {
                let bound = model.params.bind(t, false)?;
                let vars = model.forward_frames(t, v[0], &bound, Mode::Eval, &mut rng_from_seed(0))?;
                let feature = level.feature(&vars);
                let logits = model.classify(t, feature, &bound)?;
                let loss = t.cross_entropy(logits, 1)?;
                let a = t.constant(anchor.to_dtype(t.dtype()))?;
                let cost = transport_cost(t, feature, a, 1, 1)?;
                t.sub(loss, t.scale(cost, gamma)?)
            };
            r.run(s, &format!("surrogate_{level}_M{m}_D{d}"), std::slice::from_ref(&frames), &[0], &f)?;
        }
        // The optimizer's own ∇x must match the reference.
        let level = AdaLevel::III;
        let anchor = anchors.get(level);
        for dt in r.dtypes.clone() {
            let mut mdl = model.clone();
            mdl.params = model.params.to_dtype(dt);
            mdl.config.dtype = dt;
            let x = frames.to_dtype(dt).to_dtype(DType::F64);
            let (_, grad) = crate::ada::surrogate_objective(&mdl, &x.to_dtype(dt), 1, anchor, level, 0.5, true)?;
            let h_model = {
                let mut h = model.clone();
                h.params = mdl.params.to_dtype(DType::F64);
                h
            };
            let f = |t: &Tape, v: &[Var]| {
                let bound = h_model.params.bind(t, false)?;
                let vars = h_model.forward_frames(t, v[0], &bound, Mode::Eval, &mut rng_from_seed(0))?;
                let logits = h_model.classify(t, vars.r3, &bound)?;
                let loss = t.cross_entropy(logits, 1)?;
                let a = t.constant(anchor.to_dtype(t.dtype()))?;
                let cost = transport_cost(t, vars.r3, a, 1, 1)?;
                t.sub(loss, t.scale(cost, 0.5)?)
            };
            let grad = grad.expect("gradient requested");
            let replace = |gs: &mut [Tensor]| gs[0] = grad.clone();
            let e = check_case(
                s,
                &format!("surrogate_objective_fn_M{m}_D{d}"),
                std::slice::from_ref(&x),
                &[0],
                dt,
                &f,
                Some(&replace),
                &mut r.rng,
            )?;
            r.report.entries.push(e);
        }
    }
    Ok(())
}

/// Run the given scopes in f64 and, with `include_f32`, on the f32 path.
pub fn gradcheck(scopes: &[Scope], include_f32: bool, seed: u64) -> Result<GradReport> {
    let mut dtypes = vec![DType::F64];
    if include_f32 {
        dtypes.push(DType::F32);
    }
    let mut r = Runner { report: GradReport::default(), dtypes, rng: rng_from_seed(seed) };
    for &s in scopes {
        match s {
            Scope::Kernels => kernels(&mut r)?,
            Scope::Attention => attention(&mut r)?,
            Scope::Pyramid => pyramid(&mut r)?,
            Scope::Ada => ada(&mut r)?,
        }
    }
    Ok(r.report)
}
