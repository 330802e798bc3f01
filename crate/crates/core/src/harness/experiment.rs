use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{effective_parallelism, save_checkpoint, ExperimentConfig, Variant};
use crate::ada::{ensemble_predict, train_step, AdaLevel, StepMetrics};
use crate::error::{ApnError, Result};
use crate::optim::Sgd;
use crate::params::ParamSet;
use crate::pyramid::{ApnModel, VideoClip};
use crate::rng::{derive_seed, rng_from_seed};
use crate::synthdg::io::{read_dataset, Manifest};
use crate::synthdg::{generate_benchmark, Benchmark};

pub const METRICS_HEADER: &str =
    "member,gamma,epoch,split,accuracy,loss,adv_loss_ii,adv_loss_iii,adv_loss_global,cost_ii,cost_iii,cost_global,lr";

/// One line of a metrics CSV. `member` is `m<i>` or `ensemble`; `split` is
/// `train`, `val` or `target:<domain>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub member: String,
    pub gamma: Option<f64>,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
    pub adv_loss_ii: Option<f64>,
    pub adv_loss_iii: Option<f64>,
    pub adv_loss_global: Option<f64>,
    pub cost_ii: Option<f64>,
    pub cost_iii: Option<f64>,
    pub cost_global: Option<f64>,
    pub lr: Option<f64>,
    /// Seconds since the member started; kept out of the CSV so reruns
    /// compare bitwise. Written to `timing.csv` instead.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl MetricsRow {
    fn eval(member: &str, gamma: Option<f64>, epoch: usize, split: String, accuracy: f64, loss: f64) -> Self {
        MetricsRow {
            member: member.to_string(),
            gamma,
            epoch,
            split,
            accuracy,
            loss,
            adv_loss_ii: None,
            adv_loss_iii: None,
            adv_loss_global: None,
            cost_ii: None,
            cost_iii: None,
            cost_global: None,
            lr: None,
            wall_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemberResult {
    pub index: usize,
    pub gamma: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Parameters at `best_epoch`.
    pub params: ParamSet,
    pub rows: Vec<MetricsRow>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproRecord {
    pub config: ExperimentConfig,
    pub member_seeds: Vec<u64>,
    pub benchmark_seed: u64,
    /// `sha256("blob <len>\0" ++ manifest_json)`.
    pub manifest_hash: String,
    pub checkpoints: Vec<Option<PathBuf>>,
    pub crate_version: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub members: Vec<MemberResult>,
    pub ensemble_val_accuracy: f64,
    /// `(domain, accuracy)` of the ensemble on each target domain.
    pub ensemble_target: Vec<(usize, f64)>,
    pub record: ReproRecord,
}

impl ExperimentResult {
    pub fn mean_target_accuracy(&self) -> f64 {
        let n = self.ensemble_target.len().max(1) as f64;
        self.ensemble_target.iter().map(|(_, a)| a).sum::<f64>() / n
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

/// Ensemble accuracy and mean negative log-likelihood on `clips`.
pub fn evaluate_ensemble(models: &[ApnModel], clips: &[VideoClip]) -> Result<(f64, f64)> {
    if clips.is_empty() {
        return Err(ApnError::Input("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    let mut nll = 0.0;
    for c in clips {
        let p = ensemble_predict(models, c)?;
        if argmax(&p) == c.category {
            correct += 1;
        }
        nll -= p[c.category].max(1e-12).ln();
    }
    let n = clips.len() as f64;
    Ok((correct as f64 / n, nll / n))
}

/// Git-style content hash of the dataset manifest.
pub fn manifest_hash(b: &Benchmark) -> Result<String> {
    let json = serde_json::to_vec(&Manifest::of(b))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", json.len()).as_bytes());
    h.update(&json);
    Ok(hex::encode(h.finalize()))
}

fn check_benchmark(cfg: &ExperimentConfig, b: &Benchmark) -> Result<()> {
    if b.source_train.is_empty() || b.source_val.is_empty() {
        return Err(ApnError::Input("dataset has an empty source split".into()));
    }
    if let Some(c) = b.all_clips().find(|c| c.category >= cfg.model.num_classes) {
        return Err(ApnError::Input(format!(
            "clip {} has category {} but the model has {} classes",
            c.clip_id, c.category, cfg.model.num_classes
        )));
    }
    Ok(())
}

fn level_value(v: &[(AdaLevel, f64)], l: AdaLevel) -> Option<f64> {
    v.iter().find(|(x, _)| *x == l).map(|(_, v)| *v)
}

fn train_member(cfg: &ExperimentConfig, b: &Benchmark, index: usize, gamma: f64) -> Result<MemberResult> {
    let seed = derive_seed(cfg.seed, &[index as u64]);
    let mut init_rng = rng_from_seed(derive_seed(seed, &[0]));
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let mut model = ApnModel::new(cfg.model.clone(), &mut init_rng)?;
    let mut sgd = Sgd::new(cfg.sgd, model.params.len());
    let ada = cfg.member_ada(gamma);
    let name = format!("m{index}");
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..b.source_train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = StepMetrics::default();
        let mut loss_sum = 0.0;
        let mut adv_loss: Vec<(AdaLevel, f64)> = Vec::new();
        let mut adv_cost: Vec<(AdaLevel, f64)> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<VideoClip> = chunk.iter().map(|&i| b.source_train[i].clone()).collect();
            let m = train_step(&mut model, &mut sgd, &batch, &ada, epoch, &mut rng, &mut |_| {})?;
            let w = m.items as f64;
            loss_sum += m.source_loss * w;
            sums.source_correct += m.source_correct;
            sums.items += m.items;
            for (l, v) in &m.adv_loss {
                match adv_loss.iter_mut().find(|(x, _)| x == l) {
                    Some(e) => e.1 += v * w,
                    None => adv_loss.push((*l, v * w)),
                }
            }
            for (l, v) in &m.adv_cost {
                match adv_cost.iter_mut().find(|(x, _)| x == l) {
                    Some(e) => e.1 += v * w,
                    None => adv_cost.push((*l, v * w)),
                }
            }
        }
        let n = sums.items as f64;
        adv_loss.iter_mut().chain(adv_cost.iter_mut()).for_each(|e| e.1 /= n);
        let mut row = MetricsRow::eval(
            &name,
            Some(gamma),
            epoch,
            "train".into(),
            sums.source_correct as f64 / n,
            loss_sum / n,
        );
        row.adv_loss_ii = level_value(&adv_loss, AdaLevel::II);
        row.adv_loss_iii = level_value(&adv_loss, AdaLevel::III);
        row.adv_loss_global = level_value(&adv_loss, AdaLevel::Global);
        row.cost_ii = level_value(&adv_cost, AdaLevel::II);
        row.cost_iii = level_value(&adv_cost, AdaLevel::III);
        row.cost_global = level_value(&adv_cost, AdaLevel::Global);
        row.lr = Some(cfg.sgd.lr_at_epoch(epoch));
        row.wall_seconds = start.elapsed().as_secs_f64();
        rows.push(row);

        let (acc, loss) = evaluate_ensemble(std::slice::from_ref(&model), &b.source_val)?;
        let mut row = MetricsRow::eval(&name, Some(gamma), epoch, "val".into(), acc, loss);
        row.wall_seconds = start.elapsed().as_secs_f64();
        rows.push(row);
        if best.as_ref().is_none_or(|(_, a, _)| acc > *a) {
            best = Some((epoch, acc, model.params.clone()));
        }
    }
    let (best_epoch, best_val_accuracy, params) = best.expect("at least one epoch");
    model.params = params.clone();
    for (d, clips) in &b.targets {
        let (acc, loss) = evaluate_ensemble(std::slice::from_ref(&model), clips)?;
        let mut row = MetricsRow::eval(&name, Some(gamma), best_epoch, format!("target:{d}"), acc, loss);
        row.wall_seconds = start.elapsed().as_secs_f64();
        rows.push(row);
    }
    Ok(MemberResult { index, gamma, seed, best_epoch, best_val_accuracy, params, rows, checkpoint: None })
}

fn load_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    match &cfg.dataset {
        Some(p) => {
            if !p.exists() {
                return Err(ApnError::Input(format!("dataset {} does not exist", p.display())));
            }
            read_dataset(p)
        }
        None => generate_benchmark(&cfg.benchmark),
    }
}

/// Load or generate the dataset named by `cfg`, then [`run_experiment_on`].
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let b = load_benchmark(cfg)?;
    run_experiment_on(cfg, &b, out)
}

/// Train one member per `gamma`, select each at its best validation epoch
/// (ties keep the earliest), and evaluate the averaged ensemble on every
/// target domain. With `out`, writes `metrics.csv`, `timing.csv`,
/// `run.json` and `checkpoints/`.
pub fn run_experiment_on(cfg: &ExperimentConfig, b: &Benchmark, out: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    check_benchmark(cfg, b)?;
    let jobs: Vec<(usize, f64)> = cfg.gammas.iter().copied().enumerate().collect();
    let workers = effective_parallelism(cfg.parallel);
    let mut members: Vec<MemberResult> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| ApnError::Usage(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(|&(i, g)| train_member(cfg, b, i, g)).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(|&(i, g)| train_member(cfg, b, i, g)).collect::<Result<Vec<_>>>()?
    };

    let models: Vec<ApnModel> = members
        .iter()
        .map(|m| {
            let mut model = ApnModel::new(cfg.model.clone(), &mut rng_from_seed(0))?;
            model.params = m.params.clone();
            Ok(model)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<MetricsRow> = members.iter().flat_map(|m| m.rows.iter().cloned()).collect();
    let final_epoch = cfg.epochs - 1;
    let (val_acc, val_loss) = evaluate_ensemble(&models, &b.source_val)?;
    rows.push(MetricsRow::eval("ensemble", None, final_epoch, "val".into(), val_acc, val_loss));
    let mut ensemble_target = Vec::new();
    for (d, clips) in &b.targets {
        let (acc, loss) = evaluate_ensemble(&models, clips)?;
        rows.push(MetricsRow::eval("ensemble", None, final_epoch, format!("target:{d}"), acc, loss));
        ensemble_target.push((*d, acc));
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        for m in members.iter_mut() {
            if cfg.save_checkpoints {
                let p = dir.join("checkpoints").join(format!("member{}.apn1", m.index));
                save_checkpoint(&m.params, &p)?;
                m.checkpoint = Some(p);
            }
        }
    }
    let record = ReproRecord {
        config: cfg.clone(),
        member_seeds: members.iter().map(|m| m.seed).collect(),
        benchmark_seed: b.spec.seed,
        manifest_hash: manifest_hash(b)?,
        checkpoints: members.iter().map(|m| m.checkpoint.clone()).collect(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    if let Some(dir) = out {
        write_metrics_csv(&rows, &dir.join("metrics.csv"))?;
        let mut t = csv::Writer::from_path(dir.join("timing.csv"))?;
        t.write_record(["member", "epoch", "split", "wall_seconds"])?;
        for r in &rows {
            t.write_record([r.member.clone(), r.epoch.to_string(), r.split.clone(), format!("{:.3}", r.wall_seconds)])?;
        }
        t.flush()?;
        std::fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&record)?)?;
    }
    Ok(ExperimentResult { rows, members, ensemble_val_accuracy: val_acc, ensemble_target, record })
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One cell of a variant × seed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub val_accuracy: f64,
    pub mean_target_accuracy: f64,
    /// `domain:accuracy` pairs joined by `;`.
    pub target_accuracy: String,
}

/// Run every `(variant, seed)` cell on a shared benchmark and write
/// `ablation.csv` (plus per-cell run directories) under `out`.
pub fn ablation(
    base: &ExperimentConfig,
    b: &Benchmark,
    variants: &[Variant],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let cells: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let run = |&(v, s): &(Variant, u64)| -> Result<AblationRow> {
        let cfg = ExperimentConfig { variant: v, seed: s, parallel: 1, ..base.clone() };
        let dir = out.map(|d| d.join(format!("{}-seed{s}", v.name().replace('*', "star").replace('+', "_"))));
        let r = run_experiment_on(&cfg, b, dir.as_deref())?;
        Ok(AblationRow {
            variant: v.name().to_string(),
            seed: s,
            val_accuracy: r.ensemble_val_accuracy,
            mean_target_accuracy: r.mean_target_accuracy(),
            target_accuracy: r
                .ensemble_target
                .iter()
                .map(|(d, a)| format!("{d}:{a}"))
                .collect::<Vec<_>>()
                .join(";"),
        })
    };
    let workers = effective_parallelism(base.parallel);
    let rows: Vec<AblationRow> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| ApnError::Usage(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        cells.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}
