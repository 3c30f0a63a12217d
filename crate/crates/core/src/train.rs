//! Confidence-weighted dense loss, estimator and refiner training, evaluation
//! and the strategy ablation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::correlation::FusionStrategy;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::math::{adam_step, AdamState, ParamSet};
use crate::metrics::{self, EvalRecord, MetricKind, ObjectModel, Report};
use crate::net::{checksum_values, refine, NetConfig, PoseNet};
use crate::pose::{mat_vec, DenseGrad, DensePrediction, Point3, RigidTransform};
use crate::synth::{mix_seed, rng_for, Scene};

/// Default confidence regularization weight.
pub const DEFAULT_W: f64 = 0.015;

/// Precomputed loss geometry for one scene: model points and their
/// ground-truth placement.
#[derive(Clone, Debug)]
pub struct LossTarget {
    points: Vec<Point3>,
    targets: Vec<Point3>,
    symmetric: bool,
}

impl LossTarget {
    /// Uses every `stride`-th model point (`stride ≥ 1`).
    pub fn new(model: &ObjectModel, gt: &RigidTransform, stride: usize) -> Self {
        let points: Vec<Point3> = model.points().iter().step_by(stride.max(1)).copied().collect();
        let targets = gt.apply(&points);
        Self {
            points,
            targets,
            symmetric: model.is_symmetric(),
        }
    }

    /// Per-point ADD or ADD-S distance of hypothesis `(r, t)` and, when
    /// requested, its gradients with respect to `r` and `t`. ADD-S pairs
    /// each ground-truth point with its closest predicted point.
    fn distance(&self, r: &[[f64; 3]; 3], t: Point3, grad: Option<(&mut [[f64; 3]; 3], &mut Point3)>) -> f64 {
        let m = self.points.len() as f64;
        let placed: Vec<Point3> = self
            .points
            .iter()
            .map(|x| {
                let rx = mat_vec(r, *x);
                [rx[0] + t[0], rx[1] + t[1], rx[2] + t[2]]
            })
            .collect();
        let mut sum = 0.0;
        let mut acc = grad;
        for (k, y) in self.targets.iter().enumerate() {
            let j = if self.symmetric {
                let mut best = (f64::INFINITY, 0);
                for (j, p) in placed.iter().enumerate() {
                    let d2 = (p[0] - y[0]).powi(2) + (p[1] - y[1]).powi(2) + (p[2] - y[2]).powi(2);
                    if d2 < best.0 {
                        best = (d2, j);
                    }
                }
                best.1
            } else {
                k
            };
            let (p, x) = (placed[j], self.points[j]);
            let e = [p[0] - y[0], p[1] - y[1], p[2] - y[2]];
            let d = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
            sum += d;
            if let Some((gr, gt)) = acc.as_mut() {
                if d > 0.0 {
                    for a in 0..3 {
                        let u = e[a] / (d * m);
                        gt[a] += u;
                        for b in 0..3 {
                            gr[a][b] += u * x[b];
                        }
                    }
                }
            }
        }
        sum / m
    }
}

fn check_w(w: f64) -> Result<()> {
    if !(w > 0.0) || !w.is_finite() {
        return Err(Error::Config(format!("confidence weight w must be positive, got {w}")));
    }
    Ok(())
}

/// `L = (1/N)·Σ (dᵢ·cᵢ − w·log cᵢ)` over all N per-point hypotheses, with
/// `dᵢ` the ADD (asymmetric) or ADD-S (symmetric) distance of hypothesis i.
pub fn loss(pred: &DensePrediction, model: &ObjectModel, gt: &RigidTransform, w: f64) -> Result<f64> {
    Ok(loss_and_grad(pred, &LossTarget::new(model, gt, 1), w, false)?.0)
}

/// Loss and, if `with_grad`, its gradient with respect to the prediction.
pub fn loss_and_grad(
    pred: &DensePrediction,
    target: &LossTarget,
    w: f64,
    with_grad: bool,
) -> Result<(f64, DenseGrad)> {
    check_w(w)?;
    let n = pred.len();
    if n == 0 {
        return Err(Error::Input("empty dense prediction".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = DenseGrad::zeros(if with_grad { n } else { 0 });
    let mut total = 0.0;
    for i in 0..n {
        let q = pred.rotations[i];
        let r = q.to_matrix();
        let t = pred.translations[i];
        let c = pred.confidences[i];
        let d = if with_grad {
            let mut gr = [[0.0; 3]; 3];
            let mut gt = [0.0; 3];
            let d = target.distance(&r, t, Some((&mut gr, &mut gt)));
            let scale = c * inv_n;
            for a in 0..3 {
                grad.translations[i][a] = scale * gt[a];
                for b in 0..3 {
                    gr[a][b] *= scale;
                }
            }
            grad.rotations[i] = q.matrix_backward(&gr);
            grad.confidences[i] = (d - w / c) * inv_n;
            d
        } else {
            target.distance(&r, t, None)
        };
        total += d * c - w * c.ln();
    }
    let value = total * inv_n;
    if !value.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok((value, grad))
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LrSchedule {
    /// The base rate throughout.
    #[default]
    Constant,
    /// Half-cosine decay from the base rate at the first epoch towards zero,
    /// `0.5·(1 + cos(π·e/E))` for epoch `e` of `E`.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown learning-rate schedule `{other}`"))),
        }
    }
}

/// Training hyper-parameters shared by the estimator and refiner loops.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Estimator learning rate; `0` freezes all parameters.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch: usize,
    pub epochs: usize,
    pub w: f64,
    pub seed: u64,
    /// Worker threads for per-scene forward/backward passes.
    pub threads: usize,
    /// Estimator epoch loss below which refiner training may start.
    pub refiner_trigger: f64,
    /// Refiner learning rate is `lr · refiner_decay`.
    pub refiner_decay: f64,
    pub refiner_batch: usize,
    pub refiner_epochs: usize,
    /// Refinement iterations used while training and evaluating the refiner.
    pub refine_iters: usize,
    /// Every `loss_stride`-th model point enters the loss.
    pub loss_stride: usize,
    /// Keep all correlation gains at zero.
    pub freeze_lambdas: bool,
    /// Evaluate on the held-out split every this many epochs (0: final only).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            batch: 8,
            epochs: 50,
            w: DEFAULT_W,
            seed: 1,
            threads: 1,
            refiner_trigger: 0.016,
            refiner_decay: 0.3,
            refiner_batch: 4,
            refiner_epochs: 0,
            refine_iters: 2,
            loss_stride: 2,
            freeze_lambdas: false,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        check_w(self.w)?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.refiner_decay > 0.0 && self.refiner_decay < 1.0) {
            return Err(Error::Config(format!("refiner decay must lie in (0, 1), got {}", self.refiner_decay)));
        }
        if !(self.refiner_trigger > 0.0) {
            return Err(Error::Config(format!("refiner trigger must be positive, got {}", self.refiner_trigger)));
        }
        if self.batch == 0 || self.refiner_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        Ok(())
    }

    /// `key = value` pairs describing this configuration.
    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("strategy".into(), self.net.strategy.to_string()),
            ("dim".into(), self.net.dim.to_string()),
            ("encoder_hidden".into(), self.net.encoder_hidden.to_string()),
            ("head_hidden".into(), self.net.head_hidden.to_string()),
            ("point_scale".into(), self.net.point_scale.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lr_schedule".into(), self.lr_schedule.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("w".into(), self.w.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("threads".into(), self.threads.to_string()),
            ("refiner_trigger".into(), self.refiner_trigger.to_string()),
            ("refiner_decay".into(), self.refiner_decay.to_string()),
            ("refiner_batch".into(), self.refiner_batch.to_string()),
            ("refiner_epochs".into(), self.refiner_epochs.to_string()),
            ("refine_iters".into(), self.refine_iters.to_string()),
            ("loss_stride".into(), self.loss_stride.to_string()),
            ("freeze_lambdas".into(), self.freeze_lambdas.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
        ]
    }
}

/// Held-out accuracy at one point of training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSnapshot {
    pub mean_distance: f64,
    pub mean_auc: f64,
    pub mean_below: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

/// Record of one training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub role: String,
    pub config: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_s: f64,
    /// Hex FNV-1a checksum of the final parameters.
    pub checksum: String,
}

impl TrainLog {
    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// One JSON object per line: a header, one line per epoch and a summary.
    pub fn to_json_lines(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            record: &'static str,
            role: &'a str,
            config: std::collections::BTreeMap<&'a str, &'a str>,
        }
        #[derive(Serialize)]
        struct Epoch<'a> {
            record: &'static str,
            #[serde(flatten)]
            epoch: &'a EpochRecord,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            epochs: usize,
            wall_clock_s: f64,
            checksum: &'a str,
        }
        let mut out = String::new();
        let header = Header {
            record: "config",
            role: &self.role,
            config: self.config.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect(),
        };
        let push = |out: &mut String, v: serde_json::Result<String>| {
            out.push_str(&v.expect("log records serialize"));
            out.push('\n');
        };
        push(&mut out, serde_json::to_string(&header));
        for e in &self.epochs {
            push(&mut out, serde_json::to_string(&Epoch { record: "epoch", epoch: e }));
        }
        push(
            &mut out,
            serde_json::to_string(&Summary {
                record: "final",
                epochs: self.epochs.len(),
                wall_clock_s: self.wall_clock_s,
                checksum: &self.checksum,
            }),
        );
        out
    }
}

/// One unit of training work: a scene, its loss geometry and the pose the
/// observation is re-expressed in (identity for the estimator).
struct Item<'a> {
    scene: &'a Scene,
    target: LossTarget,
    frame: RigidTransform,
}

fn scene_grad(net: &PoseNet, item: &Item, w: f64) -> Result<(f64, Vec<f64>)> {
    let mut local = net.clone();
    local.zero_grad();
    let obs = if item.frame == RigidTransform::IDENTITY {
        item.scene.observation.clone()
    } else {
        item.scene.observation.transformed(&item.frame.inverse())
    };
    let cache = local.forward(&obs)?;
    let (value, g) = loss_and_grad(cache.prediction(), &item.target, w, true)?;
    local.backward(&cache, &g)?;
    Ok((value, local.flat_grads()))
}

/// Per-item results in item order; work is split into contiguous chunks so
/// the outcome does not depend on `threads`.
fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

struct LoopSpec<'a> {
    role: &'a str,
    lr: f64,
    batch: usize,
    epochs: usize,
    stream: u64,
}

fn run_loop<'d>(
    net: &mut PoseNet,
    items: &mut dyn FnMut(&PoseNet, usize) -> Result<Vec<Item<'d>>>,
    config: &TrainConfig,
    spec: LoopSpec,
    on_epoch: &mut dyn FnMut(&EpochRecord),
    evaluate_fn: &dyn Fn(&PoseNet) -> Result<Option<EvalSnapshot>>,
) -> Result<TrainLog> {
    let start = Instant::now();
    let mut adam = AdamState::new(net);
    let mut log = TrainLog {
        role: spec.role.to_string(),
        config: config.echo(),
        epochs: Vec::new(),
        wall_clock_s: 0.0,
        checksum: String::new(),
    };
    for epoch in 0..spec.epochs {
        let work = items(net, epoch)?;
        if work.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..work.len()).collect();
        order.shuffle(&mut rng_for(mix_seed(config.seed, spec.stream), epoch as u64));
        let lr = spec.lr * config.lr_schedule.factor(epoch, spec.epochs);
        let mut loss_sum = 0.0;
        for batch in order.chunks(spec.batch) {
            let batch_items: Vec<&Item> = batch.iter().map(|&i| &work[i]).collect();
            let results = par_map(&batch_items, config.threads, |item| scene_grad(net, item, config.w));
            let k = 1.0 / batch.len() as f64;
            for r in results {
                let (value, grads) = r.map_err(|e| match e {
                    Error::Numeric(detail) => Error::Divergence { epoch, detail },
                    other => other,
                })?;
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("non-finite scene loss after {} epochs", log.epochs.len()),
                    });
                }
                loss_sum += value;
                net.accumulate_grads(&grads, k);
            }
            if config.freeze_lambdas {
                for p in net.lambda_params_mut() {
                    p.zero_grad();
                }
            }
            if lr > 0.0 {
                adam_step(net, &mut adam, lr)?;
            } else {
                net.zero_grad();
            }
        }
        let mean_loss = loss_sum / work.len() as f64;
        if !mean_loss.is_finite() || !net.flat_values().iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                detail: format!("mean loss {mean_loss}"),
            });
        }
        let last = epoch + 1 == spec.epochs;
        let eval = if (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0) || last {
            evaluate_fn(net)?
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            lr,
            elapsed_s: start.elapsed().as_secs_f64(),
            eval,
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    log.wall_clock_s = start.elapsed().as_secs_f64();
    log.checksum = format!("{:016x}", checksum_values(&net.flat_values()));
    Ok(log)
}

fn snapshot(records: &[EvalRecord]) -> Result<Option<EvalSnapshot>> {
    if records.is_empty() {
        return Ok(None);
    }
    let distances: Vec<f64> = records.iter().map(|r| r.distance).collect();
    Ok(Some(EvalSnapshot {
        mean_distance: distances.iter().sum::<f64>() / distances.len() as f64,
        mean_auc: metrics::auc(&distances, metrics::AUC_MAX_THRESHOLD)?,
        mean_below: metrics::accuracy_below(&distances, metrics::ACCURACY_THRESHOLD)?,
    }))
}

/// Trains a fresh estimator on the training split.
pub fn train_estimator(data: &Dataset, config: &TrainConfig) -> Result<(PoseNet, TrainLog)> {
    train_estimator_with(data, config, &mut |_| {})
}

/// [`train_estimator`] with a callback after every epoch.
pub fn train_estimator_with(
    data: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(PoseNet, TrainLog)> {
    config.validate()?;
    let mut net = PoseNet::new(config.net, config.seed)?;
    let train: Vec<&Scene> = data.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let items: Vec<Item> = train
        .iter()
        .map(|s| {
            let obj = data.object(&s.object)?;
            Ok(Item {
                scene: s,
                target: LossTarget::new(&obj.model, &s.gt, config.loss_stride),
                frame: RigidTransform::IDENTITY,
            })
        })
        .collect::<Result<_>>()?;
    let symmetric = data.symmetric_ids();
    let log = run_loop(
        &mut net,
        &mut |_, _| {
            Ok(items
                .iter()
                .map(|i| Item {
                    scene: i.scene,
                    target: i.target.clone(),
                    frame: i.frame,
                })
                .collect())
        },
        config,
        LoopSpec {
            role: "estimator",
            lr: config.lr,
            batch: config.batch,
            epochs: config.epochs,
            stream: 0x657374,
        },
        on_epoch,
        &|n| snapshot(&evaluate(data, Split::Eval, n, None, &symmetric, config.threads)?),
    )?;
    Ok((net, log))
}

/// Trains a refiner on top of a frozen estimator.
///
/// Refuses to start unless the estimator's last epoch loss is below the
/// trigger. Each epoch, every training scene contributes one item per
/// refinement iteration, starting from the estimator's pose and following
/// the refiner's own (detached) updates.
pub fn train_refiner(
    data: &Dataset,
    estimator: &PoseNet,
    estimator_log: &TrainLog,
    config: &TrainConfig,
) -> Result<(PoseNet, TrainLog)> {
    train_refiner_with(data, estimator, estimator_log, config, &mut |_| {})
}

pub fn train_refiner_with(
    data: &Dataset,
    estimator: &PoseNet,
    estimator_log: &TrainLog,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(PoseNet, TrainLog)> {
    config.validate()?;
    let reached = estimator_log.last_loss();
    match reached {
        Some(l) if l < config.refiner_trigger => {}
        _ if config.refiner_trigger == f64::INFINITY => {}
        _ => {
            return Err(Error::TriggerNotReached {
                loss: reached.unwrap_or(f64::INFINITY),
                trigger: config.refiner_trigger,
            })
        }
    }
    let mut net = PoseNet::new(config.net.refiner(), mix_seed(config.seed, 0x726566))?;
    let train: Vec<&Scene> = data.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let initial: Vec<RigidTransform> = par_map(&train, config.threads, |s| estimator.estimate(&s.observation))
        .into_iter()
        .collect::<Result<_>>()?;
    let models: Vec<&ObjectModel> = train
        .iter()
        .map(|s| data.object(&s.object).map(|o| &o.model))
        .collect::<Result<_>>()?;
    let iters = config.refine_iters.max(1);
    let symmetric = data.symmetric_ids();
    let log = run_loop(
        &mut net,
        &mut |net, _| {
            // Poses visited by the current refiner from the estimator's output.
            let mut per_scene: Vec<Vec<RigidTransform>> = par_map(
                &(0..train.len()).collect::<Vec<_>>(),
                config.threads,
                |&i| {
                    let mut current = initial[i];
                    let mut visited = vec![current];
                    for _ in 1..iters {
                        current = refine(&current, &train[i].observation, net, 1)?;
                        visited.push(current);
                    }
                    Ok(visited)
                },
            )
            .into_iter()
            .collect::<Result<_>>()?;
            let mut items = Vec::with_capacity(train.len() * iters);
            for (i, visited) in per_scene.iter_mut().enumerate() {
                for frame in visited.drain(..) {
                    let local_gt = frame.inverse().compose(&train[i].gt);
                    items.push(Item {
                        scene: train[i],
                        target: LossTarget::new(models[i], &local_gt, config.loss_stride),
                        frame,
                    });
                }
            }
            Ok(items)
        },
        config,
        LoopSpec {
            role: "refiner",
            lr: config.lr * config.refiner_decay,
            batch: config.refiner_batch,
            epochs: config.refiner_epochs,
            stream: 0x726566,
        },
        on_epoch,
        &|n| {
            snapshot(&evaluate(
                data,
                Split::Eval,
                estimator,
                Some((n, config.refine_iters)),
                &symmetric,
                config.threads,
            )?)
        },
    )?;
    Ok((net, log))
}

/// Scores every scene of `split`: the estimator's best hypothesis, optionally
/// refined, against ground truth. Objects in `symmetric` use ADD-S.
pub fn evaluate(
    data: &Dataset,
    split: Split,
    estimator: &PoseNet,
    refiner: Option<(&PoseNet, usize)>,
    symmetric: &[String],
    threads: usize,
) -> Result<Vec<EvalRecord>> {
    let scenes: Vec<&Scene> = data.split(split).collect();
    par_map(&scenes, threads, |s| {
        let obj = data.object(&s.object)?;
        let mut pose = estimator.estimate(&s.observation)?;
        if let Some((r, k)) = refiner {
            pose = refine(&pose, &s.observation, r, k)?;
        }
        let kind = if symmetric.contains(&s.object) {
            MetricKind::AddS
        } else {
            MetricKind::Add
        };
        Ok(EvalRecord::score(&s.object, &obj.model, pose, s.gt, kind))
    })
    .into_iter()
    .collect()
}

/// Scores ground-truth poses; every distance is zero.
pub fn evaluate_oracle(data: &Dataset, split: Split, symmetric: &[String]) -> Result<Vec<EvalRecord>> {
    data.split(split)
        .map(|s| {
            let obj = data.object(&s.object)?;
            let kind = if symmetric.contains(&s.object) {
                MetricKind::AddS
            } else {
                MetricKind::Add
            };
            Ok(EvalRecord::score(&s.object, &obj.model, s.gt, s.gt, kind))
        })
        .collect()
}

/// Report over the objects present in `records`.
pub fn report_records(records: &[EvalRecord], symmetric: &[String], threshold: f64) -> Result<Report> {
    let objects: Vec<String> = records
        .iter()
        .map(|r| r.object.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let symmetric: BTreeSet<String> = symmetric.iter().cloned().collect();
    let dist: Vec<_> = records.iter().map(|r| r.distance_record()).collect();
    metrics::report(&dist, &objects, &symmetric, threshold, metrics::AUC_MAX_THRESHOLD)
}

/// One trained (strategy, seed) cell of an ablation.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub strategy: FusionStrategy,
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub report: Report,
    pub checksum: String,
}

/// Per-strategy summary across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: FusionStrategy,
    pub seeds: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub min_auc: f64,
    pub max_auc: f64,
    pub mean_below: f64,
    pub std_below: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationTable {
    /// Rebuilds the per-strategy rows from the runs' reports.
    pub fn summarize(runs: Vec<AblationRun>, strategies: &[FusionStrategy]) -> Self {
        let rows = strategies
            .iter()
            .map(|&strategy| {
                let cell: Vec<&AblationRun> = runs.iter().filter(|r| r.strategy == strategy).collect();
                let aucs: Vec<f64> = cell.iter().map(|r| r.report.mean_auc).collect();
                let below: Vec<f64> = cell.iter().map(|r| r.report.mean_below).collect();
                let (mean_auc, std_auc) = mean_std(&aucs);
                let (mean_below, std_below) = mean_std(&below);
                AblationRow {
                    strategy,
                    seeds: cell.len(),
                    mean_auc,
                    std_auc,
                    min_auc: aucs.iter().copied().fold(f64::INFINITY, f64::min),
                    max_auc: aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean_below,
                    std_below,
                }
            })
            .collect();
        Self { runs, rows }
    }

    pub fn row(&self, strategy: FusionStrategy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Aligned text table: per-strategy mean ± std and range over seeds, then
    /// one line per (strategy, seed).
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>5} {:>16} {:>17} {:>16}\n",
            "strategy", "seeds", "AUC mean±std", "AUC min..max", "<2cm mean±std"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>5} {:>9.2} ±{:>5.2} {:>8.2}..{:<8.2} {:>9.2} ±{:>5.2}\n",
                r.strategy.name(),
                r.seeds,
                r.mean_auc,
                r.std_auc,
                r.min_auc,
                r.max_auc,
                r.mean_below,
                r.std_below
            ));
        }
        s.push_str("\nper seed:\n");
        for run in &self.runs {
            s.push_str(&format!(
                "{:<10} seed={:<6} AUC={:>6.2} <2cm={:>6.2} checksum={}\n",
                run.strategy.name(),
                run.seed,
                run.report.mean_auc,
                run.report.mean_below,
                run.checksum
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,seed,mean_auc,mean_below\n");
        for run in &self.runs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                run.strategy.name(),
                run.seed,
                run.report.mean_auc,
                run.report.mean_below
            ));
        }
        s
    }
}

/// Trains and evaluates every (strategy, seed) pair with the same data and
/// budget; `base.net.strategy` and `base.seed` are overridden per cell.
pub fn ablate(
    data: &Dataset,
    strategies: &[FusionStrategy],
    seeds: &[u64],
    base: &TrainConfig,
    threshold: f64,
    on_run: &mut dyn FnMut(&AblationRun),
) -> Result<AblationTable> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one strategy and one seed".into()));
    }
    let symmetric = data.symmetric_ids();
    let mut runs = Vec::new();
    for &strategy in strategies {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.net.strategy = strategy;
            cfg.seed = seed;
            let (net, log) = train_estimator(data, &cfg)?;
            let records = evaluate(data, Split::Eval, &net, None, &symmetric, cfg.threads)?;
            let report = report_records(&records, &symmetric, threshold)?;
            let run = AblationRun {
                strategy,
                seed,
                records,
                report,
                checksum: log.checksum,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(AblationTable::summarize(runs, strategies))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GenConfig;
    use crate::math::grad_check;
    use crate::pose::{decode_dense, Quaternion, TranslationFrame};
    use crate::synth::{make_model, Shape};
    use crate::math::{Matrix, Param};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lshape() -> ObjectModel {
        make_model(Shape::DEFAULT_LSHAPE, 40, 1).unwrap()
    }

    #[test]
    fn cosine_schedule_starts_at_one_and_stays_positive() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.factor(0, 10), 1.0);
        assert!((c.factor(5, 10) - 0.5).abs() < 1e-15);
        assert!(c.factor(9, 10) > 0.0 && c.factor(9, 10) < 0.03);
        assert_eq!(LrSchedule::Constant.factor(9, 10), 1.0);
        for s in [LrSchedule::Constant, LrSchedule::Cosine] {
            assert_eq!(s.to_string().parse::<LrSchedule>().unwrap(), s);
        }
        assert!("linear".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn exact_confident_prediction_has_zero_loss() {
        let model = lshape();
        let gt = RigidTransform::new(Quaternion::new(0.9, 0.1, 0.3, -0.2), [0.01, 0.02, 0.3]);
        let pred = DensePrediction {
            rotations: vec![gt.rotation(); 3],
            translations: vec![gt.translation(); 3],
            confidences: vec![1.0; 3],
        };
        assert!(loss(&pred, &model, &gt, DEFAULT_W).unwrap().abs() < 1e-15);
    }

    #[test]
    fn confidence_optimum_is_w_over_d() {
        let model = lshape();
        let gt = RigidTransform::IDENTITY;
        let off = RigidTransform::from_translation([0.03, 0.0, 0.0]);
        let w = 0.015;
        let f = |c: f64| {
            let pred = DensePrediction {
                rotations: vec![off.rotation()],
                translations: vec![off.translation()],
                confidences: vec![c],
            };
            loss(&pred, &model, &gt, w).unwrap()
        };
        // d = 0.03 for a pure translation, so c* = 0.5.
        let c_star = w / 0.03;
        assert!(f(c_star) < f(c_star - 0.01));
        assert!(f(c_star) < f(c_star + 0.01));
        assert!((f(c_star) - (0.03 * c_star - w * c_star.ln())).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = lshape();
        let gt = RigidTransform::new(Quaternion::new(0.2, 0.7, -0.1, 0.4), [0.0, 0.05, 0.4]);
        let raw = Matrix::uniform(5, 8, 0.5, &mut rng);
        let pred = decode_dense(&raw, TranslationFrame::default()).unwrap();
        let mut expected = 0.0;
        for i in 0..5 {
            let q = pred.rotations[i];
            let mut d = 0.0;
            for x in model.points() {
                let r = q.to_matrix();
                let mut s = 0.0;
                let y = gt.apply_point(*x);
                for a in 0..3 {
                    let p = r[a][0] * x[0] + r[a][1] * x[1] + r[a][2] * x[2] + pred.translations[i][a];
                    s += (p - y[a]) * (p - y[a]);
                }
                d += s.sqrt();
            }
            d /= model.len() as f64;
            let c = pred.confidences[i];
            expected += d * c - DEFAULT_W * c.ln();
        }
        expected /= 5.0;
        let got = loss(&pred, &model, &gt, DEFAULT_W).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} {expected}");
        assert!(got >= 0.0);
        assert!(rng.random::<f64>().is_finite());
    }

    fn raw_loss_grad_check(model: ObjectModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = RigidTransform::new(Quaternion::new(0.5, 0.5, -0.5, 0.1), [0.02, -0.01, 0.3]);
        let target = LossTarget::new(&model, &gt, 1);
        let mut raw = vec![Param::new("raw", Matrix::uniform(5, 8, 0.4, &mut rng))];
        let frame = TranslationFrame {
            origin: [0.0, 0.0, 0.3],
            scale: 0.1,
        };
        let report = grad_check(&mut raw, 1e-6, |p, with_grad| {
            let pred = decode_dense(&p[0].value, frame)?;
            let (v, g) = loss_and_grad(&pred, &target, DEFAULT_W, with_grad)?;
            if with_grad {
                let g_raw = crate::pose::decode_dense_backward(&p[0].value, &pred, &g, frame);
                p[0].grad.add_assign(&g_raw);
            }
            Ok(v)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        raw_loss_grad_check(lshape());
    }

    #[test]
    fn symmetric_loss_gradient_matches_finite_differences() {
        raw_loss_grad_check(make_model(Shape::DEFAULT_BOX, 30, 2).unwrap());
    }

    #[test]
    fn bad_w_rejected() {
        let model = lshape();
        let pred = DensePrediction {
            rotations: vec![Quaternion::IDENTITY],
            translations: vec![[0.0; 3]],
            confidences: vec![0.5],
        };
        assert!(matches!(loss(&pred, &model, &RigidTransform::IDENTITY, 0.0), Err(Error::Config(_))));
    }

    fn tiny_data() -> Dataset {
        Dataset::generate(&GenConfig {
            scenes_per_model: 3,
            model_points: 40,
            eval_fraction: 0.34,
            scene: crate::synth::SceneConfig {
                points: 12,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                dim: 4,
                encoder_hidden: 4,
                head_hidden: 8,
                ..Default::default()
            },
            epochs: 1,
            batch: 2,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = tiny_data();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            ..tiny_config()
        };
        let (net, _) = train_estimator(&data, &cfg).unwrap();
        assert_eq!(net, PoseNet::new(cfg.net, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let data = tiny_data();
        let cfg = tiny_config();
        let (a, la) = train_estimator(&data, &cfg).unwrap();
        let (b, lb) = train_estimator(&data, &cfg).unwrap();
        let (c, lc) = train_estimator(&data, &TrainConfig { threads: 3, ..cfg.clone() }).unwrap();
        assert_eq!(la.checksum, lb.checksum);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(la.checksum, lc.checksum);
        assert_eq!(la.epochs[0].mean_loss, lc.epochs[0].mean_loss);
    }

    #[test]
    fn refiner_respects_trigger_and_freezes_estimator() {
        let data = tiny_data();
        let cfg = tiny_config();
        let (est, log) = train_estimator(&data, &cfg).unwrap();
        let before = est.clone();
        let strict = TrainConfig {
            refiner_trigger: 1e-9,
            refiner_epochs: 1,
            ..cfg.clone()
        };
        assert!(matches!(
            train_refiner(&data, &est, &log, &strict),
            Err(Error::TriggerNotReached { .. })
        ));
        let open = TrainConfig {
            refiner_trigger: f64::INFINITY,
            refiner_epochs: 1,
            ..cfg
        };
        let (_, rlog) = train_refiner(&data, &est, &log, &open).unwrap();
        assert_eq!(est, before);
        assert_eq!(rlog.epochs[0].lr, open.lr * 0.3);
    }

    #[test]
    fn frozen_lambdas_stay_zero() {
        let data = tiny_data();
        let cfg = TrainConfig {
            freeze_lambdas: true,
            ..tiny_config()
        };
        let (net, _) = train_estimator(&data, &cfg).unwrap();
        assert_eq!(net.correlation.lambdas(), [0.0; 4]);
        let (free, _) = train_estimator(&data, &tiny_config()).unwrap();
        assert_ne!(free.correlation.lambdas(), [0.0; 4]);
    }

    #[test]
    fn log_is_json_lines() {
        let data = tiny_data();
        let (_, log) = train_estimator(&data, &tiny_config()).unwrap();
        let text = log.to_json_lines();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["record"], "config");
        assert_eq!(lines[1]["epoch"], 1);
        assert_eq!(lines[2]["checksum"], log.checksum.as_str());
    }
}
