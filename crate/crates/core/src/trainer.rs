//! The SCDA optimization loop.
//!
//! One step runs a single forward over both domains, builds every loss on
//! one tape and does one backward pass:
//!
//! 1. pooled features `f` for the source and target batches;
//! 2. plain logits give the source cross-entropy and the target
//!    probabilities `p` (T = 1), from which pseudo-labels, pairs and the
//!    mutual-information term are taken;
//! 3. `f → GRL → classifier → softmax(·/T)` feeds the pair discrepancy;
//! 4. optionally `f → GRL → discriminator` feeds the adversarial term;
//! 5. `total = ce − α·pdd − β·mi + γ·adv` with `α = α₀·step/total_steps`;
//! 6. SGD with momentum: `v ← μ·v + g`, `θ ← θ − lr·v`, with
//!    `lr = lr₀·(1 + a·ρ)^(−b)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cam::{compute_cam, concentration};
use crate::error::{Error, Result};
use crate::model::{
    classify_pooled_on, discriminate_on, extract_on, init_params, ArchConfig, BoundModel,
    GrlCoefficient, ScdaModel,
};
use crate::objectives::{
    loss_adv_on, loss_ce_on, loss_mi_on, loss_pdd_on, total_loss, total_on, Ablation, Components,
    LossBreakdown, TradeOffs,
};
use crate::pairing::{build_pairs, pseudo_labels, PairSet, PseudoLabel};
use crate::rng::derive_seed;
use crate::synth::{BatchStream, Dataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub alpha0: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lr_a: f64,
    pub lr_b: f64,
    pub grl_lambda: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub ablation: Ablation,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 10.0,
            alpha0: 1.0,
            beta: 0.1,
            gamma: 0.0,
            epsilon: 0.8,
            batch_size: 32,
            total_steps: 1600,
            lr0: 0.3,
            momentum: 0.9,
            lr_a: 10.0,
            lr_b: 0.75,
            grl_lambda: 1.0,
            seed: 0,
            eval_every: 100,
            ablation: Ablation::default(),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha0", self.alpha0),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("grl_lambda", self.grl_lambda),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        Ok(())
    }

    /// Model architecture with the discriminator switched on iff `gamma > 0`.
    pub fn effective_arch(&self) -> ArchConfig {
        ArchConfig {
            discriminator: self.arch.discriminator || self.gamma > 0.0,
            ..self.arch.clone()
        }
    }

    pub fn progress(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            (step as f64 / self.total_steps as f64).min(1.0)
        }
    }

    pub fn alpha_at(&self, step: usize) -> f64 {
        self.alpha0 * self.progress(step)
    }
}

/// `lr₀·(1 + a·ρ)^(−b)` with `ρ = step / total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    config.lr0 * (1.0 + config.lr_a * config.progress(step)).powf(-config.lr_b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(model: &ScdaModel) -> Self {
        OptimizerState {
            velocity: model
                .named_params()
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }
}

/// Inputs of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub source_images: &'a Tensor,
    pub source_labels: &'a [usize],
    pub target_images: &'a Tensor,
}

/// The losses of one forward pass, as tape handles.
#[derive(Debug, Clone)]
pub struct Objective {
    pub components: Components<Var>,
    pub total: Var,
    pub pairs: PairSet,
    pub pseudo: Vec<PseudoLabel>,
    pub weights: TradeOffs,
    pub ablation: Ablation,
}

/// Builds the full objective on `tape`. When `pairs` is given it replaces
/// the pairs derived from the current pseudo-labels.
pub fn build_objective(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: StepBatch<'_>,
    config: &TrainConfig,
    weights: TradeOffs,
    pairs: Option<&PairSet>,
) -> Result<Objective> {
    let ns = batch.source_images.shape()[0];
    let nt = batch.target_images.shape()[0];
    let xs = tape.constant(batch.source_images.clone());
    let xt = tape.constant(batch.target_images.clone());
    let x = tape.concat(&[xs, xt])?;
    let acts = extract_on(tape, bound, x)?;
    let pooled = tape.global_average_pool(acts)?;
    let source_rows: Vec<usize> = (0..ns).collect();
    let target_rows: Vec<usize> = (ns..ns + nt).collect();

    let logits = classify_pooled_on(tape, bound.classifier, pooled)?;
    let zs = tape.gather_rows(logits, &source_rows)?;
    let zt = tape.gather_rows(logits, &target_rows)?;
    let ce = loss_ce_on(tape, zs, batch.source_labels)?;
    let pt = tape.softmax_rows(zt, 1.0)?;
    // Non-finite probabilities yield no pseudo-labels; the loss itself is
    // then non-finite and the caller reports it.
    let pseudo = if tape.value(pt).all_finite() {
        pseudo_labels(tape.value(pt))?
    } else {
        Vec::new()
    };
    let mi = loss_mi_on(tape, pt)?;

    let mut pairs = match pairs {
        Some(p) => p.clone(),
        None => build_pairs(batch.source_labels, &pseudo, config.epsilon),
    };
    if !config.ablation.uses_pdd_ss() {
        pairs.intra.clear();
    }
    if !config.ablation.uses_pdd_st() {
        pairs.inter.clear();
    }
    let grl = GrlCoefficient(config.grl_lambda);
    let (pdd_ss, pdd_st) = if pairs.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let rev = tape.grl(pooled, grl.0);
        let rev_logits = classify_pooled_on(tape, bound.classifier, rev)?;
        let rs = tape.gather_rows(rev_logits, &source_rows)?;
        let rt = tape.gather_rows(rev_logits, &target_rows)?;
        loss_pdd_on(tape, rs, rt, &pairs, config.temperature)?
    };

    let adv = match (&bound.discriminator, weights.gamma > 0.0) {
        (Some(d), true) => {
            let rev = tape.grl(pooled, grl.0);
            let out = discriminate_on(tape, d, rev)?;
            let ds = tape.gather_rows(out, &source_rows)?;
            let dt = tape.gather_rows(out, &target_rows)?;
            Some(loss_adv_on(tape, ds, dt)?)
        }
        _ => None,
    };

    let components = Components {
        ce,
        pdd_ss,
        pdd_st,
        mi,
        adv,
    };
    let total = total_on(tape, &components, weights, config.ablation)?;
    Ok(Objective {
        components,
        total,
        pairs,
        pseudo,
        weights,
        ablation: config.ablation,
    })
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        let c = Components {
            ce: v(self.components.ce),
            pdd_ss: v(self.components.pdd_ss),
            pdd_st: v(self.components.pdd_st),
            mi: v(self.components.mi),
            adv: self.components.adv.map(v),
        };
        total_loss(&c, self.weights, self.ablation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub m_ss: usize,
    pub m_st: usize,
    pub confident_targets: usize,
}

/// One SCDA update of `model` in place.
pub fn train_step(
    model: &mut ScdaModel,
    opt: &mut OptimizerState,
    batch: StepBatch<'_>,
    config: &TrainConfig,
    step: usize,
) -> Result<(LossBreakdown, StepDiagnostics)> {
    if batch.source_images.shape()[0] < 2 {
        return Err(Error::BatchTooSmall(batch.source_images.shape()[0]));
    }
    if batch.target_images.shape()[0] < 2 {
        return Err(Error::BatchTooSmall(batch.target_images.shape()[0]));
    }
    let weights = TradeOffs {
        alpha: config.alpha_at(step),
        beta: config.beta,
        gamma: config.gamma,
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let obj = build_objective(&mut tape, &bound, batch, config, weights, None)?;
    let breakdown = obj.breakdown(&tape);
    let total = tape.value(obj.total).item();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("{breakdown:?}"),
        });
    }
    let grads = tape.backward(obj.total)?;
    let lr = lr_at(step, config);
    for ((param, vel), var) in model
        .params_mut()
        .into_iter()
        .zip(opt.velocity.iter_mut())
        .zip(&bound.vars)
    {
        let Some(g) = grads.get(*var) else { continue };
        for ((p, v), gi) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
            *v = config.momentum * *v + gi;
            *p -= lr * *v;
        }
    }
    let diag = StepDiagnostics {
        step,
        lr,
        alpha: weights.alpha,
        m_ss: obj.pairs.m_ss(),
        m_st: obj.pairs.m_st(),
        confident_targets: obj
            .pseudo
            .iter()
            .filter(|p| p.confidence >= config.epsilon)
            .count(),
    };
    Ok((breakdown, diag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_concentration: f64,
    pub degenerate_cams: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

const EVAL_CHUNK: usize = 100;

/// Accuracy, confusion matrix and mean true-class CAM concentration on
/// each sample's object mask. Every sample must be labelled.
pub fn evaluate(model: &ScdaModel, data: &Dataset) -> Result<EvalResult> {
    let c = model.classes();
    let mut confusion = vec![vec![0usize; c]; c];
    let (mut correct, mut conc_sum, mut degenerate) = (0usize, 0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let labels = data
            .labels(chunk)
            .ok_or_else(|| Error::Config("evaluation requires labelled samples".into()))?;
        let (acts, logits) = model.activations_and_logits(&data.images(chunk))?;
        let (f, h, w) = (acts.shape()[1], acts.shape()[2], acts.shape()[3]);
        let per = f * h * w;
        for (k, &i) in chunk.iter().enumerate() {
            let y = labels[k];
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            let pred = argmax(logits.row(k));
            confusion[y][pred] += 1;
            if pred == y {
                correct += 1;
            }
            let a = Tensor::new(vec![f, h, w], acts.data()[k * per..(k + 1) * per].to_vec())?;
            let cam = compute_cam(&a, &model.classifier.weight)?;
            let score = concentration(&cam, y, &data.samples[i].mask)?;
            conc_sum += score.ratio;
            degenerate += score.degenerate as usize;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        mean_concentration: conc_sum / n,
        degenerate_cams: degenerate,
        confusion,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// The three datasets a run needs.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub source_train: &'a Dataset,
    pub target_train: &'a Dataset,
    pub target_eval: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub step: usize,
    pub ce: f64,
    pub pdd_ss: f64,
    pub pdd_st: f64,
    pub mi: f64,
    pub adv: f64,
    pub total: f64,
    pub target_acc: f64,
    pub mean_concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub config: TrainConfig,
    pub intervals: Vec<IntervalRecord>,
    pub target_acc: f64,
    pub mean_concentration: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub model: ScdaModel,
    pub steps: Vec<(StepDiagnostics, LossBreakdown)>,
}

/// Trains from a fresh initialization and evaluates on the target split.
pub fn run(config: &TrainConfig, data: RunData<'_>) -> Result<RunOutput> {
    config.validate()?;
    let mut model = init_params(config.seed, &config.effective_arch());
    let mut opt = OptimizerState::new(&model);
    let mut source_stream =
        BatchStream::new(data.source_train.len(), config.batch_size, derive_seed(config.seed, &[1]))?;
    let mut target_stream =
        BatchStream::new(data.target_train.len(), config.batch_size, derive_seed(config.seed, &[2]))?;

    let mut intervals = Vec::new();
    let mut steps = Vec::with_capacity(config.total_steps);
    let mut acc = LossBreakdown::default();
    let mut since = 0usize;
    for step in 0..config.total_steps {
        let si = source_stream.next_indices();
        let ti = target_stream.next_indices();
        let source_images = data.source_train.images(&si);
        let source_labels = data
            .source_train
            .labels(&si)
            .ok_or_else(|| Error::Config("source training samples must be labelled".into()))?;
        let target_images = data.target_train.images(&ti);
        let batch = StepBatch {
            source_images: &source_images,
            source_labels: &source_labels,
            target_images: &target_images,
        };
        let (b, diag) = train_step(&mut model, &mut opt, batch, config, step)?;
        steps.push((diag, b));
        acc.ce += b.ce;
        acc.pdd_ss += b.pdd_ss;
        acc.pdd_st += b.pdd_st;
        acc.mi += b.mi;
        acc.adv += b.adv;
        acc.total += b.total;
        since += 1;
        let last = step + 1 == config.total_steps;
        if (config.eval_every > 0 && (step + 1) % config.eval_every == 0) || last {
            let ev = evaluate(&model, data.target_eval)?;
            let k = since as f64;
            intervals.push(IntervalRecord {
                step: step + 1,
                ce: acc.ce / k,
                pdd_ss: acc.pdd_ss / k,
                pdd_st: acc.pdd_st / k,
                mi: acc.mi / k,
                adv: acc.adv / k,
                total: acc.total / k,
                target_acc: ev.accuracy,
                mean_concentration: ev.mean_concentration,
            });
            acc = LossBreakdown::default();
            since = 0;
        }
    }
    let final_eval = evaluate(&model, data.target_eval)?;
    Ok(RunOutput {
        report: RunReport {
            variant: config.ablation.label(),
            config: config.clone(),
            intervals,
            target_acc: final_eval.accuracy,
            mean_concentration: final_eval.mean_concentration,
            confusion: final_eval.confusion,
        },
        model,
        steps,
    })
}

/// Runs independent configurations on up to `jobs` threads; results keep
/// the input order.
pub fn run_many(configs: &[TrainConfig], data: RunData<'_>, jobs: usize) -> Vec<Result<RunOutput>> {
    let jobs = jobs.max(1).min(configs.len().max(1));
    if jobs == 1 {
        return configs.iter().map(|c| run(c, data)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<RunOutput>>> = (0..configs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let out = run(&configs[i], data);
                results.lock().expect("no panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Per-step CSV: `step,lr,alpha,ce,pdd_ss,pdd_st,mi,adv,total,m_ss,m_st,confident_targets`.
pub fn steps_csv(steps: &[(StepDiagnostics, LossBreakdown)]) -> String {
    let mut out = String::from("step,lr,alpha,ce,pdd_ss,pdd_st,mi,adv,total,m_ss,m_st,confident_targets\n");
    for (d, b) in steps {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            d.step, d.lr, d.alpha, b.ce, b.pdd_ss, b.pdd_st, b.mi, b.adv, b.total, d.m_ss, d.m_st,
            d.confident_targets
        ));
    }
    out
}
