//! Direct optimization of per-case deformation parameters and of the shared
//! prior: AdamW updates, warmup + cosine schedule, and the alternating
//! parameter/prior regime.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::ClassShifts;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights, Objective, Wrt};
use crate::metrics::{self, MetricReport};
use crate::pipeline::Deformer;
use crate::prior::{normalize, normalize_backward, AnatomicalPrior};
use crate::tps::{Displacements, TpsSystem};
use crate::volume::{channel_argmax, LabelMap, Volume};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment state for one parameter tensor, with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::arg(format!(
                "optimizer state has {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient {i} is not finite")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak`, then cosine annealing to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn at(&self, t: usize) -> f64 {
        if t < self.warmup {
            return self.peak * t as f64 / self.warmup as f64;
        }
        if t >= self.total {
            return 0.0;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = (t - self.warmup) as f64 / span;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Parameter-update iterations.
    pub iters: usize,
    pub warmup_iters: usize,
    pub lr_params: f64,
    pub lr_prior: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub eps: f64,
    /// Parameter steps between prior phases.
    pub param_span: usize,
    /// Prior steps per prior phase.
    pub prior_span: usize,
    pub seed: u64,
    /// TPS control lattice `(nh, nw, nd)`.
    pub grid: [usize; 3],
    /// Displacement bound; defaults to the grid's own bound.
    pub max_disp: Option<f64>,
    /// Logit slope per voxel of boundary depth when a label map is turned
    /// into a prior.
    pub label_slope: f64,
    /// Logit magnitude cap for label-derived priors.
    pub label_cap: f64,
    /// NSD tolerance for the reported metrics (mm).
    pub nsd_tau: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iters: 2000,
            warmup_iters: 100,
            lr_params: 3e-4,
            lr_prior: 1e-3,
            weight_decay: 1e-5,
            gamma: 0.5,
            lambda: 1e-5,
            eps: crate::losses::DICE_EPS,
            param_span: 50,
            prior_span: 10,
            seed: 0,
            grid: [3, 3, 3],
            max_disp: None,
            label_slope: 3.0,
            label_cap: 20.0,
            nsd_tau: metrics::DEFAULT_NSD_TAU,
        }
    }
}

impl FitConfig {
    /// Step sizes and budget suited to directly optimized parameters on
    /// desk-sized volumes.
    pub fn desk() -> Self {
        FitConfig {
            iters: 1200,
            warmup_iters: 60,
            lr_params: 0.05,
            lr_prior: 0.05,
            ..FitConfig::default()
        }
    }

    /// The prior a label map stands for under this configuration.
    pub fn prior_from_labels(&self, labels: &LabelMap, c_cls: usize) -> Result<AnatomicalPrior> {
        AnatomicalPrior::from_labels_smooth(labels, c_cls, self.label_slope, self.label_cap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.param_span == 0 || self.prior_span == 0 {
            return Err(Error::arg("param_span and prior_span must be >= 1"));
        }
        if !(self.lr_params > 0.0 && self.lr_prior > 0.0) {
            return Err(Error::arg("learning rates must be positive"));
        }
        if self.warmup_iters > self.iters && self.iters > 0 {
            return Err(Error::arg("warmup_iters exceeds iters"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda: self.lambda,
            eps: self.eps,
        }
    }

    pub fn param_schedule(&self) -> Schedule {
        Schedule {
            peak: self.lr_params,
            warmup: self.warmup_iters,
            total: self.iters,
        }
    }

    /// Number of prior steps in a full alternating run.
    pub fn prior_steps(&self) -> usize {
        (self.iters / self.param_span) * self.prior_span
    }

    pub fn prior_schedule(&self) -> Schedule {
        let total = self.prior_steps();
        Schedule {
            peak: self.lr_prior,
            warmup: (self.warmup_iters * self.prior_span).div_ceil(self.param_span).min(total),
            total,
        }
    }
}

/// Parameter learning rate at iteration `t`.
pub fn lr_at(cfg: &FitConfig, t: usize) -> f64 {
    cfg.param_schedule().at(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrailEntry {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Loss before each executed parameter update.
    pub trail: Vec<TrailEntry>,
    pub theta: ClassShifts,
    pub delta: Displacements,
    pub grid: [usize; 3],
    /// Mean Dice of the undeformed prior (identity parameters).
    pub initial_dice: f64,
    pub final_metrics: MetricReport,
    pub wall_time_s: f64,
}

impl FitReport {
    /// Bitwise equality of everything except wall time.
    pub fn same_outcome(&self, other: &FitReport) -> bool {
        let strip = |r: &FitReport| {
            let mut r = r.clone();
            r.wall_time_s = 0.0;
            serde_json::to_string(&r).expect("report serializes")
        };
        strip(self) == strip(other)
    }

    pub fn final_dice(&self) -> f64 {
        self.final_metrics.mean_dsc
    }

    /// Writes the loss trail as CSV.
    pub fn trail_csv(&self) -> String {
        let mut s = String::from("iteration,dice_pred,dice_prior,centroid,reg,total,lr\n");
        for e in &self.trail {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.iteration, e.loss.dice_pred, e.loss.dice_prior, e.loss.centroid, e.loss.reg, e.loss.total, e.lr
            ));
        }
        s
    }
}

/// Deformed prior probabilities for given parameters.
pub fn deform_prior(
    prior: &AnatomicalPrior,
    sys: &TpsSystem,
    theta: &ClassShifts,
    delta: &Displacements,
) -> Result<Volume> {
    let deformer = Deformer::new(sys, prior.dims())?.with_max_disp(f64::INFINITY);
    Ok(deformer.forward(&prior.normalize(), theta, delta)?.deformed)
}

fn hard_metrics(deformed: &Volume, target: &LabelMap, tau: f64) -> Result<MetricReport> {
    let pred = channel_argmax(deformed);
    metrics::evaluate(&pred, target, deformed.channels(), tau, target.spacing())
}

struct CaseFit {
    objective: Objective,
    theta: ClassShifts,
    delta: Displacements,
    opt_theta: AdamW,
    opt_delta: AdamW,
    trail: Vec<TrailEntry>,
}

impl CaseFit {
    fn new(target: &LabelMap, c_cls: usize, n_ctrl: usize, cfg: &FitConfig) -> Result<Self> {
        Ok(CaseFit {
            objective: Objective::new(target, c_cls, cfg.weights())?,
            theta: ClassShifts::zeros(c_cls),
            delta: Displacements::zeros(n_ctrl),
            opt_theta: AdamW::new(c_cls * 3, cfg.weight_decay),
            opt_delta: AdamW::new(n_ctrl * 3, cfg.weight_decay),
            trail: Vec::new(),
        })
    }

    fn step(&mut self, deformer: &Deformer, probs: &Volume, iteration: usize, lr: f64) -> Result<()> {
        let diverged = |e: Error| Error::Divergence {
            iteration,
            message: e.to_string(),
        };
        let eval = self
            .objective
            .evaluate(deformer, probs, &self.theta, &self.delta, Wrt::Deformation)
            .map_err(diverged)?;
        self.trail.push(TrailEntry {
            iteration,
            loss: eval.loss,
            lr,
        });
        self.opt_theta
            .step(self.theta.flat_mut(), eval.d_theta.as_flattened(), lr)
            .map_err(diverged)?;
        self.opt_delta
            .step(self.delta.flat_mut(), eval.d_delta.as_flattened(), lr)
            .map_err(diverged)?;
        self.delta.validate(deformer.max_disp()).map_err(diverged)?;
        self.theta.validate(deformer.dims().diagonal()).map_err(diverged)?;
        Ok(())
    }

    fn deformed(&self, deformer: &Deformer, probs: &Volume) -> Result<Volume> {
        Ok(deformer.forward(probs, &self.theta, &self.delta)?.deformed)
    }

    fn report(&self, deformed: &Volume, initial_dice: f64, cfg: &FitConfig, started: Instant) -> Result<FitReport> {
        Ok(FitReport {
            trail: self.trail.clone(),
            theta: self.theta.clone(),
            delta: self.delta.clone(),
            grid: cfg.grid,
            initial_dice,
            final_metrics: hard_metrics(deformed, self.objective.target(), cfg.nsd_tau)?,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }
}

fn make_deformer(sys: &TpsSystem, prior: &AnatomicalPrior, cfg: &FitConfig) -> Result<Deformer> {
    let deformer = Deformer::new(sys, prior.dims())?;
    Ok(match cfg.max_disp {
        Some(m) => deformer.with_max_disp(m),
        None => deformer,
    })
}

fn check_target(target: &LabelMap, prior: &AnatomicalPrior) -> Result<()> {
    if target.dims() != prior.dims() {
        return Err(Error::arg(format!(
            "target dims {:?} differ from prior dims {:?}",
            target.dims(),
            prior.dims()
        )));
    }
    Ok(())
}

/// Fits per-class shifts and TPS displacements to one target with the prior
/// frozen, starting from the identity.
pub fn fit_case(target: &LabelMap, prior: &AnatomicalPrior, sys: &TpsSystem, cfg: &FitConfig) -> Result<FitReport> {
    fit_case_from(
        target,
        prior,
        sys,
        cfg,
        ClassShifts::zeros(prior.c_cls()),
        Displacements::zeros(sys.len()),
    )
}

/// As [`fit_case`], starting from the given parameters. `initial_dice` then
/// refers to those parameters.
pub fn fit_case_from(
    target: &LabelMap,
    prior: &AnatomicalPrior,
    sys: &TpsSystem,
    cfg: &FitConfig,
    theta: ClassShifts,
    delta: Displacements,
) -> Result<FitReport> {
    cfg.validate()?;
    check_target(target, prior)?;
    let started = Instant::now();
    let deformer = make_deformer(sys, prior, cfg)?;
    let probs = prior.normalize();
    let mut case = CaseFit::new(target, prior.c_cls(), sys.len(), cfg)?;
    if theta.len() != prior.c_cls() || delta.len() != sys.len() {
        return Err(Error::arg("initial parameters do not match the prior and grid"));
    }
    case.theta = theta;
    case.delta = delta;
    let initial = case.deformed(&deformer, &probs)?;
    let initial_dice = hard_metrics(&initial, target, cfg.nsd_tau)?.mean_dsc;
    let schedule = cfg.param_schedule();
    for t in 0..cfg.iters {
        case.step(&deformer, &probs, t, schedule.at(t))?;
    }
    let deformed = case.deformed(&deformer, &probs)?;
    case.report(&deformed, initial_dice, cfg, started)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Params,
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStep {
    pub phase: Phase,
    /// Step index within its phase kind.
    pub step: usize,
    pub lr: f64,
    /// Mean total loss over cases (parameter steps) or mean Soft-Dice of the
    /// deformed prior (prior steps), before the update.
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub prior: AnatomicalPrior,
    pub reports: Vec<FitReport>,
    pub schedule: Vec<PhaseStep>,
    /// Mean Dice of the initial prior with identity parameters.
    pub initial_mean_dice: f64,
    /// Mean Dice of the learned prior with the fitted parameters.
    pub final_mean_dice: f64,
}

impl LearnOutcome {
    pub fn same_outcome(&self, other: &LearnOutcome) -> bool {
        self.prior == other.prior
            && self.schedule.len() == other.schedule.len()
            && self
                .schedule
                .iter()
                .zip(&other.schedule)
                .all(|(a, b)| a.phase == b.phase && a.step == b.step && a.lr.to_bits() == b.lr.to_bits() && a.mean_loss.to_bits() == b.mean_loss.to_bits())
            && self.reports.len() == other.reports.len()
            && self.reports.iter().zip(&other.reports).all(|(a, b)| a.same_outcome(b))
            && self.initial_mean_dice.to_bits() == other.initial_mean_dice.to_bits()
            && self.final_mean_dice.to_bits() == other.final_mean_dice.to_bits()
    }
}

/// Alternates `param_span` per-case parameter steps (prior frozen) with
/// `prior_span` prior steps (parameters frozen). The prior gradient is the
/// Soft-Dice gradient of the deformed prior summed over cases in case order.
pub fn learn_prior(
    cases: &[LabelMap],
    prior: &AnatomicalPrior,
    sys: &TpsSystem,
    cfg: &FitConfig,
) -> Result<LearnOutcome> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::arg("learn_prior needs at least one case"));
    }
    for c in cases {
        check_target(c, prior)?;
    }
    let started = Instant::now();
    let deformer = make_deformer(sys, prior, cfg)?;
    let c_cls = prior.c_cls();
    let mut prior = prior.clone();
    let mut states = cases
        .iter()
        .map(|t| CaseFit::new(t, c_cls, sys.len(), cfg))
        .collect::<Result<Vec<_>>>()?;

    let probs0 = prior.normalize();
    let initial: Vec<f64> = states
        .par_iter()
        .map(|s| {
            let d = s.deformed(&deformer, &probs0)?;
            Ok(hard_metrics(&d, s.objective.target(), cfg.nsd_tau)?.mean_dsc)
        })
        .collect::<Result<Vec<_>>>()?;
    let initial_mean_dice = initial.iter().sum::<f64>() / initial.len() as f64;

    let param_sched = cfg.param_schedule();
    let prior_sched = cfg.prior_schedule();
    let mut opt_prior = AdamW::new(prior.logits().data().len(), cfg.weight_decay);
    let mut schedule = Vec::new();
    let mut param_step = 0;
    let mut prior_step = 0;
    while param_step < cfg.iters {
        let probs = prior.normalize();
        let block = cfg.param_span.min(cfg.iters - param_step);
        for _ in 0..block {
            let lr = param_sched.at(param_step);
            states
                .par_iter_mut()
                .map(|s| s.step(&deformer, &probs, param_step, lr))
                .collect::<Result<Vec<_>>>()?;
            let mean_loss = states.iter().map(|s| s.trail.last().expect("step recorded").loss.total).sum::<f64>()
                / states.len() as f64;
            schedule.push(PhaseStep {
                phase: Phase::Params,
                step: param_step,
                lr,
                mean_loss,
            });
            param_step += 1;
        }
        if block < cfg.param_span {
            break;
        }
        for _ in 0..cfg.prior_span {
            let lr = prior_sched.at(prior_step);
            let probs = prior.normalize();
            let evals = states
                .par_iter()
                .map(|s| {
                    s.objective
                        .evaluate(&deformer, &probs, &s.theta, &s.delta, Wrt::PriorDice)
                        .map(|e| (e.loss.dice_prior, e.d_probs.expect("requested")))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Divergence {
                    iteration: param_step,
                    message: e.to_string(),
                })?;
            let mut g_probs = vec![0.0; probs.data().len()];
            let mut mean_loss = 0.0;
            for (loss, g) in &evals {
                mean_loss += loss;
                for (a, b) in g_probs.iter_mut().zip(g) {
                    *a += b;
                }
            }
            mean_loss /= evals.len() as f64;
            let g_logits = normalize_backward(&probs, &g_probs);
            opt_prior
                .step(prior.logits_mut().data_mut(), &g_logits, lr)
                .map_err(|e| Error::Divergence {
                    iteration: param_step,
                    message: e.to_string(),
                })?;
            schedule.push(PhaseStep {
                phase: Phase::Prior,
                step: prior_step,
                lr,
                mean_loss,
            });
            prior_step += 1;
        }
    }

    let probs = normalize(prior.logits());
    let reports = states
        .par_iter()
        .zip(initial.par_iter())
        .map(|(s, &init)| {
            let d = s.deformed(&deformer, &probs)?;
            s.report(&d, init, cfg, started)
        })
        .collect::<Result<Vec<_>>>()?;
    let final_mean_dice = reports.iter().map(|r| r.final_dice()).sum::<f64>() / reports.len() as f64;
    Ok(LearnOutcome {
        prior,
        reports,
        schedule,
        initial_mean_dice,
        final_mean_dice,
    })
}
