//! Training: one exact-gradient step, the epoch loop with early stopping,
//! checkpoints, and a finite-difference gradient oracle.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{entropy, Tape, Var};
use crate::data::{hex_digest, sample_negatives, InteractionSet};
use crate::error::{MagnetError, Result};
use crate::eval::{evaluate_model, MetricReport, DEFAULT_CUTOFFS};
use crate::format::{decode_matrix, encode_matrix, read_bytes, write_bytes};
use crate::losses::{
    bpr_on_tape, confidence_on_tape, contrastive_on_tape, coverage_on_tape, LossBreakdown, LossWeights,
};
use crate::model::{Bound, Dropout, Model, ModelConfig, ModelInputs, ViewOps};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::schedule::{EntropyStats, ScheduleConfig, ScheduleState};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_ctr: f64,
    pub tau: f64,
    pub weight_decay: f64,
    pub mean_bpr: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ctr: 0.01,
            tau: 0.5,
            weight_decay: 2e-5,
            mean_bpr: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Hard cap on optimizer steps across the run.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 1024,
            neg_ratio: 1,
            max_epochs: 200,
            patience: 5,
            max_steps: None,
            seed: 2026,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        let bad = |m: &str| Err(MagnetError::Parameter(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.neg_ratio == 0 {
            return bad("neg_ratio must be at least 1");
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return bad("learning rate must be positive");
        }
        if self.loss.tau.is_nan() || self.loss.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if self.loss.lambda_ctr < 0.0 || self.loss.weight_decay < 0.0 {
            return bad("loss weights must be nonnegative");
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Everything random about one step, fixed up front.
#[derive(Clone, Debug)]
pub struct StepPlan<T> {
    pub users: Vec<usize>,
    pub pos: Vec<usize>,
    /// `neg_ratio` blocks, each aligned with `pos`.
    pub neg: Vec<usize>,
    pub dropout: Option<Dropout>,
    pub ops: ViewOps<T>,
    /// Top-K selection to reuse instead of recomputing it.
    pub frozen: Option<Rc<[Vec<usize>]>>,
}

impl<T: Scalar> StepPlan<T> {
    pub fn sample<R: Rng + ?Sized>(
        batch: &[(usize, usize)],
        train: &InteractionSet,
        inputs: &ModelInputs<T>,
        config: &TrainerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let b = batch.len();
        let rho = config.neg_ratio;
        let mut neg = vec![0; b * rho];
        for (k, &(u, _)) in batch.iter().enumerate() {
            for (r, j) in sample_negatives(u, train, rho, rng)?.into_iter().enumerate() {
                neg[r * b + k] = j;
            }
        }
        let dropout = (config.model.dropout > 0.0).then(|| Dropout {
            rate: config.model.dropout,
            seed: rng.random(),
        });
        let ops = inputs.sampled_ops(config.model.layers, config.model.fanout, rng);
        Ok(Self {
            users: batch.iter().map(|p| p.0).collect(),
            pos: batch.iter().map(|p| p.1).collect(),
            neg,
            dropout,
            ops,
            frozen: None,
        })
    }
}

/// A recorded forward pass of the training objective.
pub struct Objective<T> {
    pub tape: Tape<T>,
    pub bound: Bound,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub stats: Option<EntropyStats>,
    /// Mean per-instance routing entropy over positives.
    pub instance_entropy: Option<f64>,
    pub selection: Option<Rc<[Vec<usize>]>>,
}

fn unique(xs: impl IntoIterator<Item = usize>) -> Rc<[usize]> {
    xs.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Builds the full objective. `weigh` receives the positive-pair routing
/// statistics and returns `(λ_cov, λ_conf)`; those weights enter the loss as
/// constants.
pub fn build_objective<T: Scalar>(
    model: &Model<T>,
    inputs: &ModelInputs<T>,
    plan: &StepPlan<T>,
    loss: &LossConfig,
    weigh: impl FnOnce(Option<&EntropyStats>) -> (f64, f64),
) -> Result<Objective<T>> {
    let b = plan.users.len();
    if b == 0 {
        return Err(MagnetError::Empty("empty batch".into()));
    }
    let rho = plan.neg.len() / b;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let enc = model.encode(&mut tape, &bound, inputs, &plan.ops);

    let users: Vec<usize> = (0..=rho).flat_map(|_| plan.users.iter().copied()).collect();
    let items: Vec<usize> = plan.pos.iter().chain(&plan.neg).copied().collect();
    let scored = model.score_tokens(&mut tape, &bound, &enc, &users, &items, plan.dropout, plan.frozen.clone())?;

    let pos_rep: Rc<[usize]> = (0..rho).flat_map(|_| 0..b).collect();
    let neg_idx: Rc<[usize]> = (b..b * (rho + 1)).collect();
    let y_pos = tape.gather_rows(scored.y, pos_rep);
    let y_neg = tape.gather_rows(scored.y, neg_idx);
    let bpr = bpr_on_tape(&mut tape, y_pos, y_neg, loss.mean_bpr);

    let pi_pos = scored.pi.map(|pi| tape.gather_rows(pi, (0..b).collect()));
    let (stats, instance_entropy) = match pi_pos {
        Some(p) => {
            let m = tape.value(p);
            let rows: Vec<Vec<f64>> = (0..b).map(|r| m.row(r).iter().map(|v| v.f64()).collect()).collect();
            let mut mean = vec![0.0; m.cols()];
            for r in &rows {
                for (s, &x) in mean.iter_mut().zip(r) {
                    *s += x;
                }
            }
            let stats = EntropyStats::from_mean(mean.into_iter().map(|s| s / b as f64).collect());
            let inst = rows.iter().map(|r| entropy(r.as_slice())).sum::<f64>() / b as f64;
            (Some(stats), Some(inst))
        }
        None => (None, None),
    };
    let (lambda_cov, lambda_conf) = weigh(stats.as_ref());

    let ctr = match enc.z_uig {
        Some(z_uig) if inputs.has_induced && loss.lambda_ctr > 0.0 => {
            let ub = unique(plan.users.iter().copied());
            let ib = unique(plan.pos.iter().map(|&i| model.num_users + i));
            let [ua, uz, ia, iz] = [
                (enc.z_ui, ub.clone()),
                (z_uig, ub),
                (enc.z_ui, ib.clone()),
                (z_uig, ib),
            ]
            .map(|(z, idx)| tape.gather_rows(z, idx));
            contrastive_on_tape(&mut tape, ua, uz, ia, iz, T::of(loss.tau))
        }
        _ => None,
    };
    let cov = pi_pos.map(|p| coverage_on_tape(&mut tape, p));
    let conf = pi_pos.map(|p| confidence_on_tape(&mut tape, p));
    let squares: Vec<Var> = bound.vars.iter().map(|&v| tape.sum_squares(v)).collect();
    let l2 = squares[1..].iter().fold(squares[0], |acc, &s| tape.add(acc, s));

    let weights = LossWeights {
        ctr: if ctr.is_some() { loss.lambda_ctr } else { 0.0 },
        cov: lambda_cov,
        conf: lambda_conf,
        l2: loss.weight_decay,
    };
    let mut total = bpr;
    for (term, w) in [(ctr, weights.ctr), (cov, weights.cov), (conf, weights.conf), (Some(l2), weights.l2)] {
        if let Some(t) = term {
            if w != 0.0 {
                let s = tape.scale(t, T::of(w));
                total = tape.add(total, s);
            }
        }
    }
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).f64());
    let mut breakdown = LossBreakdown::compose(val(Some(bpr)), val(ctr), val(cov), val(conf), val(Some(l2)), weights);
    breakdown.total = tape.scalar(total).f64();
    Ok(Objective {
        tape,
        bound,
        loss: total,
        breakdown,
        stats,
        instance_entropy,
        selection: scored.selection,
    })
}

/// Per-step log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub stats: Option<EntropyStats>,
    pub stage: u8,
    pub counter: usize,
    pub lambda_cov: f64,
    pub lambda_conf: f64,
    pub breakdown: LossBreakdown,
    pub instance_entropy: Option<f64>,
}

impl StepRecord {
    pub fn to_json(&self) -> serde_json::Value {
        let b = &self.breakdown;
        let w = &b.weights;
        json!({
            "step": self.step,
            "epoch": self.epoch,
            "H": self.stats.as_ref().map(|s| s.h),
            "H_norm": self.stats.as_ref().map(|s| s.h_norm),
            "N_eff": self.stats.as_ref().map(|s| s.n_eff),
            "stage": self.stage,
            "n": self.counter,
            "lambda_cov": self.lambda_cov,
            "lambda_conf": self.lambda_conf,
            "loss_bpr": b.bpr,
            "loss_ctr": w.ctr * b.ctr,
            "loss_cov": w.cov * b.cov,
            "loss_conf": w.conf * b.conf,
            "loss_l2": w.l2 * b.l2,
            "loss_total": b.total,
            "raw_cov": b.cov,
            "raw_conf": b.conf,
            "raw_ctr": b.ctr,
            "entropy_instance": self.instance_entropy,
        })
    }
}

/// Per-epoch log entry. Loss fields are step means of the weighted terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss_bpr: f64,
    pub loss_ctr: f64,
    pub loss_cov: f64,
    pub loss_conf: f64,
    pub loss_l2: f64,
    pub loss_total: f64,
    /// Mean of the per-batch normalized entropies.
    pub h_norm: Option<f64>,
    /// Normalized entropy of the epoch-wide mean routing.
    pub h_norm_epoch: Option<f64>,
    pub entropy_instance: Option<f64>,
    pub stage: u8,
    pub val_recall10: Option<f64>,
    pub val_ndcg10: Option<f64>,
    pub val_recall20: Option<f64>,
    pub val_ndcg20: Option<f64>,
    /// Mean positive-pair routing over the epoch.
    pub routing_mean: Option<Vec<f64>>,
}

impl EpochRecord {
    pub fn to_json(&self, seconds: Option<f64>) -> serde_json::Value {
        json!({
            "epoch": self.epoch,
            "steps": self.steps,
            "loss_bpr": self.loss_bpr,
            "loss_ctr": self.loss_ctr,
            "loss_cov": self.loss_cov,
            "loss_conf": self.loss_conf,
            "loss_l2": self.loss_l2,
            "loss_total": self.loss_total,
            "H_norm": self.h_norm,
            "H_norm_epoch": self.h_norm_epoch,
            "entropy_instance": self.entropy_instance,
            "stage": self.stage,
            "val_recall10": self.val_recall10,
            "val_ndcg10": self.val_ndcg10,
            "val_recall20": self.val_recall20,
            "val_ndcg20": self.val_ndcg20,
            "seconds": seconds,
        })
    }
}

/// Training split plus the precomputed model inputs.
pub struct TrainData<T> {
    pub train: InteractionSet,
    pub valid: Vec<(usize, usize)>,
    pub inputs: ModelInputs<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestState<T> {
    pub epoch: usize,
    pub ndcg20: f64,
    pub params: Vec<Matrix<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_ndcg20: Option<f64>,
    pub stopped_early: bool,
}

/// Mutable training state: model, optimizer, schedule and history.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainerConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub schedule: ScheduleState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestState<T>>,
    pub bad_epochs: usize,
    pub stopped_early: bool,
}

/// Stream 0 seeds initialization; epoch `e` draws from stream `e`.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainerConfig, num_users: usize, num_items: usize, dim_a: usize, dim_s: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = run_rng(config.seed, 0);
        let model = Model::init(config.model.clone(), num_users, num_items, dim_a, dim_s, &mut rng)?;
        let shapes: Vec<_> = model.named_params().iter().map(|(_, m)| m.shape()).collect();
        Ok(Self {
            adam: Adam::new(config.adam, &shapes),
            schedule: ScheduleState::new(config.schedule),
            config,
            model,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            best: None,
            bad_epochs: 0,
            stopped_early: false,
        })
    }

    /// One optimizer update on a prepared plan.
    pub fn train_step(&mut self, inputs: &ModelInputs<T>, plan: &StepPlan<T>, epoch: usize) -> Result<StepRecord> {
        let schedule = &mut self.schedule;
        let obj = build_objective(&self.model, inputs, plan, &self.config.loss, |stats| match stats {
            Some(s) => {
                schedule.update(s.h_norm, epoch);
                schedule.weights(s.h_norm)
            }
            None => (0.0, 0.0),
        })?;
        let step = self.step + 1;
        if !obj.breakdown.total.is_finite() {
            let dump = json!({ "epoch": epoch, "breakdown": obj.breakdown, "stats": obj.stats }).to_string();
            return Err(MagnetError::NonFiniteLoss { step, dump });
        }
        let mut grads = obj.tape.backward(obj.loss);
        let grads: Vec<Option<Matrix<T>>> = obj.bound.vars.iter().map(|&v| grads.take(v)).collect();
        self.adam.update(self.model.params_mut(), &grads);
        self.step = step;
        Ok(StepRecord {
            step,
            epoch,
            stats: obj.stats,
            stage: self.schedule.stage,
            counter: self.schedule.counter,
            lambda_cov: obj.breakdown.weights.cov,
            lambda_conf: obj.breakdown.weights.conf,
            breakdown: obj.breakdown,
            instance_entropy: obj.instance_entropy,
        })
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.step < m)
    }

    /// Runs the next epoch and its validation pass.
    pub fn run_epoch(&mut self, data: &TrainData<T>, on_step: &mut dyn FnMut(&StepRecord)) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let mut rng = run_rng(self.config.seed, epoch as u64);
        let mut edges = data.train.edges().to_vec();
        edges.shuffle(&mut rng);

        let mut sums = [0.0f64; 6];
        let (mut h_sum, mut inst_sum, mut routed_steps) = (0.0, 0.0, 0usize);
        let mut routing_sum: Option<Vec<f64>> = None;
        let mut routed_pairs = 0usize;
        let mut steps = 0usize;
        for batch in edges.chunks(self.config.batch_size) {
            if !self.budget_left() {
                break;
            }
            let plan = StepPlan::sample(batch, &data.train, &data.inputs, &self.config, &mut rng)?;
            let rec = self.train_step(&data.inputs, &plan, epoch)?;
            let b = &rec.breakdown;
            let w = &b.weights;
            for (s, v) in sums.iter_mut().zip([b.bpr, w.ctr * b.ctr, w.cov * b.cov, w.conf * b.conf, w.l2 * b.l2, b.total]) {
                *s += v;
            }
            if let (Some(st), Some(inst)) = (&rec.stats, rec.instance_entropy) {
                h_sum += st.h_norm;
                inst_sum += inst;
                routed_steps += 1;
                let acc = routing_sum.get_or_insert_with(|| vec![0.0; st.mean.len()]);
                for (a, &m) in acc.iter_mut().zip(&st.mean) {
                    *a += m * batch.len() as f64;
                }
                routed_pairs += batch.len();
            }
            steps += 1;
            on_step(&rec);
        }
        let denom = steps.max(1) as f64;
        let routing_mean = routing_sum.map(|s| s.into_iter().map(|x| x / routed_pairs as f64).collect::<Vec<_>>());
        let val = self.validate(data)?;
        let rec = EpochRecord {
            epoch,
            steps,
            loss_bpr: sums[0] / denom,
            loss_ctr: sums[1] / denom,
            loss_cov: sums[2] / denom,
            loss_conf: sums[3] / denom,
            loss_l2: sums[4] / denom,
            loss_total: sums[5] / denom,
            h_norm: (routed_steps > 0).then(|| h_sum / routed_steps as f64),
            h_norm_epoch: routing_mean.as_ref().map(|m| EntropyStats::from_mean(m.clone()).h_norm),
            entropy_instance: (routed_steps > 0).then(|| inst_sum / routed_steps as f64),
            stage: self.schedule.stage,
            val_recall10: val.as_ref().map(|r| r.recall_at(10)),
            val_ndcg10: val.as_ref().map(|r| r.ndcg_at(10)),
            val_recall20: val.as_ref().map(|r| r.recall_at(20)),
            val_ndcg20: val.as_ref().map(|r| r.ndcg_at(20)),
            routing_mean,
        };
        self.epoch = epoch;
        self.observe_validation(rec.val_ndcg20);
        self.history.push(rec.clone());
        info!(
            "epoch {epoch}: loss {:.5} stage {} val ndcg@20 {:?}",
            rec.loss_total, rec.stage, rec.val_ndcg20
        );
        Ok(rec)
    }

    fn validate(&self, data: &TrainData<T>) -> Result<Option<MetricReport>> {
        if data.valid.is_empty() {
            return Ok(None);
        }
        let frozen = self.model.freeze(&data.inputs);
        match evaluate_model(&self.model, &frozen, &data.train, &data.valid, &DEFAULT_CUTOFFS) {
            Ok(r) => Ok(Some(r)),
            Err(MagnetError::Empty(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Patience bookkeeping for one validation score.
    pub fn observe_validation(&mut self, ndcg20: Option<f64>) {
        let Some(score) = ndcg20 else { return };
        if self.best.as_ref().is_none_or(|b| score > b.ndcg20) {
            self.best = Some(BestState {
                epoch: self.epoch,
                ndcg20: score,
                params: self.model.named_params().into_iter().map(|(_, m)| m.clone()).collect(),
            });
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.stopped_early = true;
            }
        }
    }

    pub fn finished(&self) -> bool {
        self.stopped_early || self.epoch >= self.config.max_epochs || !self.budget_left()
    }

    /// Trains until the epoch cap, the step cap, or patience runs out.
    pub fn fit(
        &mut self,
        data: &TrainData<T>,
        on_step: &mut dyn FnMut(&StepRecord),
        on_epoch: &mut dyn FnMut(&Trainer<T>, &EpochRecord) -> Result<()>,
    ) -> Result<FitSummary> {
        while !self.finished() {
            let rec = self.run_epoch(data, on_step)?;
            on_epoch(self, &rec)?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            epochs: self.epoch,
            steps: self.step,
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_ndcg20: self.best.as_ref().map(|b| b.ndcg20),
            stopped_early: self.stopped_early,
        }
    }

    /// The model at the best validation epoch, or the current one.
    pub fn best_model(&self) -> Model<T> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            for (p, v) in m.params_mut().into_iter().zip(&b.params) {
                *p = v.clone();
            }
        }
        m
    }
}

const CHECKPOINT_FORMAT: &str = "magnet-checkpoint-1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    scalar: String,
    fingerprint: String,
    config: TrainerConfig,
    num_users: usize,
    num_items: usize,
    dim_a: usize,
    dim_s: usize,
    epoch: usize,
    step: usize,
    adam_step: u64,
    schedule: ScheduleState,
    bad_epochs: usize,
    stopped_early: bool,
    best_epoch: Option<usize>,
    best_ndcg20: Option<f64>,
    history: Vec<EpochRecord>,
    params: Vec<String>,
}

fn blob_name(name: &str) -> String {
    format!("{name}.mgf")
}

impl<T: Scalar> Trainer<T> {
    /// Writes a manifest plus one blob per parameter (and per optimizer
    /// moment, and per best-epoch parameter).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let names: Vec<String> = self.model.named_params().into_iter().map(|(n, _)| n).collect();
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            scalar: T::NAME.into(),
            fingerprint: self.config.fingerprint(),
            config: self.config.clone(),
            num_users: self.model.num_users,
            num_items: self.model.num_items,
            dim_a: self.model.proj_a.w.rows(),
            dim_s: self.model.proj_s.w.rows(),
            epoch: self.epoch,
            step: self.step,
            adam_step: self.adam.step,
            schedule: self.schedule.clone(),
            bad_epochs: self.bad_epochs,
            stopped_early: self.stopped_early,
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_ndcg20: self.best.as_ref().map(|b| b.ndcg20),
            history: self.history.clone(),
            params: names.clone(),
        };
        let params: Vec<&Matrix<T>> = self.model.named_params().into_iter().map(|(_, m)| m).collect();
        let mut sections: Vec<(&str, Vec<&Matrix<T>>)> =
            vec![("params", params), ("adam_m", self.adam.m.iter().collect()), ("adam_v", self.adam.v.iter().collect())];
        if let Some(b) = &self.best {
            sections.push(("best", b.params.iter().collect()));
        }
        for (sub, mats) in sections {
            for (name, m) in names.iter().zip(mats) {
                write_bytes(&dir.join(sub).join(blob_name(name)), &encode_matrix(m))?;
            }
        }
        let text = serde_json::to_string_pretty(&manifest)?;
        write_bytes(&dir.join("manifest.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| MagnetError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(MagnetError::Checkpoint(format!("unknown checkpoint format {:?}", m.format)));
        }
        if m.scalar != T::NAME {
            return Err(MagnetError::Checkpoint(format!("checkpoint holds {} values, expected {}", m.scalar, T::NAME)));
        }
        if m.fingerprint != m.config.fingerprint() {
            return Err(MagnetError::Checkpoint("config fingerprint does not match the stored config".into()));
        }
        let mut t = Trainer::new(m.config, m.num_users, m.num_items, m.dim_a, m.dim_s)?;
        let names: Vec<String> = t.model.named_params().into_iter().map(|(n, _)| n).collect();
        if names != m.params {
            return Err(MagnetError::Checkpoint("parameter list does not match the config".into()));
        }
        let read = |sub: &str, name: &str, like: (usize, usize)| -> Result<Matrix<T>> {
            let p = dir.join(sub).join(blob_name(name));
            let mat = decode_matrix::<T>(&p, &read_bytes(&p)?)?;
            if mat.shape() != like {
                return Err(MagnetError::Checkpoint(format!("{}: shape {:?}, expected {:?}", p.display(), mat.shape(), like)));
            }
            Ok(mat)
        };
        let shapes: Vec<(usize, usize)> = t.model.named_params().iter().map(|(_, m)| m.shape()).collect();
        let mut best = Vec::new();
        for (k, name) in names.iter().enumerate() {
            *t.model.params_mut()[k] = read("params", name, shapes[k])?;
            t.adam.m[k] = read("adam_m", name, shapes[k])?;
            t.adam.v[k] = read("adam_v", name, shapes[k])?;
            if m.best_epoch.is_some() {
                best.push(read("best", name, shapes[k])?);
            }
        }
        t.adam.step = m.adam_step;
        t.epoch = m.epoch;
        t.step = m.step;
        t.schedule = m.schedule;
        t.bad_epochs = m.bad_epochs;
        t.stopped_early = m.stopped_early;
        t.history = m.history;
        t.best = match (m.best_epoch, m.best_ndcg20) {
            (Some(epoch), Some(ndcg20)) => Some(BestState {
                epoch,
                ndcg20,
                params: best,
            }),
            _ => None,
        };
        debug!("loaded checkpoint at epoch {} step {}", t.epoch, t.step);
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Above this many coordinates a seeded subset is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Adds 1 to one analytic coordinate `(parameter name, flat index)`.
    pub corrupt: Option<(String, usize)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: 10_000,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub coords: usize,
    pub checked: usize,
    pub max_rel: f64,
    pub worst: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub failing: Vec<String>,
}

/// Central differences against the analytic gradient of the objective on a
/// fixed plan. The Top-K selection and stage weights are held fixed.
pub fn gradient_check(
    model: &Model<f64>,
    inputs: &ModelInputs<f64>,
    plan: &StepPlan<f64>,
    loss: &LossConfig,
    weights: (f64, f64),
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let first = build_objective(model, inputs, plan, loss, |_| weights)?;
    let mut plan = plan.clone();
    plan.frozen = first.selection.clone();
    drop(first);

    let obj = build_objective(model, inputs, &plan, loss, |_| weights)?;
    let mut grads = obj.tape.backward(obj.loss);
    let named = model.named_params();
    let mut analytic: Vec<Matrix<f64>> = obj
        .bound
        .vars
        .iter()
        .zip(&named)
        .map(|(&v, (_, m))| grads.take(v).unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    if let Some((name, idx)) = &opts.corrupt {
        let k = named
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| MagnetError::Parameter(format!("no parameter named {name}")))?;
        analytic[k].data_mut()[*idx] += 1.0;
    }

    let mut coords: Vec<(usize, usize)> =
        named.iter().enumerate().flat_map(|(k, (_, m))| (0..m.len()).map(move |c| (k, c))).collect();
    if coords.len() > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        coords.shuffle(&mut rng);
        coords.truncate(opts.max_coords);
        coords.sort_unstable();
    }

    let mut groups: Vec<GroupCheck> = named
        .iter()
        .map(|(n, m)| GroupCheck {
            name: n.clone(),
            coords: m.len(),
            checked: 0,
            max_rel: 0.0,
            worst: None,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    let mut probe = model.clone();
    let eval = |m: &Model<f64>| build_objective(m, inputs, &plan, loss, |_| weights).map(|o| o.breakdown.total);
    for (k, c) in coords {
        let orig = probe.params_mut()[k].data()[c];
        probe.params_mut()[k].data_mut()[c] = orig + opts.h;
        let up = eval(&probe)?;
        probe.params_mut()[k].data_mut()[c] = orig - opts.h;
        let down = eval(&probe)?;
        probe.params_mut()[k].data_mut()[c] = orig;
        let numeric = (up - down) / (2.0 * opts.h);
        let a = analytic[k].data()[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        let g = &mut groups[k];
        g.checked += 1;
        if g.worst.is_none() || rel > g.max_rel {
            g.max_rel = rel;
            g.worst = Some(c);
            g.analytic = a;
            g.numeric = numeric;
        }
    }
    let max_rel = groups.iter().map(|g| g.max_rel).fold(0.0, f64::max);
    let failing: Vec<String> = groups.iter().filter(|g| g.max_rel >= opts.tolerance).map(|g| g.name.clone()).collect();
    Ok(GradCheckReport {
        groups,
        max_rel,
        tolerance: opts.tolerance,
        passed: failing.is_empty(),
        failing,
    })
}
