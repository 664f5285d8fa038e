//! The yes/no objective, parameter partitioning and the staged training
//! schedule.

use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcfError, Result};
use crate::fusion::{BoundCf, FusionNet};
use crate::lm::{yes_no_node, yes_no_probs, Prediction, TinyLm, YES};
use crate::metrics::auc;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::prompt::{HybridPrompt, PromptBuilder};
use crate::tensor::tape::{sigmoid, LOG_FLOOR};
use crate::tensor::{OptimizerConfig, OptimizerState, Tensor, Var};

/// What the ranking term compares.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BprInput {
    Probabilities,
    Logits,
}

fn clamp_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// `BCE(p_yes, y) + BCE(p_no, 1 − y) + k · BPR`, with the ranking term
/// `−ln σ(p_yes − p_no)` for positives and `−ln σ(p_no − p_yes)` for
/// negatives.
pub fn ctr_loss(p_yes: f64, p_no: f64, y: u8, k: f64) -> f64 {
    let y = f64::from(y);
    let bce_yes = -(y * clamp_ln(p_yes) + (1.0 - y) * clamp_ln(1.0 - p_yes));
    let bce_no = -((1.0 - y) * clamp_ln(p_no) + y * clamp_ln(1.0 - p_no));
    let s = 2.0 * y - 1.0;
    bce_yes + bce_no + k * -clamp_ln(sigmoid(s * (p_yes - p_no)))
}

/// [`ctr_loss`] on the tape from a `[1×|V|]` logit row.
pub fn ctr_loss_node(sess: &mut Session, logits: Var, y: u8, k: f64, bpr: BprInput) -> Result<Var> {
    let t = &mut sess.tape;
    let probs = t.softmax(logits)?;
    let pyn = t.slice_cols(probs, YES as usize, 2)?;
    let yf = f64::from(y);
    // columns are (p_yes, p_no); targets (y, 1 − y)
    let target = t.constant(Tensor::row(vec![yf, 1.0 - yf]));
    let anti = t.constant(Tensor::row(vec![1.0 - yf, yf]));
    let lp = t.log(pyn)?;
    let q = t.affine(pyn, -1.0, 1.0)?;
    let lq = t.log(q)?;
    let a = t.mul(target, lp)?;
    let b = t.mul(anti, lq)?;
    let ab = t.add(a, b)?;
    let bce = t.sum(ab)?;
    let bce = t.scale(bce, -1.0)?;
    if k == 0.0 {
        return Ok(bce);
    }
    let src = match bpr {
        BprInput::Probabilities => pyn,
        BprInput::Logits => t.slice_cols(logits, YES as usize, 2)?,
    };
    let s = 2.0 * yf - 1.0;
    let sign = t.constant(Tensor::row(vec![s, -s]));
    let signed = t.mul(src, sign)?;
    let gap = t.sum(signed)?;
    let sg = t.sigmoid(gap)?;
    let lsg = t.log(sg)?;
    let rank = t.scale(lsg, -k)?;
    t.add(bce, rank)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Full base LM on text-only prompts.
    BaseLm,
    /// Adapters only.
    One,
    /// CF encoder (optional), alignment and gates.
    Two,
    /// Adapters, CF encoder, alignment and gates together.
    EndToEnd,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::BaseLm => "stage0",
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::EndToEnd => "end-to-end",
        }
    }
}

/// `Θ₁ = {Θ_L}`, `Θ₂ = {Θ_E, Θ_A, Θ_G}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub theta1: Vec<ParamGroup>,
    pub theta2: Vec<ParamGroup>,
    pub train_encoder: bool,
}

impl ParamPartition {
    pub fn new(train_encoder: bool) -> Self {
        ParamPartition {
            theta1: vec![ParamGroup::Adapter],
            theta2: vec![ParamGroup::Encoder, ParamGroup::Alignment, ParamGroup::Gate],
            train_encoder,
        }
    }

    pub fn groups(&self, stage: Stage) -> Vec<ParamGroup> {
        let t2 = self
            .theta2
            .iter()
            .copied()
            .filter(|g| self.train_encoder || *g != ParamGroup::Encoder);
        match stage {
            Stage::BaseLm => vec![ParamGroup::BaseLm],
            Stage::One => self.theta1.clone(),
            Stage::Two => t2.collect(),
            Stage::EndToEnd => self.theta1.iter().copied().chain(t2).collect(),
        }
    }

    pub fn trainable(&self, stage: Stage) -> impl Fn(&str) -> bool {
        let groups = self.groups(stage);
        move |name: &str| ParamGroup::of(name).is_some_and(|g| groups.contains(&g))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: f64,
    pub lr_stage0: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub train_encoder: bool,
    pub bpr_input: BprInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2.0,
            lr_stage0: 1e-3,
            lr_stage1: 1e-3,
            lr_stage2: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
            max_epochs: 50,
            patience: 3,
            seed: 0,
            train_encoder: true,
            bpr_input: BprInput::Probabilities,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 0.0 {
            return Err(CcfError::Config(format!("k must be non-negative, got {}", self.k)));
        }
        if self.batch_size == 0 {
            return Err(CcfError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::BaseLm => self.lr_stage0,
            Stage::One => self.lr_stage1,
            Stage::Two | Stage::EndToEnd => self.lr_stage2,
        }
    }
}

/// A prompt plus the CF history rows the sequence encoder reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub prompt: HybridPrompt,
    pub cf_history: Vec<usize>,
}

/// Everything needed to score a prompt.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub lm: TinyLm,
    pub fusion: FusionNet,
    pub builder: Arc<PromptBuilder>,
    pub adapters: bool,
}

impl Pipeline {
    pub fn logits(&self, sess: &mut Session, bound: &BoundCf, inst: &Instance) -> Result<Var> {
        let x = self
            .fusion
            .assemble(sess, bound, &self.lm, &self.builder, &inst.prompt, &inst.cf_history)?;
        self.lm.forward_last(sess, x, self.adapters)
    }

    /// `(p_yes, p_no)` on the tape.
    pub fn yes_no(&self, sess: &mut Session, bound: &BoundCf, inst: &Instance) -> Result<Var> {
        let z = self.logits(sess, bound, inst)?;
        yes_no_node(sess, z)
    }

    pub fn predict(&self, params: &ParamStore, instances: &[Instance]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(32) {
            let mut sess = Session::frozen(params);
            let bound = self.fusion.bind(&mut sess)?;
            for inst in chunk {
                let z = self.logits(&mut sess, &bound, inst).map_err(|e| with_instance(e, inst))?;
                out.push(yes_no_probs(sess.tape.value(z).data()));
            }
        }
        Ok(out)
    }

    /// Mean loss of a batch.
    pub fn batch_loss(&self, sess: &mut Session, batch: &[&Instance], cfg: &TrainConfig) -> Result<Var> {
        let bound = self.fusion.bind(sess)?;
        let mut total: Option<Var> = None;
        for inst in batch {
            let z = self.logits(sess, &bound, inst).map_err(|e| with_instance(e, inst))?;
            let l = ctr_loss_node(sess, z, inst.prompt.label, cfg.k, cfg.bpr_input)?;
            total = Some(match total {
                None => l,
                Some(t) => sess.tape.add(t, l)?,
            });
        }
        let total = total.ok_or_else(|| CcfError::invalid("batch_loss", "empty batch"))?;
        sess.tape.scale(total, 1.0 / batch.len() as f64)
    }

    pub fn auc(&self, params: &ParamStore, instances: &[Instance]) -> Result<f64> {
        let preds = self.predict(params, instances)?;
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let labels: Vec<u8> = instances.iter().map(|i| i.prompt.label).collect();
        auc(&scores, &labels)
    }
}

fn with_instance(e: CcfError, inst: &Instance) -> CcfError {
    match e {
        CcfError::NonFinite { .. } | CcfError::Numeric(_) => e,
        other => CcfError::Data(format!(
            "instance (user {}, item {}): {other}",
            inst.prompt.user, inst.prompt.item
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Validation AUC before any update.
    pub initial_val_auc: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch beat the starting point.
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub trainable: Vec<String>,
}

/// Trains the groups of `stage` with AdamW and early stopping on validation
/// AUC. `params` ends at the best-validation snapshot, which may be the
/// starting point. Tensors outside the stage's groups are never written.
pub fn train_stage(
    pipeline: &Pipeline,
    params: &mut ParamStore,
    stage: Stage,
    partition: &ParamPartition,
    train: &[Instance],
    val: &[Instance],
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CcfError::Data(format!("{}: empty training set", stage.as_str())));
    }
    let trainable = partition.trainable(stage);
    let names: Vec<String> = params.names().filter(|n| trainable(n)).map(str::to_string).collect();
    if names.is_empty() {
        return Err(CcfError::Config(format!("{} has no trainable parameters", stage.as_str())));
    }
    let mut opt = OptimizerState::new(OptimizerConfig::adamw(cfg.lr(stage), cfg.weight_decay));
    let stage_salt = match stage {
        Stage::BaseLm => 0,
        Stage::One => 1,
        Stage::Two => 2,
        Stage::EndToEnd => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(stage_salt));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial = pipeline.auc(params, val)?;
    info!("{}: initial val_auc {initial:.4}", stage.as_str());
    let mut best = params.clone();
    let mut best_auc = initial;
    let mut best_epoch = 0;
    let mut since = 0;
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train[i]).collect();
            let grads = {
                let mut sess = Session::new(params, &trainable);
                let loss = pipeline.batch_loss(&mut sess, &batch, cfg)?;
                let lv = sess.tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(CcfError::Numeric(format!("{} loss diverged at epoch {epoch}", stage.as_str())));
                }
                total += lv * batch.len() as f64;
                sess.gradients(loss)?
            };
            opt.step(params.iter_mut().filter(|(n, _)| trainable(n)), &grads)?;
        }
        let train_loss = total / train.len() as f64;
        let val_auc = pipeline.auc(params, val)?;
        info!("{} epoch {epoch}: train_loss {train_loss:.5} val_auc {val_auc:.4}", stage.as_str());
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        if val_auc > best_auc {
            best_auc = val_auc;
            best_epoch = epoch;
            best = params.clone();
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    *params = best;
    Ok(StageReport {
        stage,
        initial_val_auc: initial,
        epochs,
        best_epoch,
        best_val_auc: best_auc,
        trainable: names,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    TwoStage,
    Stage1Only,
    EndToEnd,
}

/// Stage 1 then stage 2, or one of the single-stage alternatives.
pub fn train_two_stage(
    pipeline: &Pipeline,
    params: &mut ParamStore,
    schedule: Schedule,
    train: &[Instance],
    val: &[Instance],
    cfg: &TrainConfig,
) -> Result<Vec<StageReport>> {
    for (group, what) in [(ParamGroup::BaseLm, "base LM"), (ParamGroup::Adapter, "adapter")] {
        if params.group_names(group).is_empty() {
            return Err(CcfError::Config(format!("{what} parameters are missing")));
        }
    }
    if !pipeline.fusion.backends.is_empty() && params.group_names(ParamGroup::Encoder).is_empty() {
        return Err(CcfError::Config("CF encoder parameters are missing".into()));
    }
    let partition = ParamPartition::new(cfg.train_encoder);
    let stages: &[Stage] = match schedule {
        Schedule::TwoStage => &[Stage::One, Stage::Two],
        Schedule::Stage1Only => &[Stage::One],
        Schedule::EndToEnd => &[Stage::EndToEnd],
    };
    let mut reports = Vec::new();
    for &s in stages {
        reports.push(train_stage(pipeline, params, s, &partition, train, val, cfg)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((ctr_loss(0.5, 0.5, 1, 2.0) - 4.0 * ln2).abs() < 1e-12);
        assert!((ctr_loss(0.5, 0.5, 1, 2.0) - 2.772_588_722_239_781).abs() < 1e-12);
        // −ln 0.9 − ln 0.9 + 2·ln(1 + e^−0.8)
        assert!((ctr_loss(0.9, 0.1, 1, 2.0) - 0.952_922_363_211_207_9).abs() < 1e-12);
        let bce = -(0.3f64.ln()) - (1.0 - 0.6f64).ln();
        assert!((ctr_loss(0.3, 0.6, 1, 0.0) - bce).abs() < 1e-12);
    }

    #[test]
    fn partition_is_disjoint() {
        let p = ParamPartition::new(true);
        assert!(p.theta1.iter().all(|g| !p.theta2.contains(g)));
        let s1 = p.trainable(Stage::One);
        assert!(s1("lora.h0.q.up") && !s1("alg.w1") && !s1("lm.tok"));
        let s2 = p.trainable(Stage::Two);
        assert!(s2("cf.user") && s2("gate1.w0") && !s2("lora.h0.q.up"));
        let frozen_e = ParamPartition::new(false).trainable(Stage::Two);
        assert!(!frozen_e("cf.user") && frozen_e("alg.w1"));
    }
}
