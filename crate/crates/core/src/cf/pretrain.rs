use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CfBackend, CfModel};
use crate::dataset::{DatasetSplit, Interaction};
use crate::error::{CcfError, Result};
use crate::metrics::auc;
use crate::params::{ParamStore, Session};
use crate::tensor::{OptimizerConfig, OptimizerState, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfPretrainReport {
    pub epochs: Vec<CfEpoch>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
}

/// Logits `x_u · x_i` for a batch, as a `[B×1]` column.
pub(crate) fn batch_logits(model: &CfModel, sess: &mut Session, split: &DatasetSplit, xs: &[Interaction]) -> Result<Var> {
    if xs.is_empty() {
        return Err(CcfError::invalid("cf_predict", "empty batch"));
    }
    let tables = model.tables(sess)?;
    let item_rows: Vec<usize> = xs.iter().map(|x| model.index.item(x.item)).collect::<Result<_>>()?;
    let items = model.enc_items(sess, &tables, &item_rows)?;
    let users = match model.backend {
        CfBackend::SasRec => {
            let mut rows = Vec::with_capacity(xs.len());
            for x in xs {
                let h = model.history_rows(split, x.user, x.timestamp)?;
                rows.push(model.enc_user(sess, &tables, 0, &h)?);
            }
            sess.tape.concat_rows(&rows)?
        }
        _ => {
            let user_rows: Vec<usize> = xs.iter().map(|x| model.index.user(x.user)).collect::<Result<_>>()?;
            let u = tables.users.expect("table backend");
            sess.tape.gather(u, &user_rows)?
        }
    };
    let prod = sess.tape.mul(users, items)?;
    sess.tape.sum_last(prod)
}

/// Mean binary cross-entropy of `σ(logits)` against `labels`.
pub(crate) fn bce_mean(sess: &mut Session, logits: Var, labels: &[u8]) -> Result<Var> {
    let n = labels.len();
    let y = Tensor::matrix(n, 1, labels.iter().map(|&v| f64::from(v)).collect())?;
    let one_minus_y = Tensor::matrix(n, 1, labels.iter().map(|&v| 1.0 - f64::from(v)).collect())?;
    let y = sess.tape.constant(y);
    let ny = sess.tape.constant(one_minus_y);
    let p = sess.tape.sigmoid(logits)?;
    let lp = sess.tape.log(p)?;
    let q = sess.tape.affine(p, -1.0, 1.0)?;
    let lq = sess.tape.log(q)?;
    let a = sess.tape.mul(y, lp)?;
    let b = sess.tape.mul(ny, lq)?;
    let s = sess.tape.add(a, b)?;
    let m = sess.tape.mean(s)?;
    sess.tape.scale(m, -1.0)
}

/// The pretraining objective on one batch.
pub fn pretrain_loss(model: &CfModel, sess: &mut Session, split: &DatasetSplit, xs: &[Interaction]) -> Result<Var> {
    let labels: Vec<u8> = xs.iter().map(|x| x.label).collect();
    let z = batch_logits(model, sess, split, xs)?;
    bce_mean(sess, z, &labels)
}

/// Pointwise BCE pretraining with Adam and early stopping on the AUC of
/// `validation`. Returns the best-validation parameters. When `validation`
/// has a single class the last epoch is kept.
pub fn pretrain_cf(
    model: &CfModel,
    split: &DatasetSplit,
    validation: &[Interaction],
) -> Result<(ParamStore, CfPretrainReport)> {
    if split.train.is_empty() {
        return Err(CcfError::Data("CF pretraining needs a non-empty train split".into()));
    }
    let cfg = &model.config;
    let mut params = model.init_params();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cf);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let trainable = |name: &str| name.starts_with(model.prefix());

    let mut best = params.clone();
    let mut best_auc: Option<f64> = None;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xs: Vec<Interaction> = chunk.iter().map(|&i| split.train[i]).collect();
            let grads = {
                let mut sess = Session::new(&params, &trainable);
                let loss = pretrain_loss(model, &mut sess, split, &xs)?;
                let lv = sess.tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(CcfError::Numeric(format!("CF loss diverged at epoch {epoch}")));
                }
                total += lv * xs.len() as f64;
                sess.gradients(loss)?
            };
            opt.step(params.iter_mut(), &grads)?;
        }
        let train_loss = total / split.train.len() as f64;
        let val_auc = match validation {
            [] => None,
            v => {
                let scores = model.predict(&params, split, v)?;
                let labels: Vec<u8> = v.iter().map(|x| x.label).collect();
                match auc(&scores, &labels) {
                    Ok(a) => Some(a),
                    Err(CcfError::AucUndefined) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        info!(
            "cf {} epoch {epoch}: train_loss {train_loss:.5} val_auc {}",
            model.backend.as_str(),
            val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        epochs.push(CfEpoch {
            epoch,
            train_loss,
            val_auc,
        });
        match val_auc {
            Some(a) if best_auc.is_none_or(|b| a > b) => {
                best_auc = Some(a);
                best_epoch = epoch;
                best = params.clone();
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            None => {
                best = params.clone();
                best_epoch = epoch;
            }
        }
    }
    Ok((
        best,
        CfPretrainReport {
            epochs,
            best_epoch,
            best_val_auc: best_auc,
        },
    ))
}
