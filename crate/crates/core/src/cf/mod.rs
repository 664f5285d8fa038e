//! Collaborative-filtering encoders: matrix factorization, LightGCN and a
//! light self-attentive sequence encoder, with a sigmoid-dot interaction
//! predictor.

mod graph;
mod pretrain;
mod sasrec;

use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{user_history, DatasetSplit, IdIndex, Interaction};
use crate::error::{CcfError, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::tape::{sigmoid, Edge};
use crate::tensor::Var;

pub use graph::{dense_propagate_oracle, lightgcn_propagate, BipartiteGraph};
pub use pretrain::{pretrain_cf, pretrain_loss, CfEpoch, CfPretrainReport};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfBackend {
    Mf,
    LightGcn,
    SasRec,
}

impl CfBackend {
    pub fn as_str(self) -> &'static str {
        match self {
            CfBackend::Mf => "mf",
            CfBackend::LightGcn => "lightgcn",
            CfBackend::SasRec => "sasrec",
        }
    }
}

impl FromStr for CfBackend {
    type Err = CcfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mf" => Ok(CfBackend::Mf),
            "lightgcn" => Ok(CfBackend::LightGcn),
            "sasrec" => Ok(CfBackend::SasRec),
            other => Err(CcfError::Config(format!("unknown CF backend {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub dim: usize,
    pub lightgcn_layers: usize,
    pub sasrec_max_len: usize,
    pub init_bound: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            dim: 32,
            lightgcn_layers: 2,
            sasrec_max_len: 20,
            init_bound: 0.1,
            lr: 1e-2,
            batch_size: 1024,
            max_epochs: 50,
            patience: 3,
            seed: 0,
        }
    }
}

/// A CF backend bound to a dataset. Its weights live in a [`ParamStore`]
/// under `<prefix>user`, `<prefix>item` and `<prefix><backend>.*`.
#[derive(Clone, Debug)]
pub struct CfModel {
    pub backend: CfBackend,
    pub config: CfConfig,
    pub index: Arc<IdIndex>,
    prefix: String,
    edges: Option<Arc<[Edge]>>,
}

/// Tape handles for the (propagated) embedding tables of one session.
#[derive(Copy, Clone, Debug)]
pub struct CfTables {
    pub users: Option<Var>,
    pub items: Var,
}

impl CfModel {
    pub fn new(backend: CfBackend, config: CfConfig, index: Arc<IdIndex>, split: &DatasetSplit) -> Result<Self> {
        Self::with_prefix(backend, config, index, split, "cf.")
    }

    pub fn with_prefix(
        backend: CfBackend,
        config: CfConfig,
        index: Arc<IdIndex>,
        split: &DatasetSplit,
        prefix: &str,
    ) -> Result<Self> {
        if !prefix.starts_with("cf.") {
            return Err(CcfError::Config(format!("CF parameter prefix must start with cf., got {prefix}")));
        }
        let edges = match backend {
            CfBackend::LightGcn => {
                let positives: Vec<Interaction> = split.train.iter().filter(|x| x.label == 1).copied().collect();
                Some(BipartiteGraph::from_interactions(&positives, &index)?.normalized_edges())
            }
            _ => None,
        };
        Ok(CfModel {
            backend,
            config,
            index,
            prefix: prefix.to_string(),
            edges,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn name(&self, suffix: &str) -> String {
        format!("{}{suffix}", self.prefix)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Fresh parameters: tables uniform in `±init_bound`, fixed seed.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut p = ParamStore::new();
        let l = self.config.dim;
        let b = self.config.init_bound;
        if self.backend != CfBackend::SasRec {
            p.init_uniform(&self.name("user"), &[self.index.num_users(), l], b, &mut rng);
        }
        p.init_uniform(&self.name("item"), &[self.index.num_items(), l], b, &mut rng);
        if self.backend == CfBackend::SasRec {
            sasrec::init_params(self, &mut p, &mut rng);
        }
        p
    }

    /// Binds the tables for one session; LightGCN propagates them here.
    pub fn tables(&self, sess: &mut Session) -> Result<CfTables> {
        let items = sess.param(&self.name("item"))?;
        match self.backend {
            CfBackend::Mf => Ok(CfTables {
                users: Some(sess.param(&self.name("user"))?),
                items,
            }),
            CfBackend::LightGcn => {
                let users = sess.param(&self.name("user"))?;
                let edges = self.edges.clone().expect("lightgcn graph built at construction");
                let (u, i) = lightgcn_propagate(&mut sess.tape, users, items, edges, self.config.lightgcn_layers)?;
                Ok(CfTables {
                    users: Some(u),
                    items: i,
                })
            }
            CfBackend::SasRec => Ok(CfTables { users: None, items }),
        }
    }

    /// `x^CF_u` as a `[1×l]` row. `history` holds item row indices, oldest
    /// first; only the sequence backend reads it.
    pub fn enc_user(&self, sess: &mut Session, tables: &CfTables, user: usize, history: &[usize]) -> Result<Var> {
        match (self.backend, tables.users) {
            (CfBackend::SasRec, _) => sasrec::encode(self, sess, tables.items, history),
            (_, Some(u)) => {
                if user >= self.index.num_users() {
                    return Err(CcfError::invalid("enc_user", format!("user row {user} out of range")));
                }
                sess.tape.gather(u, &[user])
            }
            (_, None) => unreachable!("non-sequence backends bind a user table"),
        }
    }

    /// `x^CF_i` rows for item row indices.
    pub fn enc_items(&self, sess: &mut Session, tables: &CfTables, items: &[usize]) -> Result<Var> {
        if let Some(&bad) = items.iter().find(|&&i| i >= self.index.num_items()) {
            return Err(CcfError::invalid("enc_item", format!("item row {bad} out of range")));
        }
        sess.tape.gather(tables.items, items)
    }

    /// Item row indices of the user's positive train history before `ts`.
    pub fn history_rows(&self, split: &DatasetSplit, user: u32, ts: i64) -> Result<Vec<usize>> {
        user_history(split, user, ts, self.config.sasrec_max_len)
            .into_iter()
            .map(|i| self.index.item(i))
            .collect()
    }

    /// Frozen `x^CF_u` for a user id.
    pub fn user_vector(&self, params: &ParamStore, user: u32, history: &[u32]) -> Result<Vec<f64>> {
        let u = self.index.user(user)?;
        let hist: Vec<usize> = history.iter().map(|&i| self.index.item(i)).collect::<Result<_>>()?;
        let mut sess = Session::frozen(params);
        let tables = self.tables(&mut sess)?;
        let v = self.enc_user(&mut sess, &tables, u, &hist)?;
        Ok(sess.tape.value(v).data().to_vec())
    }

    /// Frozen `x^CF_i` for an item id.
    pub fn item_vector(&self, params: &ParamStore, item: u32) -> Result<Vec<f64>> {
        let i = self.index.item(item)?;
        let mut sess = Session::frozen(params);
        let tables = self.tables(&mut sess)?;
        let v = self.enc_items(&mut sess, &tables, &[i])?;
        Ok(sess.tape.value(v).data().to_vec())
    }

    /// Propagated `(users, items)` tables of a table backend, detached.
    pub fn frozen_tables(&self, params: &ParamStore) -> Result<(crate::tensor::Tensor, crate::tensor::Tensor)> {
        let mut sess = Session::frozen(params);
        let t = self.tables(&mut sess)?;
        let users = t
            .users
            .ok_or_else(|| CcfError::Config(format!("{} has no user table", self.backend.as_str())))?;
        Ok((sess.tape.value(users).clone(), sess.tape.value(t.items).clone()))
    }

    /// Scores interactions with the frozen model.
    pub fn predict(&self, params: &ParamStore, split: &DatasetSplit, xs: &[Interaction]) -> Result<Vec<f64>> {
        let mut sess = Session::frozen(params);
        let logits = pretrain::batch_logits(self, &mut sess, split, xs)?;
        Ok(sess.tape.value(logits).data().iter().map(|&z| sigmoid(z)).collect())
    }
}

/// The non-parametric interaction network: `σ(x_u · x_i)`.
pub fn int_predict(user: &[f64], item: &[f64]) -> Result<f64> {
    if user.len() != item.len() {
        return Err(CcfError::shape("int_predict", &[user.len()], &[item.len()]));
    }
    Ok(sigmoid(user.iter().zip(item).map(|(a, b)| a * b).sum()))
}
