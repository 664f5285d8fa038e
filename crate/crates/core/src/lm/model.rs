use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{NO, YES};
use crate::error::{CcfError, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::tape::softmax_in_place;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Filled in from the vocabulary when left at 0.
    pub vocab_size: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub init_bound: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 64,
            layers: 2,
            heads: 2,
            d_ff: 256,
            max_len: 256,
            vocab_size: 0,
            lora_rank: 4,
            lora_scale: 2.0 / 4.0,
            init_bound: 0.05,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CcfError::Config(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocabulary of {} tokens is too small", self.vocab_size));
        }
        if self.lora_rank == 0 || self.lora_rank >= self.d_model {
            return bad(format!("lora rank {} must be in 1..{}", self.lora_rank, self.d_model));
        }
        if self.layers == 0 || self.max_len == 0 || self.d_ff == 0 {
            return bad("layers, max_len and d_ff must be positive".into());
        }
        Ok(())
    }
}

/// `(p_yes, p_no, score)` at the answer position.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub p_yes: f64,
    pub p_no: f64,
    pub score: f64,
}

/// Softmax masses of "yes" and "no" in one logit row, and the normalized
/// score `p_yes / (p_yes + p_no)`.
pub fn yes_no_probs(logits: &[f64]) -> Prediction {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let (p_yes, p_no) = (p[YES as usize], p[NO as usize]);
    // the pairwise form avoids 0/0 when both masses underflow
    let gap = logits[YES as usize] - logits[NO as usize];
    Prediction {
        p_yes,
        p_no,
        score: crate::tensor::tape::sigmoid(gap),
    }
}

/// Pre-norm causal transformer over externally supplied input embeddings,
/// with rank-r adapters on the query and value projections.
#[derive(Clone, Debug)]
pub struct TinyLm {
    pub config: LmConfig,
}

fn p(layer: usize, s: &str) -> String {
    format!("lm.h{layer}.{s}")
}

fn lora(layer: usize, proj: &str, part: &str) -> String {
    format!("lora.h{layer}.{proj}.{part}")
}

impl TinyLm {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        Ok(TinyLm { config })
    }

    pub fn init_params(&self) -> ParamStore {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut ps = ParamStore::new();
        let (d, b) = (c.d_model, c.init_bound);
        ps.init_uniform("lm.tok", &[c.vocab_size, d], b, &mut rng);
        ps.init_uniform("lm.pos", &[c.max_len, d], b, &mut rng);
        for l in 0..c.layers {
            for ln in ["ln1", "ln2"] {
                ps.init_const(&p(l, &format!("{ln}.g")), &[d], 1.0);
                ps.init_const(&p(l, &format!("{ln}.b")), &[d], 0.0);
            }
            for w in ["q", "k", "v", "o"] {
                ps.init_uniform(&p(l, &format!("w{w}")), &[d, d], b, &mut rng);
                ps.init_const(&p(l, &format!("b{w}")), &[d], 0.0);
            }
            ps.init_uniform(&p(l, "w1"), &[d, c.d_ff], b, &mut rng);
            ps.init_const(&p(l, "b1"), &[c.d_ff], 0.0);
            ps.init_uniform(&p(l, "w2"), &[c.d_ff, d], b, &mut rng);
            ps.init_const(&p(l, "b2"), &[d], 0.0);
            for proj in ["q", "v"] {
                let bound = 1.0 / (d as f64).sqrt();
                ps.init_uniform(&lora(l, proj, "down"), &[d, c.lora_rank], bound, &mut rng);
                ps.init_const(&lora(l, proj, "up"), &[c.lora_rank, d], 0.0);
            }
        }
        ps.init_const("lm.lnf.g", &[d], 1.0);
        ps.init_const("lm.lnf.b", &[d], 0.0);
        ps.init_uniform("lm.head", &[d, c.vocab_size], b, &mut rng);
        ps.init_const("lm.head_b", &[c.vocab_size], 0.0);
        ps
    }

    /// Token-embedding rows for ids.
    pub fn embed(&self, sess: &mut Session, ids: &[u32]) -> Result<Var> {
        let table = sess.param("lm.tok")?;
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        sess.tape.gather(table, &rows)
    }

    fn linear(&self, sess: &mut Session, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = sess.param(w)?;
        let b = sess.param(b)?;
        let y = sess.tape.matmul(x, w)?;
        sess.tape.add(y, b)
    }

    /// `x W + b`, plus `scale · (x A) B` for adapted projections.
    pub fn project(&self, sess: &mut Session, layer: usize, proj: &str, x: Var, adapters: bool) -> Result<Var> {
        let base = self.linear(sess, x, &p(layer, &format!("w{proj}")), &p(layer, &format!("b{proj}")))?;
        if !adapters || !(proj == "q" || proj == "v") {
            return Ok(base);
        }
        let down = sess.param(&lora(layer, proj, "down"))?;
        let up = sess.param(&lora(layer, proj, "up"))?;
        let h = sess.tape.matmul(x, down)?;
        let h = sess.tape.matmul(h, up)?;
        let h = sess.tape.scale(h, self.config.lora_scale)?;
        sess.tape.add(base, h)
    }

    fn layer_norm(&self, sess: &mut Session, x: Var, prefix: &str) -> Result<Var> {
        let g = sess.param(&format!("{prefix}.g"))?;
        let b = sess.param(&format!("{prefix}.b"))?;
        sess.tape.layer_norm(x, g, b)
    }

    /// One block. With `last_only` the queries, residual and feed-forward
    /// are restricted to the final position.
    fn block(&self, sess: &mut Session, l: usize, x: Var, last_only: bool, adapters: bool) -> Result<Var> {
        let c = &self.config;
        let t = sess.tape.value(x).rows();
        let xn = self.layer_norm(sess, x, &p(l, "ln1"))?;
        let q_in = if last_only { sess.tape.slice_rows(xn, t - 1, 1)? } else { xn };
        let q = self.project(sess, l, "q", q_in, adapters)?;
        let k = self.project(sess, l, "k", xn, adapters)?;
        let v = self.project(sess, l, "v", xn, adapters)?;
        let dh = c.d_model / c.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = sess.tape.slice_cols(q, h * dh, dh)?;
            let kh = sess.tape.slice_cols(k, h * dh, dh)?;
            let vh = sess.tape.slice_cols(v, h * dh, dh)?;
            let s = sess.tape.matmul_nt(qh, kh)?;
            let s = sess.tape.scale(s, inv)?;
            let a = sess.tape.causal_softmax(s)?;
            heads.push(sess.tape.matmul(a, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { sess.tape.concat_cols(&heads)? };
        let o = self.project(sess, l, "o", o, adapters)?;
        let res = if last_only { sess.tape.slice_rows(x, t - 1, 1)? } else { x };
        let h = sess.tape.add(res, o)?;

        let hn = self.layer_norm(sess, h, &p(l, "ln2"))?;
        let f = self.linear(sess, hn, &p(l, "w1"), &p(l, "b1"))?;
        let f = sess.tape.relu(f)?;
        let f = self.linear(sess, f, &p(l, "w2"), &p(l, "b2"))?;
        sess.tape.add(h, f)
    }

    fn run(&self, sess: &mut Session, x: Var, last_only: bool, adapters: bool) -> Result<Var> {
        let c = &self.config;
        let (t, d) = sess.tape.value(x).dims2();
        if d != c.d_model {
            return Err(CcfError::shape("lm_forward", &[t, d], &[t, c.d_model]));
        }
        if t > c.max_len {
            return Err(CcfError::invalid(
                "lm_forward",
                format!("sequence of {t} positions exceeds max_len {}", c.max_len),
            ));
        }
        let pos = sess.param("lm.pos")?;
        let pos = sess.tape.slice_rows(pos, 0, t)?;
        let mut h = sess.tape.add(x, pos)?;
        for l in 0..c.layers {
            h = self.block(sess, l, h, last_only && l + 1 == c.layers, adapters)?;
        }
        let h = self.layer_norm(sess, h, "lm.lnf")?;
        self.linear(sess, h, "lm.head", "lm.head_b")
    }

    /// Logits `[T×|V|]` for an input-embedding sequence `[T×d]`.
    pub fn forward(&self, sess: &mut Session, x: Var, adapters: bool) -> Result<Var> {
        self.run(sess, x, false, adapters)
    }

    /// Logits `[1×|V|]` at the final position only; equal to the last row of
    /// [`TinyLm::forward`].
    pub fn forward_last(&self, sess: &mut Session, x: Var, adapters: bool) -> Result<Var> {
        self.run(sess, x, true, adapters)
    }
}

/// `[1×2]` tape node holding `(p_yes, p_no)` from a logit row.
pub fn yes_no_node(sess: &mut Session, logits_row: Var) -> Result<Var> {
    let probs = sess.tape.softmax(logits_row)?;
    debug_assert_eq!(NO, YES + 1);
    sess.tape.slice_cols(probs, YES as usize, 2)
}
