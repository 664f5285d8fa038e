//! Alignment of CF embeddings into the LM input space, the two-input gate,
//! dimension-wise fusion with title-token embeddings, and assembly of the
//! final input-embedding sequence of a hybrid prompt.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cf::{CfModel, CfTables};
use crate::error::{CcfError, Result};
use crate::lm::TinyLm;
use crate::params::{ParamStore, Session};
use crate::prompt::{HybridPrompt, HybridToken, PromptBuilder};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    Sigmoid,
    /// No squashing: α is the plain sum of the two sub-network outputs.
    Raw,
}

/// How item slots enter the sequence.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injection {
    /// Every title token is fused with the aligned CF vector.
    Fused,
    /// Title tokens stay semantic; the aligned CF vector follows as one
    /// extra position.
    Appended,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum GateMode {
    Learned,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// 0 means "same as the LM dimension".
    pub d_hidden: usize,
    pub activation: Activation,
    pub gate_activation: GateActivation,
    pub gate_layers: usize,
    /// Gate output width 1 instead of d.
    pub scalar_gate: bool,
    pub gate_mode: GateMode,
    pub injection: Injection,
    /// Separate alignment networks for users and items.
    pub per_side_alignment: bool,
    pub init_bound: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_hidden: 0,
            activation: Activation::Relu,
            gate_activation: GateActivation::Sigmoid,
            gate_layers: 1,
            scalar_gate: false,
            gate_mode: GateMode::Learned,
            injection: Injection::Fused,
            per_side_alignment: false,
            init_bound: 0.05,
            seed: 0,
        }
    }
}

/// Alignment and gate networks over one or two CF backends.
#[derive(Clone, Debug)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub d_model: usize,
    pub backends: Vec<CfModel>,
}

const ALG: [&str; 2] = ["alg", "alg_b"];
const GATES: [(&str, &str); 2] = [("gate1", "gate2"), ("gate_b1", "gate_b2")];

/// Per-session handles for the CF tables of every backend.
#[derive(Clone, Debug)]
pub struct BoundCf {
    tables: Vec<CfTables>,
}

impl FusionNet {
    pub fn new(config: FusionConfig, d_model: usize, backends: Vec<CfModel>) -> Result<Self> {
        if backends.len() > 2 {
            return Err(CcfError::Config("at most two CF backends can be fused".into()));
        }
        if backends.len() == 2 && backends[0].prefix() == backends[1].prefix() {
            return Err(CcfError::Config("dual fusion needs distinct parameter prefixes".into()));
        }
        if config.gate_layers == 0 {
            return Err(CcfError::Config("gate_layers must be at least 1".into()));
        }
        Ok(FusionNet {
            config,
            d_model,
            backends,
        })
    }

    /// A net without CF backends, for prompts that carry no slots.
    pub fn text_only(d_model: usize) -> Self {
        FusionNet {
            config: FusionConfig::default(),
            d_model,
            backends: Vec::new(),
        }
    }

    fn d_hidden(&self) -> usize {
        if self.config.d_hidden == 0 {
            self.d_model
        } else {
            self.config.d_hidden
        }
    }

    fn gate_width(&self) -> usize {
        if self.config.scalar_gate {
            1
        } else {
            self.d_model
        }
    }

    fn alignment_prefixes(&self, b: usize) -> Vec<String> {
        let mut v = vec![ALG[b].to_string()];
        if self.config.per_side_alignment {
            v.push(format!("{}_user", ALG[b]));
        }
        v
    }

    fn uses_gates(&self) -> bool {
        self.config.injection == Injection::Fused && self.config.gate_mode == GateMode::Learned
    }

    /// Fresh alignment and gate weights, uniform in `±init_bound`, biases 0.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xa11_9a7e);
        let mut ps = ParamStore::new();
        let bound = self.config.init_bound;
        let (d, h, w) = (self.d_model, self.d_hidden(), self.gate_width());
        for (b, cf) in self.backends.iter().enumerate() {
            for pre in self.alignment_prefixes(b) {
                ps.init_uniform(&format!("{pre}.w1"), &[cf.dim(), h], bound, &mut rng);
                ps.init_const(&format!("{pre}.b1"), &[h], 0.0);
                ps.init_uniform(&format!("{pre}.w2"), &[h, d], bound, &mut rng);
                ps.init_const(&format!("{pre}.b2"), &[d], 0.0);
            }
            if self.uses_gates() {
                for g in [GATES[b].0, GATES[b].1] {
                    for k in 0..self.config.gate_layers {
                        let out = if k + 1 == self.config.gate_layers { w } else { d };
                        ps.init_uniform(&format!("{g}.w{k}"), &[d, out], bound, &mut rng);
                        ps.init_const(&format!("{g}.b{k}"), &[out], 0.0);
                    }
                }
            }
        }
        ps
    }

    fn act(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    /// ALG: `W₂ act(W₁ x + b₁) + b₂`, rows of `x` are CF vectors.
    pub fn align(&self, sess: &mut Session, prefix: &str, x: Var) -> Result<Var> {
        let w1 = sess.param(&format!("{prefix}.w1"))?;
        let l = sess.store().get(&format!("{prefix}.w1"))?.rows();
        let cols = sess.tape.value(x).cols();
        if cols != l {
            return Err(CcfError::shape("align", sess.tape.value(x).shape(), &[1, l]));
        }
        let b1 = sess.param(&format!("{prefix}.b1"))?;
        let w2 = sess.param(&format!("{prefix}.w2"))?;
        let b2 = sess.param(&format!("{prefix}.b2"))?;
        let h = sess.tape.matmul(x, w1)?;
        let h = sess.tape.add(h, b1)?;
        let h = self.act(&mut sess.tape, h)?;
        let y = sess.tape.matmul(h, w2)?;
        sess.tape.add(y, b2)
    }

    fn gate_mlp(&self, sess: &mut Session, name: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for k in 0..self.config.gate_layers {
            let w = sess.param(&format!("{name}.w{k}"))?;
            let b = sess.param(&format!("{name}.b{k}"))?;
            h = sess.tape.matmul(h, w)?;
            h = sess.tape.add(h, b)?;
            if k + 1 < self.config.gate_layers {
                h = self.act(&mut sess.tape, h)?;
            }
        }
        Ok(h)
    }

    /// `α = act(G₁(x̃cf) + G₂(x_sm))`, one row per semantic token.
    pub fn gate_alpha(&self, sess: &mut Session, backend: usize, cf: Var, sm: Var) -> Result<Var> {
        let d = self.d_model;
        for v in [cf, sm] {
            if sess.tape.value(v).cols() != d {
                return Err(CcfError::shape("gate_alpha", sess.tape.value(v).shape(), &[1, d]));
            }
        }
        let (g1, g2) = GATES[backend];
        let a = self.gate_mlp(sess, g1, cf)?;
        let b = self.gate_mlp(sess, g2, sm)?;
        let s = sess.tape.add(b, a)?;
        match self.config.gate_activation {
            GateActivation::Sigmoid => sess.tape.sigmoid(s),
            GateActivation::Raw => Ok(s),
        }
    }

    pub fn bind(&self, sess: &mut Session) -> Result<BoundCf> {
        let tables = self
            .backends
            .iter()
            .map(|b| b.tables(sess))
            .collect::<Result<_>>()?;
        Ok(BoundCf { tables })
    }

    /// Aligned CF row of an item for backend `b`.
    pub fn aligned_item(&self, sess: &mut Session, bound: &BoundCf, b: usize, item: u32) -> Result<Var> {
        let cf = &self.backends[b];
        let row = cf.index.item(item)?;
        let x = cf.enc_items(sess, &bound.tables[b], &[row])?;
        self.align(sess, ALG[b], x)
    }

    /// Aligned CF row of a user from backend 0.
    pub fn aligned_user(&self, sess: &mut Session, bound: &BoundCf, user: u32, history: &[usize]) -> Result<Var> {
        let cf = self
            .backends
            .first()
            .ok_or_else(|| CcfError::Config("user slot present but no CF backend configured".into()))?;
        let row = cf.index.user(user)?;
        let x = cf.enc_user(sess, &bound.tables[0], row, history)?;
        let prefix = if self.config.per_side_alignment { "alg_user" } else { ALG[0] };
        self.align(sess, prefix, x)
    }

    fn fixed_alpha(&self, tape: &mut Tape, rows: usize, value: f64) -> Var {
        tape.constant(Tensor::full(&[rows, self.gate_width()], value))
    }

    /// Title-token rows of one item slot, fused with every backend.
    pub fn item_rows(&self, sess: &mut Session, bound: &BoundCf, sm: Var, item: u32) -> Result<Var> {
        if self.backends.is_empty() {
            return Err(CcfError::Config("item slot present but no CF backend configured".into()));
        }
        let rows = sess.tape.value(sm).rows();
        match self.config.injection {
            Injection::Appended => {
                let c = self.aligned_item(sess, bound, 0, item)?;
                sess.tape.concat_rows(&[sm, c])
            }
            Injection::Fused => {
                let mut out = sm;
                for b in 0..self.backends.len() {
                    let c = self.aligned_item(sess, bound, b, item)?;
                    let alpha = match self.config.gate_mode {
                        GateMode::Learned => self.gate_alpha(sess, b, c, sm)?,
                        GateMode::Fixed(v) => self.fixed_alpha(&mut sess.tape, rows, v),
                    };
                    let term = scaled_cf(&mut sess.tape, c, alpha)?;
                    out = sess.tape.add(out, term)?;
                }
                Ok(out)
            }
        }
    }

    /// Positions a single item slot occupies beyond its title tokens.
    pub fn slot_extra(&self) -> usize {
        match self.config.injection {
            Injection::Fused => 0,
            Injection::Appended => 1,
        }
    }

    /// The `[T×d]` input sequence of a prompt: text tokens look up the LM
    /// table, the user slot takes the aligned user vector, and each item slot
    /// expands over its title tokens.
    pub fn assemble(
        &self,
        sess: &mut Session,
        bound: &BoundCf,
        lm: &TinyLm,
        builder: &PromptBuilder,
        prompt: &HybridPrompt,
        cf_history: &[usize],
    ) -> Result<Var> {
        let mut parts = Vec::new();
        let mut run: Vec<u32> = Vec::new();
        for t in &prompt.tokens {
            match *t {
                HybridToken::Text(id) => run.push(id),
                HybridToken::UserSlot(u) => {
                    if !run.is_empty() {
                        parts.push(lm.embed(sess, &std::mem::take(&mut run))?);
                    }
                    parts.push(self.aligned_user(sess, bound, u, cf_history)?);
                }
                HybridToken::ItemSlot(i) => {
                    if !run.is_empty() {
                        parts.push(lm.embed(sess, &std::mem::take(&mut run))?);
                    }
                    let sm = lm.embed(sess, builder.title_ids(i)?)?;
                    parts.push(self.item_rows(sess, bound, sm, i)?);
                }
            }
        }
        if !run.is_empty() {
            parts.push(lm.embed(sess, &run)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        sess.tape.concat_rows(&parts)
    }
}

/// `α ⊙ c` for `α` of shape `[T×d]` or `[T×1]`, `c` a `[1×d]` row.
fn scaled_cf(tape: &mut Tape, c: Var, alpha: Var) -> Result<Var> {
    if tape.value(alpha).cols() == 1 && tape.value(c).cols() != 1 {
        tape.matmul(alpha, c)
    } else {
        tape.mul(alpha, c)
    }
}

/// `x_sm + α ⊙ x̃cf` per token row.
pub fn fuse_token(tape: &mut Tape, sm: Var, cf: Var, alpha: Var) -> Result<Var> {
    let d = tape.value(sm).cols();
    if tape.value(cf).cols() != d || tape.value(cf).rows() != 1 {
        return Err(CcfError::shape("fuse_token", tape.value(sm).shape(), tape.value(cf).shape()));
    }
    let (ar, ac) = tape.value(alpha).dims2();
    if ar != tape.value(sm).rows() || (ac != d && ac != 1) {
        return Err(CcfError::shape("fuse_token", tape.value(sm).shape(), tape.value(alpha).shape()));
    }
    let term = scaled_cf(tape, cf, alpha)?;
    tape.add(sm, term)
}

/// `x_sm + α ⊙ x̃cf₁ + β ⊙ x̃cf₂`.
pub fn fuse_dual(tape: &mut Tape, sm: Var, cf1: Var, cf2: Var, alpha: Var, beta: Var) -> Result<Var> {
    let first = fuse_token(tape, sm, cf1, alpha)?;
    if tape.value(cf2).shape() != tape.value(cf1).shape() {
        return Err(CcfError::shape("fuse_dual", tape.value(cf1).shape(), tape.value(cf2).shape()));
    }
    let term = scaled_cf(tape, cf2, beta)?;
    tape.add(first, term)
}

/// Ratio of the distance between the two point-cloud centroids to the mean
/// of the two within-cloud spreads (mean distance to own centroid).
pub fn separation_statistic(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn centroid(xs: &[Vec<f64>]) -> Vec<f64> {
        let mut c = vec![0.0; xs[0].len()];
        for x in xs {
            for (ci, xi) in c.iter_mut().zip(x) {
                *ci += xi;
            }
        }
        c.iter_mut().for_each(|v| *v /= xs.len() as f64);
        c
    }
    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (ca, cb) = (centroid(a), centroid(b));
    let spread = |xs: &[Vec<f64>], c: &[f64]| xs.iter().map(|x| dist(x, c)).sum::<f64>() / xs.len() as f64;
    let between = dist(&ca, &cb);
    if between == 0.0 {
        return 0.0;
    }
    let within = (spread(a, &ca) + spread(b, &cb)) / 2.0;
    if within == 0.0 {
        return f64::INFINITY;
    }
    between / within
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_identities() {
        let mut t = Tape::new();
        let sm = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let cf = t.constant(Tensor::row(vec![0.25, -0.5, 4.0]));
        let zero = t.constant(Tensor::zeros(&[2, 3]));
        let one = t.constant(Tensor::full(&[2, 3], 1.0));
        let half = t.constant(Tensor::full(&[2, 1], 0.5));
        let z = fuse_token(&mut t, sm, cf, zero).unwrap();
        assert_eq!(t.value(z), t.value(sm));
        let a1 = fuse_token(&mut t, sm, cf, one).unwrap();
        let plain = t.add(sm, cf).unwrap();
        assert_eq!(t.value(a1), t.value(plain));
        let s = fuse_token(&mut t, sm, cf, half).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                let want = t.value(sm).row_slice(r)[j] + 0.5 * t.value(cf).data()[j];
                assert_eq!(t.value(s).row_slice(r)[j], want);
            }
        }
        let bad = t.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(fuse_token(&mut t, sm, bad, one).is_err());
    }

    #[test]
    fn separation_of_identical_clouds_is_zero() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        assert_eq!(separation_statistic(&a, &a), 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 10.0, v[1]]).collect();
        assert!(separation_statistic(&a, &b) > 1.0);
    }
}
