use rand_chacha::ChaCha8Rng;

use super::CfModel;
use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::tensor::Var;

pub(super) fn init_params(model: &CfModel, p: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let l = model.config.dim;
    let b = model.config.init_bound;
    let n = |s: &str| model.name(&format!("sasrec.{s}"));
    p.init_uniform(&n("pos"), &[model.config.sasrec_max_len.max(1), l], b, rng);
    p.init_uniform(&n("start"), &[1, l], b, rng);
    for w in ["wq", "wk", "wv", "w1", "w2"] {
        p.init_uniform(&n(w), &[l, l], b, rng);
    }
    p.init_const(&n("b1"), &[l], 0.0);
    p.init_const(&n("b2"), &[l], 0.0);
    for ln in ["ln1", "ln2"] {
        p.init_const(&n(&format!("{ln}.g")), &[l], 1.0);
        p.init_const(&n(&format!("{ln}.b")), &[l], 0.0);
    }
}

/// One causal single-head attention block over item + position embeddings;
/// the user vector is the output at the last position.
pub(super) fn encode(model: &CfModel, sess: &mut Session, items: Var, history: &[usize]) -> Result<Var> {
    let max_len = model.config.sasrec_max_len.max(1);
    let hist = &history[history.len().saturating_sub(max_len)..];
    let p = |s: &str| model.name(&format!("sasrec.{s}"));
    let pos = sess.param(&p("pos"))?;
    let x = if hist.is_empty() {
        let start = sess.param(&p("start"))?;
        let p0 = sess.tape.slice_rows(pos, 0, 1)?;
        sess.tape.add(start, p0)?
    } else {
        let e = sess.tape.gather(items, hist)?;
        let pe = sess.tape.slice_rows(pos, 0, hist.len())?;
        sess.tape.add(e, pe)?
    };
    let t = sess.tape.value(x).rows();
    let l = sess.tape.value(x).cols();

    let wq = sess.param(&p("wq"))?;
    let wk = sess.param(&p("wk"))?;
    let wv = sess.param(&p("wv"))?;
    let q = sess.tape.matmul(x, wq)?;
    let k = sess.tape.matmul(x, wk)?;
    let v = sess.tape.matmul(x, wv)?;
    let s = sess.tape.matmul_nt(q, k)?;
    let s = sess.tape.scale(s, 1.0 / (l as f64).sqrt())?;
    let a = sess.tape.causal_softmax(s)?;
    let a = sess.tape.matmul(a, v)?;
    let h = sess.tape.add(x, a)?;
    let (g1, b1) = (sess.param(&p("ln1.g"))?, sess.param(&p("ln1.b"))?);
    let h = sess.tape.layer_norm(h, g1, b1)?;

    let w1 = sess.param(&p("w1"))?;
    let bias1 = sess.param(&p("b1"))?;
    let w2 = sess.param(&p("w2"))?;
    let bias2 = sess.param(&p("b2"))?;
    let f = sess.tape.matmul(h, w1)?;
    let f = sess.tape.add(f, bias1)?;
    let f = sess.tape.relu(f)?;
    let f = sess.tape.matmul(f, w2)?;
    let f = sess.tape.add(f, bias2)?;
    let o = sess.tape.add(h, f)?;
    let (g2, b2) = (sess.param(&p("ln2.g"))?, sess.param(&p("ln2.b"))?);
    let o = sess.tape.layer_norm(o, g2, b2)?;
    sess.tape.slice_rows(o, t - 1, 1)
}
