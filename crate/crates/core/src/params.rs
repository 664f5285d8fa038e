//! Named parameter storage and per-step binding onto a tape.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{CcfError, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, GradCheckReport, Gradients, Tape, Tensor, Var};

/// Parameter groups. Names decide membership: `cf.*` encoder, `alg*`
/// alignment, `gate*` gates, `lora.*` adapters, `lm.*` base language model.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Alignment,
    Gate,
    Adapter,
    BaseLm,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if name.starts_with("cf.") {
            Some(ParamGroup::Encoder)
        } else if name.starts_with("alg") {
            Some(ParamGroup::Alignment)
        } else if name.starts_with("gate") {
            Some(ParamGroup::Gate)
        } else if name.starts_with("lora.") {
            Some(ParamGroup::Adapter)
        } else if name.starts_with("lm.") {
            Some(ParamGroup::BaseLm)
        } else {
            None
        }
    }
}

#[derive(Clone, Default, Debug, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) {
        self.insert(name, Tensor::uniform(shape, -bound, bound, rng));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors
            .get(name)
            .ok_or_else(|| CcfError::Checkpoint(format!("parameter {name} not found")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Mutable access, copying any storage still shared with a tape.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| CcfError::Checkpoint(format!("parameter {name} not found")))
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| ParamGroup::of(k) == Some(group))
            .cloned()
            .collect()
    }

    /// Copies every tensor of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), Arc::clone(v));
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), Arc::clone(v)))
                .collect(),
        }
    }

    /// Copy with every `from` name prefix replaced by `to`; other names are
    /// dropped.
    pub fn rename_prefix(&self, from: &str, to: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), Arc::clone(v))))
                .collect(),
        }
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors.iter().map(|(k, v)| (k.clone(), (**v).clone())).collect()
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ParamStore {
            tensors: map.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_map())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_map(read_checkpoint(path)?))
    }

    /// True when both stores hold the same names with bit-identical values.
    pub fn bit_identical(&self, other: &ParamStore, names: &[String]) -> bool {
        names.iter().all(|n| match (self.tensors.get(n), other.tensors.get(n)) {
            (Some(a), Some(b)) => {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        })
    }
}

/// A tape plus lazily bound parameters for one forward/backward pass.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    bound: BTreeMap<String, Var>,
}

fn never(_: &str) -> bool {
    false
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    /// Every parameter is a constant.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &never)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = Arc::clone(self.store.get(name)?);
        let v = self.tape.leaf_shared(t, (self.trainable)(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Runs backward from `loss` and returns gradients of the trainable
    /// parameters that took part in the computation.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if self.tape.requires_grad(v) {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

/// Central finite-difference check of `f` with respect to the named
/// parameters of `store`, perturbing at most `coords_per_param` evenly
/// strided coordinates of each. Kinks are handled as in
/// [`crate::tensor::grad_check`].
pub fn grad_check_params<F>(
    store: &ParamStore,
    names: &[String],
    f: F,
    step: f64,
    coords_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let trainable = |n: &str| names.iter().any(|m| m == n);
    let (f0, analytic) = {
        let mut sess = Session::new(store, &trainable);
        let loss = f(&mut sess)?;
        (sess.tape.value(loss).item(), sess.gradients(loss)?)
    };
    let value = |ps: &ParamStore| -> Result<f64> {
        let mut sess = Session::frozen(ps);
        let loss = f(&mut sess)?;
        Ok(sess.tape.value(loss).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinks: Vec::new(),
    };
    let mut work = store.clone();
    for (input, name) in names.iter().enumerate() {
        let n = store.get(name)?.len();
        let stride = if coords_per_param >= n { 1 } else { n.div_ceil(coords_per_param) };
        let zeros = Tensor::zeros(store.get(name)?.shape());
        let g = analytic.get(name).unwrap_or(&zeros);
        for idx in (0..n).step_by(stride) {
            let orig = store.get(name)?.data()[idx];
            work.get_mut(name)?.data_mut()[idx] = orig + step;
            let fp = value(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig - step;
            let fm = value(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig;
            let central = (fp - fm) / (2.0 * step);
            let rel = (g.data()[idx] - central).abs() / central.abs().max(1.0);
            let (right, left) = ((fp - f0) / step, (f0 - fm) / step);
            if (right - left).abs() > step.sqrt() * (1.0 + right.abs() + left.abs()) {
                report.kinks.push((input, idx, rel));
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_prefixes() {
        assert_eq!(ParamGroup::of("cf.user"), Some(ParamGroup::Encoder));
        assert_eq!(ParamGroup::of("cf.sasrec.wq"), Some(ParamGroup::Encoder));
        assert_eq!(ParamGroup::of("alg.w1"), Some(ParamGroup::Alignment));
        assert_eq!(ParamGroup::of("alg_b.w1"), Some(ParamGroup::Alignment));
        assert_eq!(ParamGroup::of("gate_b2.w0"), Some(ParamGroup::Gate));
        assert_eq!(ParamGroup::of("lora.h0.q.up"), Some(ParamGroup::Adapter));
        assert_eq!(ParamGroup::of("lm.tok"), Some(ParamGroup::BaseLm));
        assert_eq!(ParamGroup::of("other"), None);
    }

    #[test]
    fn frozen_session_yields_no_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut s = Session::frozen(&store);
        let w = s.param("w").unwrap();
        let l = s.tape.sum(w).unwrap();
        assert!(s.gradients(l).unwrap().is_empty());
    }
}
