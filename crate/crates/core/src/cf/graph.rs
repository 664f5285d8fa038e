use std::collections::BTreeSet;
use std::sync::Arc;

use crate::dataset::{IdIndex, Interaction};
use crate::error::Result;
use crate::tensor::tape::Edge;
use crate::tensor::{Tape, Tensor, Var};

/// User–item graph over positive train interactions. Node `u` is user row
/// `u`; node `num_users + i` is item row `i`.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub edges: Vec<(usize, usize)>,
    pub user_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
}

impl BipartiteGraph {
    pub fn from_interactions(positives: &[Interaction], index: &IdIndex) -> Result<Self> {
        let mut pairs = BTreeSet::new();
        for x in positives {
            pairs.insert((index.user(x.user)?, index.item(x.item)?));
        }
        Ok(Self::from_edges(index.num_users(), index.num_items(), pairs.into_iter().collect()))
    }

    pub fn from_edges(num_users: usize, num_items: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut user_degree = vec![0; num_users];
        let mut item_degree = vec![0; num_items];
        for &(u, i) in &edges {
            user_degree[u] += 1;
            item_degree[i] += 1;
        }
        BipartiteGraph {
            num_users,
            num_items,
            edges,
            user_degree,
            item_degree,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Symmetrically normalized propagation edges. Isolated nodes get a unit
    /// self-loop so they keep their layer-0 embedding at every layer.
    pub fn normalized_edges(&self) -> Arc<[Edge]> {
        let nu = self.num_users;
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for &(u, i) in &self.edges {
            let w = 1.0 / ((self.user_degree[u] * self.item_degree[i]) as f64).sqrt();
            out.push(Edge { dst: u, src: nu + i, weight: w });
            out.push(Edge { dst: nu + i, src: u, weight: w });
        }
        for (u, &d) in self.user_degree.iter().enumerate() {
            if d == 0 {
                out.push(Edge { dst: u, src: u, weight: 1.0 });
            }
        }
        for (i, &d) in self.item_degree.iter().enumerate() {
            if d == 0 {
                out.push(Edge { dst: nu + i, src: nu + i, weight: 1.0 });
            }
        }
        out.into()
    }
}

/// LightGCN: `E⁽ᵏ⁺¹⁾ = Â E⁽ᵏ⁾`, final embedding the mean over layers `0..=L`.
/// Returns the propagated `(users, items)` tables.
pub fn lightgcn_propagate(
    tape: &mut Tape,
    users: Var,
    items: Var,
    edges: Arc<[Edge]>,
    layers: usize,
) -> Result<(Var, Var)> {
    if layers == 0 {
        return Ok((users, items));
    }
    let nu = tape.value(users).rows();
    let ni = tape.value(items).rows();
    let e0 = tape.concat_rows(&[users, items])?;
    let mut cur = e0;
    let mut acc = e0;
    for _ in 0..layers {
        cur = tape.edge_aggregate(cur, Arc::clone(&edges), nu + ni)?;
        acc = tape.add(acc, cur)?;
    }
    let mean = tape.scale(acc, 1.0 / (layers + 1) as f64)?;
    let u = tape.slice_rows(mean, 0, nu)?;
    let i = tape.slice_rows(mean, nu, ni)?;
    Ok((u, i))
}

/// Dense reference: builds the normalized adjacency matrix explicitly and
/// iterates matrix powers. Used to cross-check [`lightgcn_propagate`].
pub fn dense_propagate_oracle(graph: &BipartiteGraph, stacked: &Tensor, layers: usize) -> Tensor {
    let n = graph.num_nodes();
    let c = stacked.cols();
    let nu = graph.num_users;
    let mut adj = vec![0.0; n * n];
    for &(u, i) in &graph.edges {
        let w = 1.0 / ((graph.user_degree[u] * graph.item_degree[i]) as f64).sqrt();
        adj[u * n + nu + i] += w;
        adj[(nu + i) * n + u] += w;
    }
    for v in 0..n {
        let deg = if v < nu { graph.user_degree[v] } else { graph.item_degree[v - nu] };
        if deg == 0 {
            adj[v * n + v] = 1.0;
        }
    }
    let mut cur = stacked.data().to_vec();
    let mut acc = cur.clone();
    for _ in 0..layers {
        let mut next = vec![0.0; n * c];
        for r in 0..n {
            for k in 0..n {
                let a = adj[r * n + k];
                if a != 0.0 {
                    for j in 0..c {
                        next[r * c + j] += a * cur[k * c + j];
                    }
                }
            }
        }
        for (a, v) in acc.iter_mut().zip(&next) {
            *a += v;
        }
        cur = next;
    }
    let scale = 1.0 / (layers + 1) as f64;
    Tensor::matrix(n, c, acc.into_iter().map(|v| v * scale).collect()).expect("oracle shape")
}
