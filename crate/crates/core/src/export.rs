//! Per-item embedding export: aligned CF, mean semantic and mean fused
//! vectors, their 2-D principal components and separation statistics.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcfError, Result};
use crate::experiment::Built;
use crate::fusion::separation_statistic;
use crate::params::Session;
use crate::prompt::PromptBuilder;

pub const MODALITIES: [&str; 3] = ["cf_aligned", "semantic_mean", "fused_mean"];

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExport {
    pub items: Vec<u32>,
    /// `[modality][item]` vectors in `MODALITIES` order.
    pub vectors: [Vec<Vec<f64>>; 3],
    /// 2-D coordinates, same layout as `vectors`.
    pub pca: [Vec<[f64; 2]>; 3],
    pub stats: SeparationStats,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub fused_vs_semantic: f64,
    pub cf_vs_semantic: f64,
}

/// Up to `n` catalog items chosen with `seed`, in ascending id order. A
/// request beyond the catalog takes the whole catalog.
pub fn sample_items(all: &[u32], n: usize, seed: u64) -> Vec<u32> {
    if n >= all.len() {
        if n > all.len() {
            warn!("requested {n} items but the catalog has {}; exporting all", all.len());
        }
        return all.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, all.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

fn mean_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let rows = data.len() / cols;
    let mut m = vec![0.0; cols];
    for r in data.chunks(cols) {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows as f64);
    m
}

/// Exports the three per-item vectors from a pipeline with CF backends.
pub fn export_embeddings(built: &Built, builder: &PromptBuilder, items: &[u32]) -> Result<EmbeddingExport> {
    let fusion = &built.pipeline.fusion;
    if fusion.backends.is_empty() {
        return Err(CcfError::Config(format!("{} has no CF embeddings to export", built.tag)));
    }
    if items.is_empty() {
        return Err(CcfError::invalid("export_embeddings", "empty item sample"));
    }
    let d = fusion.d_model;
    let mut vectors: [Vec<Vec<f64>>; 3] = Default::default();
    for chunk in items.chunks(64) {
        let mut sess = Session::frozen(&built.params);
        let bound = fusion.bind(&mut sess)?;
        for &item in chunk {
            let c = fusion.aligned_item(&mut sess, &bound, 0, item)?;
            let sm = built.pipeline.lm.embed(&mut sess, builder.title_ids(item)?)?;
            let fused = fusion.item_rows(&mut sess, &bound, sm, item)?;
            vectors[0].push(sess.tape.value(c).data().to_vec());
            vectors[1].push(mean_rows(sess.tape.value(sm).data(), d));
            vectors[2].push(mean_rows(sess.tape.value(fused).data(), d));
        }
    }
    let stats = SeparationStats {
        fused_vs_semantic: separation_statistic(&vectors[2], &vectors[1]),
        cf_vs_semantic: separation_statistic(&vectors[0], &vectors[1]),
    };
    let pca = project_2d(&vectors)?;
    Ok(EmbeddingExport {
        items: items.to_vec(),
        vectors,
        pca,
        stats,
    })
}

/// Projects all rows onto the two leading principal axes of the pooled,
/// centred cloud. Each axis is signed so its largest component is positive.
fn project_2d(vectors: &[Vec<Vec<f64>>; 3]) -> Result<[Vec<[f64; 2]>; 3]> {
    let rows: Vec<&Vec<f64>> = vectors.iter().flatten().collect();
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    let mut out: [Vec<[f64; 2]>; 3] = Default::default();
    for (m, vs) in vectors.iter().enumerate() {
        for r in vs {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let p = |ax: &[f64]| c.iter().zip(ax).map(|(a, b)| a * b).sum::<f64>();
            out[m].push([p(&axes[0]), p(&axes[1])]);
        }
    }
    if out.iter().flatten().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(CcfError::Numeric("principal components are not finite".into()));
    }
    Ok(out)
}

impl EmbeddingExport {
    /// `item_id,modality,v0,...`; three rows per item.
    pub fn vectors_csv(&self) -> String {
        let d = self.vectors[0][0].len();
        let mut s = String::from("item_id,modality");
        for j in 0..d {
            let _ = write!(s, ",v{j}");
        }
        s.push('\n');
        for (m, vs) in self.vectors.iter().enumerate() {
            for (item, v) in self.items.iter().zip(vs) {
                let _ = write!(s, "{item},{}", MODALITIES[m]);
                for x in v {
                    let _ = write!(s, ",{x}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn pca_csv(&self) -> String {
        let mut s = String::from("item_id,modality,pc1,pc2\n");
        for (m, ps) in self.pca.iter().enumerate() {
            for (item, p) in self.items.iter().zip(ps) {
                let _ = writeln!(s, "{item},{},{},{}", MODALITIES[m], p[0], p[1]);
            }
        }
        s
    }

    pub fn svg(&self) -> String {
        const COLORS: [&str; 3] = ["#d62728", "#1f77b4", "#2ca02c"];
        let (w, h, pad) = (640.0, 640.0, 40.0);
        let pts: Vec<&[f64; 2]> = self.pca.iter().flatten().collect();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &pts {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let sx = (w - 2.0 * pad) / (x1 - x0).max(1e-12);
        let sy = (h - 2.0 * pad) / (y1 - y0).max(1e-12);
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
        s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        for (m, ps) in self.pca.iter().enumerate() {
            for p in ps {
                let cx = pad + (p[0] - x0) * sx;
                let cy = h - pad - (p[1] - y0) * sy;
                let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.6\"/>", COLORS[m]);
            }
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{}</text>",
                pad,
                16.0 + 14.0 * m as f64,
                COLORS[m],
                MODALITIES[m]
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, dir: &Path, tag: &str) -> Result<Vec<String>> {
        let files = [
            (format!("emb_{tag}.csv"), self.vectors_csv()),
            (format!("emb_{tag}_pca.csv"), self.pca_csv()),
            (format!("emb_{tag}_pca.svg"), self.svg()),
        ];
        let mut names = Vec::new();
        for (name, body) in files {
            std::fs::write(dir.join(&name), body)?;
            names.push(name);
        }
        Ok(names)
    }
}
