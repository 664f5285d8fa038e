//! Experiment drivers: data preparation, per-variant instance building,
//! the pretraining and training steps, evaluation and run manifests.
//!
//! All artifacts of one seed live in `<output_dir>/seed-<seed>/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cf::{pretrain_cf, CfBackend, CfModel, CfPretrainReport};
use crate::config::{DataConfig, ExperimentConfig, Variant};
use crate::dataset::{
    binarize, dataset_files, load_movielens, recent_window, temporal_split, user_history, DatasetSplit, IdIndex,
    Interaction, ItemCatalog, SplitTag,
};
use crate::error::{CcfError, Result};
use crate::fusion::FusionNet;
use crate::lm::{TinyLm, Vocabulary};
use crate::metrics::auc;
use crate::params::{ParamStore, Session};
use crate::prompt::{PromptBuilder, TEMPLATE_TEXTS};
use crate::tensor::Tensor;
use crate::trainer::{train_stage, train_two_stage, Instance, ParamPartition, Pipeline, Schedule, Stage, StageReport};

/// Loaded, binarized and split data with the shared vocabulary.
#[derive(Debug)]
pub struct Prepared {
    pub catalog: ItemCatalog,
    pub interactions: Vec<Interaction>,
    pub split: DatasetSplit,
    pub index: Arc<IdIndex>,
    pub vocab: Arc<Vocabulary>,
    pub builder: Arc<PromptBuilder>,
}

pub fn prepare(cfg: &DataConfig) -> Result<Prepared> {
    let dir = cfg.resolve_dir();
    let (ratings, items) = dataset_files(&dir, cfg.format);
    for p in [&ratings, &items] {
        if !p.exists() {
            return Err(CcfError::MissingArtifact(p.clone()));
        }
    }
    let (raw, catalog) = load_movielens(&ratings, &items, cfg.format)?;
    let mut interactions = binarize(&raw, cfg.threshold);
    if let Some(m) = cfg.window_months {
        interactions = recent_window(&interactions, m);
    }
    let split = temporal_split(&interactions, cfg.ratios)?;
    let index = Arc::new(IdIndex::from_data(&interactions, &catalog));
    let vocab = Arc::new(Vocabulary::build(&catalog, &TEMPLATE_TEXTS));
    let builder = Arc::new(PromptBuilder::new(Arc::clone(&vocab), &catalog));
    info!(
        "data: {} interactions, splits {}/{}/{}, vocab {}",
        interactions.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        vocab.len()
    );
    Ok(Prepared {
        catalog,
        interactions,
        split,
        index,
        vocab,
        builder,
    })
}

/// Random subsample of at most `limit` rows that keeps the input order.
/// `limit == 0` keeps everything.
pub fn sample(xs: &[Interaction], limit: usize, seed: u64) -> Vec<Interaction> {
    if limit == 0 || limit >= xs.len() {
        return xs.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, xs.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| xs[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub user: u32,
    pub item: u32,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub tag: String,
    pub split: SplitTag,
    pub auc: f64,
    pub n: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalResult {
    fn new(tag: String, split: SplitTag, rows: Vec<EvalRow>) -> Result<Self> {
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        Ok(EvalResult {
            auc: auc(&scores, &labels)?,
            n: rows.len(),
            tag,
            split,
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("user_id,item_id,score,label\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.user, r.item, r.score, r.label);
        }
        s
    }

    pub fn metric(&self) -> MetricRow {
        MetricRow {
            tag: self.tag.clone(),
            split: self.split,
            auc: self.auc,
            n: self.n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub tag: String,
    pub split: SplitTag,
    pub auc: f64,
    pub n: usize,
}

/// CSV and aligned plain-text renderings of a metric table.
pub fn metric_tables(rows: &[MetricRow]) -> (String, String) {
    let mut csv = String::from("model,split,auc,n\n");
    for r in rows {
        let _ = writeln!(csv, "{},{},{},{}", r.tag, r.split.as_str(), r.auc, r.n);
    }
    let w = rows.iter().map(|r| r.tag.len()).max().unwrap_or(0).max(5);
    let mut txt = format!("{:<w$}  {:<10}  {:>8}  {:>6}\n", "model", "split", "auc", "n");
    for r in rows {
        let _ = writeln!(txt, "{:<w$}  {:<10}  {:>8.4}  {:>6}", r.tag, r.split.as_str(), r.auc, r.n);
    }
    (csv, txt)
}

/// What a CLI run did and produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub artifacts: Vec<String>,
    pub cf_reports: BTreeMap<String, CfPretrainReport>,
    pub stage_reports: BTreeMap<String, Vec<StageReport>>,
    pub metrics: Vec<MetricRow>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Manifest {
            command: command.to_string(),
            args: BTreeMap::new(),
            seed: config.seed,
            config: config.clone(),
            artifacts: Vec::new(),
            cf_reports: BTreeMap::new(),
            stage_reports: BTreeMap::new(),
            metrics: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| CcfError::MissingArtifact(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| CcfError::Config(format!("{}: {e}", path.display())))
    }

    /// Everything that must reproduce bitwise on a re-run.
    pub fn reproducible_part(&self) -> (Vec<f64>, Vec<MetricRow>) {
        let mut losses = Vec::new();
        for r in self.cf_reports.values() {
            losses.extend(r.epochs.iter().map(|e| e.train_loss));
        }
        for rs in self.stage_reports.values() {
            for r in rs {
                losses.extend(r.epochs.iter().map(|e| e.train_loss));
            }
        }
        (losses, self.metrics.clone())
    }
}

/// Name under which a trained model is stored.
pub fn model_tag(variant: &Variant, backend: CfBackend, schedule: Schedule) -> String {
    let base = match variant {
        Variant::TextOnly => return "text-only".into(),
        Variant::Dual(a, b) => format!("dual-{}-{}", a.as_str(), b.as_str()),
        v => format!("{v}-{}", backend.as_str()),
    };
    if !variant.uses_cf_slots() {
        return base;
    }
    match schedule {
        Schedule::TwoStage => base,
        Schedule::Stage1Only => format!("{base}-stage1"),
        Schedule::EndToEnd => format!("{base}-e2e"),
    }
}

/// Orders candidates by score, highest first, ties by lower item id.
pub fn rank_by_score(mut scored: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Frozen CF tables used to list similar items for the pilot prompt.
struct Retriever {
    model: CfModel,
    params: ParamStore,
    users: Option<Tensor>,
    items: Tensor,
    pool: Vec<u32>,
    k: usize,
}

impl Retriever {
    fn new(model: CfModel, params: ParamStore, pool: Vec<u32>, k: usize) -> Result<Self> {
        let (users, items) = if model.backend == CfBackend::SasRec {
            let mut sess = Session::frozen(&params);
            let t = model.tables(&mut sess)?;
            (None, sess.tape.value(t.items).clone())
        } else {
            let (u, i) = model.frozen_tables(&params)?;
            (Some(u), i)
        };
        Ok(Retriever {
            model,
            params,
            users,
            items,
            pool,
            k,
        })
    }

    /// Top-k pool items by `x_u · x_i`, excluding the user's history.
    fn similar(&self, user: u32, history: &[u32]) -> Result<Vec<u32>> {
        let u = match &self.users {
            Some(t) => t.row_slice(self.model.index.user(user)?).to_vec(),
            None => self.model.user_vector(&self.params, user, history)?,
        };
        let seen: BTreeSet<u32> = history.iter().copied().collect();
        let mut scored = Vec::with_capacity(self.pool.len());
        for &item in &self.pool {
            if seen.contains(&item) {
                continue;
            }
            let row = self.items.row_slice(self.model.index.item(item)?);
            scored.push((item, u.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()));
        }
        Ok(rank_by_score(scored).into_iter().take(self.k).map(|(i, _)| i).collect())
    }
}

/// A pipeline with its parameters and whatever instance building needs.
pub struct Built {
    pub variant: Variant,
    pub tag: String,
    pub pipeline: Pipeline,
    pub params: ParamStore,
    models: Vec<CfModel>,
    retriever: Option<Retriever>,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: Prepared,
    pub run_dir: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = prepare(&config.data)?;
        let run_dir = config.output_dir.join(format!("seed-{}", config.seed));
        std::fs::create_dir_all(&run_dir)?;
        Ok(Experiment { config, data, run_dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn lm(&self) -> Result<TinyLm> {
        let mut c = self.config.lm.clone();
        c.vocab_size = self.data.vocab.len();
        TinyLm::new(c)
    }

    /// The subsampled interactions a split is evaluated on.
    pub fn interactions(&self, tag: SplitTag) -> Vec<Interaction> {
        let d = &self.config.data;
        let (limit, salt) = match tag {
            SplitTag::Train => (d.train_limit, 1),
            SplitTag::Validation => (d.val_limit, 2),
            SplitTag::Test => (d.test_limit, 3),
        };
        sample(self.data.split.part(tag), limit, d.sample_seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt))
    }

    fn cf_path(&self, backend: CfBackend) -> PathBuf {
        self.path(&format!("cf_{}.ckpt", backend.as_str()))
    }

    fn model_path(&self, tag: &str) -> PathBuf {
        self.path(&format!("model_{tag}.ckpt"))
    }

    pub fn pretrain_cf(&self, backend: CfBackend) -> Result<CfPretrainReport> {
        let model = CfModel::new(backend, self.config.cf.clone(), Arc::clone(&self.data.index), &self.data.split)?;
        let (params, report) = pretrain_cf(&model, &self.data.split, &self.data.split.validation)?;
        params.save(&self.cf_path(backend))?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| CcfError::Config(e.to_string()))?;
        std::fs::write(self.path(&format!("cf_{}_report.json", backend.as_str())), json)?;
        Ok(report)
    }

    /// A pretrained CF model whose parameters live under `prefix`.
    fn load_cf(&self, backend: CfBackend, prefix: &str) -> Result<(CfModel, ParamStore)> {
        let path = self.cf_path(backend);
        if !path.exists() {
            return Err(CcfError::MissingArtifact(path));
        }
        let params = ParamStore::load(&path)?;
        let params = if prefix == "cf." { params } else { params.rename_prefix("cf.", prefix) };
        let model = CfModel::with_prefix(
            backend,
            self.config.cf.clone(),
            Arc::clone(&self.data.index),
            &self.data.split,
            prefix,
        )?;
        Ok((model, params))
    }

    /// Stage 0: the base LM on text-only prompts.
    pub fn pretrain_lm(&self) -> Result<StageReport> {
        let lm = self.lm()?;
        let d = lm.config.d_model;
        let pipeline = Pipeline {
            lm: lm.clone(),
            fusion: FusionNet::text_only(d),
            builder: Arc::clone(&self.data.builder),
            adapters: false,
        };
        let built = Built {
            variant: Variant::TextOnly,
            tag: "base-lm".into(),
            pipeline,
            params: lm.init_params(),
            models: Vec::new(),
            retriever: None,
        };
        let train = self.instances(&built, SplitTag::Train)?;
        let val = self.instances(&built, SplitTag::Validation)?;
        let mut params = built.params.clone();
        let partition = ParamPartition::new(self.config.train.train_encoder);
        let report = train_stage(&built.pipeline, &mut params, Stage::BaseLm, &partition, &train, &val, &self.config.train)?;
        params.save(&self.path("base_lm.ckpt"))?;
        self.data.vocab.save(&self.path("vocab.txt"))?;
        Ok(report)
    }

    /// Pipeline for `variant` at its initial (untrained fusion) parameters.
    pub fn build(&self, variant: &Variant, schedule: Schedule) -> Result<Built> {
        let base_path = self.path("base_lm.ckpt");
        if !base_path.exists() {
            return Err(CcfError::MissingArtifact(base_path));
        }
        let mut params = ParamStore::load(&base_path)?;
        let lm = self.lm()?;
        let d = lm.config.d_model;
        let mut models = Vec::new();
        for (b, backend) in variant.backends(self.config.backend).into_iter().enumerate() {
            let prefix = if b == 0 { "cf.".to_string() } else { "cf.b2.".to_string() };
            let (m, p) = self.load_cf(backend, &prefix)?;
            params.merge(&p);
            models.push(m);
        }
        let fusion = if variant.uses_cf_slots() {
            FusionNet::new(variant.apply(&self.config.fusion), d, models.clone())?
        } else {
            FusionNet::text_only(d)
        };
        params.merge(&fusion.init_params());
        let retriever = None;
        Ok(Built {
            variant: variant.clone(),
            tag: model_tag(variant, self.config.backend, schedule),
            pipeline: Pipeline {
                lm,
                fusion,
                builder: Arc::clone(&self.data.builder),
                adapters: true,
            },
            params,
            models,
            retriever,
        })
    }

    fn attach_retriever(&self, built: &mut Built, tag: SplitTag) -> Result<()> {
        if built.variant != Variant::PilotNlCf {
            built.retriever = None;
            return Ok(());
        }
        let (model, params) = self.load_cf(self.config.backend, "cf.")?;
        let pool: BTreeSet<u32> = self.data.split.part(tag).iter().map(|x| x.item).collect();
        built.retriever = Some(Retriever::new(model, params, pool.into_iter().collect(), self.config.topk)?);
        Ok(())
    }

    /// One instance per subsampled interaction of `tag`, rendered in the
    /// variant's prompt style and truncated to the length limit.
    pub fn instances(&self, built: &Built, tag: SplitTag) -> Result<Vec<Instance>> {
        self.instances_for(built, &self.interactions(tag))
    }

    fn instances_for(&self, built: &Built, xs: &[Interaction]) -> Result<Vec<Instance>> {
        let b = &self.data.builder;
        let limit = self.config.prompt_limit();
        let extra = built.pipeline.fusion.slot_extra();
        let seq = built.models.iter().find(|m| m.backend == CfBackend::SasRec);
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let history = user_history(&self.data.split, x.user, x.timestamp, self.config.data.max_history);
            let prompt = match &built.variant {
                Variant::TextOnly => b.text_only(x.user, x.item, x.label, &history)?,
                Variant::PilotNlCf => {
                    let r = built
                        .retriever
                        .as_ref()
                        .ok_or_else(|| CcfError::Config("pilot prompts need a retriever".into()))?;
                    b.nl_cf(x.user, x.item, x.label, &history, &r.similar(x.user, &history)?)?
                }
                _ => b.translate(x.user, x.item, x.label, &history)?,
            };
            let prompt = b.truncate(&prompt, limit, extra)?;
            let cf_history = match seq {
                Some(m) => m.history_rows(&self.data.split, x.user, x.timestamp)?,
                None => Vec::new(),
            };
            out.push(Instance { prompt, cf_history });
        }
        Ok(out)
    }

    /// Trains `variant` from the stage-0 base LM and stores the result.
    /// Prompts without CF slots only tune the adapters. A two-stage run also
    /// stores its stage-1 checkpoint under the stage-1-only tag.
    pub fn train(&self, variant: &Variant, schedule: Schedule) -> Result<(String, Vec<StageReport>)> {
        let mut built = self.build(variant, schedule)?;
        self.attach_retriever(&mut built, SplitTag::Train)?;
        let train = self.instances(&built, SplitTag::Train)?;
        self.attach_retriever(&mut built, SplitTag::Validation)?;
        let val = self.instances(&built, SplitTag::Validation)?;
        let cfg = &self.config.train;
        let mut params = built.params.clone();
        let reports = if !variant.uses_cf_slots() {
            let partition = ParamPartition::new(cfg.train_encoder);
            vec![train_stage(&built.pipeline, &mut params, Stage::One, &partition, &train, &val, cfg)?]
        } else if schedule == Schedule::TwoStage {
            let mut r = train_two_stage(&built.pipeline, &mut params, Schedule::Stage1Only, &train, &val, cfg)?;
            let stage1 = model_tag(variant, self.config.backend, Schedule::Stage1Only);
            params.save(&self.model_path(&stage1))?;
            let partition = ParamPartition::new(cfg.train_encoder);
            r.push(train_stage(&built.pipeline, &mut params, Stage::Two, &partition, &train, &val, cfg)?);
            r
        } else {
            train_two_stage(&built.pipeline, &mut params, schedule, &train, &val, cfg)?
        };
        params.save(&self.model_path(&built.tag))?;
        Ok((built.tag, reports))
    }

    /// A trained pipeline for `variant`.
    pub fn load_trained(&self, variant: &Variant, schedule: Schedule) -> Result<Built> {
        let mut built = self.build(variant, schedule)?;
        let path = self.model_path(&built.tag);
        if !path.exists() {
            return Err(CcfError::MissingArtifact(path));
        }
        built.params = ParamStore::load(&path)?;
        Ok(built)
    }

    pub fn evaluate(&self, variant: &Variant, schedule: Schedule, split: SplitTag) -> Result<EvalResult> {
        let mut built = self.load_trained(variant, schedule)?;
        self.evaluate_built(&mut built, split)
    }

    pub fn evaluate_built(&self, built: &mut Built, split: SplitTag) -> Result<EvalResult> {
        self.attach_retriever(built, split)?;
        let insts = self.instances(built, split)?;
        let preds = built.pipeline.predict(&built.params, &insts)?;
        let rows = insts
            .iter()
            .zip(&preds)
            .map(|(i, p)| EvalRow {
                user: i.prompt.user,
                item: i.prompt.item,
                score: p.score,
                label: i.prompt.label,
            })
            .collect();
        let r = EvalResult::new(built.tag.clone(), split, rows)?;
        std::fs::write(self.path(&format!("eval_{}_{}.csv", r.tag, split.as_str())), r.to_csv())?;
        Ok(r)
    }

    /// The pretrained CF model alone on the same interactions.
    pub fn evaluate_cf(&self, backend: CfBackend, split: SplitTag) -> Result<EvalResult> {
        let (model, params) = self.load_cf(backend, "cf.")?;
        let xs = self.interactions(split);
        let scores = model.predict(&params, &self.data.split, &xs)?;
        let rows = xs
            .iter()
            .zip(scores)
            .map(|(x, score)| EvalRow {
                user: x.user,
                item: x.item,
                score,
                label: x.label,
            })
            .collect();
        let r = EvalResult::new(format!("cf-{}", backend.as_str()), split, rows)?;
        std::fs::write(self.path(&format!("eval_{}_{}.csv", r.tag, split.as_str())), r.to_csv())?;
        Ok(r)
    }

    /// Scores every candidate for `user` with the user's full train history
    /// and ranks them, ties going to the lower item id.
    pub fn rank(&self, variant: &Variant, schedule: Schedule, user: u32, items: &[u32]) -> Result<Vec<(u32, f64)>> {
        if items.is_empty() {
            return Err(CcfError::invalid("rank", "no candidate items"));
        }
        self.data.index.user(user)?;
        let mut built = self.load_trained(variant, schedule)?;
        self.attach_retriever(&mut built, SplitTag::Test)?;
        let xs: Vec<Interaction> = items
            .iter()
            .map(|&item| {
                self.data.index.item(item)?;
                Ok(Interaction {
                    user,
                    item,
                    rating: 0,
                    timestamp: i64::MAX,
                    label: 0,
                })
            })
            .collect::<Result<_>>()?;
        let insts = self.instances_for(&built, &xs)?;
        let preds = built.pipeline.predict(&built.params, &insts)?;
        Ok(rank_by_score(items.iter().copied().zip(preds.iter().map(|p| p.score)).collect()))
    }

    /// Pretrains whatever `variant` needs that is not on disk yet.
    pub fn ensure_prerequisites(&self, variant: &Variant, manifest: &mut Manifest) -> Result<()> {
        let mut needed = variant.backends(self.config.backend);
        if *variant == Variant::PilotNlCf {
            needed.push(self.config.backend);
        }
        for b in needed {
            if !self.cf_path(b).exists() {
                let r = self.pretrain_cf(b)?;
                manifest.cf_reports.insert(b.as_str().into(), r);
            }
        }
        if !self.path("base_lm.ckpt").exists() {
            let r = self.pretrain_lm()?;
            manifest.stage_reports.insert("base-lm".into(), vec![r]);
        }
        Ok(())
    }

    /// Trains the variant if needed and evaluates it on `split`.
    pub fn run_variant(
        &self,
        variant: &Variant,
        schedule: Schedule,
        split: SplitTag,
        manifest: &mut Manifest,
    ) -> Result<EvalResult> {
        self.ensure_prerequisites(variant, manifest)?;
        let tag = model_tag(variant, self.config.backend, schedule);
        if !self.model_path(&tag).exists() {
            let (tag, reports) = self.train(variant, schedule)?;
            manifest.stage_reports.insert(tag, reports);
        }
        let r = self.evaluate(variant, schedule, split)?;
        manifest.metrics.push(r.metric());
        Ok(r)
    }

    /// Writes the manifest and the metric tables of a command.
    pub fn write_manifest(&self, manifest: &mut Manifest) -> Result<PathBuf> {
        let mut have: BTreeSet<String> = BTreeSet::new();
        for e in std::fs::read_dir(&self.run_dir)? {
            let name = e?.file_name().to_string_lossy().into_owned();
            if !name.starts_with("manifest_") {
                have.insert(name);
            }
        }
        manifest.artifacts = have.into_iter().collect();
        if !manifest.metrics.is_empty() {
            let (csv, txt) = metric_tables(&manifest.metrics);
            std::fs::write(self.path(&format!("metrics_{}.csv", manifest.command)), csv)?;
            std::fs::write(self.path(&format!("metrics_{}.txt", manifest.command)), txt)?;
        }
        let path = self.path(&format!("manifest_{}.json", manifest.command));
        let json = serde_json::to_string_pretty(manifest).map_err(|e| CcfError::Config(e.to_string()))?;
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(user: u32, item: u32, ts: i64) -> Interaction {
        Interaction {
            user,
            item,
            rating: 4,
            timestamp: ts,
            label: 1,
        }
    }

    #[test]
    fn sample_keeps_order_and_size() {
        let xs: Vec<Interaction> = (0..100).map(|i| x(1, i, i as i64)).collect();
        let s = sample(&xs, 10, 3);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert_eq!(s, sample(&xs, 10, 3));
        assert_eq!(sample(&xs, 0, 3), xs);
    }

    #[test]
    fn rank_ties_go_to_lower_id() {
        assert_eq!(rank_by_score(vec![(7, 0.5)]), vec![(7, 0.5)]);
        let r = rank_by_score(vec![(9, 0.5), (3, 0.5), (4, 0.9)]);
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), [4, 3, 9]);
    }

    #[test]
    fn tags() {
        assert_eq!(model_tag(&Variant::TextOnly, CfBackend::Mf, Schedule::Stage1Only), "text-only");
        assert_eq!(model_tag(&Variant::Ccf, CfBackend::LightGcn, Schedule::TwoStage), "ccf-lightgcn");
        assert_eq!(model_tag(&Variant::Ccf, CfBackend::Mf, Schedule::Stage1Only), "ccf-mf-stage1");
        assert_eq!(
            model_tag(&Variant::Dual(CfBackend::Mf, CfBackend::SasRec), CfBackend::Mf, Schedule::EndToEnd),
            "dual-mf-sasrec-e2e"
        );
    }

    #[test]
    fn metric_table_renders() {
        let rows = vec![MetricRow {
            tag: "ccf-mf".into(),
            split: SplitTag::Test,
            auc: 0.61234,
            n: 10,
        }];
        let (csv, txt) = metric_tables(&rows);
        assert_eq!(csv, "model,split,auc,n\nccf-mf,test,0.61234,10\n");
        assert!(txt.lines().nth(1).unwrap().contains("0.6123"));
    }
}
