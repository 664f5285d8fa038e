use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ccf_core::cf::CfBackend;
use ccf_core::config::{ExperimentConfig, Variant};
use ccf_core::dataset::{to_canonical_csv, SplitTag};
use ccf_core::experiment::{metric_tables, Experiment, Manifest};
use ccf_core::export::{export_embeddings, sample_items};
use ccf_core::trainer::Schedule;
use ccf_core::{CcfError, Result};

#[derive(Parser, Debug)]
#[command(name = "ccf", version, about = "CF-embedding fusion into a small LM for CTR prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config, or a run manifest (.json) to repeat.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    backend: Option<CfBackend>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, conflicts_with = "end_to_end")]
    stage1_only: bool,
    #[arg(long)]
    end_to_end: bool,
    /// Similar items listed by pilot prompts.
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, binarize and split the dataset; write the canonical CSV.
    Ingest(Common),
    PretrainCf(Common),
    PretrainLm(Common),
    Train(Common),
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: Option<SplitTag>,
    },
    /// Train (if needed) and evaluate a list of variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        split: Option<SplitTag>,
    },
    /// Rank candidate items for one user.
    Rank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: Option<u32>,
        /// Comma-separated item ids.
        #[arg(long)]
        items: Option<String>,
    },
    ExportEmb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sample: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::PretrainCf(_) => "pretrain-cf",
            Command::PretrainLm(_) => "pretrain-lm",
            Command::Train(_) => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Rank { .. } => "rank",
            Command::ExportEmb { .. } => "export-emb",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Ingest(c) | Command::PretrainCf(c) | Command::PretrainLm(c) | Command::Train(c) => c,
            Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Rank { common, .. }
            | Command::ExportEmb { common, .. } => common,
        }
    }
}

/// Command arguments, falling back to those recorded in a replayed manifest.
struct ArgSource {
    recorded: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl ArgSource {
    fn get<T: std::str::FromStr + ToString>(&mut self, key: &str, given: Option<T>, default: T) -> Result<T> {
        let v = match given {
            Some(v) => v,
            None => match self.recorded.get(key) {
                Some(s) => s
                    .parse()
                    .map_err(|_| CcfError::Config(format!("manifest argument {key}={s:?} is invalid")))?,
                None => default,
            },
        };
        self.used.insert(key.to_string(), v.to_string());
        Ok(v)
    }
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, BTreeMap<String, String>)> {
    if !c.config.exists() {
        return Err(CcfError::Config(format!("config file {} not found", c.config.display())));
    }
    let recorded = if c.config.extension().is_some_and(|e| e == "json") {
        Manifest::load(&c.config)?.args
    } else {
        BTreeMap::new()
    };
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(b) = c.backend {
        cfg.backend = b;
    }
    if let Some(v) = &c.variant {
        cfg.variant = v.clone();
    }
    if c.stage1_only {
        cfg.schedule = Schedule::Stage1Only;
    }
    if c.end_to_end {
        cfg.schedule = Schedule::EndToEnd;
    }
    if let Some(k) = c.topk {
        cfg.topk = k;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    let seed = c.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok((cfg, recorded))
}

fn run(cmd: Command) -> Result<()> {
    let (cfg, recorded) = load_config(cmd.common())?;
    let mut args = ArgSource {
        recorded,
        used: BTreeMap::new(),
    };
    let exp = Experiment::new(cfg.clone())?;
    let mut m = Manifest::new(cmd.name(), &cfg);
    let (variant, schedule) = (cfg.variant.clone(), cfg.schedule);
    match cmd {
        Command::Ingest(_) => {
            let split = &exp.data.split;
            std::fs::write(exp.path("canonical.csv"), to_canonical_csv(split))?;
            let users: std::collections::BTreeSet<u32> = exp.data.interactions.iter().map(|x| x.user).collect();
            let items: std::collections::BTreeSet<u32> = exp.data.interactions.iter().map(|x| x.item).collect();
            for (k, v) in [
                ("users", users.len()),
                ("items", items.len()),
                ("train", split.train.len()),
                ("validation", split.validation.len()),
                ("test", split.test.len()),
            ] {
                println!("{k:<10} {v}");
                m.summary.insert(k.into(), v.into());
            }
        }
        Command::PretrainCf(_) => {
            let backend = cfg.backend;
            let r = exp.pretrain_cf(backend)?;
            m.cf_reports.insert(backend.as_str().into(), r);
            m.metrics.push(exp.evaluate_cf(backend, SplitTag::Validation)?.metric());
        }
        Command::PretrainLm(_) => {
            let r = exp.pretrain_lm()?;
            m.stage_reports.insert("base-lm".into(), vec![r]);
        }
        Command::Train(_) => {
            let (tag, reports) = exp.train(&variant, schedule)?;
            for r in &reports {
                println!("{tag} {}: best val_auc {:.4} at epoch {}", r.stage.as_str(), r.best_val_auc, r.best_epoch);
            }
            m.stage_reports.insert(tag, reports);
        }
        Command::Eval { split, .. } => {
            let split = args.get("split", split, SplitTag::Test)?;
            m.metrics.push(exp.evaluate(&variant, schedule, split)?.metric());
        }
        Command::Ablate { variants, split, .. } => {
            let list = args.get("variants", variants, "alpha1,alpha-scalar,ccf".to_string())?;
            let split = args.get("split", split, SplitTag::Test)?;
            for v in Variant::parse_list(&list)? {
                info!("ablate: {v}");
                exp.run_variant(&v, schedule, split, &mut m)?;
            }
        }
        Command::Rank { user, items, .. } => {
            let user = args.get("user", user, 4)?;
            let items = args.get("items", items, String::new())?;
            let ids: Vec<u32> = items
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map_err(|_| CcfError::Config(format!("bad item id {s:?}"))))
                .collect::<Result<_>>()?;
            let ranked = exp.rank(&variant, schedule, user, &ids)?;
            let mut csv = String::from("rank,item_id,title,score\n");
            println!("{:<5} {:<7} {:<50} score", "rank", "item", "title");
            for (r, (item, score)) in ranked.iter().enumerate() {
                let title = exp.data.catalog.title(*item).unwrap_or("");
                println!("{:<5} {:<7} {:<50} {score:.4}", r + 1, item, title);
                csv.push_str(&format!("{},{},\"{}\",{}\n", r + 1, item, title.replace('"', "\"\""), score));
                m.summary.insert(format!("rank_{}", r + 1), (*item).into());
            }
            std::fs::write(exp.path(&format!("rank_user{user}.csv")), csv)?;
        }
        Command::ExportEmb { sample, .. } => {
            let n = args.get("sample", sample, 1000)?;
            let built = exp.load_trained(&variant, schedule)?;
            let all: Vec<u32> = exp.data.catalog.items.keys().copied().collect();
            let items = sample_items(&all, n, cfg.seed);
            let e = export_embeddings(&built, &exp.data.builder, &items)?;
            e.write(&exp.run_dir, &built.tag)?;
            println!(
                "items {}  fused-vs-semantic {:.4}  cf-vs-semantic {:.4}",
                items.len(),
                e.stats.fused_vs_semantic,
                e.stats.cf_vs_semantic
            );
            m.summary.insert("items".into(), items.len().into());
            m.summary.insert("fused_vs_semantic".into(), e.stats.fused_vs_semantic.into());
            m.summary.insert("cf_vs_semantic".into(), e.stats.cf_vs_semantic.into());
        }
    }
    m.args = args.used;
    if !m.metrics.is_empty() {
        print!("{}", metric_tables(&m.metrics).1);
    }
    let path = exp.write_manifest(&mut m)?;
    println!("manifest {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
