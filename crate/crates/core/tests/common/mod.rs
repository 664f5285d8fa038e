#![allow(dead_code)]

use std::sync::Arc;

use ccf_core::cf::{CfBackend, CfConfig, CfModel};
use ccf_core::dataset::{DatasetSplit, IdIndex, Interaction, ItemCatalog, ItemInfo};
use ccf_core::fusion::{FusionConfig, FusionNet};
use ccf_core::lm::{LmConfig, TinyLm, Vocabulary};
use ccf_core::params::ParamStore;
use ccf_core::prompt::{PromptBuilder, TEMPLATE_TEXTS};
use ccf_core::tensor::Tensor;
use ccf_core::trainer::{Instance, Pipeline};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TITLES: [(u32, &str); 5] = [
    (1, "Star Wars (1977)"),
    (2, "Blade Runner (1982)"),
    (3, "Heat"),
    (4, "Toy Story (1995)"),
    (5, "Fargo (1996)"),
];

pub struct Toy {
    pub catalog: ItemCatalog,
    pub split: DatasetSplit,
    pub index: Arc<IdIndex>,
    pub builder: Arc<PromptBuilder>,
    pub lm: TinyLm,
    pub models: Vec<CfModel>,
}

pub fn inter(user: u32, item: u32, label: u8, ts: i64) -> Interaction {
    Interaction {
        user,
        item,
        rating: if label == 1 { 5 } else { 2 },
        timestamp: ts,
        label,
    }
}

pub fn toy(backends: &[CfBackend]) -> Toy {
    let mut catalog = ItemCatalog::default();
    for (id, t) in TITLES {
        catalog.items.insert(
            id,
            ItemInfo {
                title: t.to_string(),
                genres: vec![],
            },
        );
    }
    let train = vec![
        inter(1, 1, 1, 1),
        inter(1, 2, 1, 2),
        inter(2, 3, 1, 3),
        inter(2, 4, 0, 4),
        inter(3, 5, 1, 5),
        inter(3, 1, 0, 6),
    ];
    let split = DatasetSplit::from_parts(train, vec![inter(1, 3, 0, 7)], vec![inter(2, 1, 1, 8)]);
    let index = Arc::new(IdIndex::new(1..=3, 1..=5));
    let vocab = Arc::new(Vocabulary::build(&catalog, &TEMPLATE_TEXTS));
    let builder = Arc::new(PromptBuilder::new(Arc::clone(&vocab), &catalog));
    let lm = TinyLm::new(LmConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 12,
        max_len: 128,
        vocab_size: vocab.len(),
        lora_rank: 2,
        init_bound: 0.3,
        ..LmConfig::default()
    })
    .unwrap();
    let models = backends
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let cfg = CfConfig {
                dim: 4,
                sasrec_max_len: 4,
                init_bound: 0.5,
                lightgcn_layers: 1,
                seed: 5 + k as u64,
                ..CfConfig::default()
            };
            let prefix = if k == 0 { "cf." } else { "cf.b2." };
            CfModel::with_prefix(b, cfg, Arc::clone(&index), &split, prefix).unwrap()
        })
        .collect();
    Toy {
        catalog,
        split,
        index,
        builder,
        lm,
        models,
    }
}

impl Toy {
    pub fn fusion(&self, cfg: FusionConfig) -> FusionNet {
        FusionNet::new(FusionConfig { init_bound: 0.4, ..cfg }, self.lm.config.d_model, self.models.clone()).unwrap()
    }

    /// LM, CF and fusion parameters with random (non-zero) adapter
    /// up-projections.
    pub fn params(&self, fusion: &FusionNet) -> ParamStore {
        let mut ps = self.lm.init_params();
        for m in &self.models {
            ps.merge(&m.init_params());
        }
        ps.merge(&fusion.init_params());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ups: Vec<String> = ps.names().filter(|n| n.ends_with(".up")).map(String::from).collect();
        for n in ups {
            let shape = ps.get(&n).unwrap().shape().to_vec();
            ps.insert(n, Tensor::uniform(&shape, -0.3, 0.3, &mut rng));
        }
        ps
    }

    pub fn pipeline(&self, fusion: FusionNet) -> Pipeline {
        Pipeline {
            lm: self.lm.clone(),
            fusion,
            builder: Arc::clone(&self.builder),
            adapters: true,
        }
    }

    pub fn instance(&self, user: u32, item: u32, label: u8, history: &[u32]) -> Instance {
        let cf_history = history.iter().map(|&i| self.index.item(i).unwrap()).collect();
        Instance {
            prompt: self.builder.translate(user, item, label, history).unwrap(),
            cf_history,
        }
    }
}
