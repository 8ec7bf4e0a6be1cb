//! Run configuration, the contrastive training loop on synthetic scenes and
//! predicate-classification evaluation.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::metrics::{evaluate, RecallRow, Triplet, TripletSet};
use crate::model::{HattFlowModel, ModelConfig};
use crate::optim::{train_step, Adam, AdamConfig};
use crate::params::Rng;
use crate::synth::{Scene, SynthSpec, SynthWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batching: Batching,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
}

/// How each epoch's (text, vision) pairs are grouped into batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Consecutive chunks of a shuffled list.
    Random,
    /// Pairs sharing subject and object categories, with distinct predicates
    /// inside a batch, so in-batch negatives differ only in the relation.
    #[default]
    SharedEntities,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 2,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batching: Batching::SharedEntities,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Contents of a run configuration file: `[model]`, `[data]`, `[train]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    /// The synthetic predicate task at its tuned settings: default model and
    /// data, Adam at 3e-3 with 8 pairs per batch.
    pub fn synthetic_task() -> Self {
        Self {
            train: TrainConfig {
                lr: 3e-3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Overrides every seed with `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.data.seed = seed;
    }

    /// Model config with input widths taken from the data spec.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            text_node_dim: self.data.node_dim,
            text_edge_dim: self.data.edge_dim,
            vision_node_dim: self.data.node_dim,
            pe_dim: self.data.pe_dim,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.data.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::contract("train.batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub flow_direction: String,
    pub tau: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_r_at_1: Option<f64>,
}

/// Trains from scratch; `on_epoch` sees each epoch's log as it completes.
pub fn train(
    cfg: &RunConfig,
    world: &SynthWorld,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(HattFlowModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut model = HattFlowModel::new(cfg.model_config())?;
    let mut opt = Adam::new(cfg.train.adam(), &model.store)?;
    let mut rng = Rng::seed_from_u64(cfg.model.seed);
    rng.set_stream(u64::MAX);
    let scenes: Vec<Scene> = cfg.data.train_range().map(|i| world.scene(i)).collect();
    if scenes.is_empty() {
        return Err(Error::contract("data.train_scenes must be at least 1"));
    }
    let val: Vec<Scene> = cfg.data.val_range().map(|i| world.scene(i)).collect();

    let mut logs = Vec::with_capacity(cfg.train.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut rng);
        let picks: Vec<(usize, usize)> = order
            .iter()
            .map(|&i| (i, rng.random_range(0..scenes[i].texts.len())))
            .collect();
        let batches = match cfg.train.batching {
            Batching::Random => picks.chunks(cfg.train.batch_size).map(<[_]>::to_vec).collect(),
            Batching::SharedEntities => shared_entity_batches(&scenes, &picks, cfg.train.batch_size),
        };
        let mut total = 0.0;
        let mut steps = 0;
        for batch in batches {
            let pairs: Vec<(GraphBatch, GraphBatch)> = batch
                .iter()
                .map(|&(i, r)| (scenes[i].texts[r].clone(), scenes[i].views[r].clone()))
                .collect();
            total += train_step(&mut model, &pairs, &mut opt)?;
            steps += 1;
        }
        let val_r_at_1 = if cfg.train.eval_every > 0 && epoch % cfg.train.eval_every == 0 && !val.is_empty() {
            Some(predcls_recall(&model, world, &val, &[1])?[0].recall)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            loss: if steps > 0 { total / steps as f64 } else { 0.0 },
            flow_direction: model.config.flow_direction.as_str().to_string(),
            tau: model.tau(),
            val_r_at_1,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

/// Groups `(scene, relation)` picks by ordered (subject, object) categories,
/// keeping pick order, and fills batches with distinct predicates. Batches of
/// one carry no contrastive signal and are dropped.
fn shared_entity_batches(scenes: &[Scene], picks: &[(usize, usize)], size: usize) -> Vec<Vec<(usize, usize)>> {
    let mut groups: Vec<((usize, usize), Vec<(usize, usize)>)> = Vec::new();
    for &(i, r) in picks {
        let t = &scenes[i].gt.triplets[r];
        let key = (t.s_cat, t.o_cat);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push((i, r)),
            None => groups.push((key, vec![(i, r)])),
        }
    }
    let mut batches = Vec::new();
    for (_, mut pending) in groups {
        while !pending.is_empty() {
            let mut batch: Vec<(usize, usize)> = Vec::new();
            let mut rest = Vec::new();
            for (i, r) in pending {
                let p = scenes[i].gt.triplets[r].r;
                let clash = batch.iter().any(|&(bi, br)| scenes[bi].gt.triplets[br].r == p);
                if batch.len() < size && !clash {
                    batch.push((i, r));
                } else {
                    rest.push((i, r));
                }
            }
            if batch.len() > 1 {
                batches.push(batch);
            }
            pending = rest;
        }
    }
    batches
}

/// Per entity pair: every predicate as a scored candidate, with the pair's
/// ground-truth tubes and interval.
pub fn pair_predictions(model: &HattFlowModel, world: &SynthWorld, scene: &Scene) -> Result<Vec<TripletSet>> {
    scene
        .gt
        .triplets
        .iter()
        .zip(&scene.views)
        .map(|(gt, view)| {
            let candidates = world.candidate_texts(gt.s_cat, gt.o_cat)?;
            let scores = model.score_texts(view, &candidates)?;
            let triplets = scores
                .iter()
                .enumerate()
                .map(|(p, &score)| Triplet {
                    r: p,
                    score,
                    ..gt.clone()
                })
                .collect();
            TripletSet::new(scene.gt.video.clone(), scene.gt.frames, triplets)
        })
        .collect()
}

/// All candidate triplets of a scene in one set.
pub fn scene_predictions(model: &HattFlowModel, world: &SynthWorld, scene: &Scene) -> Result<TripletSet> {
    let mut all = Vec::new();
    for set in pair_predictions(model, world, scene)? {
        all.extend(set.triplets);
    }
    let mut set = TripletSet::new(scene.gt.video.clone(), scene.gt.frames, all)?;
    set.sort_by_score();
    Ok(set)
}

/// Predicate recall where each entity pair is ranked on its own: with
/// `K = 1` this is the fraction of pairs whose top predicate is correct
/// (weighted by the always-perfect time IOU).
pub fn predcls_recall(model: &HattFlowModel, world: &SynthWorld, scenes: &[Scene], ks: &[usize]) -> Result<Vec<RecallRow>> {
    let mut pairs = Vec::new();
    for scene in scenes {
        for (pred, gt) in pair_predictions(model, world, scene)?.into_iter().zip(&scene.gt.triplets) {
            let gt = TripletSet::new(scene.gt.video.clone(), scene.gt.frames, vec![gt.clone()])?;
            pairs.push((pred, gt));
        }
    }
    evaluate(&pairs, ks)
}

pub fn test_scenes(world: &SynthWorld) -> Vec<Scene> {
    world.spec.test_range().map(|i| world.scene(i)).collect()
}

/// Trains from scratch and returns the model with its held-out predicate
/// R@1.
pub fn train_and_score(cfg: &RunConfig) -> Result<(HattFlowModel, f64)> {
    let world = SynthWorld::new(cfg.data.clone())?;
    let (model, _) = train(cfg, &world, |_| {})?;
    let r1 = predcls_recall(&model, &world, &test_scenes(&world), &[1])?[0].recall;
    Ok((model, r1))
}
