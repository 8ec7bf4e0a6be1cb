//! Seeded synthetic cross-modal scenes.
//!
//! A scene places distinct-category entities on a patch grid and assigns a
//! predicate to every ordered entity pair `(i, j)`, `i < j`. The vision graph
//! is the grid: entity patches carry their category prototype and, for each
//! pair, the free patch nearest the pair's midpoint carries
//! `relation[p] + subject[c_s] + object[c_o]`. Every triplet also has a text
//! graph with three fully connected tokens (subject word, predicate word,
//! object word) whose directed edges carry role-pair prototypes. All features
//! get i.i.d. Gaussian noise of standard deviation `noise`.
//!
//! Entity pairs are given (predicate classification), so by default each
//! triplet is matched against a pair view: the same grid with only the
//! pair's two entity patches and its relation patch filled in.
//!
//! Everything derives from `seed`: the shared prototypes from stream 0 and
//! scene `i` from stream `i + 1`, so scenes can be generated in any order.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{complete_edges, grid_edges, laplacian_pe, GraphBatch};
use crate::metrics::{Triplet, TripletSet, Tube};
use crate::params::{normal, Rng};
use crate::tensor::Tensor;

pub const PREDICATE_NAMES: [&str; 12] = [
    "talking_to",
    "walking_with",
    "next_to",
    "looking_at",
    "holding",
    "waiting_for",
    "friend_of",
    "behind",
    "wearing",
    "sitting_on",
    "carrying",
    "facing",
];

pub const CATEGORY_NAMES: [&str; 8] = [
    "adult", "child", "bag", "bench", "bicycle", "dog", "table", "stroller",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_predicates: usize,
    pub num_categories: usize,
    pub num_entities: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Node feature width `d_n` (text tokens and vision patches).
    pub node_dim: usize,
    /// Text edge feature width `d_e`.
    pub edge_dim: usize,
    pub pe_dim: usize,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
    pub view: VisionView,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_predicates: 8,
            num_categories: 4,
            num_entities: 3,
            grid_rows: 4,
            grid_cols: 4,
            node_dim: 8,
            edge_dim: 8,
            pe_dim: 2,
            frames: 16,
            noise: 0.1,
            seed: 0,
            view: VisionView::Pair,
            train_scenes: 200,
            val_scenes: 20,
            test_scenes: 50,
        }
    }
}

/// Which vision graph a triplet text is paired with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionView {
    /// Only the pair's entity patches and relation patch are non-zero.
    #[default]
    Pair,
    /// The whole scene; the text must be bound to one of several relations.
    Scene,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_rows * self.grid_cols;
        let pairs = self.num_entities * self.num_entities.saturating_sub(1) / 2;
        let checks = [
            (self.num_predicates >= 2, "num_predicates must be at least 2"),
            (self.num_entities >= 2, "num_entities must be at least 2"),
            (
                self.num_categories >= self.num_entities,
                "num_categories must cover num_entities distinct categories",
            ),
            (self.noise >= 0.0 && self.noise.is_finite(), "noise must be finite and >= 0"),
            (self.node_dim > 0 && self.edge_dim > 0, "feature widths must be positive"),
            (self.frames >= 2, "frames must be at least 2"),
            (
                self.num_entities + pairs <= cells,
                "grid too small for entity and relation patches",
            ),
            (self.pe_dim >= 1 && self.pe_dim < 3 && self.pe_dim < cells, "pe_dim must be in 1..3"),
        ];
        match checks.iter().find(|c| !c.0) {
            Some((_, msg)) => Err(Error::contract(format!("synthetic spec: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train_scenes
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train_scenes..self.train_scenes + self.val_scenes
    }

    pub fn test_range(&self) -> Range<usize> {
        let start = self.train_scenes + self.val_scenes;
        start..start + self.test_scenes
    }

    pub fn predicate_name(&self, p: usize) -> String {
        PREDICATE_NAMES.get(p).map_or_else(|| format!("predicate_{p}"), |s| s.to_string())
    }

    pub fn category_name(&self, c: usize) -> String {
        CATEGORY_NAMES.get(c).map_or_else(|| format!("category_{c}"), |s| s.to_string())
    }
}

/// Role pairs for the six directed edges of a triplet text graph, indexed by
/// `(from, to)` over roles subject = 0, predicate = 1, object = 2.
const ROLE_EDGES: usize = 6;

fn role_edge(from: usize, to: usize) -> usize {
    // (0,1) (0,2) (1,0) (1,2) (2,0) (2,1), the order of `complete_edges(3)`.
    from * 2 + if to > from { to - 1 } else { to }
}

/// Noise-free prototypes shared by every scene.
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub category_word: Tensor,
    pub predicate_word: Tensor,
    pub role_edge: Tensor,
    pub category_patch: Tensor,
    pub relation_patch: Tensor,
    pub subject_patch: Tensor,
    pub object_patch: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub category: usize,
    /// Row-major patch index.
    pub patch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub patch: usize,
    pub t1: usize,
    pub t2: usize,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub index: usize,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub vision: GraphBatch,
    /// Vision input per relation according to `spec.view`, same order as
    /// `relations`.
    pub views: Vec<GraphBatch>,
    /// One noisy text graph per relation, same order.
    pub texts: Vec<GraphBatch>,
    pub gt: TripletSet,
}

/// Prototype tables plus the fixed graph structure shared by all scenes.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    pub protos: Prototypes,
    text_pe: Tensor,
    vision_pe: Tensor,
}

fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SynthWorld {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(spec.seed, 0);
        let (dn, de) = (spec.node_dim, spec.edge_dim);
        let protos = Prototypes {
            category_word: normal(&mut rng, &[spec.num_categories, dn], 1.0),
            predicate_word: normal(&mut rng, &[spec.num_predicates, dn], 1.0),
            role_edge: normal(&mut rng, &[ROLE_EDGES, de], 1.0),
            category_patch: normal(&mut rng, &[spec.num_categories, dn], 1.0),
            relation_patch: normal(&mut rng, &[spec.num_predicates, dn], 1.0),
            subject_patch: normal(&mut rng, &[spec.num_categories, dn], 1.0),
            object_patch: normal(&mut rng, &[spec.num_categories, dn], 1.0),
        };
        let text_pe = laplacian_pe(&complete_edges(3), 3, spec.pe_dim)?;
        let cells = spec.grid_rows * spec.grid_cols;
        let vision_pe = laplacian_pe(&grid_edges(spec.grid_rows, spec.grid_cols), cells, spec.pe_dim)?;
        Ok(Self {
            spec,
            protos,
            text_pe,
            vision_pe,
        })
    }

    fn noisy(&self, rng: &mut Rng, mut rows: Vec<Vec<f64>>) -> Tensor {
        if self.spec.noise > 0.0 {
            let dist = Normal::new(0.0, self.spec.noise).expect("finite noise");
            for x in rows.iter_mut().flatten() {
                *x += dist.sample(rng);
            }
        }
        Tensor::from_rows(&rows).expect("non-empty feature rows")
    }

    fn text_rows(&self, s_cat: usize, predicate: usize, o_cat: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let p = &self.protos;
        let nodes = vec![
            p.category_word.row_slice(s_cat).to_vec(),
            p.predicate_word.row_slice(predicate).to_vec(),
            p.category_word.row_slice(o_cat).to_vec(),
        ];
        let edges = complete_edges(3)
            .into_iter()
            .map(|(a, b)| p.role_edge.row_slice(role_edge(a, b)).to_vec())
            .collect();
        (nodes, edges)
    }

    fn text_graph(&self, nodes: Tensor, edges: Tensor) -> GraphBatch {
        GraphBatch {
            node_feats: nodes,
            edge_feats: Some(edges),
            edges: complete_edges(3),
            pe: self.text_pe.clone(),
            grid: None,
        }
    }

    /// Noise-free text graph for a candidate triplet.
    pub fn prototype_text(&self, s_cat: usize, predicate: usize, o_cat: usize) -> Result<GraphBatch> {
        let s = &self.spec;
        if s_cat >= s.num_categories || o_cat >= s.num_categories || predicate >= s.num_predicates {
            return Err(Error::contract(format!(
                "triplet ({s_cat}, {predicate}, {o_cat}) outside the vocabulary"
            )));
        }
        let (nodes, edges) = self.text_rows(s_cat, predicate, o_cat);
        Ok(self.text_graph(
            Tensor::from_rows(&nodes)?,
            Tensor::from_rows(&edges)?,
        ))
    }

    /// One candidate text per predicate for an entity pair.
    pub fn candidate_texts(&self, s_cat: usize, o_cat: usize) -> Result<Vec<GraphBatch>> {
        (0..self.spec.num_predicates)
            .map(|p| self.prototype_text(s_cat, p, o_cat))
            .collect()
    }

    pub fn scene(&self, index: usize) -> Scene {
        let s = &self.spec;
        let mut rng = stream_rng(s.seed, index as u64 + 1);
        let cells = s.grid_rows * s.grid_cols;
        let cats = sample(&mut rng, s.num_categories, s.num_entities).into_vec();
        let patches = sample(&mut rng, cells, s.num_entities).into_vec();
        let entities: Vec<Entity> = cats
            .iter()
            .zip(&patches)
            .map(|(&category, &patch)| Entity { category, patch })
            .collect();

        let mut taken = vec![false; cells];
        for e in &entities {
            taken[e.patch] = true;
        }
        let mut relations = Vec::new();
        for i in 0..entities.len() {
            for j in i + 1..entities.len() {
                let predicate = rng.random_range(0..s.num_predicates);
                let patch = self.nearest_free(entities[i].patch, entities[j].patch, &taken);
                taken[patch] = true;
                let t1 = rng.random_range(0..s.frames / 2);
                let t2 = rng.random_range(t1 + 1..s.frames);
                relations.push(Relation {
                    subject: i,
                    object: j,
                    predicate,
                    patch,
                    t1,
                    t2,
                });
            }
        }

        let p = &self.protos;
        let mut patch_rows = vec![vec![0.0; s.node_dim]; cells];
        for e in &entities {
            patch_rows[e.patch] = p.category_patch.row_slice(e.category).to_vec();
        }
        for r in &relations {
            let (cs, co) = (entities[r.subject].category, entities[r.object].category);
            patch_rows[r.patch] = (0..s.node_dim)
                .map(|k| {
                    p.relation_patch.at(r.predicate, k) + p.subject_patch.at(cs, k) + p.object_patch.at(co, k)
                })
                .collect();
        }
        let grid = |node_feats| GraphBatch {
            node_feats,
            edge_feats: None,
            edges: grid_edges(s.grid_rows, s.grid_cols),
            pe: self.vision_pe.clone(),
            grid: Some((s.grid_rows, s.grid_cols)),
        };
        let views_rows: Vec<Vec<Vec<f64>>> = relations
            .iter()
            .map(|r| {
                let mut rows = vec![vec![0.0; s.node_dim]; cells];
                for k in [entities[r.subject].patch, entities[r.object].patch, r.patch] {
                    rows[k] = patch_rows[k].clone();
                }
                rows
            })
            .collect();
        let vision = grid(self.noisy(&mut rng, patch_rows));

        let texts = relations
            .iter()
            .map(|r| {
                let (nodes, edges) =
                    self.text_rows(entities[r.subject].category, r.predicate, entities[r.object].category);
                let nodes = self.noisy(&mut rng, nodes);
                let edges = self.noisy(&mut rng, edges);
                self.text_graph(nodes, edges)
            })
            .collect();
        let views = match s.view {
            VisionView::Scene => vec![vision.clone(); relations.len()],
            VisionView::Pair => views_rows.into_iter().map(|rows| grid(self.noisy(&mut rng, rows))).collect(),
        };

        let triplets = relations
            .iter()
            .map(|r| Triplet {
                r: r.predicate,
                t1: r.t1,
                t2: r.t2,
                s_cat: entities[r.subject].category,
                o_cat: entities[r.object].category,
                s_tube: Tube::constant(r.t1, r.t2, self.patch_box(entities[r.subject].patch))
                    .expect("ordered interval"),
                o_tube: Tube::constant(r.t1, r.t2, self.patch_box(entities[r.object].patch))
                    .expect("ordered interval"),
                score: 1.0,
            })
            .collect();
        let gt = TripletSet::new(format!("scene-{index:05}"), s.frames, triplets)
            .expect("generated triplets are valid");

        Scene {
            index,
            entities,
            relations,
            vision,
            views,
            texts,
            gt,
        }
    }

    /// Unit box covering a patch, in patch coordinates.
    pub fn patch_box(&self, patch: usize) -> [f64; 4] {
        let (r, c) = (patch / self.spec.grid_cols, patch % self.spec.grid_cols);
        [c as f64, r as f64, c as f64 + 1.0, r as f64 + 1.0]
    }

    fn nearest_free(&self, a: usize, b: usize, taken: &[bool]) -> usize {
        let cols = self.spec.grid_cols;
        let pos = |i: usize| ((i / cols) as f64, (i % cols) as f64);
        let (pa, pb) = (pos(a), pos(b));
        let mid = ((pa.0 + pb.0) / 2.0, (pa.1 + pb.1) / 2.0);
        (0..taken.len())
            .filter(|&i| !taken[i])
            .min_by(|&x, &y| {
                let d = |i: usize| {
                    let p = pos(i);
                    (p.0 - mid.0).powi(2) + (p.1 - mid.1).powi(2)
                };
                d(x).total_cmp(&d(y))
            })
            .expect("validated grid has a free patch")
    }
}

/// Convenience wrapper: `(text graphs, vision graph, ground truth)` for one
/// scene.
pub fn generate_scene(spec: &SynthSpec, index: usize) -> Result<Scene> {
    Ok(SynthWorld::new(spec.clone())?.scene(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_edges_follow_complete_order() {
        let idx: Vec<usize> = complete_edges(3).into_iter().map(|(a, b)| role_edge(a, b)).collect();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn scenes_are_deterministic() {
        let world = SynthWorld::new(SynthSpec::default()).unwrap();
        let a = world.scene(3);
        let b = SynthWorld::new(SynthSpec::default()).unwrap().scene(3);
        assert_eq!(a.vision, b.vision);
        assert_eq!(a.texts, b.texts);
        assert_eq!(a.gt, b.gt);
    }

    #[test]
    fn zero_noise_texts_equal_prototypes() {
        let spec = SynthSpec {
            noise: 0.0,
            ..SynthSpec::default()
        };
        let world = SynthWorld::new(spec).unwrap();
        let scene = world.scene(0);
        for (r, text) in scene.relations.iter().zip(&scene.texts) {
            let want = world
                .prototype_text(
                    scene.entities[r.subject].category,
                    r.predicate,
                    scene.entities[r.object].category,
                )
                .unwrap();
            assert_eq!(text, &want);
        }
    }

    #[test]
    fn relation_patches_are_free() {
        let world = SynthWorld::new(SynthSpec::default()).unwrap();
        for i in 0..20 {
            let s = world.scene(i);
            let mut used: Vec<usize> = s.entities.iter().map(|e| e.patch).collect();
            used.extend(s.relations.iter().map(|r| r.patch));
            let n = used.len();
            used.sort_unstable();
            used.dedup();
            assert_eq!(used.len(), n);
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = SynthSpec {
            num_predicates: 1,
            ..SynthSpec::default()
        };
        assert!(matches!(SynthWorld::new(spec), Err(Error::Contract(_))));
    }
}
