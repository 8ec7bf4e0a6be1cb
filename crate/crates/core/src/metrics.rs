//! Scene-graph recall: triplet matching on mask tubes and time intervals,
//! soft Recall@K and mean Recall@K.
//!
//! A prediction can recall a ground truth when predicate, subject and object
//! categories agree and both subject and object tube IOUs exceed 0.5. Among
//! the top-K predictions we pick a one-to-one assignment with the largest
//! total time-IOU credit. Each matched ground truth contributes its time IOU
//! to the recall numerator.
//!
//! Matches never cross predicate categories, so the optimum splits into one
//! independent problem per category. Per-category credit, and with it both
//! R@K and mR@K, is therefore the same for every optimal assignment and can
//! only grow with K.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tube IOU must be strictly above this for a match.
pub const TUBE_IOU_THRESHOLD: f64 = 0.5;

/// Current triplet JSONL schema version.
pub const TRIPLET_FORMAT_VERSION: u32 = 1;

/// `[x1, y1, x2, y2]` with `x1 <= x2`, `y1 <= y2`.
pub type BoxXyxy = [f64; 4];

fn area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn intersection(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// One box per frame starting at `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    pub start: usize,
    pub boxes: Vec<BoxXyxy>,
}

impl Tube {
    pub fn new(start: usize, boxes: Vec<BoxXyxy>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::contract("tube needs at least one frame"));
        }
        if let Some(b) = boxes
            .iter()
            .find(|b| !(b.iter().all(|v| v.is_finite()) && b[0] <= b[2] && b[1] <= b[3]))
        {
            return Err(Error::contract(format!("malformed box {b:?}")));
        }
        Ok(Self { start, boxes })
    }

    /// Same box on every frame of `[t1, t2]`.
    pub fn constant(t1: usize, t2: usize, b: BoxXyxy) -> Result<Self> {
        if t2 < t1 {
            return Err(Error::contract(format!("interval ({t1}, {t2}) is reversed")));
        }
        Self::new(t1, vec![b; t2 - t1 + 1])
    }

    /// Last frame covered (inclusive).
    pub fn end(&self) -> usize {
        self.start + self.boxes.len() - 1
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoxXyxy> {
        frame.checked_sub(self.start).and_then(|i| self.boxes.get(i))
    }
}

/// Volume IOU over the union of both frame ranges. A frame covered by one
/// tube only adds that box's area to the union. Zero total union gives 0.
pub fn tube_iou(a: &Tube, b: &Tube) -> f64 {
    let (lo, hi) = (a.start.min(b.start), a.end().max(b.end()));
    let (mut inter, mut union) = (0.0, 0.0);
    for f in lo..=hi {
        match (a.box_at(f), b.box_at(f)) {
            (Some(x), Some(y)) => {
                let i = intersection(x, y);
                inter += i;
                union += area(x) + area(y) - i;
            }
            (Some(x), None) | (None, Some(x)) => union += area(x),
            (None, None) => {}
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Inclusive frame-count IOU of two intervals.
pub fn time_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let len = |x: (usize, usize)| (x.1 - x.0 + 1) as f64;
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let overlap = if hi >= lo { (hi - lo + 1) as f64 } else { 0.0 };
    overlap / (len(a) + len(b) - overlap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    /// Predicate category.
    pub r: usize,
    pub t1: usize,
    pub t2: usize,
    pub s_cat: usize,
    pub o_cat: usize,
    pub s_tube: Tube,
    pub o_tube: Tube,
    /// Ranking score; ignored for ground truth.
    pub score: f64,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        if self.t2 < self.t1 {
            return Err(Error::contract(format!(
                "interval ({}, {}) is reversed",
                self.t1, self.t2
            )));
        }
        for (name, tube) in [("s_tube", &self.s_tube), ("o_tube", &self.o_tube)] {
            if tube.start != self.t1 || tube.end() != self.t2 {
                return Err(Error::contract(format!(
                    "{name} covers frames {}..={} but the interval is {}..={}",
                    tube.start,
                    tube.end(),
                    self.t1,
                    self.t2
                )));
            }
        }
        if !self.score.is_finite() {
            return Err(Error::contract("triplet score must be finite"));
        }
        Ok(())
    }

    pub fn interval(&self) -> (usize, usize) {
        (self.t1, self.t2)
    }

    /// Hard gate: labels agree and both tubes overlap enough.
    pub fn can_recall(&self, gt: &Triplet) -> bool {
        self.r == gt.r
            && self.s_cat == gt.s_cat
            && self.o_cat == gt.o_cat
            && tube_iou(&self.s_tube, &gt.s_tube) > TUBE_IOU_THRESHOLD
            && tube_iou(&self.o_tube, &gt.o_tube) > TUBE_IOU_THRESHOLD
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletSet {
    pub video: String,
    pub frames: usize,
    pub triplets: Vec<Triplet>,
}

impl TripletSet {
    pub fn new(video: impl Into<String>, frames: usize, triplets: Vec<Triplet>) -> Result<Self> {
        let set = Self {
            video: video.into(),
            frames,
            triplets,
        };
        for t in &set.triplets {
            t.validate()?;
            if t.t2 >= frames {
                return Err(Error::contract(format!(
                    "triplet ends at frame {} but the video has {frames} frames",
                    t.t2
                )));
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Indices by descending score; equal scores keep the lower index first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.triplets.len()).collect();
        idx.sort_by(|&a, &b| self.triplets[b].score.total_cmp(&self.triplets[a].score));
        idx
    }

    pub fn sort_by_score(&mut self) {
        let order = self.ranking();
        let sorted = order.iter().map(|&i| self.triplets[i].clone()).collect();
        self.triplets = sorted;
    }
}

/// One prediction credited to one ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    /// Index into the prediction set (not the ranking).
    pub pred: usize,
    pub gt: usize,
    /// Time IOU of the two intervals.
    pub weight: f64,
}

/// Maximum-credit one-to-one matching of the top-`k` predictions, ascending
/// by ground-truth index.
pub fn match_triplets(pred: &TripletSet, gt: &TripletSet, k: usize) -> Vec<Match> {
    let top: Vec<usize> = pred.ranking().into_iter().take(k).collect();
    if top.is_empty() || gt.is_empty() {
        return Vec::new();
    }
    let weight: Vec<Vec<Option<f64>>> = top
        .iter()
        .map(|&p| {
            let pt = &pred.triplets[p];
            gt.triplets
                .iter()
                .map(|g| pt.can_recall(g).then(|| time_iou(pt.interval(), g.interval())))
                .collect()
        })
        .collect();
    let score: Vec<Vec<f64>> = weight
        .iter()
        .map(|row| row.iter().map(|w| w.unwrap_or(0.0)).collect())
        .collect();
    let mut out: Vec<Match> = max_weight_assignment(&score)
        .into_iter()
        .filter_map(|(p, g)| {
            weight[p][g].map(|w| Match {
                pred: top[p],
                gt: g,
                weight: w,
            })
        })
        .collect();
    out.sort_by_key(|m| m.gt);
    out
}

/// Maximum-weight assignment on a dense rectangular matrix, returned as
/// `(row, col)` pairs covering every row when rows <= cols (or every column
/// otherwise).
fn max_weight_assignment(w: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| w[r][c]).collect()).collect();
        return max_weight_assignment(&t).into_iter().map(|(c, r)| (r, c)).collect();
    }
    // Shortest augmenting path Hungarian method on cost = -w, 1-based.
    let (n, m) = (rows, cols);
    let cost = |i: usize, j: usize| -w[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}

fn check_k(k: usize, gt: &TripletSet) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::contract("recall is undefined for an empty ground-truth set"));
    }
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    Ok(())
}

/// Soft recall: summed match weights over the number of ground truths.
pub fn recall_at_k(pred: &TripletSet, gt: &TripletSet, k: usize) -> Result<f64> {
    check_k(k, gt)?;
    let total: f64 = match_triplets(pred, gt, k).iter().map(|m| m.weight).sum();
    Ok(total / gt.len() as f64)
}

/// Unweighted mean of per-predicate recall over predicates present in `gt`.
pub fn mean_recall_at_k(pred: &TripletSet, gt: &TripletSet, k: usize) -> Result<f64> {
    check_k(k, gt)?;
    let matched = match_triplets(pred, gt, k);
    let mut per: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for t in &gt.triplets {
        per.entry(t.r).or_default().1 += 1;
    }
    for m in matched {
        per.get_mut(&gt.triplets[m.gt].r).expect("category present").0 += m.weight;
    }
    let sum: f64 = per.values().map(|(w, n)| w / *n as f64).sum();
    Ok(sum / per.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    pub recall: f64,
    pub mean_recall: f64,
}

/// Pooled recall over many videos: credits and ground-truth counts are summed
/// across videos before dividing, per predicate for the mean variant.
pub fn evaluate(pairs: &[(TripletSet, TripletSet)], ks: &[usize]) -> Result<Vec<RecallRow>> {
    let total_gt: usize = pairs.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return Err(Error::contract("recall is undefined for an empty ground-truth set"));
    }
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::contract("K must be at least 1"));
            }
            let mut credit = 0.0;
            let mut per: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for (pred, gt) in pairs {
                for t in &gt.triplets {
                    per.entry(t.r).or_default().1 += 1;
                }
                for m in match_triplets(pred, gt, k) {
                    credit += m.weight;
                    per.get_mut(&gt.triplets[m.gt].r).expect("category present").0 += m.weight;
                }
            }
            let mean = per.values().map(|(w, n)| w / *n as f64).sum::<f64>() / per.len() as f64;
            Ok(RecallRow {
                k,
                recall: credit / total_gt as f64,
                mean_recall: mean,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TripletRecord {
    #[serde(default = "default_version")]
    version: u32,
    video: String,
    r: usize,
    t1: usize,
    t2: usize,
    s_cat: usize,
    o_cat: usize,
    s_tube: Vec<BoxXyxy>,
    o_tube: Vec<BoxXyxy>,
    #[serde(default)]
    score: f64,
}

fn default_version() -> u32 {
    TRIPLET_FORMAT_VERSION
}

/// One JSON object per triplet; videos are written in order.
pub fn write_triplets_jsonl(sets: &[TripletSet]) -> Result<String> {
    let mut out = String::new();
    for set in sets {
        for t in &set.triplets {
            let rec = TripletRecord {
                version: TRIPLET_FORMAT_VERSION,
                video: set.video.clone(),
                r: t.r,
                t1: t.t1,
                t2: t.t2,
                s_cat: t.s_cat,
                o_cat: t.o_cat,
                s_tube: t.s_tube.boxes.clone(),
                o_tube: t.o_tube.boxes.clone(),
                score: t.score,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parses triplet JSONL, grouping lines by video in order of first
/// appearance. Frame counts are inferred from the last frame referenced.
pub fn read_triplets_jsonl(text: &str) -> Result<Vec<TripletSet>> {
    let mut sets: Vec<TripletSet> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: String| Error::Format(format!("line {}: {e}", lineno + 1));
        let rec: TripletRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        if rec.version != TRIPLET_FORMAT_VERSION {
            return Err(at(format!("unsupported triplet format version {}", rec.version)));
        }
        let t = Triplet {
            r: rec.r,
            t1: rec.t1,
            t2: rec.t2,
            s_cat: rec.s_cat,
            o_cat: rec.o_cat,
            s_tube: Tube::new(rec.t1, rec.s_tube).map_err(|e| at(e.to_string()))?,
            o_tube: Tube::new(rec.t1, rec.o_tube).map_err(|e| at(e.to_string()))?,
            score: rec.score,
        };
        t.validate().map_err(|e| at(e.to_string()))?;
        let set = match sets.iter_mut().position(|s| s.video == rec.video) {
            Some(i) => &mut sets[i],
            None => {
                sets.push(TripletSet {
                    video: rec.video,
                    ..TripletSet::default()
                });
                sets.last_mut().expect("just pushed")
            }
        };
        set.frames = set.frames.max(t.t2 + 1);
        set.triplets.push(t);
    }
    Ok(sets)
}
