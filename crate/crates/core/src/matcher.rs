//! Coarse-to-fine pair matching: multi-table bucket lookup, threshold
//! filtered Hamming ranking, exact Euclidean verification with the ratio
//! test, and an exhaustive matcher used as the reference.

use rayon::prelude::*;
use thiserror::Error;

use crate::feature_io::{Descriptor, FeatureSet, MatchRecord};
use crate::hashing::{squared_distance, LongCode, PointCodes, ShortCodes, SwitchRounds};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("codes were produced by different hash families")]
    FamilyMismatch,
    #[error("{what}: {codes} codes for {points} points")]
    CodeCountMismatch {
        what: &'static str,
        codes: usize,
        points: usize,
    },
    #[error("invalid match config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = MatchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Candidates kept after Hamming ranking.
    pub top_k: usize,
    /// Candidates with Hamming distance strictly above this are dropped.
    pub hamming_threshold: u32,
    /// Lowe ratio on distances; compared as `d1^2 < ratio^2 * d2^2`.
    pub ratio: f32,
    /// Fewer ranked candidates than this means no match.
    pub min_candidates_for_ratio: usize,
    pub switch_rounds: SwitchRounds,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            hamming_threshold: 40,
            ratio: 0.8,
            min_candidates_for_ratio: 2,
            switch_rounds: SwitchRounds::DEFAULT,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self, long_bits: u32) -> Result<()> {
        if self.top_k < 2 {
            return Err(MatchError::InvalidConfig(format!(
                "top_k = {} (ratio test needs at least 2)",
                self.top_k
            )));
        }
        if self.hamming_threshold > long_bits {
            return Err(MatchError::InvalidConfig(format!(
                "hamming threshold {} exceeds code length {long_bits}",
                self.hamming_threshold
            )));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(MatchError::InvalidConfig(format!(
                "ratio {} outside (0, 1)",
                self.ratio
            )));
        }
        if self.min_candidates_for_ratio < 2 {
            return Err(MatchError::InvalidConfig(
                "min_candidates_for_ratio must be at least 2".into(),
            ));
        }
        Ok(())
    }

    fn ratio_squared(&self) -> f32 {
        self.ratio * self.ratio
    }
}

/// Per table, train point indices grouped by short code. Stored as a
/// sorted `(code, point)` table so any `m` up to 32 bits is addressable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketIndex {
    bits: u32,
    point_count: usize,
    tables: Vec<BucketTable>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BucketTable {
    codes: Vec<u32>,
    points: Vec<u32>,
}

impl BucketTable {
    fn bucket(&self, code: u32) -> &[u32] {
        let lo = self.codes.partition_point(|&c| c < code);
        let hi = lo + self.codes[lo..].partition_point(|&c| c == code);
        &self.points[lo..hi]
    }
}

pub fn build_bucket_index(train: &ShortCodes) -> BucketIndex {
    let n = train.point_count();
    let tables = (0..train.tables())
        .map(|t| {
            let mut entries: Vec<(u32, u32)> =
                (0..n).map(|p| (train.code(p, t), p as u32)).collect();
            entries.sort_unstable();
            let (codes, points) = entries.into_iter().unzip();
            BucketTable { codes, points }
        })
        .collect();
    BucketIndex {
        bits: train.bits(),
        point_count: n,
        tables,
    }
}

impl BucketIndex {
    pub fn tables(&self) -> usize {
        self.tables.len()
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn point_count(&self) -> usize {
        self.point_count
    }

    /// Train points whose table-`table` code is `code`, ascending.
    pub fn bucket(&self, table: usize, code: u32) -> &[u32] {
        self.tables[table].bucket(code)
    }

    /// Non-empty buckets of one table as `(code, points)`, ascending by code.
    pub fn buckets(&self, table: usize) -> impl Iterator<Item = (u32, &[u32])> + '_ {
        let t = &self.tables[table];
        let mut start = 0;
        std::iter::from_fn(move || {
            if start >= t.codes.len() {
                return None;
            }
            let code = t.codes[start];
            let len = t.codes[start..].partition_point(|&c| c == code);
            let slice = &t.points[start..start + len];
            start += len;
            Some((code, slice))
        })
    }
}

/// Deduplicated train indices sharing at least one bucket with a query,
/// ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateSet(pub Vec<u32>);

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// Reusable dedup state for repeated lookups against one index.
#[derive(Debug, Clone)]
pub struct CandidateCollector {
    stamp: Vec<u32>,
    epoch: u32,
}

impl CandidateCollector {
    pub fn new(point_count: usize) -> Self {
        Self {
            stamp: vec![0; point_count],
            epoch: 0,
        }
    }

    pub fn collect(&mut self, query_short: &[u32], index: &BucketIndex, out: &mut Vec<u32>) {
        out.clear();
        if self.stamp.len() < index.point_count {
            self.stamp.resize(index.point_count, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.fill(0);
            self.epoch = 1;
        }
        for (t, &code) in query_short.iter().enumerate().take(index.tables()) {
            for &p in index.bucket(t, code) {
                let s = &mut self.stamp[p as usize];
                if *s != self.epoch {
                    *s = self.epoch;
                    out.push(p);
                }
            }
        }
        out.sort_unstable();
    }
}

pub fn lookup_candidates(query_short: &[u32], index: &BucketIndex) -> CandidateSet {
    let mut out = Vec::new();
    CandidateCollector::new(index.point_count).collect(query_short, index, &mut out);
    CandidateSet(out)
}

/// Counting sort of candidates by Hamming distance over `0..=threshold`.
/// Candidates beyond the threshold are never stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankHistogram {
    threshold: u32,
    /// `offsets[h]..offsets[h + 1]` spans distance `h` in `order`.
    offsets: Vec<u32>,
    order: Vec<u32>,
}

impl RankHistogram {
    pub fn build(
        query_long: &LongCode,
        candidates: &[u32],
        train_longs: &[LongCode],
        threshold: u32,
    ) -> Self {
        let mut hist = RankHistogram::default();
        let mut distances = Vec::new();
        hist.rebuild(query_long, candidates, train_longs, threshold, &mut distances);
        hist
    }

    fn rebuild(
        &mut self,
        query_long: &LongCode,
        candidates: &[u32],
        train_longs: &[LongCode],
        threshold: u32,
        distances: &mut Vec<u32>,
    ) {
        let buckets = threshold as usize + 1;
        self.threshold = threshold;
        self.offsets.clear();
        self.offsets.resize(buckets + 1, 0);
        distances.clear();
        for &c in candidates {
            let h = query_long.distance(&train_longs[c as usize]);
            distances.push(h);
            if h <= threshold {
                self.offsets[h as usize + 1] += 1;
            }
        }
        for h in 0..buckets {
            self.offsets[h + 1] += self.offsets[h];
        }
        let kept = self.offsets[buckets] as usize;
        self.order.clear();
        self.order.resize(kept, 0);
        let mut cursor: Vec<u32> = self.offsets[..buckets].to_vec();
        for (&c, &h) in candidates.iter().zip(distances.iter()) {
            if h <= threshold {
                let slot = &mut cursor[h as usize];
                self.order[*slot as usize] = c;
                *slot += 1;
            }
        }
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    /// Number of stored candidates at exactly distance `h`.
    pub fn count(&self, h: u32) -> usize {
        if h > self.threshold {
            return 0;
        }
        (self.offsets[h as usize + 1] - self.offsets[h as usize]) as usize
    }

    pub fn bucket(&self, h: u32) -> &[u32] {
        if h > self.threshold {
            return &[];
        }
        &self.order[self.offsets[h as usize] as usize..self.offsets[h as usize + 1] as usize]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// All stored candidates by ascending distance, then ascending index.
    pub fn ranked(&self) -> &[u32] {
        &self.order
    }

    pub fn top(&self, k: usize) -> &[u32] {
        &self.order[..k.min(self.order.len())]
    }
}

pub fn rank_by_hamming(
    query_long: &LongCode,
    candidates: &CandidateSet,
    train_longs: &[LongCode],
    cfg: &MatchConfig,
) -> Vec<u32> {
    RankHistogram::build(query_long, &candidates.0, train_longs, cfg.hamming_threshold)
        .top(cfg.top_k)
        .to_vec()
}

/// Nearest ranked candidate if it passes the ratio test. Ties in distance
/// go to the smaller train index.
pub fn euclidean_verify(
    query_index: u32,
    query_desc: &Descriptor,
    ranked: &[u32],
    train_descs: &[Descriptor],
    cfg: &MatchConfig,
) -> Option<MatchRecord> {
    verify_with_runner_up(query_index, query_desc, ranked, &[], train_descs, cfg)
}

/// As [`euclidean_verify`], but `runner_up` candidates only compete for
/// the second distance: they can reject a match, never win one.
pub fn verify_with_runner_up(
    query_index: u32,
    query_desc: &Descriptor,
    ranked: &[u32],
    runner_up: &[u32],
    train_descs: &[Descriptor],
    cfg: &MatchConfig,
) -> Option<MatchRecord> {
    if ranked.is_empty() || ranked.len() + runner_up.len() < cfg.min_candidates_for_ratio.max(2) {
        return None;
    }
    let dist = |t: u32| squared_distance(query_desc, &train_descs[t as usize], cfg.switch_rounds);
    let mut best: Option<(f32, u32)> = None;
    let mut second = f32::INFINITY;
    for &t in ranked {
        let d = dist(t);
        match best {
            Some((bd, bi)) if (d, t) >= (bd, bi) => second = second.min(d),
            Some((bd, _)) => {
                second = second.min(bd);
                best = Some((d, t));
            }
            None => best = Some((d, t)),
        }
    }
    for &t in runner_up {
        second = second.min(dist(t));
    }
    let (d1, t) = best?;
    // A zero second distance rejects, including the 0/0 duplicate case.
    (d1 < cfg.ratio_squared() * second).then(|| MatchRecord::new(query_index, t, d1))
}

/// Per-query restriction of the candidate set, applied between lookup and
/// ranking.
pub trait CandidateFilter: Sync {
    fn retain(&self, query: usize, candidates: &mut Vec<u32>);
}

/// The identity filter.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFilter;

impl CandidateFilter for NoFilter {
    fn retain(&self, _query: usize, _candidates: &mut Vec<u32>) {}
}

fn check_inputs(
    fs_i: &FeatureSet,
    fs_j: &FeatureSet,
    codes_i: &PointCodes,
    codes_j: &PointCodes,
    cfg: &MatchConfig,
) -> Result<()> {
    if codes_i.echo != codes_j.echo {
        return Err(MatchError::FamilyMismatch);
    }
    for (what, fs, codes) in [("query", fs_i, codes_i), ("train", fs_j, codes_j)] {
        if codes.len() != fs.len() || codes.short.point_count() != fs.len() {
            return Err(MatchError::CodeCountMismatch {
                what,
                codes: codes.len(),
                points: fs.len(),
            });
        }
    }
    cfg.validate(codes_i.echo.long_bits)
}

/// Match every point of `fs_i` against `fs_j`. Output is sorted by query
/// index with at most one record per query.
pub fn match_pair(
    fs_i: &FeatureSet,
    fs_j: &FeatureSet,
    codes_i: &PointCodes,
    codes_j: &PointCodes,
    cfg: &MatchConfig,
) -> Result<Vec<MatchRecord>> {
    match_pair_filtered(fs_i, fs_j, codes_i, codes_j, cfg, &NoFilter)
}

pub fn match_pair_filtered<F: CandidateFilter + ?Sized>(
    fs_i: &FeatureSet,
    fs_j: &FeatureSet,
    codes_i: &PointCodes,
    codes_j: &PointCodes,
    cfg: &MatchConfig,
    filter: &F,
) -> Result<Vec<MatchRecord>> {
    check_inputs(fs_i, fs_j, codes_i, codes_j, cfg)?;
    if fs_j.is_empty() {
        return Ok(Vec::new());
    }
    let index = build_bucket_index(&codes_j.short);
    let mut collector = CandidateCollector::new(fs_j.len());
    let mut lookup = Vec::new();
    let mut candidates = Vec::new();
    let mut hist = RankHistogram::default();
    let mut scratch = Vec::new();
    let mut runner_up = Vec::new();
    let need = cfg.min_candidates_for_ratio.max(2);
    let mut out = Vec::new();
    for q in 0..fs_i.len() {
        collector.collect(codes_i.short.point(q), &index, &mut lookup);
        candidates.clone_from(&lookup);
        filter.retain(q, &mut candidates);
        hist.rebuild(
            &codes_i.long[q],
            &candidates,
            &codes_j.long,
            cfg.hamming_threshold,
            &mut scratch,
        );
        let ranked = hist.top(cfg.top_k);
        runner_up.clear();
        if !ranked.is_empty() && ranked.len() < need {
            runner_up_pool(&codes_i.long[q], &lookup, ranked, &codes_j.long, need - ranked.len(), &mut runner_up);
        }
        if let Some(m) = verify_with_runner_up(
            q as u32,
            &fs_i.descriptors[q],
            ranked,
            &runner_up,
            &fs_j.descriptors,
            cfg,
        ) {
            out.push(m);
        }
    }
    Ok(out)
}

/// When fewer candidates survive the threshold and filter than the ratio
/// test needs, the nearest `count` other lookup candidates by Hamming
/// distance then index supply the runner-up distance.
fn runner_up_pool(
    query_long: &LongCode,
    lookup: &[u32],
    ranked: &[u32],
    train_longs: &[LongCode],
    count: usize,
    out: &mut Vec<u32>,
) {
    let mut pool: Vec<(u32, u32)> = lookup
        .iter()
        .filter(|c| !ranked.contains(c))
        .map(|&c| (query_long.distance(&train_longs[c as usize]), c))
        .collect();
    pool.sort_unstable();
    out.clear();
    out.extend(pool.iter().take(count).map(|&(_, c)| c));
}

fn nearest_two(query: &Descriptor, train: &[Descriptor]) -> Option<(u32, u32, u32)> {
    let mut best = (u32::MAX, u32::MAX);
    let mut second = u32::MAX;
    for (t, d) in train.iter().enumerate() {
        let dist = query.squared_distance(d);
        if (dist, t as u32) < best {
            second = second.min(best.0);
            best = (dist, t as u32);
        } else {
            second = second.min(dist);
        }
    }
    (train.len() >= 2).then_some((best.1, best.0, second))
}

/// Exhaustive nearest and second nearest over all of `fs_j`, with the same
/// ratio rule as [`euclidean_verify`].
pub fn brute_force_match(fs_i: &FeatureSet, fs_j: &FeatureSet, ratio: f32) -> Vec<MatchRecord> {
    let ratio_sq = ratio * ratio;
    fs_i.descriptors
        .par_iter()
        .enumerate()
        .filter_map(|(q, d)| {
            let (t, d1, d2) = nearest_two(d, &fs_j.descriptors)?;
            let (d1, d2) = (d1 as f32, d2 as f32);
            (d1 < ratio_sq * d2).then(|| MatchRecord::new(q as u32, t, d1))
        })
        .collect()
}
