//! Out-of-core scheduling: images are partitioned into blocks of `N_p`
//! images and groups of `M` blocks. Pair plans enumerate every image pair
//! once in a traversal where consecutive tasks share data, and a residency
//! simulator drives the load/prefetch/evict state machine for one worker.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

use crate::feature_io::DatasetManifest;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("cannot partition an empty dataset")]
    Empty,
    #[error("invalid partition parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("pair ({0}, {1}) references an unknown image or is not a proper pair")]
    UnknownPair(u32, u32),
    #[error("residency state inconsistent: {0}")]
    Inconsistent(String),
}

pub type Result<T, E = SchedulerError> = std::result::Result<T, E>;

/// Contiguous assignment of images to blocks and blocks to groups. Block
/// and group ids are global and ascending in image order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    block_images: usize,
    blocks_per_group: usize,
    image_count: usize,
}

impl Partition {
    pub fn new(image_count: usize, block_images: usize, blocks_per_group: usize) -> Result<Self> {
        if image_count == 0 {
            return Err(SchedulerError::Empty);
        }
        if block_images == 0 {
            return Err(SchedulerError::InvalidParameter("block_images must be at least 1"));
        }
        if blocks_per_group == 0 {
            return Err(SchedulerError::InvalidParameter(
                "blocks_per_group must be at least 1",
            ));
        }
        Ok(Partition {
            block_images,
            blocks_per_group,
            image_count,
        })
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    pub fn block_images(&self) -> usize {
        self.block_images
    }

    pub fn blocks_per_group(&self) -> usize {
        self.blocks_per_group
    }

    pub fn block_count(&self) -> usize {
        self.image_count.div_ceil(self.block_images)
    }

    pub fn group_count(&self) -> usize {
        self.block_count().div_ceil(self.blocks_per_group)
    }

    /// Image indices of block `b`.
    pub fn block(&self, b: usize) -> Range<u32> {
        let start = b * self.block_images;
        let end = ((b + 1) * self.block_images).min(self.image_count);
        start as u32..end as u32
    }

    /// Block ids of group `g`.
    pub fn group(&self, g: usize) -> Range<usize> {
        let start = g * self.blocks_per_group;
        start..((g + 1) * self.blocks_per_group).min(self.block_count())
    }

    pub fn group_of_block(&self, b: usize) -> usize {
        b / self.blocks_per_group
    }

    pub fn block_of_image(&self, image: u32) -> usize {
        image as usize / self.block_images
    }

    /// Images of group `g`, contiguous.
    pub fn group_images(&self, g: usize) -> Range<u32> {
        let blocks = self.group(g);
        self.block(blocks.start).start..self.block(blocks.end - 1).end
    }

    /// Nested view: groups of blocks of image indices.
    pub fn layout(&self) -> Vec<Vec<Vec<u32>>> {
        (0..self.group_count())
            .map(|g| self.group(g).map(|b| self.block(b).collect()).collect())
            .collect()
    }
}

pub fn partition(
    manifest: &DatasetManifest,
    block_images: usize,
    blocks_per_group: usize,
) -> Result<Partition> {
    Partition::new(manifest.len(), block_images, blocks_per_group)
}

/// Images per block such that three blocks fit the budget.
pub fn block_images_for_budget(budget_bytes: u64, mean_image_bytes: u64) -> usize {
    if mean_image_bytes == 0 {
        return 1;
    }
    ((budget_bytes / mean_image_bytes) / 3).max(1) as usize
}

/// One unit of matching work: every listed image pair between two blocks
/// (or within one block when both ids are equal).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTask {
    /// Group ids `(lower, upper)`.
    pub groups: (usize, usize),
    /// Block ids `(lower, upper)`.
    pub blocks: (usize, usize),
    /// Image pairs `(a, b)` with `a < b`, ascending.
    pub pairs: Vec<(u32, u32)>,
}

impl PairTask {
    fn new(p: &Partition, x: usize, y: usize) -> Self {
        let (lo, hi) = (x.min(y), x.max(y));
        let pairs = if lo == hi {
            let imgs = p.block(lo);
            imgs.clone()
                .flat_map(|a| (a + 1..imgs.end).map(move |b| (a, b)))
                .collect()
        } else {
            let right = p.block(hi);
            p.block(lo)
                .flat_map(|a| right.clone().map(move |b| (a, b)))
                .collect()
        };
        PairTask {
            groups: (p.group_of_block(lo), p.group_of_block(hi)),
            blocks: (lo, hi),
            pairs,
        }
    }

    pub fn is_self_block(&self) -> bool {
        self.blocks.0 == self.blocks.1
    }

    /// Distinct blocks read by the task.
    pub fn block_ids(&self) -> Vec<usize> {
        dedup_pair(self.blocks)
    }

    pub fn group_ids(&self) -> Vec<usize> {
        dedup_pair(self.groups)
    }
}

fn dedup_pair((a, b): (usize, usize)) -> Vec<usize> {
    if a == b {
        vec![a]
    } else {
        vec![a, b]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairPlan {
    pub tasks: Vec<PairTask>,
}

impl PairPlan {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.tasks.iter().map(|t| t.pairs.len()).sum()
    }

    /// All image pairs in plan order.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.tasks.iter().flat_map(|t| t.pairs.iter().copied())
    }
}

/// Block-pair order. Per anchor group `G_i`: block pairs within `G_i`, then
/// self blocks of `G_i`, then `G_i` against `G_k` for `k` descending down to
/// `i + 1`, so the anchor's last partner is the next anchor. Within each
/// phase blocks are walked in a snake so consecutive tasks share a block.
fn traversal(p: &Partition) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = Vec::new();
    // Whether a block pair yields any image pair; self blocks of one image
    // do not, and are skipped so they do not break adjacency.
    let nonempty = |a: usize, b: usize| a != b || p.block(a).len() > 1;
    let last_in = |order: &[(usize, usize)], blocks: &Range<usize>| {
        order
            .last()
            .and_then(|&(a, b)| [b, a].into_iter().find(|x| blocks.contains(x)))
    };
    for i in 0..p.group_count() {
        let anchor = p.group(i);
        let entry = last_in(&order, &anchor).unwrap_or(anchor.start);
        // Anchor blocks rotated to start at the entry block.
        let rotated: Vec<usize> = anchor
            .clone()
            .cycle()
            .skip(entry - anchor.start)
            .take(anchor.len())
            .collect();
        for (a, &x) in rotated.iter().enumerate() {
            let rest = &rotated[a + 1..];
            if a % 2 == 0 {
                order.extend(rest.iter().map(|&y| (x, y)));
            } else {
                order.extend(rest.iter().rev().map(|&y| (x, y)));
            }
        }

        let entry = last_in(&order, &anchor).unwrap_or(anchor.start);
        let mut selfs: Vec<usize> = anchor.clone().filter(|&b| nonempty(b, b)).collect();
        if let Some(pos) = selfs.iter().position(|&b| b == entry) {
            selfs.rotate_left(pos);
        }
        order.extend(selfs.iter().map(|&b| (b, b)));

        for k in (i + 1..p.group_count()).rev() {
            let entry = last_in(&order, &anchor).unwrap_or(anchor.start);
            let partner_entry = last_in(&order, &p.group(k));
            let mut rows: Vec<usize> = anchor.clone().collect();
            let pos = rows.iter().position(|&b| b == entry).unwrap_or(0);
            rows.rotate_left(pos);
            let mut cols: Vec<usize> = p.group(k).collect();
            if partner_entry == cols.last().copied() {
                cols.reverse();
            }
            for (r, &x) in rows.iter().enumerate() {
                if r % 2 == 0 {
                    order.extend(cols.iter().map(|&y| (x, y)));
                } else {
                    order.extend(cols.iter().rev().map(|&y| (x, y)));
                }
            }
        }
    }
    order
}

/// Every unordered image pair exactly once, in traversal order.
pub fn plan_exhaustive(p: &Partition) -> PairPlan {
    let tasks = traversal(p)
        .into_iter()
        .map(|(x, y)| PairTask::new(p, x, y))
        .filter(|t| !t.pairs.is_empty())
        .collect();
    PairPlan { tasks }
}

/// Exhaustive traversal restricted to `accepted` pairs (either orientation).
pub fn plan_guided(p: &Partition, accepted: &[(u32, u32)]) -> Result<PairPlan> {
    let k = p.image_count() as u32;
    let mut keep = HashSet::with_capacity(accepted.len());
    for &(a, b) in accepted {
        if a == b || a >= k || b >= k {
            return Err(SchedulerError::UnknownPair(a, b));
        }
        keep.insert((a.min(b), a.max(b)));
    }
    let tasks = plan_exhaustive(p)
        .tasks
        .into_iter()
        .filter_map(|mut t| {
            t.pairs.retain(|pair| keep.contains(pair));
            (!t.pairs.is_empty()).then_some(t)
        })
        .collect();
    Ok(PairPlan { tasks })
}

/// Round-robin sharding in plan order.
pub fn assign_workers(plan: &PairPlan, workers: usize) -> Vec<PairPlan> {
    let workers = workers.max(1);
    let mut out = vec![PairPlan::default(); workers];
    for (i, t) in plan.tasks.iter().enumerate() {
        out[i % workers].tasks.push(t.clone());
    }
    out
}

/// Human-readable plan dump, one task per line.
pub fn format_plan(p: &Partition, plan: &PairPlan) -> String {
    let mut s = format!(
        "# images {} block_images {} blocks_per_group {} blocks {} groups {} tasks {} pairs {}\n",
        p.image_count(),
        p.block_images(),
        p.blocks_per_group(),
        p.block_count(),
        p.group_count(),
        plan.len(),
        plan.pair_count()
    );
    for (i, t) in plan.tasks.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i}\tG{}-G{}\tB{}-B{}\t{}",
            t.groups.0,
            t.groups.1,
            t.blocks.0,
            t.blocks.1,
            t.pairs.len()
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One block in progress, one being prefetched.
    Hashing,
    /// Two blocks in progress, one being prefetched.
    Matching,
}

impl Mode {
    pub fn limit(self) -> usize {
        match self {
            Mode::Hashing => 2,
            Mode::Matching => 3,
        }
    }
}

/// Memory holds groups, device holds blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Memory,
    Device,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Load needed by the work item about to begin.
    Load(Level, usize),
    /// Load issued ahead of need by the second line.
    Prefetch(Level, usize),
    Evict(Level, usize),
    Begin(usize),
    Finish(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkItem {
    pub groups: Vec<usize>,
    pub blocks: Vec<usize>,
}

/// Ordered work items with precomputed next-use tables.
#[derive(Debug, Clone)]
pub struct WorkSequence {
    pub mode: Mode,
    pub items: Vec<WorkItem>,
    group_uses: Vec<Vec<usize>>,
    block_uses: Vec<Vec<usize>>,
    block_group: Vec<usize>,
}

impl WorkSequence {
    /// One item per block, in block order.
    pub fn hashing(p: &Partition) -> Self {
        let items = (0..p.block_count())
            .map(|b| WorkItem {
                groups: vec![p.group_of_block(b)],
                blocks: vec![b],
            })
            .collect();
        Self::build(p, Mode::Hashing, items)
    }

    /// One item per task.
    pub fn matching(p: &Partition, tasks: &[PairTask]) -> Self {
        let items = tasks
            .iter()
            .map(|t| WorkItem {
                groups: t.group_ids(),
                blocks: t.block_ids(),
            })
            .collect();
        Self::build(p, Mode::Matching, items)
    }

    fn build(p: &Partition, mode: Mode, items: Vec<WorkItem>) -> Self {
        let mut group_uses = vec![Vec::new(); p.group_count()];
        let mut block_uses = vec![Vec::new(); p.block_count()];
        for (i, item) in items.iter().enumerate() {
            for &g in &item.groups {
                group_uses[g].push(i);
            }
            for &b in &item.blocks {
                block_uses[b].push(i);
            }
        }
        WorkSequence {
            mode,
            items,
            group_uses,
            block_uses,
            block_group: (0..p.block_count()).map(|b| p.group_of_block(b)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn uses(&self, level: Level) -> &[Vec<usize>] {
        match level {
            Level::Memory => &self.group_uses,
            Level::Device => &self.block_uses,
        }
    }

    /// First item index ≥ `from` using `id`, or `usize::MAX`.
    fn next_use(&self, level: Level, id: usize, from: usize) -> usize {
        let uses = &self.uses(level)[id];
        let i = uses.partition_point(|&u| u < from);
        uses.get(i).copied().unwrap_or(usize::MAX)
    }

    fn needs(&self, level: Level, item: usize) -> &[usize] {
        match level {
            Level::Memory => &self.items[item].groups,
            Level::Device => &self.items[item].blocks,
        }
    }
}

/// Residency of one worker: resident groups and blocks, the item in
/// progress and the next item to begin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidencyState {
    pub memory: Vec<usize>,
    pub device: Vec<usize>,
    pub in_progress: Option<usize>,
    pub next: usize,
    /// Data loaded ahead of need and not yet used.
    pub prefetched: Vec<(Level, usize)>,
}

impl ResidencyState {
    pub fn new() -> Self {
        ResidencyState {
            memory: Vec::new(),
            device: Vec::new(),
            in_progress: None,
            next: 0,
            prefetched: Vec::new(),
        }
    }

    pub fn is_done(&self, seq: &WorkSequence) -> bool {
        self.in_progress.is_none() && self.next >= seq.len()
    }

    pub fn resident(&self, level: Level) -> &[usize] {
        match level {
            Level::Memory => &self.memory,
            Level::Device => &self.device,
        }
    }

    fn resident_mut(&mut self, level: Level) -> &mut Vec<usize> {
        match level {
            Level::Memory => &mut self.memory,
            Level::Device => &mut self.device,
        }
    }
}

impl Default for ResidencyState {
    fn default() -> Self {
        Self::new()
    }
}

/// Resident datum (not needed by `protect`) with the farthest next use.
fn victim(
    state: &ResidencyState,
    seq: &WorkSequence,
    level: Level,
    protect: usize,
    from: usize,
) -> Option<(usize, usize)> {
    state
        .resident(level)
        .iter()
        .filter(|id| !seq.needs(level, protect).contains(id))
        .map(|&id| (seq.next_use(level, id, from), id))
        .max_by_key(|&(next, id)| (next, std::cmp::Reverse(id)))
        .map(|(next, id)| (id, next))
}

fn evict(state: &mut ResidencyState, level: Level, id: usize, actions: &mut Vec<Action>) {
    state.resident_mut(level).retain(|&x| x != id);
    state.prefetched.retain(|&x| x != (level, id));
    actions.push(Action::Evict(level, id));
}

fn can_load(state: &ResidencyState, seq: &WorkSequence, level: Level, id: usize) -> bool {
    level == Level::Memory || state.memory.contains(&seq.block_group[id])
}

fn demand(
    state: &mut ResidencyState,
    seq: &WorkSequence,
    level: Level,
    item: usize,
    actions: &mut Vec<Action>,
) -> Result<()> {
    let limit = seq.mode.limit();
    for &id in seq.needs(level, item) {
        if state.resident(level).contains(&id) {
            state.prefetched.retain(|&x| x != (level, id));
            continue;
        }
        if !can_load(state, seq, level, id) {
            return Err(SchedulerError::Inconsistent(format!(
                "block {id} loaded while its group is not in memory"
            )));
        }
        if state.resident(level).len() >= limit {
            let (v, _) = victim(state, seq, level, item, item).ok_or_else(|| {
                SchedulerError::Inconsistent(format!("no evictable {level:?} slot"))
            })?;
            evict(state, level, v, actions);
        }
        state.resident_mut(level).push(id);
        actions.push(Action::Load(level, id));
    }
    Ok(())
}

/// Second line: load upcoming data in order of first use while a slot is
/// free or holds something needed later than the candidate.
fn prefetch(
    state: &mut ResidencyState,
    seq: &WorkSequence,
    level: Level,
    current: usize,
    actions: &mut Vec<Action>,
) {
    let limit = seq.mode.limit();
    let mut seen = Vec::new();
    for item in current + 1..seq.len() {
        for &id in seq.needs(level, item) {
            if seen.contains(&id) || state.resident(level).contains(&id) {
                continue;
            }
            seen.push(id);
            if !can_load(state, seq, level, id) {
                return;
            }
            if state.resident(level).len() >= limit {
                match victim(state, seq, level, current, current + 1) {
                    Some((v, next)) if next > item => evict(state, level, v, actions),
                    _ => return,
                }
            }
            state.resident_mut(level).push(id);
            state.prefetched.push((level, id));
            actions.push(Action::Prefetch(level, id));
        }
        if seen.len() >= limit {
            return;
        }
    }
}

/// One transition: finish the item in progress, make the next item's data
/// resident (demand loads only if prefetch fell short), prefetch ahead, and
/// begin it. Returns `None` once every item has finished.
pub fn step_residency(
    state: &ResidencyState,
    seq: &WorkSequence,
) -> Option<Result<(ResidencyState, Vec<Action>)>> {
    if state.is_done(seq) {
        return None;
    }
    let mut s = state.clone();
    let mut actions = Vec::new();
    if let Some(done) = s.in_progress.take() {
        actions.push(Action::Finish(done));
    }
    if s.next < seq.len() {
        let item = s.next;
        let run = (|| {
            demand(&mut s, seq, Level::Memory, item, &mut actions)?;
            prefetch(&mut s, seq, Level::Memory, item, &mut actions);
            demand(&mut s, seq, Level::Device, item, &mut actions)?;
            prefetch(&mut s, seq, Level::Device, item, &mut actions);
            Ok(())
        })();
        if let Err(e) = run {
            return Some(Err(e));
        }
        actions.push(Action::Begin(item));
        s.in_progress = Some(item);
        s.next += 1;
    }
    Some(Ok((s, actions)))
}

/// Full action trace with the checks the state machine must satisfy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub actions: Vec<Action>,
    pub max_memory: usize,
    pub max_device: usize,
    /// `(item, level, id)` for every demand load after the first item.
    pub stalls: Vec<(usize, Level, usize)>,
}

impl Trace {
    pub fn loads(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| matches!(a, Action::Load(..) | Action::Prefetch(..)))
            .count()
    }
}

pub fn simulate(seq: &WorkSequence) -> Result<Trace> {
    let mut state = ResidencyState::new();
    let mut trace = Trace::default();
    while let Some(step) = step_residency(&state, seq) {
        let (next, actions) = step?;
        for a in &actions {
            match *a {
                Action::Load(level, id) if next.next > 1 => {
                    trace.stalls.push((next.next - 1, level, id));
                }
                Action::Evict(level, id) => {
                    if let Some(cur) = next.in_progress {
                        if seq.needs(level, cur).contains(&id) {
                            return Err(SchedulerError::Inconsistent(format!(
                                "evicted {level:?} {id} while in progress"
                            )));
                        }
                    }
                }
                Action::Begin(item) => {
                    for level in [Level::Memory, Level::Device] {
                        if !seq.needs(level, item).iter().all(|id| next.resident(level).contains(id)) {
                            return Err(SchedulerError::Inconsistent(format!(
                                "item {item} began without its {level:?} data"
                            )));
                        }
                    }
                }
                _ => {}
            }
        }
        trace.max_memory = trace.max_memory.max(next.memory.len());
        trace.max_device = trace.max_device.max(next.device.len());
        if trace.max_memory > seq.mode.limit() || trace.max_device > seq.mode.limit() {
            return Err(SchedulerError::Inconsistent("residency limit exceeded".into()));
        }
        trace.actions.extend(actions);
        state = next;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_pairs(k: u32) -> Vec<(u32, u32)> {
        (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect()
    }

    fn sorted_pairs(plan: &PairPlan) -> Vec<(u32, u32)> {
        let mut v: Vec<_> = plan.pairs().collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn partition_examples() {
        let p = Partition::new(4, 2, 1).unwrap();
        assert_eq!(p.layout(), vec![vec![vec![0, 1]], vec![vec![2, 3]]]);
        let p = Partition::new(5, 2, 2).unwrap();
        assert_eq!(p.layout(), vec![vec![vec![0, 1], vec![2, 3]], vec![vec![4]]]);
        assert_eq!(p.group_images(0), 0..4);
        assert_eq!(p.block_of_image(4), 2);
        assert_eq!(Partition::new(0, 1, 1), Err(SchedulerError::Empty));
        assert!(Partition::new(3, 0, 1).is_err());
        assert!(Partition::new(3, 1, 0).is_err());
    }

    #[test]
    fn budget_sizing() {
        assert_eq!(block_images_for_budget(3000, 100), 10);
        assert_eq!(block_images_for_budget(100, 1000), 1);
        assert_eq!(block_images_for_budget(100, 0), 1);
    }

    #[test]
    fn four_images_two_per_block() {
        let p = Partition::new(4, 2, 1).unwrap();
        let plan = plan_exhaustive(&p);
        assert_eq!(plan.len(), 3);
        assert_eq!(plan.pair_count(), 6);
        let cross: Vec<_> = plan.tasks.iter().filter(|t| !t.is_self_block()).collect();
        assert_eq!(cross.len(), 1);
        assert_eq!(cross[0].pairs.len(), 4);
        assert_eq!(sorted_pairs(&plan), all_pairs(4));
    }

    #[test]
    fn single_image_plan_is_empty() {
        assert!(plan_exhaustive(&Partition::new(1, 3, 2).unwrap()).is_empty());
    }

    #[test]
    fn guided_plan_restricts_pairs() {
        let p = Partition::new(7, 2, 2).unwrap();
        assert!(plan_guided(&p, &[]).unwrap().is_empty());
        assert_eq!(
            sorted_pairs(&plan_guided(&p, &all_pairs(7)).unwrap()),
            sorted_pairs(&plan_exhaustive(&p))
        );
        let plan = plan_guided(&p, &[(5, 1), (0, 6), (2, 3)]).unwrap();
        assert_eq!(sorted_pairs(&plan), vec![(0, 6), (1, 5), (2, 3)]);
        assert_eq!(plan_guided(&p, &[(0, 7)]), Err(SchedulerError::UnknownPair(0, 7)));
        assert_eq!(plan_guided(&p, &[(2, 2)]), Err(SchedulerError::UnknownPair(2, 2)));
    }

    #[test]
    fn worker_assignment() {
        let p = Partition::new(9, 2, 2).unwrap();
        let plan = plan_exhaustive(&p);
        assert_eq!(assign_workers(&plan, 1), vec![plan.clone()]);
        let many = assign_workers(&plan, plan.len() + 3);
        assert!(many.iter().all(|w| w.len() <= 1));
        for w in 1..6 {
            let shards = assign_workers(&plan, w);
            let mut merged: Vec<_> = shards.iter().flat_map(|s| s.pairs()).collect();
            merged.sort_unstable();
            assert_eq!(merged, sorted_pairs(&plan));
        }
    }

    #[test]
    fn hashing_starts_with_load_then_prefetch() {
        let p = Partition::new(10, 2, 2).unwrap();
        let seq = WorkSequence::hashing(&p);
        let trace = simulate(&seq).unwrap();
        assert_eq!(
            &trace.actions[..2],
            &[Action::Load(Level::Memory, 0), Action::Prefetch(Level::Memory, 1)]
        );
        assert!(trace.stalls.is_empty());
        assert!(trace.max_memory <= 2 && trace.max_device <= 2);
    }

    #[test]
    fn last_step_issues_no_prefetch() {
        let p = Partition::new(12, 2, 2).unwrap();
        let plan = plan_exhaustive(&p);
        let seq = WorkSequence::matching(&p, &plan.tasks);
        let mut state = ResidencyState::new();
        let mut last = Vec::new();
        while let Some(step) = step_residency(&state, &seq) {
            let (next, actions) = step.unwrap();
            if next.next == seq.len() && next.in_progress == Some(seq.len() - 1) {
                last = actions.clone();
            }
            state = next;
        }
        assert!(last.contains(&Action::Begin(seq.len() - 1)));
        assert!(!last.iter().any(|a| matches!(a, Action::Prefetch(..))));
    }

    #[test]
    fn consecutive_tasks_share_data() {
        for (k, np, m) in [(20, 1, 3), (23, 3, 2), (40, 5, 4), (9, 1, 1)] {
            let p = Partition::new(k, np, m).unwrap();
            let plan = plan_exhaustive(&p);
            for w in plan.tasks.windows(2) {
                let (a, b) = (w[0].block_ids(), w[1].block_ids());
                let fresh = b.iter().filter(|x| !a.contains(x)).count();
                assert!(fresh <= 3 - a.len(), "{k} {np} {m}: {:?} -> {:?}", w[0].blocks, w[1].blocks);
            }
        }
    }

    #[test]
    fn matching_never_stalls_small_grid() {
        for k in 1..=24 {
            for np in 1..=4 {
                for m in 1..=3 {
                    let p = Partition::new(k, np, m).unwrap();
                    let plan = plan_exhaustive(&p);
                    assert_eq!(sorted_pairs(&plan), all_pairs(k as u32));
                    let trace = simulate(&WorkSequence::matching(&p, &plan.tasks)).unwrap();
                    assert!(trace.stalls.is_empty(), "K={k} N_p={np} M={m}: {:?}", trace.stalls);
                    assert!(trace.max_memory <= 3 && trace.max_device <= 3);
                }
            }
        }
    }

    #[test]
    fn sharded_workers_stay_within_limits() {
        let p = Partition::new(30, 2, 3).unwrap();
        let plan = plan_exhaustive(&p);
        for shard in assign_workers(&plan, 3) {
            let trace = simulate(&WorkSequence::matching(&p, &shard.tasks)).unwrap();
            assert!(trace.max_memory <= 3 && trace.max_device <= 3);
        }
    }

    proptest! {
        #[test]
        fn flattening_recovers_all_images(k in 1usize..200, np in 1usize..9, m in 1usize..6) {
            let p = Partition::new(k, np, m).unwrap();
            let flat: Vec<u32> = p.layout().into_iter().flatten().flatten().collect();
            prop_assert_eq!(flat, (0..k as u32).collect::<Vec<_>>());
            let layout = p.layout();
            for (g, group) in layout.iter().enumerate() {
                if g + 1 < layout.len() {
                    prop_assert_eq!(group.len(), m);
                }
            }
        }

        #[test]
        fn guided_plan_covers_exactly_the_subset(
            k in 2u32..30,
            np in 1usize..5,
            m in 1usize..4,
            keep in proptest::collection::vec(any::<bool>(), 435),
        ) {
            let p = Partition::new(k as usize, np, m).unwrap();
            let subset: Vec<_> = all_pairs(k).into_iter().zip(&keep).filter(|(_, &b)| b).map(|(x, _)| x).collect();
            let plan = plan_guided(&p, &subset).unwrap();
            prop_assert_eq!(sorted_pairs(&plan), subset);
        }
    }
}
