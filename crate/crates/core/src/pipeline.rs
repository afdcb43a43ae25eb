//! Batch driver. Images are read by a single loader lane following the
//! scheduler's residency actions, while compute workers run pair tasks on
//! resident blocks and hand results to a sink.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::RunConfig;
use crate::feature_io::{
    load_features, save_matches, DatasetManifest, FeatureSet, MatchRecord,
};
use crate::geometry::{
    format_geometry_line, guided_match_pair, seed_geometry, FundamentalMatrix, TwoViewGeometry,
};
use crate::hashing::{
    encode_code_cache, read_code_cache, reduce_dot, CenteringAccumulator, HashFamily, PointCodes,
    SwitchRounds,
};
use crate::matcher::{brute_force_match, match_pair};
use crate::scheduler::{
    assign_workers, block_images_for_budget, plan_exhaustive, plan_guided, simulate, step_residency,
    Action, Level, Partition, PairPlan, ResidencyState, SchedulerError, WorkSequence,
};
use crate::sink::{match_file_name, AsyncFileSink, CollectingSink, MatchSink, PairMatches};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty manifest")]
    EmptyManifest,
    #[error("no descriptors in the dataset; centering undefined")]
    NoDescriptors,
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Hashing(#[from] crate::hashing::HashingError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Features(#[from] crate::feature_io::FeatureIoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("reduction results differ across switch points")]
    ReductionMismatch,
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One-shot value filled by the loader lane.
struct Slot<T> {
    value: Mutex<Option<T>>,
    ready: Condvar,
}

impl<T: Clone> Slot<T> {
    fn new() -> Arc<Self> {
        Arc::new(Slot {
            value: Mutex::new(None),
            ready: Condvar::new(),
        })
    }

    fn fill(&self, v: T) {
        *self.value.lock().unwrap() = Some(v);
        self.ready.notify_all();
    }

    fn wait(&self) -> T {
        let mut guard = self.value.lock().unwrap();
        loop {
            if let Some(v) = guard.as_ref() {
                return v.clone();
            }
            guard = self.ready.wait(guard).unwrap();
        }
    }
}

type Loaded<T> = Result<Arc<T>, String>;

/// Images of one group or block as loaded; failures are kept per image.
struct Batch<T> {
    images: Vec<(u32, Loaded<T>)>,
}

fn find<T>(batches: &[Arc<Batch<T>>], image: u32) -> Option<&Loaded<T>> {
    batches
        .iter()
        .flat_map(|b| b.images.iter())
        .find(|(i, _)| *i == image)
        .map(|(_, l)| l)
}

type Job<'env> = Box<dyn FnOnce() + Send + 'env>;

/// The second line: a single thread executing load jobs in request order.
/// It exits once every handle is dropped.
#[derive(Clone)]
struct LoaderLane<'env> {
    tx: mpsc::Sender<Job<'env>>,
    busy_nanos: Arc<AtomicU64>,
}

impl<'env> LoaderLane<'env> {
    fn spawn<'scope>(s: &'scope thread::Scope<'scope, 'env>) -> Self {
        let (tx, rx) = mpsc::channel::<Job<'env>>();
        let busy_nanos = Arc::new(AtomicU64::new(0));
        let busy = busy_nanos.clone();
        s.spawn(move || {
            for job in rx {
                let t0 = Instant::now();
                job();
                busy.fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
            }
        });
        LoaderLane { tx, busy_nanos }
    }

    fn submit(&self, job: Job<'env>) {
        self.tx.send(job).expect("loader lane alive");
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DriveStats {
    /// Demand loads after the first work item.
    pub stalls: usize,
    pub loads: usize,
    /// Time compute spent blocked on data at begin.
    pub wait: Duration,
}

impl DriveStats {
    fn merge(&mut self, o: &DriveStats) {
        self.stalls += o.stalls;
        self.loads += o.loads;
        self.wait += o.wait;
    }
}

/// Execute one worker's residency trace: loads and prefetches go to the
/// loader lane, `begin` runs on the calling thread once an item's blocks
/// are resident.
fn drive<'env, T, L>(
    partition: &Partition,
    seq: &WorkSequence,
    lane: &LoaderLane<'env>,
    load: &'env L,
    mut begin: impl FnMut(usize, &[Arc<Batch<T>>]),
) -> Result<DriveStats, SchedulerError>
where
    T: Send + Sync + 'env,
    L: Fn(u32) -> Result<T, String> + Sync + ?Sized,
{
    type Pending<T> = Arc<Slot<Arc<Batch<T>>>>;
    let mut groups: HashMap<usize, Pending<T>> = HashMap::new();
    let mut blocks: HashMap<usize, Pending<T>> = HashMap::new();
    let mut stats = DriveStats::default();
    let mut state = ResidencyState::new();
    while let Some(step) = step_residency(&state, seq) {
        let (next, actions) = step?;
        for action in actions {
            match action {
                Action::Load(level, id) | Action::Prefetch(level, id) => {
                    stats.loads += 1;
                    if matches!(action, Action::Load(..)) && next.next > 1 {
                        stats.stalls += 1;
                    }
                    let slot = Slot::new();
                    let fill = slot.clone();
                    match level {
                        Level::Memory => {
                            let images = partition.group_images(id);
                            lane.submit(Box::new(move || {
                                let images = images.map(|i| (i, load(i).map(Arc::new))).collect();
                                fill.fill(Arc::new(Batch { images }));
                            }));
                            groups.insert(id, slot);
                        }
                        Level::Device => {
                            let group = groups
                                .get(&partition.group_of_block(id))
                                .cloned()
                                .ok_or_else(|| {
                                    SchedulerError::Inconsistent(format!(
                                        "block {id} requested without its group"
                                    ))
                                })?;
                            let range = partition.block(id);
                            lane.submit(Box::new(move || {
                                let g = group.wait();
                                let images = g
                                    .images
                                    .iter()
                                    .filter(|(i, _)| range.contains(i))
                                    .cloned()
                                    .collect();
                                fill.fill(Arc::new(Batch { images }));
                            }));
                            blocks.insert(id, slot);
                        }
                    }
                }
                Action::Evict(Level::Memory, g) => {
                    groups.remove(&g);
                }
                Action::Evict(Level::Device, b) => {
                    blocks.remove(&b);
                }
                Action::Begin(item) => {
                    let t0 = Instant::now();
                    let data: Vec<Arc<Batch<T>>> = seq.items[item]
                        .blocks
                        .iter()
                        .map(|b| blocks[b].wait())
                        .collect();
                    stats.wait += t0.elapsed();
                    begin(item, &data);
                }
                Action::Finish(_) => {}
            }
        }
        state = next;
    }
    Ok(stats)
}

/// A loaded image with its codes, as seen by pair workers.
#[derive(Debug, Clone)]
pub struct CodedImage {
    pub index: u32,
    pub id: String,
    pub features: FeatureSet,
    pub codes: PointCodes,
}

/// Dataset plus its block/group partition.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub partition: Partition,
}

impl Dataset {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.manifest.as_ref().ok_or_else(|| PipelineError::Io {
            path: PathBuf::from("<manifest>"),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "no manifest configured"),
        })?;
        let manifest = DatasetManifest::load(path)?;
        Self::new(manifest, cfg)
    }

    pub fn new(manifest: DatasetManifest, cfg: &RunConfig) -> Result<Self> {
        if manifest.is_empty() {
            return Err(PipelineError::EmptyManifest);
        }
        let block_images = match cfg.block_images {
            Some(n) => n,
            None => {
                let sizes: Vec<u64> = manifest
                    .entries
                    .iter()
                    .filter_map(|e| fs::metadata(&e.path).ok().map(|m| m.len()))
                    .collect();
                let mean = sizes.iter().sum::<u64>() / sizes.len().max(1) as u64;
                block_images_for_budget(cfg.memory_budget_bytes(), mean)
            }
        };
        let partition = Partition::new(manifest.len(), block_images, cfg.blocks_per_group)?;
        Ok(Dataset {
            manifest,
            partition,
        })
    }

    pub fn image_count(&self) -> usize {
        self.manifest.len()
    }

    fn load_features(&self, image: u32) -> Result<FeatureSet, String> {
        let entry = &self.manifest.entries[image as usize];
        load_features(&entry.path).map_err(|e| e.to_string())
    }

    fn cache_path(&self, cfg: &RunConfig, image: u32) -> PathBuf {
        cfg.cache_dir().join(format!("{image:06}.codes"))
    }
}

/// Run one hashing-mode schedule over every block on a single worker.
fn hashing_pass<T, L>(
    ds: &Dataset,
    load: &L,
    mut on_block: impl FnMut(&[(u32, Loaded<T>)]),
) -> Result<DriveStats>
where
    T: Send + Sync,
    L: Fn(u32) -> Result<T, String> + Sync,
{
    let seq = WorkSequence::hashing(&ds.partition);
    let stats = thread::scope(|s| {
        let lane = LoaderLane::spawn(s);
        drive(&ds.partition, &seq, &lane, load, |_, blocks| {
            on_block(&blocks[0].images)
        })
    })?;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct HashOutcome {
    pub family: HashFamily,
    pub computed: usize,
    pub cached: usize,
    /// `(image id, message)` per failed image.
    pub failures: Vec<(String, String)>,
    pub elapsed: Duration,
}

/// Centering pass, then a codes pass that skips caches matching the
/// family echo and point count.
pub fn cmd_hash(ds: &Dataset, cfg: &RunConfig) -> Result<HashOutcome> {
    let t0 = Instant::now();
    let cache_dir = cfg.cache_dir();
    fs::create_dir_all(&cache_dir).map_err(io_err(&cache_dir))?;

    let mut acc = CenteringAccumulator::default();
    let mut failures: Vec<(String, String)> = Vec::new();
    let load = |i: u32| ds.load_features(i);
    hashing_pass(ds, &load, |images| {
        for (i, fs) in images {
            match fs {
                Ok(fs) => fs.descriptors.iter().for_each(|d| acc.add(d)),
                Err(e) => failures.push((ds.manifest.image_id(*i as usize).to_string(), e.clone())),
            }
        }
    })?;
    if acc.count() == 0 {
        return Err(PipelineError::NoDescriptors);
    }
    let family = cfg.hash_family()?.with_centering(acc.mean()?);
    let echo = family.echo();

    let mut computed = 0;
    let mut cached = 0;
    hashing_pass(ds, &load, |images| {
        let results: Vec<(u32, Result<bool, String>)> = images
            .par_iter()
            .filter_map(|(i, fs)| {
                let fs = fs.as_ref().ok()?;
                let path = ds.cache_path(cfg, *i);
                let r = match read_code_cache(&path, &echo, Some(fs.len())) {
                    Ok(Some(_)) => Ok(true),
                    _ => family
                        .encode(fs)
                        .map_err(|e| e.to_string())
                        .and_then(|codes| {
                            fs::write(&path, encode_code_cache(&codes)).map_err(|e| e.to_string())
                        })
                        .map(|_| false),
                };
                Some((*i, r))
            })
            .collect();
        for (i, r) in results {
            let id = ds.manifest.image_id(i as usize);
            match r {
                Ok(true) => {
                    log::debug!("{id}: cached");
                    cached += 1;
                }
                Ok(false) => computed += 1,
                Err(e) => failures.push((id.to_string(), e)),
            }
        }
    })?;
    if computed == 0 && failures.is_empty() {
        log::info!("all {cached} code caches up to date (cached)");
    }
    Ok(HashOutcome {
        family,
        computed,
        cached,
        failures,
        elapsed: t0.elapsed(),
    })
}

/// Load features and codes, encoding in place if the cache is stale.
fn load_coded(ds: &Dataset, cfg: &RunConfig, family: &HashFamily, image: u32) -> Result<CodedImage, String> {
    let features = ds.load_features(image)?;
    let path = ds.cache_path(cfg, image);
    let codes = match read_code_cache(&path, &family.echo(), Some(features.len())) {
        Ok(Some(c)) => c,
        _ => family.encode(&features).map_err(|e| e.to_string())?,
    };
    Ok(CodedImage {
        index: image,
        id: ds.manifest.image_id(image as usize).to_string(),
        features,
        codes,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub pairs: usize,
    pub failures: Vec<String>,
    pub drive: DriveStats,
    pub io: Duration,
    pub elapsed: Duration,
}

/// Run `per_pair` for every pair of `plan` over `workers` compute threads.
/// Each worker follows its own residency trace; all share one loader lane.
fn run_plan<F>(
    ds: &Dataset,
    plan: &PairPlan,
    workers: usize,
    load: &(dyn Fn(u32) -> Result<CodedImage, String> + Sync),
    per_pair: F,
) -> Result<RunStats>
where
    F: Fn((u32, u32), &CodedImage, &CodedImage) -> Result<(), String> + Sync,
{
    let t0 = Instant::now();
    let shards = assign_workers(plan, workers);
    let (results, io) = thread::scope(|s| {
        let lane = LoaderLane::spawn(s);
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| {
                let lane = lane.clone();
                let per_pair = &per_pair;
                s.spawn(move || {
                    let seq = WorkSequence::matching(&ds.partition, &shard.tasks);
                    let mut pairs = 0;
                    let mut failures = Vec::new();
                    let stats = drive(&ds.partition, &seq, &lane, load, |item, blocks| {
                        for &(a, b) in &shard.tasks[item].pairs {
                            pairs += 1;
                            let r = match (find(blocks, a), find(blocks, b)) {
                                (Some(Ok(x)), Some(Ok(y))) => per_pair((a, b), x, y),
                                (Some(Err(e)), _) | (_, Some(Err(e))) => Err(e.clone()),
                                _ => Err("image not resident".to_string()),
                            };
                            if let Err(e) = r {
                                failures.push(format!(
                                    "{} {}: {e}",
                                    ds.manifest.image_id(a as usize),
                                    ds.manifest.image_id(b as usize)
                                ));
                            }
                        }
                    });
                    stats.map(|st| (pairs, failures, st))
                })
            })
            .collect();
        let busy = lane.busy_nanos.clone();
        drop(lane);
        let results: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect();
        (results, busy)
    });
    // The scope has joined the loader lane, so its counter is final.
    let io = Duration::from_nanos(io.load(Ordering::Relaxed));
    let mut out = RunStats {
        io,
        ..Default::default()
    };
    for r in results {
        let (pairs, failures, st) = r?;
        out.pairs += pairs;
        out.failures.extend(failures);
        out.drive.merge(&st);
    }
    out.failures.sort();
    out.elapsed = t0.elapsed();
    Ok(out)
}

/// RANSAC seed for a pair; depends only on the run seed and the pair.
pub fn pair_seed(seed: u64, pair: (u32, u32)) -> u64 {
    let key = seed ^ ((pair.0 as u64) << 32 | pair.1 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(key).random()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    Exhaustive,
    Guided,
}

#[derive(Debug, Clone, Default)]
pub struct Summary {
    pub mode: String,
    pub images: usize,
    pub block_images: usize,
    pub blocks_per_group: usize,
    pub workers: usize,
    /// `C(K, 2)`.
    pub all_pairs: usize,
    /// Pairs seed-matched and gated (guided mode).
    pub seed_pairs: usize,
    pub accepted_pairs: usize,
    /// Pairs given full matching.
    pub matched_pairs: usize,
    pub matches: usize,
    pub files_written: usize,
    pub failures: Vec<String>,
    pub stalls: usize,
    /// `(stage, duration)` in pipeline order.
    pub stages: Vec<(String, Duration)>,
    pub elapsed: Duration,
}

impl Summary {
    pub fn pairs_per_second(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64();
        if secs > 0.0 {
            self.matched_pairs as f64 / secs
        } else {
            0.0
        }
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("mode".into(), self.mode.clone()),
            ("images".into(), self.images.to_string()),
            ("block images".into(), self.block_images.to_string()),
            ("blocks per group".into(), self.blocks_per_group.to_string()),
            ("workers".into(), self.workers.to_string()),
            ("all pairs".into(), self.all_pairs.to_string()),
        ];
        if self.mode == "guided" {
            rows.push(("seed pairs".into(), self.seed_pairs.to_string()));
            rows.push(("accepted pairs".into(), self.accepted_pairs.to_string()));
            rows.push(("guided matching".into(), format!("{} pairs", self.matched_pairs)));
        } else {
            rows.push(("exhaustive matching".into(), format!("{} pairs", self.matched_pairs)));
        }
        rows.push(("matches".into(), self.matches.to_string()));
        rows.push(("files written".into(), self.files_written.to_string()));
        rows.push(("failures".into(), self.failures.len().to_string()));
        rows.push(("stalls".into(), self.stalls.to_string()));
        for (stage, d) in &self.stages {
            rows.push((format!("time {stage}"), format!("{:.3} s", d.as_secs_f64())));
        }
        rows.push(("time total".into(), format!("{:.3} s", self.elapsed.as_secs_f64())));
        rows.push(("pairs/s".into(), format!("{:.2}", self.pairs_per_second())));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<width$}  {v}");
        }
        for f in &self.failures {
            let _ = writeln!(s, "failed: {f}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut header = String::from(
            "mode,images,workers,all_pairs,seed_pairs,accepted_pairs,matched_pairs,matches,failures,stalls",
        );
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.images,
            self.workers,
            self.all_pairs,
            self.seed_pairs,
            self.accepted_pairs,
            self.matched_pairs,
            self.matches,
            self.failures.len(),
            self.stalls
        );
        for (stage, d) in &self.stages {
            let _ = write!(header, ",{stage}_s");
            let _ = write!(row, ",{:.6}", d.as_secs_f64());
        }
        let _ = write!(header, ",total_s,pairs_per_s");
        let _ = write!(row, ",{:.6},{:.3}", self.elapsed.as_secs_f64(), self.pairs_per_second());
        format!("{header}\n{row}\n")
    }
}

fn base_summary(ds: &Dataset, cfg: &RunConfig, mode: &str) -> Summary {
    let k = ds.image_count();
    Summary {
        mode: mode.to_string(),
        images: k,
        block_images: ds.partition.block_images(),
        blocks_per_group: ds.partition.blocks_per_group(),
        workers: cfg.workers,
        all_pairs: k * (k - 1) / 2,
        ..Default::default()
    }
}

/// Hash (reusing caches), then match every pair or run the two-stage
/// guided flow. Match files go to `<output_dir>/matches`; guided mode also
/// writes `<output_dir>/geometry.txt`.
pub fn cmd_match(ds: &Dataset, cfg: &RunConfig, mode: MatchMode) -> Result<Summary> {
    cfg.validate()?;
    let t0 = Instant::now();
    let name = match mode {
        MatchMode::Exhaustive => "exhaustive",
        MatchMode::Guided => "guided",
    };
    let mut summary = base_summary(ds, cfg, name);
    let hashed = cmd_hash(ds, cfg)?;
    summary.stages.push(("hash".into(), hashed.elapsed));
    summary
        .failures
        .extend(hashed.failures.iter().map(|(id, e)| format!("{id}: {e}")));
    let family = &hashed.family;
    let mcfg = cfg.match_config();
    let stage = cfg.stage_config();
    let load = |i: u32| load_coded(ds, cfg, family, i);
    let match_dir = cfg.output_dir.join("matches");
    let sink = AsyncFileSink::new(&match_dir).map_err(io_err(&match_dir))?;
    let match_count = AtomicU64::new(0);

    let plan = match mode {
        MatchMode::Exhaustive => plan_exhaustive(&ds.partition),
        MatchMode::Guided => {
            let seeds: Mutex<Vec<((u32, u32), TwoViewGeometry)>> = Mutex::new(Vec::new());
            let run = run_plan(ds, &plan_exhaustive(&ds.partition), cfg.workers, &load, |pair, x, y| {
                let mut st = stage;
                st.ransac.seed = pair_seed(cfg.seed, pair);
                let (g, _) = seed_geometry(&x.features, &y.features, &x.codes, &y.codes, &mcfg, &st)
                    .map_err(|e| e.to_string())?;
                seeds.lock().unwrap().push((pair, g));
                Ok(())
            })?;
            summary.stages.push(("seed".into(), run.elapsed));
            summary.stages.push(("seed io".into(), run.io));
            summary.failures.extend(run.failures);
            summary.stalls += run.drive.stalls;
            summary.seed_pairs = run.pairs;

            let mut seeds = seeds.into_inner().unwrap();
            seeds.sort_by_key(|(p, _)| *p);
            let report_path = cfg.output_dir.join("geometry.txt");
            let mut report = String::new();
            for (pair, g) in &seeds {
                report.push_str(&format_geometry_line(
                    ds.manifest.image_id(pair.0 as usize),
                    ds.manifest.image_id(pair.1 as usize),
                    g,
                ));
                report.push('\n');
            }
            fs::write(&report_path, report).map_err(io_err(&report_path))?;
            let accepted: HashMap<(u32, u32), FundamentalMatrix> = seeds
                .into_iter()
                .filter(|(_, g)| g.accepted)
                .filter_map(|(p, g)| g.fundamental.map(|f| (p, f)))
                .collect();
            summary.accepted_pairs = accepted.len();
            let keys: Vec<(u32, u32)> = accepted.keys().copied().collect();
            let plan = plan_guided(&ds.partition, &keys)?;
            let run = run_plan(ds, &plan, cfg.workers, &load, |pair, x, y| {
                let f = &accepted[&pair];
                let matches = guided_match_pair(&x.features, &y.features, &x.codes, &y.codes, f, &mcfg, stage.band)
                    .map_err(|e| e.to_string())?;
                match_count.fetch_add(matches.len() as u64, Ordering::Relaxed);
                sink.submit(PairMatches {
                    pair,
                    image_ids: (x.id.clone(), y.id.clone()),
                    matches,
                });
                Ok(())
            })?;
            summary.stages.push(("guided match".into(), run.elapsed));
            summary.stages.push(("guided io".into(), run.io));
            summary.failures.extend(run.failures);
            summary.stalls += run.drive.stalls;
            summary.matched_pairs = run.pairs;
            PairPlan::default()
        }
    };
    if mode == MatchMode::Exhaustive {
        let run = run_plan(ds, &plan, cfg.workers, &load, |pair, x, y| {
            let matches = match_pair(&x.features, &y.features, &x.codes, &y.codes, &mcfg)
                .map_err(|e| e.to_string())?;
            match_count.fetch_add(matches.len() as u64, Ordering::Relaxed);
            sink.submit(PairMatches {
                pair,
                image_ids: (x.id.clone(), y.id.clone()),
                matches,
            });
            Ok(())
        })?;
        summary.stages.push(("match".into(), run.elapsed));
        summary.stages.push(("match io".into(), run.io));
        summary.failures.extend(run.failures);
        summary.stalls += run.drive.stalls;
        summary.matched_pairs = run.pairs;
    }
    let t_write = Instant::now();
    let report = sink.finish();
    summary.stages.push(("write wait".into(), t_write.elapsed()));
    summary.files_written = report.written;
    summary
        .failures
        .extend(report.failures.iter().map(|(p, e)| format!("{}: {e}", p.display())));
    summary.matches = match_count.into_inner() as usize;
    summary.elapsed = t0.elapsed();
    Ok(summary)
}

/// Overlap of a cascade match set with the exhaustive reference.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairScore {
    pub pair: (u32, u32),
    pub cascade: usize,
    pub oracle: usize,
    /// Matches with equal query and train index in both sets.
    pub common: usize,
}

impl PairScore {
    /// 1 when the reference is empty.
    pub fn recall(&self) -> f64 {
        if self.oracle == 0 {
            1.0
        } else {
            self.common as f64 / self.oracle as f64
        }
    }

    /// 1 when nothing was emitted.
    pub fn precision(&self) -> f64 {
        if self.cascade == 0 {
            1.0
        } else {
            self.common as f64 / self.cascade as f64
        }
    }

    fn add(&mut self, o: &PairScore) {
        self.cascade += o.cascade;
        self.oracle += o.oracle;
        self.common += o.common;
    }
}

pub fn score_matches(pair: (u32, u32), cascade: &[MatchRecord], oracle: &[MatchRecord]) -> PairScore {
    let reference: HashMap<u32, u32> = oracle.iter().map(|m| (m.query_index, m.train_index)).collect();
    let common = cascade
        .iter()
        .filter(|m| reference.get(&m.query_index) == Some(&m.train_index))
        .count();
    PairScore {
        pair,
        cascade: cascade.len(),
        oracle: oracle.len(),
        common,
    }
}

#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub pairs: Vec<PairScore>,
    pub total: PairScore,
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl OracleReport {
    pub fn to_text(&self, ds: &Dataset) -> String {
        let mut s = String::from("# image_i image_j cascade oracle common recall precision\n");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {:.4} {:.4}",
                ds.manifest.image_id(p.pair.0 as usize),
                ds.manifest.image_id(p.pair.1 as usize),
                p.cascade,
                p.oracle,
                p.common,
                p.recall(),
                p.precision()
            );
        }
        let t = &self.total;
        let _ = writeln!(
            s,
            "# total {} {} {} {:.4} {:.4}",
            t.cascade,
            t.oracle,
            t.common,
            t.recall(),
            t.precision()
        );
        s
    }
}

/// Cascade against brute force on every pair. Reference match files go to
/// `<output_dir>/oracle`, the per-pair report to `oracle_report.txt`.
pub fn cmd_oracle(ds: &Dataset, cfg: &RunConfig) -> Result<OracleReport> {
    cfg.validate()?;
    let t0 = Instant::now();
    let hashed = cmd_hash(ds, cfg)?;
    let family = &hashed.family;
    let mcfg = cfg.match_config();
    let load = |i: u32| load_coded(ds, cfg, family, i);
    let oracle_dir = cfg.output_dir.join("oracle");
    fs::create_dir_all(&oracle_dir).map_err(io_err(&oracle_dir))?;
    let scores = CollectingSink::new();
    let plan = plan_exhaustive(&ds.partition);
    let run = run_plan(ds, &plan, cfg.workers, &load, |pair, x, y| {
        let cascade = match_pair(&x.features, &y.features, &x.codes, &y.codes, &mcfg)
            .map_err(|e| e.to_string())?;
        let oracle = brute_force_match(&x.features, &y.features, mcfg.ratio);
        save_matches((&x.id, &y.id), &oracle, oracle_dir.join(match_file_name(pair)))
            .map_err(|e| e.to_string())?;
        let score = score_matches(pair, &cascade, &oracle);
        // The collecting sink orders results by pair; counts ride along.
        scores.submit(PairMatches {
            pair,
            image_ids: (String::new(), String::new()),
            matches: vec![MatchRecord::new(score.cascade as u32, score.oracle as u32, score.common as f32)],
        });
        Ok(())
    })?;
    let mut report = OracleReport {
        failures: hashed
            .failures
            .iter()
            .map(|(id, e)| format!("{id}: {e}"))
            .chain(run.failures)
            .collect(),
        ..Default::default()
    };
    for p in scores.into_sorted() {
        let m = p.matches[0];
        let score = PairScore {
            pair: p.pair,
            cascade: m.query_index as usize,
            oracle: m.train_index as usize,
            common: m.distance as usize,
        };
        report.total.add(&score);
        report.pairs.push(score);
    }
    let path = cfg.output_dir.join("oracle_report.txt");
    fs::write(&path, report.to_text(ds)).map_err(io_err(&path))?;
    report.elapsed = t0.elapsed();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReduceRow {
    pub switch_rounds: u8,
    pub ns_per_op: f64,
    /// Sum of result bit patterns; equal across rows for integer inputs.
    pub checksum: u64,
}

/// Time `reduce_dot` for every switch point over one fixed workload of
/// descriptor-like integer vectors.
pub fn cmd_bench_reduce(ops: usize, seed: u64) -> Result<Vec<ReduceRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<[f32; 128]> = (0..ops.max(1) * 2)
        .map(|_| std::array::from_fn(|_| rng.random_range(0u8..=255) as f32))
        .collect();
    let mut rows = Vec::with_capacity(8);
    for rounds in SwitchRounds::all() {
        let r = rounds.get();
        let t0 = Instant::now();
        let mut checksum = 0u64;
        for pair in data.chunks_exact(2) {
            let v = reduce_dot(&pair[0], &pair[1], r)?;
            checksum = checksum.wrapping_add(std::hint::black_box(v).to_bits() as u64);
        }
        let ns = t0.elapsed().as_nanos() as f64 / (data.len() / 2) as f64;
        rows.push(ReduceRow {
            switch_rounds: r,
            ns_per_op: ns,
            checksum,
        });
    }
    if rows.iter().any(|r| r.checksum != rows[0].checksum) {
        return Err(PipelineError::ReductionMismatch);
    }
    Ok(rows)
}

pub fn format_reduce_csv(rows: &[ReduceRow]) -> String {
    let mut s = String::from("switch_rounds,ns_per_op,checksum\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.3},{:016x}", r.switch_rounds, r.ns_per_op, r.checksum);
    }
    s
}

/// Plan dump plus residency statistics for both modes.
pub fn cmd_plan(partition: &Partition, workers: usize) -> Result<String> {
    let plan = plan_exhaustive(partition);
    let mut out = crate::scheduler::format_plan(partition, &plan);
    let hashing = simulate(&WorkSequence::hashing(partition))?;
    let _ = writeln!(
        out,
        "# hashing: loads {} max_memory {} max_device {} stalls {}",
        hashing.loads(),
        hashing.max_memory,
        hashing.max_device,
        hashing.stalls.len()
    );
    for (w, shard) in assign_workers(&plan, workers).iter().enumerate() {
        let t = simulate(&WorkSequence::matching(partition, &shard.tasks))?;
        let _ = writeln!(
            out,
            "# matching worker {w}: tasks {} loads {} max_memory {} max_device {} stalls {}",
            shard.len(),
            t.loads(),
            t.max_memory,
            t.max_device,
            t.stalls.len()
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_images, write_dataset, SceneImages, SceneSpec};

    fn setup(dir: &Path, images: &[FeatureSet], block_images: usize, workers: usize) -> (Dataset, RunConfig) {
        let manifest = write_dataset(dir, images).unwrap();
        let mut cfg = RunConfig::default();
        cfg.manifest = Some(manifest);
        cfg.output_dir = dir.join("out");
        cfg.block_images = Some(block_images);
        cfg.blocks_per_group = 2;
        cfg.workers = workers;
        (Dataset::open(&cfg).unwrap(), cfg)
    }

    #[test]
    fn pair_seed_is_stable_and_pair_specific() {
        assert_eq!(pair_seed(3, (1, 2)), pair_seed(3, (1, 2)));
        assert_ne!(pair_seed(3, (1, 2)), pair_seed(3, (2, 1)));
        assert_ne!(pair_seed(3, (1, 2)), pair_seed(4, (1, 2)));
    }

    #[test]
    fn score_of_self_is_perfect() {
        let m = vec![MatchRecord::new(0, 3, 1.0), MatchRecord::new(2, 1, 4.0)];
        let s = score_matches((0, 1), &m, &m);
        assert_eq!((s.recall(), s.precision()), (1.0, 1.0));
        let s = score_matches((0, 1), &m[..1], &m);
        assert_eq!((s.recall(), s.precision()), (0.5, 1.0));
    }

    #[test]
    fn bench_reduce_has_eight_equal_rows() {
        let rows = cmd_bench_reduce(200, 1).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.checksum == rows[0].checksum));
        assert_eq!(format_reduce_csv(&rows).lines().count(), 9);
    }

    #[test]
    fn hash_is_idempotent_and_seed_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mut cfg) = setup(dir.path(), &random_images(3, 5, 40), 2, 1);
        let first = cmd_hash(&ds, &cfg).unwrap();
        assert_eq!((first.computed, first.cached), (5, 0));
        let again = cmd_hash(&ds, &cfg).unwrap();
        assert_eq!((again.computed, again.cached), (0, 5));
        cfg.seed = 99;
        let reseeded = cmd_hash(&ds, &cfg).unwrap();
        assert_eq!((reseeded.computed, reseeded.cached), (5, 0));
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let cfg = RunConfig::default();
        assert!(matches!(
            Dataset::new(DatasetManifest { entries: vec![] }, &cfg),
            Err(PipelineError::EmptyManifest)
        ));
    }

    #[test]
    fn two_image_exhaustive_writes_one_file() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneImages::generate(4, SceneSpec { views: 2, points: 120, distractors: 30, sigma: 2.0 });
        let (ds, cfg) = setup(dir.path(), &scene.images, 1, 1);
        let s = cmd_match(&ds, &cfg, MatchMode::Exhaustive).unwrap();
        assert_eq!((s.matched_pairs, s.files_written, s.all_pairs), (1, 1, 1));
        assert!(s.failures.is_empty());
        assert!(s.matches > 50);
        assert!(cfg.output_dir.join("matches").join(match_file_name((0, 1))).exists());
    }

    #[test]
    fn guided_skips_unrelated_images() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = setup(dir.path(), &random_images(8, 4, 200), 2, 2);
        let s = cmd_match(&ds, &cfg, MatchMode::Guided).unwrap();
        assert_eq!(s.seed_pairs, 6);
        assert_eq!(s.matched_pairs, 0);
        assert!(s.to_text().contains("guided matching"));
        assert!(s.to_text().contains("0 pairs"));
        let report = fs::read_to_string(cfg.output_dir.join("geometry.txt")).unwrap();
        assert_eq!(report.lines().count(), 6);
    }

    #[test]
    fn missing_feature_file_fails_only_its_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = setup(dir.path(), &random_images(2, 4, 30), 2, 1);
        fs::remove_file(&ds.manifest.entries[3].path).unwrap();
        let s = cmd_match(&ds, &cfg, MatchMode::Exhaustive).unwrap();
        assert_eq!(s.files_written, 3);
        // one hash-stage failure plus three pairs involving image 3
        assert_eq!(s.failures.len(), 4);
    }

    #[test]
    fn plan_dump_reports_residency() {
        let p = Partition::new(9, 2, 2).unwrap();
        let text = cmd_plan(&p, 2).unwrap();
        assert!(text.starts_with("# images 9"));
        assert!(text.contains("matching worker 1"));
        assert!(text.contains("# hashing: loads"));
    }

    #[test]
    fn csv_summary_has_matching_columns() {
        let mut s = Summary {
            mode: "exhaustive".into(),
            ..Default::default()
        };
        s.stages.push(("hash".into(), Duration::from_millis(5)));
        let csv = s.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }
}
