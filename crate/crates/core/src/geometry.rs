//! Two-view epipolar geometry: normalized eight-point estimation inside a
//! seeded RANSAC, the epipolar candidate band, and the two-stage
//! seed-then-guided matching flow.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::feature_io::{select_top_scale, FeatureIoError, FeatureSet, MatchRecord};
use crate::hashing::PointCodes;
use crate::matcher::{match_pair, match_pair_filtered, CandidateFilter, MatchConfig, MatchError};

/// Seed matches required before estimating geometry at all.
pub const MIN_SEED_MATCHES: usize = 16;
/// Hypotheses scored per batch before the early-exit test.
const RANSAC_BATCH: usize = 64;
/// Ratio of the eighth to the first singular value below which the linear
/// system is treated as having a null space of dimension > 1.
const DEGENERACY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all points coincide; normalization scale undefined")]
    CoincidentPoints,
    #[error("degenerate configuration: design matrix rank deficient")]
    Degenerate,
    #[error("degenerate epipolar line")]
    DegenerateLine,
    #[error("invalid RANSAC config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Features(#[from] FeatureIoError),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Rank-2, unit Frobenius norm, largest-magnitude entry positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Scale to unit norm and fix the sign. Rank is not enforced here.
    pub fn normalized(m: Matrix3<f64>) -> Option<Self> {
        let norm = m.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        let mut m = m / norm;
        let pivot = m
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            m = -m;
        }
        Some(FundamentalMatrix(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Row-major entries f00..f22.
    pub fn entries(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn line(&self, p: [f64; 2]) -> EpipolarLine {
        epipolar_line(&self.0, p)
    }

    /// `p'^T F p`.
    pub fn residual(&self, p: [f64; 2], p_prime: [f64; 2]) -> f64 {
        Vector3::new(p_prime[0], p_prime[1], 1.0).dot(&(self.0 * Vector3::new(p[0], p[1], 1.0)))
    }

    /// Larger of the two directed point-to-epipolar-line distances;
    /// infinite when either line is degenerate.
    pub fn symmetric_distance(&self, p: [f64; 2], p_prime: [f64; 2]) -> f64 {
        let forward = epipolar_distance(&epipolar_line(&self.0, p), p_prime);
        let backward = epipolar_distance(&epipolar_line(&self.0.transpose(), p_prime), p);
        match (forward, backward) {
            (Ok(f), Ok(b)) => f.max(b),
            _ => f64::INFINITY,
        }
    }
}

/// `a x + b y + c = 0` in image J pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EpipolarLine {
    pub fn is_degenerate(&self) -> bool {
        let ab = self.a.hypot(self.b);
        !(ab.is_finite() && self.c.is_finite())
            || ab <= f64::EPSILON * (self.a.abs() + self.b.abs() + self.c.abs())
            || ab == 0.0
    }
}

/// `l = F (x, y, 1)^T`.
pub fn epipolar_line(f: &Matrix3<f64>, p: [f64; 2]) -> EpipolarLine {
    let l = f * Vector3::new(p[0], p[1], 1.0);
    EpipolarLine {
        a: l[0],
        b: l[1],
        c: l[2],
    }
}

/// Unsigned point-to-line distance `|a x' + b y' + c| / sqrt(a^2 + b^2)`.
pub fn epipolar_distance(line: &EpipolarLine, p_prime: [f64; 2]) -> Result<f64> {
    if line.is_degenerate() {
        return Err(GeometryError::DegenerateLine);
    }
    Ok((line.a * p_prime[0] + line.b * p_prime[1] + line.c).abs() / line.a.hypot(line.b))
}

/// Hartley normalization: centroid to the origin, mean distance sqrt(2).
pub fn normalize_points(points: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, Matrix3<f64>)> {
    if points.is_empty() {
        return Err(GeometryError::TooFewPoints { needed: 1, got: 0 });
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| (p[0] - cx).hypot(p[1] - cy))
        .sum::<f64>()
        / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(GeometryError::CoincidentPoints);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = points
        .iter()
        .map(|p| [s * (p[0] - cx), s * (p[1] - cy)])
        .collect();
    Ok((out, t))
}

/// A point in image I and its counterpart in image J.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query: [f64; 2],
    pub train: [f64; 2],
}

impl Correspondence {
    pub fn new(query: [f64; 2], train: [f64; 2]) -> Self {
        Self { query, train }
    }
}

/// Normalized eight-point estimate minimizing `sum (p'^T F p)^2`, with
/// rank 2 enforced.
pub fn eight_point(correspondences: &[Correspondence]) -> Result<FundamentalMatrix> {
    if correspondences.len() < 8 {
        return Err(GeometryError::TooFewPoints {
            needed: 8,
            got: correspondences.len(),
        });
    }
    let left: Vec<[f64; 2]> = correspondences.iter().map(|c| c.query).collect();
    let right: Vec<[f64; 2]> = correspondences.iter().map(|c| c.train).collect();
    let (left, t1) = normalize_points(&left)?;
    let (right, t2) = normalize_points(&right)?;

    // Pad with zero rows so the SVD always yields a full 9x9 V.
    let rows = correspondences.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in left.iter().zip(&right).enumerate() {
        let (x, y) = (p[0], p[1]);
        let (xp, yp) = (q[0], q[1]);
        let row = [xp * x, xp * y, xp, yp * x, yp * y, yp, x, y, 1.0];
        for (j, v) in row.into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::Degenerate)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let eighth = svd.singular_values[order[7]];
    if !(largest > 0.0) || eighth <= DEGENERACY_TOLERANCE * largest {
        return Err(GeometryError::Degenerate);
    }
    let f = v_t.row(order[8]);
    let f_norm = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);

    let svd3 = f_norm.svd(true, true);
    let (u, v_t3) = (svd3.u.unwrap(), svd3.v_t.unwrap());
    let mut s = svd3.singular_values;
    let smallest = (0..3).min_by(|&i, &j| s[i].total_cmp(&s[j])).unwrap();
    s[smallest] = 0.0;
    let f_rank2 = u * Matrix3::from_diagonal(&s) * v_t3;

    let f = t2.transpose() * f_rank2 * t1;
    FundamentalMatrix::normalized(f).ok_or(GeometryError::Degenerate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Symmetric epipolar distance threshold in pixels.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2048,
            inlier_threshold: 2.0,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(GeometryError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(GeometryError::InvalidConfig(
                "inlier threshold must be positive".into(),
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(GeometryError::InvalidConfig("confidence outside (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewGeometry {
    pub fundamental: Option<FundamentalMatrix>,
    pub seed_match_count: usize,
    pub inlier_count: usize,
    /// Indices into the seed correspondences.
    pub inliers: Vec<usize>,
    pub accepted: bool,
}

impl TwoViewGeometry {
    fn rejected(seed_match_count: usize) -> Self {
        Self {
            fundamental: None,
            seed_match_count,
            inlier_count: 0,
            inliers: Vec::new(),
            accepted: false,
        }
    }
}

/// `ceil(2/3 * seeds)`: inliers needed to accept.
pub fn required_inliers(seed_match_count: usize) -> usize {
    (2 * seed_match_count).div_ceil(3)
}

fn inliers_of(f: &FundamentalMatrix, data: &[Correspondence], threshold: f64) -> Vec<usize> {
    data.iter()
        .enumerate()
        .filter(|(_, c)| f.symmetric_distance(c.query, c.train) <= threshold)
        .map(|(i, _)| i)
        .collect()
}

fn hypothesis_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Iterations needed to draw one all-inlier minimal sample with the given
/// confidence at inlier ratio `w`.
fn required_iterations(w: f64, confidence: f64, cap: usize) -> usize {
    let p_good = w.powi(8);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil();
    if n.is_finite() && n >= 0.0 {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Seeded RANSAC over minimal eight-point samples, gated on at least 16
/// seeds and at least `ceil(2/3)` of them as inliers. Each hypothesis
/// draws from its own generator keyed by `(seed, index)`, so the result
/// does not depend on how hypotheses are spread over threads.
pub fn ransac_fundamental(data: &[Correspondence], cfg: &RansacConfig) -> Result<TwoViewGeometry> {
    cfg.validate()?;
    let s = data.len();
    if s < MIN_SEED_MATCHES {
        return Ok(TwoViewGeometry::rejected(s));
    }

    let mut best: Option<(usize, usize, FundamentalMatrix)> = None; // (count, hypothesis, F)
    let mut evaluated = 0;
    let mut budget = cfg.max_iterations;
    while evaluated < budget {
        let end = (evaluated + RANSAC_BATCH).min(budget);
        let batch_best = (evaluated..end)
            .into_par_iter()
            .filter_map(|h| {
                let mut rng = hypothesis_rng(cfg.seed, h);
                let sample: Vec<Correspondence> =
                    sample(&mut rng, s, 8).iter().map(|i| data[i]).collect();
                let f = eight_point(&sample).ok()?;
                let count = data
                    .iter()
                    .filter(|c| f.symmetric_distance(c.query, c.train) <= cfg.inlier_threshold)
                    .count();
                Some((count, h, f))
            })
            .reduce_with(|a, b| if (b.0, std::cmp::Reverse(b.1)) > (a.0, std::cmp::Reverse(a.1)) { b } else { a });
        if let Some(cand) = batch_best {
            if best.as_ref().is_none_or(|b| cand.0 > b.0) {
                best = Some(cand);
            }
        }
        evaluated = end;
        if let Some((count, _, _)) = &best {
            budget = required_iterations(*count as f64 / s as f64, cfg.confidence, cfg.max_iterations);
        }
    }

    let Some((_, _, hypothesis)) = best else {
        return Ok(TwoViewGeometry::rejected(s));
    };
    let mut f = hypothesis;
    let mut inliers = inliers_of(&f, data, cfg.inlier_threshold);
    if inliers.len() >= 8 {
        let subset: Vec<Correspondence> = inliers.iter().map(|&i| data[i]).collect();
        if let Ok(refit) = eight_point(&subset) {
            let refit_inliers = inliers_of(&refit, data, cfg.inlier_threshold);
            if refit_inliers.len() >= inliers.len() {
                f = refit;
                inliers = refit_inliers;
            }
        }
    }
    let inlier_count = inliers.len();
    Ok(TwoViewGeometry {
        fundamental: Some(f),
        seed_match_count: s,
        inlier_count,
        inliers,
        accepted: inlier_count >= required_inliers(s),
    })
}

/// Coordinates of matched keypoints.
pub fn correspondences(
    fs_i: &FeatureSet,
    fs_j: &FeatureSet,
    matches: &[MatchRecord],
) -> Vec<Correspondence> {
    matches
        .iter()
        .map(|m| {
            Correspondence::new(
                fs_i.keypoints[m.query_index as usize].position(),
                fs_j.keypoints[m.train_index as usize].position(),
            )
        })
        .collect()
}

/// Keeps candidates within `band` pixels of each query's epipolar line.
/// Queries whose line is degenerate are left unfiltered.
pub struct EpipolarBand {
    lines: Vec<Option<EpipolarLine>>,
    train_positions: Vec<[f64; 2]>,
    band: f64,
}

impl EpipolarBand {
    pub fn new(f: &FundamentalMatrix, fs_i: &FeatureSet, fs_j: &FeatureSet, band: f64) -> Self {
        let lines = fs_i
            .keypoints
            .iter()
            .map(|k| Some(f.line(k.position())).filter(|l| !l.is_degenerate()))
            .collect();
        Self {
            lines,
            train_positions: fs_j.keypoints.iter().map(|k| k.position()).collect(),
            band,
        }
    }
}

impl CandidateFilter for EpipolarBand {
    fn retain(&self, query: usize, candidates: &mut Vec<u32>) {
        if self.band == f64::INFINITY {
            return;
        }
        let Some(line) = &self.lines[query] else {
            return;
        };
        candidates.retain(|&c| {
            epipolar_distance(line, self.train_positions[c as usize])
                .is_ok_and(|d| d <= self.band)
        });
    }
}

/// Cascade matching with candidates restricted to the epipolar band.
pub fn guided_match_pair(
    fs_i: &FeatureSet,
    fs_j: &FeatureSet,
    codes_i: &PointCodes,
    codes_j: &PointCodes,
    f: &FundamentalMatrix,
    cfg: &MatchConfig,
    band: f64,
) -> Result<Vec<MatchRecord>> {
    if band.is_nan() || band < 0.0 {
        return Err(GeometryError::InvalidConfig(format!("band width {band}")));
    }
    let filter = EpipolarBand::new(f, fs_i, fs_j, band);
    Ok(match_pair_filtered(fs_i, fs_j, codes_i, codes_j, cfg, &filter)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    /// Fraction of largest-scale features used for seed matching.
    pub fraction: f64,
    pub ransac: RansacConfig,
    /// Epipolar band half-width in pixels.
    pub band: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            ransac: RansacConfig::default(),
            band: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageOutcome {
    pub geometry: TwoViewGeometry,
    /// Empty when the pair was rejected by the gate.
    pub matches: Vec<MatchRecord>,
}

/// Seed stage only: cascade match the top-scale subsets and estimate
/// geometry. Seed matches are reported in original point indices.
pub fn seed_geometry(
    fs_i: &FeatureSet,
    fs_j: &FeatureSet,
    codes_i: &PointCodes,
    codes_j: &PointCodes,
    cfg: &MatchConfig,
    stage: &StageConfig,
) -> Result<(TwoViewGeometry, Vec<MatchRecord>)> {
    let top_i = select_top_scale(fs_i, stage.fraction)?;
    let top_j = select_top_scale(fs_j, stage.fraction)?;
    let sub_codes_i = codes_i.subset(&top_i.original_indices);
    let sub_codes_j = codes_j.subset(&top_j.original_indices);
    let seeds: Vec<MatchRecord> = match_pair(
        &top_i.features,
        &top_j.features,
        &sub_codes_i,
        &sub_codes_j,
        cfg,
    )?
    .into_iter()
    .map(|m| MatchRecord {
        query_index: top_i.original_indices[m.query_index as usize] as u32,
        train_index: top_j.original_indices[m.train_index as usize] as u32,
        distance: m.distance,
    })
    .collect();
    let data = correspondences(fs_i, fs_j, &seeds);
    Ok((ransac_fundamental(&data, &stage.ransac)?, seeds))
}

/// Seed matching on top-scale features, gate, then guided matching of the
/// full feature sets when the gate accepts.
pub fn two_stage_match(
    fs_i: &FeatureSet,
    fs_j: &FeatureSet,
    codes_i: &PointCodes,
    codes_j: &PointCodes,
    cfg: &MatchConfig,
    stage: &StageConfig,
) -> Result<TwoStageOutcome> {
    let (geometry, _) = seed_geometry(fs_i, fs_j, codes_i, codes_j, cfg, stage)?;
    let matches = match (&geometry.fundamental, geometry.accepted) {
        (Some(f), true) => guided_match_pair(fs_i, fs_j, codes_i, codes_j, f, cfg, stage.band)?,
        _ => Vec::new(),
    };
    Ok(TwoStageOutcome { geometry, matches })
}

/// One geometry report line: `I J accepted seed_matches inliers f00..f22`.
/// Entries are zero when no matrix was estimated.
pub fn format_geometry_line(image_i: &str, image_j: &str, g: &TwoViewGeometry) -> String {
    use std::fmt::Write as _;
    let mut out = format!(
        "{image_i} {image_j} {} {} {}",
        u8::from(g.accepted),
        g.seed_match_count,
        g.inlier_count
    );
    let entries = g.fundamental.map(|f| f.entries()).unwrap_or([0.0; 9]);
    for e in entries {
        let _ = write!(out, " {e:e}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TwoViewScene;
    use rand::Rng;

    #[test]
    fn normalization_identity_and_errors() {
        let pts = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        let (out, t) = normalize_points(&pts).unwrap();
        assert!((t - Matrix3::identity()).abs().max() < 1e-15);
        assert_eq!(out.len(), 4);
        assert!(matches!(
            normalize_points(&[[3.0, 4.0]; 5]),
            Err(GeometryError::CoincidentPoints)
        ));
        assert!(normalize_points(&[]).is_err());
    }

    #[test]
    fn normalization_recomputed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 2]> = (0..100)
            .map(|_| [rng.random_range(0.0..1000.0), rng.random_range(0.0..700.0)])
            .collect();
        let (out, t) = normalize_points(&pts).unwrap();
        let cx: f64 = out.iter().map(|p| p[0]).sum::<f64>() / 100.0;
        let cy: f64 = out.iter().map(|p| p[1]).sum::<f64>() / 100.0;
        let md: f64 = out.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / 100.0;
        assert!(cx.abs() < 1e-12 && cy.abs() < 1e-12);
        assert!((md - 2f64.sqrt()).abs() < 1e-12);
        for (p, q) in pts.iter().zip(&out) {
            let h = t * Vector3::new(p[0], p[1], 1.0);
            assert!((h[0] - q[0]).abs() < 1e-12 && (h[1] - q[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn epipolar_line_examples() {
        let f = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let l = epipolar_line(&f, [0.0, 0.0]);
        assert_eq!((l.a, l.b, l.c), (0.0, -1.0, 0.0));
        let l2 = epipolar_line(&(f * 3.5), [2.0, 7.0]);
        let l1 = epipolar_line(&f, [2.0, 7.0]);
        assert_eq!((l2.a, l2.b, l2.c), (l1.a * 3.5, l1.b * 3.5, l1.c * 3.5));
        let p = [5.0, -2.0];
        let d1 = epipolar_distance(&l1, p).unwrap();
        let d2 = epipolar_distance(&l2, p).unwrap();
        assert!((d1 - d2).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let p = [rng.random_range(0.0..500.0), rng.random_range(0.0..500.0)];
        let l = epipolar_line(&m, p);
        for r in 0..3 {
            let expect = m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)];
            assert!(([l.a, l.b, l.c][r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_examples() {
        let l = EpipolarLine { a: 0.0, b: 1.0, c: -5.0 };
        assert_eq!(epipolar_distance(&l, [3.0, 5.0]).unwrap(), 0.0);
        assert_eq!(epipolar_distance(&l, [3.0, 7.0]).unwrap(), 2.0);
        assert_eq!(epipolar_distance(&l, [3.0, 3.0]).unwrap(), 2.0);
        let l = EpipolarLine { a: 3.0, b: 4.0, c: 0.0 };
        assert_eq!(epipolar_distance(&l, [5.0, 0.0]).unwrap(), 3.0);
        let l = EpipolarLine { a: 0.0, b: 0.0, c: 1.0 };
        assert!(matches!(
            epipolar_distance(&l, [0.0, 0.0]),
            Err(GeometryError::DegenerateLine)
        ));
    }

    #[test]
    fn eight_point_recovers_known_f() {
        for seed in 0..5 {
            let scene = TwoViewScene::random(seed, 40);
            let truth = scene.fundamental();
            let est = eight_point(&scene.correspondences()[..8]).unwrap();
            let diff = (est.matrix() - truth.matrix()).abs().max();
            assert!(diff < 1e-6, "seed {seed}: {diff}");
            assert!(est.matrix().determinant().abs() < 1e-9);
            assert!((est.matrix().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eight_point_duplication_invariant() {
        let scene = TwoViewScene::random(11, 8);
        let c = scene.correspondences();
        let a = eight_point(&c).unwrap();
        let mut dup = c.clone();
        dup.extend_from_slice(&c[..3]);
        let b = eight_point(&dup).unwrap();
        assert!((a.matrix() - b.matrix()).abs().max() < 1e-6);
    }

    #[test]
    fn planar_pure_rotation_is_degenerate() {
        let c = crate::synth::planar_rotation_correspondences(5, 30);
        assert!(matches!(eight_point(&c), Err(GeometryError::Degenerate)));
        let g = ransac_fundamental(&c, &RansacConfig::default()).unwrap();
        assert!(!g.accepted);
    }

    #[test]
    fn too_few_seeds_rejected_without_estimation() {
        let scene = TwoViewScene::random(1, 15);
        let g = ransac_fundamental(&scene.correspondences(), &RansacConfig::default()).unwrap();
        assert!(!g.accepted);
        assert!(g.fundamental.is_none());
        assert_eq!(g.seed_match_count, 15);
    }

    #[test]
    fn ransac_with_outliers() {
        let scene = TwoViewScene::random(7, 21);
        let data = scene.with_outliers(9, 99);
        let g = ransac_fundamental(&data, &RansacConfig { seed: 5, ..Default::default() }).unwrap();
        assert!(g.accepted);
        assert_eq!(g.inlier_count, 21);
        let diff = (g.fundamental.unwrap().matrix() - scene.fundamental().matrix())
            .abs()
            .max();
        assert!(diff < 1e-4, "{diff}");

        let scene = TwoViewScene::random(7, 19);
        let data = scene.with_outliers(11, 99);
        let g = ransac_fundamental(&data, &RansacConfig { seed: 5, ..Default::default() }).unwrap();
        assert!(!g.accepted);
        assert_eq!(g.inlier_count, 19);
    }

    #[test]
    fn two_stage_covers_brute_force_matches_in_band() {
        use crate::hashing::{build_hash_family, set_centering};
        use crate::matcher::brute_force_match;
        use crate::synth::{SceneImages, SceneSpec};
        let scene = SceneImages::generate(
            21,
            SceneSpec { views: 2, points: 600, distractors: 200, sigma: 3.0 },
        );
        let (fs_i, fs_j) = (&scene.images[0], &scene.images[1]);
        let family = set_centering(
            build_hash_family(3, 8, 128, 6).unwrap(),
            fs_i.descriptors.iter().chain(&fs_j.descriptors),
        )
        .unwrap();
        let (ci, cj) = (family.encode(fs_i).unwrap(), family.encode(fs_j).unwrap());
        let cfg = MatchConfig::default();
        let stage = StageConfig::default();
        let out = two_stage_match(fs_i, fs_j, &ci, &cj, &cfg, &stage).unwrap();
        assert!(out.geometry.accepted);
        let f = out.geometry.fundamental.unwrap();
        let guided: std::collections::HashSet<_> =
            out.matches.iter().map(|m| (m.query_index, m.train_index)).collect();
        let in_band: Vec<_> = brute_force_match(fs_i, fs_j, cfg.ratio)
            .into_iter()
            .filter(|m| {
                let line = f.line(fs_i.keypoints[m.query_index as usize].position());
                epipolar_distance(&line, fs_j.keypoints[m.train_index as usize].position())
                    .is_ok_and(|d| d <= stage.band)
            })
            .collect();
        let covered = in_band
            .iter()
            .filter(|m| guided.contains(&(m.query_index, m.train_index)))
            .count();
        assert!(!in_band.is_empty());
        assert!(covered as f64 >= 0.9 * in_band.len() as f64, "{covered}/{}", in_band.len());
    }

    #[test]
    fn ransac_is_deterministic_across_thread_counts() {
        let scene = TwoViewScene::random(3, 40);
        let data = scene.with_outliers(20, 4);
        let cfg = RansacConfig { seed: 77, ..Default::default() };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| ransac_fundamental(&data, &cfg).unwrap());
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| ransac_fundamental(&data, &cfg).unwrap());
        assert_eq!(one, four);
    }

    #[test]
    fn gate_arithmetic() {
        assert_eq!(required_inliers(16), 11);
        assert_eq!(required_inliers(30), 20);
        assert_eq!(required_inliers(31), 21);
        assert_eq!(required_inliers(3), 2);
    }

    #[test]
    fn geometry_line_format() {
        let g = TwoViewGeometry::rejected(4);
        assert_eq!(
            format_geometry_line("a", "b", &g),
            "a b 0 4 0 0e0 0e0 0e0 0e0 0e0 0e0 0e0 0e0 0e0"
        );
    }
}
