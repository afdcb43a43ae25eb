//! Synthetic scenes and descriptor sets with known ground truth, used by
//! the examples and test suites.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::feature_io::{
    save_features, DatasetManifest, Descriptor, FeatureIoError, FeatureSet, Keypoint,
    ManifestEntry,
};
use crate::geometry::{Correspondence, FundamentalMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_descriptor(rng: &mut impl Rng) -> Descriptor {
    Descriptor(std::array::from_fn(|_| rng.random()))
}

/// Add `N(0, sigma^2)` per component, rounded and clamped to `[0, 255]`.
pub fn noisy_copy(d: &Descriptor, sigma: f64, rng: &mut impl Rng) -> Descriptor {
    if sigma == 0.0 {
        return *d;
    }
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    Descriptor(d.0.map(|v| (v as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8))
}

fn random_keypoint(rng: &mut impl Rng, width: f32, height: f32) -> Keypoint {
    Keypoint::new(
        rng.random_range(0.0..width),
        rng.random_range(0.0..height),
        rng.random_range(1.0..8.0),
        rng.random_range(-std::f32::consts::PI..std::f32::consts::PI),
    )
}

/// Query set plus a train set holding one noisy copy per query among
/// uniform distractors. `truth[q]` is the train index of query `q`'s copy.
#[derive(Debug, Clone)]
pub struct RecallScenario {
    pub queries: FeatureSet,
    pub train: FeatureSet,
    pub truth: Vec<u32>,
}

impl RecallScenario {
    pub fn generate(seed: u64, queries: usize, distractors: usize, sigma: f64) -> Self {
        let mut rng = rng(seed);
        let q_desc: Vec<Descriptor> = (0..queries).map(|_| uniform_descriptor(&mut rng)).collect();
        let q_kp: Vec<Keypoint> = (0..queries)
            .map(|_| random_keypoint(&mut rng, 1000.0, 800.0))
            .collect();

        let total = queries + distractors;
        let mut slots: Vec<Option<usize>> = (0..queries).map(Some).collect();
        slots.extend(std::iter::repeat_n(None, distractors));
        // Fisher-Yates so true matches are spread through the train set.
        for i in (1..total).rev() {
            let j = rng.random_range(0..=i);
            slots.swap(i, j);
        }
        let mut truth = vec![0u32; queries];
        let mut t_desc = Vec::with_capacity(total);
        let mut t_kp = Vec::with_capacity(total);
        for (t, slot) in slots.iter().enumerate() {
            match slot {
                Some(q) => {
                    truth[*q] = t as u32;
                    t_desc.push(noisy_copy(&q_desc[*q], sigma, &mut rng));
                    t_kp.push(q_kp[*q]);
                }
                None => {
                    t_desc.push(uniform_descriptor(&mut rng));
                    t_kp.push(random_keypoint(&mut rng, 1000.0, 800.0));
                }
            }
        }
        RecallScenario {
            queries: FeatureSet::new("query", q_kp, q_desc).expect("valid"),
            train: FeatureSet::new("train", t_kp, t_desc).expect("valid"),
            truth,
        }
    }
}

/// Apply a homography to a pixel position.
pub fn apply_homography(h: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// A pair related by a known homography: for a true match, the query
/// position equals `H` applied to the train position.
#[derive(Debug, Clone)]
pub struct HomographyPair {
    pub scenario: RecallScenario,
    pub homography: Matrix3<f64>,
}

impl HomographyPair {
    pub fn generate(seed: u64, queries: usize, distractors: usize, sigma: f64) -> Self {
        let mut scenario = RecallScenario::generate(seed, queries, distractors, sigma);
        let h = Matrix3::new(
            0.95, 0.08, 30.0, //
            -0.06, 1.02, -20.0, //
            2e-5, -1e-5, 1.0,
        );
        let h_inv = h.try_inverse().expect("invertible");
        for (q, &t) in scenario.truth.iter().enumerate() {
            let p = scenario.queries.keypoints[q].position();
            let p2 = apply_homography(&h_inv, p);
            let kp = &mut scenario.train.keypoints[t as usize];
            kp.x = p2[0] as f32;
            kp.y = p2[1] as f32;
        }
        HomographyPair {
            scenario,
            homography: h,
        }
    }
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t[2], t[1], t[2], 0.0, -t[0], -t[1], t[0], 0.0)
}

/// Pinhole camera `x = K (R X + t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn project(&self, x: &Vector3<f64>) -> [f64; 2] {
        let v = self.k * (self.rotation * x + self.translation);
        [v[0] / v[2], v[1] / v[2]]
    }

    /// Fundamental matrix mapping points of `self` to lines in `other`.
    pub fn fundamental_to(&self, other: &Camera) -> FundamentalMatrix {
        let r = other.rotation * self.rotation.transpose();
        let t = other.translation - r * self.translation;
        let e = skew(&t) * r;
        let k1_inv = self.k.try_inverse().expect("invertible K");
        let k2_inv = other.k.try_inverse().expect("invertible K");
        FundamentalMatrix::normalized(k2_inv.transpose() * e * k1_inv).expect("nonzero F")
    }
}

fn intrinsics() -> Matrix3<f64> {
    Matrix3::new(800.0, 0.0, 500.0, 0.0, 800.0, 400.0, 0.0, 0.0, 1.0)
}

fn random_camera(rng: &mut impl Rng) -> Camera {
    let rot = Rotation3::from_euler_angles(
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.1..0.1),
    );
    let translation = Vector3::new(
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.3),
    );
    Camera {
        k: intrinsics(),
        rotation: *rot.matrix(),
        translation,
    }
}

fn random_point(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-3.5..3.5),
        rng.random_range(-2.8..2.8),
        rng.random_range(5.0..9.0),
    )
}

/// Random 3D points seen by two random cameras; projections are exact.
#[derive(Debug, Clone)]
pub struct TwoViewScene {
    pub points: Vec<Vector3<f64>>,
    pub first: Camera,
    pub second: Camera,
    seed: u64,
}

impl TwoViewScene {
    pub fn random(seed: u64, n: usize) -> Self {
        let mut rng = rng(seed);
        let first = random_camera(&mut rng);
        let second = loop {
            let c = random_camera(&mut rng);
            // Require a real baseline so the geometry is well defined.
            let r = c.rotation * first.rotation.transpose();
            if (c.translation - r * first.translation).norm() > 0.3 {
                break c;
            }
        };
        let points = (0..n).map(|_| random_point(&mut rng)).collect();
        TwoViewScene {
            points,
            first,
            second,
            seed,
        }
    }

    pub fn fundamental(&self) -> FundamentalMatrix {
        self.first.fundamental_to(&self.second)
    }

    pub fn correspondences(&self) -> Vec<Correspondence> {
        self.points
            .iter()
            .map(|x| Correspondence::new(self.first.project(x), self.second.project(x)))
            .collect()
    }

    /// Exact correspondences followed by `outliers` random pairs that lie
    /// at least 80 px from their true epipolar lines in both directions.
    pub fn with_outliers(&self, outliers: usize, seed: u64) -> Vec<Correspondence> {
        let f = self.fundamental();
        let mut rng = rng(seed ^ self.seed.rotate_left(17));
        let mut out = self.correspondences();
        while out.len() < self.points.len() + outliers {
            let c = Correspondence::new(
                [rng.random_range(0.0..1000.0), rng.random_range(0.0..800.0)],
                [rng.random_range(0.0..1000.0), rng.random_range(0.0..800.0)],
            );
            let fwd = crate::geometry::epipolar_distance(&f.line(c.query), c.train);
            let bwd = crate::geometry::epipolar_distance(
                &crate::geometry::epipolar_line(&f.matrix().transpose(), c.train),
                c.query,
            );
            if matches!((fwd, bwd), (Ok(a), Ok(b)) if a.min(b) > 80.0) {
                out.push(c);
            }
        }
        out
    }
}

/// Planar points viewed by two cameras sharing a center: every
/// correspondence is explained by one homography, so no unique F exists.
pub fn planar_rotation_correspondences(seed: u64, n: usize) -> Vec<Correspondence> {
    let mut rng = rng(seed);
    let a = Camera {
        k: intrinsics(),
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
    };
    let b = Camera {
        k: intrinsics(),
        rotation: *Rotation3::from_euler_angles(0.05, -0.1, 0.02).matrix(),
        translation: Vector3::zeros(),
    };
    (0..n)
        .map(|_| {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), 6.0);
            Correspondence::new(a.project(&x), b.project(&x))
        })
        .collect()
}

/// Feature sets for a multi-view scene: every image observes the same
/// points with per-view descriptor noise plus its own distractors.
/// Keypoint scales are shared across views (with small jitter), so the
/// top-scale subsets of two views overlap.
#[derive(Debug, Clone)]
pub struct SceneImages {
    pub cameras: Vec<Camera>,
    pub images: Vec<FeatureSet>,
    /// `observed[v][p]` is the index of scene point `p` in view `v`.
    pub observed: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneSpec {
    pub views: usize,
    pub points: usize,
    pub distractors: usize,
    pub sigma: f64,
}

impl SceneImages {
    pub fn generate(seed: u64, spec: SceneSpec) -> Self {
        let mut rng = rng(seed);
        let points: Vec<Vector3<f64>> = (0..spec.points).map(|_| random_point(&mut rng)).collect();
        let base: Vec<Descriptor> = (0..spec.points).map(|_| uniform_descriptor(&mut rng)).collect();
        let scales: Vec<f32> = (0..spec.points).map(|_| rng.random_range(1.0..10.0)).collect();
        let cameras: Vec<Camera> = (0..spec.views).map(|_| random_camera(&mut rng)).collect();
        let mut images = Vec::with_capacity(spec.views);
        let mut observed = Vec::with_capacity(spec.views);
        for (v, cam) in cameras.iter().enumerate() {
            let total = spec.points + spec.distractors;
            let mut order: Vec<Option<usize>> = (0..spec.points).map(Some).collect();
            order.extend(std::iter::repeat_n(None, spec.distractors));
            for i in (1..total).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut kps = Vec::with_capacity(total);
            let mut descs = Vec::with_capacity(total);
            let mut seen = vec![0u32; spec.points];
            for (idx, slot) in order.iter().enumerate() {
                match slot {
                    Some(p) => {
                        let xy = cam.project(&points[*p]);
                        let scale = scales[*p] * rng.random_range(0.97..1.03);
                        kps.push(Keypoint::new(xy[0] as f32, xy[1] as f32, scale, 0.0));
                        descs.push(noisy_copy(&base[*p], spec.sigma, &mut rng));
                        seen[*p] = idx as u32;
                    }
                    None => {
                        let mut kp = random_keypoint(&mut rng, 1000.0, 800.0);
                        kp.scale = rng.random_range(0.5..4.0);
                        kps.push(kp);
                        descs.push(uniform_descriptor(&mut rng));
                    }
                }
            }
            images.push(FeatureSet::new(format!("view{v:03}"), kps, descs).expect("valid"));
            observed.push(seen);
        }
        SceneImages {
            cameras,
            images,
            observed,
        }
    }

    pub fn fundamental(&self, i: usize, j: usize) -> FundamentalMatrix {
        self.cameras[i].fundamental_to(&self.cameras[j])
    }

    /// Ground-truth `(query, train)` index pairs between views `i` and `j`.
    pub fn truth(&self, i: usize, j: usize) -> Vec<(u32, u32)> {
        let mut t: Vec<(u32, u32)> = self.observed[i]
            .iter()
            .zip(&self.observed[j])
            .map(|(&a, &b)| (a, b))
            .collect();
        t.sort_unstable();
        t
    }
}

/// A rectified pair: `F = [[0,0,0],[0,0,-1],[0,1,0]]`, so the epipolar
/// line of `(x, y)` is the row `y' = y`, and true matches share their `y`
/// coordinate bit for bit.
pub fn rectified_pair(seed: u64, n: usize, distractors: usize, sigma: f64) -> RecallScenario {
    let mut scenario = RecallScenario::generate(seed, n, distractors, sigma);
    let mut rng = rng(seed.wrapping_add(1));
    for (q, &t) in scenario.truth.iter().enumerate() {
        let y = scenario.queries.keypoints[q].y;
        let kp = &mut scenario.train.keypoints[t as usize];
        kp.y = y;
        kp.x = scenario.queries.keypoints[q].x - rng.random_range(5.0..60.0);
    }
    scenario
}

pub fn rectified_fundamental() -> FundamentalMatrix {
    FundamentalMatrix::normalized(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0))
        .expect("nonzero")
}

/// Write feature files and a manifest under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, images: &[FeatureSet]) -> Result<PathBuf, FeatureIoError> {
    std::fs::create_dir_all(dir).map_err(|source| FeatureIoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(images.len());
    for fs in images {
        let file = format!("{}.chft", fs.image_id);
        save_features(fs, dir.join(&file))?;
        entries.push(ManifestEntry {
            image_id: fs.image_id.clone(),
            path: PathBuf::from(file),
        });
    }
    let manifest = DatasetManifest::new(entries)?;
    let path = dir.join("manifest.txt");
    manifest.save(&path)?;
    Ok(path)
}

/// Unrelated images: uniform descriptors at random positions.
pub fn random_images(seed: u64, count: usize, points: usize) -> Vec<FeatureSet> {
    let mut rng = rng(seed);
    (0..count)
        .map(|i| {
            let kps = (0..points)
                .map(|_| random_keypoint(&mut rng, 1000.0, 800.0))
                .collect();
            let descs = (0..points).map(|_| uniform_descriptor(&mut rng)).collect();
            FeatureSet::new(format!("rand{i:03}"), kps, descs).expect("valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_projections_satisfy_truth_f() {
        let scene = TwoViewScene::random(4, 50);
        let f = scene.fundamental();
        for c in scene.correspondences() {
            assert!(f.symmetric_distance(c.query, c.train) < 1e-8);
        }
    }

    #[test]
    fn outliers_are_far() {
        let scene = TwoViewScene::random(4, 10);
        let f = scene.fundamental();
        let data = scene.with_outliers(20, 1);
        assert_eq!(data.len(), 30);
        assert!(data[10..]
            .iter()
            .all(|c| f.symmetric_distance(c.query, c.train) > 80.0));
    }

    #[test]
    fn recall_scenario_truth() {
        let s = RecallScenario::generate(1, 20, 80, 0.0);
        assert_eq!(s.train.len(), 100);
        for (q, &t) in s.truth.iter().enumerate() {
            assert_eq!(s.queries.descriptors[q], s.train.descriptors[t as usize]);
        }
    }

    #[test]
    fn homography_positions() {
        let p = HomographyPair::generate(2, 30, 10, 8.0);
        for (q, &t) in p.scenario.truth.iter().enumerate() {
            let x1 = p.scenario.queries.keypoints[q].position();
            let x2 = p.scenario.train.keypoints[t as usize].position();
            let m = apply_homography(&p.homography, x2);
            assert!((m[0] - x1[0]).hypot(m[1] - x1[1]) < 1e-2);
        }
    }
}
