//! Feature, manifest and match-file I/O.
//!
//! The binary feature format is little-endian:
//!
//! ```text
//! "CHFT" | version: u32 = 1 | count: u32 | reserved: u32
//! count x { x: f32, y: f32, scale: f32, orientation: f32, descriptor: [u8; 128] }
//! ```
//!
//! Match files are text: a `# I J count` header followed by one
//! `query train distance` line per match.

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Descriptor dimensionality (SIFT).
pub const DESCRIPTOR_LEN: usize = 128;

pub const FEATURE_MAGIC: [u8; 4] = *b"CHFT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 16;
/// Bytes per stored point: four `f32` keypoint fields and the descriptor.
pub const FEATURE_RECORD_LEN: usize = 16 + DESCRIPTOR_LEN;

#[derive(Debug, Error)]
pub enum FeatureIoError {
    #[error("{path}: file not found")]
    Missing { path: PathBuf },
    #[error("{path}: bad magic at byte 0 (expected \"CHFT\")")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported feature file version {version} at byte 4")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated payload at byte {offset} (expected {expected} bytes)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid feature set: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl FeatureIoError {
    fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            FeatureIoError::Missing {
                path: path.to_path_buf(),
            }
        } else {
            FeatureIoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Self {
        FeatureIoError::Malformed {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = FeatureIoError> = std::result::Result<T, E>;

/// Keypoint geometry in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub orientation: f32,
}

impl Keypoint {
    pub fn new(x: f32, y: f32, scale: f32, orientation: f32) -> Self {
        Self {
            x,
            y,
            scale,
            orientation,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.scale > 0.0
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x as f64, self.y as f64]
    }
}

/// 128 unsigned bytes, SIFT convention.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Descriptor(pub [u8; DESCRIPTOR_LEN]);

impl Descriptor {
    pub const fn zeros() -> Self {
        Descriptor([0; DESCRIPTOR_LEN])
    }

    pub fn splat(v: u8) -> Self {
        Descriptor([v; DESCRIPTOR_LEN])
    }

    pub fn as_bytes(&self) -> &[u8; DESCRIPTOR_LEN] {
        &self.0
    }

    /// Exact squared Euclidean distance, integer arithmetic.
    pub fn squared_distance(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(&a, &b)| {
                let d = a as i32 - b as i32;
                (d * d) as u32
            })
            .sum()
    }
}

impl Default for Descriptor {
    fn default() -> Self {
        Descriptor::zeros()
    }
}

impl fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Descriptor({:?}..)", &self.0[..8])
    }
}

impl From<[u8; DESCRIPTOR_LEN]> for Descriptor {
    fn from(v: [u8; DESCRIPTOR_LEN]) -> Self {
        Descriptor(v)
    }
}

/// One image's keypoints and descriptors, index-aligned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub image_id: String,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FeatureSet {
    pub fn new(
        image_id: impl Into<String>,
        keypoints: Vec<Keypoint>,
        descriptors: Vec<Descriptor>,
    ) -> Result<Self> {
        let fs = FeatureSet {
            image_id: image_id.into(),
            keypoints,
            descriptors,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn empty(image_id: impl Into<String>) -> Self {
        FeatureSet {
            image_id: image_id.into(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints.len() != self.descriptors.len() {
            return Err(FeatureIoError::Invalid(format!(
                "{} keypoints but {} descriptors",
                self.keypoints.len(),
                self.descriptors.len()
            )));
        }
        if let Some(i) = self.keypoints.iter().position(|k| !k.is_valid()) {
            return Err(FeatureIoError::Invalid(format!(
                "keypoint {i} has non-finite position or non-positive scale"
            )));
        }
        Ok(())
    }

    /// Approximate in-memory footprint, used for block sizing.
    pub fn byte_size(&self) -> usize {
        self.len() * FEATURE_RECORD_LEN
    }

    /// Subset by index list, keeping the given order.
    pub fn subset(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            image_id: self.image_id.clone(),
            keypoints: indices.iter().map(|&i| self.keypoints[i]).collect(),
            descriptors: indices.iter().map(|&i| self.descriptors[i]).collect(),
        }
    }
}

fn image_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Serialize to the binary feature format.
pub fn encode_features(fs: &FeatureSet) -> Result<Vec<u8>> {
    fs.validate()?;
    let count = u32::try_from(fs.len())
        .map_err(|_| FeatureIoError::Invalid("more than u32::MAX points".into()))?;
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + fs.len() * FEATURE_RECORD_LEN);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for (kp, desc) in fs.keypoints.iter().zip(&fs.descriptors) {
        for v in [kp.x, kp.y, kp.scale, kp.orientation] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&desc.0);
    }
    Ok(buf)
}

/// Parse the binary feature format. `path` is only used for error messages
/// and to derive the image id.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSet> {
    let truncated = |offset: usize, expected: usize| FeatureIoError::Truncated {
        path: path.to_path_buf(),
        offset,
        expected,
    };
    if bytes.len() < 4 {
        return Err(truncated(bytes.len(), FEATURE_HEADER_LEN));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(FeatureIoError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(truncated(bytes.len(), FEATURE_HEADER_LEN));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(FeatureIoError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = word(8) as usize;
    let expected = FEATURE_HEADER_LEN + count * FEATURE_RECORD_LEN;
    if bytes.len() < expected {
        // Report the offset of the first incomplete record.
        let whole = (bytes.len() - FEATURE_HEADER_LEN) / FEATURE_RECORD_LEN;
        return Err(truncated(
            FEATURE_HEADER_LEN + whole * FEATURE_RECORD_LEN,
            expected,
        ));
    }

    let mut keypoints = Vec::with_capacity(count);
    let mut descriptors = Vec::with_capacity(count);
    for rec in bytes[FEATURE_HEADER_LEN..expected].chunks_exact(FEATURE_RECORD_LEN) {
        let f = |at: usize| f32::from_le_bytes(rec[at..at + 4].try_into().unwrap());
        keypoints.push(Keypoint::new(f(0), f(4), f(8), f(12)));
        descriptors.push(Descriptor(rec[16..].try_into().unwrap()));
    }
    Ok(FeatureSet {
        image_id: image_id_from_path(path),
        keypoints,
        descriptors,
    })
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| FeatureIoError::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn save_features(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(fs)?;
    fs::write(path, bytes).map_err(|e| FeatureIoError::io(path, e))
}

/// Number of points kept by [`select_top_scale`] for `n` inputs.
pub fn top_scale_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // Absorb representation error such as 0.7 * 10 = 7.000000000000001.
    let exact = fraction * n as f64;
    let count = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    count.clamp(1, n)
}

/// A feature subset together with the original index of every kept point.
#[derive(Debug, Clone, PartialEq)]
pub struct TopScaleSubset {
    pub features: FeatureSet,
    pub original_indices: Vec<usize>,
}

/// Keep the `ceil(fraction * n)` largest-scale points, ties to the smaller
/// index, preserving original relative order.
pub fn select_top_scale(fs: &FeatureSet, fraction: f64) -> Result<TopScaleSubset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FeatureIoError::Invalid(format!(
            "top-scale fraction {fraction} outside (0, 1]"
        )));
    }
    let keep = top_scale_count(fs.len(), fraction);
    let mut order: Vec<usize> = (0..fs.len()).collect();
    order.sort_by(|&a, &b| {
        fs.keypoints[b]
            .scale
            .total_cmp(&fs.keypoints[a].scale)
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order.sort_unstable();
    Ok(TopScaleSubset {
        features: fs.subset(&order),
        original_indices: order,
    })
}

/// Ordered list of images; the position of an entry is its global index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if e.image_id.is_empty() || e.image_id.chars().any(char::is_whitespace) {
                return Err(FeatureIoError::Invalid(format!(
                    "image id {:?} is empty or contains whitespace",
                    e.image_id
                )));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(FeatureIoError::Invalid(format!(
                    "duplicate image id {:?}",
                    e.image_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_id(&self, index: usize) -> &str {
        &self.entries[index].image_id
    }

    /// Relative paths are resolved against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FeatureIoError::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (id, file) = line.split_once('\t').ok_or_else(|| {
                FeatureIoError::malformed(path, lineno + 1, "expected `image_id<TAB>path`")
            })?;
            let file = PathBuf::from(file.trim());
            let file = if file.is_relative() {
                base.join(file)
            } else {
                file
            };
            entries.push(ManifestEntry {
                image_id: id.trim().to_string(),
                path: file,
            });
        }
        Self::new(entries).map_err(|e| FeatureIoError::malformed(path, 0, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.image_id);
            out.push('\t');
            out.push_str(&e.path.to_string_lossy());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| FeatureIoError::io(path, e))
    }
}

/// One verified correspondence; `distance` is the squared Euclidean
/// descriptor distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub query_index: u32,
    pub train_index: u32,
    pub distance: f32,
}

impl MatchRecord {
    pub fn new(query_index: u32, train_index: u32, distance: f32) -> Self {
        Self {
            query_index,
            train_index,
            distance,
        }
    }
}

/// Render a match file. `f32` `Display` is the shortest round-trippable form.
pub fn format_matches(image_pair: (&str, &str), matches: &[MatchRecord]) -> String {
    use std::fmt::Write as _;
    let mut out = String::with_capacity(24 * (matches.len() + 1));
    let _ = writeln!(out, "# {} {} {}", image_pair.0, image_pair.1, matches.len());
    for m in matches {
        let _ = writeln!(out, "{} {} {}", m.query_index, m.train_index, m.distance);
    }
    out
}

pub fn save_matches(
    image_pair: (&str, &str),
    matches: &[MatchRecord],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| FeatureIoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(format_matches(image_pair, matches).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| FeatureIoError::io(path, e))
}

pub fn load_matches(path: impl AsRef<Path>) -> Result<((String, String), Vec<MatchRecord>)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| FeatureIoError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| FeatureIoError::io(path, e))?,
        None => return Err(FeatureIoError::malformed(path, 1, "missing header")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (pair, count) = match fields.as_slice() {
        ["#", i, j, count] => {
            let count: usize = count
                .parse()
                .map_err(|_| FeatureIoError::malformed(path, 1, "bad match count"))?;
            ((i.to_string(), j.to_string()), count)
        }
        _ => return Err(FeatureIoError::malformed(path, 1, "expected `# I J count`")),
    };

    let mut matches = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| FeatureIoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut field = |name: &str| {
            it.next()
                .ok_or_else(|| FeatureIoError::malformed(path, lineno, format!("missing {name}")))
        };
        let q = field("query")?;
        let t = field("train")?;
        let d = field("distance")?;
        if it.next().is_some() {
            return Err(FeatureIoError::malformed(path, lineno, "trailing fields"));
        }
        let bad = |name: &str| FeatureIoError::malformed(path, lineno, format!("bad {name}"));
        let record = MatchRecord {
            query_index: q.parse().map_err(|_| bad("query index"))?,
            train_index: t.parse().map_err(|_| bad("train index"))?,
            distance: d.parse().map_err(|_| bad("distance"))?,
        };
        if !(record.distance >= 0.0) {
            return Err(bad("distance"));
        }
        matches.push(record);
    }
    if matches.len() != count {
        return Err(FeatureIoError::malformed(
            path,
            1,
            format!("header declares {count} matches, found {}", matches.len()),
        ));
    }
    Ok((pair, matches))
}

/// Parse Lowe-style text keys: `count 128`, then per point
/// `row col scale orientation` followed by 128 integers, all
/// whitespace-separated.
pub fn parse_text_keys(text: &str, path: &Path) -> Result<FeatureSet> {
    let mut tokens = text.split_whitespace();
    let mut token_no = 0usize;
    let mut next = |what: &str| {
        token_no += 1;
        tokens.next().ok_or_else(|| {
            FeatureIoError::malformed(path, 0, format!("unexpected end of input reading {what}"))
        })
    };
    let count: usize = next("count")?
        .parse()
        .map_err(|_| FeatureIoError::malformed(path, 1, "bad keypoint count"))?;
    let dim: usize = next("dimension")?
        .parse()
        .map_err(|_| FeatureIoError::malformed(path, 1, "bad descriptor dimension"))?;
    if dim != DESCRIPTOR_LEN {
        return Err(FeatureIoError::malformed(
            path,
            1,
            format!("descriptor dimension {dim}, expected {DESCRIPTOR_LEN}"),
        ));
    }
    let mut keypoints = Vec::with_capacity(count);
    let mut descriptors = Vec::with_capacity(count);
    for p in 0..count {
        let mut real = |what: &str| -> Result<f32> {
            next(what)?
                .parse()
                .map_err(|_| FeatureIoError::malformed(path, 0, format!("point {p}: bad {what}")))
        };
        let row = real("row")?;
        let col = real("col")?;
        let scale = real("scale")?;
        let orientation = real("orientation")?;
        keypoints.push(Keypoint::new(col, row, scale, orientation));
        let mut desc = [0u8; DESCRIPTOR_LEN];
        for (c, slot) in desc.iter_mut().enumerate() {
            *slot = next("descriptor")?.parse().map_err(|_| {
                FeatureIoError::malformed(path, 0, format!("point {p}: bad component {c}"))
            })?;
        }
        descriptors.push(Descriptor(desc));
    }
    let fs = FeatureSet {
        image_id: image_id_from_path(path),
        keypoints,
        descriptors,
    };
    fs.validate()?;
    Ok(fs)
}

/// Convert a text key file to the binary feature format.
pub fn convert_text_keys(input: impl AsRef<Path>, output: impl AsRef<Path>) -> Result<usize> {
    let input = input.as_ref();
    let text = fs::read_to_string(input).map_err(|e| FeatureIoError::io(input, e))?;
    let fs = parse_text_keys(&text, input)?;
    save_features(&fs, output)?;
    Ok(fs.len())
}
