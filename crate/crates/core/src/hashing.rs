//! Seeded sign-test LSH: hyperplane family, short/long codes, Hamming
//! distance and the switch-point inner-product reduction.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::feature_io::{Descriptor, FeatureSet, DESCRIPTOR_LEN};

pub const DEFAULT_SHORT_BITS: u32 = 8;
pub const DEFAULT_LONG_BITS: u32 = 128;
pub const DEFAULT_TABLES: usize = 6;
pub const MAX_SHORT_BITS: u32 = 32;
pub const MAX_LONG_BITS: u32 = 128;

/// Number of halving rounds needed to reduce 128 partial products to one.
pub const REDUCTION_ROUNDS: u8 = 7;

const LONG_TABLE_TAG: u64 = u32::MAX as u64;

pub const CODE_CACHE_MAGIC: [u8; 4] = *b"CHCC";
pub const CODE_CACHE_VERSION: u32 = 1;
const CODE_CACHE_HEADER_LEN: usize = 44;

#[derive(Debug, Error)]
pub enum HashingError {
    #[error("invalid hash parameters: {0}")]
    InvalidParameters(String),
    #[error("vector length {got}, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("switch rounds {0} outside 0..=7")]
    SwitchRoundsOutOfRange(u8),
    #[error("centering requires at least one descriptor")]
    EmptyCentering,
    #[error("hash family centering has not been set")]
    CenteringNotSet,
    #[error("code length mismatch: {0} vs {1} bits")]
    CodeLengthMismatch(u32, u32),
    #[error("{path}: malformed code cache: {message}")]
    BadCache { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = HashingError> = std::result::Result<T, E>;

/// How many of the final halving rounds are replaced by sequential
/// accumulation. `0` is a full pairwise tree, `7` a plain running sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SwitchRounds(u8);

impl SwitchRounds {
    pub const DEFAULT: SwitchRounds = SwitchRounds(3);

    pub fn new(rounds: u8) -> Result<Self> {
        if rounds <= REDUCTION_ROUNDS {
            Ok(SwitchRounds(rounds))
        } else {
            Err(HashingError::SwitchRoundsOutOfRange(rounds))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = SwitchRounds> {
        (0..=REDUCTION_ROUNDS).map(SwitchRounds)
    }
}

impl Default for SwitchRounds {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Inner product of two 128-vectors: `7 - N_r` strided halving rounds
/// followed by a sequential sum over the remaining `2^N_r` partials.
#[inline]
pub fn dot128(a: &[f32; DESCRIPTOR_LEN], b: &[f32; DESCRIPTOR_LEN], rounds: SwitchRounds) -> f32 {
    let mut partial = [0f32; DESCRIPTOR_LEN];
    for ((p, &x), &y) in partial.iter_mut().zip(a).zip(b) {
        *p = x * y;
    }
    let mut width = DESCRIPTOR_LEN;
    for _ in 0..(REDUCTION_ROUNDS - rounds.0) {
        width /= 2;
        let (lo, hi) = partial.split_at_mut(width);
        for (l, h) in lo.iter_mut().zip(&hi[..width]) {
            *l += *h;
        }
    }
    let mut acc = partial[0];
    for &p in &partial[1..width] {
        acc += p;
    }
    acc
}

/// Checked form of [`dot128`] for arbitrary slices.
pub fn reduce_dot(a: &[f32], b: &[f32], switch_rounds: u8) -> Result<f32> {
    let rounds = SwitchRounds::new(switch_rounds)?;
    let a: &[f32; DESCRIPTOR_LEN] = a.try_into().map_err(|_| HashingError::BadLength {
        expected: DESCRIPTOR_LEN,
        got: a.len(),
    })?;
    let b: &[f32; DESCRIPTOR_LEN] = b.try_into().map_err(|_| HashingError::BadLength {
        expected: DESCRIPTOR_LEN,
        got: b.len(),
    })?;
    Ok(dot128(a, b, rounds))
}

/// Squared Euclidean distance as the self inner product of the difference.
/// Exact for byte descriptors: the largest sum, 128 * 255^2, is below 2^24.
#[inline]
pub fn squared_distance(a: &Descriptor, b: &Descriptor, rounds: SwitchRounds) -> f32 {
    let mut diff = [0f32; DESCRIPTOR_LEN];
    for ((d, &x), &y) in diff.iter_mut().zip(&a.0).zip(&b.0) {
        *d = x as f32 - y as f32;
    }
    dot128(&diff, &diff, rounds)
}

/// SplitMix64 finalizer, used to derive per-hyperplane seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hyperplane `(table, bit)` for `seed`: ChaCha8 seeded by a SplitMix64
/// hash of the triple, 128 standard normal draws (ziggurat, `rand_distr`).
fn hyperplane(seed: u64, table: u64, bit: u64) -> [f32; DESCRIPTOR_LEN] {
    let key = mix64(mix64(mix64(seed) ^ table) ^ bit);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut plane = [0f32; DESCRIPTOR_LEN];
    for v in plane.iter_mut() {
        let x: f64 = StandardNormal.sample(&mut rng);
        *v = x as f32;
    }
    plane
}

fn centering_checksum(centering: &[f32; DESCRIPTOR_LEN]) -> u64 {
    // FNV-1a over the bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in centering {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Parameters that identify a family; two code sets are comparable only
/// when their echoes are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FamilyEcho {
    pub short_bits: u32,
    pub long_bits: u32,
    pub tables: u32,
    pub seed: u64,
    pub centering_checksum: u64,
}

#[derive(Clone)]
pub struct HashFamily {
    short_bits: u32,
    long_bits: u32,
    tables: usize,
    seed: u64,
    short_planes: Vec<[f32; DESCRIPTOR_LEN]>,
    long_planes: Vec<[f32; DESCRIPTOR_LEN]>,
    centering: [f32; DESCRIPTOR_LEN],
    centered: bool,
    rounds: SwitchRounds,
}

impl fmt::Debug for HashFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HashFamily")
            .field("short_bits", &self.short_bits)
            .field("long_bits", &self.long_bits)
            .field("tables", &self.tables)
            .field("seed", &self.seed)
            .field("centered", &self.centered)
            .field("rounds", &self.rounds)
            .finish()
    }
}

impl PartialEq for HashFamily {
    fn eq(&self, other: &Self) -> bool {
        self.echo() == other.echo()
            && self.short_planes == other.short_planes
            && self.long_planes == other.long_planes
            && self.centering == other.centering
    }
}

/// Generate `tables * short_bits` short hyperplanes and `long_bits` long
/// ones. Centering starts at zero.
pub fn build_hash_family(
    seed: u64,
    short_bits: u32,
    long_bits: u32,
    tables: usize,
) -> Result<HashFamily> {
    if !(1..=MAX_SHORT_BITS).contains(&short_bits) {
        return Err(HashingError::InvalidParameters(format!(
            "short code bits m = {short_bits} outside 1..=32"
        )));
    }
    if long_bits <= short_bits || long_bits > MAX_LONG_BITS {
        return Err(HashingError::InvalidParameters(format!(
            "long code bits n = {long_bits} must satisfy m < n <= 128 (m = {short_bits})"
        )));
    }
    if tables == 0 {
        return Err(HashingError::InvalidParameters(
            "at least one table required".into(),
        ));
    }
    let short_planes = (0..tables as u64)
        .flat_map(|t| (0..short_bits as u64).map(move |j| hyperplane(seed, t, j)))
        .collect();
    let long_planes = (0..long_bits as u64)
        .map(|j| hyperplane(seed, LONG_TABLE_TAG, j))
        .collect();
    Ok(HashFamily {
        short_bits,
        long_bits,
        tables,
        seed,
        short_planes,
        long_planes,
        centering: [0.0; DESCRIPTOR_LEN],
        centered: false,
        rounds: SwitchRounds::DEFAULT,
    })
}

/// Exact componentwise mean: integer accumulation, one division.
pub fn descriptor_mean<'a>(
    descriptors: impl IntoIterator<Item = &'a Descriptor>,
) -> Result<[f32; DESCRIPTOR_LEN]> {
    let mut acc = CenteringAccumulator::default();
    for d in descriptors {
        acc.add(d);
    }
    acc.mean()
}

/// Streaming form of [`descriptor_mean`], for single-pass accumulation
/// over a dataset that does not fit in memory.
#[derive(Debug, Clone)]
pub struct CenteringAccumulator {
    sums: [u64; DESCRIPTOR_LEN],
    count: u64,
}

impl Default for CenteringAccumulator {
    fn default() -> Self {
        Self {
            sums: [0; DESCRIPTOR_LEN],
            count: 0,
        }
    }
}

impl CenteringAccumulator {
    pub fn add(&mut self, d: &Descriptor) {
        for (s, &v) in self.sums.iter_mut().zip(&d.0) {
            *s += v as u64;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &CenteringAccumulator) {
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Result<[f32; DESCRIPTOR_LEN]> {
        if self.count == 0 {
            return Err(HashingError::EmptyCentering);
        }
        let mut out = [0f32; DESCRIPTOR_LEN];
        for (o, &s) in out.iter_mut().zip(&self.sums) {
            *o = (s as f64 / self.count as f64) as f32;
        }
        Ok(out)
    }
}

/// Set the family's centering to the mean of `descriptors`.
pub fn set_centering<'a>(
    family: HashFamily,
    descriptors: impl IntoIterator<Item = &'a Descriptor>,
) -> Result<HashFamily> {
    let mean = descriptor_mean(descriptors)?;
    Ok(family.with_centering(mean))
}

impl HashFamily {
    pub fn with_centering(mut self, centering: [f32; DESCRIPTOR_LEN]) -> Self {
        self.centering = centering;
        self.centered = true;
        self
    }

    pub fn with_switch_rounds(mut self, rounds: SwitchRounds) -> Self {
        self.rounds = rounds;
        self
    }

    pub fn short_bits(&self) -> u32 {
        self.short_bits
    }

    pub fn long_bits(&self) -> u32 {
        self.long_bits
    }

    pub fn tables(&self) -> usize {
        self.tables
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn switch_rounds(&self) -> SwitchRounds {
        self.rounds
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn centering(&self) -> &[f32; DESCRIPTOR_LEN] {
        &self.centering
    }

    /// Short hyperplane for bit `bit` of table `table`.
    pub fn short_hyperplane(&self, table: usize, bit: usize) -> &[f32; DESCRIPTOR_LEN] {
        &self.short_planes[table * self.short_bits as usize + bit]
    }

    pub fn long_hyperplane(&self, bit: usize) -> &[f32; DESCRIPTOR_LEN] {
        &self.long_planes[bit]
    }

    pub fn echo(&self) -> FamilyEcho {
        FamilyEcho {
            short_bits: self.short_bits,
            long_bits: self.long_bits,
            tables: self.tables as u32,
            seed: self.seed,
            centering_checksum: centering_checksum(&self.centering),
        }
    }

    pub fn center(&self, d: &Descriptor) -> [f32; DESCRIPTOR_LEN] {
        let mut out = [0f32; DESCRIPTOR_LEN];
        for ((o, &v), &c) in out.iter_mut().zip(&d.0).zip(&self.centering) {
            *o = v as f32 - c;
        }
        out
    }

    fn require_centering(&self) -> Result<()> {
        if self.centered {
            Ok(())
        } else {
            Err(HashingError::CenteringNotSet)
        }
    }

    fn short_code_of(&self, centered: &[f32; DESCRIPTOR_LEN], table: usize) -> u32 {
        let m = self.short_bits as usize;
        let planes = &self.short_planes[table * m..(table + 1) * m];
        let mut code = 0u32;
        for (j, plane) in planes.iter().enumerate() {
            if dot128(centered, plane, self.rounds) > 0.0 {
                code |= 1 << j;
            }
        }
        code
    }

    fn long_code_of(&self, centered: &[f32; DESCRIPTOR_LEN]) -> LongCode {
        let mut code = LongCode::zero(self.long_bits);
        for (j, plane) in self.long_planes.iter().enumerate() {
            if dot128(centered, plane, self.rounds) > 0.0 {
                code.set(j);
            }
        }
        code
    }

    /// Compute short and long codes for every point of `fs`.
    pub fn encode(&self, fs: &FeatureSet) -> Result<PointCodes> {
        self.encode_descriptors(&fs.descriptors)
    }

    pub fn encode_descriptors(&self, descriptors: &[Descriptor]) -> Result<PointCodes> {
        self.require_centering()?;
        let mut short = Vec::with_capacity(descriptors.len() * self.tables);
        let mut long = Vec::with_capacity(descriptors.len());
        for d in descriptors {
            let c = self.center(d);
            short.extend((0..self.tables).map(|t| self.short_code_of(&c, t)));
            long.push(self.long_code_of(&c));
        }
        Ok(PointCodes {
            echo: self.echo(),
            short: ShortCodes {
                bits: self.short_bits,
                tables: self.tables,
                codes: short,
            },
            long,
        })
    }
}

/// Per point, one `bits`-wide code for each of `tables` tables
/// (point-major layout).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShortCodes {
    bits: u32,
    tables: usize,
    codes: Vec<u32>,
}

impl ShortCodes {
    pub fn from_raw(bits: u32, tables: usize, codes: Vec<u32>) -> Result<Self> {
        if !(1..=MAX_SHORT_BITS).contains(&bits) || tables == 0 {
            return Err(HashingError::InvalidParameters(format!(
                "short codes with {bits} bits and {tables} tables"
            )));
        }
        if codes.len() % tables != 0 {
            return Err(HashingError::InvalidParameters(format!(
                "{} codes is not a multiple of {tables} tables",
                codes.len()
            )));
        }
        if let Some(c) = codes.iter().find(|&&c| bits < 32 && c >> bits != 0) {
            return Err(HashingError::InvalidParameters(format!(
                "code {c:#x} exceeds {bits} bits"
            )));
        }
        Ok(Self {
            bits,
            tables,
            codes,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn tables(&self) -> usize {
        self.tables
    }

    pub fn point_count(&self) -> usize {
        self.codes.len() / self.tables
    }

    /// The `tables` codes of point `p`.
    pub fn point(&self, p: usize) -> &[u32] {
        &self.codes[p * self.tables..(p + 1) * self.tables]
    }

    pub fn code(&self, p: usize, table: usize) -> u32 {
        self.codes[p * self.tables + table]
    }

    pub fn subset(&self, indices: &[usize]) -> ShortCodes {
        let mut codes = Vec::with_capacity(indices.len() * self.tables);
        for &i in indices {
            codes.extend_from_slice(self.point(i));
        }
        ShortCodes {
            bits: self.bits,
            tables: self.tables,
            codes,
        }
    }
}

/// Up to 128 code bits packed little-endian into two words; bits at or
/// beyond `len` are zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct LongCode {
    words: [u64; 2],
    len: u8,
}

impl fmt::Debug for LongCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "LongCode({}b: {:016x}{:016x})",
            self.len, self.words[1], self.words[0]
        )
    }
}

impl LongCode {
    pub fn zero(len: u32) -> Self {
        assert!(len <= MAX_LONG_BITS);
        LongCode {
            words: [0; 2],
            len: len as u8,
        }
    }

    /// Build from raw words, masking any bits at or beyond `len`.
    pub fn from_words(words: [u64; 2], len: u32) -> Self {
        let mut code = LongCode {
            words,
            len: len as u8,
        };
        code.mask();
        code
    }

    fn mask(&mut self) {
        let len = self.len as u32;
        for (w, word) in self.words.iter_mut().enumerate() {
            let lo = 64 * w as u32;
            if len <= lo {
                *word = 0;
            } else if len < lo + 64 {
                *word &= (1u64 << (len - lo)) - 1;
            }
        }
    }

    pub fn len(&self) -> u32 {
        self.len as u32
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> [u64; 2] {
        self.words
    }

    pub fn set(&mut self, bit: usize) {
        debug_assert!(bit < self.len as usize);
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn bit(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn complement(&self) -> LongCode {
        LongCode::from_words([!self.words[0], !self.words[1]], self.len as u32)
    }

    /// Popcount of the XOR; caller guarantees equal lengths.
    #[inline]
    pub fn distance(&self, other: &LongCode) -> u32 {
        (self.words[0] ^ other.words[0]).count_ones() + (self.words[1] ^ other.words[1]).count_ones()
    }
}

pub fn hamming(a: &LongCode, b: &LongCode) -> Result<u32> {
    if a.len != b.len {
        return Err(HashingError::CodeLengthMismatch(a.len(), b.len()));
    }
    Ok(a.distance(b))
}

/// Short and long codes for one image, tagged with the family that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCodes {
    pub echo: FamilyEcho,
    pub short: ShortCodes,
    pub long: Vec<LongCode>,
}

impl PointCodes {
    pub fn len(&self) -> usize {
        self.long.len()
    }

    pub fn is_empty(&self) -> bool {
        self.long.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> PointCodes {
        PointCodes {
            echo: self.echo,
            short: self.short.subset(indices),
            long: indices.iter().map(|&i| self.long[i]).collect(),
        }
    }
}

/// Free-function forms mirroring the per-step names.
pub fn short_codes(family: &HashFamily, fs: &FeatureSet) -> Result<ShortCodes> {
    family.require_centering()?;
    let mut codes = Vec::with_capacity(fs.len() * family.tables);
    for d in &fs.descriptors {
        let c = family.center(d);
        codes.extend((0..family.tables).map(|t| family.short_code_of(&c, t)));
    }
    Ok(ShortCodes {
        bits: family.short_bits,
        tables: family.tables,
        codes,
    })
}

pub fn long_codes(family: &HashFamily, fs: &FeatureSet) -> Result<Vec<LongCode>> {
    family.require_centering()?;
    Ok(fs
        .descriptors
        .iter()
        .map(|d| family.long_code_of(&family.center(d)))
        .collect())
}

fn cache_err(path: &Path, message: impl Into<String>) -> HashingError {
    HashingError::BadCache {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Serialize codes to the cache format:
/// `"CHCC" | version | m | n | L | seed: u64 | centering checksum: u64 |
/// count | reserved`, then per point `L x u32` short codes and two `u64`
/// long-code words, all little-endian.
pub fn encode_code_cache(codes: &PointCodes) -> Vec<u8> {
    let e = &codes.echo;
    let per_point = e.tables as usize * 4 + 16;
    let mut buf = Vec::with_capacity(CODE_CACHE_HEADER_LEN + codes.len() * per_point);
    buf.extend_from_slice(&CODE_CACHE_MAGIC);
    for v in [CODE_CACHE_VERSION, e.short_bits, e.long_bits, e.tables] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&e.seed.to_le_bytes());
    buf.extend_from_slice(&e.centering_checksum.to_le_bytes());
    buf.extend_from_slice(&(codes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for p in 0..codes.len() {
        for &c in codes.short.point(p) {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for w in codes.long[p].words() {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    buf
}

/// Parse a cache. Returns `Ok(None)` when the echoed parameters differ
/// from `expected` (the cache is stale), or when the point count differs
/// from `expected_points`.
pub fn decode_code_cache(
    bytes: &[u8],
    expected: &FamilyEcho,
    expected_points: Option<usize>,
    path: &Path,
) -> Result<Option<PointCodes>> {
    if bytes.len() < CODE_CACHE_HEADER_LEN {
        return Err(cache_err(path, format!("truncated header at byte {}", bytes.len())));
    }
    if bytes[..4] != CODE_CACHE_MAGIC {
        return Err(cache_err(path, "bad magic"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    if u32_at(4) != CODE_CACHE_VERSION {
        return Ok(None);
    }
    let echo = FamilyEcho {
        short_bits: u32_at(8),
        long_bits: u32_at(12),
        tables: u32_at(16),
        seed: u64_at(20),
        centering_checksum: u64_at(28),
    };
    let count = u32_at(36) as usize;
    if &echo != expected || expected_points.is_some_and(|n| n != count) {
        return Ok(None);
    }
    let tables = echo.tables as usize;
    let per_point = tables * 4 + 16;
    let expected_len = CODE_CACHE_HEADER_LEN + count * per_point;
    if bytes.len() != expected_len {
        return Err(cache_err(
            path,
            format!("length {} bytes, expected {expected_len}", bytes.len()),
        ));
    }
    let mut short = Vec::with_capacity(count * tables);
    let mut long = Vec::with_capacity(count);
    for rec in bytes[CODE_CACHE_HEADER_LEN..].chunks_exact(per_point) {
        for t in 0..tables {
            short.push(u32::from_le_bytes(rec[4 * t..4 * t + 4].try_into().unwrap()));
        }
        let w = 4 * tables;
        let lo = u64::from_le_bytes(rec[w..w + 8].try_into().unwrap());
        let hi = u64::from_le_bytes(rec[w + 8..w + 16].try_into().unwrap());
        long.push(LongCode::from_words([lo, hi], echo.long_bits));
    }
    let short = ShortCodes::from_raw(echo.short_bits, tables, short)
        .map_err(|e| cache_err(path, e.to_string()))?;
    Ok(Some(PointCodes { echo, short, long }))
}

pub fn write_code_cache(path: impl AsRef<Path>, codes: &PointCodes) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_code_cache(codes)).map_err(|source| HashingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a cache; a missing file counts as stale.
pub fn read_code_cache(
    path: impl AsRef<Path>,
    expected: &FamilyEcho,
    expected_points: Option<usize>,
) -> Result<Option<PointCodes>> {
    let path = path.as_ref();
    match fs::read(path) {
        Ok(bytes) => decode_code_cache(&bytes, expected, expected_points, path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(HashingError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}
