//! Synthetic stand-in backbone features for two modalities.
//!
//! Each identity owns a latent code z in R^dz. A visual record is built from
//! frozen random mixing maps: the global column mixes all of z, local column i
//! mixes the i-th contiguous chunk of z. Textual records do the same through
//! their own maps and carry a variable number of local columns. The textual
//! global map shares a component with the visual one (a variance-preserving
//! blend controlled by `cross_modal_alignment`), so matched pairs stay
//! recoverable from raw features alone. Each modality then applies its own
//! per-coordinate affine distortion (scale * x + shift) followed by isotropic
//! Gaussian noise. The distortions are drawn once per dataset, so the two
//! modalities present the same latent content under systematically different
//! distributions.
//!
//! Draw order is fixed and documented on [`generate_dataset`], and every
//! random stream is a seeded xoshiro256++ generator (see [`crate::prng`]), so
//! a configuration reproduces byte-identical datasets on any platform.
//!
//! # File format
//!
//! Datasets serialize little-endian as:
//!
//! ```text
//! magic "C3MD" | u32 version = 1 | u32 d_raw | u32 identity count |
//! u32 record count | u8 split tag |
//! per record: u32 identity | u8 modality | u16 m |
//!             (m + 1) * d_raw little-endian f32, column by column,
//!             global column first
//! ```
//!
//! Malformed input is rejected with the byte offset of the failure.

use std::collections::BTreeMap;
use std::path::Path;

use crate::prng::{self, Purpose};
use crate::{C3mError, Result};

const MAGIC: &[u8; 4] = b"C3MD";
const VERSION: u32 = 1;

/// Which modality a record belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Textual => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Textual),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Visual => Modality::Textual,
            Modality::Textual => Modality::Visual,
        }
    }
}

/// Which split a dataset file holds.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn tag(self) -> u8 {
        match self {
            SplitTag::Full => 0,
            SplitTag::Train => 1,
            SplitTag::Val => 2,
            SplitTag::Test => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SplitTag::Full),
            1 => Some(SplitTag::Train),
            2 => Some(SplitTag::Val),
            3 => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// Settings for [`generate_dataset`]. Scale and shift pairs are inclusive
/// low/high bounds of per-coordinate uniform draws.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub identities: u32,
    pub images_per_identity: u32,
    pub captions_per_identity: u32,
    pub d_raw: usize,
    pub d_z: usize,
    pub k: usize,
    pub n_range: (usize, usize),
    pub noise_scale: f64,
    pub cross_modal_alignment: f64,
    pub visual_scale: (f64, f64),
    pub visual_shift: (f64, f64),
    pub textual_scale: (f64, f64),
    pub textual_shift: (f64, f64),
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            identities: 100,
            images_per_identity: 5,
            captions_per_identity: 2,
            d_raw: 96,
            d_z: 32,
            k: 6,
            n_range: (3, 8),
            noise_scale: 0.35,
            cross_modal_alignment: 0.7,
            visual_scale: (0.8, 1.2),
            visual_shift: (-0.3, 0.3),
            textual_scale: (1.4, 2.2),
            textual_shift: (1.5, 3.0),
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 {
            return Err(C3mError::config("gen.identities must be >= 1 (got 0)"));
        }
        if self.images_per_identity == 0 {
            return Err(C3mError::config("gen.images_per_id must be >= 1 (got 0)"));
        }
        if self.captions_per_identity == 0 {
            return Err(C3mError::config("gen.captions_per_id must be >= 1 (got 0)"));
        }
        if self.d_raw == 0 {
            return Err(C3mError::config("gen.d_raw must be >= 1 (got 0)"));
        }
        if self.d_z == 0 {
            return Err(C3mError::config("gen.d_z must be >= 1 (got 0)"));
        }
        if self.k == 0 {
            return Err(C3mError::config("gen.k must be >= 1 (got 0)"));
        }
        if self.n_range.0 == 0 || self.n_range.0 > self.n_range.1 {
            return Err(C3mError::config(format!(
                "gen.n_min..gen.n_max must satisfy 1 <= min <= max (got {}..{})",
                self.n_range.0, self.n_range.1
            )));
        }
        if self.k > self.d_z {
            return Err(C3mError::config(format!(
                "gen.k ({}) must not exceed gen.d_z ({})",
                self.k, self.d_z
            )));
        }
        if self.n_range.1 > self.d_z {
            return Err(C3mError::config(format!(
                "gen.n_max ({}) must not exceed gen.d_z ({})",
                self.n_range.1, self.d_z
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(C3mError::config(format!(
                "gen.noise must be finite and >= 0 (got {})",
                self.noise_scale
            )));
        }
        if !(self.cross_modal_alignment.is_finite()
            && (0.0..=1.0).contains(&self.cross_modal_alignment))
        {
            return Err(C3mError::config(format!(
                "gen.alignment must lie in [0, 1] (got {})",
                self.cross_modal_alignment
            )));
        }
        for (key, (lo, hi)) in [
            ("gen.visual_scale", self.visual_scale),
            ("gen.visual_shift", self.visual_shift),
            ("gen.textual_scale", self.textual_scale),
            ("gen.textual_shift", self.textual_shift),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(C3mError::config(format!("{key} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.records_per_identity().checked_mul(self.identities as usize).is_none() {
            return Err(C3mError::config("gen record count overflows"));
        }
        Ok(())
    }

    fn records_per_identity(&self) -> usize {
        (self.images_per_identity + self.captions_per_identity) as usize
    }
}

/// One backbone output: a global column plus m local columns, stored
/// column-major (each column is d_raw contiguous f32 values, global first).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub identity: u32,
    pub modality: Modality,
    pub m: u16,
    pub raw: Vec<f32>,
}

impl SampleRecord {
    /// Column i of the raw matrix; 0 is the global column, 1..=m the locals.
    pub fn column(&self, d_raw: usize, i: usize) -> &[f32] {
        &self.raw[i * d_raw..(i + 1) * d_raw]
    }

    pub fn global(&self, d_raw: usize) -> &[f32] {
        self.column(d_raw, 0)
    }

    pub fn local(&self, d_raw: usize, i: usize) -> &[f32] {
        self.column(d_raw, 1 + i)
    }
}

/// Header facts about a dataset. `n_pairs` counts textual records: each
/// caption anchors one matched image-text pair.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub d_raw: u32,
    pub q: u32,
    pub split: SplitTag,
    pub n_pairs: u32,
}

/// A collection of records plus header facts.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    fn assemble(d_raw: u32, q: u32, split: SplitTag, records: Vec<SampleRecord>) -> Dataset {
        let n_pairs = records.iter().filter(|r| r.modality == Modality::Textual).count() as u32;
        Dataset { meta: DatasetMeta { d_raw, q, split, n_pairs }, records }
    }

    /// Sorted unique identities present in the records.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Record indices of one modality, in record order.
    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.modality == modality)
            .map(|(i, _)| i)
            .collect()
    }

    /// Record indices of one modality grouped by identity.
    pub fn by_identity(&self, modality: Modality) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.modality == modality {
                map.entry(r.identity).or_default().push(i);
            }
        }
        map
    }
}

/// Balanced contiguous partition: chunk i of `parts` over 0..len.
fn chunk_bounds(len: usize, parts: usize, i: usize) -> (usize, usize) {
    ((i * len) / parts, ((i + 1) * len) / parts)
}

struct MixingMaps {
    global: Vec<f64>,
    locals: Vec<Vec<f64>>,
}

fn draw_map(rng: &mut prng::Stream, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols.max(1) as f64).sqrt();
    (0..rows * cols).map(|_| prng::normal(rng) * scale).collect()
}

fn draw_modality_maps(rng: &mut prng::Stream, d_raw: usize, d_z: usize, parts: usize) -> MixingMaps {
    let global = draw_map(rng, d_raw, d_z);
    let locals = (0..parts)
        .map(|i| {
            let (lo, hi) = chunk_bounds(d_z, parts, i);
            draw_map(rng, d_raw, hi - lo)
        })
        .collect();
    MixingMaps { global, locals }
}

struct Distortion {
    scale: Vec<f64>,
    shift: Vec<f64>,
}

fn draw_distortion(
    rng: &mut prng::Stream,
    d_raw: usize,
    scale_range: (f64, f64),
    shift_range: (f64, f64),
) -> Distortion {
    let scale = (0..d_raw).map(|_| prng::uniform(rng, scale_range.0, scale_range.1)).collect();
    let shift = (0..d_raw).map(|_| prng::uniform(rng, shift_range.0, shift_range.1)).collect();
    Distortion { scale, shift }
}

fn apply_map(map: &[f64], rows: usize, z: &[f64]) -> Vec<f64> {
    let cols = z.len();
    let mut out = vec![0.0; rows];
    for (r, slot) in out.iter_mut().enumerate() {
        let row = &map[r * cols..(r + 1) * cols];
        *slot = row.iter().zip(z).map(|(a, b)| a * b).sum();
    }
    out
}

/// Generates the full dataset for a configuration.
///
/// Stream layout (all substreams of `cfg.seed`):
/// mixing maps are drawn first (visual global, visual locals 0..k, textual
/// global, textual locals 0..n_max), then the four distortion vectors (visual
/// scale, visual shift, textual scale, textual shift). Latent codes come from
/// their own stream, one per identity in identity order. Textual local counts
/// come from their own stream, one per caption in generation order. Noise has
/// its own stream, consumed per record column in generation order. Records
/// are emitted identity by identity, images before captions.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d_raw = cfg.d_raw;
    let d_z = cfg.d_z;
    let n_max = cfg.n_range.1;

    let mut map_rng = prng::stream(cfg.seed, Purpose::MixingMaps, 0);
    let visual_maps = draw_modality_maps(&mut map_rng, d_raw, d_z, cfg.k);
    let mut textual_maps = draw_modality_maps(&mut map_rng, d_raw, d_z, n_max);
    // variance-preserving blend of the global maps keeps matched pairs
    // recoverable from raw features while the local structure stays distinct
    let a = cfg.cross_modal_alignment;
    let b = (1.0 - a * a).sqrt();
    for (tg, vg) in textual_maps.global.iter_mut().zip(&visual_maps.global) {
        *tg = a * vg + b * *tg;
    }

    let mut dist_rng = prng::stream(cfg.seed, Purpose::Distortion, 0);
    let visual_dist = draw_distortion(&mut dist_rng, d_raw, cfg.visual_scale, cfg.visual_shift);
    let textual_dist = draw_distortion(&mut dist_rng, d_raw, cfg.textual_scale, cfg.textual_shift);

    let mut latent_rng = prng::stream(cfg.seed, Purpose::LatentCodes, 0);
    let mut count_rng = prng::stream(cfg.seed, Purpose::LocalCounts, 0);
    let mut noise_rng = prng::stream(cfg.seed, Purpose::Noise, 0);

    let mut records =
        Vec::with_capacity(cfg.identities as usize * cfg.records_per_identity());

    for identity in 0..cfg.identities {
        let z: Vec<f64> = (0..d_z).map(|_| prng::normal(&mut latent_rng)).collect();

        for _ in 0..cfg.images_per_identity {
            let raw = render_record(
                &z,
                d_z,
                cfg.k,
                &visual_maps,
                &visual_dist,
                cfg.noise_scale,
                &mut noise_rng,
            );
            records.push(SampleRecord {
                identity,
                modality: Modality::Visual,
                m: cfg.k as u16,
                raw,
            });
        }

        for _ in 0..cfg.captions_per_identity {
            let span = cfg.n_range.1 - cfg.n_range.0 + 1;
            let n = cfg.n_range.0 + prng::below(&mut count_rng, span);
            let raw = render_record(
                &z,
                d_z,
                n,
                &textual_maps,
                &textual_dist,
                cfg.noise_scale,
                &mut noise_rng,
            );
            records.push(SampleRecord {
                identity,
                modality: Modality::Textual,
                m: n as u16,
                raw,
            });
        }
    }

    Ok(Dataset::assemble(d_raw as u32, cfg.identities, SplitTag::Full, records))
}

/// Renders one record: the global column mixes the full latent, local column
/// i mixes latent chunk i of the modality's fixed partition (records with
/// fewer locals simply use the leading chunks). Each column is distorted and
/// then perturbed with noise.
fn render_record(
    z: &[f64],
    d_z: usize,
    locals: usize,
    maps: &MixingMaps,
    dist: &Distortion,
    noise_scale: f64,
    noise_rng: &mut prng::Stream,
) -> Vec<f32> {
    let d_raw = dist.scale.len();
    let parts = maps.locals.len();
    let mut raw = Vec::with_capacity((locals + 1) * d_raw);
    let mut push_column = |mixed: Vec<f64>, rng: &mut prng::Stream| {
        for (c, &v) in mixed.iter().enumerate() {
            let value = dist.scale[c] * v + dist.shift[c] + noise_scale * prng::normal(rng);
            debug_assert!(value.is_finite());
            raw.push(value as f32);
        }
    };
    push_column(apply_map(&maps.global, d_raw, z), noise_rng);
    for i in 0..locals {
        let (lo, hi) = chunk_bounds(d_z, parts, i);
        let mixed = apply_map(&maps.locals[i], d_raw, &z[lo..hi]);
        push_column(mixed, noise_rng);
    }
    raw
}

/// Identity-disjoint split. Identities are shuffled by `seed`, then
/// floor(Q * f_val) go to val, floor(Q * f_test) to test, and the remainder
/// to train.
pub fn split_identities(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fe) = fractions;
    for (key, f) in [("split.train", ft), ("split.val", fv), ("split.test", fe)] {
        if !(f.is_finite() && (0.0..=1.0).contains(&f)) {
            return Err(C3mError::config(format!("{key} fraction {f} outside [0, 1]")));
        }
    }
    if ft + fv + fe > 1.0 + 1e-9 {
        return Err(C3mError::config(format!(
            "split fractions sum to {} > 1",
            ft + fv + fe
        )));
    }

    let mut ids = dataset.identities();
    let mut rng = prng::stream(seed, Purpose::Batching, u64::MAX);
    prng::shuffle(&mut rng, &mut ids);

    let q = ids.len();
    let n_val = (q as f64 * fv).floor() as usize;
    let n_test = (q as f64 * fe).floor() as usize;
    let val_ids: Vec<u32> = ids[..n_val].to_vec();
    let test_ids: Vec<u32> = ids[n_val..n_val + n_test].to_vec();

    let in_set = |list: &[u32], id: u32| list.contains(&id);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for r in &dataset.records {
        if in_set(&val_ids, r.identity) {
            val.push(r.clone());
        } else if in_set(&test_ids, r.identity) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    let d = dataset.meta.d_raw;
    let q = dataset.meta.q;
    Ok((
        Dataset::assemble(d, q, SplitTag::Train, train),
        Dataset::assemble(d, q, SplitTag::Val, val),
        Dataset::assemble(d, q, SplitTag::Test, test),
    ))
}

// ====== serialization ======

/// Serializes a dataset into the documented byte format.
pub fn dataset_to_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dataset.meta.d_raw.to_le_bytes());
    out.extend_from_slice(&dataset.meta.q.to_le_bytes());
    out.extend_from_slice(&(dataset.records.len() as u32).to_le_bytes());
    out.push(dataset.meta.split.tag());
    for r in &dataset.records {
        out.extend_from_slice(&r.identity.to_le_bytes());
        out.push(r.modality.tag());
        out.extend_from_slice(&r.m.to_le_bytes());
        for v in &r.raw {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(dataset))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(C3mError::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses a dataset from the documented byte format.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(C3mError::Format { offset: 0, msg: "bad magic, expected C3MD".into() });
    }
    let version_at = cur.pos as u64;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(C3mError::Format {
            offset: version_at,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let d_raw = cur.u32("d_raw")?;
    if d_raw == 0 {
        return Err(C3mError::Format { offset: (cur.pos - 4) as u64, msg: "d_raw is zero".into() });
    }
    let q = cur.u32("identity count")?;
    let count = cur.u32("record count")?;
    let split_at = cur.pos as u64;
    let split_tag = cur.u8("split tag")?;
    let Some(split) = SplitTag::from_tag(split_tag) else {
        return Err(C3mError::Format {
            offset: split_at,
            msg: format!("unknown split tag {split_tag}"),
        });
    };

    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let identity = cur.u32("record identity")?;
        let modality_at = cur.pos as u64;
        let modality_tag = cur.u8("record modality")?;
        let Some(modality) = Modality::from_tag(modality_tag) else {
            return Err(C3mError::Format {
                offset: modality_at,
                msg: format!("unknown modality tag {modality_tag}"),
            });
        };
        let m = cur.u16("record m")?;
        let values = (m as usize + 1) * d_raw as usize;
        let data = cur.take(values * 4, "record values")?;
        let mut raw = Vec::with_capacity(values);
        for c in data.chunks_exact(4) {
            raw.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        records.push(SampleRecord { identity, modality, m, raw });
    }
    if cur.pos != bytes.len() {
        return Err(C3mError::Format {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes after last record", bytes.len() - cur.pos),
        });
    }
    let mut ds = Dataset::assemble(d_raw, q, split, records);
    ds.meta.split = split;
    Ok(ds)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    dataset_from_bytes(&bytes)
}
