//! Corpus ingestion: manifests, pixel storage, and synthetic corpora.
//!
//! A corpus is a line-delimited UTF-8 manifest — one header record followed
//! by one record per example (id, relative path, class, optional timestamp) —
//! plus the pixel data the records point at. Pixels are raw little-endian f32
//! in `[0, 1]`, row-major HWC. Synthetic corpora generate their pixels
//! deterministically from a seed instead of reading files, which keeps tests
//! and desk-scale experiments free of corpus downloads.

use crate::error::{Error, Result};
use crate::math;
use crate::util::{derive_seed, derive_seed_indexed, fnv1a64};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

pub type ClassId = u32;

/// Unique example identifier, stable across stream snapshots and buffers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExampleId(pub String);

impl std::fmt::Display for ExampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    /// Total scalars per image.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// First line of every manifest.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Total class count of the corpus; every record's class must be below it.
    pub classes: u32,
}

/// One example record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: ExampleId,
    pub path: String,
    pub class: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

/// Parameters of a deterministically generated corpus. Each class is a
/// smooth low-frequency prototype field; examples are the prototype under a
/// per-example phase jitter, brightness factor, and pixel noise. Low-frequency
/// structure keeps masked patches predictable from visible ones, so
/// reconstruction training has real signal at desk scale.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub classes: u32,
    /// Examples in class `c`: `per_class + (c * 31) % (per_class_spread + 1)`.
    pub per_class: usize,
    #[serde(default)]
    pub per_class_spread: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Std-dev of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Brightness multiplier drawn from `[1 - jitter, 1 + jitter]`.
    #[serde(default = "default_brightness")]
    pub brightness_jitter: f64,
    /// Per-example phase perturbation (radians) of the prototype components.
    #[serde(default = "default_phase_jitter")]
    pub phase_jitter: f64,
    /// Attach pseudo-random upload timestamps (for time-incremental streams).
    #[serde(default)]
    pub timestamps: bool,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}
fn default_noise() -> f64 {
    0.15
}
fn default_brightness() -> f64 {
    0.2
}
fn default_phase_jitter() -> f64 {
    0.4
}

impl SyntheticSpec {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }

    pub fn class_count(&self, class: ClassId) -> usize {
        self.per_class + (class as usize * 31) % (self.per_class_spread + 1)
    }
}

const PROTO_COMPONENTS: usize = 3;

/// Per-class smooth field: a sum of low-frequency cosines, min-max scaled
/// into `[0.2, 0.8]` so noise and brightness stay inside `[0, 1]` after
/// clamping.
fn prototype(spec: &SyntheticSpec, class: ClassId) -> ClassPrototype {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, "proto", class as u64));
    let mut comps = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        let mut per_channel = Vec::with_capacity(PROTO_COMPONENTS);
        for _ in 0..PROTO_COMPONENTS {
            per_channel.push(ProtoComponent {
                amplitude: rng.gen_range(0.4..1.0),
                freq_y: rng.gen_range(1..=3) as f64,
                freq_x: rng.gen_range(1..=3) as f64,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
        comps.push(per_channel);
    }
    ClassPrototype { components: comps }
}

#[derive(Clone, Debug)]
struct ProtoComponent {
    amplitude: f64,
    freq_y: f64,
    freq_x: f64,
    phase: f64,
}

#[derive(Clone, Debug)]
struct ClassPrototype {
    /// One component stack per channel.
    components: Vec<Vec<ProtoComponent>>,
}

impl ClassPrototype {
    fn render(&self, shape: ImageShape, phase_shift: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; shape.len()];
        for (ch, comps) in self.components.iter().enumerate() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut raw = vec![0.0; shape.height * shape.width];
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let mut v = 0.0;
                    for (k, c) in comps.iter().enumerate() {
                        let arg = std::f64::consts::TAU
                            * (c.freq_y * y as f64 / shape.height as f64
                                + c.freq_x * x as f64 / shape.width as f64)
                            + c.phase
                            + phase_shift[k % phase_shift.len()];
                        v += c.amplitude * arg.cos();
                    }
                    raw[y * shape.width + x] = v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let span = (hi - lo).max(1e-12);
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let v = (raw[y * shape.width + x] - lo) / span;
                    out[(y * shape.width + x) * shape.channels + ch] = 0.2 + 0.6 * v;
                }
            }
        }
        out
    }
}

/// Standard normal via Box-Muller; avoids a distribution dependency.
fn normal01(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn synth_pixels(spec: &SyntheticSpec, protos: &[ClassPrototype], entry: &ManifestEntry) -> Vec<f64> {
    let shape = spec.shape();
    let id_hash = fnv1a64(entry.id.0.as_bytes());
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, "pixels", id_hash));
    let shifts: Vec<f64> = (0..PROTO_COMPONENTS)
        .map(|_| rng.gen_range(-spec.phase_jitter..=spec.phase_jitter))
        .collect();
    let brightness = 1.0 + rng.gen_range(-spec.brightness_jitter..=spec.brightness_jitter);
    let mut px = protos[entry.class as usize].render(shape, &shifts);
    for v in px.iter_mut() {
        *v = (*v * brightness + spec.noise * normal01(&mut rng)).clamp(0.0, 1.0);
    }
    px
}

#[derive(Debug)]
enum PixelSource {
    /// Raw f32 files relative to the manifest directory.
    Files { root: PathBuf },
    /// Deterministic generation from a spec.
    Synthetic {
        spec: SyntheticSpec,
        prototypes: Vec<ClassPrototype>,
    },
    /// Caller-supplied pixels (tests).
    Memory { images: HashMap<ExampleId, Vec<f64>> },
}

/// An ingested corpus: example records plus lazily cached pixels.
#[derive(Debug)]
pub struct Corpus {
    shape: ImageShape,
    num_classes: u32,
    entries: Vec<ManifestEntry>,
    index: HashMap<ExampleId, usize>,
    source: PixelSource,
    cache: Vec<OnceLock<Vec<f64>>>,
}

impl Corpus {
    fn build(
        shape: ImageShape,
        num_classes: u32,
        entries: Vec<ManifestEntry>,
        source: PixelSource,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Ingestion("corpus has no examples".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.class >= num_classes {
                return Err(Error::Ingestion(format!(
                    "example {} has class {} outside 0..{num_classes}",
                    e.id, e.class
                )));
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Ingestion(format!("duplicate example id {}", e.id)));
            }
        }
        let cache = (0..entries.len()).map(|_| OnceLock::new()).collect();
        Ok(Self { shape, num_classes, entries, index, source, cache })
    }

    /// Read a manifest file; pixel paths resolve relative to its directory.
    pub fn from_manifest(manifest: &Path) -> Result<Self> {
        let file = std::fs::File::open(manifest)
            .map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", manifest.display())))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Ingestion("manifest is empty".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Ingestion(format!("bad manifest header: {e}")))?;
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Ingestion(format!("bad manifest record: {e}")))?;
            entries.push(entry);
        }
        let root = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::build(
            ImageShape::new(header.height, header.width, header.channels),
            header.classes,
            entries,
            PixelSource::Files { root },
        )
    }

    /// Fully in-memory deterministic corpus.
    pub fn synthetic(spec: SyntheticSpec) -> Result<Self> {
        let entries = synthetic_entries(&spec);
        let prototypes = (0..spec.classes).map(|c| prototype(&spec, c)).collect();
        let shape = spec.shape();
        let classes = spec.classes;
        Self::build(
            shape,
            classes,
            entries,
            PixelSource::Synthetic { spec, prototypes },
        )
    }

    /// Metadata-plus-pixels corpus supplied by the caller.
    pub fn from_memory(
        shape: ImageShape,
        num_classes: u32,
        examples: Vec<(ManifestEntry, Vec<f64>)>,
    ) -> Result<Self> {
        let mut images = HashMap::with_capacity(examples.len());
        let mut entries = Vec::with_capacity(examples.len());
        for (entry, px) in examples {
            if px.len() != shape.len() {
                return Err(Error::Ingestion(format!(
                    "example {} has {} pixels, expected {}",
                    entry.id,
                    px.len(),
                    shape.len()
                )));
            }
            images.insert(entry.id.clone(), px);
            entries.push(entry);
        }
        Self::build(shape, num_classes, entries, PixelSource::Memory { images })
    }

    /// Metadata-only corpus; pixel loads fail. Used where only stream
    /// arithmetic is exercised.
    pub fn metadata_only(
        shape: ImageShape,
        num_classes: u32,
        entries: Vec<ManifestEntry>,
    ) -> Result<Self> {
        Self::build(
            shape,
            num_classes,
            entries,
            PixelSource::Memory { images: HashMap::new() },
        )
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &ExampleId) -> Option<&ManifestEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn load_uncached(&self, idx: usize) -> Result<Vec<f64>> {
        let entry = &self.entries[idx];
        match &self.source {
            PixelSource::Files { root } => {
                let path = root.join(&entry.path);
                let bytes = std::fs::read(&path).map_err(|e| {
                    Error::Ingestion(format!("cannot read {}: {e}", path.display()))
                })?;
                read_raw_f32(&bytes, self.shape, &entry.id)
            }
            PixelSource::Synthetic { spec, prototypes } => {
                Ok(synth_pixels(spec, prototypes, entry))
            }
            PixelSource::Memory { images } => images
                .get(&entry.id)
                .cloned()
                .ok_or_else(|| Error::Ingestion(format!("no pixels for {}", entry.id))),
        }
    }

    /// Pixels for one example, cached after first load.
    pub fn pixels(&self, id: &ExampleId) -> Result<&[f64]> {
        let idx = *self
            .index
            .get(id)
            .ok_or_else(|| Error::Input(format!("unknown example id {id}")))?;
        let cell = &self.cache[idx];
        if cell.get().is_none() {
            let px = self.load_uncached(idx)?;
            let _ = cell.set(px);
        }
        Ok(cell.get().expect("cache populated above").as_slice())
    }

    /// Load a batch into one row-per-image matrix. Rows follow `ids` order;
    /// loads run data-parallel but land in fixed slots.
    pub fn load_batch(&self, ids: &[ExampleId]) -> Result<Array2<f64>> {
        let rows: Vec<Result<&[f64]>> = math::map_indexed(ids.len(), |i| self.pixels(&ids[i]));
        let mut out = Array2::zeros((ids.len(), self.shape.len()));
        for (i, row) in rows.into_iter().enumerate() {
            let px = row?;
            out.row_mut(i)
                .assign(&ndarray::ArrayView1::from_shape(px.len(), px).unwrap());
        }
        Ok(out)
    }
}

fn read_raw_f32(bytes: &[u8], shape: ImageShape, id: &ExampleId) -> Result<Vec<f64>> {
    if bytes.len() != shape.len() * 4 {
        return Err(Error::Ingestion(format!(
            "image {} has {} bytes, expected {} ({}x{}x{} f32)",
            id,
            bytes.len(),
            shape.len() * 4,
            shape.height,
            shape.width,
            shape.channels
        )));
    }
    let mut out = Vec::with_capacity(shape.len());
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !(-1e-6..=1.0 + 1e-6).contains(&v) {
            return Err(Error::Ingestion(format!(
                "image {id} has pixel {v} outside [0, 1]"
            )));
        }
        out.push(v.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn synthetic_entries(spec: &SyntheticSpec) -> Vec<ManifestEntry> {
    let mut entries = Vec::new();
    for class in 0..spec.classes {
        for i in 0..spec.class_count(class) {
            let id = ExampleId(format!("c{class:04}e{i:05}"));
            let timestamp = spec.timestamps.then(|| {
                let h = fnv1a64(id.0.as_bytes()) ^ derive_seed(spec.seed, "time");
                (h % 1_000_000_000) as f64 / 1e3
            });
            entries.push(ManifestEntry {
                path: format!("images/{}.bin", id.0),
                id,
                class,
                timestamp,
            });
        }
    }
    entries
}

/// Materialize a synthetic corpus to disk: `manifest.jsonl` plus raw f32
/// image files. Returns the manifest path.
pub fn write_synthetic_corpus(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    let corpus = Corpus::synthetic(spec.clone())?;
    std::fs::create_dir_all(dir.join("images"))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    let header = ManifestHeader {
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
        classes: spec.classes,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for entry in corpus.entries() {
        writeln!(out, "{}", serde_json::to_string(entry)?)?;
        let px = corpus.pixels(&entry.id)?;
        let mut bytes = Vec::with_capacity(px.len() * 4);
        for &v in px {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(dir.join(&entry.path), bytes)?;
    }
    out.flush()?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            per_class: 4,
            per_class_spread: 2,
            height: 8,
            width: 8,
            channels: 1,
            noise: 0.1,
            brightness_jitter: 0.2,
            phase_jitter: 0.3,
            timestamps: false,
            seed: 42,
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = Corpus::synthetic(tiny_spec()).unwrap();
        let b = Corpus::synthetic(tiny_spec()).unwrap();
        assert_eq!(a.len(), b.len());
        let id = a.entries()[5].id.clone();
        assert_eq!(a.pixels(&id).unwrap(), b.pixels(&id).unwrap());
    }

    #[test]
    fn synthetic_pixels_in_unit_range() {
        let c = Corpus::synthetic(tiny_spec()).unwrap();
        for e in c.entries() {
            let px = c.pixels(&e.id).unwrap();
            assert_eq!(px.len(), 64);
            assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn per_class_counts_follow_spread() {
        let c = Corpus::synthetic(tiny_spec()).unwrap();
        let mut counts = vec![0usize; 3];
        for e in c.entries() {
            counts[e.class as usize] += 1;
        }
        assert_eq!(counts, vec![4, 4 + 31 % 3, 4 + 62 % 3]);
    }

    #[test]
    fn manifest_roundtrip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let manifest = write_synthetic_corpus(dir.path(), &spec).unwrap();
        let disk = Corpus::from_manifest(&manifest).unwrap();
        let mem = Corpus::synthetic(spec).unwrap();
        assert_eq!(disk.len(), mem.len());
        for e in mem.entries() {
            let a = disk.pixels(&e.id).unwrap();
            let b = mem.pixels(&e.id).unwrap();
            // f32 storage rounds; compare at storage precision.
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let shape = ImageShape::new(2, 2, 1);
        let e = ManifestEntry {
            id: ExampleId("dup".into()),
            path: String::new(),
            class: 0,
            timestamp: None,
        };
        let err = Corpus::from_memory(
            shape,
            1,
            vec![(e.clone(), vec![0.0; 4]), (e, vec![0.0; 4])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    #[test]
    fn out_of_range_class_rejected() {
        let shape = ImageShape::new(2, 2, 1);
        let e = ManifestEntry {
            id: ExampleId("x".into()),
            path: String::new(),
            class: 5,
            timestamp: None,
        };
        let err = Corpus::from_memory(shape, 2, vec![(e, vec![0.0; 4])]).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }
}
