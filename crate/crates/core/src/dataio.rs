//! Dataset loading, long-tailed subset construction, class partitions, and
//! seeded batch iteration.
//!
//! On-disk record layout (CIFAR-binary compatible for 32x32): one unsigned
//! label byte followed by `H*W*3` bytes channel-planar (red plane, green
//! plane, blue plane, rows in raster order). In memory, pixels are held
//! interleaved HWC.

use crate::seeds::{self, domain};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Image geometry and label-space size; supplied by config, not the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Geometry {
    pub fn pixel_bytes(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn record_bytes(&self) -> usize {
        1 + self.pixel_bytes()
    }
}

/// One training image. `sample_id` is the stable 0-based index that keys the
/// loss table across epochs and restarts.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub sample_id: u32,
    pub label: u8,
    /// Interleaved HWC, RGB.
    pub pixels: Vec<u8>,
}

/// Class partition by training-set frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Many,
    Medium,
    Few,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Many => write!(f, "many"),
            Partition::Medium => write!(f, "medium"),
            Partition::Few => write!(f, "few"),
        }
    }
}

/// How classes are assigned to Many/Medium/Few.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    /// Rank split 34/33/33; only defined for 100 classes.
    CifarLt,
    /// Many: over 100 samples; Medium: 100 down to 20; Few: under 20.
    Threshold,
}

/// A dataset with per-class counts and partition tags. Labels are used only
/// for split construction and evaluation, never in the pretraining loss.
#[derive(Debug, Clone)]
pub struct LtDataset {
    pub geometry: Geometry,
    pub records: Vec<ImageRecord>,
    pub class_counts: Vec<usize>,
    pub imbalance_factor: f64,
    pub partition_map: Vec<Partition>,
}

impl LtDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn from_records(geometry: Geometry, records: Vec<ImageRecord>, imbalance: f64) -> Self {
        let mut class_counts = vec![0usize; geometry.classes];
        for r in &records {
            class_counts[r.label as usize] += 1;
        }
        let partition_map = threshold_partitions(&class_counts);
        LtDataset {
            geometry,
            records,
            class_counts,
            imbalance_factor: imbalance,
            partition_map,
        }
    }

    /// Mean color over every record, used as fill for geometric augmentation.
    pub fn mean_rgb(&self) -> [u8; 3] {
        let mut acc = [0u64; 3];
        let mut count = 0u64;
        for r in &self.records {
            for px in r.pixels.chunks_exact(3) {
                acc[0] += px[0] as u64;
                acc[1] += px[1] as u64;
                acc[2] += px[2] as u64;
                count += 1;
            }
        }
        if count == 0 {
            return [128; 3];
        }
        [
            (acc[0] / count) as u8,
            (acc[1] / count) as u8,
            (acc[2] / count) as u8,
        ]
    }

    pub fn set_partitions(&mut self, scheme: PartitionScheme) -> Result<()> {
        self.partition_map = partition_classes(&self.class_counts, scheme)?;
        Ok(())
    }

    /// Partition tag per sample (via its class).
    pub fn sample_partitions(&self) -> Vec<Partition> {
        self.records
            .iter()
            .map(|r| self.partition_map[r.label as usize])
            .collect()
    }

    /// Seeded epoch permutation chunked into batches; the last partial batch
    /// is kept.
    pub fn shuffled_batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Vec<Vec<u32>>> {
        if self.is_empty() {
            return Err(Error::Data("cannot iterate an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > self.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {} out of range for {} samples",
                batch_size,
                self.len()
            )));
        }
        let mut order: Vec<u32> = (0..self.len() as u32).collect();
        let mut rng = seeds::stream(seed, &[domain::SHUFFLE, epoch]);
        order.shuffle(&mut rng);
        Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
    }
}

/// Closed-form per-class counts: `n_c = round(n_max * IF^(-c / (C-1)))`.
pub fn long_tailed_counts(n_max: usize, classes: usize, imbalance: f64) -> Result<Vec<usize>> {
    if imbalance < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "imbalance factor must be >= 1, got {imbalance}"
        )));
    }
    if classes == 0 || n_max == 0 {
        return Err(Error::InvalidArgument("empty class space".into()));
    }
    let mut counts = Vec::with_capacity(classes);
    for c in 0..classes {
        let expo = if classes == 1 {
            0.0
        } else {
            -(c as f64) / (classes as f64 - 1.0)
        };
        let n_c = (n_max as f64 * imbalance.powf(expo)).round() as usize;
        if n_c == 0 {
            return Err(Error::Data(format!(
                "class {c} would keep zero samples (n_max={n_max}, imbalance={imbalance})"
            )));
        }
        counts.push(n_c);
    }
    Ok(counts)
}

/// Construct a long-tailed subset from a balanced dataset. Class `c` keeps
/// `round(n_max * IF^(-c/(C-1)))` samples drawn uniformly without
/// replacement under `seed`; classes stay in original label order. Records
/// not kept are returned as the held-out pool for probe/test splits.
///
/// `n_max_cap` limits the head-class count below the balanced per-class
/// count so head classes also leave held-out samples.
pub fn make_long_tailed(
    ds: &LtDataset,
    imbalance: f64,
    seed: u64,
    n_max_cap: Option<usize>,
) -> Result<(LtDataset, LtDataset)> {
    let classes = ds.geometry.classes;
    let per_class = ds.class_counts.first().copied().unwrap_or(0);
    if ds.class_counts.iter().any(|&c| c != per_class) || per_class == 0 {
        return Err(Error::Data(format!(
            "long-tailed construction needs a balanced input, got counts {:?}",
            ds.class_counts
        )));
    }
    let n_max = match n_max_cap {
        Some(cap) if cap == 0 || cap > per_class => {
            return Err(Error::InvalidArgument(format!(
                "n_max cap {cap} out of range (1..={per_class})"
            )));
        }
        Some(cap) => cap,
        None => per_class,
    };
    let counts = long_tailed_counts(n_max, classes, imbalance)?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, r) in ds.records.iter().enumerate() {
        by_class[r.label as usize].push(i);
    }

    let mut kept = Vec::new();
    let mut held = Vec::new();
    for (c, idxs) in by_class.iter().enumerate() {
        let mut pool = idxs.clone();
        let mut rng = seeds::stream(seed, &[domain::SUBSET, c as u64]);
        pool.shuffle(&mut rng);
        let (take, rest) = pool.split_at(counts[c]);
        let mut take = take.to_vec();
        let mut rest = rest.to_vec();
        take.sort_unstable();
        rest.sort_unstable();
        kept.extend(take);
        held.extend(rest);
    }

    let rebuild = |picked: &[usize]| -> Vec<ImageRecord> {
        picked
            .iter()
            .enumerate()
            .map(|(new_id, &old)| ImageRecord {
                sample_id: new_id as u32,
                label: ds.records[old].label,
                pixels: ds.records[old].pixels.clone(),
            })
            .collect()
    };

    let train = LtDataset::from_records(ds.geometry, rebuild(&kept), imbalance);
    let holdout = LtDataset::from_records(ds.geometry, rebuild(&held), 1.0);
    Ok((train, holdout))
}

fn threshold_partitions(class_counts: &[usize]) -> Vec<Partition> {
    class_counts
        .iter()
        .map(|&n| {
            if n > 100 {
                Partition::Many
            } else if n >= 20 {
                Partition::Medium
            } else {
                Partition::Few
            }
        })
        .collect()
}

/// Assign every class to exactly one partition.
pub fn partition_classes(class_counts: &[usize], scheme: PartitionScheme) -> Result<Vec<Partition>> {
    match scheme {
        PartitionScheme::Threshold => Ok(threshold_partitions(class_counts)),
        PartitionScheme::CifarLt => {
            if class_counts.len() != 100 {
                return Err(Error::InvalidArgument(format!(
                    "cifar-lt partition scheme needs 100 classes, got {}",
                    class_counts.len()
                )));
            }
            let mut order: Vec<usize> = (0..100).collect();
            order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
            let mut map = vec![Partition::Few; 100];
            for (rank, &c) in order.iter().enumerate() {
                map[c] = if rank < 34 {
                    Partition::Many
                } else if rank < 67 {
                    Partition::Medium
                } else {
                    Partition::Few
                };
            }
            Ok(map)
        }
    }
}

pub fn load_dataset(path: &Path, geometry: Geometry) -> Result<LtDataset> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    let stride = geometry.record_bytes();
    if raw.is_empty() || raw.len() % stride != 0 {
        return Err(Error::Data(format!(
            "{}: truncated file, {} bytes is not a multiple of record stride {}",
            path.display(),
            raw.len(),
            stride
        )));
    }
    let n = raw.len() / stride;
    let plane = geometry.height * geometry.width;
    let mut records = Vec::with_capacity(n);
    for (i, chunk) in raw.chunks_exact(stride).enumerate() {
        let label = chunk[0];
        if (label as usize) >= geometry.classes {
            return Err(Error::Data(format!(
                "{}: record {i} has label {label} >= {} classes",
                path.display(),
                geometry.classes
            )));
        }
        let planar = &chunk[1..];
        let mut pixels = vec![0u8; plane * 3];
        for p in 0..plane {
            pixels[p * 3] = planar[p];
            pixels[p * 3 + 1] = planar[plane + p];
            pixels[p * 3 + 2] = planar[2 * plane + p];
        }
        records.push(ImageRecord {
            sample_id: i as u32,
            label,
            pixels,
        });
    }
    Ok(LtDataset::from_records(geometry, records, 1.0))
}

pub fn save_dataset(path: &Path, ds: &LtDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let plane = ds.geometry.height * ds.geometry.width;
    let mut planar = vec![0u8; plane * 3];
    for r in &ds.records {
        w.write_all(&[r.label])?;
        for p in 0..plane {
            planar[p] = r.pixels[p * 3];
            planar[plane + p] = r.pixels[p * 3 + 1];
            planar[2 * plane + p] = r.pixels[p * 3 + 2];
        }
        w.write_all(&planar)?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar manifest written next to constructed datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub geometry: Geometry,
    pub samples: usize,
    pub class_counts: Vec<usize>,
    pub imbalance_factor: f64,
    pub partition_map: Vec<Partition>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn of(ds: &LtDataset, seed: u64) -> Self {
        DatasetManifest {
            geometry: ds.geometry,
            samples: ds.len(),
            class_counts: ds.class_counts.clone(),
            imbalance_factor: ds.imbalance_factor,
            partition_map: ds.partition_map.clone(),
            seed,
        }
    }
}

/// Balanced few-shot probe/test split drawn from a held-out pool. Shots are
/// capped at the per-class pool size; capped classes are reported so the
/// caller can log them. `shots = None` means full-shot: half of each class
/// pool goes to the probe set.
pub fn few_shot_split(
    pool: &LtDataset,
    shots: Option<usize>,
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>, Vec<(usize, usize)>)> {
    let classes = pool.geometry.classes;
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); classes];
    for r in &pool.records {
        by_class[r.label as usize].push(r.sample_id);
    }
    if let Some(empty) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::Eval(format!(
            "class {empty} is absent from the probe pool"
        )));
    }
    let mut probe = Vec::new();
    let mut test = Vec::new();
    let mut capped = Vec::new();
    for (c, ids) in by_class.iter().enumerate() {
        let mut ids = ids.clone();
        let mut rng = seeds::stream(seed, &[domain::PROBE, c as u64]);
        ids.shuffle(&mut rng);
        let want = shots.unwrap_or_else(|| (ids.len() / 2).max(1));
        let take = if want >= ids.len() {
            // Leave at least one held-out record per class for testing.
            capped.push((c, ids.len()));
            ids.len().saturating_sub(1).max(1)
        } else {
            want
        };
        probe.extend_from_slice(&ids[..take]);
        test.extend_from_slice(&ids[take..]);
    }
    if test.is_empty() {
        return Err(Error::Eval("probe split left no test samples".into()));
    }
    Ok((probe, test, capped))
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disk,
    Ring,
    Box,
    Frame,
    Diamond,
    Cross,
    Bar,
    Tri,
    TwoDisks,
    DotRing,
}

const SHAPE_KINDS: [ShapeKind; 10] = [
    ShapeKind::Disk,
    ShapeKind::Ring,
    ShapeKind::Box,
    ShapeKind::Frame,
    ShapeKind::Diamond,
    ShapeKind::Cross,
    ShapeKind::Bar,
    ShapeKind::Tri,
    ShapeKind::TwoDisks,
    ShapeKind::DotRing,
];

impl ShapeKind {
    /// Rotation-symmetric kinds may spin freely; the rest keep a limited
    /// tilt so families stay distinct (a spun box is a diamond).
    fn free_rotation(&self) -> bool {
        matches!(self, ShapeKind::Disk | ShapeKind::Ring | ShapeKind::DotRing)
    }
}

/// Signed distance in local (already rotated) coordinates; negative inside.
fn shape_sdf(kind: ShapeKind, px: f64, py: f64, r: f64) -> f64 {
    let (ax, ay) = (px.abs(), py.abs());
    let disk = |dx: f64, dy: f64, rr: f64| (dx * dx + dy * dy).sqrt() - rr;
    match kind {
        ShapeKind::Disk => disk(px, py, r),
        ShapeKind::Ring => ((px * px + py * py).sqrt() - 0.78 * r).abs() - 0.3 * r,
        ShapeKind::Box => ax.max(ay) - 0.78 * r,
        ShapeKind::Frame => (ax.max(ay) - 0.78 * r).abs() - 0.2 * r,
        ShapeKind::Diamond => (ax + ay) * std::f64::consts::FRAC_1_SQRT_2 - 0.8 * r,
        ShapeKind::Cross => {
            let horiz = (ax - r).max(ay - 0.32 * r);
            let vert = (ax - 0.32 * r).max(ay - r);
            horiz.min(vert)
        }
        ShapeKind::Bar => (ax - r).max(ay - 0.28 * r),
        ShapeKind::Tri => {
            let k = 3.0f64.sqrt();
            let mut x = ax - r;
            let mut y = py + r / k;
            if x + k * y > 0.0 {
                let (nx, ny) = ((x - k * y) / 2.0, (-k * x - y) / 2.0);
                x = nx;
                y = ny;
            }
            x -= x.clamp(-2.0 * r, 0.0);
            -(x * x + y * y).sqrt() * y.signum()
        }
        ShapeKind::TwoDisks => disk(ax - 0.55 * r, py, 0.42 * r),
        ShapeKind::DotRing => {
            let ring = ((px * px + py * py).sqrt() - 0.8 * r).abs() - 0.22 * r;
            ring.min(disk(px, py, 0.32 * r))
        }
    }
}

fn hsv_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

struct ShapeDraw {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    rot: f64,
    color: [f64; 3],
}

impl ShapeDraw {
    fn paint(&self, x: f64, y: f64, under: [f64; 3]) -> [f64; 3] {
        let (sin, cos) = self.rot.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let px = cos * dx + sin * dy;
        let py = -sin * dx + cos * dy;
        let d = shape_sdf(self.kind, px, py, self.r);
        // Soft 1px edge.
        let alpha = (0.5 - d).clamp(0.0, 1.0);
        let mut out = under;
        for ch in 0..3 {
            out[ch] = under[ch] * (1.0 - alpha) + self.color[ch] * alpha;
        }
        out
    }
}

/// Synthetic class-structured images. Each class is a *pair* of shape
/// families (adjacent kinds in a shared vocabulary) rendered apart from
/// each other at a random constellation pose, in muted random colors, over
/// a gradient background with a small distractor and pixel noise.
///
/// Class identity is the co-occurrence of the two kinds, not any single
/// local feature: a small crop usually shows one shape, so aligning the two
/// views of one image requires knowing which kinds accompany each other —
/// a class-level statistic the encoder can only pick up from data, and
/// picks up sooner for frequent classes.
pub fn synth_balanced(classes: usize, per_class: usize, h: usize, w: usize, seed: u64) -> LtDataset {
    let geometry = Geometry {
        height: h,
        width: w,
        classes,
    };
    let wf = w as f64;
    let hf = h as f64;
    let nk = SHAPE_KINDS.len();
    let mut records = Vec::with_capacity(classes * per_class);
    let mut sample_id = 0u32;
    for c in 0..classes {
        // Adjacent-pair vocabulary: every kind appears in two classes.
        let kind_a = SHAPE_KINDS[c % nk];
        let kind_b = SHAPE_KINDS[(c + 1 + (c / nk)) % nk];
        for i in 0..per_class {
            let mut rng = seeds::stream(seed, &[domain::SYNTH_SAMPLE, c as u64, i as u64]);
            // Muted palette throughout: color jitter then carries almost no
            // stable identity, so view alignment has to rely on shape.
            let bg_v: f64 = rng.gen_range(0.3..0.65);
            let bg_a = hsv_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.15), bg_v);
            let bg_b = hsv_rgb(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..0.15),
                (bg_v + rng.gen_range(-0.15..0.15)).clamp(0.2, 0.8),
            );
            let grad_ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (gx, gy) = (grad_ang.cos() / wf, grad_ang.sin() / hf);

            // Constellation: the two shapes sit at opposite ends of a
            // randomly oriented axis, so most small crops see one of them.
            let ccx = rng.gen_range(0.38..0.62) * wf;
            let ccy = rng.gen_range(0.38..0.62) * hf;
            let axis: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = rng.gen_range(0.24..0.32) * wf;
            let place = |kind: ShapeKind, side: f64, rng: &mut rand_chacha::ChaCha8Rng| {
                let max_rot = if kind.free_rotation() {
                    std::f64::consts::PI
                } else {
                    0.35
                };
                let v = if bg_v > 0.45 {
                    rng.gen_range(0.05..0.3)
                } else {
                    rng.gen_range(0.75..1.0)
                };
                ShapeDraw {
                    kind,
                    cx: ccx + side * dist * axis.cos() + rng.gen_range(-1.5..1.5),
                    cy: ccy + side * dist * axis.sin() + rng.gen_range(-1.5..1.5),
                    r: rng.gen_range(0.13..0.20) * wf,
                    rot: rng.gen_range(-max_rot..max_rot),
                    color: hsv_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.3), v),
                }
            };
            let obj_a = place(kind_a, -1.0, &mut rng);
            let obj_b = place(kind_b, 1.0, &mut rng);
            let distractor = ShapeDraw {
                kind: SHAPE_KINDS[rng.gen_range(0..nk)],
                cx: rng.gen_range(0.0..wf),
                cy: rng.gen_range(0.0..hf),
                r: rng.gen_range(0.05..0.1) * wf,
                rot: rng.gen_range(0.0..std::f64::consts::PI),
                color: hsv_rgb(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..0.3),
                    rng.gen_range(0.2..0.9),
                ),
            };

            let mut pixels = vec![0u8; h * w * 3];
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 * gx + y as f64 * gy) + 1.0) / 2.0;
                    let t = t.clamp(0.0, 1.0);
                    let mut v = [
                        bg_a[0] * (1.0 - t) + bg_b[0] * t,
                        bg_a[1] * (1.0 - t) + bg_b[1] * t,
                        bg_a[2] * (1.0 - t) + bg_b[2] * t,
                    ];
                    v = distractor.paint(x as f64, y as f64, v);
                    v = obj_a.paint(x as f64, y as f64, v);
                    v = obj_b.paint(x as f64, y as f64, v);
                    for ch in 0..3 {
                        let noise = rng.gen_range(-7.0..7.0);
                        pixels[(y * w + x) * 3 + ch] = (v[ch] + noise).clamp(0.0, 255.0) as u8;
                    }
                }
            }
            records.push(ImageRecord {
                sample_id,
                label: c as u8,
                pixels,
            });
            sample_id += 1;
        }
    }
    LtDataset::from_records(geometry, records, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_ds(classes: usize, per_class: usize) -> LtDataset {
        synth_balanced(classes, per_class, 4, 4, 99)
    }

    #[test]
    fn round_trip_preserves_pixels_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = tiny_ds(2, 3);
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path, ds.geometry).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn two_record_2x2_file_is_26_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let geometry = Geometry {
            height: 2,
            width: 2,
            classes: 2,
        };
        let records = (0..2)
            .map(|i| ImageRecord {
                sample_id: i,
                label: i as u8,
                pixels: (0..12).map(|p| (i as u8) * 100 + p).collect(),
            })
            .collect();
        let ds = LtDataset::from_records(geometry, records, 1.0);
        save_dataset(&path, &ds).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 26);
        let back = load_dataset(&path, geometry).unwrap();
        assert_eq!(back.records[1].pixels, ds.records[1].pixels);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 25]).unwrap();
        let geometry = Geometry {
            height: 2,
            width: 2,
            classes: 2,
        };
        let err = load_dataset(&path, geometry).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = vec![0u8; 13];
        bytes[0] = 5;
        std::fs::write(&path, bytes).unwrap();
        let geometry = Geometry {
            height: 2,
            width: 2,
            classes: 2,
        };
        assert!(load_dataset(&path, geometry).is_err());
    }

    #[test]
    fn cifar_stride_record_count() {
        // 32x32 RGB records have a 3073-byte stride.
        let geometry = Geometry {
            height: 32,
            width: 32,
            classes: 10,
        };
        assert_eq!(geometry.record_bytes(), 3073);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        std::fs::write(&path, vec![1u8; 3073 * 4]).unwrap();
        let ds = load_dataset(&path, geometry).unwrap();
        assert_eq!(ds.len(), 4);
    }

    #[test]
    fn closed_form_counts_c10() {
        let counts = long_tailed_counts(100, 10, 10.0).unwrap();
        assert_eq!(counts, vec![100, 77, 60, 46, 36, 28, 22, 17, 13, 10]);
    }

    #[test]
    fn closed_form_counts_cifar_endpoints() {
        let counts = long_tailed_counts(500, 100, 100.0).unwrap();
        assert_eq!(counts[0], 500);
        assert_eq!(counts[99], 5);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn imbalance_one_keeps_everything() {
        let ds = tiny_ds(3, 5);
        let (lt, holdout) = make_long_tailed(&ds, 1.0, 7, None).unwrap();
        assert_eq!(lt.len(), ds.len());
        assert_eq!(holdout.len(), 0);
        assert_eq!(lt.class_counts, vec![5, 5, 5]);
    }

    #[test]
    fn imbalance_below_one_rejected() {
        let ds = tiny_ds(3, 5);
        assert!(make_long_tailed(&ds, 0.5, 7, None).is_err());
    }

    #[test]
    fn lt_construction_is_seed_deterministic() {
        let ds = tiny_ds(4, 20);
        let (a, _) = make_long_tailed(&ds, 8.0, 5, None).unwrap();
        let (b, _) = make_long_tailed(&ds, 8.0, 5, None).unwrap();
        let ap: Vec<_> = a.records.iter().map(|r| r.pixels.clone()).collect();
        let bp: Vec<_> = b.records.iter().map(|r| r.pixels.clone()).collect();
        assert_eq!(ap, bp);
        let (c, _) = make_long_tailed(&ds, 8.0, 6, None).unwrap();
        let cp: Vec<_> = c.records.iter().map(|r| r.pixels.clone()).collect();
        assert_ne!(ap, cp);
    }

    #[test]
    fn n_max_cap_reserves_holdout() {
        let ds = tiny_ds(3, 10);
        let (lt, holdout) = make_long_tailed(&ds, 2.0, 7, Some(6)).unwrap();
        assert_eq!(lt.class_counts[0], 6);
        // Every class leaves at least 10 - 6 = 4 held-out samples.
        let mut held_per_class = vec![0usize; 3];
        for r in &holdout.records {
            held_per_class[r.label as usize] += 1;
        }
        assert!(held_per_class.iter().all(|&n| n >= 4));
    }

    #[test]
    fn cifar_lt_partition_sizes() {
        let counts = long_tailed_counts(500, 100, 100.0).unwrap();
        let map = partition_classes(&counts, PartitionScheme::CifarLt).unwrap();
        let many = map.iter().filter(|p| **p == Partition::Many).count();
        let medium = map.iter().filter(|p| **p == Partition::Medium).count();
        let few = map.iter().filter(|p| **p == Partition::Few).count();
        assert_eq!((many, medium, few), (34, 33, 33));
    }

    #[test]
    fn cifar_lt_partition_needs_100_classes() {
        assert!(partition_classes(&[10, 5], PartitionScheme::CifarLt).is_err());
    }

    #[test]
    fn threshold_partition_boundaries() {
        let map = partition_classes(&[150, 101, 100, 20, 19], PartitionScheme::Threshold).unwrap();
        assert_eq!(
            map,
            vec![
                Partition::Many,
                Partition::Many,
                Partition::Medium,
                Partition::Medium,
                Partition::Few
            ]
        );
    }

    #[test]
    fn batches_partition_the_epoch() {
        let ds = tiny_ds(2, 5);
        let batches = ds.shuffled_batches(4, 3, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let ids: HashSet<u32> = batches.iter().flatten().copied().collect();
        assert_eq!(ids, (0..10).collect());
    }

    #[test]
    fn batches_deterministic_per_seed_epoch() {
        let ds = tiny_ds(2, 8);
        assert_eq!(
            ds.shuffled_batches(4, 3, 2).unwrap(),
            ds.shuffled_batches(4, 3, 2).unwrap()
        );
        assert_ne!(
            ds.shuffled_batches(4, 3, 2).unwrap(),
            ds.shuffled_batches(4, 3, 3).unwrap()
        );
    }

    #[test]
    fn few_shot_split_is_balanced_and_disjoint() {
        let ds = tiny_ds(3, 12);
        let (probe, test, capped) = few_shot_split(&ds, Some(4), 11).unwrap();
        assert!(capped.is_empty());
        assert_eq!(probe.len(), 12);
        let probe_set: HashSet<u32> = probe.iter().copied().collect();
        assert!(test.iter().all(|id| !probe_set.contains(id)));
        let mut per_class = vec![0usize; 3];
        for &id in &probe {
            per_class[ds.records[id as usize].label as usize] += 1;
        }
        assert_eq!(per_class, vec![4, 4, 4]);
    }

    #[test]
    fn few_shot_split_caps_small_classes() {
        let ds = tiny_ds(2, 3);
        let (_, test, capped) = few_shot_split(&ds, Some(10), 11).unwrap();
        assert_eq!(capped.len(), 2);
        assert!(!test.is_empty());
    }
}
