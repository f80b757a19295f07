//! Per-sample loss history: momentum losses, normalized memorization
//! scores, tail-discovery diagnostics, and the on-disk table format.
//!
//! The momentum loss is the epoch-wise exponential moving average
//! `L^m_0 = L_0`, `L^m_t = beta * L^m_{t-1} + (1 - beta) * L_t`, kept per
//! sample. Scores normalize momentum losses to `[0, 1]` around mean 0.5:
//! `M_i = ((L^m_i - mean) / max_j |L^m_j - mean| + 1) / 2`.

use crate::dataio::Partition;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemEntry {
    /// Latest instantaneous loss `L_{i,t}`.
    pub l_inst: f64,
    /// Momentum loss `L^m_{i,t}`.
    pub l_mom: f64,
    /// Normalized score `M_{i,t}`.
    pub m: f64,
}

/// Per-sample loss table covering exactly the `N` training sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MemTable {
    beta: f64,
    /// Last recorded epoch; `None` until the first fold.
    epoch: Option<u64>,
    entries: Vec<MemEntry>,
}

impl MemTable {
    pub fn new(n: usize, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::MemTrack(format!("beta {beta} outside [0, 1]")));
        }
        if n == 0 {
            return Err(Error::MemTrack("empty sample space".into()));
        }
        Ok(MemTable {
            beta,
            epoch: None,
            entries: vec![
                MemEntry {
                    l_inst: 0.0,
                    l_mom: 0.0,
                    m: 0.5,
                };
                n
            ],
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Last folded epoch, when any.
    pub fn epoch(&self) -> Option<u64> {
        self.epoch
    }

    pub fn entries(&self) -> &[MemEntry] {
        &self.entries
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.m).collect()
    }

    pub fn momentum_losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.l_mom).collect()
    }

    pub fn instant_losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.l_inst).collect()
    }

    /// Fold one epoch of per-sample losses: the first fold initializes the
    /// momentum loss, later folds apply the moving average. `losses` is
    /// dense over sample ids (see [`LossStage`]).
    pub fn record_epoch_losses(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.entries.len() {
            return Err(Error::MemTrack(format!(
                "expected losses for {} samples, got {}",
                self.entries.len(),
                losses.len()
            )));
        }
        if let Some(bad) = losses.iter().position(|v| !v.is_finite()) {
            return Err(Error::MemTrack(format!(
                "non-finite loss for sample {bad}"
            )));
        }
        let first = self.epoch.is_none();
        for (e, &l) in self.entries.iter_mut().zip(losses) {
            e.l_inst = l;
            e.l_mom = if first {
                l
            } else {
                self.beta * e.l_mom + (1.0 - self.beta) * l
            };
        }
        self.epoch = Some(match self.epoch {
            None => 0,
            Some(t) => t + 1,
        });
        Ok(())
    }

    /// Normalize momentum losses into `[0, 1]` scores with mean 0.5 and
    /// store them; the all-equal degenerate case maps everything to 0.5.
    pub fn normalize_scores(&mut self) -> Vec<f64> {
        let n = self.entries.len() as f64;
        let mean: f64 = self.entries.iter().map(|e| e.l_mom).sum::<f64>() / n;
        let max_dev = self
            .entries
            .iter()
            .map(|e| (e.l_mom - mean).abs())
            .fold(0.0f64, f64::max);
        if max_dev == 0.0 {
            for e in &mut self.entries {
                e.m = 0.5;
            }
        } else {
            for e in &mut self.entries {
                e.m = 0.5 * ((e.l_mom - mean) / max_dev + 1.0);
            }
        }
        self.scores()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let manifest = TableManifest {
            version: TABLE_VERSION,
            beta: self.beta,
            epoch: self.epoch,
            n: self.entries.len(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for e in &self.entries {
            w.write_all(&e.l_inst.to_le_bytes())?;
            w.write_all(&e.l_mom.to_le_bytes())?;
            w.write_all(&e.m.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a table; when `expect_n` is given, the stored sample count must
    /// match the dataset it will track.
    pub fn load(path: &Path, expect_n: Option<usize>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let json_len = u64::from_le_bytes(len_bytes) as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let manifest: TableManifest = serde_json::from_slice(&json)?;
        if manifest.version != TABLE_VERSION {
            return Err(Error::MemTrack(format!(
                "unsupported loss-table version {}",
                manifest.version
            )));
        }
        if let Some(n) = expect_n {
            if n != manifest.n {
                return Err(Error::MemTrack(format!(
                    "loss table tracks {} samples but the dataset has {n}",
                    manifest.n
                )));
            }
        }
        let mut entries = Vec::with_capacity(manifest.n);
        let mut triple = [0u8; 24];
        for _ in 0..manifest.n {
            r.read_exact(&mut triple)
                .map_err(|_| Error::MemTrack("truncated loss table".into()))?;
            entries.push(MemEntry {
                l_inst: f64::from_le_bytes(triple[0..8].try_into().unwrap()),
                l_mom: f64::from_le_bytes(triple[8..16].try_into().unwrap()),
                m: f64::from_le_bytes(triple[16..24].try_into().unwrap()),
            });
        }
        Ok(MemTable {
            beta: manifest.beta,
            epoch: manifest.epoch,
            entries,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableManifest {
    version: u32,
    beta: f64,
    epoch: Option<u64>,
    n: usize,
}

/// Per-epoch staging buffer. Batches insert each sample's loss exactly once;
/// `finish` verifies full coverage and yields the dense vector
/// [`MemTable::record_epoch_losses`] consumes.
#[derive(Debug, Clone)]
pub struct LossStage {
    slots: Vec<Option<f64>>,
}

impl LossStage {
    pub fn new(n: usize) -> Self {
        LossStage {
            slots: vec![None; n],
        }
    }

    pub fn insert(&mut self, sample_id: u32, loss: f64) -> Result<()> {
        let slot = self
            .slots
            .get_mut(sample_id as usize)
            .ok_or_else(|| Error::MemTrack(format!("sample id {sample_id} out of range")))?;
        if slot.is_some() {
            return Err(Error::MemTrack(format!(
                "duplicate loss for sample {sample_id} within one epoch"
            )));
        }
        *slot = Some(loss);
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.slots.len());
        for (i, slot) in self.slots.into_iter().enumerate() {
            match slot {
                Some(v) => out.push(v),
                None => {
                    return Err(Error::MemTrack(format!(
                        "no loss recorded for sample {i} this epoch"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Which per-sample statistic ranks the large-loss set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Momentum,
    Instantaneous,
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreKind::Momentum => write!(f, "ml"),
            ScoreKind::Instantaneous => write!(f, "cl"),
        }
    }
}

/// Head = Many classes; Tail = Medium and Few classes together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadTail {
    Head,
    Tail,
}

impl From<Partition> for HeadTail {
    fn from(p: Partition) -> Self {
        match p {
            Partition::Many => HeadTail::Head,
            Partition::Medium | Partition::Few => HeadTail::Tail,
        }
    }
}

/// Tail-discovery diagnostics: for each group, the fraction of the group
/// captured by the top-`r` largest-loss set, `phi = |G ∩ X_l| / |G ∩ X|`.
#[derive(Debug, Clone)]
pub struct TailDiscoveryReport {
    pub r: f64,
    pub score: ScoreKind,
    pub phi_head: f64,
    pub phi_tail: f64,
    /// Sample ids of the large-loss set, `ceil(r * N)` of them.
    pub large_loss_ids: Vec<u32>,
}

/// Rank samples by the chosen statistic and compute per-group capture
/// ratios. Ties break by ascending sample id; group labels come from the
/// dataset's partition map.
pub fn tail_discovery(
    table: &MemTable,
    sample_groups: &[HeadTail],
    r: f64,
    score: ScoreKind,
) -> Result<TailDiscoveryReport> {
    if table.is_empty() {
        return Err(Error::MemTrack("tail discovery on an empty table".into()));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::MemTrack(format!("ratio r = {r} outside (0, 1]")));
    }
    if sample_groups.len() != table.len() {
        return Err(Error::MemTrack(format!(
            "{} group labels for {} samples",
            sample_groups.len(),
            table.len()
        )));
    }
    let values: Vec<f64> = match score {
        ScoreKind::Momentum => table.momentum_losses(),
        ScoreKind::Instantaneous => table.instant_losses(),
    };
    let take = ((r * table.len() as f64).ceil() as usize).clamp(1, table.len());
    let mut order: Vec<u32> = (0..table.len() as u32).collect();
    order.sort_by(|&a, &b| {
        values[b as usize]
            .total_cmp(&values[a as usize])
            .then(a.cmp(&b))
    });
    let mut large_loss_ids: Vec<u32> = order[..take].to_vec();
    large_loss_ids.sort_unstable();

    let count = |group: HeadTail, ids: &[u32]| -> usize {
        ids.iter()
            .filter(|&&id| sample_groups[id as usize] == group)
            .count()
    };
    let head_total = sample_groups.iter().filter(|&&g| g == HeadTail::Head).count();
    let tail_total = sample_groups.len() - head_total;
    let phi = |captured: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            captured as f64 / total as f64
        }
    };
    Ok(TailDiscoveryReport {
        r,
        score,
        phi_head: phi(count(HeadTail::Head, &large_loss_ids), head_total),
        phi_tail: phi(count(HeadTail::Tail, &large_loss_ids), tail_total),
        large_loss_ids,
    })
}

/// Brute-force closed form of the moving average, used as the test oracle:
/// `L^m_t = (1-beta) * sum_{s=1..t} beta^{t-s} L_s + beta^t * L_0`.
pub fn momentum_closed_form(history: &[f64], beta: f64) -> f64 {
    assert!(!history.is_empty());
    let t = history.len() - 1;
    let mut acc = beta.powi(t as i32) * history[0];
    for (s, &l) in history.iter().enumerate().skip(1) {
        acc += (1.0 - beta) * beta.powi((t - s) as i32) * l;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_with(losses_by_epoch: &[Vec<f64>], beta: f64) -> MemTable {
        let mut t = MemTable::new(losses_by_epoch[0].len(), beta).unwrap();
        for l in losses_by_epoch {
            t.record_epoch_losses(l).unwrap();
        }
        t
    }

    #[test]
    fn beta_zero_tracks_latest_loss() {
        let t = table_with(&[vec![2.0, 5.0], vec![1.0, 3.0]], 0.0);
        assert_eq!(t.momentum_losses(), vec![1.0, 3.0]);
    }

    #[test]
    fn hand_checked_recurrence() {
        // beta 0.97, history (2.0, 1.0): 0.97*2 + 0.03*1 = 1.97
        let t = table_with(&[vec![2.0], vec![1.0]], 0.97);
        assert!((t.momentum_losses()[0] - 1.97).abs() < 1e-12);
        assert_eq!(t.epoch(), Some(1));
    }

    #[test]
    fn constant_loss_is_a_fixed_point() {
        for beta in [0.0, 0.5, 0.97] {
            let epochs: Vec<Vec<f64>> = (0..6).map(|_| vec![3.25, 3.25]).collect();
            let t = table_with(&epochs, beta);
            assert!(t.momentum_losses().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn missing_and_nonfinite_losses_rejected() {
        let mut t = MemTable::new(3, 0.9).unwrap();
        assert!(t.record_epoch_losses(&[1.0, 2.0]).is_err());
        assert!(t.record_epoch_losses(&[1.0, f64::NAN, 2.0]).is_err());
    }

    #[test]
    fn normalize_hand_cases() {
        let mut t = table_with(&[vec![1.0, 2.0, 3.0]], 0.9);
        assert_eq!(t.normalize_scores(), vec![0.0, 0.5, 1.0]);

        let mut t = table_with(&[vec![0.0, 0.0, 10.0]], 0.9);
        let m = t.normalize_scores();
        assert!((m[0] - 0.25).abs() < 1e-12);
        assert!((m[1] - 0.25).abs() < 1e-12);
        assert!((m[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_degenerate_all_equal() {
        let mut t = table_with(&[vec![4.0; 5]], 0.9);
        assert!(t.normalize_scores().iter().all(|&m| m == 0.5));
    }

    #[test]
    fn stage_requires_exact_coverage() {
        let mut stage = LossStage::new(3);
        stage.insert(0, 1.0).unwrap();
        stage.insert(2, 2.0).unwrap();
        assert!(stage.insert(2, 9.0).is_err());
        assert!(stage.clone().finish().is_err());
        stage.insert(1, 0.5).unwrap();
        assert_eq!(stage.finish().unwrap(), vec![1.0, 0.5, 2.0]);
    }

    #[test]
    fn tail_discovery_hand_case() {
        // N=10, tail = ids 0..4, X_l = {0} -> phi_tail = 1/5.
        let mut t = MemTable::new(10, 0.9).unwrap();
        let mut losses = vec![0.0; 10];
        losses[0] = 5.0;
        t.record_epoch_losses(&losses).unwrap();
        let groups: Vec<HeadTail> = (0..10)
            .map(|i| if i < 5 { HeadTail::Tail } else { HeadTail::Head })
            .collect();
        let rep = tail_discovery(&t, &groups, 0.1, ScoreKind::Momentum).unwrap();
        assert_eq!(rep.large_loss_ids, vec![0]);
        assert!((rep.phi_tail - 0.2).abs() < 1e-12);
        assert_eq!(rep.phi_head, 0.0);
    }

    #[test]
    fn tail_discovery_r_one_captures_everything() {
        let mut t = MemTable::new(6, 0.9).unwrap();
        t.record_epoch_losses(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let groups = vec![
            HeadTail::Head,
            HeadTail::Head,
            HeadTail::Head,
            HeadTail::Tail,
            HeadTail::Tail,
            HeadTail::Tail,
        ];
        let rep = tail_discovery(&t, &groups, 1.0, ScoreKind::Instantaneous).unwrap();
        assert_eq!(rep.phi_head, 1.0);
        assert_eq!(rep.phi_tail, 1.0);
        assert_eq!(rep.large_loss_ids.len(), 6);
    }

    #[test]
    fn tail_discovery_tie_break_by_id() {
        let mut t = MemTable::new(4, 0.9).unwrap();
        t.record_epoch_losses(&[7.0, 7.0, 7.0, 7.0]).unwrap();
        let groups = vec![HeadTail::Head; 4];
        let rep = tail_discovery(&t, &groups, 0.5, ScoreKind::Momentum).unwrap();
        assert_eq!(rep.large_loss_ids, vec![0, 1]);
    }

    #[test]
    fn save_load_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.bin");
        let mut t = table_with(&[vec![1.0, 2.0, 3.0], vec![2.0, 1.0, 0.5]], 0.97);
        t.normalize_scores();
        t.save(&path).unwrap();
        let back = MemTable::load(&path, Some(3)).unwrap();
        assert_eq!(back, t);
        assert!(MemTable::load(&path, Some(4)).is_err());
    }

    #[test]
    fn resume_replays_identically() {
        let epochs: Vec<Vec<f64>> = (0..6)
            .map(|e| (0..4).map(|i| ((e * 7 + i * 3) % 11) as f64 / 3.0).collect())
            .collect();
        let mut full = table_with(&epochs[..4].to_vec(), 0.9);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.bin");
        full.normalize_scores();
        full.save(&path).unwrap();
        let mut resumed = MemTable::load(&path, Some(4)).unwrap();

        for e in &epochs[4..] {
            full.record_epoch_losses(e).unwrap();
            resumed.record_epoch_losses(e).unwrap();
        }
        assert_eq!(full.normalize_scores(), resumed.normalize_scores());
    }

    proptest! {
        #[test]
        fn ema_matches_closed_form(
            history in proptest::collection::vec(0.0f64..10.0, 1..50),
            beta in prop_oneof![Just(0.0), Just(0.5), Just(0.97), Just(0.99)],
        ) {
            let mut t = MemTable::new(1, beta).unwrap();
            for &l in &history {
                t.record_epoch_losses(&[l]).unwrap();
            }
            let closed = momentum_closed_form(&history, beta);
            let incr = t.momentum_losses()[0];
            let denom = closed.abs().max(1e-9);
            prop_assert!(((incr - closed) / denom).abs() < 1e-6,
                "incremental {incr} vs closed {closed}");
        }

        #[test]
        fn scores_bounded_mean_half_extreme_hits_bounds(
            mut losses in proptest::collection::vec(-5.0f64..5.0, 2..200),
        ) {
            // Force a non-degenerate spread.
            losses[0] += 1.0;
            let mut t = MemTable::new(losses.len(), 0.9).unwrap();
            t.record_epoch_losses(&losses).unwrap();
            let m = t.normalize_scores();
            let n = m.len() as f64;
            let mean = m.iter().sum::<f64>() / n;
            prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((mean - 0.5).abs() <= 1e-6, "mean {mean}");
            prop_assert!(m.iter().any(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn score_order_matches_momentum_order_and_shift_invariant(
            losses in proptest::collection::vec(0.0f64..5.0, 2..60),
            shift in -10.0f64..10.0,
        ) {
            let mut a = MemTable::new(losses.len(), 0.5).unwrap();
            a.record_epoch_losses(&losses).unwrap();
            let ma = a.normalize_scores();

            let shifted: Vec<f64> = losses.iter().map(|&l| l + shift).collect();
            let mut b = MemTable::new(losses.len(), 0.5).unwrap();
            b.record_epoch_losses(&shifted).unwrap();
            let mb = b.normalize_scores();

            for i in 0..ma.len() {
                prop_assert!((ma[i] - mb[i]).abs() < 1e-9, "shift changed score {i}");
                for j in 0..ma.len() {
                    let by_loss = losses[i].total_cmp(&losses[j]);
                    let by_score = ma[i].total_cmp(&ma[j]);
                    if by_loss == std::cmp::Ordering::Greater {
                        prop_assert!(by_score != std::cmp::Ordering::Less);
                    }
                }
            }
        }
    }
}
