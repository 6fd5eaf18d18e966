//! Seeded synthetic crowd sequences with persistent identities.
//!
//! Pedestrians walk straight lines with Gaussian jitter, enter through the
//! frame border as a Poisson process and leave by crossing the border or at
//! a per-frame exit hazard. Each identity owns a base appearance vector on
//! the unit sphere; every observation adds isotropic noise plus a large
//! per-frame nuisance component confined to a fixed low-rank subspace, which
//! a trained encoder can learn to suppress.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptor::{GroundTruthAssignment, TrainingPair};
use crate::error::{invalid, Error, Result};
use crate::geometry::{HeadPoint, PointSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Number of frames.
    pub duration: usize,
    pub fps: f64,
    pub initial_count: usize,
    /// Expected entries per frame.
    pub entry_rate: f64,
    /// Per-person, per-frame probability of leaving in place.
    pub exit_rate: f64,
    /// Walking speed range in px/frame.
    pub speed_range: (f64, f64),
    /// Positional jitter (px) added every frame.
    pub jitter_std: f64,
    pub appearance_dim: usize,
    /// 1 gives independent identity directions; 0 collapses every identity
    /// onto one shared direction.
    pub separability: f64,
    pub appearance_noise_std: f64,
    /// Rank of the per-frame nuisance subspace (0 disables it).
    pub nuisance_rank: usize,
    pub nuisance_std: f64,
    /// Probability that a departed identity comes back later.
    pub reentry_probability: f64,
    pub rng_seed: u64,
    /// Seeds the appearance space (shared direction and nuisance subspace),
    /// so scenes with the same value look like footage from one camera.
    pub appearance_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 360,
            width: 640,
            duration: 600,
            fps: 10.0,
            initial_count: 30,
            entry_rate: 0.2,
            exit_rate: 0.0,
            speed_range: (1.0, 3.0),
            jitter_std: 0.5,
            appearance_dim: 32,
            separability: 0.9,
            appearance_noise_std: 0.05,
            nuisance_rank: 4,
            nuisance_std: 0.5,
            reentry_probability: 0.0,
            rng_seed: 0,
            appearance_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.duration < 1 {
            return Err(invalid("duration must be at least one frame"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(invalid("frame must be at least 2x2 pixels"));
        }
        if self.appearance_dim == 0 {
            return Err(invalid("appearance dimension must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(invalid("fps must be positive"));
        }
        for (name, v) in [
            ("entry_rate", self.entry_rate),
            ("exit_rate", self.exit_rate),
            ("jitter_std", self.jitter_std),
            ("appearance_noise_std", self.appearance_noise_std),
            ("nuisance_std", self.nuisance_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if self.exit_rate > 1.0 {
            return Err(invalid("exit_rate is a probability"));
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return Err(invalid(format!(
                "separability must lie in [0, 1], got {}",
                self.separability
            )));
        }
        if !(0.0..=1.0).contains(&self.reentry_probability) {
            return Err(invalid("reentry_probability must lie in [0, 1]"));
        }
        let (lo, hi) = self.speed_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(invalid(format!("bad speed range ({lo}, {hi})")));
        }
        if self.nuisance_rank > self.appearance_dim {
            return Err(invalid("nuisance rank exceeds appearance dimension"));
        }
        Ok(())
    }
}

/// One frame of a sequence: identity-tagged head points and aligned raw
/// appearance vectors (row `k` belongs to point `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame_index: usize,
    pub points: PointSet,
    pub raw_features: Array2<f64>,
}

impl FrameObservation {
    pub fn new(points: PointSet, raw_features: Array2<f64>) -> Result<Self> {
        if raw_features.nrows() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows for {} points",
                raw_features.nrows(),
                points.len()
            )));
        }
        Ok(Self {
            frame_index: points.frame_index,
            points,
            raw_features,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Identities of every point; fails if any point is unlabeled.
    pub fn identities(&self) -> Result<Vec<u64>> {
        self.points
            .points()
            .iter()
            .map(|p| {
                p.identity.ok_or_else(|| {
                    Error::Data(format!("frame {} has an unlabeled point", self.frame_index))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    /// Half-open `[start, end)` frame spans; one span unless re-entry is on.
    pub spans: Vec<(usize, usize)>,
    pub base_feature: Vec<f64>,
}

impl IdentityRecord {
    pub fn birth(&self) -> usize {
        self.spans[0].0
    }

    pub fn death(&self) -> usize {
        self.spans[self.spans.len() - 1].1
    }

    pub fn is_present(&self, frame: usize) -> bool {
        self.spans.iter().any(|&(s, e)| (s..e).contains(&frame))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub config: SceneConfig,
    pub frames: Vec<FrameObservation>,
    pub identity_registry: BTreeMap<u64, IdentityRecord>,
}

impl SceneSequence {
    pub fn duration(&self) -> usize {
        self.frames.len()
    }

    /// Every identity seen in any frame.
    pub fn distinct_identities(&self) -> usize {
        self.frames
            .iter()
            .flat_map(|f| f.points.points().iter().filter_map(|p| p.identity))
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Identities present in at least one frame sampled at interval `tau`.
    pub fn distinct_sampled_identities(&self, tau: usize) -> Result<usize> {
        let mut frames: BTreeSet<usize> = BTreeSet::new();
        frames.insert(0);
        for (a, b) in sample_pair_indices(self.duration(), tau)? {
            frames.insert(a);
            frames.insert(b);
        }
        Ok(frames
            .into_iter()
            .flat_map(|t| {
                self.frames[t]
                    .points
                    .points()
                    .iter()
                    .filter_map(|p| p.identity)
            })
            .collect::<BTreeSet<_>>()
            .len())
    }

    /// Unit-normalized noiseless appearance for each point of `frame`.
    pub fn base_features(&self, frame: &FrameObservation) -> Result<Array2<f64>> {
        let ids = frame.identities()?;
        let dim = frame.raw_features.ncols();
        let mut out = Array2::zeros((ids.len(), dim));
        for (k, id) in ids.iter().enumerate() {
            let rec = self
                .identity_registry
                .get(id)
                .ok_or_else(|| Error::Data(format!("identity {id} missing from registry")))?;
            if rec.base_feature.len() != dim {
                return Err(Error::Data(format!("identity {id} has no base feature")));
            }
            out.row_mut(k)
                .assign(&Array1::from(rec.base_feature.clone()));
        }
        Ok(out)
    }
}

struct Walker {
    id: u64,
    row: f64,
    col: f64,
    d_row: f64,
    d_col: f64,
    start: usize,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn spawn_inside(rng: &mut ChaCha8Rng, cfg: &SceneConfig, id: u64, start: usize) -> Walker {
    let row = rng.random_range(0.0..(cfg.height - 1) as f64);
    let col = rng.random_range(0.0..(cfg.width - 1) as f64);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = sample_speed(rng, cfg);
    Walker {
        id,
        row,
        col,
        d_row: speed * angle.sin(),
        d_col: speed * angle.cos(),
        start,
    }
}

fn sample_speed(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> f64 {
    let (lo, hi) = cfg.speed_range;
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Starts on a random border point, heading inward within +-60 degrees of
/// the inward normal.
fn spawn_on_border(rng: &mut ChaCha8Rng, cfg: &SceneConfig, id: u64, start: usize) -> Walker {
    let (h, w) = ((cfg.height - 1) as f64, (cfg.width - 1) as f64);
    let side = rng.random_range(0..4);
    let (row, col, normal) = match side {
        0 => (0.0, rng.random_range(0.0..w), std::f64::consts::FRAC_PI_2),
        1 => (h, rng.random_range(0.0..w), -std::f64::consts::FRAC_PI_2),
        2 => (rng.random_range(0.0..h), 0.0, 0.0),
        _ => (rng.random_range(0.0..h), w, std::f64::consts::PI),
    };
    let angle = normal + rng.random_range(-1.0..1.0) * std::f64::consts::FRAC_PI_3;
    let speed = sample_speed(rng, cfg);
    Walker {
        id,
        row,
        col,
        d_row: speed * angle.sin(),
        d_col: speed * angle.cos(),
        start,
    }
}

/// Runs the scene. Identical configs give identical sequences.
pub fn simulate(config: &SceneConfig) -> Result<SceneSequence> {
    config.validate()?;
    let cfg = config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let dim = cfg.appearance_dim;

    let mut space_rng = ChaCha8Rng::seed_from_u64(cfg.appearance_seed);
    let shared = unit_gaussian(&mut space_rng, dim);
    let nuisance_basis: Vec<Array1<f64>> = (0..cfg.nuisance_rank)
        .map(|_| unit_gaussian(&mut space_rng, dim))
        .collect();
    let jitter = Normal::new(0.0, cfg.jitter_std).map_err(|e| invalid(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.appearance_noise_std).map_err(|e| invalid(e.to_string()))?;
    let nuisance = Normal::new(0.0, cfg.nuisance_std).map_err(|e| invalid(e.to_string()))?;
    let entries = if cfg.entry_rate > 0.0 {
        Some(Poisson::new(cfg.entry_rate).map_err(|e| invalid(e.to_string()))?)
    } else {
        None
    };

    let mut registry: BTreeMap<u64, IdentityRecord> = BTreeMap::new();
    let mut next_id: u64 = 0;
    let mut new_identity =
        |rng: &mut ChaCha8Rng, registry: &mut BTreeMap<u64, IdentityRecord>| -> u64 {
            let own = unit_gaussian(rng, dim);
            let mixed = &own * cfg.separability.sqrt() + &shared * (1.0 - cfg.separability).sqrt();
            let norm = mixed.dot(&mixed).sqrt();
            let id = next_id;
            next_id += 1;
            registry.insert(
                id,
                IdentityRecord {
                    spans: Vec::new(),
                    base_feature: (mixed / norm).to_vec(),
                },
            );
            id
        };

    let mut alive: Vec<Walker> = (0..cfg.initial_count)
        .map(|_| {
            let id = new_identity(&mut rng, &mut registry);
            spawn_inside(&mut rng, cfg, id, 0)
        })
        .collect();
    // (frame at which to re-enter, identity)
    let mut returning: Vec<(usize, u64)> = Vec::new();
    let mut frames = Vec::with_capacity(cfg.duration);

    for t in 0..cfg.duration {
        if t > 0 {
            let mut survivors = Vec::with_capacity(alive.len());
            for mut w in alive.drain(..) {
                w.row += w.d_row + jitter.sample(&mut rng);
                w.col += w.d_col + jitter.sample(&mut rng);
                let inside = w.row >= 0.0
                    && w.col >= 0.0
                    && w.row <= (cfg.height - 1) as f64
                    && w.col <= (cfg.width - 1) as f64;
                let leaves = cfg.exit_rate > 0.0 && rng.random_bool(cfg.exit_rate);
                if inside && !leaves {
                    survivors.push(w);
                    continue;
                }
                registry
                    .get_mut(&w.id)
                    .expect("registered")
                    .spans
                    .push((w.start, t));
                if cfg.reentry_probability > 0.0 && rng.random_bool(cfg.reentry_probability) {
                    returning.push((t + rng.random_range(10..100), w.id));
                }
            }
            alive = survivors;
            if let Some(p) = &entries {
                let k = p.sample(&mut rng) as usize;
                for _ in 0..k {
                    let id = new_identity(&mut rng, &mut registry);
                    alive.push(spawn_on_border(&mut rng, cfg, id, t));
                }
            }
            let (due, later): (Vec<_>, Vec<_>) = returning.drain(..).partition(|&(at, _)| at <= t);
            returning = later;
            for (_, id) in due {
                alive.push(spawn_on_border(&mut rng, cfg, id, t));
            }
        }

        let mut points = Vec::with_capacity(alive.len());
        let mut feats = Array2::zeros((alive.len(), dim));
        for (k, w) in alive.iter().enumerate() {
            points.push(HeadPoint::with_identity(w.row, w.col, w.id));
            let base = &registry[&w.id].base_feature;
            let mut row = feats.row_mut(k);
            for (d, v) in row.iter_mut().enumerate() {
                *v = base[d] + noise.sample(&mut rng);
            }
            for dir in &nuisance_basis {
                let s = nuisance.sample(&mut rng);
                row.scaled_add(s, dir);
            }
        }
        let points = PointSet::new(t, cfg.height, cfg.width, points)?;
        frames.push(FrameObservation::new(points, feats)?);
    }
    for w in alive {
        registry
            .get_mut(&w.id)
            .expect("registered")
            .spans
            .push((w.start, cfg.duration));
    }
    for rec in registry.values_mut() {
        rec.spans.sort_unstable();
    }
    // Identities scheduled to return after the end never re-appear and keep
    // their recorded spans.
    Ok(SceneSequence {
        config: cfg.clone(),
        frames,
        identity_registry: registry,
    })
}

/// Frame-index pairs `(k*tau - tau, k*tau)` plus a shorter tail pair ending
/// on the last frame when it is not aligned. A single-frame video has none.
pub fn sample_pair_indices(duration: usize, tau: usize) -> Result<Vec<(usize, usize)>> {
    if duration == 1 && tau >= 1 {
        return Ok(Vec::new());
    }
    if tau < 1 || tau >= duration {
        return Err(invalid(format!(
            "tau must lie in [1, {}), got {tau}",
            duration
        )));
    }
    let last = duration - 1;
    let mut pairs: Vec<(usize, usize)> =
        (1..=last / tau).map(|k| (k * tau - tau, k * tau)).collect();
    let end = pairs.last().map_or(0, |p| p.1);
    if end < last {
        pairs.push((end, last));
    }
    Ok(pairs)
}

pub fn sample_pairs(
    seq: &SceneSequence,
    tau: usize,
) -> Result<Vec<(&FrameObservation, &FrameObservation)>> {
    Ok(sample_pair_indices(seq.duration(), tau)?
        .into_iter()
        .map(|(a, b)| (&seq.frames[a], &seq.frames[b]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFlows {
    pub inflow: usize,
    pub outflow: usize,
    pub assignment: GroundTruthAssignment,
}

/// Shared identities are matches; the rest are inflow (later frame) or
/// outflow (earlier frame).
pub fn ground_truth_flows(a: &FrameObservation, b: &FrameObservation) -> Result<GroundTruthFlows> {
    let ids_a: Vec<Option<u64>> = a.identities()?.into_iter().map(Some).collect();
    let ids_b: Vec<Option<u64>> = b.identities()?.into_iter().map(Some).collect();
    let assignment = GroundTruthAssignment::from_labels(&ids_a, &ids_b)?;
    Ok(GroundTruthFlows {
        inflow: assignment.inflow(),
        outflow: assignment.outflow(),
        assignment,
    })
}

/// Random frame pairs with intervals drawn uniformly from `interval_range`
/// (frames, inclusive), carrying raw features and identity-derived targets.
pub fn training_pairs(
    seq: &SceneSequence,
    interval_range: (usize, usize),
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let (lo, hi) = interval_range;
    if lo < 1 || hi < lo || hi >= seq.duration() {
        return Err(invalid(format!(
            "interval range ({lo}, {hi}) does not fit a {}-frame sequence",
            seq.duration()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let gap = rng.random_range(lo..=hi);
            let t0 = rng.random_range(0..seq.duration() - gap);
            let (a, b) = (&seq.frames[t0], &seq.frames[t0 + gap]);
            let gt = ground_truth_flows(a, b)?.assignment;
            Ok(TrainingPair {
                x_raw: a.raw_features.clone(),
                y_raw: b.raw_features.clone(),
                gt,
            })
        })
        .collect()
}

/// Training pairs pooled from several sequences, shuffled with `seed`.
pub fn training_set(
    seqs: &[SceneSequence],
    interval_range: (usize, usize),
    per_sequence: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for (k, seq) in seqs.iter().enumerate() {
        out.extend(training_pairs(
            seq,
            interval_range,
            per_sequence,
            seed.wrapping_add(k as u64),
        )?);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            height: 120,
            width: 160,
            duration: 200,
            initial_count: 8,
            entry_rate: 0.3,
            appearance_dim: 8,
            nuisance_rank: 2,
            rng_seed: seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn closed_scene_keeps_population() {
        let cfg = SceneConfig {
            entry_rate: 0.0,
            exit_rate: 0.0,
            speed_range: (0.0, 0.0),
            jitter_std: 0.0,
            ..small(1)
        };
        let seq = simulate(&cfg).unwrap();
        assert!(seq.frames.iter().all(|f| f.len() == 8));
        assert_eq!(seq.distinct_identities(), 8);
    }

    #[test]
    fn same_seed_same_sequence() {
        assert_eq!(simulate(&small(3)).unwrap(), simulate(&small(3)).unwrap());
        assert_ne!(simulate(&small(3)).unwrap(), simulate(&small(4)).unwrap());
    }

    #[test]
    fn entry_count_within_poisson_bound() {
        let cfg = SceneConfig {
            duration: 1001,
            entry_rate: 0.5,
            initial_count: 0,
            appearance_dim: 4,
            nuisance_rank: 0,
            ..small(5)
        };
        let seq = simulate(&cfg).unwrap();
        let entries = seq.identity_registry.len() as f64;
        // 1000 frames at rate 0.5: mean 500, sd sqrt(500)
        assert!((entries - 500.0).abs() < 3.0 * 500f64.sqrt(), "{entries}");
    }

    #[test]
    fn identities_live_in_their_spans() {
        let cfg = SceneConfig {
            exit_rate: 0.01,
            ..small(6)
        };
        let seq = simulate(&cfg).unwrap();
        for f in &seq.frames {
            let ids = f.identities().unwrap();
            for id in &ids {
                assert!(seq.identity_registry[id].is_present(f.frame_index));
            }
            let present = seq
                .identity_registry
                .iter()
                .filter(|(_, r)| r.is_present(f.frame_index))
                .count();
            assert_eq!(present, ids.len());
            assert_eq!(f.raw_features.nrows(), ids.len());
        }
    }

    #[test]
    fn reentry_produces_multiple_spans() {
        let cfg = SceneConfig {
            reentry_probability: 1.0,
            speed_range: (3.0, 5.0),
            ..small(8)
        };
        let seq = simulate(&cfg).unwrap();
        assert!(seq.identity_registry.values().any(|r| r.spans.len() > 1));
        for r in seq.identity_registry.values() {
            for w in r.spans.windows(2) {
                assert!(w[0].1 <= w[1].0);
            }
        }
    }

    #[test]
    fn pair_schedule() {
        assert_eq!(
            sample_pair_indices(10, 3).unwrap(),
            vec![(0, 3), (3, 6), (6, 9)]
        );
        assert_eq!(
            sample_pair_indices(8, 3).unwrap(),
            vec![(0, 3), (3, 6), (6, 7)]
        );
        assert_eq!(sample_pair_indices(8, 7).unwrap(), vec![(0, 7)]);
        assert!(sample_pair_indices(1, 3).unwrap().is_empty());
        assert!(sample_pair_indices(8, 8).is_err());
        assert!(sample_pair_indices(8, 0).is_err());
    }

    #[test]
    fn flows_by_set_difference() {
        let frame = |t: usize, ids: &[u64]| {
            let pts = ids
                .iter()
                .map(|&id| HeadPoint::with_identity(5.0, id as f64, id))
                .collect();
            FrameObservation::new(
                PointSet::new(t, 20, 20, pts).unwrap(),
                Array2::zeros((ids.len(), 2)),
            )
            .unwrap()
        };
        let f = ground_truth_flows(&frame(0, &[1, 2, 3]), &frame(1, &[2, 3, 4])).unwrap();
        assert_eq!((f.inflow, f.outflow), (1, 1));
        assert_eq!(f.assignment.matches(), vec![(1, 0), (2, 1)]);

        let same = ground_truth_flows(&frame(0, &[1, 2]), &frame(1, &[2, 1])).unwrap();
        assert_eq!((same.inflow, same.outflow), (0, 0));
        let disjoint = ground_truth_flows(&frame(0, &[1, 2]), &frame(1, &[5, 6, 7])).unwrap();
        assert_eq!((disjoint.inflow, disjoint.outflow), (3, 2));

        let unlabeled = FrameObservation::new(
            PointSet::new(0, 20, 20, vec![HeadPoint::new(1.0, 1.0)]).unwrap(),
            Array2::zeros((1, 2)),
        )
        .unwrap();
        assert!(matches!(
            ground_truth_flows(&unlabeled, &frame(1, &[1])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn flow_bookkeeping_and_distinct_count() {
        let seq = simulate(&SceneConfig {
            exit_rate: 0.005,
            ..small(9)
        })
        .unwrap();
        let tau = 7;
        let mut total = seq.frames[0].len();
        for (a, b) in sample_pairs(&seq, tau).unwrap() {
            let f = ground_truth_flows(a, b).unwrap();
            assert_eq!(b.len(), a.len() + f.inflow - f.outflow);
            total += f.inflow;
        }
        assert_eq!(total, seq.distinct_sampled_identities(tau).unwrap());
    }

    #[test]
    fn separability_controls_identity_overlap() {
        let mean_cos = |sep: f64| {
            let seq = simulate(&SceneConfig {
                separability: sep,
                appearance_dim: 16,
                ..small(10)
            })
            .unwrap();
            let feats: Vec<&Vec<f64>> = seq
                .identity_registry
                .values()
                .map(|r| &r.base_feature)
                .collect();
            let mut acc = 0.0;
            let mut k = 0;
            for i in 0..feats.len() {
                for j in i + 1..feats.len() {
                    acc += feats[i]
                        .iter()
                        .zip(feats[j])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                    k += 1;
                }
            }
            acc / k as f64
        };
        let loose = mean_cos(0.3);
        let tight = mean_cos(1.0);
        assert!(loose > 0.5, "{loose}");
        assert!(tight.abs() < 0.1, "{tight}");
    }

    #[test]
    fn training_pairs_are_consistent() {
        let seq = simulate(&small(11)).unwrap();
        let pairs = training_pairs(&seq, (5, 20), 10, 0).unwrap();
        assert_eq!(pairs.len(), 10);
        for p in &pairs {
            assert_eq!(p.gt.rows(), p.x_raw.nrows());
            assert_eq!(p.gt.cols(), p.y_raw.nrows());
        }
        assert!(training_pairs(&seq, (0, 5), 1, 0).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(simulate(&SceneConfig {
            duration: 0,
            ..small(0)
        })
        .is_err());
        assert!(simulate(&SceneConfig {
            separability: 1.5,
            ..small(0)
        })
        .is_err());
        assert!(simulate(&SceneConfig {
            entry_rate: -1.0,
            ..small(0)
        })
        .is_err());
    }
}
