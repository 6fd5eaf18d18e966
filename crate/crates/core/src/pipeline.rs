//! Video counting as first-frame count plus accumulated inflows.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{encode_set, similarity_matrix, DescriptorSet, ModelParams};
use crate::error::{invalid, Error, Result};
use crate::flow::{decode_assignment, hungarian_baseline, soft_inflow_count, soft_outflow_count};
use crate::geometry::{
    augment_proposals, extract_head_proposals, render_density, PointSet, DEFAULT_KERNEL_SIGMA,
    DEFAULT_KERNEL_WINDOW, DEFAULT_NMS_RADIUS,
};
use crate::metrics::{MetricsReport, PairFlows};
use crate::ot::{solve_counts, SinkhornConfig};
use crate::simulator::{ground_truth_flows, sample_pair_indices, FrameObservation, SceneSequence};

/// Where head locations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointSource {
    GroundTruth,
    /// Peaks of the density map rendered from annotated points.
    Proposals,
}

/// Where head descriptors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorSource {
    /// Noiseless identity appearance, unit-normalized.
    GroundTruth,
    /// Raw observed features through the encoder.
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCountMode {
    GroundTruth,
    Proposals,
    Density,
}

/// How inflow between two sampled frames is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Association {
    /// Soft dust-row sum of the transport plan.
    Transport,
    /// Thresholded one-to-one assignment on raw similarities.
    Hungarian { threshold: f64 },
    /// Identity labels (oracle).
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub kernel_sigma: f64,
    pub window: usize,
    pub min_peak: Option<f64>,
    pub nms_radius: f64,
    /// Maximum distance (px) for a proposal to inherit an annotated point's
    /// identity and appearance.
    pub match_radius: f64,
    /// Standard deviation (px) of the Gaussian jitter applied to extracted
    /// proposals; 0 disables it.
    #[serde(default)]
    pub jitter: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
            window: DEFAULT_KERNEL_WINDOW,
            min_peak: None,
            nms_radius: DEFAULT_NMS_RADIUS,
            match_radius: 4.0,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tau: usize,
    pub solver: SinkhornConfig,
    pub points: PointSource,
    pub descriptors: DescriptorSource,
    pub initial: InitialCountMode,
    pub association: Association,
    pub proposals: ProposalConfig,
    /// Seeds the appearance of unmatched proposals.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: 30,
            solver: SinkhornConfig::new(0.02, 100).with_annealing(1.0),
            points: PointSource::GroundTruth,
            descriptors: DescriptorSource::Encoder,
            initial: InitialCountMode::GroundTruth,
            association: Association::Transport,
            proposals: ProposalConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub t0: usize,
    pub t1: usize,
    pub inflow: f64,
    pub outflow: f64,
    /// L1 marginal violation of the plan (0 for non-transport associations).
    pub violation: f64,
    pub matched: usize,
    pub decoded_inflow: usize,
    pub decoded_outflow: usize,
    pub gt_inflow: Option<usize>,
    pub gt_outflow: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoCountResult {
    pub video_id: String,
    pub n0: f64,
    pub tau: usize,
    pub pairs: Vec<PairResult>,
    /// `n0` plus the inflows of every successful pair, summed in pair order.
    pub total: f64,
    /// Index of the first pair whose solve failed; later pairs are dropped.
    pub failed_pair: Option<usize>,
    pub error: Option<String>,
}

impl VideoCountResult {
    pub fn is_partial(&self) -> bool {
        self.failed_pair.is_some()
    }

    /// Predicted and ground-truth `(inflow, outflow)` per pair, when every
    /// pair carries labels.
    pub fn flow_series(&self) -> Option<(PairFlows, PairFlows)> {
        let pred = self.pairs.iter().map(|p| (p.inflow, p.outflow)).collect();
        let gt = self
            .pairs
            .iter()
            .map(|p| Some((p.gt_inflow? as f64, p.gt_outflow? as f64)))
            .collect::<Option<Vec<_>>>()?;
        Some((pred, gt))
    }
}

/// Head locations of `frame` under the chosen source, each tagged with the
/// index of the annotated point it stands for (if any).
fn frame_points(
    frame: &FrameObservation,
    cfg: &PipelineConfig,
) -> Result<(PointSet, Vec<Option<usize>>)> {
    match cfg.points {
        PointSource::GroundTruth => {
            Ok((frame.points.clone(), (0..frame.len()).map(Some).collect()))
        }
        PointSource::Proposals => {
            let p = &cfg.proposals;
            let map = render_density(&frame.points, p.kernel_sigma, p.window)?;
            let mut proposals = extract_head_proposals(&map, p.min_peak, p.nms_radius)?;
            proposals.frame_index = frame.frame_index;
            if p.jitter > 0.0 {
                proposals =
                    augment_proposals(&proposals, p.jitter, cfg.seed ^ frame.frame_index as u64)?;
            }
            let links = link_proposals(&proposals, &frame.points, p.match_radius);
            let labeled = proposals
                .points()
                .iter()
                .zip(&links)
                .map(|(q, l)| {
                    let mut q = *q;
                    q.identity = l.and_then(|k| frame.points.points()[k].identity);
                    q
                })
                .collect();
            Ok((proposals.with_points(labeled)?, links))
        }
    }
}

/// Greedy one-to-one linking of proposals to annotated points, closest
/// pairs first, within `radius`.
fn link_proposals(proposals: &PointSet, truth: &PointSet, radius: f64) -> Vec<Option<usize>> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in proposals.points().iter().enumerate() {
        for (k, t) in truth.points().iter().enumerate() {
            let d = p.distance(t);
            if d <= radius {
                cands.push((d, i, k));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; proposals.len()];
    let mut taken = vec![false; truth.len()];
    for (_, i, k) in cands {
        if out[i].is_none() && !taken[k] {
            out[i] = Some(k);
            taken[k] = true;
        }
    }
    out
}

fn frame_descriptors(
    seq: &SceneSequence,
    frame: &FrameObservation,
    links: &[Option<usize>],
    model: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<DescriptorSet> {
    let source = match cfg.descriptors {
        DescriptorSource::GroundTruth => seq.base_features(frame)?,
        DescriptorSource::Encoder => frame.raw_features.clone(),
    };
    let dim = source.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (frame.frame_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut rows = Array2::zeros((links.len(), dim));
    for (i, l) in links.iter().enumerate() {
        match l {
            Some(k) => rows.row_mut(i).assign(&source.row(*k)),
            None => rows
                .row_mut(i)
                .iter_mut()
                .for_each(|v| *v = StandardNormal.sample(&mut rng)),
        }
    }
    match cfg.descriptors {
        DescriptorSource::GroundTruth => DescriptorSet::normalized(&rows),
        DescriptorSource::Encoder => encode_set(&rows, &model.encoder),
    }
}

/// Count in a single frame.
pub fn initial_count(
    frame: &FrameObservation,
    mode: InitialCountMode,
    proposals: &ProposalConfig,
) -> Result<f64> {
    match mode {
        InitialCountMode::GroundTruth => Ok(frame.len() as f64),
        InitialCountMode::Density => {
            Ok(render_density(&frame.points, proposals.kernel_sigma, proposals.window)?.sum())
        }
        InitialCountMode::Proposals => {
            let map = render_density(&frame.points, proposals.kernel_sigma, proposals.window)?;
            Ok(
                extract_head_proposals(&map, proposals.min_peak, proposals.nms_radius)?.len()
                    as f64,
            )
        }
    }
}

fn solve_pair(
    seq: &SceneSequence,
    (t0, t1): (usize, usize),
    model: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<PairResult> {
    let (a, b) = (&seq.frames[t0], &seq.frames[t1]);
    let gt = ground_truth_flows(a, b).ok();
    let mut result = PairResult {
        t0,
        t1,
        inflow: 0.0,
        outflow: 0.0,
        violation: 0.0,
        matched: 0,
        decoded_inflow: 0,
        decoded_outflow: 0,
        gt_inflow: gt.as_ref().map(|g| g.inflow),
        gt_outflow: gt.as_ref().map(|g| g.outflow),
    };
    if let Association::GroundTruth = cfg.association {
        let g = gt.ok_or_else(|| Error::Data(format!("pair ({t0},{t1}) lacks identity labels")))?;
        result.inflow = g.inflow as f64;
        result.outflow = g.outflow as f64;
        result.matched = g.assignment.matches().len();
        result.decoded_inflow = g.inflow;
        result.decoded_outflow = g.outflow;
        return Ok(result);
    }

    let (_, links_a) = frame_points(a, cfg)?;
    let (_, links_b) = frame_points(b, cfg)?;
    let xa = frame_descriptors(seq, a, &links_a, model, cfg)?;
    let xb = frame_descriptors(seq, b, &links_b, model, cfg)?;
    let sim = similarity_matrix(&xa, &xb);
    match cfg.association {
        Association::Transport => {
            let plan = solve_counts(&sim, model.bin_score, &cfg.solver)?;
            result.inflow = soft_inflow_count(&plan)?;
            result.outflow = soft_outflow_count(&plan)?;
            result.violation = plan.marginal_violation;
            let d = decode_assignment(&plan);
            result.matched = d.matched.len();
            result.decoded_inflow = d.inflow.len();
            result.decoded_outflow = d.outflow.len();
        }
        Association::Hungarian { threshold } => {
            let d = hungarian_baseline(&sim, threshold);
            result.inflow = d.inflow.len() as f64;
            result.outflow = d.outflow.len() as f64;
            result.matched = d.matched.len();
            result.decoded_inflow = d.inflow.len();
            result.decoded_outflow = d.outflow.len();
        }
        Association::GroundTruth => unreachable!("handled above"),
    }
    Ok(result)
}

/// Counts every distinct pedestrian of `seq`. Pairs are solved in parallel
/// and accumulated in pair order; a failing pair truncates the result and
/// marks it partial.
pub fn count_video(
    seq: &SceneSequence,
    video_id: &str,
    model: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<VideoCountResult> {
    cfg.solver.validate()?;
    if seq.frames.is_empty() {
        return Err(invalid("sequence has no frames"));
    }
    if cfg.descriptors == DescriptorSource::Encoder {
        let want = model.encoder.input_dim();
        if let Some(f) = seq
            .frames
            .iter()
            .find(|f| f.raw_features.ncols() != want && !f.is_empty())
        {
            return Err(invalid(format!(
                "frame {} features have {} columns, encoder expects {want}",
                f.frame_index,
                f.raw_features.ncols()
            )));
        }
    }
    let schedule = sample_pair_indices(seq.duration(), cfg.tau)?;
    let n0 = initial_count(&seq.frames[0], cfg.initial, &cfg.proposals)?;
    let solved: Vec<Result<PairResult>> = schedule
        .par_iter()
        .map(|&p| solve_pair(seq, p, model, cfg))
        .collect();

    let mut pairs = Vec::with_capacity(solved.len());
    let mut failed_pair = None;
    let mut error = None;
    for (k, r) in solved.into_iter().enumerate() {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) => {
                failed_pair = Some(k);
                error = Some(e.to_string());
                break;
            }
        }
    }
    let mut total = n0;
    for p in &pairs {
        total += p.inflow;
    }
    Ok(VideoCountResult {
        video_id: video_id.to_string(),
        n0,
        tau: cfg.tau,
        pairs,
        total,
        failed_pair,
        error,
    })
}

/// Counts every sequence and scores totals against the distinct identities
/// seen in sampled frames, plus pooled flow errors.
pub fn evaluate_videos(
    seqs: &[SceneSequence],
    model: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<(Vec<VideoCountResult>, MetricsReport)> {
    let mut results = Vec::with_capacity(seqs.len());
    let mut gts = Vec::with_capacity(seqs.len());
    for (k, seq) in seqs.iter().enumerate() {
        let r = count_video(seq, &format!("video-{k:03}"), model, cfg)?;
        if let Some(e) = &r.error {
            return Err(Error::Data(format!("{}: {e}", r.video_id)));
        }
        gts.push(seq.distinct_sampled_identities(cfg.tau)? as f64);
        results.push(r);
    }
    let report = report_for(
        &results,
        &gts,
        &seqs.iter().map(|s| s.duration()).collect::<Vec<_>>(),
    )?;
    Ok((results, report))
}

/// Metrics for already-counted videos.
pub fn report_for(
    results: &[VideoCountResult],
    gts: &[f64],
    lengths: &[usize],
) -> Result<MetricsReport> {
    let ids: Vec<String> = results.iter().map(|r| r.video_id.clone()).collect();
    let preds: Vec<f64> = results.iter().map(|r| r.total).collect();
    let series: Option<Vec<(PairFlows, PairFlows)>> =
        results.iter().map(VideoCountResult::flow_series).collect();
    match series {
        Some(s) if s.iter().any(|(p, _)| !p.is_empty()) => {
            let (pred, gt): (Vec<PairFlows>, Vec<PairFlows>) = s.into_iter().unzip();
            MetricsReport::build(&ids, &preds, gts, lengths, Some((&pred, &gt)))
        }
        _ => MetricsReport::build(&ids, &preds, gts, lengths, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: usize,
    pub mae: f64,
    pub mse: f64,
    pub wrae: f64,
}

/// Counting error per interval, against every identity that ever appears.
pub fn interval_sweep(
    seqs: &[SceneSequence],
    taus: &[usize],
    model: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() || seqs.is_empty() {
        return Err(invalid(
            "interval sweep needs at least one tau and one sequence",
        ));
    }
    let gts: Vec<f64> = seqs
        .iter()
        .map(|s| s.distinct_identities() as f64)
        .collect();
    let lengths: Vec<usize> = seqs.iter().map(|s| s.duration()).collect();
    taus.iter()
        .map(|&tau| {
            let run = PipelineConfig { tau, ..*cfg };
            let mut preds = Vec::with_capacity(seqs.len());
            for (k, seq) in seqs.iter().enumerate() {
                let r = count_video(seq, &format!("video-{k:03}"), model, &run)?;
                if let Some(e) = r.error {
                    return Err(Error::Data(format!("tau {tau}, video {k}: {e}")));
                }
                preds.push(r.total);
            }
            let e = crate::metrics::video_errors(&preds, &gts, &lengths)?;
            Ok(SweepRow {
                tau,
                mae: e.mae,
                mse: e.mse,
                wrae: e.wrae.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::EncoderParams;
    use crate::geometry::HeadPoint;
    use crate::simulator::{simulate, SceneConfig};

    fn scene(seed: u64) -> SceneConfig {
        SceneConfig {
            height: 120,
            width: 200,
            duration: 120,
            initial_count: 10,
            entry_rate: 0.15,
            separability: 1.0,
            appearance_dim: 32,
            appearance_noise_std: 0.0,
            nuisance_rank: 0,
            rng_seed: seed,
            ..SceneConfig::default()
        }
    }

    fn gt_model(dim: usize) -> ModelParams {
        ModelParams::new(EncoderParams::identity(dim), 0.5)
    }

    fn gt_cfg(tau: usize) -> PipelineConfig {
        PipelineConfig {
            tau,
            descriptors: DescriptorSource::GroundTruth,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn single_frame_video_counts_first_frame() {
        let seq = simulate(&SceneConfig {
            duration: 1,
            ..scene(1)
        })
        .unwrap();
        let r = count_video(&seq, "v", &gt_model(32), &gt_cfg(5)).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.total, 10.0);
    }

    #[test]
    fn closed_scene_total_is_first_frame_count() {
        let seq = simulate(&SceneConfig {
            entry_rate: 0.0,
            speed_range: (0.0, 0.0),
            jitter_std: 0.0,
            ..scene(2)
        })
        .unwrap();
        let r = count_video(&seq, "v", &gt_model(32), &gt_cfg(30)).unwrap();
        assert!((r.total - 10.0).abs() <= 0.5, "{}", r.total);
    }

    #[test]
    fn gt_descriptor_mode_tracks_distinct_identities() {
        for seed in 0..3 {
            let seq = simulate(&SceneConfig {
                separability: 1.0,
                appearance_dim: 128,
                appearance_noise_std: 0.0,
                nuisance_rank: 0,
                rng_seed: seed,
                ..SceneConfig::default()
            })
            .unwrap();
            let r = count_video(&seq, "v", &gt_model(128), &gt_cfg(30)).unwrap();
            let truth = seq.distinct_sampled_identities(30).unwrap() as f64;
            assert!(
                (r.total - truth).abs() <= 0.01 * truth,
                "{} vs {truth}",
                r.total
            );
        }
    }

    #[test]
    fn total_is_bitwise_sum_of_addends() {
        let seq = simulate(&scene(4)).unwrap();
        let r = count_video(&seq, "v", &gt_model(32), &gt_cfg(7)).unwrap();
        let mut acc = r.n0;
        for p in &r.pairs {
            acc += p.inflow;
            assert!(p.inflow >= -1e-9);
        }
        assert_eq!(acc.to_bits(), r.total.to_bits());
    }

    #[test]
    fn oracle_association_is_exact() {
        let seq = simulate(&scene(5)).unwrap();
        let cfg = PipelineConfig {
            association: Association::GroundTruth,
            ..gt_cfg(9)
        };
        let r = count_video(&seq, "v", &gt_model(32), &cfg).unwrap();
        assert_eq!(r.total, seq.distinct_sampled_identities(9).unwrap() as f64);
    }

    #[test]
    fn appending_frames_never_lowers_the_total() {
        let full = simulate(&scene(6)).unwrap();
        let mut short = full.clone();
        short.frames.truncate(61);
        let a = count_video(&short, "v", &gt_model(32), &gt_cfg(10)).unwrap();
        let mut longer = full.clone();
        longer.frames.truncate(71);
        let b = count_video(&longer, "v", &gt_model(32), &gt_cfg(10)).unwrap();
        assert!(b.total >= a.total - 1e-6);
    }

    #[test]
    fn initial_count_modes() {
        let pts: Vec<HeadPoint> = [
            (20.0, 20.0),
            (20.0, 60.0),
            (60.0, 20.0),
            (60.0, 60.0),
            (100.0, 100.0),
        ]
        .iter()
        .enumerate()
        .map(|(k, &(r, c))| HeadPoint::with_identity(r, c, k as u64))
        .collect();
        let frame = FrameObservation::new(
            PointSet::new(0, 128, 128, pts.clone()).unwrap(),
            Array2::zeros((5, 2)),
        )
        .unwrap();
        let p = ProposalConfig::default();
        assert_eq!(
            initial_count(&frame, InitialCountMode::GroundTruth, &p).unwrap(),
            5.0
        );
        assert!((initial_count(&frame, InitialCountMode::Density, &p).unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(
            initial_count(&frame, InitialCountMode::Proposals, &p).unwrap(),
            5.0
        );

        let mut merged = pts;
        merged[1] = HeadPoint::with_identity(20.0, 22.0, 1);
        let frame = FrameObservation::new(
            PointSet::new(0, 128, 128, merged).unwrap(),
            Array2::zeros((5, 2)),
        )
        .unwrap();
        assert_eq!(
            initial_count(&frame, InitialCountMode::Proposals, &p).unwrap(),
            4.0
        );
    }

    #[test]
    fn proposal_points_count_close_to_truth() {
        let seq = simulate(&scene(7)).unwrap();
        let cfg = PipelineConfig {
            points: PointSource::Proposals,
            initial: InitialCountMode::Proposals,
            ..gt_cfg(10)
        };
        let r = count_video(&seq, "v", &gt_model(32), &cfg).unwrap();
        let truth = seq.distinct_sampled_identities(10).unwrap() as f64;
        assert!(
            (r.total - truth).abs() <= 0.1 * truth,
            "{} vs {truth}",
            r.total
        );
    }

    #[test]
    fn pair_failure_marks_partial_result() {
        let mut seq = simulate(&scene(8)).unwrap();
        seq.frames[20].raw_features[[0, 0]] = f64::NAN;
        let cfg = PipelineConfig {
            descriptors: DescriptorSource::Encoder,
            ..gt_cfg(10)
        };
        let r = count_video(&seq, "v", &gt_model(32), &cfg).unwrap();
        assert!(r.is_partial());
        assert_eq!(r.failed_pair, Some(1));
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.total, r.n0 + r.pairs[0].inflow);
    }

    #[test]
    fn zero_iterations_rejected_up_front() {
        let seq = simulate(&scene(8)).unwrap();
        let cfg = PipelineConfig {
            solver: SinkhornConfig::new(1.0, 0),
            ..gt_cfg(10)
        };
        assert!(count_video(&seq, "v", &gt_model(32), &cfg).is_err());
    }

    #[test]
    fn sweep_single_tau_equals_count_error() {
        let seq = simulate(&scene(9)).unwrap();
        let rows = interval_sweep(
            std::slice::from_ref(&seq),
            &[10],
            &gt_model(32),
            &gt_cfg(10),
        )
        .unwrap();
        let r = count_video(&seq, "v", &gt_model(32), &gt_cfg(10)).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mae - (r.total - seq.distinct_identities() as f64).abs()).abs() < 1e-12);
        let again = interval_sweep(
            std::slice::from_ref(&seq),
            &[10],
            &gt_model(32),
            &gt_cfg(10),
        )
        .unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn evaluation_report_has_flow_errors() {
        let seqs: Vec<SceneSequence> = (0..2).map(|s| simulate(&scene(s)).unwrap()).collect();
        let (results, report) = evaluate_videos(&seqs, &gt_model(32), &gt_cfg(10)).unwrap();
        assert_eq!(results.len(), 2);
        assert!(report.miae.unwrap() < 0.5);
        assert!(report.moae.unwrap() < 0.5);
    }
}
