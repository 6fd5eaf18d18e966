//! Video-level counting errors and pair-level flow errors.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoErrors {
    pub mae: f64,
    /// Root of the mean squared error, as reported in counting benchmarks.
    pub mse: f64,
    /// Length-weighted relative error in percent; `None` when every video
    /// has a zero ground truth.
    pub wrae: Option<f64>,
    /// Videos left out of the relative error because their ground truth is 0.
    pub wrae_excluded: Vec<usize>,
}

/// MAE, root-mean-square error and length-weighted relative error.
/// Weights are renormalized over the videos with non-zero ground truth.
pub fn video_errors(preds: &[f64], gts: &[f64], lengths: &[usize]) -> Result<VideoErrors> {
    if preds.is_empty() {
        return Err(invalid("need at least one video"));
    }
    if preds.len() != gts.len() || preds.len() != lengths.len() {
        return Err(Error::Data(format!(
            "{} predictions, {} ground truths, {} lengths",
            preds.len(),
            gts.len(),
            lengths.len()
        )));
    }
    if preds.iter().chain(gts).any(|v| !v.is_finite()) {
        return Err(invalid("counts must be finite"));
    }
    let n = preds.len() as f64;
    let mae = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n;
    let mse = (preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (p - g).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();

    let wrae_excluded: Vec<usize> = (0..gts.len()).filter(|&i| gts[i] == 0.0).collect();
    let weight_total: f64 = (0..gts.len())
        .filter(|&i| gts[i] != 0.0)
        .map(|i| lengths[i] as f64)
        .sum();
    let wrae = (weight_total > 0.0).then(|| {
        (0..gts.len())
            .filter(|&i| gts[i] != 0.0)
            .map(|i| lengths[i] as f64 / weight_total * (preds[i] - gts[i]).abs() / gts[i].abs())
            .sum::<f64>()
            * 100.0
    });
    Ok(VideoErrors {
        mae,
        mse,
        wrae,
        wrae_excluded,
    })
}

/// Per-pair `(inflow, outflow)` for one video.
pub type PairFlows = Vec<(f64, f64)>;

/// Mean absolute inflow and outflow error pooled over every pair of every
/// video.
pub fn flow_errors(pred: &[PairFlows], gt: &[PairFlows]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} predicted videos vs {} ground-truth videos",
            pred.len(),
            gt.len()
        )));
    }
    let mut pairs = 0usize;
    let (mut din, mut dout) = (0.0, 0.0);
    for (v, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Data(format!(
                "video {v}: {} predicted pairs vs {} ground-truth pairs",
                p.len(),
                g.len()
            )));
        }
        for (a, b) in p.iter().zip(g) {
            din += (a.0 - b.0).abs();
            dout += (a.1 - b.1).abs();
        }
        pairs += p.len();
    }
    if pairs == 0 {
        return Err(invalid("no frame pairs to evaluate"));
    }
    Ok((din / pairs as f64, dout / pairs as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoBreakdown {
    pub video_id: String,
    pub prediction: f64,
    pub ground_truth: f64,
    pub length: usize,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub wrae_percent: Option<f64>,
    pub wrae_excluded: Vec<String>,
    pub miae: Option<f64>,
    pub moae: Option<f64>,
    pub videos: Vec<VideoBreakdown>,
}

impl MetricsReport {
    pub fn build(
        ids: &[String],
        preds: &[f64],
        gts: &[f64],
        lengths: &[usize],
        flows: Option<(&[PairFlows], &[PairFlows])>,
    ) -> Result<Self> {
        if ids.len() != preds.len() {
            return Err(Error::Data(format!(
                "{} video ids for {} predictions",
                ids.len(),
                preds.len()
            )));
        }
        let v = video_errors(preds, gts, lengths)?;
        let (miae, moae) = match flows {
            Some((p, g)) => {
                let (i, o) = flow_errors(p, g)?;
                (Some(i), Some(o))
            }
            None => (None, None),
        };
        Ok(Self {
            mae: v.mae,
            mse: v.mse,
            wrae_percent: v.wrae,
            wrae_excluded: v.wrae_excluded.iter().map(|&i| ids[i].clone()).collect(),
            miae,
            moae,
            videos: (0..ids.len())
                .map(|i| VideoBreakdown {
                    video_id: ids[i].clone(),
                    prediction: preds[i],
                    ground_truth: gts[i],
                    length: lengths[i],
                    abs_error: (preds[i] - gts[i]).abs(),
                })
                .collect(),
        })
    }

    /// One-row summary CSV. `mrae` repeats `wrae` under the name used in
    /// published result tables.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mae", "mse", "wrae", "mrae", "miae", "moae"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            self.mae.to_string(),
            self.mse.to_string(),
            opt(self.wrae_percent),
            opt(self.wrae_percent),
            opt(self.miae),
            opt(self.moae),
        ])?;
        w.flush()?;
        Ok(())
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[k]] {
            end += 1;
        }
        let mid = (k + end) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=end] {
            out[idx] = mid;
        }
        k = end + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid(
            "spearman needs two equally long series of length >= 2",
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(invalid("spearman is undefined for a constant series"));
    }
    Ok(cov / (vx * vy).sqrt())
}
