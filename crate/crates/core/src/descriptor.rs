//! Head descriptors, similarity, the matching loss and its exact gradient
//! through an unrolled Sinkhorn solve.
//!
//! The forward chain is
//! `raw -> affine (tanh between layers) -> L2 normalize -> dot products ->
//! augmented score -> L naive Sinkhorn iterations -> count scale -> loss`,
//! and [`loss_gradient`] runs the matching reverse pass by hand. Hard-negative
//! targets are mined from the forward plan and held fixed in the reverse pass.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ot::{build_augmented_score, build_marginals, PlanScale, SinkhornConfig, TransportPlan};

/// Default descriptor dimension.
pub const DEFAULT_DESCRIPTOR_DIM: usize = 256;
/// Clamp applied inside both log terms of the matching loss.
pub const PROB_EPS: f64 = 1e-12;

/// Descriptors stored row-wise, aligned index-for-index with a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    data: Array2<f64>,
}

impl DescriptorSet {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("descriptor entries must be finite"));
        }
        Ok(Self { data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            data: Array2::zeros((0, dim)),
        }
    }

    /// Rows scaled to unit norm; zero rows stay zero.
    pub fn normalized(raw: &Array2<f64>) -> Result<Self> {
        let mut data = raw.clone();
        for mut row in data.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        Self::new(data)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Stack of affine layers with `tanh` between them. One layer by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<AffineLayer>,
}

impl EncoderParams {
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self> {
        let params = Self { layers };
        params.validate()?;
        Ok(params)
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![AffineLayer {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
        }
    }

    /// Gaussian (Glorot-scaled) weights and zero biases for widths
    /// `input -> hidden... -> output`.
    pub fn random(input: usize, hidden: &[usize], output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / (w[0] + w[1]) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                AffineLayer {
                    weight: Array2::from_shape_fn((w[1], w[0]), |_| normal.sample(&mut rng)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("encoder needs at least one layer"));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k}: bias length {} vs output dim {}",
                    layer.bias.len(),
                    layer.output_dim()
                )));
            }
            if k > 0 && self.layers[k - 1].output_dim() != layer.input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k} input does not match layer {}",
                    k - 1
                )));
            }
            if layer
                .weight
                .iter()
                .chain(layer.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(invalid(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }
}

/// Encoder plus the learnable dust-bin score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub bin_score: f64,
}

impl ModelParams {
    pub fn new(encoder: EncoderParams, bin_score: f64) -> Self {
        Self { encoder, bin_score }
    }
}

/// Activations of one forward pass through the encoder.
struct EncoderTape {
    /// Input followed by every hidden activation (post-tanh).
    activations: Vec<Array1<f64>>,
    /// Final pre-normalization output.
    output: Array1<f64>,
    norm: f64,
}

fn encoder_forward(raw: ArrayView1<'_, f64>, params: &EncoderParams) -> EncoderTape {
    let mut activations = vec![raw.to_owned()];
    let last = params.layers.len() - 1;
    let mut output = Array1::zeros(0);
    for (k, layer) in params.layers.iter().enumerate() {
        let z = layer.weight.dot(&activations[k]) + &layer.bias;
        if k == last {
            output = z;
        } else {
            activations.push(z.mapv(f64::tanh));
        }
    }
    let norm = output.dot(&output).sqrt();
    EncoderTape {
        activations,
        output,
        norm,
    }
}

impl EncoderTape {
    fn descriptor(&self) -> Array1<f64> {
        if self.norm == 0.0 {
            Array1::zeros(self.output.len())
        } else {
            &self.output / self.norm
        }
    }
}

/// Affine map(s) followed by Euclidean normalization. A zero output stays zero.
pub fn encode(raw: &[f64], params: &EncoderParams) -> Result<Vec<f64>> {
    if raw.len() != params.input_dim() {
        return Err(invalid(format!(
            "feature length {} does not match encoder input {}",
            raw.len(),
            params.input_dim()
        )));
    }
    Ok(encoder_forward(ArrayView1::from(raw), params)
        .descriptor()
        .to_vec())
}

/// Encodes every row of `raw`.
pub fn encode_set(raw: &Array2<f64>, params: &EncoderParams) -> Result<DescriptorSet> {
    if raw.ncols() != params.input_dim() {
        return Err(invalid(format!(
            "feature length {} does not match encoder input {}",
            raw.ncols(),
            params.input_dim()
        )));
    }
    let mut out = Array2::zeros((raw.nrows(), params.output_dim()));
    for (i, row) in raw.rows().into_iter().enumerate() {
        out.row_mut(i)
            .assign(&encoder_forward(row, params).descriptor());
    }
    DescriptorSet::new(out)
}

/// `C[i][j] = x_i . y_j`.
pub fn similarity_matrix(x: &DescriptorSet, y: &DescriptorSet) -> Array2<f64> {
    if x.is_empty() || y.is_empty() {
        return Array2::zeros((x.len(), y.len()));
    }
    x.as_array().dot(&y.as_array().t())
}

/// Binary `(M+1) x (N+1)` target: every real row and real column holds
/// exactly one 1 (its partner or its dust bin); the corner is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthAssignment {
    matrix: Array2<u8>,
}

impl GroundTruthAssignment {
    pub fn from_matches(m: usize, n: usize, matches: &[(usize, usize)]) -> Result<Self> {
        let mut matrix = Array2::zeros((m + 1, n + 1));
        let mut row_used = vec![false; m];
        let mut col_used = vec![false; n];
        for &(i, j) in matches {
            if i >= m || j >= n {
                return Err(Error::ShapeMismatch(format!(
                    "match ({i},{j}) outside {m}x{n}"
                )));
            }
            if row_used[i] || col_used[j] {
                return Err(Error::Data(format!("match ({i},{j}) reuses an instance")));
            }
            row_used[i] = true;
            col_used[j] = true;
            matrix[[i, j]] = 1;
        }
        for i in (0..m).filter(|&i| !row_used[i]) {
            matrix[[i, n]] = 1;
        }
        for j in (0..n).filter(|&j| !col_used[j]) {
            matrix[[m, j]] = 1;
        }
        Ok(Self { matrix })
    }

    /// Matches instances sharing an identity label; unlabeled instances go to
    /// their dust bin.
    pub fn from_labels(earlier: &[Option<u64>], later: &[Option<u64>]) -> Result<Self> {
        let matches: Vec<(usize, usize)> = earlier
            .iter()
            .enumerate()
            .filter_map(|(i, a)| {
                a.and_then(|id| later.iter().position(|b| *b == Some(id)).map(|j| (i, j)))
            })
            .collect();
        Self::from_matches(earlier.len(), later.len(), &matches)
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows() - 1
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols() - 1
    }

    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.matrix[[i, j]] == 1
    }

    pub fn matrix(&self) -> &Array2<u8> {
        &self.matrix
    }

    /// Real-to-real pairs, sorted by row.
    pub fn matches(&self) -> Vec<(usize, usize)> {
        let (m, n) = (self.rows(), self.cols());
        (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_set(i, j))
            .collect()
    }

    pub fn inflow(&self) -> usize {
        let (m, n) = (self.rows(), self.cols());
        (0..n).filter(|&j| self.is_set(m, j)).count()
    }

    pub fn outflow(&self) -> usize {
        let (m, n) = (self.rows(), self.cols());
        (0..m).filter(|&i| self.is_set(i, n)).count()
    }

    /// Same assignment with later-frame instances reordered so that new
    /// column `k` is old column `perm[k]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut matrix = Array2::zeros((m + 1, n + 1));
        for i in 0..=m {
            for (k, &old) in perm.iter().enumerate() {
                matrix[[i, k]] = self.matrix[[i, old]];
            }
            matrix[[i, n]] = self.matrix[[i, n]];
        }
        Self { matrix }
    }
}

fn check_plan_shape(plan: &TransportPlan, gt: &GroundTruthAssignment) -> Result<()> {
    if plan.matrix.dim() != gt.matrix.dim() {
        return Err(Error::ShapeMismatch(format!(
            "plan is {:?} but ground truth is {:?}",
            plan.matrix.dim(),
            gt.matrix.dim()
        )));
    }
    Ok(())
}

/// For every real row and real column, the most probable real cell that is
/// not a ground-truth match. Rows and columns are both mined; a cell chosen
/// twice is marked once.
pub fn hard_negative_targets(
    plan: &TransportPlan,
    gt: &GroundTruthAssignment,
) -> Result<Array2<bool>> {
    check_plan_shape(plan, gt)?;
    let (m, n) = (plan.rows(), plan.cols());
    let p = &plan.matrix;
    let mut mask = Array2::from_elem((m + 1, n + 1), false);
    let pick = |cells: &mut dyn Iterator<Item = (usize, usize)>| -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (i, j) in cells {
            if gt.is_set(i, j) {
                continue;
            }
            if best.is_none_or(|(_, v)| p[[i, j]] > v) {
                best = Some(((i, j), p[[i, j]]));
            }
        }
        best.map(|(cell, _)| cell)
    };
    for i in 0..m {
        if let Some(cell) = pick(&mut (0..n).map(|j| (i, j))) {
            mask[cell] = true;
        }
    }
    for j in 0..n {
        if let Some(cell) = pick(&mut (0..m).map(|i| (i, j))) {
            mask[cell] = true;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `-sum log P` over ground-truth cells.
    pub positive: f64,
    /// `-sum log(1 - P)` over hard-negative cells.
    pub hard_negative: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.positive += other.positive;
        self.hard_negative += other.hard_negative;
    }
}

/// Matching loss with hard negatives mined from `plan` itself.
pub fn matching_loss(plan: &TransportPlan, gt: &GroundTruthAssignment) -> Result<LossBreakdown> {
    let hard = hard_negative_targets(plan, gt)?;
    matching_loss_with_targets(plan, gt, Some(&hard))
}

/// Matching loss against explicit hard-negative targets (`None` drops the
/// hard-negative term).
pub fn matching_loss_with_targets(
    plan: &TransportPlan,
    gt: &GroundTruthAssignment,
    hard: Option<&Array2<bool>>,
) -> Result<LossBreakdown> {
    plan.require_count_scale()?;
    check_plan_shape(plan, gt)?;
    let mut positive = 0.0;
    let mut hard_negative = 0.0;
    for ((i, j), &p) in plan.matrix.indexed_iter() {
        if gt.is_set(i, j) {
            positive -= p.max(PROB_EPS).ln();
        } else if hard.is_some_and(|h| h[[i, j]]) {
            hard_negative -= (1.0 - p).max(PROB_EPS).ln();
        }
    }
    Ok(LossBreakdown {
        total: positive + hard_negative,
        positive,
        hard_negative,
    })
}

/// Gradient of the matching loss with respect to every trainable quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    /// One `(weight, bias)` gradient per encoder layer.
    pub layers: Vec<AffineLayer>,
    pub bin_score: f64,
    pub x_raw: Array2<f64>,
    pub y_raw: Array2<f64>,
}

impl ModelGradient {
    fn zeros_like(params: &ModelParams, m: usize, n: usize) -> Self {
        Self {
            layers: params
                .encoder
                .layers
                .iter()
                .map(|l| AffineLayer {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            bin_score: 0.0,
            x_raw: Array2::zeros((m, params.encoder.input_dim())),
            y_raw: Array2::zeros((n, params.encoder.input_dim())),
        }
    }

    /// Flattened parameter gradient in the order used by [`flatten_params`].
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out.push(self.bin_score);
        out
    }
}

/// Encoder weights, biases (layer by layer), then the bin score.
pub fn flatten_params(params: &ModelParams) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &params.encoder.layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    out.push(params.bin_score);
    out
}

/// Inverse of [`flatten_params`] using `template` for shapes.
pub fn unflatten_params(values: &[f64], template: &ModelParams) -> ModelParams {
    let mut it = values.iter().copied();
    let layers = template
        .encoder
        .layers
        .iter()
        .map(|l| AffineLayer {
            weight: Array2::from_shape_fn(l.weight.dim(), |_| it.next().expect("enough values")),
            bias: Array1::from_shape_fn(l.bias.len(), |_| it.next().expect("enough values")),
        })
        .collect();
    ModelParams {
        encoder: EncoderParams { layers },
        bin_score: it.next().expect("bin score"),
    }
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: LossBreakdown,
    pub gradient: ModelGradient,
    /// Count-scale plan from the forward pass.
    pub plan: TransportPlan,
}

/// Options for the differentiable path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub solver: SinkhornConfig,
    pub hard_negatives: bool,
}

impl LossOptions {
    pub fn new(solver: SinkhornConfig) -> Self {
        Self {
            solver,
            hard_negatives: true,
        }
    }
}

struct Forward {
    tapes_x: Vec<EncoderTape>,
    tapes_y: Vec<EncoderTape>,
    x: Array2<f64>,
    y: Array2<f64>,
    kernel: Array2<f64>,
    /// `us[l]`, `vs[l]` after iteration `l` (index 0 of `vs` is the all-ones start).
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    a: Vec<f64>,
    b: Vec<f64>,
    plan: TransportPlan,
}

fn stack(rows: &[Array1<f64>], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

fn forward(
    x_raw: &Array2<f64>,
    y_raw: &Array2<f64>,
    params: &ModelParams,
    gt: &GroundTruthAssignment,
    solver: &SinkhornConfig,
) -> Result<Forward> {
    solver.validate()?;
    params.encoder.validate()?;
    let d_in = params.encoder.input_dim();
    if x_raw.ncols() != d_in || y_raw.ncols() != d_in {
        return Err(invalid(format!(
            "raw features have {} / {} columns, encoder expects {d_in}",
            x_raw.ncols(),
            y_raw.ncols()
        )));
    }
    let (m, n) = (x_raw.nrows(), y_raw.nrows());
    if gt.rows() != m || gt.cols() != n {
        return Err(Error::ShapeMismatch(format!(
            "ground truth is for {}x{}, features are {m}x{n}",
            gt.rows(),
            gt.cols()
        )));
    }
    let d_out = params.encoder.output_dim();
    let tapes_x: Vec<EncoderTape> = x_raw
        .rows()
        .into_iter()
        .map(|r| encoder_forward(r, &params.encoder))
        .collect();
    let tapes_y: Vec<EncoderTape> = y_raw
        .rows()
        .into_iter()
        .map(|r| encoder_forward(r, &params.encoder))
        .collect();
    let x = stack(
        &tapes_x
            .iter()
            .map(EncoderTape::descriptor)
            .collect::<Vec<_>>(),
        d_out,
    );
    let y = stack(
        &tapes_y
            .iter()
            .map(EncoderTape::descriptor)
            .collect::<Vec<_>>(),
        d_out,
    );
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "encoder",
            iteration: 0,
        });
    }
    let sim = if m == 0 || n == 0 {
        Array2::zeros((m, n))
    } else {
        x.dot(&y.t())
    };
    let score = build_augmented_score(&sim, params.bin_score)?;
    let marg = build_marginals(m, n)?;
    let kernel = score.matrix().mapv(|c| (c / solver.sigma).exp());
    if kernel.iter().any(|k| !k.is_finite() || *k == 0.0) {
        return Err(Error::NonFinite {
            stage: "kernel",
            iteration: 0,
        });
    }
    let a = marg.normalized_source();
    let b = marg.normalized_target();
    let (rows, cols) = kernel.dim();
    let mut us = Vec::with_capacity(solver.iterations + 1);
    let mut vs = Vec::with_capacity(solver.iterations + 1);
    us.push(vec![1.0; rows]);
    vs.push(vec![1.0; cols]);
    for l in 1..=solver.iterations {
        let v_prev = &vs[l - 1];
        let u: Vec<f64> = (0..rows)
            .map(|i| a[i] / (0..cols).map(|j| kernel[[i, j]] * v_prev[j]).sum::<f64>())
            .collect();
        let v: Vec<f64> = (0..cols)
            .map(|j| b[j] / (0..rows).map(|i| kernel[[i, j]] * u[i]).sum::<f64>())
            .collect();
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                stage: "sinkhorn",
                iteration: l,
            });
        }
        us.push(u);
        vs.push(v);
    }
    let (u, v) = (&us[solver.iterations], &vs[solver.iterations]);
    let matrix = Array2::from_shape_fn((rows, cols), |(i, j)| {
        u[i] * kernel[[i, j]] * v[j] * marg.scale
    });
    let marginal_violation = crate::ot::marginal_violation(&matrix, &marg, 1.0);
    let plan = TransportPlan {
        matrix,
        scale: PlanScale::Count,
        mass_scale: marg.scale,
        iterations_run: solver.iterations,
        marginal_violation,
        sigma: solver.sigma,
        log_fallback: false,
        dual_trace: Vec::new(),
    };
    Ok(Forward {
        tapes_x,
        tapes_y,
        x,
        y,
        kernel,
        us,
        vs,
        a,
        b,
        plan,
    })
}

/// Loss only, through the same unrolled naive-domain path as [`loss_gradient`].
pub fn loss_value(
    x_raw: &Array2<f64>,
    y_raw: &Array2<f64>,
    params: &ModelParams,
    gt: &GroundTruthAssignment,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let fwd = forward(x_raw, y_raw, params, gt, &opts.solver)?;
    if opts.hard_negatives {
        matching_loss(&fwd.plan, gt)
    } else {
        matching_loss_with_targets(&fwd.plan, gt, None)
    }
}

fn encoder_backward(
    tape: &EncoderTape,
    grad_desc: ArrayView1<'_, f64>,
    params: &EncoderParams,
    grads: &mut [AffineLayer],
) -> Array1<f64> {
    let layers = &params.layers;
    if tape.norm == 0.0 {
        return Array1::zeros(layers[0].input_dim());
    }
    let desc = &tape.output / tape.norm;
    let radial = desc.dot(&grad_desc);
    let mut gz: Array1<f64> = (&grad_desc - &(&desc * radial)) / tape.norm;
    for k in (0..layers.len()).rev() {
        let input = &tape.activations[k];
        for (r, g) in gz.iter().enumerate() {
            grads[k].bias[r] += g;
            let mut row = grads[k].weight.row_mut(r);
            row.scaled_add(*g, input);
        }
        let ga = layers[k].weight.t().dot(&gz);
        if k == 0 {
            return ga;
        }
        gz = &ga * &input.mapv(|h| 1.0 - h * h);
    }
    unreachable!("loop returns at the first layer")
}

/// Exact reverse-mode gradient of the matching loss through `opts.solver.iterations`
/// unrolled naive Sinkhorn iterations.
pub fn loss_gradient(
    x_raw: &Array2<f64>,
    y_raw: &Array2<f64>,
    params: &ModelParams,
    gt: &GroundTruthAssignment,
    opts: &LossOptions,
) -> Result<LossGradient> {
    let fwd = forward(x_raw, y_raw, params, gt, &opts.solver)?;
    let hard = if opts.hard_negatives {
        Some(hard_negative_targets(&fwd.plan, gt)?)
    } else {
        None
    };
    let loss = matching_loss_with_targets(&fwd.plan, gt, hard.as_ref())?;

    let (m, n) = (x_raw.nrows(), y_raw.nrows());
    let (rows, cols) = fwd.kernel.dim();
    let kernel = &fwd.kernel;
    let scale = fwd.plan.mass_scale;
    let sigma = opts.solver.sigma;
    let iters = opts.solver.iterations;

    // dL/dP at normalized scale.
    let mut g_plan = Array2::<f64>::zeros((rows, cols));
    for ((i, j), &p) in fwd.plan.matrix.indexed_iter() {
        let g = if gt.is_set(i, j) {
            if p > PROB_EPS {
                -1.0 / p
            } else {
                0.0
            }
        } else if hard.as_ref().is_some_and(|h| h[[i, j]]) {
            let q = 1.0 - p;
            if q > PROB_EPS {
                1.0 / q
            } else {
                0.0
            }
        } else {
            0.0
        };
        g_plan[[i, j]] = g * scale;
    }

    let u_last = &fwd.us[iters];
    let v_last = &fwd.vs[iters];
    let mut g_kernel = Array2::<f64>::zeros((rows, cols));
    let mut g_u = vec![0.0; rows];
    let mut g_v = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            let gp = g_plan[[i, j]];
            if gp == 0.0 {
                continue;
            }
            g_u[i] += gp * kernel[[i, j]] * v_last[j];
            g_v[j] += gp * u_last[i] * kernel[[i, j]];
            g_kernel[[i, j]] += gp * u_last[i] * v_last[j];
        }
    }

    for l in (1..=iters).rev() {
        let u = &fwd.us[l];
        let v = &fwd.vs[l];
        let v_prev = &fwd.vs[l - 1];
        // v = b / (K^T u)
        let g_s: Vec<f64> = (0..cols)
            .map(|j| {
                let s = fwd.b[j] / v[j];
                if fwd.b[j] == 0.0 {
                    0.0
                } else {
                    -g_v[j] * v[j] / s
                }
            })
            .collect();
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                g_kernel[[i, j]] += g_s[j] * u[i];
                acc += kernel[[i, j]] * g_s[j];
            }
            g_u[i] += acc;
        }
        // u = a / (K v_prev)
        let g_r: Vec<f64> = (0..rows)
            .map(|i| {
                if fwd.a[i] == 0.0 {
                    0.0
                } else {
                    let r = fwd.a[i] / u[i];
                    -g_u[i] * u[i] / r
                }
            })
            .collect();
        let mut next_g_v = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                g_kernel[[i, j]] += g_r[i] * v_prev[j];
                next_g_v[j] += kernel[[i, j]] * g_r[i];
            }
        }
        if g_kernel.iter().any(|g| !g.is_finite()) || next_g_v.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                stage: "sinkhorn backward",
                iteration: l,
            });
        }
        g_v = next_g_v;
        g_u = vec![0.0; rows];
    }

    // K = exp(C / sigma)
    let g_score = &g_kernel * kernel / sigma;
    let mut grad = ModelGradient::zeros_like(params, m, n);
    grad.bin_score = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .filter(|&(i, j)| i == m || j == n)
        .map(|(i, j)| g_score[[i, j]])
        .sum();

    let g_sim = g_score.slice(ndarray::s![..m, ..n]).to_owned();
    let g_x = if n == 0 {
        Array2::zeros(fwd.x.dim())
    } else {
        g_sim.dot(&fwd.y)
    };
    let g_y = if m == 0 {
        Array2::zeros(fwd.y.dim())
    } else {
        g_sim.t().dot(&fwd.x)
    };
    for (i, tape) in fwd.tapes_x.iter().enumerate() {
        let g_raw = encoder_backward(tape, g_x.row(i), &params.encoder, &mut grad.layers);
        grad.x_raw.row_mut(i).assign(&g_raw);
    }
    for (j, tape) in fwd.tapes_y.iter().enumerate() {
        let g_raw = encoder_backward(tape, g_y.row(j), &params.encoder, &mut grad.layers);
        grad.y_raw.row_mut(j).assign(&g_raw);
    }
    Ok(LossGradient {
        loss,
        gradient: grad,
        plan: fwd.plan,
    })
}

/// Worst relative disagreement between the analytic gradient and central
/// differences over every parameter and raw feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
}

/// Relative error with a floor on the magnitude so exactly-zero components
/// compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of [`loss_gradient`] with step `h`.
pub fn check_gradient(
    x_raw: &Array2<f64>,
    y_raw: &Array2<f64>,
    params: &ModelParams,
    gt: &GroundTruthAssignment,
    opts: &LossOptions,
    h: f64,
) -> Result<GradientCheck> {
    let analytic = loss_gradient(x_raw, y_raw, params, gt, opts)?;
    let base = flatten_params(params);
    let g_params = analytic.gradient.flatten_params();
    let mut worst = GradientCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        checked: 0,
    };
    let mut record = |a: f64, num: f64| {
        worst.max_relative_error = worst.max_relative_error.max(relative_error(a, num));
        worst.max_absolute_error = worst.max_absolute_error.max((a - num).abs());
        worst.checked += 1;
    };
    for k in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[k] += h;
        minus[k] -= h;
        let lp = loss_value(x_raw, y_raw, &unflatten_params(&plus, params), gt, opts)?.total;
        let lm = loss_value(x_raw, y_raw, &unflatten_params(&minus, params), gt, opts)?.total;
        record(g_params[k], (lp - lm) / (2.0 * h));
    }
    for (which, raw, g) in [
        (0, x_raw, &analytic.gradient.x_raw),
        (1, y_raw, &analytic.gradient.y_raw),
    ] {
        for idx in 0..raw.len() {
            let (r, c) = (idx / raw.ncols(), idx % raw.ncols());
            let mut plus = raw.clone();
            let mut minus = raw.clone();
            plus[[r, c]] += h;
            minus[[r, c]] -= h;
            let (lp, lm) = if which == 0 {
                (
                    loss_value(&plus, y_raw, params, gt, opts)?.total,
                    loss_value(&minus, y_raw, params, gt, opts)?.total,
                )
            } else {
                (
                    loss_value(x_raw, &plus, params, gt, opts)?.total,
                    loss_value(x_raw, &minus, params, gt, opts)?.total,
                )
            };
            record(g[[r, c]], (lp - lm) / (2.0 * h));
        }
    }
    Ok(worst)
}

/// Random `m x n` problem with `d`-dimensional raw features in `[-1, 1)`
/// and a random partial matching.
pub fn random_check_instance(
    seed: u64,
    m: usize,
    n: usize,
    d: usize,
) -> Result<(Array2<f64>, Array2<f64>, GroundTruthAssignment)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let mut cols: Vec<usize> = (0..n).collect();
    cols.shuffle(&mut rng);
    let k = rng.random_range(0..=m.min(n));
    let matches: Vec<(usize, usize)> = (0..k).map(|i| (i, cols[i])).collect();
    Ok((x, y, GroundTruthAssignment::from_matches(m, n, &matches)?))
}

/// Worst gradient disagreement over `instances` random `3 x 4` problems with
/// random encoders (with and without a hidden layer) and bin scores.
pub fn gradient_check_suite(
    seed: u64,
    instances: usize,
    solver: SinkhornConfig,
    h: f64,
) -> Result<GradientCheck> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = LossOptions::new(solver);
    let mut worst = GradientCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        checked: 0,
    };
    for k in 0..instances {
        let (x, y, gt) = random_check_instance(rng.random(), 3, 4, 5)?;
        let hidden: &[usize] = if k % 2 == 0 { &[] } else { &[6] };
        let params = ModelParams::new(
            EncoderParams::random(5, hidden, 4, rng.random()),
            rng.random_range(-0.5..0.5),
        );
        let c = check_gradient(&x, &y, &params, &gt, &opts, h)?;
        worst.max_relative_error = worst.max_relative_error.max(c.max_relative_error);
        worst.max_absolute_error = worst.max_absolute_error.max(c.max_absolute_error);
        worst.checked += c.checked;
    }
    Ok(worst)
}

/// One frame pair of training data.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x_raw: Array2<f64>,
    pub y_raw: Array2<f64>,
    pub gt: GroundTruthAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Separate step size for the bin score.
    pub bin_learning_rate: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplicative learning-rate decay applied after each epoch.
    pub lr_decay: f64,
    pub loss: LossOptions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            bin_learning_rate: 1e-2,
            optimizer: Optimizer::adam(),
            epochs: 5,
            batch_size: 4,
            lr_decay: 0.95,
            loss: LossOptions::new(
                SinkhornConfig::new(0.02, 100).with_domain(crate::ot::SinkhornDomain::Naive),
            ),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub positive: f64,
    pub hard_negative: f64,
    pub bin_score: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

/// Mini-batch training over [`loss_gradient`] with the batch-mean gradient.
/// Per-pair gradients are computed in parallel and summed in batch order.
pub fn train_encoder(
    dataset: &[TrainingPair],
    init: &ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    match cfg.optimizer {
        Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
            return Err(invalid(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Optimizer::Adam { beta1, beta2 }
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) =>
        {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        _ => {}
    }
    let mut params = init.clone();
    let mut flat = flatten_params(&params);
    let n_params = flat.len();
    let mut first = vec![0.0; n_params];
    let mut second = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut lr = cfg.learning_rate;
    let mut bin_lr = cfg.bin_learning_rate;
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<LossGradient>> = batch
                .par_iter()
                .map(|&k| {
                    let pair = &dataset[k];
                    loss_gradient(&pair.x_raw, &pair.y_raw, &params, &pair.gt, &cfg.loss)
                })
                .collect();
            let mut grad = vec![0.0; n_params];
            let mut loss = LossBreakdown::default();
            for r in results {
                let r = r.map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        step,
                        trace: Box::new(trace.clone()),
                    },
                    other => other,
                })?;
                loss.add(&r.loss);
                for (g, v) in grad.iter_mut().zip(r.gradient.flatten_params()) {
                    *g += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let row = TraceRow {
                step,
                loss: loss.total * scale,
                positive: loss.positive * scale,
                hard_negative: loss.hard_negative * scale,
                bin_score: params.bin_score,
            };
            trace.push(row);
            if !row.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    trace: Box::new(trace),
                });
            }
            for k in 0..n_params {
                let rate = if k == n_params - 1 { bin_lr } else { lr };
                let g = grad[k] * scale;
                match cfg.optimizer {
                    Optimizer::Sgd { momentum } => {
                        first[k] = momentum * first[k] + g;
                        flat[k] -= rate * first[k];
                    }
                    Optimizer::Adam { beta1, beta2 } => {
                        let t = (step + 1) as i32;
                        first[k] = beta1 * first[k] + (1.0 - beta1) * g;
                        second[k] = beta2 * second[k] + (1.0 - beta2) * g * g;
                        let m_hat = first[k] / (1.0 - beta1.powi(t));
                        let v_hat = second[k] / (1.0 - beta2.powi(t));
                        flat[k] -= rate * m_hat / (v_hat.sqrt() + 1e-8);
                    }
                }
            }
            params = unflatten_params(&flat, &params);
            step += 1;
        }
        lr *= cfg.lr_decay;
        bin_lr *= cfg.lr_decay;
    }
    Ok(TrainOutcome { params, trace })
}
