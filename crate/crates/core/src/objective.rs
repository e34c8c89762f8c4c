//! Embedding-space training losses and evaluation metrics.
//!
//! Training minimises `‖e − ê‖² + λ·L_SS`, where `L_SS` is the mean absolute
//! row-wise cosine similarity between every pair of attention heads, scaled
//! by `1/(N(N−1))` and averaged over encoder blocks. Metrics report the same
//! squared-norm MSE and a PSNR with peak 255.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::TensorError;

pub const PSNR_PEAK: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mse_term: f64,
    pub ss_term: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `‖e − ê‖²`, summed over dimensions.
pub fn embedding_mse(g: &mut Graph, e: Var, e_hat: Var) -> Result<Var> {
    let diff = g.sub(e, e_hat)?;
    Ok(g.sqnorm(diff)?)
}

fn block_similarity(g: &mut Graph, heads: &[Var]) -> Result<Option<Var>> {
    let n = heads.len();
    if n < 2 {
        return Ok(None);
    }
    let shape = g.shape(heads[0]).to_vec();
    if shape.len() != 2 || heads.iter().any(|&h| g.shape(h) != shape.as_slice()) {
        return Err(TensorError::Shape {
            op: "semantic_similarity_loss",
            detail: "heads within a block must share one M×w shape".into(),
        }
        .into());
    }
    let mut acc: Option<Var> = None;
    for i in 0..n - 1 {
        for j in i + 1..n {
            let c = g.abs_cosine_rows(heads[i], heads[j])?;
            let pair = g.mean(c)?;
            acc = Some(match acc {
                Some(a) => g.add(a, pair)?,
                None => pair,
            });
        }
    }
    let sum = acc.expect("at least one pair");
    Ok(Some(g.scalar_mul(sum, 1.0 / (n * (n - 1)) as f64)?))
}

/// Semantic-similarity loss over per-block head outputs, averaged over
/// blocks. Blocks with a single head contribute 0.
pub fn semantic_similarity_loss(g: &mut Graph, blocks: &[Vec<Var>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for heads in blocks {
        if let Some(v) = block_similarity(g, heads)? {
            acc = Some(match acc {
                Some(a) => g.add(a, v)?,
                None => v,
            });
        }
    }
    match acc {
        Some(sum) => Ok(g.scalar_mul(sum, 1.0 / blocks.len() as f64)?),
        None => Ok(g.constant(crate::tensor::Tensor::scalar(0.0))),
    }
}

/// `mse + λ·ss` on the graph, with the scalar terms reported.
pub fn total_loss(g: &mut Graph, e: Var, e_hat: Var, heads: &[Vec<Var>], lambda: f64) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let mse = embedding_mse(g, e, e_hat)?;
    let ss = semantic_similarity_loss(g, heads)?;
    let weighted = g.scalar_mul(ss, lambda)?;
    let total = g.add(mse, weighted)?;
    let breakdown = LossBreakdown {
        mse_term: g.value(mse).item(),
        ss_term: g.value(ss).item(),
        lambda,
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

// Plain-slice metrics.

pub fn squared_error(e: &[f64], e_hat: &[f64]) -> Result<f64> {
    if e.len() != e_hat.len() {
        return Err(Error::Data(format!("width mismatch {} vs {}", e.len(), e_hat.len())));
    }
    Ok(e.iter().zip(e_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `10·log10(255²/mse)`; undefined for `mse <= 0`.
pub fn metric_psnr(mse: f64) -> Result<f64> {
    if !(mse > 0.0) || !mse.is_finite() {
        return Err(Error::UndefinedMetric(format!("psnr needs a positive finite mse, got {mse}")));
    }
    Ok(10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10())
}

/// PSNR with `+inf` standing in for a perfect prediction.
pub fn report_psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        metric_psnr(mse).unwrap_or(f64::NAN)
    }
}

/// `e·ê / (‖e‖‖ê‖)`, 0 when either norm product is below 1e-8.
pub fn cosine_similarity(e: &[f64], e_hat: &[f64]) -> f64 {
    let dot: f64 = e.iter().zip(e_hat).map(|(a, b)| a * b).sum();
    let na = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = e_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na * nb < crate::graph::COSINE_EPS {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Mean over windows of `‖e − ê‖²`.
    pub mse: f64,
    pub psnr: f64,
    pub mean_cosine: f64,
    /// Mean cosine of each autoregressive step.
    pub step_cosines: Vec<f64>,
    pub windows: usize,
}

impl MetricReport {
    pub fn from_errors(squared_errors: &[f64], cosines: &[f64], step_cosines: Vec<f64>) -> Self {
        let n = squared_errors.len().max(1) as f64;
        let mse = squared_errors.iter().sum::<f64>() / n;
        Self {
            mse,
            psnr: report_psnr(mse),
            mean_cosine: cosines.iter().sum::<f64>() / cosines.len().max(1) as f64,
            step_cosines,
            windows: squared_errors.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub rows: usize,
    pub cols: usize,
    /// |e_i − ê_i| row-major, zero-padded to rows·cols.
    pub values: Vec<f64>,
    /// Max-normalised to 0..=255.
    pub normalized: Vec<u8>,
}

pub fn error_map(e: &[f64], e_hat: &[f64], grid_cols: usize) -> ErrorMap {
    let cols = grid_cols.max(1);
    let rows = e.len().div_ceil(cols).max(1);
    let mut values = vec![0.0; rows * cols];
    for (i, (a, b)) in e.iter().zip(e_hat).enumerate() {
        values[i] = (a - b).abs();
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let normalized = values
        .iter()
        .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    ErrorMap {
        rows,
        cols,
        values,
        normalized,
    }
}

impl ErrorMap {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend_from_slice(&self.normalized);
        out
    }
}

/// Smallest divisor of `d` that is at least `sqrt(d)`.
pub fn default_grid_cols(d: usize) -> usize {
    (1..=d.max(1)).find(|c| c * c >= d && d % c == 0).unwrap_or(d.max(1))
}
