//! Split-head multi-head self-attention and the semantic-concentration
//! variant in which every head projects the full embedding.
//!
//! Weights are stored input-major: a projection from width `a` to width `b`
//! is an `a×b` matrix applied as `X·W` to row-per-frame inputs.

use crate::graph::{Graph, Var};
use crate::tensor::{shape_err, Result};

/// Per-head query/key/value projections.
#[derive(Debug, Clone, Copy)]
pub struct HeadProjections {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Baseline weights: each head sees one `d/N` chunk of the embedding through
/// `d_h×d_h` projections; `w_o` is `d×d`.
#[derive(Debug, Clone)]
pub struct MhsaWeights {
    pub heads: Vec<HeadProjections>,
    pub w_o: Var,
}

/// Semantic-concentration weights: each head projects the full width `d` to
/// `d'_h`; `w_o` maps the `N·d'_h` concatenation back to `d`.
#[derive(Debug, Clone)]
pub struct ScmhsaWeights {
    pub heads: Vec<HeadProjections>,
    pub w_o: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// M×d
    pub final_out: Var,
    /// N tensors of shape M×head_width.
    pub heads: Vec<Var>,
}

/// `softmax_rows(Q·Kᵀ, √w)·V`, unmasked over all M positions.
pub fn attention_core(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || qs != ks || qs != vs {
        return shape_err("attention_core", format!("q {qs:?}, k {ks:?}, v {vs:?}"));
    }
    let width = qs[1] as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let alpha = g.softmax_rows(scores, width.sqrt())?;
    g.matmul(alpha, v)
}

fn project_head(g: &mut Graph, x: Var, h: &HeadProjections) -> Result<Var> {
    let q = g.matmul(x, h.w_q)?;
    let k = g.matmul(x, h.w_k)?;
    let v = g.matmul(x, h.w_v)?;
    attention_core(g, q, k, v)
}

pub fn mhsa_forward(g: &mut Graph, e: Var, w: &MhsaWeights) -> Result<AttentionOutput> {
    let n = w.heads.len();
    let d = match g.shape(e) {
        [_, d] => *d,
        s => return shape_err("mhsa_forward", format!("input must be M×d, got {s:?}")),
    };
    if n == 0 || d % n != 0 {
        return shape_err("mhsa_forward", format!("{n} heads do not divide d={d}"));
    }
    let dh = d / n;
    let mut heads = Vec::with_capacity(n);
    for (i, h) in w.heads.iter().enumerate() {
        let chunk = g.slice_cols(e, i * dh, (i + 1) * dh)?;
        heads.push(project_head(g, chunk, h)?);
    }
    let cat = g.concat_cols(&heads)?;
    let final_out = g.matmul(cat, w.w_o)?;
    Ok(AttentionOutput { final_out, heads })
}

pub fn scmhsa_forward(g: &mut Graph, e: Var, w: &ScmhsaWeights) -> Result<AttentionOutput> {
    if w.heads.is_empty() {
        return shape_err("scmhsa_forward", "no heads");
    }
    let mut heads = Vec::with_capacity(w.heads.len());
    for h in &w.heads {
        heads.push(project_head(g, e, h)?);
    }
    let cat = g.concat_cols(&heads)?;
    let final_out = g.matmul(cat, w.w_o)?;
    Ok(AttentionOutput { final_out, heads })
}

/// `3·N·d·d'_h + N·d'_h·d`
pub fn scmhsa_param_count(d: u64, heads: u64, head_dim: u64) -> u64 {
    3 * heads * d * head_dim + heads * head_dim * d
}

/// `3·N·(d/N)² + d²`
pub fn mhsa_param_count(d: u64, heads: u64) -> u64 {
    let dh = d / heads;
    3 * heads * dh * dh + d * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gaussian()).collect()).unwrap()
    }

    #[test]
    fn single_row_returns_values() {
        let mut rng = Rng::seed(3);
        let mut g = Graph::new();
        let q = g.constant(random(&mut rng, &[1, 4]));
        let k = g.constant(random(&mut rng, &[1, 4]));
        let v = g.constant(random(&mut rng, &[1, 4]));
        let out = attention_core(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut rng = Rng::seed(4);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[3, 2]));
        let k = g.constant(random(&mut rng, &[3, 2]));
        let vt = random(&mut rng, &[3, 2]);
        let v = g.constant(vt.clone());
        let out = attention_core(&mut g, q, k, v).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|r| vt.get2(r, c)).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((g.value(out).get2(r, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 2]));
        assert!(attention_core(&mut g, q, k, k).is_err());
    }

    #[test]
    fn mhsa_requires_divisible_width() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[2, 5]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let wo = g.constant(Tensor::zeros(&[5, 5]));
        let h = HeadProjections { w_q: w, w_k: w, w_v: w };
        let weights = MhsaWeights { heads: vec![h, h], w_o: wo };
        assert!(mhsa_forward(&mut g, e, &weights).is_err());
    }

    #[test]
    fn param_ratio_is_four_n_over_n_plus_three() {
        for n in 1..=12u64 {
            let d = 24 * n;
            let ratio = scmhsa_param_count(d, n, d / n) as f64 / mhsa_param_count(d, n) as f64;
            assert!((ratio - 4.0 * n as f64 / (n as f64 + 3.0)).abs() < 1e-12);
        }
        assert_eq!(scmhsa_param_count(768, 6, 128) * 3, mhsa_param_count(768, 6) * 8);
    }
}
