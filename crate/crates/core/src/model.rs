//! Encoder stack and prediction head.
//!
//! `E + PE` passes through `blocks` pre-norm residual blocks (attention then
//! GELU feed-forward), a final layer norm, and a two-layer MLP applied to the
//! last sequence position to produce the next-frame embedding.

use crate::attention::{
    mhsa_forward, mhsa_param_count, scmhsa_forward, scmhsa_param_count, AttentionOutput, HeadProjections,
    MhsaWeights, ScmhsaWeights,
};
use crate::config::{ModelConfig, Precision, Variant};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

/// Fixed sinusoidal table: `PE[t,2i] = sin(t/10000^(2i/d))`, `PE[t,2i+1] = cos(..)`.
pub fn positional_encoding(m: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even d, got {d}")));
    }
    let mut data = vec![0.0; m * d];
    for t in 0..m {
        for i in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = angle.sin();
            data[t * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(&[m, d], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = leading extent
    Uniform,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    heads: Vec<[usize; 3]>,
    w_o: usize,
    ln1: [usize; 2],
    ln2: [usize; 2],
    ffn: [usize; 4],
}

/// Positions of every model tensor in the flat parameter list.
#[derive(Debug, Clone)]
pub struct Layout {
    blocks: Vec<BlockLayout>,
    final_ln: [usize; 2],
    head: [usize; 4],
}

struct SpecBuilder(Vec<TensorSpec>);

impl SpecBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.0.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.0.len() - 1
    }
}

/// Tensor specifications in initialisation order, plus their layout.
pub fn tensor_layout(cfg: &ModelConfig) -> (Vec<TensorSpec>, Layout) {
    let d = cfg.d;
    let (proj_in, proj_out, cat_width) = match cfg.variant {
        Variant::Scmhsa => (d, cfg.head_dim(), cfg.heads * cfg.head_dim()),
        Variant::MhsaBaseline => (d / cfg.heads, d / cfg.heads, d),
    };
    let mut b = SpecBuilder(Vec::new());
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for bi in 0..cfg.blocks {
        let p = format!("blocks.{bi}");
        let heads = (0..cfg.heads)
            .map(|h| {
                ["w_q", "w_k", "w_v"]
                    .map(|w| b.add(format!("{p}.attn.heads.{h}.{w}"), &[proj_in, proj_out], Init::Uniform))
            })
            .collect();
        let w_o = b.add(format!("{p}.attn.w_o"), &[cat_width, d], Init::Uniform);
        let ln1 = [
            b.add(format!("{p}.ln1.gain"), &[d], Init::Ones),
            b.add(format!("{p}.ln1.bias"), &[d], Init::Zeros),
        ];
        let ln2 = [
            b.add(format!("{p}.ln2.gain"), &[d], Init::Ones),
            b.add(format!("{p}.ln2.bias"), &[d], Init::Zeros),
        ];
        let f = cfg.ffn();
        let ffn = [
            b.add(format!("{p}.ffn.w1"), &[d, f], Init::Uniform),
            b.add(format!("{p}.ffn.b1"), &[f], Init::Zeros),
            b.add(format!("{p}.ffn.w2"), &[f, d], Init::Uniform),
            b.add(format!("{p}.ffn.b2"), &[d], Init::Zeros),
        ];
        blocks.push(BlockLayout {
            heads,
            w_o,
            ln1,
            ln2,
            ffn,
        });
    }
    let final_ln = [
        b.add("final_ln.gain".into(), &[d], Init::Ones),
        b.add("final_ln.bias".into(), &[d], Init::Zeros),
    ];
    let h = cfg.hidden();
    let head = [
        b.add("head.w_a".into(), &[d, h], Init::Uniform),
        b.add("head.b_a".into(), &[h], Init::Zeros),
        b.add("head.w_b".into(), &[h, d], Init::Uniform),
        b.add("head.b_b".into(), &[d], Init::Zeros),
    ];
    (
        b.0,
        Layout {
            blocks,
            final_ln,
            head,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// All learnable tensors of one model, in a fixed order derived from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl ModelState {
    /// Seeded initialisation; draws happen in tensor order.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (specs, _) = tensor_layout(cfg);
        let tensors = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform => {
                        let bound = 1.0 / (s.shape[0] as f64).sqrt();
                        (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
                    }
                };
                let mut tensor = Tensor::new(&s.shape, data).expect("spec shape");
                if cfg.precision == Precision::F32 {
                    tensor.round_to_f32();
                }
                NamedTensor { name: s.name, tensor }
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            tensors,
        })
    }

    /// Rebuilds a state from stored tensors, checking names and shapes.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<NamedTensor>) -> Result<Self> {
        cfg.validate()?;
        let (specs, _) = tensor_layout(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "config expects {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.name != t.name || s.shape != t.tensor.shape() {
                return Err(Error::Config(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name,
                    t.tensor.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(Self {
            config: cfg.clone(),
            tensors,
        })
    }

    pub fn element_count(&self) -> u64 {
        self.tensors.iter().map(|t| t.tensor.len() as u64).sum()
    }

    pub fn layout(&self) -> Layout {
        tensor_layout(&self.config).1
    }

    /// Places every tensor on the graph.
    pub fn insert(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.tensor.clone(), requires_grad))
            .collect()
    }

    /// Predicts the next embedding (length d) from an M×d window.
    pub fn predict(&self, window: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.insert(&mut g, false);
        let e = g.constant(window.clone());
        let fwd = predict_next(&mut g, e, &vars, &self.layout(), &self.config)?;
        Ok(g.value(fwd.prediction).clone().reshape(&[self.config.d])?)
    }

    pub fn rollout(&self, window: &Tensor, steps: usize) -> Result<Rollout> {
        rollout(self, window, steps)
    }
}

/// Result of an encoder + head forward pass on a graph.
#[derive(Debug, Clone)]
pub struct Forward {
    /// M×d encoder output after the final layer norm.
    pub encoded: Var,
    /// 1×d predicted next embedding.
    pub prediction: Var,
    /// Per block, the N per-head attention outputs.
    pub heads: Vec<Vec<Var>>,
}

fn block_attention(
    g: &mut Graph,
    x: Var,
    vars: &[Var],
    block: &BlockLayout,
    variant: Variant,
) -> Result<AttentionOutput> {
    let heads: Vec<HeadProjections> = block
        .heads
        .iter()
        .map(|&[q, k, v]| HeadProjections {
            w_q: vars[q],
            w_k: vars[k],
            w_v: vars[v],
        })
        .collect();
    let w_o = vars[block.w_o];
    let out = match variant {
        Variant::Scmhsa => scmhsa_forward(g, x, &ScmhsaWeights { heads, w_o })?,
        Variant::MhsaBaseline => mhsa_forward(g, x, &MhsaWeights { heads, w_o })?,
    };
    Ok(out)
}

/// `X ← X + Attn(LN1(X)); X ← X + FFN(LN2(X))`
fn encoder_block(
    g: &mut Graph,
    x: Var,
    vars: &[Var],
    block: &BlockLayout,
    variant: Variant,
) -> Result<(Var, Vec<Var>)> {
    let n1 = g.layer_norm(x, vars[block.ln1[0]], vars[block.ln1[1]])?;
    let attn = block_attention(g, n1, vars, block, variant)?;
    let x = g.add(x, attn.final_out)?;
    let n2 = g.layer_norm(x, vars[block.ln2[0]], vars[block.ln2[1]])?;
    let [w1, b1, w2, b2] = block.ffn.map(|i| vars[i]);
    let h = g.matmul(n2, w1)?;
    let h = g.add_row_bias(h, b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, w2)?;
    let h = g.add_row_bias(h, b2)?;
    Ok((g.add(x, h)?, attn.heads))
}

pub fn encode(g: &mut Graph, e: Var, vars: &[Var], layout: &Layout, cfg: &ModelConfig) -> Result<(Var, Vec<Vec<Var>>)> {
    let (m, d) = match g.shape(e) {
        [m, d] => (*m, *d),
        s => {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!("expected M×d input, got {s:?}"),
            }
            .into())
        }
    };
    if d != cfg.d {
        return Err(TensorError::Shape {
            op: "encode",
            detail: format!("input width {d}, model width {}", cfg.d),
        }
        .into());
    }
    let pe = g.constant(positional_encoding(m, d)?);
    let mut x = g.add(e, pe)?;
    let mut all_heads = Vec::with_capacity(layout.blocks.len());
    for block in &layout.blocks {
        let (nx, heads) = encoder_block(g, x, vars, block, cfg.variant)?;
        x = nx;
        all_heads.push(heads);
    }
    let y = g.layer_norm(x, vars[layout.final_ln[0]], vars[layout.final_ln[1]])?;
    Ok((y, all_heads))
}

/// Two-layer GELU MLP on the last encoder row.
pub fn predict_next(g: &mut Graph, e: Var, vars: &[Var], layout: &Layout, cfg: &ModelConfig) -> Result<Forward> {
    let (encoded, heads) = encode(g, e, vars, layout, cfg)?;
    let m = g.shape(encoded)[0];
    let last = g.slice_rows(encoded, m - 1, m)?;
    let [w_a, b_a, w_b, b_b] = layout.head.map(|i| vars[i]);
    let h = g.matmul(last, w_a)?;
    let h = g.add_row_bias(h, b_a)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w_b)?;
    let prediction = g.add_row_bias(out, b_b)?;
    Ok(Forward {
        encoded,
        prediction,
        heads,
    })
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// steps×d predictions in order.
    pub predictions: Tensor,
    /// The M×d window fed to each step.
    pub windows: Vec<Tensor>,
}

/// Predict, drop the oldest row, append the prediction, repeat.
pub fn rollout(state: &ModelState, window: &Tensor, steps: usize) -> Result<Rollout> {
    if steps < 1 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let (m, d) = window
        .dims2()
        .filter(|_| window.shape().len() == 2)
        .ok_or_else(|| Error::Data(format!("rollout window must be M×d, got {:?}", window.shape())))?;
    let mut current = window.clone();
    let mut preds = Vec::with_capacity(steps * d);
    let mut windows = Vec::with_capacity(steps);
    for _ in 0..steps {
        let p = state.predict(&current)?;
        windows.push(current.clone());
        let mut next = current.data()[d..].to_vec();
        next.extend_from_slice(p.data());
        preds.extend_from_slice(p.data());
        current = Tensor::new(&[m, d], next)?;
    }
    Ok(Rollout {
        predictions: Tensor::new(&[steps, d], preds)?,
        windows,
    })
}

/// Closed-form parameter accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    pub attention_per_block: u64,
    pub layer_norms_per_block: u64,
    pub ffn_per_block: u64,
    pub blocks: u64,
    pub final_layer_norm: u64,
    pub prediction_head: u64,
    pub total: u64,
}

impl ParamTable {
    pub fn rows(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("attention_per_block", self.attention_per_block),
            ("layer_norms_per_block", self.layer_norms_per_block),
            ("ffn_per_block", self.ffn_per_block),
            ("all_blocks", self.blocks),
            ("final_layer_norm", self.final_layer_norm),
            ("prediction_head", self.prediction_head),
            ("total", self.total),
        ]
    }
}

pub fn param_count(cfg: &ModelConfig) -> ParamTable {
    let d = cfg.d as u64;
    let n = cfg.heads as u64;
    let f = cfg.ffn() as u64;
    let h = cfg.hidden() as u64;
    let attention_per_block = match cfg.variant {
        Variant::Scmhsa => scmhsa_param_count(d, n, cfg.head_dim() as u64),
        Variant::MhsaBaseline => mhsa_param_count(d, n),
    };
    let layer_norms_per_block = 2 * 2 * d;
    let ffn_per_block = d * f + f + f * d + d;
    let blocks = cfg.blocks as u64 * (attention_per_block + layer_norms_per_block + ffn_per_block);
    let final_layer_norm = 2 * d;
    let prediction_head = d * h + h + h * d + d;
    ParamTable {
        attention_per_block,
        layer_norms_per_block,
        ffn_per_block,
        blocks,
        final_layer_norm,
        prediction_head,
        total: blocks + final_layer_norm + prediction_head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.get2(0, 2 * i), 0.0);
            assert_eq!(pe.get2(0, 2 * i + 1), 1.0);
        }
        assert!((pe.get2(1, 0) - 0.841471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(3, 5).is_err());
    }

    #[test]
    fn tiny_param_count_is_one_thousand() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            d_head: Some(4),
            blocks: 1,
            ffn_width: Some(32),
            head_hidden: Some(8),
            ..ModelConfig::tiny()
        };
        assert_eq!(param_count(&cfg).total, 1000);
        let state = ModelState::init(&cfg, &mut Rng::seed(1)).unwrap();
        assert_eq!(state.element_count(), 1000);
    }

    #[test]
    fn full_scale_param_counts() {
        let sc = param_count(&ModelConfig::full_scale());
        let base = param_count(&ModelConfig::full_scale().with_variant(Variant::MhsaBaseline));
        assert_eq!(sc.total, 43_691_520);
        assert_eq!(base.total, 34_844_160);
        assert_eq!(sc.attention_per_block * 3, base.attention_per_block * 8);
    }

    #[test]
    fn prediction_has_width_d_and_zero_head_gives_zero() {
        let cfg = ModelConfig::tiny();
        let mut state = ModelState::init(&cfg, &mut Rng::seed(5)).unwrap();
        let window = Tensor::filled(&[cfg.seq_len, cfg.d], 0.25);
        assert_eq!(state.predict(&window).unwrap().shape(), &[cfg.d]);
        for t in &mut state.tensors {
            if t.name.starts_with("head.") {
                t.tensor = Tensor::zeros(t.tensor.shape());
            }
        }
        assert!(state.predict(&window).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rollout_rejects_zero_steps() {
        let cfg = ModelConfig::tiny();
        let state = ModelState::init(&cfg, &mut Rng::seed(5)).unwrap();
        let window = Tensor::zeros(&[cfg.seq_len, cfg.d]);
        assert!(state.rollout(&window, 0).is_err());
    }

    #[test]
    fn from_tensors_checks_layout() {
        let cfg = ModelConfig::tiny();
        let state = ModelState::init(&cfg, &mut Rng::seed(5)).unwrap();
        assert!(ModelState::from_tensors(&cfg, state.tensors.clone()).is_ok());
        let mut broken = state.tensors.clone();
        broken.swap(0, 1);
        broken[0].name = "nope".into();
        assert!(ModelState::from_tensors(&cfg, broken).is_err());
    }
}
