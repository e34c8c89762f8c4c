//! Helpers shared by the integration tests, including a plain-loop reference
//! implementation of the forward pass that shares no code with the library.

#![allow(dead_code)]

use scvfp::config::{ModelConfig, Variant};
use scvfp::model::ModelState;
use scvfp::rng::Rng;
use scvfp::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gaussian()).collect()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_rows(a: &Mat, scale: f64) -> Mat {
    a.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = r.iter().map(|v| ((v - mx) / scale).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn attention(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let (q, k, v) = (matmul(x, wq), matmul(x, wk), matmul(x, wv));
    let scores = matmul(&q, &transpose(&k));
    let a = softmax_rows(&scores, (q[0].len() as f64).sqrt());
    matmul(&a, &v)
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn add_bias(x: &Mat, b: &[f64]) -> Mat {
    x.iter().map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub struct Oracle<'a> {
    state: &'a ModelState,
}

impl<'a> Oracle<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        Self { state }
    }

    fn t(&self, name: &str) -> &Tensor {
        &self.state.tensors.iter().find(|t| t.name == name).unwrap_or_else(|| panic!("no tensor {name}")).tensor
    }

    fn m(&self, name: &str) -> Mat {
        to_mat(self.t(name))
    }

    fn v(&self, name: &str) -> Vec<f64> {
        self.t(name).data().to_vec()
    }

    /// Per-head outputs and the projected attention output of one block.
    pub fn attention_block(&self, b: usize, x: &Mat) -> (Vec<Mat>, Mat) {
        let cfg: &ModelConfig = &self.state.config;
        let n = cfg.heads;
        let p = format!("blocks.{b}.attn");
        let heads: Vec<Mat> = (0..n)
            .map(|h| {
                let input = match cfg.variant {
                    Variant::Scmhsa => x.clone(),
                    Variant::MhsaBaseline => {
                        let w = cfg.d / n;
                        x.iter().map(|r| r[h * w..(h + 1) * w].to_vec()).collect()
                    }
                };
                attention(
                    &input,
                    &self.m(&format!("{p}.heads.{h}.w_q")),
                    &self.m(&format!("{p}.heads.{h}.w_k")),
                    &self.m(&format!("{p}.heads.{h}.w_v")),
                )
            })
            .collect();
        let cat: Mat = (0..x.len()).map(|r| heads.iter().flat_map(|h| h[r].clone()).collect()).collect();
        let out = matmul(&cat, &self.m(&format!("{p}.w_o")));
        (heads, out)
    }

    /// Encoder output after the final layer norm, and per-block heads.
    pub fn encode(&self, e: &Mat) -> (Mat, Vec<Vec<Mat>>) {
        let cfg = &self.state.config;
        let d = cfg.d;
        let mut x: Mat = e
            .iter()
            .enumerate()
            .map(|(t, r)| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let i = (j / 2) as f64;
                        let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
                        v + if j % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect();
        let mut all = Vec::new();
        for b in 0..cfg.blocks {
            let p = format!("blocks.{b}");
            let n1 = layer_norm(&x, &self.v(&format!("{p}.ln1.gain")), &self.v(&format!("{p}.ln1.bias")));
            let (heads, attn) = self.attention_block(b, &n1);
            x = add(&x, &attn);
            let n2 = layer_norm(&x, &self.v(&format!("{p}.ln2.gain")), &self.v(&format!("{p}.ln2.bias")));
            let h = add_bias(&matmul(&n2, &self.m(&format!("{p}.ffn.w1"))), &self.v(&format!("{p}.ffn.b1")));
            let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
            let h = add_bias(&matmul(&h, &self.m(&format!("{p}.ffn.w2"))), &self.v(&format!("{p}.ffn.b2")));
            x = add(&x, &h);
            all.push(heads);
        }
        (layer_norm(&x, &self.v("final_ln.gain"), &self.v("final_ln.bias")), all)
    }

    pub fn predict(&self, e: &Mat) -> Vec<f64> {
        let (y, _) = self.encode(e);
        let last = vec![y.last().unwrap().clone()];
        let h = add_bias(&matmul(&last, &self.m("head.w_a")), &self.v("head.b_a"));
        let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        add_bias(&matmul(&h, &self.m("head.w_b")), &self.v("head.b_b")).remove(0)
    }
}

/// Reference semantic-similarity loss over per-block head outputs.
pub fn oracle_similarity(blocks: &[Vec<Mat>]) -> f64 {
    let per_block: Vec<f64> = blocks
        .iter()
        .map(|heads| {
            let n = heads.len();
            if n < 2 {
                return 0.0;
            }
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let m = heads[i].len();
                    let mut pair = 0.0;
                    for k in 0..m {
                        let (a, b) = (&heads[i][k], &heads[j][k]);
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if na * nb >= 1e-8 {
                            pair += (dot / (na * nb)).abs();
                        }
                    }
                    s += pair / m as f64;
                }
            }
            s / (n * (n - 1)) as f64
        })
        .collect();
    per_block.iter().sum::<f64>() / per_block.len() as f64
}
