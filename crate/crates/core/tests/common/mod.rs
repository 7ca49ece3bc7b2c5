//! Independent straight-line reference implementations shared by the
//! integration tests. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use viewagg_core::encoder::EncoderParams;

/// SplitMix64, written out from its published constants.
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// xoshiro256++ seeded by four SplitMix64 outputs.
pub struct RefRng([u64; 4]);

impl RefRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = SplitMix64(seed);
        RefRng([sm.next(), sm.next(), sm.next(), sm.next()])
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.0;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform integer in `low..high` by widening multiply with rejection.
    pub fn below(&mut self, low: usize, high: usize) -> usize {
        let range = (high - low) as u64;
        let zone = (range << range.leading_zeros()).wrapping_sub(1);
        loop {
            let wide = self.next_u64() as u128 * range as u128;
            let (hi, lo) = ((wide >> 64) as u64, wide as u64);
            if lo <= zone {
                return low + hi as usize;
            }
        }
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn symmetric(&mut self) -> f64 {
        2.0 * self.unit() - 1.0
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| self.symmetric()).collect())
            .collect()
    }

    pub fn unit_rows(&mut self, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        self.matrix(rows, cols)
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }
}

/// K-shot selection: per class in label order, a partial Fisher–Yates
/// over that class's indices; returns the chosen indices sorted.
pub fn reference_k_shot(labels: &[usize], classes: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = RefRng::new(seed);
    let mut chosen = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        for i in 0..k {
            let j = rng.below(i, idx.len());
            idx.swap(i, j);
        }
        chosen.extend_from_slice(&idx[..k]);
    }
    chosen.sort_unstable();
    chosen
}

pub struct PevaOracle {
    pub similarity: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
    pub descriptor: Vec<f64>,
}

pub fn peva(prompts: &[Vec<f64>], views: &[Vec<f64>]) -> PevaOracle {
    let n = prompts.len();
    let m = views.len();
    let d = views[0].len();
    let mut s = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..d {
                acc += prompts[i][k] * views[j][k];
            }
            s[i][j] = acc;
        }
    }
    let mut alpha = vec![0.0; m];
    for j in 0..m {
        let mut best = f64::NEG_INFINITY;
        let mut total = 0.0;
        for row in &s {
            if row[j] > best {
                best = row[j];
            }
            total += row[j];
        }
        alpha[j] = best - total / n as f64;
    }
    let mut z = 0.0;
    let mut e = vec![0.0; m];
    for j in 0..m {
        e[j] = alpha[j].exp();
        z += e[j];
    }
    let w: Vec<f64> = e.iter().map(|x| x / z).collect();
    let mut f = vec![0.0; d];
    for j in 0..m {
        for k in 0..d {
            f[k] += w[j] * views[j][k];
        }
    }
    PevaOracle {
        similarity: s,
        alpha,
        weights: w,
        descriptor: f,
    }
}

pub fn average(views: &[Vec<f64>]) -> Vec<f64> {
    let d = views[0].len();
    let mut f = vec![0.0; d];
    for v in views {
        for k in 0..d {
            f[k] += v[k];
        }
    }
    f.iter().map(|x| x / views.len() as f64).collect()
}

pub fn logits(prompts: &[Vec<f64>], f: &[f64], scale: f64) -> Vec<f64> {
    prompts
        .iter()
        .map(|t| scale * t.iter().zip(f).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    mx + z.ln() - logits[label]
}

fn mat(p: &EncoderParams, name: &str) -> Vec<Vec<f64>> {
    let t = p.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vecp(p: &EncoderParams, name: &str) -> Vec<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let s = (var + eps).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) / s * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn affine(x: &[f64], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<f64> {
    let out = w[0].len();
    let mut y = vec![0.0; out];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i][j];
        }
    }
    if let Some(b) = b {
        for j in 0..out {
            y[j] += b[j];
        }
    }
    y
}

/// Full multi-head self-attention of `x` (T rows) against itself with
/// the given block's weights; explicit keys and values, bias included.
pub fn attention(x: &[Vec<f64>], p: &EncoderParams, block: usize) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let dh = cfg.proj_width / cfg.heads;
    let t = x.len();
    let d = x[0].len();
    let bo = vecp(p, &format!("block{block}.attn.bo"));
    let mut out = vec![bo.clone(); t];
    for h in 0..cfg.heads {
        let n = |s: &str| format!("block{block}.attn.head{h}.{s}");
        let (wq, wk, wv, wo) = (mat(p, &n("wq")), mat(p, &n("wk")), mat(p, &n("wv")), mat(p, &n("wo")));
        let (bq, bk, bv) = (vecp(p, &n("bq")), vecp(p, &n("bk")), vecp(p, &n("bv")));
        let q: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &wq, Some(&bq))).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &wk, Some(&bk))).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &wv, Some(&bv))).collect();
        for a in 0..t {
            let mut scores = vec![0.0; t];
            for b in 0..t {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[a][c] * k[b][c];
                }
                scores[b] = dot / (dh as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let mut mixed = vec![0.0; dh];
            for b in 0..t {
                let wgt = (scores[b] - mx).exp() / z;
                for c in 0..dh {
                    mixed[c] += wgt * v[b][c];
                }
            }
            let proj = affine(&mixed, &wo, None);
            for j in 0..d {
                out[a][j] += proj[j];
            }
        }
    }
    out
}

/// Pre-norm encoder evaluated over every token; returns the CLS row.
pub fn encode(views: &[Vec<f64>], p: &EncoderParams) -> Vec<f64> {
    let cfg = &p.config;
    let mut x = vec![vecp(p, "cls_token")];
    x.extend(views.iter().cloned());
    for l in 0..cfg.layers {
        let n = |s: &str| format!("block{l}.{s}");
        let normed: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &vecp(p, &n("ln1.gamma")), &vecp(p, &n("ln1.beta")), cfg.ln_eps))
            .collect();
        let att = attention(&normed, p, l);
        let h: Vec<Vec<f64>> = x
            .iter()
            .zip(&att)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
        let (w1, b1, w2, b2) = (mat(p, &n("mlp.w1")), vecp(p, &n("mlp.b1")), mat(p, &n("mlp.w2")), vecp(p, &n("mlp.b2")));
        x = h
            .iter()
            .map(|r| {
                let nr = layer_norm(r, &vecp(p, &n("ln2.gamma")), &vecp(p, &n("ln2.beta")), cfg.ln_eps);
                let hidden: Vec<f64> = affine(&nr, &w1, Some(&b1)).into_iter().map(gelu).collect();
                let o = affine(&hidden, &w2, Some(&b2));
                r.iter().zip(&o).map(|(a, b)| a + b).collect()
            })
            .collect();
    }
    x.swap_remove(0)
}

/// Adam with bias correction and coupled L2, one scalar at a time.
pub struct RefAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub wd: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl RefAdam {
    pub fn new(n: usize, lr: f64, wd: f64) -> Self {
        RefAdam {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            wd,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            let g = grad[i] + self.wd * theta[i];
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g;
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g;
            let mh = self.m[i] / (1.0 - self.b1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.b2.powi(self.t));
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random container of each kind, with values that survive binary32.
pub fn random_containers(rng: &mut RefRng) -> [viewagg_core::store::Container; 3] {
    use viewagg_core::store::{Checkpoint, Container, FeatureSet, PromptBank, ShapeRecord};
    use viewagg_core::Tensor;

    let f32_matrix = |rng: &mut RefRng, rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| rng.symmetric() as f32 as f64).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    };
    let dim = rng.below(1, 12);
    let classes = rng.below(2, 8);
    let shapes = (0..rng.below(1, 10))
        .map(|i| {
            let suffix = "é".repeat(rng.below(0, 3));
            let label = rng.below(0, classes);
            let m = rng.below(1, 6);
            ShapeRecord {
                shape_id: format!("shape-{i}-{suffix}"),
                label,
                views: f32_matrix(rng, m, dim),
            }
        })
        .collect();
    let views = Container::Views(FeatureSet {
        shapes,
        dim,
        backbone_tag: String::new(),
        normalized: false,
    });
    let prompts = Container::Prompts(
        PromptBank::new(
            (0..classes).map(|c| format!("category {c}")).collect(),
            String::new(),
            f32_matrix(rng, classes, dim),
        )
        .unwrap(),
    );
    let tensors = (0..rng.below(1, 6))
        .map(|i| {
            let shape: Vec<usize> = (0..rng.below(1, 4)).map(|_| rng.below(1, 5)).collect();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.symmetric() * 1e3).collect();
            (format!("t{i}"), Tensor::new(shape, data).unwrap())
        })
        .collect();
    let ckpt = Container::Checkpoint(Checkpoint { dim, tensors });
    [views, prompts, ckpt]
}
