//! Transformer aggregator: a learned CLS token is prepended to the view
//! features, passed through pre-norm attention blocks, and the CLS row of
//! the output is the few-shot descriptor.
//!
//! Each block computes `x + MHA(LN(x))` then `x + MLP(LN(x))`. No
//! positional embedding is added, so the descriptor is invariant to the
//! order of the views.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Checkpoint;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    /// Total query/key/value width across heads.
    pub proj_width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub layers: usize,
    pub use_positional_embedding: bool,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn new(dim: usize) -> Self {
        EncoderConfig {
            dim,
            proj_width: 1024,
            heads: 4,
            mlp_hidden: 512,
            layers: 1,
            use_positional_embedding: false,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.proj_width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.proj_width == 0 || self.mlp_hidden == 0 {
            return fail(format!(
                "dim, proj_width and mlp_hidden must be positive: {} / {} / {}",
                self.dim, self.proj_width, self.mlp_hidden
            ));
        }
        if self.heads == 0 || !self.proj_width.is_multiple_of(self.heads) {
            return fail(format!(
                "{} heads do not divide projection width {}",
                self.heads, self.proj_width
            ));
        }
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.use_positional_embedding {
            return fail("positional embeddings are not supported: views are unordered".into());
        }
        if !(self.ln_eps > 0.0) || !(self.init_std > 0.0) {
            return fail("ln_eps and init_std must be positive".into());
        }
        Ok(())
    }
}

pub const CLS_TOKEN: &str = "cls_token";
const META_HEADS: &str = "meta.heads";

/// Named trainable tensors. Iteration is in name order, which fixes the
/// checkpoint layout and the optimizer's update order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Samples from N(0, std²) truncated to ±2·std by rejection.
fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn block_prefix(layer: usize) -> String {
    format!("block{layer}")
}

impl EncoderParams {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let dh = config.head_dim();
        let std = config.init_std;
        let mut tensors = BTreeMap::new();
        let randn = |shape: &[usize], rng: &mut R| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| truncated_normal(rng, std)).collect();
            Tensor::new(shape.to_vec(), data).expect("valid shape")
        };

        // Fixed generation order, independent of map ordering.
        tensors.insert(CLS_TOKEN.to_string(), randn(&[d], rng));
        for layer in 0..config.layers {
            let p = block_prefix(layer);
            tensors.insert(format!("{p}.ln1.gamma"), Tensor::filled(&[d], 1.0));
            tensors.insert(format!("{p}.ln1.beta"), Tensor::zeros(&[d]));
            for h in 0..config.heads {
                for proj in ["q", "k", "v"] {
                    tensors.insert(format!("{p}.attn.head{h}.w{proj}"), randn(&[d, dh], rng));
                    tensors.insert(format!("{p}.attn.head{h}.b{proj}"), Tensor::zeros(&[dh]));
                }
                tensors.insert(format!("{p}.attn.head{h}.wo"), randn(&[dh, d], rng));
            }
            tensors.insert(format!("{p}.attn.bo"), Tensor::zeros(&[d]));
            tensors.insert(format!("{p}.ln2.gamma"), Tensor::filled(&[d], 1.0));
            tensors.insert(format!("{p}.ln2.beta"), Tensor::zeros(&[d]));
            tensors.insert(format!("{p}.mlp.w1"), randn(&[d, config.mlp_hidden], rng));
            tensors.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[config.mlp_hidden]));
            tensors.insert(format!("{p}.mlp.w2"), randn(&[config.mlp_hidden, d], rng));
            tensors.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[d]));
        }
        Ok(EncoderParams { config, tensors })
    }

    /// All parameters set to zero (gains included).
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let mut p = Self::init(config, &mut rng)?;
        p.tensors
            .values_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.tensors.clone();
        tensors.insert(
            META_HEADS.to_string(),
            Tensor::scalar(self.config.heads as f64),
        );
        Checkpoint {
            dim: self.config.dim,
            tensors,
        }
    }

    /// Rebuilds parameters from a checkpoint, inferring the configuration
    /// from tensor shapes and checking every expected tensor is present.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("checkpoint: {m}"));
        let mut tensors = ckpt.tensors.clone();
        let heads = tensors
            .remove(META_HEADS)
            .map(|t| t.data()[0])
            .ok_or_else(|| bad(format!("missing `{META_HEADS}`")))?;
        if heads < 1.0 || heads.fract() != 0.0 {
            return Err(bad(format!("invalid head count {heads}")));
        }
        let heads = heads as usize;
        let d = ckpt.dim;
        let layers = (0..)
            .take_while(|l| tensors.contains_key(&format!("{}.ln1.gamma", block_prefix(*l))))
            .count();
        let wq = tensors
            .get("block0.attn.head0.wq")
            .ok_or_else(|| bad("missing block0.attn.head0.wq".into()))?;
        let w1 = tensors
            .get("block0.mlp.w1")
            .ok_or_else(|| bad("missing block0.mlp.w1".into()))?;
        let mut config = EncoderConfig::new(d);
        config.heads = heads;
        config.proj_width = wq.cols() * heads;
        config.mlp_hidden = w1.cols();
        config.layers = layers;
        config.validate()?;

        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let template = Self::init(config.clone(), &mut rng)?;
        if template.tensors.len() != tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                template.tensors.len(),
                tensors.len()
            )));
        }
        for (name, t) in &template.tensors {
            match tensors.get(name) {
                Some(actual) if actual.shape() == t.shape() => {}
                Some(actual) => {
                    return Err(Error::shape("checkpoint tensor", t.shape(), actual.shape()))
                }
                None => return Err(bad(format!("missing `{name}`"))),
            }
        }
        Ok(EncoderParams { config, tensors })
    }
}

/// Parameters placed on a tape, by name.
pub struct EncoderVars {
    vars: BTreeMap<String, Var>,
}

impl EncoderVars {
    /// Trainable leaves for every parameter.
    pub fn trainable(tape: &mut Tape, params: &EncoderParams) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        EncoderVars { vars }
    }

    /// Frozen leaves, for inference.
    pub fn frozen(tape: &mut Tape, params: &EncoderParams) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
            .collect();
        EncoderVars { vars }
    }

    /// Wraps existing tape leaves, e.g. ones created by a gradient checker.
    pub fn from_named(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        EncoderVars {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Multi-head attention with queries taken from `queries` and keys/values
/// from `context`; both are already layer-normed. Head outputs are
/// projected back to D and summed, which equals concatenating the heads
/// and applying one output projection.
pub fn attention_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    prefix: &str,
    queries: Var,
    context: Var,
) -> Result<Var> {
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut out: Option<Var> = None;
    for h in 0..config.heads {
        let name = |s: &str| format!("{prefix}.attn.head{h}.{s}");
        let q = tape.matmul(queries, vars.get(&name("wq")))?;
        let q = tape.add_row(q, vars.get(&name("bq")))?;
        let k = tape.matmul(context, vars.get(&name("wk")))?;
        let k = tape.add_row(k, vars.get(&name("bk")))?;
        let v = tape.matmul(context, vars.get(&name("wv")))?;
        let v = tape.add_row(v, vars.get(&name("bv")))?;
        let scores = tape.matmul_transposed(q, k)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores)?;
        let mixed = tape.matmul(weights, v)?;
        let projected = tape.matmul(mixed, vars.get(&name("wo")))?;
        out = Some(match out {
            Some(acc) => tape.add(acc, projected)?,
            None => projected,
        });
    }
    let out = out.expect("at least one head");
    tape.add_row(out, vars.get(&format!("{prefix}.attn.bo")))
}

fn mlp_on_tape(tape: &mut Tape, vars: &EncoderVars, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, vars.get(&format!("{prefix}.mlp.w1")))?;
    let h = tape.add_row(h, vars.get(&format!("{prefix}.mlp.b1")))?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, vars.get(&format!("{prefix}.mlp.w2")))?;
    tape.add_row(o, vars.get(&format!("{prefix}.mlp.b2")))
}

/// Attention where shape `b` contributes one query row (row `b` of
/// `queries`, B×D) against its own `contexts[b]` (T_b×D).
///
/// Reassociated so no T×d_h key or value matrix is formed:
/// `q·Kᵀ = (q·W_kᵀ)·Xᵀ + q·b_k` and `a·V = (a·X)·W_v + b_v` because the
/// attention weights sum to one. The `q·b_k` term shifts every score
/// equally, so the softmax cancels it; `b_k` gets no gradient here, as in
/// the unreordered form where its gradient is identically zero. The
/// projections run once over the whole batch.
pub fn single_query_attention_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    prefix: &str,
    queries: Var,
    contexts: &[Var],
) -> Result<Var> {
    let (b, _) = tape.value(queries).as_matrix()?;
    if b != contexts.len() {
        return Err(Error::shape("single_query_attention", &[contexts.len()], &[b]));
    }
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut out: Option<Var> = None;
    for h in 0..config.heads {
        let name = |s: &str| format!("{prefix}.attn.head{h}.{s}");
        let q = tape.matmul(queries, vars.get(&name("wq")))?;
        let q = tape.add_row(q, vars.get(&name("bq")))?;
        let q_in_input_space = tape.matmul_transposed(q, vars.get(&name("wk")))?;
        let mut pooled = Vec::with_capacity(b);
        for (i, &context) in contexts.iter().enumerate() {
            let qi = tape.slice_rows(q_in_input_space, i, 1)?;
            let scores = tape.matmul_transposed(qi, context)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores)?;
            pooled.push(tape.matmul(weights, context)?);
        }
        let pooled = tape.stack_rows(&pooled)?;
        let mixed = tape.matmul(pooled, vars.get(&name("wv")))?;
        let mixed = tape.add_row(mixed, vars.get(&name("bv")))?;
        let projected = tape.matmul(mixed, vars.get(&name("wo")))?;
        out = Some(match out {
            Some(acc) => tape.add(acc, projected)?,
            None => projected,
        });
    }
    let out = out.expect("at least one head");
    tape.add_row(out, vars.get(&format!("{prefix}.attn.bo")))
}

fn ln(tape: &mut Tape, vars: &EncoderVars, config: &EncoderConfig, name: &str, x: Var) -> Result<Var> {
    tape.layer_norm(
        x,
        vars.get(&format!("{name}.gamma")),
        vars.get(&format!("{name}.beta")),
        config.ln_eps,
    )
}

/// Records the encoder for a batch of shapes and returns the B×D matrix
/// of descriptors, one row per entry of `views` (each M_b×D).
///
/// Only the CLS row of the final block is returned, and every block is
/// row-wise except attention's keys and values, so the last block
/// evaluates its query, residuals and MLP for that row alone, batched
/// across shapes.
pub fn encode_batch_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    views: &[Var],
) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::InvalidTensor("encode needs at least one shape".into()));
    }
    let mut xs = Vec::with_capacity(views.len());
    for &v in views {
        let (m, d) = tape.value(v).as_matrix()?;
        if d != config.dim || m == 0 {
            return Err(Error::shape("encode", &[m, config.dim], tape.value(v).shape()));
        }
        xs.push(tape.concat_rows(vars.get(CLS_TOKEN), v)?);
    }
    for layer in 0..config.layers - 1 {
        let p = block_prefix(layer);
        for x in xs.iter_mut() {
            let normed = ln(tape, vars, config, &format!("{p}.ln1"), *x)?;
            let attended = attention_on_tape(tape, vars, config, &p, normed, normed)?;
            let h = tape.add(*x, attended)?;
            let normed2 = ln(tape, vars, config, &format!("{p}.ln2"), h)?;
            let mlp = mlp_on_tape(tape, vars, &p, normed2)?;
            *x = tape.add(h, mlp)?;
        }
    }
    let p = block_prefix(config.layers - 1);
    let mut contexts = Vec::with_capacity(xs.len());
    let mut queries = Vec::with_capacity(xs.len());
    let mut residuals = Vec::with_capacity(xs.len());
    for &x in &xs {
        let normed = ln(tape, vars, config, &format!("{p}.ln1"), x)?;
        queries.push(tape.slice_rows(normed, 0, 1)?);
        residuals.push(tape.slice_rows(x, 0, 1)?);
        contexts.push(normed);
    }
    let queries = tape.stack_rows(&queries)?;
    let residual = tape.stack_rows(&residuals)?;
    let attended = single_query_attention_on_tape(tape, vars, config, &p, queries, &contexts)?;
    let h = tape.add(residual, attended)?;
    let normed2 = ln(tape, vars, config, &format!("{p}.ln2"), h)?;
    let mlp = mlp_on_tape(tape, vars, &p, normed2)?;
    tape.add(h, mlp)
}

/// Records the encoder for one shape and returns the 1×D descriptor.
pub fn encode_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    views: Var,
) -> Result<Var> {
    encode_batch_on_tape(tape, vars, config, &[views])
}

/// Few-shot descriptor for one shape's M×D view matrix.
pub fn encode(views: &Tensor, params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(encode_batch(&[views], params)?.pop().expect("one descriptor"))
}

/// Few-shot descriptors for several shapes on one tape.
pub fn encode_batch(views: &[&Tensor], params: &EncoderParams) -> Result<Vec<Vec<f64>>> {
    if views.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = EncoderVars::frozen(&mut tape, params);
    let leaves: Vec<Var> = views.iter().map(|v| tape.constant((*v).clone())).collect();
    let out = encode_batch_on_tape(&mut tape, &vars, &params.config, &leaves)?;
    Ok(tape.value(out).row_iter().map(<[f64]>::to_vec).collect())
}

/// Full-sequence multi-head self-attention over `x` (T×D) using the
/// first block's attention weights; the layer norm is not applied.
pub fn attention(x: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = EncoderVars::frozen(&mut tape, params);
    let xv = tape.constant(x.clone());
    let out = attention_on_tape(&mut tape, &vars, &params.config, "block0", xv, xv)?;
    Ok(tape.value(out).clone())
}
