//! Few-shot training of the transformer aggregator.
//!
//! Per shape the objective is the cross-entropy of the prompt logits of
//! the encoder descriptor, plus (when distillation is on) the squared
//! distance between that descriptor and the shape's frozen prompt-guided
//! zero-shot descriptor. Only encoder parameters receive gradients.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, Aggregator, DEFAULT_LOGIT_SCALE};
use crate::encoder::{self, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::store::{FeatureSet, PromptBank, ShapeRecord};
use crate::tape::{Tape, Var};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecay {
    /// `λθ` added to the gradient before the moment updates.
    Coupled,
    /// `θ ← θ − lr·λθ` applied after the Adam update.
    Decoupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Shots per class.
    pub shots: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecay,
    pub batch_size: usize,
    pub logit_scale: f64,
    pub seed: u64,
    pub distill: bool,
    pub proj_width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shots: 16,
            epochs: 50,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            weight_decay_mode: WeightDecay::Coupled,
            batch_size: 32,
            logit_scale: DEFAULT_LOGIT_SCALE,
            seed: 0,
            distill: true,
            proj_width: 1024,
            heads: 4,
            mlp_hidden: 512,
            layers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.shots == 0 {
            return fail("shots must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return fail(format!("logit scale must be positive, got {}", self.logit_scale));
        }
        Ok(())
    }

    pub fn encoder_config(&self, dim: usize) -> EncoderConfig {
        EncoderConfig {
            proj_width: self.proj_width,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            layers: self.layers,
            ..EncoderConfig::new(dim)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            weight_decay_mode: self.weight_decay_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecay,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam update of every parameter. Parameters without
/// an entry in `grads` are treated as having zero gradient. Nothing is
/// modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let Some(p) = params.get(name) else {
            return Err(Error::Data(format!("gradient for unknown parameter `{name}`")));
        };
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let coupled = config.weight_decay_mode == WeightDecay::Coupled;

    for (name, theta) in params.tensors.iter_mut() {
        let n = theta.len();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let grad = grads.get(name).map(Tensor::data);
        for (i, th) in theta.data_mut().iter_mut().enumerate() {
            let mut g = grad.map_or(0.0, |g| g[i]);
            if coupled {
                g += config.weight_decay * *th;
            }
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            let decay = if coupled {
                0.0
            } else {
                config.learning_rate * config.weight_decay * *th
            };
            *th -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps) + decay;
        }
    }
    if let Some((name, _)) = params.tensors.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!("parameter `{name}` after update")));
    }
    Ok(())
}

/// Exactly `k` shapes of every category, drawn uniformly without
/// replacement by a partial Fisher–Yates shuffle of each class's indices
/// (classes in label order, one seeded stream). The result keeps on-disk
/// order.
pub fn sample_k_shot(
    set: &FeatureSet,
    categories: &[String],
    k: usize,
    seed: u64,
) -> Result<FeatureSet> {
    if k == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    set.check_labels(categories.len())?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); categories.len()];
    for (i, s) in set.shapes.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for (class, mut indices) in by_class.into_iter().enumerate() {
        if indices.len() < k {
            return Err(Error::InsufficientData {
                class: categories[class].clone(),
                available: indices.len(),
                requested: k,
            });
        }
        for i in 0..k {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        chosen.extend(indices[..k].iter().copied());
    }
    Ok(FeatureSet {
        shapes: chosen.into_iter().map(|i| set.shapes[i].clone()).collect(),
        ..set.clone()
    })
}

/// `lⱼ = scale · tⱼ · f` for the few-shot descriptor.
pub fn few_shot_logits(prompts: &Tensor, descriptor: &[f64], scale: f64) -> Result<Vec<f64>> {
    aggregate::zero_shot_logits(prompts, descriptor, scale)
}

/// Softmax cross-entropy of `logits` against `label`.
pub fn classification_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(kernels::log_sum_exp(logits) - logits[label])
}

/// `‖f_few − f_zero‖²`.
pub fn distillation_loss(few: &[f64], zero: &[f64]) -> Result<f64> {
    if few.len() != zero.len() {
        return Err(Error::shape("distillation_loss", &[few.len()], &[zero.len()]));
    }
    Ok(few.iter().zip(zero).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn total_loss(cls: f64, fd: f64, distill: bool) -> f64 {
    if distill {
        cls + fd
    } else {
        cls
    }
}

/// Losses of one batch recorded on a tape.
pub struct BatchLoss {
    /// Mean per-shape objective; the node to differentiate.
    pub objective: Var,
    pub cls_sum: f64,
    pub fd_sum: f64,
    pub shapes: usize,
    /// Constant leaves holding each shape's views.
    pub view_vars: Vec<Var>,
    /// Constant leaves holding each shape's zero-shot target (distillation only).
    pub target_vars: Vec<Var>,
}

/// Records the mean objective over `batch`. `prompts` must be a
/// constant N×D leaf.
#[allow(clippy::too_many_arguments)]
pub fn record_batch_loss(
    tape: &mut Tape,
    vars: &EncoderVars,
    encoder_config: &EncoderConfig,
    prompt_features: &Tensor,
    prompts: Var,
    batch: &[&ShapeRecord],
    logit_scale: f64,
    distill: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut view_vars = Vec::with_capacity(batch.len());
    for shape in batch {
        view_vars.push(tape.constant(shape.views.clone()));
    }
    let few_all = encoder::encode_batch_on_tape(tape, vars, encoder_config, &view_vars)?;
    let logits_all = tape.matmul_transposed(few_all, prompts)?;
    let logits_all = tape.scale(logits_all, logit_scale);
    let mut sum: Option<Var> = None;
    let mut cls_sum = 0.0;
    let mut fd_sum = 0.0;
    let mut target_vars = Vec::new();
    for (i, shape) in batch.iter().enumerate() {
        let logits = tape.slice_rows(logits_all, i, 1)?;
        let cls = tape.cross_entropy(logits, shape.label)?;
        cls_sum += tape.value(cls).data()[0];
        let mut loss = cls;
        if distill {
            // Recomputed per step from frozen inputs; never differentiated.
            let zero = aggregate::aggregate_peva(prompt_features, &shape.views)?.descriptor;
            let target = tape.constant(Tensor::new(vec![1, zero.len()], zero)?);
            target_vars.push(target);
            let few = tape.slice_rows(few_all, i, 1)?;
            let fd = tape.squared_distance(few, target)?;
            fd_sum += tape.value(fd).data()[0];
            loss = tape.add(cls, fd)?;
        }
        sum = Some(match sum {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let objective = tape.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64);
    Ok(BatchLoss {
        objective,
        cls_sum,
        fd_sum,
        shapes: batch.len(),
        view_vars,
        target_vars,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_fd: f64,
    pub loss_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: EncoderParams,
    /// Entry 0 is the untrained model; entry `e` follows epoch `e`.
    pub log: Vec<EpochLog>,
}

fn check_inputs(set: &FeatureSet, prompts: &PromptBank) -> Result<()> {
    set.validate()?;
    prompts.validate()?;
    if set.dim != prompts.dim() {
        return Err(Error::shape("features vs prompts", &[set.dim], &[prompts.dim()]));
    }
    set.check_labels(prompts.len())
}

/// Mean losses over `set` without updating anything.
fn measure_losses(
    set: &FeatureSet,
    prompts: &PromptBank,
    params: &EncoderParams,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut cls = 0.0;
    let mut fd = 0.0;
    let views: Vec<&Tensor> = set.shapes.iter().map(|s| &s.views).collect();
    let descriptors = encoder::encode_batch(&views, params)?;
    for (shape, few) in set.shapes.iter().zip(descriptors) {
        let logits = few_shot_logits(&prompts.features, &few, config.logit_scale)?;
        cls += classification_loss(&logits, shape.label)?;
        if config.distill {
            let zero = aggregate::aggregate_peva(&prompts.features, &shape.views)?.descriptor;
            fd += distillation_loss(&few, &zero)?;
        }
    }
    let n = set.len() as f64;
    Ok((cls / n, fd / n))
}

fn epoch_log(
    epoch: usize,
    cls: f64,
    fd: f64,
    config: &TrainConfig,
    test: Option<&FeatureSet>,
    prompts: &PromptBank,
    params: &EncoderParams,
) -> Result<EpochLog> {
    let test_acc = match test {
        Some(t) => Some(evaluate(t, prompts, Descriptor::Few(params), 1)?.accuracy),
        None => None,
    };
    Ok(EpochLog {
        epoch,
        loss_cls: cls,
        loss_fd: fd,
        loss_total: total_loss(cls, fd, config.distill),
        test_acc,
    })
}

/// Trains a freshly initialized encoder on `train`.
///
/// The run is a pure function of its inputs: initialization and the
/// per-epoch shuffles draw from one stream seeded with `config.seed`.
pub fn train(
    train: &FeatureSet,
    prompts: &PromptBank,
    config: &TrainConfig,
    test: Option<&FeatureSet>,
) -> Result<TrainOutput> {
    config.validate()?;
    check_inputs(train, prompts)?;
    if let Some(t) = test {
        check_inputs(t, prompts)?;
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let encoder_config = config.encoder_config(train.dim);
    let mut params = EncoderParams::init(encoder_config.clone(), &mut rng)?;
    let adam = config.adam();
    let mut state = AdamState::default();

    let (cls0, fd0) = measure_losses(train, prompts, &params, config)?;
    let mut log = vec![epoch_log(0, cls0, fd0, config, test, prompts, &params)?];

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut cls_sum = 0.0;
        let mut fd_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ShapeRecord> = chunk.iter().map(|&i| &train.shapes[i]).collect();
            let mut tape = Tape::new();
            let vars = EncoderVars::trainable(&mut tape, &params);
            let prompt_var = tape.constant(prompts.features.clone());
            let loss = record_batch_loss(
                &mut tape,
                &vars,
                &encoder_config,
                &prompts.features,
                prompt_var,
                &batch,
                config.logit_scale,
                config.distill,
            )?;
            cls_sum += loss.cls_sum;
            fd_sum += loss.fd_sum;
            let mut grads = tape.backward(loss.objective)?;
            let named: BTreeMap<String, Tensor> = vars
                .iter()
                .filter_map(|(name, v)| grads.take(v).map(|g| (name.to_string(), g)))
                .collect();
            adam_step(&mut params, &named, &mut state, &adam)?;
        }
        let n = train.len() as f64;
        log.push(epoch_log(epoch, cls_sum / n, fd_sum / n, config, test, prompts, &params)?);
    }
    Ok(TrainOutput { params, log })
}

/// How a shape's descriptor is formed at inference time.
#[derive(Clone, Copy, Debug)]
pub enum Descriptor<'a> {
    Zero(Aggregator),
    Few(&'a EncoderParams),
}

impl Descriptor<'_> {
    pub fn mode_name(&self) -> &'static str {
        match self {
            Descriptor::Zero(Aggregator::Peva) => "zero_peva",
            Descriptor::Zero(Aggregator::Avg) => "zero_avg",
            Descriptor::Few(_) => "few",
        }
    }

    pub fn describe(&self, prompts: &Tensor, views: &Tensor) -> Result<Vec<f64>> {
        Ok(self.describe_batch(prompts, &[views])?.pop().expect("one descriptor"))
    }

    pub fn describe_batch(&self, prompts: &Tensor, views: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        match self {
            Descriptor::Zero(agg) => views
                .iter()
                .map(|v| aggregate::aggregate(*agg, prompts, v))
                .collect(),
            Descriptor::Few(params) => {
                if prompts.cols() != params.config.dim {
                    return Err(Error::shape(
                        "checkpoint vs prompts",
                        &[params.config.dim],
                        &[prompts.cols()],
                    ));
                }
                encoder::encode_batch(views, params)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub name: String,
    pub total: usize,
    pub correct: usize,
    /// `None` when the class has no test shapes.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassReport>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping input
/// order in the output.
pub fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Accuracy of argmax prompt logits over `test`.
const EVAL_CHUNK: usize = 64;

pub fn evaluate(
    test: &FeatureSet,
    prompts: &PromptBank,
    descriptor: Descriptor<'_>,
    threads: usize,
) -> Result<EvalReport> {
    let n = prompts.len();
    test.check_labels(n)?;
    let chunks: Vec<&[ShapeRecord]> = test.shapes.chunks(EVAL_CHUNK).collect();
    let predictions = parallel_map(&chunks, threads, |chunk| {
        let views: Vec<&Tensor> = chunk.iter().map(|s| &s.views).collect();
        descriptor
            .describe_batch(&prompts.features, &views)?
            .iter()
            .map(|f| {
                let logits = aggregate::zero_shot_logits(&prompts.features, f, 1.0)?;
                Ok(aggregate::predict(&logits))
            })
            .collect::<Result<Vec<usize>>>()
    })?
    .into_iter()
    .flatten()
    .collect::<Vec<usize>>();
    let mut confusion = vec![vec![0usize; n]; n];
    for (shape, &p) in test.shapes.iter().zip(&predictions) {
        confusion[shape.label][p] += 1;
    }
    let per_class: Vec<ClassReport> = prompts
        .categories
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let total: usize = confusion[c].iter().sum();
            let correct = confusion[c][c];
            ClassReport {
                name: name.clone(),
                total,
                correct,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            }
        })
        .collect();
    let correct: usize = (0..n).map(|c| confusion[c][c]).sum();
    let total = test.len();
    Ok(EvalReport {
        mode: descriptor.mode_name().to_string(),
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_class,
        confusion,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((classification_loss(&[1.0; 4], 0).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(classification_loss(&[20.0, 0.0], 0).unwrap() < 1e-6);
        assert!((classification_loss(&[2.0, 0.0, 0.0], 0).unwrap() - 0.23954).abs() < 1e-4);
        assert!(classification_loss(&[0.0], 1).is_err());

        assert_eq!(distillation_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(distillation_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
        assert!(distillation_loss(&[1.0], &[1.0, 2.0]).is_err());

        assert_eq!(total_loss(0.7, 0.0, true), 0.7);
        assert_eq!(total_loss(0.7, 5.0, false), 0.7);
        assert!((total_loss(0.7, 0.3, true) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_defaults_follow_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 50);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.weight_decay, 0.0001);
        assert_eq!(c.proj_width, 1024);
        assert_eq!(c.heads, 4);
        assert!(c.validate().is_ok());
        assert!(TrainConfig { shots: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn partial_overrides_deserialize() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "distill": false}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.distill);
        assert_eq!(c.batch_size, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = parallel_map(&items, 4, |&x| Ok(x * 2)).unwrap();
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
