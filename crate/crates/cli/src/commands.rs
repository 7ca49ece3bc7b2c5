use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use viewagg_core::aggregate::{self, Aggregator};
use viewagg_core::encoder::EncoderParams;
use viewagg_core::store::{self, Container, Dataset, FeatureSet, PromptBank};
use viewagg_core::synth::{self, SynthConfig};
use viewagg_core::train::{self as trainer, Descriptor, EvalReport, TrainConfig};
use viewagg_core::verify::{run_suite, SuiteOptions};
use viewagg_core::{OpKind, Tensor};

use crate::output::{emit, embeddings_csv, json_line, to_json};
use crate::{
    DumpArgs, EvalArgs, Failure, GradcheckArgs, SynthArgs, TrainArgs, ZeroShotArgs,
};

#[derive(Serialize)]
struct Metrics<'a> {
    accuracy: f64,
    correct: usize,
    total: usize,
    /// `null` for classes absent from the split.
    per_class: BTreeMap<&'a str, Option<f64>>,
    mode: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    agg_mode: Option<&'a str>,
    seed: Option<u64>,
    config_echo: Value,
}

fn metrics<'a>(
    report: &'a EvalReport,
    agg_mode: Option<&'a str>,
    seed: Option<u64>,
    config_echo: Value,
) -> Metrics<'a> {
    Metrics {
        accuracy: report.accuracy,
        correct: report.correct,
        total: report.total,
        per_class: report
            .per_class
            .iter()
            .map(|c| (c.name.as_str(), c.accuracy))
            .collect(),
        mode: &report.mode,
        agg_mode,
        seed,
        config_echo,
    }
}

fn check_threads(threads: usize) -> Result<(), Failure> {
    if threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<EncoderParams, Failure> {
    match store::read_container(path)? {
        Container::Checkpoint(c) => Ok(EncoderParams::from_checkpoint(&c)?),
        other => Err(Failure::data(format!(
            "{}: expected a checkpoint, found {:?}",
            path.display(),
            other.kind()
        ))),
    }
}

#[derive(Serialize)]
struct ViewReport<'a> {
    shape_id: &'a str,
    label: usize,
    predicted: usize,
    scores: Vec<f64>,
    weights: Vec<f64>,
}

fn view_report<'a>(
    set: &'a FeatureSet,
    prompts: &PromptBank,
    agg: Aggregator,
    predictions: &[usize],
) -> Result<Vec<ViewReport<'a>>, Failure> {
    set.shapes
        .iter()
        .zip(predictions)
        .map(|(s, &predicted)| {
            let r = aggregate::aggregate_peva(&prompts.features, &s.views)?;
            let weights = match agg {
                Aggregator::Peva => r.weights,
                Aggregator::Avg => vec![1.0 / s.views.rows() as f64; s.views.rows()],
            };
            Ok(ViewReport {
                shape_id: &s.shape_id,
                label: s.label,
                predicted,
                scores: r.scores,
                weights,
            })
        })
        .collect()
}

pub fn zero_shot(args: &ZeroShotArgs) -> Result<(), Failure> {
    check_threads(args.threads)?;
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(Failure::usage(format!("--scale must be positive, got {}", args.scale)));
    }
    let ds = Dataset::open(&args.data.manifest)?;
    let set = ds.load_split(&args.data.split)?;
    let agg = Aggregator::from(args.agg);
    let report = trainer::evaluate(&set, &ds.prompts, Descriptor::Zero(agg), args.threads)?;
    if let Some(path) = &args.report {
        let rows = view_report(&set, &ds.prompts, agg, &report.predictions)?;
        emit(Some(path), &to_json(&rows))?;
    }
    let echo = json!({ "split": args.data.split, "scale": args.scale });
    emit(args.out.as_deref(), &json_line(&metrics(&report, Some(agg.name()), None, echo)))
}

/// Defaults, then the manifest's `train` object, then flags.
fn resolve_train_config(manifest_train: Option<&Value>, args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut merged = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    match manifest_train {
        None => {}
        Some(Value::Object(overrides)) => {
            for (k, v) in overrides {
                merged[k] = v.clone();
            }
        }
        Some(_) => return Err(Failure::data("manifest `train` must be a JSON object")),
    }
    let mut config: TrainConfig = serde_json::from_value(merged)
        .map_err(|e| Failure::data(format!("manifest `train` section: {e}")))?;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut config.shots, args.k);
    set(&mut config.epochs, args.epochs);
    set(&mut config.batch_size, args.batch_size);
    set(&mut config.proj_width, args.proj_width);
    set(&mut config.heads, args.heads);
    set(&mut config.mlp_hidden, args.mlp_hidden);
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(scale) = args.scale {
        config.logit_scale = scale;
    }
    if args.no_distill {
        config.distill = false;
    }
    config.validate()?;
    Ok(config)
}

pub fn train(args: &TrainArgs) -> Result<(), Failure> {
    let ds = Dataset::open(&args.manifest)?;
    let config = resolve_train_config(ds.manifest.train.as_ref(), args)?;
    config.encoder_config(ds.prompts.dim()).validate()?;
    let full = ds.load_split("train")?;
    let shots = trainer::sample_k_shot(&full, &ds.prompts.categories, config.shots, config.seed)?;
    let test = if args.track_test {
        Some(ds.load_split("test")?)
    } else {
        None
    };
    let out = trainer::train(&shots, &ds.prompts, &config, test.as_ref())?;
    if !out.params.is_finite() {
        return Err(Failure::numeric("training produced non-finite parameters"));
    }

    fs::create_dir_all(&args.out).map_err(|e| Failure::io(&args.out, e))?;
    store::write_container(
        &Container::Checkpoint(out.params.to_checkpoint()),
        args.out.join("checkpoint.pevf"),
    )?;
    let log: Vec<u8> = out.log.iter().flat_map(json_line).collect();
    emit(Some(&args.out.join("epochs.jsonl")), &log)?;
    emit(Some(&args.out.join("config.json")), &json_line(&config))?;

    let fit = trainer::evaluate(&shots, &ds.prompts, Descriptor::Few(&out.params), 1)?;
    let echo = serde_json::to_value(&config).expect("config serializes");
    emit(
        Some(&args.out.join("train_metrics.json")),
        &json_line(&metrics(&fit, None, Some(config.seed), echo)),
    )?;
    let last = out.log.last().expect("log has the initial entry");
    eprintln!(
        "trained {} epochs on {} shapes: loss {:.6}, train accuracy {:.4}",
        config.epochs,
        shots.len(),
        last.loss_total,
        fit.accuracy
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    check_threads(args.threads)?;
    let ds = Dataset::open(&args.data.manifest)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let set = ds.load_split(&args.data.split)?;
    let report = trainer::evaluate(&set, &ds.prompts, Descriptor::Few(&params), args.threads)?;
    let echo = json!({
        "split": args.data.split,
        "checkpoint": args.checkpoint.display().to_string(),
    });
    emit(args.out.as_deref(), &json_line(&metrics(&report, None, None, echo)))
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let d = SynthConfig::default();
    let config = SynthConfig {
        classes: args.classes.unwrap_or(d.classes),
        views: args.views.unwrap_or(d.views),
        dim: args.dim.unwrap_or(d.dim),
        train_per_class: args.train_per_class.unwrap_or(d.train_per_class),
        test_per_class: args.test_per_class.unwrap_or(d.test_per_class),
        prompt_alignment: args.alignment.unwrap_or(d.prompt_alignment),
        view_noise: args.noise.unwrap_or(d.view_noise),
        degenerate_fraction: args.degenerate.unwrap_or(d.degenerate_fraction),
        seed: args.seed.unwrap_or(d.seed),
    };
    let manifest = synth::generate(&config)?.write(&args.out)?;
    emit(Some(&args.out.join("synth_config.json")), &json_line(&config))?;
    eprintln!("wrote {}", manifest.display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let sign_flip = match &args.inject_sign_flip {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name).ok_or_else(|| Failure::usage(format!("unknown op `{name}`")))?,
        ),
    };
    let report = run_suite(&SuiteOptions {
        seed: args.seed,
        sign_flip,
        wide: args.wide,
    })?;
    emit(args.out.as_deref(), &json_line(&report))?;
    for case in report.cases.iter().filter(|c| !c.report.passed) {
        eprintln!("FAIL {}: max rel err {:.3e}", case.name, case.report.max_rel_err);
    }
    eprintln!(
        "{} cases, max rel err {:.3e}, distillation gradient deviation {:.3e}",
        report.cases.len(),
        report.max_rel_err,
        report.distill_grad_max_dev
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::numeric("gradient check failed"))
    }
}

pub fn dump_embeddings(args: &DumpArgs) -> Result<(), Failure> {
    let ds = Dataset::open(&args.data.manifest)?;
    let set = ds.load_split(&args.data.split)?;
    let params = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let descriptor = match &params {
        Some(p) => Descriptor::Few(p),
        None => Descriptor::Zero(args.agg.into()),
    };
    let views: Vec<&Tensor> = set.shapes.iter().map(|s| &s.views).collect();
    let rows: Vec<(String, usize, Vec<f64>)> = set
        .shapes
        .iter()
        .zip(descriptor.describe_batch(&ds.prompts.features, &views)?)
        .map(|(s, f)| (s.shape_id.clone(), s.label, f))
        .collect();
    emit(args.out.as_deref(), &embeddings_csv(&rows, set.dim)?)
}
