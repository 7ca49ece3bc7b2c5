//! The finite-difference suite behind `viewagg gradcheck`: every
//! differentiable op in isolation, then the encoder under both losses.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::encoder::{EncoderConfig, EncoderParams, EncoderVars};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::store::{PromptBank, ShapeRecord};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::train::record_batch_loss;

/// Step and tolerance for single ops.
pub const OP_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
/// Step (scaled by `max(1, |θ|)`) and tolerance for the encoder.
pub const ENCODER_STEP: f64 = 1e-4;
pub const ENCODER_TOLERANCE: f64 = 1e-4;
pub const DISTILL_GRAD_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    pub sign_flip: Option<OpKind>,
    /// Also run a sampled check at the full default projection width.
    pub wide: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub step: f64,
    pub relative_step: bool,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub cases: Vec<SuiteCase>,
    /// Max |∂L_fd/∂f − 2(f − f_zero)| from the tape.
    pub distill_grad_max_dev: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut Xoshiro256PlusPlus, shape: &[usize], half_width: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-half_width..half_width)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn unit_rows(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Tensor {
    crate::store::l2_normalize_rows(&uniform(rng, &[rows, cols], 1.0)).expect("non-zero rows")
}

/// `‖y − target‖²` so every op is checked through a scalar.
fn against(target: Tensor, op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Loss {
    Box::new(move |tape, p| {
        let y = op(tape, p)?;
        let t = tape.constant(target.clone());
        tape.squared_distance(y, t)
    })
}

fn op_cases(rng: &mut Xoshiro256PlusPlus) -> Vec<(&'static str, Loss, Vec<Tensor>)> {
    let mut u = |shape: &[usize]| uniform(rng, shape, 1.0);
    vec![
        (
            "matmul",
            against(u(&[5, 3]), |t, p| t.matmul(p[0], p[1])),
            vec![u(&[5, 7]), u(&[7, 3])],
        ),
        (
            "matmul_transposed",
            against(u(&[4, 3]), |t, p| t.matmul_transposed(p[0], p[1])),
            vec![u(&[4, 6]), u(&[3, 6])],
        ),
        (
            "transpose",
            against(u(&[5, 3]), |t, p| t.transpose(p[0])),
            vec![u(&[3, 5])],
        ),
        (
            "add",
            against(u(&[4, 3]), |t, p| t.add(p[0], p[1])),
            vec![u(&[4, 3]), u(&[4, 3])],
        ),
        (
            "add_row",
            against(u(&[4, 3]), |t, p| t.add_row(p[0], p[1])),
            vec![u(&[4, 3]), u(&[3])],
        ),
        (
            "scale",
            against(u(&[4, 3]), |t, p| Ok(t.scale(p[0], 1.7))),
            vec![u(&[4, 3])],
        ),
        (
            "softmax",
            against(u(&[4, 5]), |t, p| t.softmax(p[0])),
            vec![u(&[4, 5])],
        ),
        (
            "layer_norm",
            against(u(&[4, 8]), |t, p| t.layer_norm(p[0], p[1], p[2], 1e-5)),
            vec![u(&[4, 8]), u(&[8]), u(&[8])],
        ),
        (
            "gelu",
            against(u(&[4, 6]), |t, p| {
                let x = t.scale(p[0], 2.5);
                Ok(t.gelu(x))
            }),
            vec![u(&[4, 6])],
        ),
        (
            "concat_rows",
            against(u(&[4, 4]), |t, p| t.concat_rows(p[0], p[1])),
            vec![u(&[1, 4]), u(&[3, 4])],
        ),
        (
            "stack_rows",
            against(u(&[4, 4]), |t, p| t.stack_rows(p)),
            vec![u(&[1, 4]), u(&[2, 4]), u(&[1, 4])],
        ),
        (
            "slice_rows",
            against(u(&[2, 4]), |t, p| t.slice_rows(p[0], 1, 2)),
            vec![u(&[5, 4])],
        ),
        (
            "cross_entropy",
            Box::new(|t, p| {
                let l = t.scale(p[0], 3.0);
                t.cross_entropy(l, 2)
            }),
            vec![u(&[1, 6])],
        ),
        (
            "squared_distance",
            Box::new(|t, p| t.squared_distance(p[0], p[1])),
            vec![u(&[1, 6]), u(&[1, 6])],
        ),
    ]
}

/// Encoder parameters drawn well away from their initial scale so every
/// path carries a gradient of useful magnitude.
pub fn random_params(config: EncoderConfig, rng: &mut Xoshiro256PlusPlus) -> Result<EncoderParams> {
    let mut p = EncoderParams::init(config, rng)?;
    for (name, t) in p.tensors.iter_mut() {
        let fresh = uniform(rng, t.shape(), 0.5);
        let gain = name.ends_with("gamma");
        for (v, r) in t.data_mut().iter_mut().zip(fresh.data()) {
            *v = if gain { 1.0 + r } else { *r };
        }
    }
    Ok(p)
}

struct ToyBatch {
    prompts: PromptBank,
    shapes: Vec<ShapeRecord>,
}

fn toy_batch(rng: &mut Xoshiro256PlusPlus, dim: usize) -> ToyBatch {
    let categories = (0..3).map(|c| format!("c{c}")).collect();
    let prompts = PromptBank::new(categories, "{CLASS}".into(), unit_rows(rng, 3, dim))
        .expect("valid toy prompts");
    let shapes = [(3, 0), (2, 2)]
        .iter()
        .enumerate()
        .map(|(i, &(m, label))| ShapeRecord {
            shape_id: format!("toy{i}"),
            label,
            views: unit_rows(rng, m, dim),
        })
        .collect();
    ToyBatch { prompts, shapes }
}

fn encoder_case(
    name: &str,
    config: EncoderConfig,
    distill: bool,
    max_entries: Option<usize>,
    opts: &SuiteOptions,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<SuiteCase> {
    let params = random_params(config.clone(), rng)?;
    let batch = toy_batch(rng, config.dim);
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let values: Vec<Tensor> = params.tensors.values().cloned().collect();
    let f = move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let ev = EncoderVars::from_named(names.iter().cloned().zip(vars.iter().copied()));
        let pv = tape.constant(batch.prompts.features.clone());
        let refs: Vec<&ShapeRecord> = batch.shapes.iter().collect();
        let loss = record_batch_loss(tape, &ev, &config, &batch.prompts.features, pv, &refs, 10.0, distill)?;
        Ok(loss.objective)
    };
    let check = GradCheckOptions {
        step: ENCODER_STEP,
        relative_step: true,
        tolerance: ENCODER_TOLERANCE,
        max_entries_per_param: max_entries,
        seed: opts.seed,
        sign_flip: opts.sign_flip,
        ..GradCheckOptions::default()
    };
    Ok(SuiteCase {
        name: name.to_string(),
        step: ENCODER_STEP,
        relative_step: true,
        report: grad_check(f, &values, &check)?,
    })
}

fn distill_grad_deviation(opts: &SuiteOptions, rng: &mut Xoshiro256PlusPlus) -> Result<f64> {
    let few = uniform(rng, &[1, 8], 1.0);
    let zero = uniform(rng, &[1, 8], 1.0);
    let mut tape = match opts.sign_flip {
        Some(k) => Tape::with_sign_flip(k),
        None => Tape::new(),
    };
    let f = tape.param(few.clone());
    let z = tape.constant(zero.clone());
    let loss = tape.squared_distance(f, z)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(f).expect("gradient of a parameter");
    Ok(g.data()
        .iter()
        .zip(few.data().iter().zip(zero.data()))
        .map(|(g, (a, b))| (g - 2.0 * (a - b)).abs())
        .fold(0.0, f64::max))
}

/// Runs every case; a case's randomness depends only on `opts.seed`.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut cases = Vec::new();
    let op_opts = GradCheckOptions {
        step: OP_STEP,
        tolerance: OP_TOLERANCE,
        seed: opts.seed,
        sign_flip: opts.sign_flip,
        ..GradCheckOptions::default()
    };
    for (name, f, params) in op_cases(&mut rng) {
        cases.push(SuiteCase {
            name: format!("op.{name}"),
            step: OP_STEP,
            relative_step: false,
            report: grad_check(f, &params, &op_opts)?,
        });
    }

    let tiny = EncoderConfig {
        proj_width: 8,
        heads: 2,
        mlp_hidden: 6,
        ..EncoderConfig::new(8)
    };
    cases.push(encoder_case("encoder.cls_and_fd", tiny.clone(), true, None, opts, &mut rng)?);
    cases.push(encoder_case("encoder.cls_only", tiny.clone(), false, None, opts, &mut rng)?);
    let two_layer = EncoderConfig { layers: 2, ..tiny };
    cases.push(encoder_case("encoder.two_layer", two_layer, true, None, opts, &mut rng)?);
    if opts.wide {
        let wide = EncoderConfig::new(8);
        cases.push(encoder_case("encoder.default_width_sampled", wide, true, Some(6), opts, &mut rng)?);
    }

    let distill_grad_max_dev = distill_grad_deviation(opts, &mut rng)?;
    let max_rel_err = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let passed = cases.iter().all(|c| c.report.passed) && distill_grad_max_dev <= DISTILL_GRAD_TOLERANCE;
    Ok(SuiteReport {
        seed: opts.seed,
        cases,
        distill_grad_max_dev,
        max_rel_err,
        passed,
    })
}
