//! Seeded synthetic view/prompt features with controllable view quality.
//!
//! Each class gets an orthonormal prototype. Its prompt is the prototype
//! tilted away by an orthogonal random direction so the two have cosine
//! `prompt_alignment`. An informative view is the prototype plus isotropic
//! Gaussian noise with per-coordinate standard deviation `view_noise`; a
//! degenerate view is pure isotropic noise and carries no class signal.
//! Each view is independently degenerate with probability
//! `degenerate_fraction`; a shape that draws all-degenerate has one view,
//! picked uniformly, turned informative.
//! All rows are unit-normalized and rounded to binary32, so a generated
//! set equals its on-disk form exactly.
//!
//! All randomness comes from one `Xoshiro256PlusPlus` stream seeded through
//! SplitMix64 (`seed_from_u64`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{self, Container, FeatureSet, Manifest, PromptBank, ShapeRecord};
use crate::tensor::{kernels, Tensor};

pub const TEMPLATE: &str = "a synthetic view of {CLASS}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub views: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Cosine between a class prototype and its prompt, in [0, 1].
    pub prompt_alignment: f64,
    /// Per-coordinate noise standard deviation on informative views.
    pub view_noise: f64,
    /// Share of each shape's views replaced by pure noise, in [0, 1).
    pub degenerate_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            views: 8,
            dim: 64,
            train_per_class: 16,
            test_per_class: 20,
            prompt_alignment: 0.9,
            view_noise: 0.3,
            degenerate_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.views == 0 || self.dim == 0 {
            return fail("views and dim must be positive".into());
        }
        if self.train_per_class == 0 && self.test_per_class == 0 {
            return fail("nothing to generate".into());
        }
        if !(0.0..=1.0).contains(&self.prompt_alignment) {
            return fail(format!("prompt_alignment {} outside [0, 1]", self.prompt_alignment));
        }
        if !(self.view_noise >= 0.0) || !self.view_noise.is_finite() {
            return fail(format!("view_noise {} must be finite and ≥ 0", self.view_noise));
        }
        if !(0.0..1.0).contains(&self.degenerate_fraction) {
            return fail(format!(
                "degenerate_fraction {} outside [0, 1)",
                self.degenerate_fraction
            ));
        }
        if self.dim < self.classes {
            return fail(format!(
                "cannot place {} orthogonal prototypes in {} dimensions",
                self.classes, self.dim
            ));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        let width = (self.classes - 1).to_string().len();
        (0..self.classes)
            .map(|c| format!("class{c:0width$}"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: FeatureSet,
    pub test: FeatureSet,
    pub prompts: PromptBank,
    /// Unit-norm class prototypes, N×D.
    pub prototypes: Tensor,
    /// `true` marks degenerate views, per shape, parallel to `train.shapes`.
    pub train_degenerate: Vec<Vec<bool>>,
    pub test_degenerate: Vec<Vec<bool>>,
}

fn gaussian(rng: &mut Xoshiro256PlusPlus, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = kernels::dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Unit-normalizes, then rounds every entry through binary32.
fn finish_row(mut v: Vec<f64>) -> Vec<f64> {
    normalize(&mut v);
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn remove_component(v: &mut [f64], unit: &[f64]) {
    let c = kernels::dot(v, unit);
    v.iter_mut().zip(unit).for_each(|(x, u)| *x -= c * u);
}

fn prototypes(rng: &mut Xoshiro256PlusPlus, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = gaussian(rng, dim);
        // Two Gram-Schmidt passes keep the basis orthogonal to rounding.
        for _ in 0..2 {
            for b in &basis {
                remove_component(&mut v, b);
            }
        }
        if kernels::dot(&v, &v).sqrt() > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

fn make_split(
    rng: &mut Xoshiro256PlusPlus,
    config: &SynthConfig,
    protos: &[Vec<f64>],
    per_class: usize,
    prefix: &str,
) -> (Vec<ShapeRecord>, Vec<Vec<bool>>) {
    let mut shapes = Vec::with_capacity(per_class * config.classes);
    let mut masks = Vec::with_capacity(per_class * config.classes);
    for i in 0..per_class {
        for (label, proto) in protos.iter().enumerate() {
            let mut mask: Vec<bool> = (0..config.views)
                .map(|_| rng.gen::<f64>() < config.degenerate_fraction)
                .collect();
            if mask.iter().all(|&d| d) {
                mask[rng.gen_range(0..config.views)] = false;
            }
            let mut data = Vec::with_capacity(config.views * config.dim);
            for &is_degenerate in &mask {
                let noise = gaussian(rng, config.dim);
                let row = if is_degenerate {
                    noise
                } else {
                    proto
                        .iter()
                        .zip(&noise)
                        .map(|(p, n)| p + config.view_noise * n)
                        .collect()
                };
                data.extend(finish_row(row));
            }
            shapes.push(ShapeRecord {
                shape_id: format!("{prefix}_{:05}", i * config.classes + label),
                label,
                views: Tensor::new(vec![config.views, config.dim], data).expect("sized"),
            });
            masks.push(mask);
        }
    }
    (shapes, masks)
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let protos = prototypes(&mut rng, config.classes, config.dim);

    let rho = config.prompt_alignment;
    let tilt = (1.0 - rho * rho).max(0.0).sqrt();
    let mut prompt_rows = Vec::with_capacity(config.classes);
    for proto in &protos {
        let mut u = gaussian(&mut rng, config.dim);
        remove_component(&mut u, proto);
        remove_component(&mut u, proto);
        normalize(&mut u);
        let row: Vec<f64> = proto
            .iter()
            .zip(&u)
            .map(|(p, o)| rho * p + tilt * o)
            .collect();
        prompt_rows.push(finish_row(row));
    }

    let (train_shapes, train_degenerate) =
        make_split(&mut rng, config, &protos, config.train_per_class, "train");
    let (test_shapes, test_degenerate) =
        make_split(&mut rng, config, &protos, config.test_per_class, "test");

    let set = |shapes| FeatureSet {
        shapes,
        dim: config.dim,
        backbone_tag: "synthetic".into(),
        normalized: true,
    };
    Ok(SynthData {
        train: set(train_shapes),
        test: set(test_shapes),
        prompts: PromptBank::new(
            config.category_names(),
            TEMPLATE.into(),
            Tensor::from_rows(&prompt_rows)?,
        )?,
        prototypes: Tensor::from_rows(&protos)?,
        train_degenerate,
        test_degenerate,
    })
}

impl SynthData {
    /// Writes `train.pevf`, `test.pevf`, `prompts.pevf` and
    /// `manifest.json` into `dir`. Empty splits are omitted.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut splits = BTreeMap::new();
        for (name, set) in [("train", &self.train), ("test", &self.test)] {
            if set.is_empty() {
                continue;
            }
            let file = format!("{name}.pevf");
            store::write_container(&Container::Views(set.clone()), dir.join(&file))?;
            splits.insert(name.to_string(), PathBuf::from(file));
        }
        store::write_container(&Container::Prompts(self.prompts.clone()), dir.join("prompts.pevf"))?;
        let manifest = Manifest {
            categories: self.prompts.categories.clone(),
            template: self.prompts.template.clone(),
            splits,
            prompts: PathBuf::from("prompts.pevf"),
            backbone: Some(self.train.backbone_tag.clone()),
            normalized: true,
            train: None,
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            views: 4,
            dim: 8,
            train_per_class: 2,
            test_per_class: 3,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_and_norms() {
        let data = generate(&small()).unwrap();
        assert_eq!(data.train.len(), 6);
        assert_eq!(data.test.len(), 9);
        assert_eq!(data.prompts.len(), 3);
        for s in data.train.shapes.iter().chain(&data.test.shapes) {
            assert_eq!(s.views.shape(), &[4, 8]);
            for row in s.views.row_iter() {
                assert!((kernels::dot(row, row).sqrt() - 1.0).abs() < 1e-6);
            }
        }
        for mask in data.train_degenerate.iter().chain(&data.test_degenerate) {
            assert_eq!(mask.len(), 4);
            assert!(mask.iter().any(|&d| !d));
        }
    }

    #[test]
    fn prototypes_orthonormal_and_prompts_aligned() {
        let data = generate(&small()).unwrap();
        let p = &data.prototypes;
        for i in 0..3 {
            for j in 0..3 {
                let d = kernels::dot(p.row(i), p.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
            let cos = kernels::dot(p.row(i), data.prompts.features.row(i));
            assert!((cos - 0.9).abs() < 1e-6, "{cos}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.prompts, b.prompts);
        let c = generate(&SynthConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn capacity_error_when_dim_below_classes() {
        let cfg = SynthConfig {
            classes: 10,
            dim: 8,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_ranges_rejected() {
        for cfg in [
            SynthConfig { prompt_alignment: 1.5, ..small() },
            SynthConfig { view_noise: -0.1, ..small() },
            SynthConfig { degenerate_fraction: 1.0, ..small() },
            SynthConfig { classes: 1, ..small() },
        ] {
            assert!(generate(&cfg).is_err());
        }
    }

    #[test]
    fn always_keeps_an_informative_view() {
        let cfg = SynthConfig {
            views: 2,
            degenerate_fraction: 0.99,
            ..small()
        };
        let data = generate(&cfg).unwrap();
        for mask in data.train_degenerate.iter().chain(&data.test_degenerate) {
            assert_eq!(mask.iter().filter(|&&d| !d).count(), 1);
        }
    }

    #[test]
    fn degenerate_rate_tracks_fraction() {
        let data = generate(&SynthConfig::default()).unwrap();
        let masks: Vec<&Vec<bool>> = data.train_degenerate.iter().chain(&data.test_degenerate).collect();
        let total: usize = masks.iter().map(|m| m.len()).sum();
        let degenerate: usize = masks.iter().map(|m| m.iter().filter(|&&d| d).count()).sum();
        let rate = degenerate as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.05, "{rate}");
    }
}
