use viewagg_core::aggregate::{aggregate_peva, Aggregator};
use viewagg_core::store::{encode, Container};
use viewagg_core::synth::{generate, SynthConfig};
use viewagg_core::train::{evaluate, Descriptor};

fn accuracy(config: &SynthConfig, agg: Aggregator) -> f64 {
    let data = generate(config).unwrap();
    evaluate(&data.test, &data.prompts, Descriptor::Zero(agg), 1)
        .unwrap()
        .accuracy
}

#[test]
fn clean_views_and_exact_prompts_are_always_right() {
    let config = SynthConfig {
        view_noise: 0.0,
        prompt_alignment: 1.0,
        degenerate_fraction: 0.0,
        ..SynthConfig::default()
    };
    assert_eq!(accuracy(&config, Aggregator::Peva), 1.0);
}

#[test]
fn same_seed_gives_identical_containers() {
    let config = SynthConfig { seed: 3, ..SynthConfig::default() };
    let (a, b) = (generate(&config).unwrap(), generate(&config).unwrap());
    for (x, y) in [(a.train, b.train), (a.test, b.test)] {
        assert_eq!(
            encode(&Container::Views(x)).unwrap(),
            encode(&Container::Views(y)).unwrap()
        );
    }
    assert_eq!(
        encode(&Container::Prompts(a.prompts)).unwrap(),
        encode(&Container::Prompts(b.prompts)).unwrap()
    );
    let other = generate(&SynthConfig { seed: 4, ..config }).unwrap();
    assert_ne!(other.test.shapes[0].views, generate(&config).unwrap().test.shapes[0].views);
}

#[test]
fn degenerate_views_score_lower() {
    let data = generate(&SynthConfig::default()).unwrap();
    let (mut degenerate, mut informative) = (Vec::new(), Vec::new());
    for (shape, mask) in data.test.shapes.iter().zip(&data.test_degenerate) {
        let scores = aggregate_peva(&data.prompts.features, &shape.views).unwrap().scores;
        for (s, &d) in scores.iter().zip(mask) {
            if d { degenerate.push(*s) } else { informative.push(*s) }
        }
    }
    assert!(degenerate.len() + informative.len() >= 1000);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&degenerate) < mean(&informative));
}

#[test]
fn accuracy_does_not_rise_with_noise() {
    for seed in 0..10 {
        let accs: Vec<f64> = [0.0, 0.2, 0.4]
            .iter()
            .map(|&view_noise| {
                accuracy(&SynthConfig { seed, view_noise, ..SynthConfig::default() }, Aggregator::Peva)
            })
            .collect();
        assert!(accs[0] >= accs[1] && accs[1] >= accs[2], "seed {seed}: {accs:?}");
    }
}

#[test]
fn guided_beats_plain_average_on_most_seeds() {
    let wins = (0..10)
        .filter(|&seed| {
            let config = SynthConfig { seed, ..SynthConfig::default() };
            accuracy(&config, Aggregator::Peva) > accuracy(&config, Aggregator::Avg)
        })
        .count();
    assert!(wins >= 8, "{wins}/10");
}
