//! Fixtures shared by the engine benchmarks in `benches/`.

use precofact::{
    generate_synthetic, Activation, Dataset, ModelConfig, ModelParams, PredictionSet,
    SyntheticSpec, TokenCounts, Variant,
};

/// Token counts of a realistic sample: 197 image patches and a mid-length text.
pub const PAPER_TOKENS: TokenCounts = TokenCounts {
    claim_image: 197,
    claim_text: 64,
    doc_image: 197,
    doc_text: 256,
};

pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ..ModelConfig::toy(16, 32, 4, 16)
    }
}

pub fn paper_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        activation: Activation::Relu,
        ..ModelConfig::default()
    }
}

pub fn model(config: ModelConfig) -> ModelParams<f32> {
    ModelParams::init(config, 1).expect("valid config")
}

/// `per_class * 5` labeled samples matching `config`'s input widths.
pub fn samples(config: &ModelConfig, per_class: usize, tokens: TokenCounts) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        samples_per_class: per_class,
        tokens,
        text_width: config.input_width_text,
        image_width: config.input_width_image,
        separation: 3.0,
        seed: 5,
        labeled: true,
        task: Default::default(),
    })
    .expect("valid spec")
}

/// `members` prediction sets over the same `n` ids with arbitrary rows.
pub fn prediction_sets(members: usize, n: usize) -> Vec<PredictionSet> {
    (0..members)
        .map(|m| {
            let ids = (0..n).map(|i| format!("s{i:07}")).collect();
            let probs = (0..n)
                .map(|i| {
                    let raw: [f64; 5] =
                        std::array::from_fn(|c| (((i * 31 + c * 7 + m * 13) % 17) + 1) as f64);
                    let total: f64 = raw.iter().sum();
                    raw.map(|v| v / total)
                })
                .collect();
            PredictionSet::new(format!("m{m}"), ids, probs).expect("valid rows")
        })
        .collect()
}
