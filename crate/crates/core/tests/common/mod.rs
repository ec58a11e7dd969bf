//! Fixtures shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use cfx_core::data::{
    fit_normalizer, load_csv, split, Dataset, Direction, FeatureKind, FeatureSchema, FeatureSpec,
    NormalizationStats, TargetSpec, Task,
};
use cfx_core::env::ActionSpace;
use cfx_core::predictor::{FnModel, ModelInfo, Prediction, PredictorHandle};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Normalized train/test halves of a shipped dataset, 70/30 with seed 0.
pub struct Prepared {
    pub schema: FeatureSchema,
    pub stats: NormalizationStats,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn prepare(name: &str) -> Prepared {
    let dir = data_dir();
    let schema = FeatureSchema::load(dir.join(format!("{name}.toml"))).expect("schema");
    let ds = load_csv(dir.join(format!("{name}.csv")), &schema).expect("csv");
    let (train, test) = split(&ds, 0.7, 0).expect("split");
    let stats = fit_normalizer(&train).expect("normalizer");
    let train = train.normalize(&stats).expect("normalize train");
    let test = test.normalize(&stats).expect("normalize test");
    Prepared {
        schema,
        stats,
        train,
        test,
    }
}

pub fn numeric_schema(n: usize, task: Task) -> FeatureSchema {
    let features = (0..n)
        .map(|i| FeatureSpec {
            name: format!("x{i}"),
            kind: FeatureKind::Numeric,
            actionable: true,
            direction: Direction::Any,
            raw_min: 0.0,
            raw_max: 1.0,
        })
        .collect();
    FeatureSchema::new(
        features,
        TargetSpec {
            name: "y".into(),
            task,
        },
    )
    .expect("schema")
}

pub fn unit_stats(n: usize) -> NormalizationStats {
    NormalizationStats {
        min: vec![0.0; n],
        max: vec![1.0; n],
    }
}

pub fn toy_schema() -> FeatureSchema {
    numeric_schema(2, Task::Classification { n_classes: 2 })
}

pub fn toy_space() -> ActionSpace {
    ActionSpace::new(&toy_schema(), &unit_stats(2)).expect("space")
}

/// Class 1 iff x0 + x1/2 > 0.75.
pub fn toy_class(x: &[f64]) -> usize {
    usize::from(x[0] + 0.5 * x[1] > 0.75)
}

pub fn toy_handle() -> PredictorHandle {
    let model = FnModel {
        info: ModelInfo {
            task: Task::Classification { n_classes: 2 },
            n_features: 2,
        },
        f: |x: &[f64]| Prediction::Class(toy_class(x)),
    };
    PredictorHandle::local(Arc::new(model)).expect("handle")
}

/// Points with 0.3 <= x0 + x1/2 <= 1.2. Every one of them changes class
/// when x0 alone moves by at most 0.5.
pub fn toy_rows(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = Vec::with_capacity(2 * n);
    while flat.len() < 2 * n {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        if (0.3..=1.2).contains(&(a + 0.5 * b)) {
            flat.extend([a, b]);
        }
    }
    Array2::from_shape_vec((n, 2), flat).expect("shape")
}
