//! Golden-file contents shared by the format tests and the acceptance suite.
#![allow(dead_code)]

use std::path::PathBuf;

use rekvc::converter::{ConverterConfig, ToyConverter};
use rekvc::kmeans::Codebook;
use rekvc::FeatureMatrix;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Values chosen to exercise sign, zero, subnormal and large magnitudes.
pub fn golden_features() -> FeatureMatrix {
    let values = [
        0.0,
        -0.0,
        1.0,
        -1.5,
        0.1,
        3.25e-3,
        -7.0e5,
        f32::MIN_POSITIVE / 4.0,
        f32::MAX,
        -f32::MAX,
        1.0e-20,
        42.0,
    ];
    FeatureMatrix::new(3, 4, 20_000, values.to_vec()).unwrap()
}

pub fn golden_codebook() -> Codebook {
    Codebook::from_parts(
        vec![0.0, 0.5, -2.0, 10.0, 0.5, 1e-3],
        2,
        3,
        vec![0.25],
        0xDEAD_BEEF,
    )
    .unwrap()
}

pub fn golden_model_config() -> ConverterConfig {
    ConverterConfig {
        input_dim: 2,
        output_dim: 3,
        num_blocks: 1,
        hidden_dim: 2,
        ffn_dim: 3,
        tap_layers: [1, 1, 1],
        vocab_sizes: [1, 2, 3],
        max_len: 2,
        attention: true,
        dropout: 0.0,
    }
}

pub fn golden_model() -> ToyConverter {
    let n = ToyConverter::new(golden_model_config(), 0)
        .unwrap()
        .num_params();
    let params = (0..n).map(|i| i as f64 * 0.25 - 4.0).collect();
    ToyConverter::from_params(golden_model_config(), params).unwrap()
}
