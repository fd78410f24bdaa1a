mod common;

use common::{gradient_check_cases, locality_violation};
use n2v2::model::{ModelConfig, PoolingKind};

#[test]
fn backprop_matches_finite_differences_for_every_variant() {
    let variants = [
        ModelConfig::n2v(1, 2),
        ModelConfig::n2v2(1, 2),
        ModelConfig {
            pooling: PoolingKind::MaxBlur,
            ..ModelConfig::n2v(1, 2)
        },
        ModelConfig {
            top_skip: false,
            ..ModelConfig::n2v(1, 2)
        },
        ModelConfig::n2v2(2, 2),
    ];
    let (errors, _) = gradient_check_cases(&variants, 10);
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < 1e-2, "case {i}: relative error {e}");
    }
}

#[test]
fn masked_loss_ignores_unmasked_predictions() {
    for seed in 0..5 {
        assert_eq!(locality_violation(seed), 0.0);
    }
}
