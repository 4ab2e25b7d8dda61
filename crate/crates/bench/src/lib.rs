//! Fixtures shared by the criterion benches.

use adamixt_core::data::{synth_multiperiodic, SynthSpec};
use adamixt_core::{AdaMixT, Batch, ExpertProfile, ModelConfig, ScaleFactor};

/// Default two-expert configuration (L = 96, K = 96, D = 64).
pub fn default_model() -> AdaMixT {
    AdaMixT::new(ModelConfig::default(), 0).expect("default config is valid")
}

/// One-block D = 16 experts, as used by the example configs.
pub fn small_model() -> AdaMixT {
    let shrink = |mut e: ExpertProfile| {
        e.depth = 1;
        e.d_model = 16;
        e.heads = 2;
        e.d_k = 8;
        e
    };
    let config = ModelConfig {
        pred_len: 24,
        experts: vec![
            shrink(ExpertProfile::gpm(ScaleFactor::ONE)),
            shrink(ExpertProfile::dsm(ScaleFactor { num: 1, den: 2 })),
        ],
        gate_hidden: 16,
        fusion_dim: 32,
        ..Default::default()
    };
    AdaMixT::new(config, 0).expect("small config is valid")
}

/// `size` consecutive windows of a noisy two-period series, with targets.
pub fn sample_batch(model: &AdaMixT, size: usize) -> Batch {
    let (l, k) = (model.config().seq_len, model.config().pred_len);
    let ds = synth_multiperiodic(&SynthSpec {
        length: l + k + size,
        periods: vec![24.0, 7.0],
        amplitudes: vec![1.0, 0.4],
        noise_std: 0.1,
        ..Default::default()
    })
    .expect("valid synthetic spec");
    let x = ds.channel(0);
    let inputs: Vec<&[f64]> = (0..size).map(|o| &x[o..o + l]).collect();
    let targets: Vec<&[f64]> = (0..size).map(|o| &x[o + l..o + l + k]).collect();
    Batch::build(&inputs, Some(&targets), model.geometries(), model.config().norm_eps).expect("consistent batch")
}
