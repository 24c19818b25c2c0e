//! Train, checkpoint and sample through the public API.

use wgf_core::distributions::DistributionSpec;
use wgf_core::generator::{
    sample, train_generator, Architecture, Checkpoint, Conditioning, TrainConfig, TrainingData,
    CHECKPOINT_FORMAT_VERSION,
};
use wgf_core::ot::{sinkhorn_divergence, SinkhornSpec};
use wgf_core::rng::stream;
use wgf_core::velocity::{SelfEstimator, VelocityFieldSpec};

fn config() -> TrainConfig {
    TrainConfig {
        arch: Architecture {
            hidden: vec![32; 2],
            ..Architecture::default()
        },
        batch_n: 128,
        batch_m: 128,
        steps: 300,
        ema_decay: 0.9,
        velocity: VelocityFieldSpec::sinkhorn(SinkhornSpec::new(0.1, 50), SelfEstimator::TwoBatch),
        checkpoint_interval: 100,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_moves_the_generator_toward_the_target() {
    let data = TrainingData::new(
        &DistributionSpec::StandardNormal { dim: 2 },
        &DistributionSpec::isotropic(vec![2.0, 0.0], 1.0),
    )
    .unwrap();
    let target = data.target.sample(512, &mut stream(0, "test/target"));
    let spec = SinkhornSpec::new(0.1, 200);
    let energy = |params: &wgf_core::generator::GeneratorParams| {
        let x = sample(
            params,
            &data.reference,
            512,
            &Conditioning::none(),
            &mut stream(0, "test/z"),
        )
        .unwrap();
        sinkhorn_divergence(&x, &target, &spec).unwrap()
    };

    let mut snapshots = Vec::new();
    let out = train_generator(config(), data.clone(), &mut |s| {
        snapshots.push((
            s.step,
            Checkpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                step: s.step,
                config: config(),
                params: s.params.clone(),
                ema: s.ema.clone(),
            },
        ));
        Ok(())
    })
    .unwrap();
    assert_eq!(snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), [0, 100, 200, 300]);
    let start = energy(&snapshots[0].1.params);
    let end = energy(&out.ema);
    assert!(end < 0.1 * start, "S before {start}, after {end}");

    // identical seed, identical weights
    let again = train_generator(config(), data.clone(), &mut |_| Ok(())).unwrap();
    assert_eq!(again.ema.to_flat(), out.ema.to_flat());

    // checkpoints round-trip bit for bit
    let ck = &snapshots[3].1;
    let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    assert_eq!(&back, ck);
}
