use ifrp_core::losses::ExtractorSpec;
use ifrp_core::nn::ParamStore;
use ifrp_core::trainer::{train, Checkpoint, PairSet, TrainConfig, TrainOptions, TrainState, METRICS_HEADER};
use ifrp_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        image_size: 8,
        base_channels: 2,
        depth: 3,
        epochs: 3,
        checkpoint_every: 1,
        extractor: ExtractorSpec::Pixel,
        ..Default::default()
    }
}

fn data() -> PairSet {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    PairSet {
        sf: (0..5).map(|_| Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng)).collect(),
        rf: (0..5).map(|_| Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng)).collect(),
    }
}

fn bits(store: &ParamStore) -> Vec<u64> {
    store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn resuming_at_an_epoch_boundary_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let psi = config().extractor.build().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().join("full")),
    };
    let full = train(TrainState::new(config()).unwrap(), &data(), psi.as_ref(), &opts).unwrap();
    // 5 pairs in batches of 2: the odd pair is dropped each epoch.
    assert_eq!(full.metrics.len(), 6);
    let csv = std::fs::read_to_string(dir.path().join("full/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 7);

    let ckpt = Checkpoint::load(&dir.path().join("full/epoch_0001.ckpt")).unwrap();
    let resumed_state = TrainState::from_checkpoint(&ckpt).unwrap();
    assert_eq!((resumed_state.epoch, resumed_state.step), (1, 2));
    let resumed = train(resumed_state, &data(), psi.as_ref(), &TrainOptions { out_dir: None }).unwrap();
    assert_eq!(resumed.metrics, full.metrics[2..]);
    assert_eq!(bits(&resumed.state.srn.params), bits(&full.state.srn.params));
    assert_eq!(bits(&resumed.state.dn.params), bits(&full.state.dn.params));
    assert_eq!(bits(&resumed.state.srn.buffers), bits(&full.state.srn.buffers));
}

#[test]
fn max_steps_caps_the_run() {
    let psi = config().extractor.build().unwrap();
    let cfg = TrainConfig {
        max_steps: Some(3),
        ..config()
    };
    let out = train(TrainState::new(cfg).unwrap(), &data(), psi.as_ref(), &TrainOptions { out_dir: None }).unwrap();
    assert_eq!(out.metrics.len(), 3);
    assert_eq!((out.state.step, out.state.epoch), (3, 1));
}
