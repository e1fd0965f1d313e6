use spanlight_core::trainer::{
    encode_instances, instance_gradients, instance_loss, make_synthetic_dataset, read_dataset, read_params, train,
    write_dataset, write_params, SyntheticConfig, TrainConfig, TrainableParams,
};
use spanlight_core::EmbedderConfig;

fn small() -> (SyntheticConfig, EmbedderConfig) {
    let data = SyntheticConfig {
        num_queries: 10,
        corpus_size: 60,
        ..SyntheticConfig::default()
    };
    let emb = EmbedderConfig {
        dim: 16,
        ..EmbedderConfig::default()
    };
    (data, emb)
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        hidden_dim: 24,
        batch_size: 4,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_reduces_bce() {
    let (dcfg, emb) = small();
    let ds = make_synthetic_dataset(&dcfg, &emb).unwrap();
    let enc = encode_instances(&ds.instances, &emb).unwrap();
    let a = train(&enc, &quick()).unwrap();
    let b = train(&enc, &quick()).unwrap();
    assert_eq!(a.params, b.params);
    assert!(a.curve.last().unwrap().loss.bce < a.initial.bce);

    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    write_params(&pa, &a.params.to_weights()).unwrap();
    write_params(&pb, &b.params.to_weights()).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_eq!(read_params(&pa).unwrap(), a.params.to_weights());
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let (dcfg, emb) = small();
    let ds = make_synthetic_dataset(&dcfg, &emb).unwrap();
    let enc = encode_instances(&ds.instances, &emb).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..quick()
    };
    let out = train(&enc, &cfg).unwrap();
    assert_eq!(out.params, TrainableParams::init(emb.dim, cfg.hidden_dim, cfg.seed));
}

#[test]
fn bce_sees_only_the_positive() {
    let (dcfg, emb) = small();
    let ds = make_synthetic_dataset(&dcfg, &emb).unwrap();
    let enc = encode_instances(&ds.instances, &emb).unwrap();
    let params = TrainableParams::init(emb.dim, 8, 1);
    let cfg = quick();
    let mut changed = enc[0].clone();
    for p in changed.passages.iter_mut().skip(1) {
        for v in p.as_mut_slice() {
            *v = -*v;
        }
    }
    let a = instance_loss(&enc[0], &params, &cfg).unwrap();
    let b = instance_loss(&changed, &params, &cfg).unwrap();
    assert_eq!(a.bce, b.bce);
    assert_ne!(a.kl, b.kl);

    // without the token term the head receives no gradient
    let kl_only = TrainConfig { lambda: 0.0, ..cfg };
    let (_, g) = instance_gradients(&enc[0], &params, &kl_only).unwrap();
    assert!(g.w1.as_slice().iter().chain(g.w2.as_slice()).all(|&v| v == 0.0));
}

#[test]
fn dataset_round_trip() {
    let (dcfg, emb) = small();
    let ds = make_synthetic_dataset(&dcfg, &emb).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_dataset(&path, &ds.instances).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds.instances);
}
