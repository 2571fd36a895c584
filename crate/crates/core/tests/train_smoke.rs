use kpr::config::RunConfig;
use kpr::datamodel::{generate_synthetic_dataset, SynthConfig};
use kpr::train::train;

fn data() -> kpr::datamodel::DatasetSplit {
    generate_synthetic_dataset(&SynthConfig {
        identities: 16,
        images_per_identity: 8,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn two_epoch_run_reduces_loss() {
    let data = data();
    let cfg = RunConfig {
        epochs: 2,
        steps_per_epoch: 12,
        pretrain_epochs: 0,
        seed: 3,
        ..RunConfig::default()
    };
    let out = train(&cfg, &data.train, None).unwrap();
    eprintln!("epoch means {:?}", out.epoch_means);
    assert_eq!(out.log.len(), 24);
    assert!(out.epoch_means[1] < out.epoch_means[0]);
}

#[test]
fn same_seed_gives_bitwise_identical_runs() {
    let data = data();
    let cfg = RunConfig {
        epochs: 2,
        steps_per_epoch: 3,
        pretrain_epochs: 1,
        drop_path: 0.1,
        seed: 11,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, &data.train, Some(dir.path())).unwrap();
    let b = train(&cfg, &data.train, None).unwrap();
    let la: Vec<_> = a.log.iter().map(|r| (r.loss.to_bits(), r.grad_norm.to_bits())).collect();
    let lb: Vec<_> = b.log.iter().map(|r| (r.loss.to_bits(), r.grad_norm.to_bits())).collect();
    assert_eq!(la, lb);
    for ((n, pa), (_, pb)) in a.store.params().into_iter().zip(b.store.params()) {
        let va: Vec<f32> = pa.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = pb.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()), "{n} differs");
    }
    let lines = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    assert!(dir.path().join("checkpoint.safetensors").exists());
}
