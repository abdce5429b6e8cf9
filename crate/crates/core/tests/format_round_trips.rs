//! On-disk format durability: save, load, and save again must reproduce
//! the original bytes, and damaged files must fail loudly instead of
//! yielding parameters.

use std::fs;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rhyme_core::data::{
    load_checkpoint, read_checkpoint_header, read_embedding, save_checkpoint, write_embedding,
    EmbeddingSequence,
};
use rhyme_core::network::{init_params, Ablation, ModelConfig};
use rhyme_core::training::TrainConfig;
use rhyme_core::RhymeError;

fn small_model(ablation: Ablation) -> ModelConfig {
    let mut cfg = ModelConfig::new(5);
    cfg.conv_channels = 6;
    cfg.conv_layers = 1;
    cfg.utterance_dim = 4;
    cfg.ablation = ablation;
    cfg
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for ablation in Ablation::ALL {
        let model = small_model(ablation);
        let train = TrainConfig::default();
        let params = init_params(&model, 42).unwrap();

        let first = dir.path().join(format!("{ablation}.ckpt"));
        save_checkpoint(&first, &params, &model, &train).unwrap();
        let (loaded, model2, train2) = load_checkpoint(&first).unwrap();
        assert_eq!(params.values(), loaded.values());
        assert_eq!(model, model2);

        let second = dir.path().join(format!("{ablation}-resaved.ckpt"));
        save_checkpoint(&second, &loaded, &model2, &train2).unwrap();
        assert_eq!(
            fs::read(&first).unwrap(),
            fs::read(&second).unwrap(),
            "resave must be byte identical for {ablation}"
        );

        let header = read_checkpoint_header(&first).unwrap();
        assert_eq!(header.schema, "RHYM1");
        let expect_alpha = if ablation == Ablation::NoGating { Some(0.5) } else { None };
        assert_eq!(header.fixed_alpha, expect_alpha);
    }
}

#[test]
fn checkpoint_corruption_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(Ablation::Full);
    let train = TrainConfig::default();
    let params = init_params(&model, 1).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &params, &model, &train).unwrap();
    let good = fs::read(&path).unwrap();

    // wrong magic
    let mut bad = good.clone();
    bad[0] ^= 0xff;
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), RhymeError::Format { .. }));

    // truncated parameter blob
    let bad = &good[..good.len() - 8];
    fs::write(&path, bad).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), RhymeError::Format { .. }));

    // non-finite parameter bytes
    let mut bad = good.clone();
    let tail = bad.len() - 8;
    bad[tail..].copy_from_slice(&f64::NAN.to_le_bytes());
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), RhymeError::Format { .. }));

    // header that disagrees with its own model config: swap two bytes of
    // a tensor name inside the JSON
    let mut bad = good.clone();
    let json_start = 12;
    let needle = b"conv0.weight";
    let pos = bad
        .windows(needle.len())
        .position(|w| w == needle)
        .expect("tensor table lists conv0.weight");
    bad[json_start.max(pos)] = b'x';
    fs::write(&path, &bad).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_files_survive_arbitrary_shapes(
        t in 1usize..40,
        d in 1usize..24,
        seed in 0u64..1_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arr = Array2::<f32>::zeros((t, d));
        for v in arr.iter_mut() {
            *v = rng.gen_range(-1e6f32..1e6);
        }
        let seq = EmbeddingSequence::new(arr).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        write_embedding(&path, &seq).unwrap();
        let back = read_embedding(&path).unwrap();
        prop_assert_eq!(seq.frames(), back.frames());

        let again = dir.path().join("e2.emb");
        write_embedding(&again, &back).unwrap();
        prop_assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }
}
