mod support;

use mome_core::config::TrainConfig;
use mome_core::datasynth::{default_plan, make_corpus, preprocess, PhantomSpec};
use mome_core::formats::{load_labels, load_volume, save_labels, save_volume};
use mome_core::textbranch::{EmbeddingProvider, PromptTemplate, TextEmbedding};
use mome_core::training::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, train, TrainItem, TrainOptions, TrainState,
};
use mome_core::types::{ClassVocabulary, PartialLabelSet, Volume};
use proptest::prelude::*;
use support::tiny_config;

fn small_items(n: usize, seed: u64) -> (Vec<TrainItem>, Vec<TextEmbedding>) {
    let vocab = ClassVocabulary::desk();
    let spec = PhantomSpec {
        grid: [16, 16, 16],
        ..PhantomSpec::default()
    };
    let c = make_corpus(&spec, &vocab, n, 0, &default_plan(), seed).unwrap();
    let items = c
        .train
        .into_iter()
        .map(|(v, l)| TrainItem {
            volume: preprocess(&v, 1.5, [-175.0, 250.0]).unwrap(),
            labels: l,
        })
        .collect();
    let emb = EmbeddingProvider::Stub
        .embed_vocabulary(&vocab, &PromptTemplate::default(), 16)
        .unwrap();
    (items, emb)
}

fn small_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        epochs,
        patch: [16, 16, 16],
        seed: 9,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn volumes_round_trip_bit_exactly(
        dims in (1usize..7, 1usize..7, 1usize..7),
        seed in any::<u64>(),
        spacing in (0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0),
    ) {
        let dims = [dims.0, dims.1, dims.2];
        let n: usize = dims.iter().product();
        let mut x = seed | 1;
        let voxels: Vec<f32> = (0..n)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                f32::from_bits((x as u32) & 0xff7f_ffff)
            })
            .collect();
        let v = Volume::new(format!("v{seed}"), dims, [spacing.0, spacing.1, spacing.2], voxels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        prop_assert_eq!(back.id.clone(), v.id.clone());
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing_mm(), v.spacing_mm());
        for (a, b) in back.voxels().iter().zip(v.voxels()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn labels_round_trip_bit_exactly(
        bits in prop::collection::vec(any::<bool>(), 6 * 27),
        annotated in prop::collection::vec(any::<bool>(), 6),
        dataset in prop::option::of("[A-Z]{1,3}"),
    ) {
        let vocab = ClassVocabulary::desk();
        let masks: Vec<u8> = bits
            .iter()
            .enumerate()
            .map(|(i, &b)| (b && annotated[i / 27]) as u8)
            .collect();
        let mut l = PartialLabelSet::new("x", [3, 3, 3], annotated, masks).unwrap();
        if let Some(d) = dataset {
            l = l.with_dataset(d);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lbl");
        save_labels(&l, &p).unwrap();
        prop_assert_eq!(load_labels(&p, &vocab).unwrap(), l);
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let (items, emb) = small_items(2, 3);
    let mut state = TrainState::new(tiny_config(), small_train_config(2)).unwrap();
    train(
        &mut state,
        &items,
        &emb,
        &TrainOptions {
            stop_after: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let bytes = encode_checkpoint(&state).unwrap();
    let back = decode_checkpoint(&bytes, "mem".as_ref()).unwrap();
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    assert_eq!(back.model.params, state.model.params);
    assert_eq!(back.optimizer, state.optimizer);
    assert_eq!(back.rng, state.rng);
    assert_eq!((back.epoch, back.step), (state.epoch, state.step));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mckpt");
    mome_core::training::save_checkpoint(&state, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(decode_checkpoint(&corrupt, "mem".as_ref()).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3], "mem".as_ref()).is_err());
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let (items, emb) = small_items(3, 4);
    let mut whole = TrainState::new(tiny_config(), small_train_config(3)).unwrap();
    let rows_whole = train(&mut whole, &items, &emb, &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.mckpt");
    let mut first = TrainState::new(tiny_config(), small_train_config(3)).unwrap();
    let opts = TrainOptions {
        checkpoint: Some(ckpt.clone()),
        stop_after: Some(1),
        ..Default::default()
    };
    let mut rows = train(&mut first, &items, &emb, &opts).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.epoch, 1);
    rows.extend(train(&mut resumed, &items, &emb, &TrainOptions::default()).unwrap());

    assert_eq!(rows.len(), rows_whole.len());
    for (a, b) in rows.iter().zip(&rows_whole) {
        assert_eq!((a.step, a.epoch), (b.step, b.epoch));
        assert_eq!(a.total.to_bits(), b.total.to_bits(), "step {}", a.step);
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }
    assert_eq!(resumed.model.params, whole.model.params);
}
