use proptest::prelude::*;
use xmadapter::bundle::{self, Provenance};
use xmadapter::checkpoint::{self, Checkpoint, Precision};
use xmadapter::table;
use xmadapter::Error;
use xmadapter_core::adapter::{self, HyperParams, PhiOrder};
use xmadapter_core::eval::{self, AlphaBetaLayout, SweepContext};
use xmadapter_core::{generate_synthetic, sample_few_shot, train, EmbeddingBundle, Matrix, SyntheticConfig, TrainOptions};

fn bundle() -> EmbeddingBundle {
    generate_synthetic(&SyntheticConfig {
        num_classes: 3,
        shots: 4,
        feature_dim: 6,
        test_per_class: 3,
        class_separation: 1.5,
        modality_noise: 0.2,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn bundle_round_trip_is_byte_identical() {
    let b = bundle();
    let bytes = bundle::encode_bundle(&b).unwrap();
    let back = bundle::decode_bundle(&bytes).unwrap();
    assert_eq!(back, b);
    assert_eq!(bundle::encode_bundle(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.xmab");
    bundle::save_bundle(&b, &p).unwrap();
    let on_disk = std::fs::read(&p).unwrap();
    assert_eq!(on_disk, bytes);
    let p2 = dir.path().join("c.xmab");
    bundle::save_bundle(&bundle::load_bundle(&p).unwrap(), &p2).unwrap();
    assert_eq!(std::fs::read(&p2).unwrap(), on_disk);
}

#[test]
fn header_layout_is_little_endian() {
    let b = bundle();
    let bytes = bundle::encode_bundle(&b).unwrap();
    assert_eq!(&bytes[..4], b"XMAB");
    assert_eq!(&bytes[4..6], &[1, 0]);
    assert_eq!(&bytes[6..10], &6u32.to_le_bytes());
    assert_eq!(&bytes[10..14], &3u32.to_le_bytes());
    assert_eq!(&bytes[14..18], &12u32.to_le_bytes());
    assert_eq!(&bytes[18..22], &9u32.to_le_bytes());
    assert_eq!(&bytes[22..26], &7u32.to_le_bytes());
    assert_eq!(&bytes[26..33], b"class_0");
}

#[test]
fn label_equal_to_class_count_is_a_range_error() {
    let b = bundle();
    let mut bytes = bundle::encode_bundle(&b).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&3u32.to_le_bytes());
    match bundle::decode_bundle(&bytes) {
        Err(Error::LabelOutOfRange {
            which: "test",
            index: 8,
            label: 3,
            num_classes: 3,
        }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_truncation_is_reported() {
    let bytes = bundle::encode_bundle(&bundle()).unwrap();
    for cut in 0..bytes.len() {
        match bundle::decode_bundle(&bytes[..cut]) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn malformed_headers_have_distinct_errors() {
    let bytes = bundle::encode_bundle(&bundle()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(matches!(bundle::decode_bundle(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        bundle::decode_bundle(&bad),
        Err(Error::UnsupportedVersion { format: "XMAB", version: 9 })
    ));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(bundle::decode_bundle(&bad), Err(Error::TrailingBytes(1))));
}

#[test]
fn zero_feature_row_is_rejected() {
    let b = bundle();
    let mut bytes = bundle::encode_bundle(&b).unwrap();
    // header (22) + three 7-byte class names with their length prefixes
    let start = 22 + 3 * (4 + 7);
    let row = 6 * 4;
    bytes[start + row..start + 2 * row].fill(0);
    assert!(matches!(
        bundle::decode_bundle(&bytes),
        Err(Error::ZeroRow { tensor: "train_features", row: 1 })
    ));
}

#[test]
fn provenance_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.xmab");
    assert_eq!(bundle::load_provenance(&p).unwrap(), None);
    let prov = Provenance {
        encoder: Some("ViT-B/16".into()),
        dataset: Some("toy".into()),
        synthetic: Some(SyntheticConfig::default()),
    };
    bundle::save_provenance(&p, &prov).unwrap();
    assert!(dir.path().join("b.xmab.json").exists());
    assert_eq!(bundle::load_provenance(&p).unwrap(), Some(prov));
}

fn arb_bundle() -> impl Strategy<Value = EmbeddingBundle> {
    (1usize..4, 1usize..5, 2usize..6, 1usize..3, any::<u64>())
        .prop_flat_map(|(n, shots, c, test, seed)| {
            let names = proptest::collection::vec("[a-zé ]{0,6}", n);
            (Just((n, shots, c, test, seed)), names)
        })
        .prop_map(|((n, shots, c, test, seed), names)| {
            let mut b = generate_synthetic(&SyntheticConfig {
                num_classes: n,
                shots,
                feature_dim: c,
                test_per_class: test,
                seed,
                ..Default::default()
            })
            .unwrap();
            b.class_names = names;
            b
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn random_bundles_round_trip(b in arb_bundle()) {
        let bytes = bundle::encode_bundle(&b).unwrap();
        let back = bundle::decode_bundle(&bytes).unwrap();
        prop_assert_eq!(&back, &b);
        prop_assert_eq!(bundle::encode_bundle(&back).unwrap(), bytes);
    }
}

fn trained(h: HyperParams, hidden: Option<usize>) -> (EmbeddingBundle, Checkpoint) {
    let b = bundle();
    let s = sample_few_shot(&b, 3, 2).unwrap();
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 4,
        hidden_dim: hidden,
        mask_self: true,
        ..Default::default()
    };
    let out = train(&b, &s, &h, &opts).unwrap();
    let ck = Checkpoint {
        hyper: h,
        options: opts,
        shots: 3,
        split_seed: 2,
        num_classes: b.num_classes,
        cache: out.cache,
        params: out.params,
    };
    (b, ck)
}

#[test]
fn checkpoint_f64_round_trip_is_exact() {
    for (h, hidden) in [
        (HyperParams { d: 4, ..Default::default() }, None),
        (
            HyperParams {
                d: 3,
                learn_gamma: true,
                phi_order: PhiOrder::PreAggregate,
                ..Default::default()
            },
            Some(5),
        ),
    ] {
        let (_, ck) = trained(h, hidden);
        let bytes = checkpoint::encode_checkpoint(&ck, Precision::F64).unwrap();
        let back = checkpoint::decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
    }
}

#[test]
fn checkpoint_f32_round_trip_reproduces_logits() {
    let (b, ck) = trained(HyperParams { d: 4, ..Default::default() }, Some(3));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.xmck");
    checkpoint::save_checkpoint(&ck, Precision::F32, &p).unwrap();
    let back = checkpoint::load_checkpoint(&p).unwrap();
    assert_eq!(back.hyper, ck.hyper);
    assert_eq!(back.options, ck.options);
    let l0 = adapter::logits(&b, &ck.cache, &ck.params, &ck.hyper, &b.test_features).unwrap().blended;
    let l1 = adapter::logits(&b, &back.cache, &back.params, &back.hyper, &b.test_features).unwrap().blended;
    for (x, y) in l0.data().iter().zip(l1.data()) {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
    }
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (_, ck) = trained(HyperParams { d: 4, ..Default::default() }, None);
    let bytes = checkpoint::encode_checkpoint(&ck, Precision::F32).unwrap();
    let mut bad = bytes.clone();
    bad[6] = 2;
    assert!(matches!(checkpoint::decode_checkpoint(&bad), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(
        checkpoint::decode_checkpoint(&bytes[..bytes.len() - 1]),
        Err(Error::Truncated { .. })
    ));
    assert!(matches!(checkpoint::decode_checkpoint(b"XMAB"), Err(Error::BadMagic { .. })));
}

#[test]
fn sweep_outputs() {
    let b = bundle();
    let s = sample_few_shot(&b, 3, 2).unwrap();
    let ctx = SweepContext {
        bundle: &b,
        split: &s,
        base: HyperParams { d: 4, ..Default::default() },
        options: TrainOptions { epochs: 1, batch_size: 4, ..Default::default() },
        retrain_per_cell: true,
    };
    let t = eval::sweep_gamma(&ctx, &[0.0, 0.5, 1.0]).unwrap();
    let csv = String::from_utf8(table::to_csv(&t).unwrap()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "gamma,alpha,beta,accuracy,best");
    assert!(lines[1].starts_with("0,1.2,3.5,"));
    let back: eval::SweepTable = serde_json::from_slice(&table::to_json(&t).unwrap()).unwrap();
    assert_eq!(back, t);

    let ctx = SweepContext { retrain_per_cell: false, ..ctx };
    let t = eval::sweep_alpha_beta(&ctx, &[0.0, 1.0], &[1.0, 2.0, 3.0], AlphaBetaLayout::Cross).unwrap();
    let dat = String::from_utf8(table::to_gnuplot(&t)).unwrap();
    assert_eq!(dat.lines().filter(|l| l.is_empty()).count(), 1);
    assert_eq!(dat.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).count(), 6);
}

#[test]
fn parallel_sweeps_match_sequential() {
    let b = bundle();
    let s = sample_few_shot(&b, 3, 2).unwrap();
    let ctx = SweepContext {
        bundle: &b,
        split: &s,
        base: HyperParams { d: 4, ..Default::default() },
        options: TrainOptions { epochs: 2, batch_size: 4, ..Default::default() },
        retrain_per_cell: true,
    };
    let grid = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
    assert_eq!(
        xmadapter::sweep::sweep_gamma(&ctx, &grid, 4).unwrap(),
        eval::sweep_gamma(&ctx, &grid).unwrap()
    );
    let ctx = SweepContext { retrain_per_cell: false, ..ctx };
    assert_eq!(
        xmadapter::sweep::sweep_alpha_beta(&ctx, &[0.0, 2.0], &[0.5, 3.5], AlphaBetaLayout::Slices, 3).unwrap(),
        eval::sweep_alpha_beta(&ctx, &[0.0, 2.0], &[0.5, 3.5], AlphaBetaLayout::Slices).unwrap()
    );
}

#[test]
fn matrix_sanity_for_encoded_tensors() {
    // zero-shot weights are stored C x N, row-major
    let b = bundle();
    let bytes = bundle::encode_bundle(&b).unwrap();
    let back = bundle::decode_bundle(&bytes).unwrap();
    assert_eq!(back.zeroshot_weights.shape(), (6, 3));
    let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
}
