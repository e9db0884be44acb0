use proptest::prelude::*;
use spide_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use spide_core::data::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels};
use spide_core::network::build_network;
use spide_core::training::{OptimizerState, SgdHyper};

fn sample_checkpoint(seed: u64) -> Checkpoint {
    let params = build_network(&[6, 4, 3], 2, true, seed).unwrap();
    let opt = OptimizerState::new(
        &params,
        SgdHyper {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            loss_scale: 1.0,
        },
    );
    Checkpoint::capture(&params, Some(&opt), "seed = 1\n".into(), [seed, 1, 2, 3])
}

proptest! {
    #[test]
    fn idx_parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_idx_images(&bytes);
        let _ = parse_idx_labels(&bytes);
    }

    #[test]
    fn idx_round_trip(n in 0usize..5, rows in 1usize..6, cols in 1usize..6, fill in any::<u8>()) {
        let pixels = vec![fill; n * rows * cols];
        let labels: Vec<u8> = (0..n as u8).collect();
        let img = encode_idx_images(&pixels, n, rows, cols);
        let (m, r, c, p) = parse_idx_images(&img).unwrap();
        prop_assert_eq!((m, r, c), (n, rows, cols));
        prop_assert_eq!(p, &pixels[..]);
        let lab = encode_idx_labels(&labels);
        prop_assert_eq!(parse_idx_labels(&lab).unwrap(), &labels[..]);
    }

    #[test]
    fn checkpoint_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = Checkpoint::decode(&bytes);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected_or_decodes(seed in 0u64..100, pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut bytes = sample_checkpoint(seed).encode().unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        let _ = Checkpoint::decode(&bytes);
        bytes.truncate(i);
        prop_assert!(Checkpoint::decode(&bytes).is_err());
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ck = sample_checkpoint(7);
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
}
