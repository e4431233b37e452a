//! Checkpoint format guarantees: bit-exact round trips, corruption and
//! version refusal, and deterministic resume through files.

use hrnn_core::config::default_model_config;
use hrnn_core::data::{
    checkpoint_bytes, checkpoint_from_bytes, gen_context_task, load_checkpoint, normalize_pair,
    save_checkpoint,
};
use hrnn_core::hrnn::CellKind;
use hrnn_core::model::Model;
use hrnn_core::train::{train_loop, MetricsLog, TrainConfig, TrainSession};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_session(cell: CellKind, seed: u64) -> TrainSession {
    let mut config = default_model_config();
    config.cell = cell;
    config.hidden = 8;
    config.conv = vec![hrnn_core::convnet::ConvLayerSpec {
        out_channels: 8,
        kernel: 4,
        stride: 4,
        padding: 0,
        relu: true,
        pool: None,
    }];
    config.scales = vec![1, 3];
    config.fc = vec![12];
    let cfg = TrainConfig::default();
    let model = Model::<f32>::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut sess = TrainSession::new(model, &cfg);
    sess.pixel_mean = 0.0375;
    sess
}

#[test]
fn save_load_save_is_byte_identical() {
    let sess = small_session(CellKind::Lstm, 1);
    let bytes = checkpoint_bytes(&sess);
    let restored = checkpoint_from_bytes(&bytes).unwrap();
    let bytes2 = checkpoint_bytes(&restored);
    assert_eq!(bytes, bytes2);
}

#[test]
fn roundtrip_preserves_every_tensor_bit_exactly() {
    let sess = small_session(CellKind::Srn, 2);
    let restored = checkpoint_from_bytes(&checkpoint_bytes(&sess)).unwrap();
    let mut originals = Vec::new();
    sess.model.visit(&mut |name, t| originals.push((name, t.clone())));
    restored.model.visit(&mut |name, t| {
        let (en, et) = originals.remove(0);
        assert_eq!(name, en);
        assert_eq!(t.shape(), et.shape());
        for (a, b) in t.data().iter().zip(et.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    });
    assert_eq!(restored.pixel_mean.to_bits(), sess.pixel_mean.to_bits());
    assert_eq!(restored.seed, sess.seed);
    assert_eq!(restored.progress, sess.progress);
}

#[test]
fn every_flipped_byte_is_detected() {
    let sess = small_session(CellKind::Srn, 3);
    let bytes = checkpoint_bytes(&sess);
    // Flip a sample of bytes across the whole file, including the CRC itself.
    let step = (bytes.len() / 64).max(1);
    for pos in (0..bytes.len()).step_by(step) {
        let mut corrupt = bytes.clone();
        corrupt[pos] ^= 0x40;
        let err = checkpoint_from_bytes(&corrupt).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("checksum") || msg.contains("magic"),
            "byte {pos}: unexpected error {msg}"
        );
    }
}

#[test]
fn version_mismatch_is_refused_by_name() {
    let sess = small_session(CellKind::Srn, 4);
    let mut bytes = checkpoint_bytes(&sess);
    // Bump the version field (offset 4, little-endian u32) and refresh the CRC.
    bytes[4] = 9;
    let crc_start = bytes.len() - 4;
    let crc = crc32fast::hash(&bytes[..crc_start]);
    bytes[crc_start..].copy_from_slice(&crc.to_le_bytes());
    let err = checkpoint_from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("version mismatch"), "{err}");
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let sess = small_session(CellKind::Srn, 5);
    let bytes = checkpoint_bytes(&sess);
    for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint_from_bytes(&bytes[..cut]).is_err(), "prefix {cut}");
    }
}

#[test]
fn file_mediated_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.bin");

    let mut train = gen_context_task(48, 91);
    let mut val = gen_context_task(16, 92);
    let mean = normalize_pair(&mut train, &mut val);

    let base = TrainConfig {
        batch_size: 8,
        epochs: 4,
        seed: 5,
        patience: 100,
        ..Default::default()
    };

    let fresh = || {
        let mut sess = small_session(CellKind::Srn, 6);
        sess.seed = base.seed;
        sess.pixel_mean = mean;
        sess
    };

    // Uninterrupted reference: 14 optimizer steps.
    let mut solid = fresh();
    let cfg_full = TrainConfig { max_steps: Some(14), ..base.clone() };
    train_loop(&mut solid, &train, &val, &cfg_full, &mut MetricsLog::silent()).unwrap();

    // Interrupted at 7 steps (mid-epoch), persisted, reloaded, resumed.
    let mut first = fresh();
    let cfg_half = TrainConfig { max_steps: Some(7), ..base.clone() };
    train_loop(&mut first, &train, &val, &cfg_half, &mut MetricsLog::silent()).unwrap();
    save_checkpoint(&ckpt, &first).unwrap();

    let mut resumed = load_checkpoint(&ckpt).unwrap();
    train_loop(&mut resumed, &train, &val, &cfg_full, &mut MetricsLog::silent()).unwrap();

    assert_eq!(solid.progress, resumed.progress);
    let mut a = Vec::new();
    solid.model.visit(&mut |_, t| a.extend_from_slice(t.data()));
    let mut b = Vec::new();
    resumed.model.visit(&mut |_, t| b.extend_from_slice(t.data()));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    // Optimizer velocities must survive the round trip too.
    for (va, vb) in solid.opt.velocity.iter().zip(&resumed.opt.velocity) {
        for (x, y) in va.data().iter().zip(vb.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
