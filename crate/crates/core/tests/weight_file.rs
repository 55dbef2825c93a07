use litetrack::cost::count_params;
use litetrack::weights::required_shapes;
use litetrack::{Error, ModelConfig, Tensor, Variant, WeightStore};

#[test]
fn header_is_laid_out_as_documented() {
    let w = WeightStore::generate(&ModelConfig::toy(1, 1), 0).unwrap();
    let bytes = w.to_bytes();
    assert_eq!(&bytes[..8], b"LTWEIGHT");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
    let manifest_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[24..24 + manifest_len]).unwrap();
    assert_eq!(manifest["config"]["embed_dim"], 64);
    let payload = bytes.len() - 24 - manifest_len;
    assert_eq!(payload as u64, 4 * w.num_elements());

    // first tensor in name order starts the payload
    let first = &manifest["tensors"][0];
    let name = first["name"].as_str().unwrap();
    assert_eq!(first["offset"], 0);
    let t = w.get(name).unwrap();
    let v0 = f32::from_le_bytes(bytes[24 + manifest_len..28 + manifest_len].try_into().unwrap());
    assert_eq!(v0, t.data()[0]);
}

#[test]
fn save_load_round_trip_preserves_digest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let w = WeightStore::generate(&Variant::B6.toy_config(), 9).unwrap();
    w.save(&path).unwrap();
    let back = WeightStore::load(&path).unwrap();
    assert_eq!(back.digest(), w.digest());
    assert_eq!(back.config(), w.config());
}

#[test]
fn truncated_or_foreign_files_are_format_errors() {
    let w = WeightStore::generate(&ModelConfig::toy(1, 0), 0).unwrap();
    let bytes = w.to_bytes();
    assert!(matches!(WeightStore::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
    assert!(matches!(WeightStore::from_bytes(b"PK\x03\x04 not ours"), Err(Error::Format(_))));
    let mut wrong_version = bytes.clone();
    wrong_version[8] = 2;
    assert!(matches!(WeightStore::from_bytes(&wrong_version), Err(Error::Format(_))));
}

#[test]
fn missing_file_is_an_input_error() {
    let e = WeightStore::load("/nonexistent/weights.bin").unwrap_err();
    assert!(e.is_input_error());
}

#[test]
fn param_count_matches_enumerated_elements() {
    // smallest valid head: C = 8 gives a 1-channel last hidden stage
    let tiny = ModelConfig {
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 4,
        patch_size: 4,
        template_size: (8, 8),
        search_size: (16, 16),
        fe_layers: 1,
        ai_layers: 0,
    };
    for c in [tiny, ModelConfig::toy(2, 2), Variant::B9.toy_config()] {
        let w = WeightStore::generate(&c, 1).unwrap();
        let enumerated: u64 = w.iter().map(|(_, t)| t.len() as u64).sum();
        assert_eq!(count_params(&c).total_params, enumerated);
        let shapes: u64 = required_shapes(&c).iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum();
        assert_eq!(enumerated, shapes);
    }
}

#[test]
fn pruned_store_equals_shallower_generation() {
    let deep = WeightStore::generate(&ModelConfig::toy(6, 3), 21).unwrap();
    for v in Variant::ALL {
        let (fe, ai) = v.layers();
        let pruned = deep.pruned(fe, ai).unwrap();
        let direct = WeightStore::generate(&ModelConfig::toy(fe, ai), 21).unwrap();
        assert_eq!(pruned.digest(), direct.digest(), "{v}");
    }
    assert!(deep.pruned(8, 2).is_err());
}

#[test]
fn replacing_a_tensor_checks_its_shape() {
    let w = WeightStore::generate(&ModelConfig::toy(1, 0), 0).unwrap();
    assert!(w.with_tensor("norm.weight", Tensor::zeros([63])).is_err());
    assert!(w.with_tensor("no.such.tensor", Tensor::zeros([64])).is_err());
    let z = w.with_tensor("norm.weight", Tensor::zeros([64])).unwrap();
    assert_ne!(z.digest(), w.digest());
}
