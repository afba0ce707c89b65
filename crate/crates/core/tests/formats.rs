use decal::model::{init_params, EncoderMode, ModelConfig};
use decal::retrieval::{encode_corpus, CompressedPassageStore};
use decal::train::data::random_tokens;
use decal::train::{Adam, AdamConfig, Checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn checkpoint() -> Checkpoint {
    let cfg = ModelConfig::tiny();
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), &params);
    let mut p2 = params.clone();
    let grads = params.clone();
    opt.step(&mut p2, &grads, 1e-3);
    Checkpoint {
        config: cfg,
        step: 7,
        params: p2,
        optimizer: Some(opt),
    }
}

fn store() -> CompressedPassageStore {
    let cfg = ModelConfig::tiny().with_mode(EncoderMode::Decal, 4);
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let passages: Vec<_> = (0..5)
        .map(|i| (format!("doc{i}"), random_tokens(rng.gen_range(3..40), 26, &mut rng)))
        .collect();
    encode_corpus(&cfg, &params, &passages).unwrap()
}

fn header_range(bytes: &[u8]) -> std::ops::Range<usize> {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    16..16 + len
}

/// Rewrites the JSON header with `edit` and recomputes its digest so only
/// the semantic checks can catch the change.
fn resign(bytes: &[u8], edit: impl Fn(&str) -> String) -> Vec<u8> {
    let r = header_range(bytes);
    let text = std::str::from_utf8(&bytes[r.clone()]).unwrap();
    let key = "\"header_sha256\":\"";
    let at = text.find(key).unwrap() + key.len();
    let blank = format!("{}{}", &text[..at], &text[at + 64..]);
    let edited = edit(&blank);
    let digest = hex::encode(Sha256::digest(edited.as_bytes()));
    let at = edited.find(key).unwrap() + key.len();
    let signed = format!("{}{digest}{}", &edited[..at], &edited[at..]);
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(signed.len() as u64).to_le_bytes());
    out.extend_from_slice(signed.as_bytes());
    out.extend_from_slice(&bytes[r.end..]);
    out
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ck = checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params, ck.params);
    assert_eq!(back.step, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
}

#[test]
fn store_round_trip_is_bit_exact() {
    let s = store();
    let bytes = s.to_bytes();
    let back = CompressedPassageStore::from_bytes(&bytes).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn resigned_header_is_accepted_unchanged() {
    let bytes = checkpoint().to_bytes();
    assert!(Checkpoint::from_bytes(&resign(&bytes, |h| h.to_string())).is_ok());
    let bytes = store().to_bytes();
    assert!(CompressedPassageStore::from_bytes(&resign(&bytes, |h| h.to_string())).is_ok());
}

#[test]
fn every_truncation_is_rejected() {
    let ck = checkpoint().to_bytes();
    for len in (0..ck.len()).step_by(97).chain(ck.len() - 8..ck.len()) {
        assert!(Checkpoint::from_bytes(&ck[..len]).is_err(), "checkpoint len {len}");
    }
    let st = store().to_bytes();
    for len in 0..st.len() {
        assert!(CompressedPassageStore::from_bytes(&st[..len]).is_err(), "store len {len}");
    }
}

#[test]
fn random_byte_flips_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ck = checkpoint().to_bytes();
    let st = store().to_bytes();
    for _ in 0..500 {
        let mut b = ck.clone();
        let i = rng.gen_range(0..b.len());
        b[i] ^= 1 << rng.gen_range(0..8);
        assert!(Checkpoint::from_bytes(&b).is_err(), "checkpoint byte {i}");
        let mut b = st.clone();
        let i = rng.gen_range(0..b.len());
        b[i] ^= 1 << rng.gen_range(0..8);
        assert!(CompressedPassageStore::from_bytes(&b).is_err(), "store byte {i}");
    }
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut ck = checkpoint().to_bytes();
    ck.push(0);
    assert!(Checkpoint::from_bytes(&ck).is_err());
    let mut st = store().to_bytes();
    st.extend_from_slice(&[0; 4]);
    assert!(CompressedPassageStore::from_bytes(&st).is_err());
}

#[test]
fn semantically_bad_checkpoint_headers_are_rejected() {
    let bytes = checkpoint().to_bytes();
    let edits: Vec<Box<dyn Fn(&str) -> String>> = vec![
        Box::new(|h| h.replacen("\"offset\":0", "\"offset\":4", 1)),
        Box::new(|h| h.replacen("\"shared.embedding\"", "\"encoder.final_norm\"", 1)),
        Box::new(|h| h.replacen("\"format_version\":1", "\"format_version\":2", 1)),
        Box::new(|h| h.replacen("\"d_model\":16", "\"d_model\":8", 1)),
        Box::new(|h| h.replacen("\"float32\"", "\"float64\"", 1)),
        Box::new(|h| h.replacen("{", "{\"extra\":1,", 1)),
        Box::new(|h| h.replacen("\"step\":7", "\"step\":-1", 1)),
    ];
    for (i, edit) in edits.iter().enumerate() {
        let bad = resign(&bytes, edit);
        assert_ne!(bad, bytes, "edit {i} changed nothing");
        assert!(Checkpoint::from_bytes(&bad).is_err(), "edit {i} accepted");
    }
}

#[test]
fn semantically_bad_store_headers_are_rejected() {
    let bytes = store().to_bytes();
    let edits: Vec<Box<dyn Fn(&str) -> String>> = vec![
        Box::new(|h| h.replacen("\"offset\":0", "\"offset\":8", 1)),
        Box::new(|h| h.replacen("\"doc1\"", "\"doc0\"", 1)),
        Box::new(|h| h.replacen("\"d_model\":16", "\"d_model\":15", 1)),
        Box::new(|h| h.replacen("\"format_version\":1", "\"format_version\":9", 1)),
        Box::new(|h| h.replacen("\"compression\":4", "\"compression\":0", 1)),
    ];
    for (i, edit) in edits.iter().enumerate() {
        let bad = resign(&bytes, edit);
        assert_ne!(bad, bytes, "edit {i} changed nothing");
        assert!(CompressedPassageStore::from_bytes(&bad).is_err(), "edit {i} accepted");
    }
}

#[test]
fn non_finite_checkpoints_are_rejected() {
    let mut ck = checkpoint();
    ck.params.get_mut("decal.v").unwrap().data_mut()[0] = f32::NAN;
    assert!(Checkpoint::from_bytes(&ck.to_bytes()).is_err());
}
