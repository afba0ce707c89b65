use decal::encoder::{
    attnpool_encode, baseline_encode, build_latent, decal_encode, decal_graph, encode, encoder_flops, latent_len,
    latent_positions, pad_mask,
};
use decal::model::{init_params, EncoderMode, Forward, ModelConfig};
use decal::tensor::{Graph, Params, Tensor};
use decal::tokenizer::{TokenId, PAD_ID};
use decal::train::data::random_tokens;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(cfg: &ModelConfig, seed: u64) -> Params<f64> {
    init_params(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn decal_cfg(c: usize) -> ModelConfig {
    ModelConfig::tiny().with_mode(EncoderMode::Decal, c)
}

#[test]
fn latent_count_and_positions_match_oracle() {
    for c in [1usize, 2, 4, 8, 16] {
        for n in 1usize..=512 {
            let m = (n + c - 1) / c;
            assert_eq!(latent_len(n, c), m);
            let got = latent_positions(n, c, &(0..n).collect::<Vec<_>>()).unwrap();
            let mut want = Vec::new();
            let mut start = 0;
            while start < n {
                let end = (start + c).min(n);
                let mean = (start..end).map(|p| p as f64).sum::<f64>() / (end - start) as f64;
                want.push(mean.floor() as usize);
                start = end;
            }
            assert_eq!(got, want, "n={n} c={c}");
        }
    }
}

#[test]
fn fresh_latents_are_normalized_window_means() {
    let cfg = decal_cfg(4);
    let p = params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = random_tokens(23, 26, &mut rng);
    let table = p.get("shared.embedding").unwrap();
    let d = cfg.d_model;
    let x = Tensor::from_rows(&ids.iter().map(|&t| table.row(t as usize).to_vec()).collect::<Vec<_>>()).unwrap();
    let got = build_latent(&x, 4, p.get("decal.v").unwrap(), p.get("decal.latent_norm").unwrap(), None).unwrap();
    for (w, chunk) in ids.chunks(4).enumerate() {
        let mut mean = vec![0.0; d];
        for &t in chunk {
            for (m, v) in mean.iter_mut().zip(table.row(t as usize)) {
                *m += v / chunk.len() as f64;
            }
        }
        let rms = (mean.iter().map(|v| v * v).sum::<f64>() / d as f64 + 1e-6).sqrt();
        for (j, v) in mean.iter().enumerate() {
            assert!((got.row(w)[j] - v / rms).abs() < 1e-6);
        }
    }
}

#[test]
fn trailing_padding_does_not_change_real_latents() {
    for c in [2usize, 4, 8] {
        let cfg = decal_cfg(c);
        let p = params(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(c as u64);
        let ids = random_tokens(4 * c, 26, &mut rng);
        let plain = decal_encode(&cfg, &p, &ids, &pad_mask(&ids)).unwrap();
        let mut padded = ids.clone();
        padded.extend(std::iter::repeat(PAD_ID).take(3 * c));
        let out = decal_encode(&cfg, &p, &padded, &pad_mask(&padded)).unwrap();
        assert_eq!(out.len(), 7);
        assert_eq!(out.mask, [vec![true; 4], vec![false; 3]].concat());
        for i in 0..4 {
            for (a, b) in out.vectors.row(i).iter().zip(plain.vectors.row(i)) {
                assert!((a - b).abs() < 1e-10, "c={c} row {i}");
            }
        }
    }
}

#[test]
fn masked_token_identity_is_irrelevant() {
    let cfg = decal_cfg(2);
    let p = params(&cfg, 4);
    let ids: Vec<TokenId> = random_tokens(12, 26, &mut ChaCha8Rng::seed_from_u64(0));
    let mut mask = vec![true; 12];
    mask[5] = false;
    let a = decal_encode(&cfg, &p, &ids, &mask).unwrap();
    let mut other = ids.clone();
    other[5] = ids[5] + 1;
    let b = decal_encode(&cfg, &p, &other, &mask).unwrap();
    assert_eq!(a.vectors.max_abs_diff(&b.vectors), 0.0);
    other[4] = ids[4] + 1;
    let c = decal_encode(&cfg, &p, &other, &mask).unwrap();
    assert!(a.vectors.max_abs_diff(&c.vectors) > 0.0);
}

/// Every real input row must reach the latents through both the pooled
/// path and the appended token path; pad rows through neither.
#[test]
fn gradients_reach_inputs_through_both_paths() {
    for c in [2usize, 4] {
        let cfg = decal_cfg(c);
        let p = params(&cfg, 5);
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..n * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut mask = vec![true; n];
        mask[n - 1] = false;
        let mut g = Graph::new();
        let b = g.bind(&p).unwrap();
        let xp = g.param(Tensor::new(vec![n, cfg.d_model], x.clone()).unwrap()).unwrap();
        let xs = g.param(Tensor::new(vec![n, cfg.d_model], x).unwrap()).unwrap();
        let enc = decal_graph(&mut Forward::new(&cfg, &b), &mut g, xp, xs, &mask).unwrap();
        let m = latent_len(n, c);
        let w: Vec<f64> = (0..m * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = g.constant(Tensor::new(vec![m, cfg.d_model], w).unwrap()).unwrap();
        let prod = g.mul(enc.out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        for var in [xp, xs] {
            let gr = grads.get(var).unwrap();
            for (row, real) in gr.chunks(cfg.d_model).zip(&mask) {
                let norm: f64 = row.iter().map(|v| v.abs()).sum();
                assert_eq!(norm > 0.0, *real, "c={c}");
            }
        }
    }
}

#[test]
fn encoder_flops_fall_with_compression() {
    let ids = random_tokens(128, 26, &mut ChaCha8Rng::seed_from_u64(7));
    let mut last = u64::MAX;
    for c in [2usize, 4, 8, 16] {
        let cfg = decal_cfg(c);
        let f = encoder_flops(&cfg, &params(&cfg, 0), &ids).unwrap();
        assert!(f < last, "C={c}: {f} >= {last}");
        last = f;
    }
}

#[test]
fn attnpool_without_attention_is_normalized_pool() {
    let cfg = ModelConfig::tiny().with_mode(EncoderMode::Attnpool, 2);
    let mut p = params(&cfg, 8);
    for t in p.get_mut("attnpool.o").unwrap().data_mut() {
        *t = 0.0;
    }
    let ids = random_tokens(9, 26, &mut ChaCha8Rng::seed_from_u64(9));
    let mask = pad_mask(&ids);
    let out = attnpool_encode(&cfg, &p, &ids, &mask).unwrap();

    let base_cfg = ModelConfig { encoder_mode: EncoderMode::Baseline, compression_ratio: 1, ..cfg.clone() };
    let mut bp = p.clone();
    for name in ["attnpool.q", "attnpool.k", "attnpool.v", "attnpool.o", "attnpool.norm"] {
        bp.remove(name);
    }
    let h = baseline_encode(&base_cfg, &bp, &ids, &mask).unwrap();
    let want = build_latent(&h.vectors, 2, &Tensor::zeros(&[cfg.d_model]), p.get("attnpool.norm").unwrap(), None).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.vectors.max_abs_diff(&want) < 1e-10);
}

#[test]
fn encoding_is_deterministic_and_independent_per_input() {
    let cfg = decal_cfg(2);
    let p = params(&cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tokens(16, 26, &mut rng);
    let b = random_tokens(16, 26, &mut rng);
    let first = encode(&cfg, &p, &a, &pad_mask(&a)).unwrap();
    let _ = encode(&cfg, &p, &b, &pad_mask(&b)).unwrap();
    let again = encode(&cfg, &p, &a, &pad_mask(&a)).unwrap();
    assert_eq!(first, again);
}
