mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{batch, tiny_model, tiny_model_config, vocab, weights};
use unitok::checkpoint::Checkpoint;
use unitok::codec::ImageBatch;
use unitok::data::Corpus;
use unitok::gradcheck::rel_err;
use unitok::model::{
    perturb, sample_noise, CaptionBatch, ModelConfig, NoiseConfig, Tokenizer, UnifiedTokens, ViTConfig,
};
use unitok::tensor::{Graph, Tensor};

fn images(n: usize, res: usize, seed: u64) -> ImageBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch(Tensor::from_fn([n, res, res, 3], |_| rng.random_range(-1.0f32..1.0)))
}

#[test]
fn token_grid_geometry() {
    let v = vocab();
    let mut cfg = ModelConfig::desk(v.len());
    cfg.vit.depth = 1;
    cfg.decoder_depth = 1;
    let m: Tokenizer<f32> = Tokenizer::new(cfg.clone(), cfg.grid_for(32).unwrap()).unwrap();
    let x = images(2, 32, 1);
    let lat = m.encode_latents(&x).unwrap();
    assert_eq!(lat.values.shape(), &[2, 8, 8, 48]);
    let g = Graph::new();
    let b = m.params.bind(&g);
    let zu = m.unified(&b, g.constant(lat.values)).unwrap();
    assert_eq!(zu.values.shape(), vec![2, 16, 256]);
    let z_hat = m.decode_tokens(&b, &zu).unwrap();
    assert_eq!(z_hat.shape(), vec![2, 8, 8, 48]);
    assert_eq!(m.reconstruct(&x, 8).unwrap().0.shape(), &[2, 32, 32, 3]);

    cfg.codec_factor = 8;
    assert_eq!(cfg.grid_for(128).unwrap(), (8, 8));
    let m8: Tokenizer<f32> = Tokenizer::new(cfg.clone(), (8, 8)).unwrap();
    let lat = m8.encode_latents(&images(1, 128, 2)).unwrap();
    assert_eq!(lat.values.shape(), &[1, 16, 16, 192]);
    let g = Graph::new();
    let b = m8.params.bind(&g);
    assert_eq!(m8.unified(&b, g.constant(lat.values)).unwrap().count(), 64);

    assert!(cfg.grid_for(100).is_err());
}

#[test]
fn odd_latent_grid_is_a_shape_error() {
    let v = vocab();
    let m: Tokenizer<f32> = tiny_model(&v);
    let g = Graph::new();
    let b = m.params.bind(&g);
    assert!(m.unified(&b, g.constant(Tensor::zeros([1, 3, 4, 48]))).is_err());
}

#[test]
fn encoder_is_deterministic_and_resolution_aware() {
    let v = vocab();
    let m: Tokenizer<f32> = tiny_model(&v);
    let x = images(3, 16, 4);
    assert_eq!(m.reconstruct(&x, 2).unwrap(), m.reconstruct(&x, 3).unwrap());
    let big = m.at_resolution(32).unwrap();
    assert_eq!(big.grid(), (4, 4));
    assert_eq!(big.params.get("enc.pos").unwrap().shape(), &[16, 16]);
    assert_eq!(big.reconstruct(&images(1, 32, 5), 1).unwrap().0.shape(), &[1, 32, 32, 3]);
}

#[test]
fn pooled_embedding_is_unit_norm_and_order_free() {
    let v = vocab();
    let mut m: Tokenizer<f64> = tiny_model(&v);
    let g = Graph::new();
    let vals = unitok::gradcheck::uniform(&[2, 4, 16], 7);
    let perm: Vec<usize> = [2, 0, 3, 1].to_vec();
    let mut shuffled = vals.clone();
    for n in 0..2 {
        for (dst, &src) in perm.iter().enumerate() {
            for d in 0..16 {
                shuffled.data_mut()[(n * 4 + dst) * 16 + d] = vals.data()[(n * 4 + src) * 16 + d];
            }
        }
    }
    let b = m.params.bind(&g);
    let p = |t: &Tensor<f64>| {
        let z = UnifiedTokens { values: g.constant(t.clone()), grid: (2, 2) };
        m.pool_visual(&b, &z).unwrap().tensor()
    };
    let a = p(&vals);
    for row in a.data().chunks(16) {
        let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
    assert!(a.max_abs_diff(&p(&shuffled)) < 1e-12);
    drop(b);

    // identity projection: tokens all equal to v pool to v / |v|
    let eye = Tensor::from_fn([16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
    m.params.insert("pool.w", eye);
    let b = m.params.bind(&g);
    let row: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    let same = Tensor::from_fn([1, 4, 16], |i| row[i % 16]);
    let z = UnifiedTokens { values: g.constant(same), grid: (2, 2) };
    let out = m.pool_visual(&b, &z).unwrap().tensor();
    for (o, r) in out.data().iter().zip(&row) {
        assert!((o - r / norm).abs() < 1e-12);
    }
}

#[test]
fn text_embedding_ignores_padding() {
    let v = vocab();
    let m: Tokenizer<f64> = tiny_model(&v);
    let seqs = vec![v.encode("a small red circle at the top on a white background"), v.encode("a large blue square")];
    let tight = CaptionBatch::from_sequences(&seqs, v.len(), None).unwrap();
    let padded = CaptionBatch::from_sequences(&seqs, v.len(), Some(32)).unwrap();
    let g = Graph::new();
    let b = m.params.bind(&g);
    let a = m.encode_text(&b, &tight).unwrap().tensor();
    let c = m.encode_text(&b, &padded).unwrap().tensor();
    assert!(a.max_abs_diff(&c) < 1e-6);
    for row in a.data().chunks(16) {
        assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
    let twice = CaptionBatch::from_sequences(&[seqs[0].clone(), seqs[0].clone()], v.len(), None).unwrap();
    let e = m.encode_text(&b, &twice).unwrap().tensor();
    assert_eq!(e.data()[..16], e.data()[16..]);
}

#[test]
fn untrained_caption_loss_is_near_uniform_and_padding_free() {
    let v = vocab();
    let m: Tokenizer<f64> = tiny_model(&v);
    let corpus = Corpus::synthetic(6, 11, 16);
    let bt = batch::<f64>(&corpus, &v, 16, 32);
    let tight = bt.captions.select(&(0..6).collect::<Vec<_>>());
    let g = Graph::new();
    let b = m.params.bind(&g);
    let z = m.unified(&b, g.constant(m.encode_latents(&bt.images).unwrap().values)).unwrap();
    let padded = m.caption_loss(&b, &z, &bt.captions).unwrap().item();
    let tight = m.caption_loss(&b, &z, &tight).unwrap().item();
    let ln_v = (v.len() as f64).ln();
    assert!((padded - ln_v).abs() <= 0.1 * ln_v, "{padded} vs ln V = {ln_v}");
    assert!((padded - tight).abs() < 1e-9);

    // the visual prefix matters
    let other = batch::<f64>(&Corpus::synthetic(6, 12, 16), &v, 16, 32);
    let z2 = m.unified(&b, g.constant(m.encode_latents(&other.images).unwrap().values)).unwrap();
    let shifted = m.caption_loss(&b, &z2, &bt.captions).unwrap().item();
    assert_ne!(shifted, padded);
}

#[test]
fn branch_gradients_reach_exactly_their_parameters() {
    let v = vocab();
    let m: Tokenizer<f64> = tiny_model(&v);
    let bt = batch::<f64>(&Corpus::synthetic(4, 5, 16), &v, 16, 32);
    let grads_of = |which: &str| {
        let g = Graph::new();
        let b = m.params.bind(&g);
        let l = m.forward(&b, &bt, None, weights()).unwrap();
        let obj = match which {
            "und" => l.und,
            "rec" => l.rec,
            _ => l.total,
        };
        g.backward(obj).unwrap();
        b.reached_grads()
    };
    let names = m.params.names();
    let recon_only = |n: &str| n.starts_with("dec.");
    let und_only = |n: &str| ["txt.", "cap.", "pool.", "logit_scale"].iter().any(|p| n.starts_with(p));

    let und = grads_of("und");
    for (n, gr) in names.iter().zip(&und) {
        assert_eq!(gr.is_none(), recon_only(n), "{n}");
    }
    let rec = grads_of("rec");
    for (n, gr) in names.iter().zip(&rec) {
        assert_eq!(gr.is_none(), und_only(n), "{n}");
    }
    let joint = grads_of("total");
    for (n, gr) in names.iter().zip(&joint) {
        let gr = gr.as_ref().unwrap_or_else(|| panic!("{n} unreached"));
        if n.starts_with("enc.") {
            assert!(gr.iter().any(|&x| x != 0.0), "{n} has an all-zero gradient");
        }
    }
}

#[test]
fn joint_gradient_is_the_weighted_sum_of_branch_gradients() {
    let v = vocab();
    let m: Tokenizer<f64> = tiny_model(&v);
    let bt = batch::<f64>(&Corpus::synthetic(4, 8, 16), &v, 16, 32);
    let w = weights();
    let run = |which: u8| {
        let g = Graph::new();
        let b = m.params.bind(&g);
        let l = m.forward(&b, &bt, None, w).unwrap();
        let recomposed = w.omega_rec * l.rec.item() + w.omega_und * l.und.item();
        assert!((l.total.item() - recomposed).abs() < 1e-12);
        let obj = match which {
            0 => l.total,
            1 => l.rec.scale(w.omega_rec),
            _ => l.und.scale(w.omega_und),
        };
        g.backward(obj).unwrap();
        b.grads()
    };
    let (joint, rec, und) = (run(0), run(1), run(2));
    for ((j, r), u) in joint.iter().zip(&rec).zip(&und) {
        for ((a, b), c) in j.iter().zip(r).zip(u) {
            assert!((a - (b + c)).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn end_to_end_finite_differences_at_f64() {
    let v = vocab();
    let mut m: Tokenizer<f64> = tiny_model(&v);
    let bt = batch::<f64>(&Corpus::synthetic(3, 9, 16), &v, 16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let noise: Tensor<f64> = sample_noise(&[3, 4, 16], NoiseConfig { tau: 0.2 }, &mut rng).unwrap();
    let loss = |m: &Tokenizer<f64>| -> (f64, Vec<Vec<f64>>) {
        let g = Graph::new();
        let b = m.params.bind(&g);
        let l = m.forward(&b, &bt, Some(&noise), weights()).unwrap();
        g.backward(l.total).unwrap();
        (l.total.item(), b.grads())
    };
    let (_, analytic) = loss(&m);
    let h = 1e-5;
    let mut picked = Vec::new();
    let mut worst: f64 = 0.0;
    while picked.len() < 3 {
        let p = rng.random_range(0..m.params.len());
        if picked.iter().any(|&(q, _)| q == p) {
            continue;
        }
        let j = rng.random_range(0..m.params.values()[p].numel());
        let orig = m.params.values()[p].data()[j];
        m.params.values_mut()[p].data_mut()[j] = orig + h;
        let up = loss(&m).0;
        m.params.values_mut()[p].data_mut()[j] = orig - h;
        let down = loss(&m).0;
        m.params.values_mut()[p].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[p][j], numeric);
        worst = worst.max(e);
        assert!(e <= 1e-3, "{}[{j}]: analytic {} numeric {numeric}", m.params.names()[p], analytic[p][j]);
        picked.push((p, j));
    }
    assert!(worst <= 1e-3);
}

#[test]
fn decoder_parameter_gradcheck() {
    // dec.head drives every reconstruction loss directly
    let v = vocab();
    let mut m: Tokenizer<f64> = tiny_model(&v);
    let bt = batch::<f64>(&Corpus::synthetic(2, 10, 16), &v, 16, 32);
    let p = m.params.names().iter().position(|n| n == "dec.head.w").unwrap();
    let eval = |m: &Tokenizer<f64>| {
        let g = Graph::new();
        let b = m.params.bind(&g);
        let l = m.forward(&b, &bt, None, weights()).unwrap();
        g.backward(l.rec).unwrap();
        (l.rec.item(), b.grads().swap_remove(p))
    };
    let (_, analytic) = eval(&m);
    // small step: a wider one straddles an L1 kink at [2035]
    let h = 1e-7;
    for j in (0..m.params.values()[p].numel()).step_by(37) {
        let orig = m.params.values()[p].data()[j];
        m.params.values_mut()[p].data_mut()[j] = orig + h;
        let up = eval(&m).0;
        m.params.values_mut()[p].data_mut()[j] = orig - h;
        let down = eval(&m).0;
        m.params.values_mut()[p].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        assert!(rel_err(analytic[j], numeric) <= 1e-3, "[{j}] {} vs {numeric}", analytic[j]);
    }
}

#[test]
fn noise_residual_variance_is_tau_squared_over_three() {
    let tau = 0.5;
    let g = Graph::<f64>::new();
    let z = UnifiedTokens { values: g.constant(Tensor::zeros([100_000, 1, 1])), grid: (1, 1) };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let out = perturb(z, NoiseConfig { tau }, &mut rng).unwrap().values.tensor();
    let n = out.numel() as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let want = tau * tau / 3.0;
    assert!((var - want).abs() <= 0.05 * want, "{var} vs {want}");
}

#[test]
fn tokenizer_checkpoint_round_trip() {
    let v = vocab();
    let m: Tokenizer<f32> = tiny_model(&v);
    let bytes = m.to_checkpoint(&v).to_bytes().unwrap();
    let (back, v2) = Tokenizer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(v2, v);
    assert_eq!(back.params, m.params);
    assert_eq!(back.config, m.config);
    assert_eq!(back.grid(), m.grid());

    let mut ck = m.to_checkpoint(&v);
    ck.entries.retain(|(n, _)| n != "pool.w");
    assert!(Tokenizer::from_checkpoint(&ck).is_err());
}

#[test]
fn config_validation() {
    let v = vocab();
    let ok = tiny_model_config(v.len());
    assert!(ok.validate().is_ok());
    let bad_heads = ModelConfig { vit: ViTConfig { heads: 3, ..ok.vit.clone() }, ..ok.clone() };
    assert!(bad_heads.validate().is_err());
    let bad_len = ModelConfig { text: unitok::model::TextConfig { max_len: 1, ..ok.text.clone() }, ..ok.clone() };
    assert!(bad_len.validate().is_err());
    assert_eq!(ViTConfig::large().dim, 1024);
}
