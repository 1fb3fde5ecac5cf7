mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unitok::codec::{CodecParams, ImageBatch};
use unitok::data::Corpus;
use unitok::metrics::{
    eval_codec_roundtrip, eval_reconstruction, frechet_distance, gaussian_taps, psnr, retrieval_recall, ssim,
    FeatureStats, MetricReport, SSIM_SIGMA, SSIM_WINDOW,
};
use unitok::model::{FeatureNet, Tokenizer};
use unitok::tensor::Tensor;

fn random_images(n: usize, h: usize, w: usize, seed: u64) -> ImageBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch(Tensor::from_fn([n, h, w, 3], |_| rng.random_range(-1.0f32..1.0)))
}

fn gaussian_rows(n: usize, d: usize, shift: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + shift).collect()
}

#[test]
fn psnr_of_constant_error() {
    let x = random_images(2, 8, 8, 1);
    let y = ImageBatch(x.0.map(|v| v + 0.2));
    let p = psnr(&x, &y).unwrap();
    for v in p.values {
        assert!((v - 20.0).abs() < 1e-4, "{v}");
    }
    assert_eq!(psnr(&x, &x).unwrap().mean, 99.0);
    assert!(psnr(&x, &random_images(1, 8, 8, 2)).is_err());
}

/// Brute-force SSIM: every window evaluated directly with 2-D weights.
fn ssim_oracle(x: &[f32], y: &[f32], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW;
    let g1: Vec<f64> = {
        let c = (k as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..k).map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wgt = g1[dy] * g1[dx];
                        let i = ((oy + dy) * w + ox + dx) * 3 + ch;
                        let (a, b) = (f64::from(x[i]), f64::from(y[i]));
                        mx += wgt * a;
                        my += wgt * b;
                        sxx += wgt * a * a;
                        syy += wgt * b * b;
                        sxy += wgt * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

#[test]
fn ssim_matches_brute_force_and_extremes() {
    let x = random_images(2, 16, 16, 3);
    let noise = random_images(2, 16, 16, 4);
    let y = ImageBatch(Tensor::new(
        x.0.shape().to_vec(),
        x.0.data().iter().zip(noise.0.data()).map(|(a, b)| 0.7 * a + 0.3 * b).collect(),
    )
    .unwrap());
    let s = ssim(&x, &y).unwrap();
    let per = 16 * 16 * 3;
    for n in 0..2 {
        let want = ssim_oracle(&x.0.data()[n * per..(n + 1) * per], &y.0.data()[n * per..(n + 1) * per], 16, 16);
        assert!((s.values[n] - want).abs() < 1e-6, "{} vs {want}", s.values[n]);
    }
    for v in ssim(&x, &x).unwrap().values {
        assert!((v - 1.0).abs() < 1e-12);
    }
    // locally zero-mean texture: a jittered checkerboard
    let zm = ImageBatch(Tensor::from_fn([1, 16, 16, 3], |i| {
        let (r, c) = (i / 48, (i / 3) % 16);
        let sign = if (r + c) % 2 == 0 { 0.5 } else { -0.5 };
        sign * (1.0 + 0.05 * noise.0.data()[i])
    }));
    let neg = ImageBatch(zm.0.map(|v| -v));
    let anti = ssim(&zm, &neg).unwrap().mean;
    assert!(anti < -0.5, "{anti}");
    assert!(ssim(&random_images(1, 8, 8, 5), &random_images(1, 8, 8, 6)).is_err());
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn frechet_simple_cases() {
    let rows = gaussian_rows(500, 4, 0.0, 9);
    let a = FeatureStats::from_rows(&rows, 4).unwrap();
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);

    let eye = DMatrix::<f64>::identity(3, 3);
    let d = [0.5, -1.0, 2.0];
    let p = FeatureStats::from_moments(vec![0.0; 3], &eye, 10).unwrap();
    let q = FeatureStats::from_moments(d.to_vec(), &eye, 10).unwrap();
    let want: f64 = d.iter().map(|x| x * x).sum();
    assert!((frechet_distance(&p, &q).unwrap() - want).abs() < 1e-6);

    let b = FeatureStats::from_rows(&gaussian_rows(300, 4, 0.3, 10), 4).unwrap();
    let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-9 && ab > 0.0);
    assert!(frechet_distance(&a, &FeatureStats::from_rows(&rows[..12], 3).unwrap()).is_err());
    assert!(FeatureStats::from_rows(&rows[..4], 4).unwrap().covariance().is_err());
}

fn random_spd(seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(3, 3) * 0.1
}

/// Eigenvalues of a 3x3 matrix with real spectrum via the trigonometric
/// solution of its characteristic cubic.
fn cubic_eigenvalues(m: &DMatrix<f64>) -> [f64; 3] {
    let tr = m.trace();
    let minors = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)] + m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)]
        - m[(1, 2)] * m[(2, 1)];
    let det = m.determinant();
    // l^3 - tr l^2 + minors l - det = 0, depressed with l = t + tr/3
    let p = minors - tr * tr / 3.0;
    let q = -2.0 * tr.powi(3) / 27.0 + tr * minors / 3.0 - det;
    let r = 2.0 * (-p / 3.0).sqrt();
    let phi = ((3.0 * q / (p * r)).clamp(-1.0, 1.0)).acos() / 3.0;
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = r * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + tr / 3.0;
    }
    out
}

#[test]
fn frechet_matches_spectral_oracle_in_three_dimensions() {
    for seed in 0..5 {
        let (sa, sb) = (random_spd(100 + seed), random_spd(200 + seed));
        let (ma, mb) = (vec![0.1, 0.2, -0.3], vec![-0.4, 0.0, 0.5]);
        let a = FeatureStats::from_moments(ma.clone(), &sa, 50).unwrap();
        let b = FeatureStats::from_moments(mb.clone(), &sb, 50).unwrap();
        let lambdas = cubic_eigenvalues(&(&sa * &sb));
        let tr_root: f64 = lambdas.iter().map(|l| l.max(0.0).sqrt()).sum();
        let mean2: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        let want = mean2 + sa.trace() + sb.trace() - 2.0 * tr_root;
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-5, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn merging_shards_is_order_free() {
    let rows = gaussian_rows(90, 5, 1.0, 11);
    let whole = FeatureStats::from_rows(&rows, 5).unwrap();
    let shards: Vec<FeatureStats> =
        [0..20, 20..65, 65..90].iter().map(|r| FeatureStats::from_rows(&rows[r.start * 5..r.end * 5], 5).unwrap()).collect();
    let abc = shards[0].merge(&shards[1]).unwrap().merge(&shards[2]).unwrap();
    let cab = shards[2].merge(&shards[0]).unwrap().merge(&shards[1]).unwrap();
    let b_ca = shards[1].merge(&shards[2].merge(&shards[0]).unwrap()).unwrap();
    for s in [&abc, &cab, &b_ca] {
        assert_eq!(s.count, whole.count);
        for (x, y) in s.mean.iter().zip(&whole.mean) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in s.scatter.iter().zip(&whole.scatter) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }
    assert_eq!(FeatureStats::empty(5).merge(&whole).unwrap(), whole);
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f32> = (0..n * d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    for r in data.chunks_mut(d) {
        let norm = r.iter().map(|v| v * v).sum::<f32>().sqrt();
        r.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new([n, d], data).unwrap()
}

#[test]
fn recall_reference_points() {
    let e = unit_rows(50, 16, 1);
    let r = retrieval_recall(&e, &e, 1).unwrap();
    assert_eq!((r.image_to_text, r.text_to_image), (1.0, 1.0));

    let txt = unit_rows(50, 16, 2);
    let all = retrieval_recall(&e, &txt, 50).unwrap();
    assert_eq!((all.image_to_text, all.text_to_image), (1.0, 1.0));

    let (a, b) = (unit_rows(1000, 16, 3), unit_rows(1000, 16, 4));
    let chance = retrieval_recall(&a, &b, 1).unwrap();
    // mean 1/N; 0.006 is more than five standard errors above it
    assert!(chance.image_to_text <= 0.006 && chance.text_to_image <= 0.006, "{chance:?}");

    // all-equal scores: only the lowest index wins its own tie
    let flat = Tensor::<f32>::zeros([10, 4]);
    let tied = retrieval_recall(&flat, &flat, 1).unwrap();
    assert_eq!(tied.image_to_text, 0.1);
    assert!(retrieval_recall(&e, &txt, 0).is_err());
}

#[test]
fn codec_bypass_is_near_perfect_and_untrained_model_is_far_from_it() {
    let corpus = Corpus::synthetic(24, 5, 16);
    let v = common::vocab();
    let features = FeatureNet::new(1);
    let codec = CodecParams::new(4, 0).unwrap();
    let bound = eval_codec_roundtrip(&codec, &features, &corpus, 16).unwrap();
    assert!(bound.psnr >= 90.0, "{bound:?}");
    assert!(bound.frechet <= 1e-3, "{bound:?}");
    assert!(bound.ssim > 0.999);

    let m: Tokenizer<f32> = common::tiny_model(&v);
    let r = eval_reconstruction(&m, &corpus, 16).unwrap();
    assert!(bound.psnr - r.psnr >= 40.0, "{r:?}");
    assert_eq!(r, eval_reconstruction(&m, &corpus, 16).unwrap());
    assert_eq!(r.n, 24);
}

#[test]
fn metric_report_formats() {
    let mut rep = MetricReport::new(64);
    rep.push("psnr", 21.5, 256);
    rep.push("recall@1_t2i", 0.5, 256);
    let csv = rep.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# resize=bilinear crop=center resolution=64"));
    assert_eq!(lines.next(), Some("metric,value,n"));
    assert_eq!(lines.next(), Some("psnr,21.5,256"));
    let back: MetricReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
    assert_eq!(back, rep);
    assert_eq!(rep.get("recall@1_t2i"), Some(0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batch_metrics_do_not_depend_on_order(seed in 0u64..1000, rot in 1usize..4) {
        let x = random_images(4, 12, 12, seed);
        let y = random_images(4, 12, 12, seed + 1);
        let per = 12 * 12 * 3;
        let rotate = |b: &ImageBatch<f32>| {
            let mut d = b.0.data()[rot * per..].to_vec();
            d.extend_from_slice(&b.0.data()[..rot * per]);
            ImageBatch(Tensor::new(b.0.shape().to_vec(), d).unwrap())
        };
        let (xr, yr) = (rotate(&x), rotate(&y));
        for f in [psnr, ssim] {
            let (a, b) = (f(&x, &y).unwrap(), f(&xr, &yr).unwrap());
            prop_assert!((a.mean - b.mean).abs() < 1e-12);
            let mut av = a.values.clone();
            av.rotate_left(rot);
            prop_assert_eq!(av, b.values);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(seed in 0u64..1000, shift in -2.0f64..2.0) {
        let a = FeatureStats::from_rows(&gaussian_rows(40, 3, 0.0, seed), 3).unwrap();
        let b = FeatureStats::from_rows(&gaussian_rows(40, 3, shift, seed + 7), 3).unwrap();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
    }
}
