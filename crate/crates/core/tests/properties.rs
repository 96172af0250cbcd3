use proface::flow::{FlowConfig, FlowModel};
use proface::imageio::{self, Image, Role};
use proface::keygen::{self, KeygenConfig, SecretKey};
use proface::metrics::{self, MetricReport, MetricRow, RolePair};
use proface::objective::{self, LossWeights, PyramidGradient, RecoveryTriple};
use proface::obfuscators::{self, ObfuscatorKind, ObfuscatorSpec};
use proface::pipeline::{self, Template};
use proface::tensor::{ops, Tape, Tensor};
use proface::flow::WrongRecoveryMode;
use proface::trainer::{procedural_faces, Checkpoint};
use proface::wavelet;
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn image(side: usize, seed: u64) -> Image {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(side, side, Role::Original, |_, _, _| rng.gen_range(0.0..1.0))
}

fn small_flow(blocks: usize, side: usize) -> FlowConfig {
    FlowConfig {
        blocks,
        growth: 4,
        side,
        ..FlowConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_identity_kernel_is_exact(seed in any::<u64>(), c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let x = tensor(&[2, c, h, w], seed, 3.0);
        let weight = Tensor::from_fn(&[c, c, 3, 3], |i| {
            let (o, r) = (i / (c * 9), i % (c * 9));
            if r / 9 == o && r % 9 == 4 { 1.0 } else { 0.0 }
        });
        let y = ops::conv2d(&x, &weight, &Tensor::zeros(&[c])).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn ops_are_pure(seed in any::<u64>()) {
        let x = tensor(&[1, 2, 4, 4], seed, 1.0);
        let keep = x.clone();
        let a = ops::sobel(&x).unwrap();
        let b = ops::sobel(&x).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&x, &keep);
        prop_assert_eq!(wavelet::dwt(&x).unwrap(), wavelet::dwt(&keep).unwrap());
    }

    #[test]
    fn wavelet_roundtrip_and_energy(seed in any::<u64>(), b in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let x = tensor(&[b, c, 2 * h, 2 * w], seed, 1.0).cast::<f64>();
        let f = wavelet::dwt(&x).unwrap();
        prop_assert!(wavelet::iwt(&f).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        let g = tensor(&[b, 4 * c, h, w], seed ^ 1, 1.0).cast::<f64>();
        prop_assert!(wavelet::dwt(&wavelet::iwt(&g).unwrap()).unwrap().max_abs_diff(&g).unwrap() < 1e-12);
        let e = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert!((e(&f) - e(&x)).abs() <= 1e-10 * e(&x));
    }

    #[test]
    fn save_load_quantizes(seed in any::<u64>(), ppm in any::<bool>()) {
        let img = Image::from_fn(6, 4, Role::Original, {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            move |_, _, _| rng.gen_range(-0.2..1.2f32)
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if ppm { "a.ppm" } else { "a.png" });
        imageio::save_image(&img, &path).unwrap();
        let back = imageio::load_image(&path, None).unwrap();
        let q = img.quantized();
        prop_assert_eq!(back.tensor(), q.tensor());
        imageio::save_image(&back, &path).unwrap();
        prop_assert_eq!(imageio::load_image(&path, None).unwrap(), back);
    }

    #[test]
    fn resize_preserves_constants(v in 0.0f32..1.0, h in 1usize..40, w in 1usize..40, side in 1usize..30) {
        let img = Image::filled(h, w, v, Role::Original);
        let out = imageio::center_crop_resize(&img, side).unwrap();
        prop_assert!(out.tensor().data().iter().all(|&p| p == v));
    }

    #[test]
    fn keygen_is_pure_and_invertible(pw in proptest::collection::vec(any::<u8>(), 1..24), half in 1usize..12) {
        let key = SecretKey::new(pw).unwrap();
        let side = 4 * half;
        let cfg = KeygenConfig::default();
        let a = keygen::keygen(&key, side, side, &cfg).unwrap();
        prop_assert_eq!(&a, &keygen::keygen(&key, side, side, &cfg).unwrap());
        let bits = keygen::derive_bitmap(&key, side, side, &cfg).unwrap();
        prop_assert_eq!(wavelet::iwt(a.tensor()).unwrap(), bits.to_tensor());
    }

    #[test]
    fn obfuscators_stay_in_range(seed in any::<u64>(), kind in 0usize..4, side in 4usize..24) {
        let x = image(side, seed);
        let spec = ObfuscatorSpec::eval(ObfuscatorKind::ALL[kind]);
        let y = spec.apply(&x).unwrap();
        prop_assert!(y.same_size(&x));
        prop_assert!(y.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(y, spec.apply(&x).unwrap());
    }

    #[test]
    fn pixelate_is_idempotent(seed in any::<u64>(), block in 1usize..12, h in 1usize..30, w in 1usize..30) {
        let x = Image::from_fn(h, w, Role::Original, {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            move |_, _, _| rng.gen_range(0.0..1.0f32)
        });
        let once = obfuscators::pixelate(&x, block).unwrap();
        prop_assert_eq!(obfuscators::pixelate(&once, block).unwrap(), once);
    }

    #[test]
    fn blur_and_median_keep_constants(v in 0.0f32..1.0, h in 1usize..24, w in 1usize..24, sigma in 0.5f32..12.0, k in 1usize..23) {
        let x = Image::filled(h, w, v, Role::Original);
        let g = obfuscators::gaussian_blur(&x, sigma).unwrap();
        prop_assert!(g.tensor().data().iter().all(|&p| p == v));
        let m = obfuscators::median_blur(&x, k).unwrap();
        prop_assert!(m.tensor().data().iter().all(|&p| p == v));
    }

    #[test]
    fn flow_is_bijective_for_any_parameters(seed in any::<u64>(), blocks in 1usize..4, scale in 0.0f64..0.15) {
        // large random weights push activations into saturation, where f32
        // cancellation dominates; the algebra itself is checked in f64
        let model = FlowModel::<f32>::init_perturbed(small_flow(blocks, 8), seed, scale).unwrap().cast::<f64>();
        let x = tensor(&[2, 12, 4, 4], seed ^ 3, 1.0).cast::<f64>();
        let y = tensor(&[2, 12, 4, 4], seed ^ 4, 1.0).cast::<f64>();
        let k = tensor(&[1, 4, 4, 4], seed ^ 5, 2.0).cast::<f64>();
        let (a, b) = model.forward(&x, &y, &k).unwrap();
        let (xb, yb) = model.backward(&a, &b, &k).unwrap();
        let err = xb.max_abs_diff(&x).unwrap().max(yb.max_abs_diff(&y).unwrap());
        prop_assert!(err < 1e-7, "err {}", err);
    }

    #[test]
    fn flow_output_depends_on_key(seed in any::<u64>()) {
        let model = FlowModel::<f32>::init_perturbed(small_flow(1, 8), seed, 0.05).unwrap();
        let x = tensor(&[1, 12, 4, 4], seed ^ 3, 1.0);
        let y = tensor(&[1, 12, 4, 4], seed ^ 4, 1.0);
        let k1 = tensor(&[1, 4, 4, 4], seed ^ 5, 2.0);
        let k2 = tensor(&[1, 4, 4, 4], seed ^ 6, 2.0);
        let (a1, b1) = model.forward(&x, &y, &k1).unwrap();
        let (a2, b2) = model.forward(&x, &y, &k2).unwrap();
        prop_assert!(a1.max_abs_diff(&a2).unwrap().max(b1.max_abs_diff(&b2).unwrap()) > 1e-3);
    }

    #[test]
    fn identity_at_init_for_any_input(seed in any::<u64>(), blocks in 1usize..4) {
        let model = FlowModel::<f32>::init(small_flow(blocks, 8), seed).unwrap();
        let x = tensor(&[1, 12, 4, 4], seed ^ 3, 5.0);
        let y = tensor(&[1, 12, 4, 4], seed ^ 4, 5.0);
        let k = tensor(&[1, 4, 4, 4], seed ^ 5, 2.0);
        prop_assert_eq!(model.forward(&x, &y, &k).unwrap(), (x, y));
    }

    #[test]
    fn closure_with_true_byproduct(seed in any::<u64>(), pw in "[a-z]{1,12}") {
        let model = FlowModel::init_perturbed(small_flow(2, 16), seed, 0.05).unwrap();
        let x = image(16, seed);
        let key = SecretKey::new(pw).unwrap();
        let spec = ObfuscatorSpec::eval(ObfuscatorKind::Pixelate);
        let out = pipeline::protect(&model, &x, Template::Obfuscate(&spec), &key).unwrap();
        let back = pipeline::recover_with_byproduct(&model, &out.protected, &out.byproduct, &key).unwrap();
        prop_assert!(back.recovered.tensor().max_abs_diff(x.tensor()).unwrap() < 1e-3);
    }

    #[test]
    fn losses_are_nonnegative_and_zero_at_fixed_point(seed in any::<u64>()) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(tensor(&[2, 3, 8, 8], seed, 1.0).cast());
        let b = tape.constant(tensor(&[2, 3, 8, 8], seed ^ 1, 1.0).cast());
        let c = tape.constant(tensor(&[2, 3, 8, 8], seed ^ 2, 1.0).cast());
        let d = PyramidGradient::default();
        let w = LossWeights::default();
        let value = |tape: &Tape<f64>, v| tape.value(v).item().unwrap();

        let lp = objective::protection_loss(&mut tape, &d, a, b, w.beta).unwrap();
        let lp0 = objective::protection_loss(&mut tape, &d, a, a, w.beta).unwrap();
        let lr = objective::recovery_loss(&mut tape, a, b).unwrap();
        let lr0 = objective::recovery_loss(&mut tape, a, a).unwrap();
        prop_assert!(value(&tape, lp) > 0.0 && value(&tape, lr) > 0.0);
        prop_assert_eq!(value(&tape, lp0), 0.0);
        prop_assert_eq!(value(&tape, lr0), 0.0);
        for mode in [WrongRecoveryMode::Randomized, WrongRecoveryMode::Obfuscated] {
            let t = RecoveryTriple { original: a, template: b, recovered: c, wrong: b };
            let l = objective::wrong_recovery_loss(&mut tape, &d, mode, t, w.margin).unwrap();
            prop_assert!(value(&tape, l) >= 0.0);
        }
        let dab = d.distance_of(&mut tape, a, b);
        let dba = d.distance_of(&mut tape, b, a);
        prop_assert_eq!(dab, dba);
    }

    #[test]
    fn psnr_falls_with_noise_amplitude(seed in any::<u64>(), a1 in 0.01f32..0.2, extra in 0.01f32..0.2) {
        let x = Image::filled(8, 8, 0.5, Role::Original);
        let noise = image(8, seed);
        let noisy = |amp: f32| Image::from_fn(8, 8, Role::Original, |c, y, xx| 0.5 + amp * (noise.get(c, y, xx) - 0.5).signum());
        let p1 = metrics::psnr(&x, &noisy(a1)).unwrap();
        let p2 = metrics::psnr(&x, &noisy(a1 + extra)).unwrap();
        prop_assert!(p2 < p1);
    }

    #[test]
    fn ssim_bounded_and_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = image(16, s1);
        let b = image(16, s2);
        let v = metrics::ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert_eq!(v, metrics::ssim(&b, &a).unwrap());
        prop_assert!((metrics::ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        if s1 != s2 {
            prop_assert!(v < 1.0 - 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact(seed in any::<u64>(), blocks in 1usize..3, growth in 1usize..5, obfs in any::<bool>(), text in "[a-z =\n]{0,40}") {
        let cfg = FlowConfig {
            mode: if obfs { WrongRecoveryMode::Obfuscated } else { WrongRecoveryMode::Randomized },
            growth,
            ..small_flow(blocks, 8)
        };
        let cp = Checkpoint { model: FlowModel::init_perturbed(cfg, seed, 0.1).unwrap(), config_text: text };
        let bytes = cp.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, cp);
    }

    #[test]
    fn wrong_keys_differ_from_the_true_key(pw in proptest::collection::vec(any::<u8>(), 1..16), seed in any::<u64>()) {
        use rand::SeedableRng;
        let key = SecretKey::new(pw).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..8 {
            prop_assert_ne!(metrics::random_key_except(&key, &mut rng), key.clone());
            let flipped = metrics::flip_one_bit(&key, &mut rng);
            let bits: u32 = flipped.as_bytes().iter().zip(key.as_bytes()).map(|(a, b)| (a ^ b).count_ones()).sum();
            prop_assert_eq!(bits, 1);
        }
    }

    #[test]
    fn aggregation_ignores_row_order(values in proptest::collection::vec((0.0f64..99.0, -1.0f64..1.0, 0.0f64..2.0), 1..20), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let rows: Vec<MetricRow> = values
            .iter()
            .enumerate()
            .map(|(i, &(psnr_db, ssim, perc))| MetricRow {
                image: i,
                pair: RolePair::ALL[i % 4],
                obfuscator: ObfuscatorKind::ALL[i % 3],
                mode: WrongRecoveryMode::Randomized,
                psnr_db,
                ssim,
                perc,
            })
            .collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(MetricReport { rows }.aggregate(), MetricReport { rows: shuffled }.aggregate());
    }
}

trait DistanceOf {
    fn distance_of(&self, tape: &mut Tape<f64>, a: proface::Var, b: proface::Var) -> Vec<f64>;
}

impl DistanceOf for PyramidGradient {
    fn distance_of(&self, tape: &mut Tape<f64>, a: proface::Var, b: proface::Var) -> Vec<f64> {
        use proface::objective::PerceptualDistance;
        let d = self.distance(tape, a, b).unwrap();
        tape.value(d).data().to_vec()
    }
}

#[test]
fn eval_obfuscators_visibly_perturb_faces() {
    for x in procedural_faces(5, 64, 3) {
        for kind in ObfuscatorKind::ALL {
            let y = ObfuscatorSpec::eval(kind).apply(&x).unwrap();
            let p = metrics::psnr(&x, &y).unwrap();
            assert!(p < 35.0, "{kind}: PSNR {p}");
        }
    }
}
