use dualenc::eval::*;
use dualenc::synth::{generate_abx_triplets, generate_corpus, SynthConfig};
use dualenc::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rand_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
    Tensor::new(vec![t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Every monotone path from (0,0) to (n-1,m-1): minimum summed cost, shorter
/// path among equal sums, reported as sum / length.
fn dtw_brute(a: &Tensor, x: &Tensor) -> f64 {
    fn walk(a: &Tensor, x: &Tensor, i: usize, j: usize, sum: f64, len: usize, best: &mut (f64, usize)) {
        let sum = sum + cosine_distance(a.row(i), x.row(j));
        let len = len + 1;
        if i + 1 == a.rows() && j + 1 == x.rows() {
            if sum < best.0 || (sum == best.0 && len < best.1) {
                *best = (sum, len);
            }
            return;
        }
        if i + 1 < a.rows() && j + 1 < x.rows() {
            walk(a, x, i + 1, j + 1, sum, len, best);
        }
        if i + 1 < a.rows() {
            walk(a, x, i + 1, j, sum, len, best);
        }
        if j + 1 < x.rows() {
            walk(a, x, i, j + 1, sum, len, best);
        }
    }
    let mut best = (f64::INFINITY, usize::MAX);
    walk(a, x, 0, 0, 0.0, 0, &mut best);
    best.0 / best.1 as f64
}

#[test]
fn dtw_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = rand_seq(&mut rng, 3, 2);
    let x = rand_seq(&mut rng, 2, 2);
    assert_eq!(dtw_cosine(&a, &x).unwrap(), dtw_brute(&a, &x));
    for _ in 0..50 {
        let (n, m, d) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=3));
        let a = rand_seq(&mut rng, n, d);
        let x = rand_seq(&mut rng, m, d);
        assert_eq!(dtw_cosine(&a, &x).unwrap(), dtw_brute(&a, &x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dtw_symmetric_and_zero_on_self(seed in 0u64..10_000, n in 1usize..7, m in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_seq(&mut rng, n, 3);
        let x = rand_seq(&mut rng, m, 3);
        let (ax, xa) = (dtw_cosine(&a, &x).unwrap(), dtw_cosine(&x, &a).unwrap());
        prop_assert!((ax - xa).abs() <= 1e-12);
        prop_assert_eq!(dtw_cosine(&a, &a).unwrap(), 0.0);
    }
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn noiseless_speakerless_abx_is_zero() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        speaker_scale: 0.0,
        channel_sigma: 0.0,
        ..small_synth(4)
    };
    let within = generate_abx_triplets(&cfg, 50, true).unwrap();
    let across = generate_abx_triplets(&cfg, 50, false).unwrap();
    let r = abx_eval(&within, &across, |u| Ok(u.frames_tensor())).unwrap();
    assert_eq!(r.within_error, 0.0);
    assert_eq!(r.across_error, 0.0);
}

#[test]
fn constant_embedding_abx_is_half() {
    let cfg = small_synth(5);
    let t = generate_abx_triplets(&cfg, 40, true).unwrap();
    let s = abx_error(&t, |u| Ok(Tensor::new(vec![u.num_frames(), 2], vec![1.0; 2 * u.num_frames()]).unwrap())).unwrap();
    assert_eq!(s.error, 50.0);
    assert_eq!(s.ties, 40);
}

#[test]
fn random_embedding_abx_near_chance() {
    let mut errors = Vec::new();
    for seed in 0..5 {
        let cfg = small_synth(seed);
        let t = generate_abx_triplets(&cfg, 200, seed % 2 == 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = abx_error(&t, |u| Ok(rand_seq(&mut rng, u.num_frames(), 8))).unwrap();
        errors.push(s.error);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!((mean - 50.0).abs() <= 7.0, "{errors:?}");
}

#[test]
fn abx_depends_only_on_distance_order() {
    let cfg = small_synth(6);
    let t = generate_abx_triplets(&cfg, 60, false).unwrap();
    let embed = |u: &dualenc::synth::Utterance| Ok(u.frames_tensor());
    let s = abx_error(&t, embed).unwrap();
    // recount after a strictly increasing transform of every distance
    let f = |d: f64| d.powi(3) + 2.0 * d + 0.5;
    let mut wrong = 0.0;
    for tr in &t {
        let (a, b, x) = (tr.a.frames_tensor(), tr.b.frames_tensor(), tr.x.frames_tensor());
        let (dax, dab) = (f(dtw_cosine(&a, &x).unwrap()), f(dtw_cosine(&a, &b).unwrap()));
        wrong += if dax > dab { 1.0 } else if dax == dab { 0.5 } else { 0.0 };
    }
    assert_eq!(s.error, 100.0 * wrong / t.len() as f64);
}

#[test]
fn pure_noise_probe_is_chance() {
    let mut accs = Vec::new();
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2400;
        let x = Tensor::new(vec![n, 16], (0..n * 16).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let data = ProbeData {
            layers: vec![x],
            labels: (0..n).map(|_| rng.gen_range(0..12)).collect(),
            groups: (0..n).map(|i| i / 12).collect(),
        };
        accs.push(probe_accuracy(&data, &ProbeConfig::default(), seed).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 100.0 / 12.0).abs() < 3.0, "{accs:?}");
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a Gaussian matrix
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

#[test]
fn probe_invariant_to_rotation() {
    let corpus = generate_corpus(&small_synth(8), 120, 110).unwrap();
    let data = raw_frame_probe_data(&corpus, ProbeTarget::Phone, 4000).unwrap();
    let cfg = ProbeConfig {
        epochs: 100,
        ..ProbeConfig::default()
    };
    let base = probe_accuracy(&data, &cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let x = &data.layers[0];
        let r = random_rotation(&mut rng, x.cols());
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .map(|i| (0..x.cols()).map(|j| x.row(i).iter().zip(&r[j]).map(|(a, b)| a * b).sum()).collect())
            .collect();
        let rotated = ProbeData {
            layers: vec![Tensor::from_rows(&rows).unwrap()],
            ..data.clone()
        };
        let acc = probe_accuracy(&rotated, &cfg, 1).unwrap();
        assert!((acc - base).abs() <= 0.5, "{acc} vs {base}");
    }
}

#[test]
fn raw_frame_phone_probe_above_ninety() {
    let corpus = generate_corpus(&SynthConfig::default(), 300, 150).unwrap();
    let data = raw_frame_probe_data(&corpus, ProbeTarget::Phone, 20_000).unwrap();
    let acc = probe_accuracy(&data, &ProbeConfig::default(), 0).unwrap();
    assert!(acc > 90.0, "{acc}");
}
