use dualenc::synth::*;
use proptest::prelude::*;

/// Solves `A X = B` in place for symmetric positive definite `A`.
fn cholesky_solve(a: &mut [Vec<f64>], b: &mut [Vec<f64>]) {
    let n = a.len();
    for j in 0..n {
        let mut s = a[j][j];
        for k in 0..j {
            s -= a[j][k] * a[j][k];
        }
        a[j][j] = s.sqrt();
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / a[j][j];
        }
    }
    for c in 0..b[0].len() {
        for i in 0..n {
            let mut s = b[i][c];
            for k in 0..i {
                s -= a[i][k] * b[k][c];
            }
            b[i][c] = s / a[i][i];
        }
        for i in (0..n).rev() {
            let mut s = b[i][c];
            for k in i + 1..n {
                s -= a[k][i] * b[k][c];
            }
            b[i][c] = s / a[i][i];
        }
    }
}

/// Least-squares regression onto one-hot labels with a bias column, fit on
/// the first `n_train` rows; returns held-out argmax accuracy in percent.
fn least_squares_accuracy(x: &[Vec<f64>], y: &[usize], classes: usize, n_train: usize) -> f64 {
    let d = x[0].len() + 1;
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![vec![0.0; classes]; d];
    for (xi, &yi) in x[..n_train].iter().zip(y) {
        let f: Vec<f64> = xi.iter().copied().chain([1.0]).collect();
        for i in 0..d {
            for j in 0..d {
                a[i][j] += f[i] * f[j];
            }
            b[i][yi] += f[i];
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    cholesky_solve(&mut a, &mut b);
    let correct = x[n_train..]
        .iter()
        .zip(&y[n_train..])
        .filter(|(xi, &yi)| {
            let f: Vec<f64> = xi.iter().copied().chain([1.0]).collect();
            let score = |c: usize| (0..d).map(|i| f[i] * b[i][c]).sum::<f64>();
            (0..classes).max_by(|&p, &q| score(p).total_cmp(&score(q))).unwrap() == yi
        })
        .count();
    100.0 * correct as f64 / (x.len() - n_train) as f64
}

#[test]
fn default_corpus_is_linearly_decodable() {
    let cfg = SynthConfig::default();
    let corpus = generate_corpus(&cfg, 400, 150).unwrap();
    let mut x = Vec::new();
    let mut phone = Vec::new();
    let mut speaker = Vec::new();
    for u in &corpus.utterances {
        for t in 0..u.num_frames() {
            x.push(u.frame(t).iter().map(|&v| v as f64).collect::<Vec<_>>());
            phone.push(u.phone_labels[t] as usize);
            speaker.push(u.speaker_id as usize);
        }
    }
    // held-out utterances: the split falls on an utterance boundary
    let n_train = corpus.utterances[..320].iter().map(|u| u.num_frames()).sum();
    let p = least_squares_accuracy(&x, &phone, cfg.num_phones, n_train);
    let s = least_squares_accuracy(&x, &speaker, cfg.num_speakers, n_train);
    assert!(p > 90.0, "phone {p}");
    assert!(s > 90.0, "speaker {s}");
}

#[test]
fn phone_frequencies_match_stationary_distribution() {
    let cfg = SynthConfig::default();
    let corpus = generate_corpus(&cfg, 700, 150).unwrap();
    assert!(corpus.total_frames() >= 100_000);
    // run lengths are independent of the phone, so frame shares follow the
    // stationary law of the chain
    let mut counts = vec![0usize; cfg.num_phones];
    for u in &corpus.utterances {
        for &p in &u.phone_labels {
            counts[p as usize] += 1;
        }
    }
    let total = corpus.total_frames() as f64;
    let pi = stationary_distribution(&cfg.transition_matrix());
    let tv: f64 = 0.5 * counts.iter().zip(&pi).map(|(&c, &p)| (c as f64 / total - p).abs()).sum::<f64>();
    assert!(tv <= 0.02, "tv {tv}");
}

#[test]
fn durations_cover_range_uniformly() {
    let cfg = SynthConfig::default();
    let corpus = generate_corpus(&cfg, 200, 150).unwrap();
    let mut hist = vec![0usize; cfg.duration_max + 1];
    for u in &corpus.utterances {
        // the final run may be cut by the utterance length
        let labels = &u.phone_labels;
        let mut start = 0;
        for t in 1..labels.len() {
            if labels[t] != labels[t - 1] {
                hist[t - start] += 1;
                start = t;
            }
        }
    }
    let runs: usize = hist.iter().sum();
    for (len, &h) in hist.iter().enumerate().skip(cfg.duration_min) {
        let share = h as f64 / runs as f64;
        let want = 1.0 / (cfg.duration_max - cfg.duration_min + 1) as f64;
        assert!((share - want).abs() < 0.02, "run length {len}: {share}");
    }
    assert_eq!(hist[..cfg.duration_min].iter().sum::<usize>(), 0);
}

#[test]
fn noiseless_map_is_injective() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        channel_sigma: 0.0,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg, 300, 120).unwrap();
    let mut seen: std::collections::HashMap<Vec<u32>, (u32, u32)> = Default::default();
    for u in &corpus.utterances {
        for t in 0..u.num_frames() {
            let key: Vec<u32> = u.frame(t).iter().map(|v| v.to_bits()).collect();
            let id = (u.phone_labels[t], u.speaker_id);
            assert_eq!(*seen.entry(key).or_insert(id), id);
        }
    }
    assert!(seen.len() > cfg.num_phones * 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_deterministic_and_well_formed(seed in 0u64..1_000, id in 0u32..50, mean in 110usize..200) {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let u = generate_utterance(&cfg, id, mean).unwrap();
        prop_assert_eq!(&u, &generate_utterance(&cfg, id, mean).unwrap());
        prop_assert!(u.num_frames() >= cfg.min_frames);
        prop_assert_eq!(u.phone_labels.len(), u.num_frames());
        prop_assert!(u.frames.iter().all(|v| v.is_finite()));
        prop_assert!((u.speaker_id as usize) < cfg.num_speakers);
        prop_assert!(u.phone_labels.iter().all(|&p| (p as usize) < cfg.num_phones));
    }

    #[test]
    fn default_chain_rows_are_stochastic(v in 3usize..30) {
        let cfg = SynthConfig { num_phones: v, ..SynthConfig::default() };
        for row in cfg.transition_matrix() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(cfg.validate().is_ok());
    }

    #[test]
    fn non_stochastic_rows_rejected(v in 3usize..8, bump in 0.01f64..0.5) {
        let mut m = SynthConfig { num_phones: v, ..SynthConfig::default() }.transition_matrix();
        m[v - 1][0] += bump;
        let cfg = SynthConfig { num_phones: v, phone_markov: Some(m), ..SynthConfig::default() };
        prop_assert!(cfg.validate().is_err());
    }
}
