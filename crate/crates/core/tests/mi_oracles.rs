use approx::assert_relative_eq;
use dualenc::encoders::Span;
use dualenc::miclub::*;
use dualenc::nn::Linear;
use dualenc::{ParamGroup, ParamId, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, row)| x * row[j]).sum()).collect())
        .collect()
}

fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = to_mat(store.value(l.w));
    let b = store.value(l.b).data();
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

/// Hand evaluation of the two-layer mean and log-variance heads.
fn net_oracle(store: &ParamStore, net: &VariationalNet, z: &Mat) -> (Mat, Mat) {
    let relu = |m: Mat| -> Mat { m.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect() };
    let mu = linear(store, &net.mean[1], &relu(linear(store, &net.mean[0], z)));
    let lv = linear(store, &net.logvar[1], &relu(linear(store, &net.logvar[0], z)))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(LOGVAR_FLOOR)).collect())
        .collect();
    (mu, lv)
}

fn log_density(y: &[f64], mu: &[f64], lv: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .zip(lv)
        .map(|((y, m), l)| -0.5 * ((2.0 * std::f64::consts::PI).ln() + l + (y - m).powi(2) / l.exp()))
        .sum()
}

struct Case {
    store: ParamStore,
    net: VariationalNet,
    proj: Projections,
    frame: Vec<Vec<ParamId>>,
    utt: Vec<Vec<ParamId>>,
    pooled: Vec<ParamId>,
    spans: Vec<Span>,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, m, l1, d, dp, dl) = (3, 3, 2, 3, 4, 2);
    let mut store = ParamStore::new();
    let net = VariationalNet::new(&mut store, dl, 5, d, &mut rng).unwrap();
    let proj = Projections::new(&mut store, l1, dp, dl, &mut rng).unwrap();
    let (mut frame, mut utt, mut pooled, mut spans) = (vec![], vec![], vec![], vec![]);
    for i in 0..b {
        let t_len = 9;
        let len = 4 + i;
        let span = Span { start: rng.gen_range(0..=t_len - len), len };
        frame.push(
            (0..m)
                .map(|l| store.add_normal(&format!("y{i}.{l}"), ParamGroup::Frame, &[t_len, d], 1.0, &mut rng).unwrap())
                .collect(),
        );
        utt.push(
            (0..l1)
                .map(|l| store.add_normal(&format!("z{i}.{l}"), ParamGroup::Utterance, &[len, dp], 1.0, &mut rng).unwrap())
                .collect(),
        );
        pooled.push(store.add_normal(&format!("p{i}"), ParamGroup::Utterance, &[1, dl], 1.0, &mut rng).unwrap());
        spans.push(span);
    }
    Case { store, net, proj, frame, utt, pooled, spans }
}

fn pairs(tape: &mut Tape, c: &Case, mode: MiMode) -> Vec<AggregatedPair> {
    (0..c.spans.len())
        .map(|i| {
            let fh: Vec<_> = c.frame[i].iter().map(|&id| tape.param(&c.store, id)).collect();
            let uh: Vec<_> = c.utt[i].iter().map(|&id| tape.param(&c.store, id)).collect();
            let p = tape.param(&c.store, c.pooled[i]);
            aggregate(tape, &c.store, &c.proj, &fh, &uh, p, c.spans[i], mode).unwrap()
        })
        .collect()
}

/// `(ybar, zbar)` per utterance by direct summation.
fn aggregate_oracle(c: &Case, mode: MiMode) -> Vec<(Mat, Mat)> {
    (0..c.spans.len())
        .map(|i| {
            let sp = c.spans[i];
            let layers: Vec<Mat> = c.frame[i].iter().map(|&id| to_mat(c.store.value(id))).collect();
            let used: &[Mat] = match mode {
                MiMode::Aggregated => &layers,
                MiMode::FinalOnly => &layers[layers.len() - 1..],
            };
            let ybar: Mat = (sp.start..sp.end())
                .map(|t| (0..used[0][0].len()).map(|k| used.iter().map(|l| l[t][k]).sum()).collect())
                .collect();
            let pooled = c.store.value(c.pooled[i]).data().to_vec();
            let mut zbar: Mat = vec![pooled; sp.len];
            if mode == MiMode::Aggregated {
                for (&z, &a) in c.utt[i].iter().zip(&c.proj.a) {
                    let za = matmul(&to_mat(c.store.value(z)), &to_mat(c.store.value(a)));
                    for (row, add) in zbar.iter_mut().zip(za) {
                        for (v, x) in row.iter_mut().zip(add) {
                            *v += x;
                        }
                    }
                }
            }
            (ybar, zbar)
        })
        .collect()
}

#[test]
fn aggregate_matches_layer_sums() {
    for mode in [MiMode::Aggregated, MiMode::FinalOnly] {
        let c = case(1);
        let mut tape = Tape::new();
        let got = pairs(&mut tape, &c, mode);
        for (p, (y, z)) in got.iter().zip(aggregate_oracle(&c, mode)) {
            for (a, b) in tape.value(p.ybar).data().iter().zip(y.iter().flatten()) {
                assert_relative_eq!(*a, *b, max_relative = 1e-12);
            }
            for (a, b) in tape.value(p.zbar).data().iter().zip(z.iter().flatten()) {
                assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }
}

#[test]
fn final_only_gives_projections_no_gradient() {
    let c = case(2);
    let mut tape = Tape::new();
    let ps = pairs(&mut tape, &c, MiMode::FinalOnly);
    let loss = club_loss(&mut tape, &c.net, &c.store, &ps, TimeReduction::Mean).unwrap();
    tape.backward(loss).unwrap();
    let mut store = c.store.clone();
    store.zero_grad();
    tape.accumulate_param_grads(&mut store);
    for &a in &c.proj.a {
        assert!(store.get(a).grad.data().iter().all(|&g| g == 0.0));
    }
}

#[test]
fn variational_nll_matches_density_formula() {
    let c = case(3);
    let mut tape = Tape::new();
    let ps = pairs(&mut tape, &c, MiMode::Aggregated);
    let nll = variational_nll(&mut tape, &c.net, &c.store, &ps, dualenc::nn::Bind::Trainable).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for (y, z) in aggregate_oracle(&c, MiMode::Aggregated) {
        let (mu, lv) = net_oracle(&c.store, &c.net, &z);
        for t in 0..y.len() {
            total -= log_density(&y[t], &mu[t], &lv[t]);
            n += 1;
        }
    }
    assert_relative_eq!(tape.value(nll).item(), total / n as f64, max_relative = 1e-11);
}

#[test]
fn club_matches_matched_position_oracle() {
    for reduction in [TimeReduction::Mean, TimeReduction::Sum] {
        let c = case(4);
        let mut tape = Tape::new();
        let ps = pairs(&mut tape, &c, MiMode::Aggregated);
        let got = club_loss(&mut tape, &c.net, &c.store, &ps, reduction).unwrap();
        let agg = aggregate_oracle(&c, MiMode::Aggregated);
        let heads: Vec<(Mat, Mat)> = agg.iter().map(|(_, z)| net_oracle(&c.store, &c.net, z)).collect();
        let b = agg.len();
        let mut total = 0.0;
        for i in 0..b {
            let y = &agg[i].0;
            let mut per_utt = 0.0;
            for t in 0..y.len() {
                let pos = log_density(&y[t], &heads[i].0[t], &heads[i].1[t]);
                let valid: Vec<usize> = (0..b).filter(|&j| t < agg[j].0.len()).collect();
                let cross: f64 = valid
                    .iter()
                    .map(|&j| log_density(&y[t], &heads[j].0[t], &heads[j].1[t]))
                    .sum::<f64>()
                    / valid.len() as f64;
                per_utt += pos - cross;
            }
            total += match reduction {
                TimeReduction::Mean => per_utt / y.len() as f64,
                TimeReduction::Sum => per_utt,
            };
        }
        assert_relative_eq!(tape.value(got).item(), total / b as f64, max_relative = 1e-10);
    }
}

#[test]
fn mi_step_detach_contract() {
    let c = case(5);
    let var_ids = c.net.params();
    let grads = |which: usize| {
        let mut t = Tape::new();
        let ps = pairs(&mut t, &c, MiMode::Aggregated);
        let (nll, club) = mi_step(&mut t, &c.net, &c.store, &ps, TimeReduction::Mean).unwrap();
        t.backward(if which == 0 { nll } else { club }).unwrap();
        let mut s = c.store.clone();
        s.zero_grad();
        t.accumulate_param_grads(&mut s);
        s
    };
    let s = grads(0);
    for (id, p) in s.iter() {
        let zero = p.grad.data().iter().all(|&g| g == 0.0);
        assert_eq!(zero, !var_ids.contains(&id), "{}", p.name);
    }
    let s = grads(1);
    for &id in &var_ids {
        assert!(s.get(id).grad.data().iter().all(|&g| g == 0.0));
    }
    assert!(s.get(c.frame[0][0]).grad.data().iter().any(|&g| g != 0.0));
}

#[test]
fn unit_residual_one_dimension() {
    let nll = -log_density(&[1.0], &[0.0], &[0.0]);
    assert_relative_eq!(nll, 1.4189, epsilon = 1e-4);
}
