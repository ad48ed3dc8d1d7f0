//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::config::{LrSpec, TrainConfig, UttTargets};
use crate::encoders::{Model, ModelConfig, Span};
use crate::error::{Error, Result};
use crate::losses::{frame_ce, info_nce, pseudo_con, utt_ce, PcDenominator, PseudoConConfig};
use crate::miclub::{aggregate, club_loss, variational_nll, MiMode, Projections, TimeReduction, VariationalNet};
use crate::nn::Bind;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::stream_rng;
use crate::synth::{generate_corpus, SynthConfig};
use crate::trainer::{make_targets, micro_batch_loss, prepare_stage2, Stage, TrainState};

/// Denominator floor; central differences carry round-off near 1e-10 at the
/// default step, so smaller gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest relative error over sampled coordinates between tape gradients and
/// central differences, `|analytic - fd| / max(|analytic| + |fd|, REL_FLOOR)`.
///
/// `build` must map the parameter values deterministically to a scalar loss.
/// At most `max_coords` coordinates are probed (all of them when fewer exist),
/// chosen with `seed`. Parameter values are restored before returning.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    max_coords: usize,
    seed: u64,
    mut build: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Input(format!("finite-difference step {step} must be > 0")));
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    check_finite(tape.value(loss).item())?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| {
            let v = tape.param(store, id);
            tape.grad(v)
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; store.value(id).numel()])
        })
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, &id)| (0..store.value(id).numel()).map(move |j| (pi, j)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, store)?;
        let v = t.value(l).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for c in chosen {
        let (pi, j) = coords[c];
        let id = params[pi];
        let orig = store.value(id).data()[j];
        store.get_mut(id).value.data_mut()[j] = orig + step;
        let plus = eval(store);
        store.get_mut(id).value.data_mut()[j] = orig - step;
        let minus = eval(store);
        store.get_mut(id).value.data_mut()[j] = orig;
        let fd = (plus? - minus?) / (2.0 * step);
        let a = analytic[pi][j];
        let err = (a - fd).abs() / (a.abs() + fd.abs()).max(REL_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss evaluated to {v}")))
    }
}

/// Worst relative gradient error of one loss over its random configurations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossGradReport {
    pub loss: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
}

pub const LOSS_NAMES: [&str; 7] = [
    "frame_ce",
    "pseudo_con",
    "info_nce",
    "utt_ce",
    "variational_nll",
    "mi_club",
    "total",
];

const FD_STEP: f64 = 1e-5;
const MAX_COORDS: usize = 40;

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    // every class present at least once when n allows
    let mut v: Vec<usize> = (0..n).map(|i| i % classes).collect();
    v.shuffle(rng);
    v
}

fn nonempty_subset(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let k = rng.gen_range(1..=n);
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn check_frame_ce(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (n, k) = (rng.gen_range(3..=8), rng.gen_range(2..=6));
    let mut store = ParamStore::new();
    let id = store.add_normal("logits", ParamGroup::Frame, &[n, k], 1.5, rng)?;
    let nu: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let masked = nonempty_subset(rng, n);
    finite_difference_check(&mut store, &[id], FD_STEP, MAX_COORDS, seed, |t, s| {
        let l = t.param(s, id);
        frame_ce(t, l, &nu, &masked)
    })
}

fn check_pseudo_con(rng: &mut ChaCha8Rng, seed: u64, c: usize) -> Result<f64> {
    let (n, d) = (rng.gen_range(4..=9), rng.gen_range(2..=5));
    let mut store = ParamStore::new();
    let id = store.add_normal("y", ParamGroup::Frame, &[n, d], 1.0, rng)?;
    let classes = rng.gen_range(2..=3);
    let nu = labels(rng, n, classes);
    let anchors = nonempty_subset(rng, n);
    let cfg = PseudoConConfig {
        tau: rng.gen_range(0.1..1.0),
        denominator: if c.is_multiple_of(2) {
            PcDenominator::Negatives
        } else {
            PcDenominator::AllButAnchor
        },
        use_log: c % 3 != 2,
        normalize: c % 4 != 3,
    };
    finite_difference_check(&mut store, &[id], FD_STEP, MAX_COORDS, seed, |t, s| {
        let y = t.param(s, id);
        Ok(pseudo_con(t, y, &nu, &anchors, &cfg)?.loss)
    })
}

fn check_info_nce(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, d) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let tau = rng.gen_range(0.2..1.0);
    let mut store = ParamStore::new();
    let id = store.add_normal("pooled", ParamGroup::Utterance, &[2 * b, d], 1.0, rng)?;
    finite_difference_check(&mut store, &[id], FD_STEP, MAX_COORDS, seed, |t, s| {
        let p = t.param(s, id);
        info_nce(t, p, tau)
    })
}

fn check_utt_ce(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, q) = (rng.gen_range(2..=4), rng.gen_range(2..=6));
    let mut store = ParamStore::new();
    let id = store.add_normal("logits", ParamGroup::Utterance, &[2 * b, q], 1.5, rng)?;
    let mu: Vec<usize> = (0..b).map(|_| rng.gen_range(0..q)).collect();
    finite_difference_check(&mut store, &[id], FD_STEP, MAX_COORDS, seed, |t, s| {
        let l = t.param(s, id);
        utt_ce(t, l, &mu)
    })
}

/// Random frame/utterance hidden states for `b` utterances plus the pieces
/// `aggregate` consumes.
struct MiFixture {
    store: ParamStore,
    net: VariationalNet,
    proj: Projections,
    frame: Vec<Vec<ParamId>>,
    utt: Vec<Vec<ParamId>>,
    pooled: Vec<ParamId>,
    spans: Vec<Span>,
}

fn mi_fixture(rng: &mut ChaCha8Rng) -> Result<MiFixture> {
    let b = rng.gen_range(2..=4);
    let (d, dp, dl) = (rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=3));
    let (m, l1) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let mut store = ParamStore::new();
    let net = VariationalNet::new(&mut store, dl, rng.gen_range(3..=6), d, rng)?;
    let proj = Projections::new(&mut store, l1, dp, dl, rng)?;
    let (mut frame, mut utt, mut pooled, mut spans) = (vec![], vec![], vec![], vec![]);
    for i in 0..b {
        let t_len = rng.gen_range(4..=7);
        let len = rng.gen_range(2..=t_len - 1);
        let span = Span {
            start: rng.gen_range(0..=t_len - len),
            len,
        };
        frame.push(
            (0..m)
                .map(|l| store.add_normal(&format!("y{i}.{l}"), ParamGroup::Frame, &[t_len, d], 1.0, rng))
                .collect::<Result<Vec<_>>>()?,
        );
        utt.push(
            (0..l1)
                .map(|l| store.add_normal(&format!("z{i}.{l}"), ParamGroup::Utterance, &[len, dp], 1.0, rng))
                .collect::<Result<Vec<_>>>()?,
        );
        pooled.push(store.add_normal(&format!("p{i}"), ParamGroup::Utterance, &[1, dl], 1.0, rng)?);
        spans.push(span);
    }
    Ok(MiFixture {
        store,
        net,
        proj,
        frame,
        utt,
        pooled,
        spans,
    })
}

fn fixture_pairs(
    t: &mut Tape,
    s: &ParamStore,
    f: &MiFixture,
    mode: MiMode,
) -> Result<Vec<crate::miclub::AggregatedPair>> {
    (0..f.spans.len())
        .map(|i| {
            let fh: Vec<Var> = f.frame[i].iter().map(|&id| t.param(s, id)).collect();
            let uh: Vec<Var> = f.utt[i].iter().map(|&id| t.param(s, id)).collect();
            let p = t.param(s, f.pooled[i]);
            aggregate(t, s, &f.proj, &fh, &uh, p, f.spans[i], mode)
        })
        .collect()
}

fn check_variational_nll(rng: &mut ChaCha8Rng, seed: u64, c: usize) -> Result<f64> {
    let mut f = mi_fixture(rng)?;
    let mode = if c.is_multiple_of(2) { MiMode::Aggregated } else { MiMode::FinalOnly };
    let ids: Vec<ParamId> = f.store.iter().map(|(id, _)| id).collect();
    let mut store = std::mem::take(&mut f.store);
    finite_difference_check(&mut store, &ids, FD_STEP, MAX_COORDS, seed, |t, s| {
        let pairs = fixture_pairs(t, s, &f, mode)?;
        variational_nll(t, &f.net, s, &pairs, Bind::Trainable)
    })
}

fn check_club(rng: &mut ChaCha8Rng, seed: u64, c: usize) -> Result<f64> {
    let mut f = mi_fixture(rng)?;
    let mode = if c.is_multiple_of(2) { MiMode::Aggregated } else { MiMode::FinalOnly };
    let reduction = if c.is_multiple_of(3) { TimeReduction::Sum } else { TimeReduction::Mean };
    // phi enters as a constant, so only the representations are probed
    let ids: Vec<ParamId> = f
        .store
        .iter()
        .filter(|(_, p)| p.group != ParamGroup::Variational)
        .map(|(id, _)| id)
        .collect();
    let mut store = std::mem::take(&mut f.store);
    finite_difference_check(&mut store, &ids, FD_STEP, MAX_COORDS, seed, |t, s| {
        let pairs = fixture_pairs(t, s, &f, mode)?;
        club_loss(t, &f.net, s, &pairs, reduction)
    })
}

fn check_total(seed: u64, c: usize) -> Result<f64> {
    let synth = SynthConfig {
        num_speakers: 3,
        num_phones: 4,
        feat_dim: 4,
        min_frames: 16,
        seed,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&synth, 6, 18)?;
    let mcfg = ModelConfig {
        d_frame: 4,
        d_feat: 3,
        d_utt: 3,
        frame_layers: 2,
        utt_layers: 2,
        frozen_blocks: c % 2,
        num_frame_targets: 3,
        var_hidden: 4,
        mask_prob: 0.2,
        mask_span: 3,
        seg_len: 6,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        lambda: 0.5,
        batch: 3,
        grad_accum: 1,
        mi_mode: if c.is_multiple_of(2) { MiMode::Aggregated } else { MiMode::FinalOnly },
        utt_targets: UttTargets::Fixed(3),
        lr_var: LrSpec::constant(1e-3),
        kmeans_iters: 10,
        ..TrainConfig::default()
    };
    let model = Model::new(&mcfg, corpus.feat_dim, seed)?;
    let mut state = TrainState::new(model, tcfg.adam, seed, "");
    let (targets, _) = make_targets(&corpus, &state.model, mcfg.num_frame_targets, &tcfg, seed)?;
    prepare_stage2(&mut state, &tcfg, &targets)?;
    let ids: Vec<ParamId> = [ParamGroup::Frame, ParamGroup::Utterance, ParamGroup::Projection]
        .iter()
        .flat_map(|&g| state.model.store.ids_in_group(g))
        .collect();
    let mut model = state.model;
    let mut store = std::mem::take(&mut model.store);
    finite_difference_check(&mut store, &ids, FD_STEP, MAX_COORDS, seed, |t, s| {
        // the closure sees the perturbed store through a model view
        let view = Model {
            store: s.clone(),
            ..model.clone()
        };
        micro_batch_loss(t, &view, &corpus, &tcfg, Some(&targets), Stage::Stage2, seed, 0)
    })
}

/// Finite-difference check of every training loss over `configs` random
/// configurations each.
pub fn loss_gradient_suite(configs: usize, seed: u64) -> Result<Vec<LossGradReport>> {
    let mut worst = [0.0f64; LOSS_NAMES.len()];
    for c in 0..configs {
        let mut rng = stream_rng(seed, "gradcheck", c as u64);
        let s = seed.wrapping_add(c as u64);
        let errs = [
            check_frame_ce(&mut rng, s)?,
            check_pseudo_con(&mut rng, s, c)?,
            check_info_nce(&mut rng, s)?,
            check_utt_ce(&mut rng, s)?,
            check_variational_nll(&mut rng, s, c)?,
            check_club(&mut rng, s, c)?,
            check_total(s, c)?,
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    Ok(LOSS_NAMES
        .iter()
        .zip(worst)
        .map(|(&loss, max_rel_error)| LossGradReport {
            loss,
            configs,
            max_rel_error,
        })
        .collect())
}
