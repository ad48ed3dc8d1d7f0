use dualenc::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use dualenc::config::{LrSpec, TrainConfig, UttTargets};
use dualenc::encoders::{Model, ModelConfig};
use dualenc::synth::{generate_corpus, Corpus, SynthConfig};
use dualenc::trainer::*;
use dualenc::{ParamGroup, Tape};

fn tiny() -> (Corpus, ModelConfig, TrainConfig) {
    let synth = SynthConfig {
        num_speakers: 4,
        num_phones: 4,
        feat_dim: 6,
        min_frames: 24,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&synth, 10, 30).unwrap();
    let model = ModelConfig {
        d_frame: 8,
        d_feat: 6,
        d_utt: 4,
        frame_layers: 2,
        utt_layers: 2,
        num_frame_targets: 5,
        var_hidden: 8,
        seg_len: 10,
        mask_span: 3,
        mask_prob: 0.2,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch: 4,
        grad_accum: 2,
        steps_stage1_frame: 4,
        steps_stage1_utt: 4,
        steps_stage2: 20,
        utt_targets: UttTargets::Fixed(3),
        lr_var: LrSpec::constant(1e-3),
        ..TrainConfig::default()
    };
    (corpus, model, train)
}

/// State at the start of stage 2 plus its targets.
fn stage2_ready(seed: u64) -> (Corpus, TrainConfig, TrainState, Targets) {
    let (corpus, mcfg, tcfg) = tiny();
    let model = Model::new(&mcfg, corpus.feat_dim, seed).unwrap();
    let mut st = TrainState::new(model, tcfg.adam, seed, "h");
    let boot = bootstrap_targets(&corpus, mcfg.num_frame_targets, &tcfg, seed).unwrap();
    stage1_frame(&mut st, &corpus, &tcfg, &boot, &mut |_| Ok(())).unwrap();
    stage1_utt(&mut st, &corpus, &tcfg, &mut |_| Ok(())).unwrap();
    let (t, _) = make_targets(&corpus, &st.model, mcfg.num_frame_targets, &tcfg, seed).unwrap();
    prepare_stage2(&mut st, &tcfg, &t).unwrap();
    (corpus, tcfg, st, t)
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (corpus, tcfg, mut st, t) = stage2_ready(5);
    for _ in 0..5 {
        train_step(&mut st, &corpus, &tcfg, Some(&t)).unwrap();
    }
    let mut resumed = checkpoint_from_bytes(&checkpoint_bytes(&st)).unwrap();
    assert_eq!(resumed.step, 5);
    for _ in 0..10 {
        let a = train_step(&mut st, &corpus, &tcfg, Some(&t)).unwrap();
        let b = train_step(&mut resumed, &corpus, &tcfg, Some(&t)).unwrap();
        assert!((a.l_total - b.l_total).abs() <= 1e-6, "step {}: {} vs {}", a.step, a.l_total, b.l_total);
        assert!((a.l_mi - b.l_mi).abs() <= 1e-6);
        assert!((a.l_var_nll - b.l_var_nll).abs() <= 1e-6);
    }
}

#[test]
fn runs_are_bit_identical() {
    let run = || {
        let (corpus, tcfg, mut st, t) = stage2_ready(9);
        let mut lines = String::new();
        for _ in 0..4 {
            let l = train_step(&mut st, &corpus, &tcfg, Some(&t)).unwrap();
            lines.push_str(&serde_json::to_string(&l).unwrap());
            lines.push('\n');
        }
        (checkpoint_bytes(&st), lines)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn accumulated_step_equals_adam_on_mean_gradient() {
    let (corpus, mcfg, tcfg) = tiny();
    let g = tcfg.grad_accum;
    let model = Model::new(&mcfg, corpus.feat_dim, 2).unwrap();
    let boot = bootstrap_targets(&corpus, mcfg.num_frame_targets, &tcfg, 2).unwrap();
    let mut st = TrainState::new(model, tcfg.adam, 2, "h");
    // one step first so the reference also covers nonzero moments
    train_step(&mut st, &corpus, &tcfg, Some(&boot)).unwrap();
    let mut reference = st.clone();

    train_step(&mut st, &corpus, &tcfg, Some(&boot)).unwrap();

    // each micro-batch gradient on its own store, averaged by hand
    let step = reference.step;
    let per_micro: Vec<_> = (0..g)
        .map(|m| {
            let mut tape = Tape::new();
            let loss = micro_batch_loss(
                &mut tape,
                &reference.model,
                &corpus,
                &tcfg,
                Some(&boot),
                Stage::Stage1Frame,
                reference.seed,
                step * g as u64 + m as u64,
            )
            .unwrap();
            tape.backward(loss).unwrap();
            let mut s = reference.model.store.clone();
            s.zero_grad();
            tape.accumulate_param_grads(&mut s);
            s
        })
        .collect();
    let store = &mut reference.model.store;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).grad.numel();
        let mean: Vec<f64> = (0..n)
            .map(|k| per_micro.iter().map(|s| s.get(id).grad.data()[k]).sum::<f64>() / g as f64)
            .collect();
        store.get_mut(id).grad.data_mut().copy_from_slice(&mean);
    }
    let lr = stage_lrs(&tcfg, Stage::Stage1Frame, step)[0];
    reference.adam.step_group(store, ParamGroup::Frame, lr).unwrap();

    for ((_, a), (_, b)) in st.model.store.iter().zip(reference.model.store.iter()) {
        let diff = a.value.max_abs_diff(&b.value);
        assert!(diff <= 1e-12, "{}: {diff}", a.name);
    }
}

#[test]
fn extractor_is_frozen_in_stage2() {
    let (corpus, tcfg, mut st, t) = stage2_ready(4);
    let ids = st.model.extractor.params();
    let before: Vec<_> = ids.iter().map(|&id| st.model.store.value(id).clone()).collect();
    for _ in 0..5 {
        train_step(&mut st, &corpus, &tcfg, Some(&t)).unwrap();
    }
    for (id, b) in ids.iter().zip(&before) {
        assert_eq!(st.model.store.value(*id), b);
    }
}

#[test]
fn logged_total_is_sum_of_terms() {
    let (corpus, tcfg, mut st, t) = stage2_ready(6);
    for _ in 0..5 {
        let l = train_step(&mut st, &corpus, &tcfg, Some(&t)).unwrap();
        let sum = l.l_ce_g + l.l_pc_g + l.l_infonce + l.l_ce_h + tcfg.effective_lambda() * l.l_mi;
        assert!((sum - l.l_total).abs() <= 1e-6, "{sum} vs {}", l.l_total);
    }
}

#[test]
fn failed_step_leaves_state_untouched() {
    let (corpus, tcfg, mut st, t) = stage2_ready(7);
    let before = checkpoint_bytes(&st);
    let bad = TrainConfig {
        batch: corpus.len() + 1,
        ..tcfg
    };
    assert!(train_step(&mut st, &corpus, &bad, Some(&t)).is_err());
    assert_eq!(checkpoint_bytes(&st), before);
}

fn head_tail(v: &[f64]) -> (f64, f64) {
    let n = (v.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&v[..n]), mean(&v[v.len() - n..]))
}

#[test]
fn stage1_losses_decrease_on_default_corpus() {
    let synth = SynthConfig::default();
    let corpus = generate_corpus(&synth, 200, synth.mean_frames).unwrap();
    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig {
        steps_stage1_frame: 150,
        steps_stage1_utt: 150,
        grad_accum: 1,
        ..TrainConfig::default()
    };
    let model = Model::new(&mcfg, corpus.feat_dim, 0).unwrap();
    let mut st = TrainState::new(model, tcfg.adam, 0, "h");
    let boot = bootstrap_targets(&corpus, mcfg.num_frame_targets, &tcfg, 0).unwrap();

    let mut frame = Vec::new();
    stage1_frame(&mut st, &corpus, &tcfg, &boot, &mut |l| {
        frame.push(l.l_total);
        Ok(())
    })
    .unwrap();
    let (first, last) = head_tail(&frame);
    assert!(last < first, "frame {first} -> {last}");

    let mut utt = Vec::new();
    stage1_utt(&mut st, &corpus, &tcfg, &mut |l| {
        utt.push(l.l_infonce);
        Ok(())
    })
    .unwrap();
    let (first, last) = head_tail(&utt);
    assert!(last < first, "utt {first} -> {last}");

    // nearest pooled embedding shares the speaker more often than chance
    let emb: Vec<Vec<f64>> = corpus
        .utterances
        .iter()
        .map(|u| st.model.utt_layers(u).unwrap().1.data().to_vec())
        .collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut hits = 0;
    for i in 0..emb.len() {
        let j = (0..emb.len())
            .filter(|&j| j != i)
            .max_by(|&a, &b| cos(&emb[i], &emb[a]).total_cmp(&cos(&emb[i], &emb[b])))
            .unwrap();
        hits += usize::from(corpus.utterances[i].speaker_id == corpus.utterances[j].speaker_id);
    }
    let acc = hits as f64 / emb.len() as f64;
    assert!(acc > 2.0 / synth.num_speakers as f64, "retrieval {acc}");
}
