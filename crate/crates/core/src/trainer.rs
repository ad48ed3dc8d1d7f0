//! Two-stage training: independent pre-training of both branches, pseudo-target
//! generation, then joint training with the MI penalty.
//!
//! Every random draw comes from a stream keyed by `(seed, name, index)` where
//! the index is derived from the step, so a resumed run replays the exact
//! batches, masks and segments of an uninterrupted one.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::clustering::{kmeans_assign, kmeans_fit, knee_point, Knee};
use crate::config::{TrainConfig, UttTargets};
use crate::encoders::{sample_mask, sample_segment_pair, Model};
use crate::error::{Error, Result};
use crate::losses::{frame_ce, info_nce, pseudo_con, utt_ce};
use crate::miclub::{aggregate, club_loss, variational_nll, AggregatedPair};
use crate::nn::Bind;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamGroup;
use crate::rng::stream_rng;
use crate::synth::Corpus;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1Frame,
    Stage1Utt,
    Stage2,
}

impl Stage {
    pub fn as_u8(self) -> u8 {
        match self {
            Stage::Stage1Frame => 0,
            Stage::Stage1Utt => 1,
            Stage::Stage2 => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Stage::Stage1Frame),
            1 => Some(Stage::Stage1Utt),
            2 => Some(Stage::Stage2),
            _ => None,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Stage::Stage1Frame => "s1f",
            Stage::Stage1Utt => "s1u",
            Stage::Stage2 => "s2",
        }
    }
}

/// Everything needed to continue training: parameters, optimizer moments and
/// the position within the current stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub stage: Stage,
    /// Steps completed in `stage`.
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

impl TrainState {
    pub fn new(model: Model, adam_cfg: AdamConfig, seed: u64, config_hash: &str) -> Self {
        let adam = Adam::new(&model.store, adam_cfg);
        TrainState {
            model,
            adam,
            stage: Stage::Stage1Frame,
            step: 0,
            seed,
            config_hash: config_hash.to_string(),
        }
    }

    /// Moves to `stage` with fresh optimizer state; no-op if already there.
    pub fn enter_stage(&mut self, stage: Stage, adam_cfg: AdamConfig) {
        if self.stage != stage {
            self.stage = stage;
            self.step = 0;
            self.adam = Adam::new(&self.model.store, adam_cfg);
        }
    }
}

/// Frame targets `nu` (one label per frame of every utterance) and utterance
/// targets `mu` (empty for bootstrap targets).
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub k: usize,
    pub q: usize,
    pub frame: Vec<Vec<u32>>,
    pub utt: Vec<u32>,
}

impl Targets {
    pub fn check_against(&self, corpus: &Corpus) -> Result<()> {
        if self.frame.len() != corpus.len() {
            return Err(Error::Alignment(format!(
                "{} frame-target rows for {} utterances",
                self.frame.len(),
                corpus.len()
            )));
        }
        for (i, (f, u)) in self.frame.iter().zip(&corpus.utterances).enumerate() {
            if f.len() != u.num_frames() {
                return Err(Error::Alignment(format!(
                    "utterance {i}: {} targets for {} frames",
                    f.len(),
                    u.num_frames()
                )));
            }
        }
        if !self.utt.is_empty() && self.utt.len() != corpus.len() {
            return Err(Error::Alignment(format!(
                "{} utterance targets for {} utterances",
                self.utt.len(),
                corpus.len()
            )));
        }
        Ok(())
    }
}

/// Inertia sweep behind an automatic choice of `Q`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QSweep {
    pub candidates: Vec<usize>,
    pub inertia: Vec<f64>,
    pub knee: Knee,
}

/// One JSON-lines record of the loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_ce_g: f64,
    pub l_pc_g: f64,
    pub l_infonce: f64,
    pub l_ce_h: f64,
    pub l_mi: f64,
    pub l_var_nll: f64,
    pub l_total: f64,
    pub lr_frame: f64,
    pub lr_utt: f64,
    pub lr_var: f64,
}

fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

/// Subsample of at most `max_points` frame rows, drawn without replacement.
fn sample_rows(rows_per_utt: &[Tensor], max_points: usize, seed: u64, stream: &str) -> Result<Tensor> {
    let total: usize = rows_per_utt.iter().map(|t| t.rows()).sum();
    let mut picks = if total > max_points {
        sample(&mut stream_rng(seed, stream, 0), total, max_points).into_vec()
    } else {
        (0..total).collect()
    };
    picks.sort_unstable();
    let mut out = Vec::with_capacity(picks.len());
    let (mut u, mut base) = (0, 0);
    for p in picks {
        while p >= base + rows_per_utt[u].rows() {
            base += rows_per_utt[u].rows();
            u += 1;
        }
        out.push(rows_per_utt[u].row(p - base).to_vec());
    }
    to_tensor(&out)
}

fn cluster_frames(
    rows_per_utt: &[Tensor],
    k: usize,
    cfg: &TrainConfig,
    seed: u64,
    stream: &str,
) -> Result<Vec<Vec<u32>>> {
    let fit_rows = sample_rows(rows_per_utt, cfg.kmeans_max_points, seed, stream)?;
    let km = kmeans_fit(&fit_rows, k, cfg.kmeans_iters, seed)?;
    Ok(rows_per_utt
        .iter()
        .map(|t| kmeans_assign(&km, t).into_iter().map(|c| c as u32).collect())
        .collect())
}

/// First-round frame targets: k-means with `k` clusters on the raw frames.
pub fn bootstrap_targets(corpus: &Corpus, k: usize, cfg: &TrainConfig, seed: u64) -> Result<Targets> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let raw: Vec<Tensor> = corpus.utterances.iter().map(|u| u.frames_tensor()).collect();
    let frame = cluster_frames(&raw, k, cfg, seed, "bootstrap-sample")?;
    Ok(Targets {
        k,
        q: 0,
        frame,
        utt: Vec::new(),
    })
}

/// 1-based frame layer used for frame targets.
pub fn target_layer(model: &Model, cfg: &TrainConfig) -> Result<usize> {
    let m = model.cfg.frame_layers;
    let l = cfg.layer_for_targets.unwrap_or((m / 2).max(1));
    if l == 0 || l > m {
        return Err(Error::Config(format!("layer_for_targets {l} outside 1..={m}")));
    }
    Ok(l)
}

/// Frame layer `layer` (1-based) and pooled `z^L` of a whole utterance.
fn utterance_reps(model: &Model, frames: Tensor, layer: usize) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.constant(frames);
    let xf = model.feature_extract(&mut tape, x)?;
    let fo = model.frame_forward(&mut tape, xf, Bind::Detached)?;
    let uo = model.utt_forward(&mut tape, xf, Bind::Detached)?;
    Ok((
        tape.value(fo.hidden[layer - 1]).clone(),
        tape.value(uo.pooled).data().to_vec(),
    ))
}

/// Pseudo-targets from the stage-1 encoders: `nu` by k-means(`k`) on a frame
/// layer, `mu` by k-means(`Q`) on pooled utterance vectors, with `Q` fixed or
/// chosen at the knee of an inertia sweep.
pub fn make_targets(
    corpus: &Corpus,
    model: &Model,
    k: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Targets, Option<QSweep>)> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let layer = target_layer(model, cfg)?;
    let mut frame_rows = Vec::with_capacity(corpus.len());
    let mut pooled = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        let (f, p) = utterance_reps(model, u.frames_tensor(), layer)?;
        frame_rows.push(f);
        pooled.push(p);
    }
    let frame = cluster_frames(&frame_rows, k, cfg, seed, "target-sample")?;
    let pooled = to_tensor(&pooled)?;
    let n = pooled.rows();

    let (q, sweep) = match cfg.utt_targets {
        UttTargets::Fixed(q) => (q, None),
        UttTargets::Auto => {
            let candidates: Vec<usize> = cfg.q_sweep.iter().copied().filter(|&q| q <= n).collect();
            if candidates.len() < 4 {
                return Err(Error::Config(format!(
                    "only {} sweep candidates fit {n} utterances",
                    candidates.len()
                )));
            }
            let sweep = q_sweep(&pooled, &candidates, cfg.kmeans_iters, seed)?;
            (sweep.candidates[sweep.knee.index], Some(sweep))
        }
    };
    let km = kmeans_fit(&pooled, q, cfg.kmeans_iters, seed)?;
    let utt = kmeans_assign(&km, &pooled).into_iter().map(|c| c as u32).collect();
    Ok((Targets { k, q, frame, utt }, sweep))
}

/// k-means inertia for each candidate cluster count and the knee of the
/// curve. The curve is smoothed to its running minimum first, since
/// independent k-means++ restarts need not be monotone in the count.
pub fn q_sweep(points: &Tensor, candidates: &[usize], iters: usize, seed: u64) -> Result<QSweep> {
    let mut inertia = candidates
        .iter()
        .map(|&q| Ok(kmeans_fit(points, q, iters, seed)?.inertia()))
        .collect::<Result<Vec<f64>>>()?;
    for i in 1..inertia.len() {
        inertia[i] = inertia[i].min(inertia[i - 1]);
    }
    let xs: Vec<f64> = candidates.iter().map(|&q| q as f64).collect();
    let knee = knee_point(&xs, &inertia)?;
    Ok(QSweep {
        candidates: candidates.to_vec(),
        inertia,
        knee,
    })
}

/// Learning rates of the frame, utterance, variational and projection groups
/// at `step` of `stage`.
pub fn stage_lrs(cfg: &TrainConfig, stage: Stage, step: u64) -> [f64; 4] {
    match stage {
        Stage::Stage1Frame => [
            cfg.lr_stage1_frame.schedule(cfg.steps_stage1_frame).lr_at(step),
            0.0,
            0.0,
            0.0,
        ],
        Stage::Stage1Utt => [
            0.0,
            cfg.lr_stage1_utt.schedule(cfg.steps_stage1_utt).lr_at(step),
            0.0,
            0.0,
        ],
        Stage::Stage2 => {
            let n = cfg.steps_stage2;
            [
                cfg.lr_frame.schedule(n).lr_at(step),
                cfg.lr_utt.schedule(n).lr_at(step),
                cfg.lr_var.schedule(n).lr_at(step),
                cfg.proj_lr().schedule(n).lr_at(step),
            ]
        }
    }
}

/// Loss terms of one micro-batch, still attached to its tape.
struct Micro {
    tape: Tape,
    terms: Terms,
}

struct Terms {
    ce_g: Option<Var>,
    pc_g: Option<Var>,
    infonce: Option<Var>,
    ce_h: Option<Var>,
    pairs: Vec<AggregatedPair>,
}

fn value(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item())
}

#[allow(clippy::too_many_arguments)]
fn forward_terms(
    tape: &mut Tape,
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    targets: Option<&Targets>,
    stage: Stage,
    seed: u64,
    micro_index: u64,
) -> Result<Terms> {
    let b = cfg.batch;
    let tag = stage.tag();
    let batch = sample(
        &mut stream_rng(seed, &format!("batch-{tag}"), micro_index),
        corpus.len(),
        b,
    )
    .into_vec();
    let frame_branch = stage != Stage::Stage1Utt;
    let utt_branch = stage != Stage::Stage1Frame;
    let spec = model.cfg.mask_spec();
    let seg_len = model.cfg.seg_len;

    let mut logits = Vec::new();
    let mut last_hidden = Vec::new();
    let mut nu = Vec::new();
    let mut masked = Vec::new();
    let mut pooled = Vec::new();
    let mut utt_logits = Vec::new();
    let mut mu = Vec::new();
    let mut pairs = Vec::new();

    for (i, &u) in batch.iter().enumerate() {
        let utt = &corpus.utterances[u];
        let t_len = utt.num_frames();
        let item = micro_index * b as u64 + i as u64;
        let x = tape.constant(utt.frames_tensor());
        let xf = model.feature_extract(tape, x)?;

        let mut frame_hidden = Vec::new();
        if frame_branch {
            let tg = targets.ok_or_else(|| Error::Contract("frame branch needs targets".into()))?;
            let mut m = sample_mask(t_len, &spec, &mut stream_rng(seed, &format!("mask-{tag}"), item))?;
            if i == 0 && m.is_empty() {
                // guarantee at least one masked span per micro-batch
                m = (0..spec.span).collect();
            }
            let xm = model.apply_mask(tape, xf, &m)?;
            let out = model.frame_forward(tape, xm, Bind::Trainable)?;
            masked.extend(m.iter().map(|&t| nu.len() + t));
            nu.extend(tg.frame[u].iter().map(|&c| c as usize));
            logits.push(out.logits);
            last_hidden.push(*out.hidden.last().expect("frame layers"));
            frame_hidden = out.hidden;
        }
        if utt_branch {
            let (s1, s2) =
                sample_segment_pair(t_len, seg_len, &mut stream_rng(seed, &format!("segments-{tag}"), item))?;
            for (j, span) in [s1, s2].into_iter().enumerate() {
                let seg = tape.slice_rows(xf, span.start, span.len)?;
                let out = model.utt_forward(tape, seg, Bind::Trainable)?;
                pooled.push(out.pooled);
                if stage == Stage::Stage2 {
                    let tg = targets.ok_or_else(|| Error::Contract("stage 2 needs targets".into()))?;
                    utt_logits.push(
                        out.logits
                            .ok_or_else(|| Error::Contract("utterance head missing".into()))?,
                    );
                    if j == 0 {
                        mu.push(tg.utt[u] as usize);
                        pairs.push(aggregate(
                            tape,
                            &model.store,
                            &model.proj,
                            &frame_hidden,
                            &out.hidden,
                            out.pooled,
                            span,
                            cfg.mi_mode,
                        )?);
                    }
                }
            }
        }
    }

    let (mut ce_g, mut pc_g, mut infonce, mut ce_h) = (None, None, None, None);
    if frame_branch {
        let lg = tape.concat(&logits, 0)?;
        let y = tape.concat(&last_hidden, 0)?;
        ce_g = Some(frame_ce(tape, lg, &nu, &masked)?);
        pc_g = Some(pseudo_con(tape, y, &nu, &masked, &cfg.pseudo_con)?.loss);
    }
    if utt_branch {
        let p = tape.concat(&pooled, 0)?;
        infonce = Some(info_nce(tape, p, cfg.tau_utt)?);
        if stage == Stage::Stage2 {
            let lg = tape.concat(&utt_logits, 0)?;
            ce_h = Some(utt_ce(tape, lg, &mu)?);
        }
    }
    Ok(Terms {
        ce_g,
        pc_g,
        infonce,
        ce_h,
        pairs,
    })
}

fn sum_terms(tape: &mut Tape, terms: &[Option<Var>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &t in terms.iter().flatten() {
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("no loss terms".into()))
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} = {v}")))
    }
}

fn inner_step(state: &mut TrainState, corpus: &Corpus, cfg: &TrainConfig, targets: Option<&Targets>) -> Result<StepLog> {
    let stage = state.stage;
    let step = state.step;
    let g = cfg.grad_accum;
    let inv_g = 1.0 / g as f64;
    let lambda = cfg.effective_lambda();
    let lrs = stage_lrs(cfg, stage, step);

    let mut micros = (0..g)
        .map(|m| {
            let mut tape = Tape::new();
            let terms = forward_terms(
                &mut tape,
                &state.model,
                corpus,
                cfg,
                targets,
                stage,
                state.seed,
                step * g as u64 + m as u64,
            )?;
            Ok(Micro { tape, terms })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut log = StepLog {
        step,
        lr_frame: lrs[0],
        lr_utt: lrs[1],
        lr_var: lrs[2],
        ..StepLog::default()
    };
    for mb in &micros {
        let (tape, t) = (&mb.tape, &mb.terms);
        log.l_ce_g += value(tape, t.ce_g) * inv_g;
        log.l_pc_g += value(tape, t.pc_g) * inv_g;
        log.l_infonce += value(tape, t.infonce) * inv_g;
        log.l_ce_h += value(tape, t.ce_h) * inv_g;
    }

    let store = &mut state.model.store;
    if stage == Stage::Stage2 {
        // phi first, on detached aggregated pairs
        store.zero_grad();
        for mb in &micros {
            let mut t2 = Tape::new();
            let pairs: Vec<AggregatedPair> = mb
                .terms
                .pairs
                .iter()
                .map(|p| AggregatedPair {
                    ybar: t2.constant(mb.tape.value(p.ybar).clone()),
                    zbar: t2.constant(mb.tape.value(p.zbar).clone()),
                })
                .collect();
            let nll = variational_nll(&mut t2, &state.model.var_net, store, &pairs, Bind::Trainable)?;
            log.l_var_nll += t2.value(nll).item() * inv_g;
            let scaled = t2.scale(nll, inv_g);
            t2.backward(scaled)?;
            t2.accumulate_param_grads(store);
        }
        check_finite("l_var_nll", log.l_var_nll)?;
        state.adam.step_group(store, ParamGroup::Variational, lrs[2])?;
    }

    store.zero_grad();
    for mb in &mut micros {
        let (tape, t) = (&mut mb.tape, &mb.terms);
        let mut total = sum_terms(tape, &[t.ce_g, t.pc_g, t.infonce, t.ce_h])?;
        if stage == Stage::Stage2 {
            let club = club_loss(tape, &state.model.var_net, store, &t.pairs, cfg.mi_reduction)?;
            log.l_mi += tape.value(club).item() * inv_g;
            if lambda > 0.0 {
                let weighted = tape.scale(club, lambda);
                total = tape.add(total, weighted)?;
            }
        }
        log.l_total += tape.value(total).item() * inv_g;
        let scaled = tape.scale(total, inv_g);
        tape.backward(scaled)?;
        tape.accumulate_param_grads(store);
    }
    for (name, v) in [
        ("l_ce_g", log.l_ce_g),
        ("l_pc_g", log.l_pc_g),
        ("l_infonce", log.l_infonce),
        ("l_ce_h", log.l_ce_h),
        ("l_mi", log.l_mi),
        ("l_total", log.l_total),
    ] {
        check_finite(name, v)?;
    }
    match stage {
        Stage::Stage1Frame => state.adam.step_group(store, ParamGroup::Frame, lrs[0])?,
        Stage::Stage1Utt => state.adam.step_group(store, ParamGroup::Utterance, lrs[1])?,
        Stage::Stage2 => {
            state.adam.step_group(store, ParamGroup::Frame, lrs[0])?;
            state.adam.step_group(store, ParamGroup::Utterance, lrs[1])?;
            state.adam.step_group(store, ParamGroup::Projection, lrs[3])?;
        }
    }
    store.zero_grad();
    state.step += 1;
    Ok(log)
}

/// The objective of one micro-batch of `stage` on `tape`, with `phi` detached:
/// the sum of the active branch losses plus `lambda * L_MI` in stage 2.
#[allow(clippy::too_many_arguments)]
pub fn micro_batch_loss(
    tape: &mut Tape,
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    targets: Option<&Targets>,
    stage: Stage,
    seed: u64,
    micro_index: u64,
) -> Result<Var> {
    let t = forward_terms(tape, model, corpus, cfg, targets, stage, seed, micro_index)?;
    let mut total = sum_terms(tape, &[t.ce_g, t.pc_g, t.infonce, t.ce_h])?;
    let lambda = cfg.effective_lambda();
    if stage == Stage::Stage2 && lambda > 0.0 {
        let club = club_loss(tape, &model.var_net, &model.store, &t.pairs, cfg.mi_reduction)?;
        let weighted = tape.scale(club, lambda);
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

/// One optimizer step of the current stage. On error the state is left
/// exactly as it was before the call.
pub fn train_step(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    targets: Option<&Targets>,
) -> Result<StepLog> {
    if corpus.len() < cfg.batch {
        return Err(Error::Config(format!(
            "batch {} larger than corpus of {}",
            cfg.batch,
            corpus.len()
        )));
    }
    let store_before = state.model.store.clone();
    let adam_before = state.adam.clone();
    let out = inner_step(state, corpus, cfg, targets);
    if out.is_err() {
        state.model.store = store_before;
        state.adam = adam_before;
    }
    out
}

/// Runs the current stage until `until` steps are complete, reporting each
/// step to `on_step`.
pub fn run_until(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    targets: Option<&Targets>,
    until: u64,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if let Some(t) = targets {
        t.check_against(corpus)?;
    }
    while state.step < until {
        let log = train_step(state, corpus, cfg, targets)?;
        on_step(&log)?;
    }
    Ok(())
}

/// Stage 1, frame branch: masked prediction plus pseudo-con against
/// bootstrap targets; the feature extractor trains with it.
pub fn stage1_frame(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    bootstrap: &Targets,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    state.enter_stage(Stage::Stage1Frame, cfg.adam);
    run_until(state, corpus, cfg, Some(bootstrap), cfg.steps_stage1_frame, on_step)
}

/// Stage 1, utterance branch: InfoNCE only, on top of the frozen extractor.
pub fn stage1_utt(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    state.enter_stage(Stage::Stage1Utt, cfg.adam);
    state.model.freeze_extractor();
    run_until(state, corpus, cfg, None, cfg.steps_stage1_utt, on_step)
}

/// Stage 2: both branches with their full losses plus `lambda * L_MI`.
pub fn stage2_joint(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    targets: &Targets,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    prepare_stage2(state, cfg, targets)?;
    run_until(state, corpus, cfg, Some(targets), cfg.steps_stage2, on_step)
}

/// Enters stage 2: freezes the extractor and creates the utterance head.
pub fn prepare_stage2(state: &mut TrainState, cfg: &TrainConfig, targets: &Targets) -> Result<()> {
    if targets.utt.is_empty() {
        return Err(Error::Contract("stage 2 needs utterance targets".into()));
    }
    if targets.k != state.model.cfg.num_frame_targets {
        return Err(Error::Config(format!(
            "targets have K = {}, model predicts {}",
            targets.k, state.model.cfg.num_frame_targets
        )));
    }
    state.model.freeze_extractor();
    state.model.ensure_utt_head(targets.q)?;
    state.enter_stage(Stage::Stage2, cfg.adam);
    Ok(())
}
