//! Feature extractor, frame-level encoder, utterance-level encoder and the
//! full parameter set of a dual-encoder model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::miclub::{Projections, VariationalNet};
use crate::nn::{bind, Bind, Linear, ResBlock};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::stream_rng;
use crate::synth::Utterance;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frame-encoder width `d`.
    pub d_frame: usize,
    /// Feature-extractor / utterance hidden width `d'`.
    pub d_feat: usize,
    /// Pooled utterance width `d^L`.
    pub d_utt: usize,
    /// `M`.
    pub frame_layers: usize,
    /// `L`, counting the pooling layer.
    pub utt_layers: usize,
    /// `N`: extractor blocks trained in stage 1, then frozen.
    pub frozen_blocks: usize,
    pub frontend_layers: usize,
    pub frame_kernel: usize,
    pub utt_kernel: usize,
    /// Frame target vocabulary `K`.
    pub num_frame_targets: usize,
    pub var_hidden: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub seg_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_frame: 64,
            d_feat: 64,
            d_utt: 32,
            frame_layers: 4,
            utt_layers: 4,
            frozen_blocks: 0,
            frontend_layers: 1,
            frame_kernel: 3,
            utt_kernel: 3,
            num_frame_targets: 64,
            var_hidden: 128,
            mask_prob: 0.065,
            mask_span: 10,
            seg_len: 50,
        }
    }
}

impl ModelConfig {
    /// Base-size dimensions (12-layer frame encoder, 6-layer utterance encoder).
    pub fn base_preset() -> Self {
        ModelConfig {
            d_frame: 768,
            d_feat: 1024,
            d_utt: 256,
            frame_layers: 12,
            utt_layers: 6,
            num_frame_targets: 2048,
            var_hidden: 2048,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_frame == 0 || self.d_feat == 0 || self.d_utt == 0 || self.var_hidden == 0 {
            return bad("model widths must be positive");
        }
        if self.frame_layers == 0 {
            return bad("frame_layers must be >= 1");
        }
        if self.utt_layers < 2 {
            return bad("utt_layers must be >= 2 (conv layers plus pooling)");
        }
        if !(1..=2).contains(&self.frontend_layers) {
            return bad("frontend_layers must be 1 or 2");
        }
        if self.frame_kernel.is_multiple_of(2) || self.utt_kernel.is_multiple_of(2) {
            return bad("kernels must be odd");
        }
        if self.num_frame_targets < 2 {
            return bad("num_frame_targets must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return bad("mask_prob must be in [0,1] and mask_span >= 1");
        }
        if self.seg_len == 0 {
            return bad("seg_len must be positive");
        }
        Ok(())
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            prob: self.mask_prob,
            span: self.mask_span,
        }
    }
}

/// Contiguous frame range `start..start + len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Probability that a frame starts a masked span.
    pub prob: f64,
    pub span: usize,
}

/// Span masking: each frame that can start a full span does so with
/// probability `prob`; returns the sorted union of covered indices.
pub fn sample_mask<R: Rng>(t_len: usize, spec: &MaskSpec, rng: &mut R) -> Result<Vec<usize>> {
    if t_len < spec.span {
        return Err(Error::Input(format!(
            "sequence of {} frames shorter than mask span {}",
            t_len, spec.span
        )));
    }
    let mut covered = vec![false; t_len];
    for start in 0..=t_len - spec.span {
        if rng.gen::<f64>() < spec.prob {
            covered[start..start + spec.span].fill(true);
        }
    }
    Ok((0..t_len).filter(|&t| covered[t]).collect())
}

/// Two non-overlapping spans of `seg_len`, uniform over all placements and
/// both orders.
pub fn sample_segment_pair<R: Rng>(t_len: usize, seg_len: usize, rng: &mut R) -> Result<(Span, Span)> {
    if seg_len == 0 || t_len < 2 * seg_len {
        return Err(Error::Input(format!(
            "utterance of {} frames cannot hold two segments of {}",
            t_len, seg_len
        )));
    }
    let slack = t_len - 2 * seg_len;
    // uniform over (gap_before, gap_between) with gap_before + gap_between <= slack
    let (g0, g1) = loop {
        let g0 = rng.gen_range(0..=slack);
        let g1 = rng.gen_range(0..=slack);
        if g0 + g1 <= slack {
            break (g0, g1);
        }
    };
    let first = Span {
        start: g0,
        len: seg_len,
    };
    let second = Span {
        start: g0 + seg_len + g1,
        len: seg_len,
    };
    Ok(if rng.gen::<bool>() {
        (first, second)
    } else {
        (second, first)
    })
}

/// Frontend plus the first `N` blocks; frozen after stage-1 frame training.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub frontend: Vec<Linear>,
    pub blocks: Vec<ResBlock>,
}

impl FeatureExtractor {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.frontend.iter().flat_map(|l| l.params()).collect();
        p.extend(self.blocks.iter().flat_map(|b| b.params()));
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEncoder {
    pub input: Linear,
    pub blocks: Vec<ResBlock>,
    pub head: Linear,
    pub mask_emb: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UttEncoder {
    pub blocks: Vec<ResBlock>,
    pub attn: Linear,
    pub attn_v: ParamId,
    pub out: Linear,
    pub head: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// `y^1 .. y^M`, each `T x d`.
    pub hidden: Vec<Var>,
    /// `T x K` pre-softmax predictions.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct UttOutput {
    /// `z^1 .. z^{L-1}`, each `T x d'`.
    pub hidden: Vec<Var>,
    /// Attention-weighted mean of the last conv layer, `1 x d'`.
    pub attn_pooled: Var,
    /// `z^L`, `1 x d^L`.
    pub pooled: Var,
    /// `1 x Q`, present once the utterance head exists.
    pub logits: Option<Var>,
}

/// Every parameter of the dual-encoder system in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub d_in: usize,
    pub seed: u64,
    pub store: ParamStore,
    pub extractor: FeatureExtractor,
    pub frame: FrameEncoder,
    pub utt: UttEncoder,
    pub var_net: VariationalNet,
    pub proj: Projections,
}

impl Model {
    pub fn new(cfg: &ModelConfig, d_in: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if d_in == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let mut store = ParamStore::new();
        let (dp, d) = (cfg.d_feat, cfg.d_frame);
        let fg = ParamGroup::Frame;
        let ug = ParamGroup::Utterance;

        let mut rng = stream_rng(seed, "init-extractor", 0);
        let mut frontend = vec![Linear::new(&mut store, "fe.frontend0", fg, d_in, dp, &mut rng)?];
        if cfg.frontend_layers == 2 {
            frontend.push(Linear::new(&mut store, "fe.frontend1", fg, dp, dp, &mut rng)?);
        }
        let blocks = (0..cfg.frozen_blocks)
            .map(|i| ResBlock::new(&mut store, &format!("fe.block{i}"), fg, dp, cfg.frame_kernel, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let extractor = FeatureExtractor { frontend, blocks };

        let mut rng = stream_rng(seed, "init-frame", 0);
        let input = Linear::new(&mut store, "frame.input", fg, dp, d, &mut rng)?;
        let blocks = (0..cfg.frame_layers)
            .map(|i| ResBlock::new(&mut store, &format!("frame.block{i}"), fg, d, cfg.frame_kernel, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut store, "frame.head", fg, d, cfg.num_frame_targets, &mut rng)?;
        let mask_emb = store.add_normal("frame.mask_emb", fg, &[dp], 1.0 / (dp as f64).sqrt(), &mut rng)?;
        let frame = FrameEncoder {
            input,
            blocks,
            head,
            mask_emb,
        };

        let mut rng = stream_rng(seed, "init-utt", 0);
        let blocks = (0..cfg.utt_layers - 1)
            .map(|i| ResBlock::new(&mut store, &format!("utt.block{i}"), ug, dp, cfg.utt_kernel, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let attn = Linear::new(&mut store, "utt.attn", ug, dp, dp, &mut rng)?;
        // zero scoring vector: attention starts uniform
        let attn_v = store.add_zeros("utt.attn_v", ug, &[dp, 1])?;
        let out = Linear::new(&mut store, "utt.out", ug, dp, cfg.d_utt, &mut rng)?;
        let utt = UttEncoder {
            blocks,
            attn,
            attn_v,
            out,
            head: None,
        };

        let mut rng = stream_rng(seed, "init-mi", 0);
        let var_net = VariationalNet::new(&mut store, cfg.d_utt, cfg.var_hidden, d, &mut rng)?;
        let proj = Projections::new(&mut store, cfg.utt_layers - 1, dp, cfg.d_utt, &mut rng)?;

        Ok(Model {
            cfg: cfg.clone(),
            d_in,
            seed,
            store,
            extractor,
            frame,
            utt,
            var_net,
            proj,
        })
    }

    /// Creates the `d^L x Q` utterance head (once `Q` is known).
    pub fn ensure_utt_head(&mut self, q: usize) -> Result<()> {
        if q < 2 {
            return Err(Error::Config(format!("utterance target count {q} < 2")));
        }
        match &self.utt.head {
            Some(h) if h.d_out == q => Ok(()),
            Some(h) => Err(Error::Config(format!(
                "utterance head already has {} outputs, asked for {}",
                h.d_out, q
            ))),
            None => {
                let mut rng = stream_rng(self.seed, "init-utt-head", q as u64);
                let h = Linear::new(
                    &mut self.store,
                    "utt.head",
                    ParamGroup::Utterance,
                    self.cfg.d_utt,
                    q,
                    &mut rng,
                )?;
                self.utt.head = Some(h);
                Ok(())
            }
        }
    }

    pub fn num_utt_targets(&self) -> Option<usize> {
        self.utt.head.as_ref().map(|h| h.d_out)
    }

    pub fn freeze_extractor(&mut self) {
        for id in self.extractor.params() {
            self.store.set_frozen(id, true);
        }
    }

    pub fn extractor_frozen(&self) -> bool {
        self.extractor
            .params()
            .iter()
            .all(|&id| self.store.get(id).frozen)
    }

    /// `X'`. Frozen parameters bind as constants, so no gradient is recorded.
    pub fn feature_extract(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).rows() == 0 || tape.value(x).numel() == 0 {
            return Err(Error::Input("empty utterance".into()));
        }
        let store = &self.store;
        let mut h = x;
        for (i, lin) in self.extractor.frontend.iter().enumerate() {
            h = lin.forward(tape, store, h, Bind::Trainable)?;
            if i + 1 < self.extractor.frontend.len() {
                h = tape.relu(h);
            }
        }
        for blk in &self.extractor.blocks {
            h = blk.forward(tape, store, h, Bind::Trainable)?;
        }
        Ok(h)
    }

    /// Replaces the rows in `masked` by the learned mask embedding.
    pub fn apply_mask(&self, tape: &mut Tape, x_feat: Var, masked: &[usize]) -> Result<Var> {
        if masked.is_empty() {
            return Ok(x_feat);
        }
        let (t_len, dp) = (tape.value(x_feat).rows(), tape.value(x_feat).cols());
        let mut keep = vec![1.0; t_len * dp];
        let mut put = vec![0.0; t_len * dp];
        for &t in masked {
            if t >= t_len {
                return Err(Error::Input(format!("mask index {t} beyond {t_len} frames")));
            }
            keep[t * dp..(t + 1) * dp].fill(0.0);
            put[t * dp..(t + 1) * dp].fill(1.0);
        }
        let keep = tape.constant(Tensor::new(vec![t_len, dp], keep)?);
        let put = tape.constant(Tensor::new(vec![t_len, dp], put)?);
        let emb = tape.param(&self.store, self.frame.mask_emb);
        let emb_rows = tape.broadcast_rows(emb, t_len)?;
        let a = tape.mul(x_feat, keep)?;
        let b = tape.mul(emb_rows, put)?;
        tape.add(a, b)
    }

    pub fn frame_forward(&self, tape: &mut Tape, x: Var, mode: Bind) -> Result<FrameOutput> {
        let store = &self.store;
        let mut h = self.frame.input.forward(tape, store, x, mode)?;
        let mut hidden = Vec::with_capacity(self.frame.blocks.len());
        for blk in &self.frame.blocks {
            h = blk.forward(tape, store, h, mode)?;
            hidden.push(h);
        }
        let logits = self.frame.head.forward(tape, store, h, mode)?;
        Ok(FrameOutput { hidden, logits })
    }

    /// Shortest input the utterance conv stack accepts.
    pub fn utt_receptive_field(&self) -> usize {
        1 + self
            .utt
            .blocks
            .iter()
            .map(|b| 2 * b.conv.reach())
            .sum::<usize>()
    }

    pub fn utt_forward(&self, tape: &mut Tape, x: Var, mode: Bind) -> Result<UttOutput> {
        let t_len = tape.value(x).rows();
        let rf = self.utt_receptive_field();
        if t_len < rf {
            return Err(Error::Input(format!(
                "segment of {t_len} frames shorter than receptive field {rf}"
            )));
        }
        let store = &self.store;
        let mut h = x;
        let mut hidden = Vec::with_capacity(self.utt.blocks.len());
        for blk in &self.utt.blocks {
            h = blk.forward(tape, store, h, mode)?;
            hidden.push(h);
        }
        let a = self.utt.attn.forward(tape, store, h, mode)?;
        let a = tape.tanh(a);
        let v = bind(tape, store, self.utt.attn_v, mode);
        let scores = tape.matmul(a, v)?;
        let alpha = tape.softmax(scores, 0)?;
        let alpha_t = tape.transpose(alpha)?;
        let attn_pooled = tape.matmul(alpha_t, h)?;
        let pooled = self.utt.out.forward(tape, store, attn_pooled, mode)?;
        let logits = match &self.utt.head {
            Some(head) => Some(head.forward(tape, store, pooled, mode)?),
            None => None,
        };
        Ok(UttOutput {
            hidden,
            attn_pooled,
            pooled,
            logits,
        })
    }

    /// Gradient-free `X'` for one utterance.
    pub fn extract_features(&self, utt: &Utterance) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(utt.frames_tensor());
        let h = self.feature_extract(&mut tape, x)?;
        Ok(tape.value(h).clone())
    }

    /// Gradient-free frame-encoder layers `y^1..y^M` of an unmasked utterance.
    pub fn frame_layers(&self, utt: &Utterance) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(utt.frames_tensor());
        let h = self.feature_extract(&mut tape, x)?;
        let out = self.frame_forward(&mut tape, h, Bind::Detached)?;
        Ok(out.hidden.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Gradient-free utterance-encoder layers `z^1..z^{L-1}` and pooled `z^L`
    /// over the whole utterance.
    pub fn utt_layers(&self, utt: &Utterance) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(utt.frames_tensor());
        let h = self.feature_extract(&mut tape, x)?;
        let out = self.utt_forward(&mut tape, h, Bind::Detached)?;
        Ok((
            out.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            tape.value(out.pooled).clone(),
        ))
    }

    /// Ids of every trainable parameter the frame branch owns.
    pub fn frame_params(&self) -> Vec<ParamId> {
        self.store.ids_in_group(ParamGroup::Frame)
    }
}
