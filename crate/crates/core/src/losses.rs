//! Frame-branch and utterance-branch training losses.
//!
//! All losses are built from tape primitives so they differentiate exactly.
//! Frame losses take per-frame logits / hidden vectors concatenated over the
//! batch; utterance losses take rows ordered `(i, j) -> 2 * i + j` for
//! utterance `i` and view `j in {0, 1}`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which frames enter the pseudo-con denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcDenominator {
    /// Only frames with a different target (as printed).
    Negatives,
    /// Every frame except the anchor (supervised-contrastive form).
    AllButAnchor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConConfig {
    pub tau: f64,
    pub denominator: PcDenominator,
    /// `false` selects the printed form without the log around the ratio.
    pub use_log: bool,
    /// L2-normalize hidden vectors before the dot products.
    pub normalize: bool,
}

impl Default for PseudoConConfig {
    fn default() -> Self {
        PseudoConConfig {
            tau: 0.1,
            denominator: PcDenominator::Negatives,
            use_log: true,
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PseudoConOutput {
    pub loss: Var,
    pub valid_anchors: usize,
    /// Anchors with an empty positive or negative set; they contribute 0.
    pub skipped_anchors: usize,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature {tau} must be > 0")))
    }
}

/// Mean over masked frames of `-log softmax(logits_t)[nu_t]`.
pub fn frame_ce(tape: &mut Tape, logits: Var, nu: &[usize], masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::Loss("frame_ce: empty mask set".into()));
    }
    if nu.len() != tape.value(logits).rows() {
        return Err(Error::Loss(format!(
            "frame_ce: {} targets for {} frames",
            nu.len(),
            tape.value(logits).rows()
        )));
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let rows = tape.gather_rows(lsm, masked)?;
    let tgt: Vec<usize> = masked.iter().map(|&t| nu[t]).collect();
    let picked = tape.pick_per_row(rows, &tgt)?;
    let m = tape.mean_all(picked);
    Ok(tape.neg(m))
}

/// Pseudo-con loss over batch-concatenated final hidden vectors `y` (N x d).
///
/// Anchors are the masked frames; positives and negatives range over every
/// frame in the batch (the anchor itself excluded).
pub fn pseudo_con(
    tape: &mut Tape,
    y: Var,
    nu: &[usize],
    anchors: &[usize],
    cfg: &PseudoConConfig,
) -> Result<PseudoConOutput> {
    check_tau(cfg.tau)?;
    let n = tape.value(y).rows();
    if nu.len() != n {
        return Err(Error::Loss(format!(
            "pseudo_con: {} targets for {} frames",
            nu.len(),
            n
        )));
    }
    let mut class_count = std::collections::HashMap::new();
    for &c in nu {
        *class_count.entry(c).or_insert(0usize) += 1;
    }
    let valid: Vec<usize> = anchors
        .iter()
        .copied()
        .filter(|&t| {
            let same = class_count[&nu[t]];
            same >= 2 && same < n
        })
        .collect();
    let skipped = anchors.len() - valid.len();
    if valid.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(PseudoConOutput {
            loss: zero,
            valid_anchors: 0,
            skipped_anchors: skipped,
        });
    }

    let emb = if cfg.normalize {
        tape.normalize_rows(y)?
    } else {
        y
    };
    let a = tape.gather_rows(emb, &valid)?;
    let dots = tape.matmul_nt(a, emb)?;
    let s = tape.scale(dots, 1.0 / cfg.tau);

    let na = valid.len();
    let inv_valid = 1.0 / na as f64;
    let mut mask = vec![0.0; na * n];
    let mut pos_w = vec![0.0; na * n];
    for (r, &t) in valid.iter().enumerate() {
        let n_pos = class_count[&nu[t]] - 1;
        for p in 0..n {
            let same = nu[p] == nu[t];
            let in_den = match cfg.denominator {
                PcDenominator::Negatives => !same,
                PcDenominator::AllButAnchor => p != t,
            };
            if !in_den {
                mask[r * n + p] = f64::NEG_INFINITY;
            }
            if same && p != t {
                pos_w[r * n + p] = 1.0 / n_pos as f64;
            }
        }
    }
    let mask = tape.constant(Tensor::new(vec![na, n], mask)?);
    let den = tape.add(s, mask)?;
    let lse = tape.log_sum_exp(den, 1)?;

    let loss = if cfg.use_log {
        let den_term = tape.mean_all(lse);
        let w: Vec<f64> = pos_w.iter().map(|w| w * inv_valid).collect();
        let pos_term = tape.weighted_sum(s, w)?;
        tape.sub(den_term, pos_term)?
    } else {
        // -(1/|P|) sum_p exp(s_tp - lse_t)
        let cols = tape.broadcast_rows(lse, n)?;
        let lse_mat = tape.transpose(cols)?;
        let diff = tape.sub(s, lse_mat)?;
        let ratio = tape.exp(diff);
        let w: Vec<f64> = pos_w.iter().map(|w| -w * inv_valid).collect();
        tape.weighted_sum(ratio, w)?
    };
    Ok(PseudoConOutput {
        loss,
        valid_anchors: na,
        skipped_anchors: skipped,
    })
}

pub fn frame_total(tape: &mut Tape, ce: Var, pc: Var) -> Result<Var> {
    tape.add(ce, pc)
}

/// NT-Xent over `2B` pooled vectors; row `2i + j` is view `j` of utterance `i`.
pub fn info_nce(tape: &mut Tape, pooled: Var, tau_utt: f64) -> Result<Var> {
    check_tau(tau_utt)?;
    let rows = tape.value(pooled).rows();
    if !rows.is_multiple_of(2) {
        return Err(Error::Loss(format!(
            "info_nce: {rows} rows is not two views per utterance"
        )));
    }
    if rows < 4 {
        return Err(Error::Loss("info_nce needs B >= 2 utterances".into()));
    }
    let zn = tape.normalize_rows(pooled)?;
    let sim = tape.matmul_nt(zn, zn)?;
    let s = tape.scale(sim, 1.0 / tau_utt);
    let mut mask = vec![0.0; rows * rows];
    for r in 0..rows {
        mask[r * rows + r] = f64::NEG_INFINITY;
    }
    let mask = tape.constant(Tensor::new(vec![rows, rows], mask)?);
    let den = tape.add(s, mask)?;
    let lse = tape.log_sum_exp(den, 1)?;
    let sibling: Vec<usize> = (0..rows).map(|r| r ^ 1).collect();
    let pos = tape.pick_per_row(s, &sibling)?;
    let diff = tape.sub(lse, pos)?;
    Ok(tape.mean_all(diff))
}

/// `-(1/2) sum_i sum_j log softmax(logits_(i,j))[mu_i]`.
pub fn utt_ce(tape: &mut Tape, logits: Var, mu: &[usize]) -> Result<Var> {
    let rows = tape.value(logits).rows();
    if rows != 2 * mu.len() {
        return Err(Error::Loss(format!(
            "utt_ce: {} rows for {} utterance targets",
            rows,
            mu.len()
        )));
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let tgt: Vec<usize> = (0..rows).map(|r| mu[r / 2]).collect();
    let picked = tape.pick_per_row(lsm, &tgt)?;
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -0.5))
}

pub fn utt_total(tape: &mut Tape, infonce: Var, ce: Var) -> Result<Var> {
    tape.add(infonce, ce)
}
