//! CLUB mutual-information upper bound between frame-encoder and
//! utterance-encoder representations.
//!
//! `ybar_t = sum_l y^l_t` over the segment span and
//! `zbar_t = z^L + sum_l A^l z^l_t`; a diagonal Gaussian `q_phi(ybar | zbar)`
//! is fitted by maximum likelihood on detached representations, and the
//! encoders minimize the positive-minus-cross log-likelihood gap with `phi`
//! held constant.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoders::Span;
use crate::error::{Error, Result};
use crate::nn::{Bind, Linear};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Lower bound applied to predicted log-variances.
pub const LOGVAR_FLOOR: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiMode {
    Aggregated,
    #[serde(alias = "final")]
    FinalOnly,
}

impl std::str::FromStr for MiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggregated" => Ok(MiMode::Aggregated),
            "final" | "final_only" => Ok(MiMode::FinalOnly),
            other => Err(Error::Config(format!("unknown mi mode {other:?}"))),
        }
    }
}

/// How the per-utterance sum over frames in the CLUB loss is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeReduction {
    Mean,
    Sum,
}

/// Gaussian conditional `q_phi(ybar | zbar)` with separate two-layer mean
/// and log-variance networks.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalNet {
    pub mean: [Linear; 2],
    pub logvar: [Linear; 2],
}

impl VariationalNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d_cond: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Variational;
        Ok(VariationalNet {
            mean: [
                Linear::new(store, "var.mean0", g, d_cond, hidden, rng)?,
                Linear::new(store, "var.mean1", g, hidden, d_out, rng)?,
            ],
            logvar: [
                Linear::new(store, "var.logvar0", g, d_cond, hidden, rng)?,
                Linear::new(store, "var.logvar1", g, hidden, d_out, rng)?,
            ],
        })
    }

    /// `(mean, logvar)` for each row of `z`; the log-variance is clamped at
    /// [`LOGVAR_FLOOR`].
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, mode: Bind) -> Result<(Var, Var)> {
        let h = self.mean[0].forward(tape, store, z, mode)?;
        let h = tape.relu(h);
        let mu = self.mean[1].forward(tape, store, h, mode)?;
        let h = self.logvar[0].forward(tape, store, z, mode)?;
        let h = tape.relu(h);
        let lv = self.logvar[1].forward(tape, store, h, mode)?;
        Ok((mu, tape.clamp_min(lv, LOGVAR_FLOOR)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mean
            .iter()
            .chain(&self.logvar)
            .flat_map(|l| l.params())
            .collect()
    }
}

/// `A^1 .. A^{L-1}`, stored as `d' x d^L` so that `z^l A^l` maps rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub a: Vec<ParamId>,
}

impl Projections {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        layers: usize,
        d_hidden: usize,
        d_pooled: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = 1.0 / (d_hidden as f64).sqrt();
        let a = (0..layers)
            .map(|l| {
                store.add_normal(
                    &format!("proj.a{l}"),
                    ParamGroup::Projection,
                    &[d_hidden, d_pooled],
                    scale,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Projections { a })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AggregatedPair {
    /// `T_seg x d`.
    pub ybar: Var,
    /// `T_seg x d^L`.
    pub zbar: Var,
}

/// Builds `(ybar, zbar)` for one utterance.
///
/// `frame_hidden` covers the whole utterance; `utt_hidden` and `pooled` come
/// from the utterance encoder run on the `span` segment.
pub fn aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    proj: &Projections,
    frame_hidden: &[Var],
    utt_hidden: &[Var],
    pooled: Var,
    span: Span,
    mode: MiMode,
) -> Result<AggregatedPair> {
    let last_y = *frame_hidden
        .last()
        .ok_or_else(|| Error::Alignment("no frame-encoder layers".into()))?;
    let t_frame = tape.value(last_y).rows();
    if span.len == 0 || span.end() > t_frame {
        return Err(Error::Alignment(format!(
            "span {}..{} outside {} frame-encoder frames",
            span.start,
            span.end(),
            t_frame
        )));
    }
    for &z in utt_hidden {
        if tape.value(z).rows() != span.len {
            return Err(Error::Alignment(format!(
                "utterance layer has {} frames, span has {}",
                tape.value(z).rows(),
                span.len
            )));
        }
    }
    if mode == MiMode::Aggregated && utt_hidden.len() != proj.a.len() {
        return Err(Error::Alignment(format!(
            "{} utterance layers for {} projections",
            utt_hidden.len(),
            proj.a.len()
        )));
    }
    let y_layers: &[Var] = match mode {
        MiMode::Aggregated => frame_hidden,
        MiMode::FinalOnly => std::slice::from_ref(frame_hidden.last().unwrap()),
    };
    let mut ybar = None;
    for &y in y_layers {
        let seg = tape.slice_rows(y, span.start, span.len)?;
        ybar = Some(match ybar {
            None => seg,
            Some(acc) => tape.add(acc, seg)?,
        });
    }
    let mut zbar = tape.broadcast_rows(pooled, span.len)?;
    if mode == MiMode::Aggregated {
        for (&z, &a) in utt_hidden.iter().zip(&proj.a) {
            let av = tape.param(store, a);
            let p = tape.matmul(z, av)?;
            zbar = tape.add(zbar, p)?;
        }
    }
    Ok(AggregatedPair {
        ybar: ybar.unwrap(),
        zbar,
    })
}

fn stack(tape: &mut Tape, pairs: &[AggregatedPair]) -> Result<(Var, Var, Vec<usize>)> {
    let ys: Vec<Var> = pairs.iter().map(|p| p.ybar).collect();
    let zs: Vec<Var> = pairs.iter().map(|p| p.zbar).collect();
    let lens = ys.iter().map(|&y| tape.value(y).rows()).collect();
    let y = tape.concat(&ys, 0)?;
    let z = tape.concat(&zs, 0)?;
    Ok((y, z, lens))
}

/// Mean over all `(i, t)` of `-log q_phi(ybar_{i,t} | zbar_{i,t})`.
///
/// Callers pass detached pairs when training `phi` alone.
pub fn variational_nll(
    tape: &mut Tape,
    net: &VariationalNet,
    store: &ParamStore,
    pairs: &[AggregatedPair],
    mode: Bind,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("variational_nll on empty batch".into()));
    }
    let (y, z, _) = stack(tape, pairs)?;
    let (mu, lv) = net.forward(tape, store, z, mode)?;
    let n = tape.value(y).rows();
    let diag: Vec<(usize, usize)> = (0..n).map(|k| (k, k)).collect();
    let lp = tape.gaussian_log_pdf_pairs(y, mu, lv, &diag)?;
    let m = tape.mean_all(lp);
    let out = tape.neg(m);
    if !tape.value(out).is_finite() {
        return Err(Error::Numeric("variational NLL is not finite".into()));
    }
    Ok(out)
}

/// CLUB estimate with `phi` detached:
/// `(1/B) sum_i red_t [log q(ybar_it | zbar_it) - mean_j log q(ybar_it | zbar_jt)]`
/// where `j` ranges over utterances whose segment reaches frame `t`.
pub fn club_loss(
    tape: &mut Tape,
    net: &VariationalNet,
    store: &ParamStore,
    pairs: &[AggregatedPair],
    reduction: TimeReduction,
) -> Result<Var> {
    let b = pairs.len();
    if b < 2 {
        return Err(Error::Contract(format!("club_loss needs B >= 2, got {b}")));
    }
    let (y, z, lens) = stack(tape, pairs)?;
    let (mu, lv) = net.forward(tape, store, z, Bind::Detached)?;
    let offsets: Vec<usize> = lens
        .iter()
        .scan(0, |acc, &l| {
            let o = *acc;
            *acc += l;
            Some(o)
        })
        .collect();
    let mut index = Vec::new();
    let mut weights = Vec::new();
    for i in 0..b {
        let w_it = match reduction {
            TimeReduction::Mean => 1.0 / (b * lens[i]) as f64,
            TimeReduction::Sum => 1.0 / b as f64,
        };
        for t in 0..lens[i] {
            let row = offsets[i] + t;
            index.push((row, row));
            weights.push(w_it);
            let valid: Vec<usize> = (0..b).filter(|&j| t < lens[j]).collect();
            let wc = w_it / valid.len() as f64;
            for j in valid {
                index.push((row, offsets[j] + t));
                weights.push(-wc);
            }
        }
    }
    let lp = tape.gaussian_log_pdf_pairs(y, mu, lv, &index)?;
    tape.weighted_sum(lp, weights)
}

/// Both halves of one MI step on a shared tape: the NLL for `phi` (on
/// detached representations) and the CLUB loss for the encoders (`phi`
/// detached).
pub fn mi_step(
    tape: &mut Tape,
    net: &VariationalNet,
    store: &ParamStore,
    pairs: &[AggregatedPair],
    reduction: TimeReduction,
) -> Result<(Var, Var)> {
    let detached: Vec<AggregatedPair> = pairs
        .iter()
        .map(|p| AggregatedPair {
            ybar: tape.detach(p.ybar),
            zbar: tape.detach(p.zbar),
        })
        .collect();
    let nll = variational_nll(tape, net, store, &detached, Bind::Trainable)?;
    let club = club_loss(tape, net, store, pairs, reduction)?;
    Ok((nll, club))
}

/// `-(d/2) ln(1 - rho^2)` for `d` independent pairs with correlation `rho`.
pub fn analytic_gaussian_mi(rho: f64, d: usize) -> f64 {
    -0.5 * d as f64 * (1.0 - rho * rho).ln()
}

/// Value the CLUB bound attains when `q_phi` equals the true conditional of
/// unit-variance pairs with correlation `rho`: `d rho^2 / (1 - rho^2)`.
pub fn exact_conditional_club(rho: f64, d: usize) -> f64 {
    d as f64 * rho * rho / (1.0 - rho * rho)
}

/// `(z, y)` with `z ~ N(0, I)` and `y = rho z + sqrt(1 - rho^2) e`.
pub fn correlated_gaussian<R: Rng>(n: usize, d: usize, rho: f64, rng: &mut R) -> (Tensor, Tensor) {
    let s = (1.0 - rho * rho).sqrt();
    let mut z = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let a: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        z.push(a);
        y.push(rho * a + s * e);
    }
    (
        Tensor::new(vec![n, d], z).expect("shape"),
        Tensor::new(vec![n, d], y).expect("shape"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            n_train: 4000,
            n_eval: 1000,
            batch: 256,
            steps: 1500,
            lr: 3e-3,
            hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub rho: f64,
    pub d: usize,
    pub analytic: f64,
    pub estimate: f64,
    pub final_nll: f64,
}

/// Trains `q_phi` on correlated Gaussian pairs and evaluates the CLUB bound
/// on a fresh sample with the full `N x N` cross term.
pub fn club_gaussian_oracle(rho: f64, d: usize, seed: u64, cfg: &OracleConfig) -> Result<OracleResult> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::Config(format!("rho {rho} must lie in (-1, 1)")));
    }
    if d == 0 || cfg.n_train == 0 || cfg.n_eval < 2 || cfg.batch == 0 {
        return Err(Error::Config("oracle sizes must be positive".into()));
    }
    let (z_train, y_train) = correlated_gaussian(cfg.n_train, d, rho, &mut stream_rng(seed, "oracle-train", 0));
    let (z_eval, y_eval) = correlated_gaussian(cfg.n_eval, d, rho, &mut stream_rng(seed, "oracle-eval", 0));

    let mut store = ParamStore::new();
    let net = VariationalNet::new(&mut store, d, cfg.hidden, d, &mut stream_rng(seed, "oracle-init", 0))?;
    let mut adam = Adam::new(&store, AdamConfig::default());
    let sched = LrSchedule::warmup_decay(cfg.lr, cfg.lr, cfg.lr * 0.05, 0, cfg.steps as u64);
    let mut rng = stream_rng(seed, "oracle-batches", 0);
    let mut final_nll = f64::NAN;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch.min(cfg.n_train))
            .map(|_| rng.gen_range(0..cfg.n_train))
            .collect();
        let mut tape = Tape::new();
        let zt = tape.constant(z_train.clone());
        let yt = tape.constant(y_train.clone());
        let zb = tape.gather_rows(zt, &idx)?;
        let yb = tape.gather_rows(yt, &idx)?;
        let pair = AggregatedPair { ybar: yb, zbar: zb };
        let nll = variational_nll(&mut tape, &net, &store, &[pair], Bind::Trainable)?;
        final_nll = tape.value(nll).item();
        tape.backward(nll)?;
        store.zero_grad();
        tape.accumulate_param_grads(&mut store);
        adam.step_group(&mut store, ParamGroup::Variational, sched.lr_at(step as u64))?;
    }

    let mut tape = Tape::new();
    let zv = tape.constant(z_eval);
    let (mu, lv) = net.forward(&mut tape, &store, zv, Bind::Detached)?;
    let estimate = club_estimate(y_eval.data(), tape.value(mu).data(), tape.value(lv).data(), d);
    Ok(OracleResult {
        rho,
        d,
        analytic: analytic_gaussian_mi(rho, d),
        estimate,
        final_nll,
    })
}

/// Sample CLUB bound `mean_i [log q(y_i|z_i) - mean_j log q(y_i|z_j)]` from
/// per-row predicted means and log-variances.
pub fn club_estimate(y: &[f64], mu: &[f64], logvar: &[f64], d: usize) -> f64 {
    let n = y.len() / d;
    let logq = |i: usize, j: usize| {
        let mut s = 0.0;
        for c in 0..d {
            let r = y[i * d + c] - mu[j * d + c];
            let lvv = logvar[j * d + c];
            s += r * r * (-lvv).exp() + lvv;
        }
        -0.5 * (s + d as f64 * crate::autograd::LN_2PI)
    };
    let mut total = 0.0;
    for i in 0..n {
        let cross: f64 = (0..n).map(|j| logq(i, j)).sum::<f64>() / n as f64;
        total += logq(i, i) - cross;
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn setup(d_cond: usize, d_out: usize) -> (ParamStore, VariationalNet) {
        let mut store = ParamStore::new();
        let net = VariationalNet::new(&mut store, d_cond, 5, d_out, &mut stream_rng(0, "v", 0)).unwrap();
        (store, net)
    }

    fn zero_net(store: &mut ParamStore, net: &VariationalNet) {
        for id in net.params() {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn nll_zero_residual_and_unit_residual() {
        let (mut store, net) = setup(2, 3);
        zero_net(&mut store, &net);
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::zeros(&[4, 3]));
        let z = tape.constant(Tensor::full(&[4, 2], 0.7));
        let l = variational_nll(&mut tape, &net, &store, &[AggregatedPair { ybar: y, zbar: z }], Bind::Trainable)
            .unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 1.5 * crate::autograd::LN_2PI, epsilon = 1e-12);

        let (mut store, net) = setup(1, 1);
        zero_net(&mut store, &net);
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::full(&[1, 1], 1.0));
        let z = tape.constant(Tensor::zeros(&[1, 1]));
        let l = variational_nll(&mut tape, &net, &store, &[AggregatedPair { ybar: y, zbar: z }], Bind::Trainable)
            .unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 1.4189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn club_identical_members_is_zero() {
        let (store, net) = setup(2, 3);
        let mut tape = Tape::new();
        let y = Tensor::from_rows(&[vec![0.1, -0.4, 1.0], vec![0.3, 0.2, -0.5]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.5, 0.9], vec![-1.0, 0.2]]).unwrap();
        let pairs: Vec<AggregatedPair> = (0..3)
            .map(|_| AggregatedPair {
                ybar: tape.input(y.clone()),
                zbar: tape.input(z.clone()),
            })
            .collect();
        let l = club_loss(&mut tape, &net, &store, &pairs, TimeReduction::Mean).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn club_constant_conditional_is_zero() {
        let (mut store, net) = setup(2, 2);
        // first layers zeroed: outputs depend only on the output biases
        for l in [&net.mean[0], &net.logvar[0]] {
            for id in l.params() {
                store.get_mut(id).value.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let mut rng = stream_rng(5, "c", 0);
        let pairs: Vec<AggregatedPair> = (0..3)
            .map(|_| {
                let (z, y) = correlated_gaussian(4, 2, 0.8, &mut rng);
                AggregatedPair {
                    ybar: tape.input(y),
                    zbar: tape.input(z),
                }
            })
            .collect();
        let l = club_loss(&mut tape, &net, &store, &pairs, TimeReduction::Sum).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn club_needs_two_members() {
        let (store, net) = setup(2, 2);
        let mut tape = Tape::new();
        let p = AggregatedPair {
            ybar: tape.input(Tensor::zeros(&[2, 2])),
            zbar: tape.input(Tensor::zeros(&[2, 2])),
        };
        assert!(matches!(
            club_loss(&mut tape, &net, &store, &[p], TimeReduction::Mean),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn aggregate_minimal_case() {
        let mut store = ParamStore::new();
        let proj = Projections::new(&mut store, 1, 3, 2, &mut stream_rng(0, "p", 0)).unwrap();
        store.get_mut(proj.a[0]).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let y1 = tape.input(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap());
        let z1 = tape.input(Tensor::full(&[2, 3], 5.0));
        let zl = tape.input(Tensor::vector(vec![0.5, -0.5]));
        let span = Span { start: 1, len: 2 };
        let p = aggregate(&mut tape, &store, &proj, &[y1], &[z1], zl, span, MiMode::Aggregated).unwrap();
        assert_eq!(tape.value(p.ybar).data(), &[2.0, 3.0]);
        assert_eq!(tape.value(p.zbar).data(), &[0.5, -0.5, 0.5, -0.5]);

        let bad = Span { start: 3, len: 2 };
        assert!(matches!(
            aggregate(&mut tape, &store, &proj, &[y1], &[z1], zl, bad, MiMode::Aggregated),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn oracle_closed_forms() {
        assert_abs_diff_eq!(analytic_gaussian_mi(0.5, 4), 0.5753641449035618, epsilon = 1e-12);
        assert_abs_diff_eq!(exact_conditional_club(0.5, 4), 4.0 / 3.0, epsilon = 1e-12);
        assert_eq!(analytic_gaussian_mi(0.0, 4), 0.0);
    }
}
