//! ABX discriminability with DTW-aligned cosine distance, and linear probes
//! on frozen representations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{cosine_values, Tape};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::stream_rng;
use crate::synth::{AbxTriplet, Corpus, Utterance};
use crate::tensor::Tensor;

/// Frame distance `1 - cos`; a zero-norm frame has similarity 0.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    // identical frames are exactly 0 apart, free of rounding in the norms
    if a == b && a.iter().any(|&v| v != 0.0) {
        return 0.0;
    }
    (1.0 - cosine_values(a, b)).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dtw {
    /// Path-cost sum over path length.
    pub cost: f64,
    pub path_len: usize,
    /// Frames of either sequence with zero norm.
    pub zero_norm_frames: usize,
}

/// DTW with steps (1,0), (0,1), (1,1) minimizing the summed frame distance;
/// among equal sums the shorter path wins.
pub fn dtw_cosine_detail(a: &Tensor, x: &Tensor) -> Result<Dtw> {
    let (n, m) = (a.rows(), x.rows());
    if n == 0 || m == 0 || a.numel() == 0 || x.numel() == 0 {
        return Err(Error::Input("dtw on an empty sequence".into()));
    }
    if a.cols() != x.cols() {
        return Err(Error::Input(format!(
            "dtw frame sizes differ: {} vs {}",
            a.cols(),
            x.cols()
        )));
    }
    let is_zero = |r: &[f64]| r.iter().all(|&v| v == 0.0);
    let zero_norm_frames =
        (0..n).filter(|&i| is_zero(a.row(i))).count() + (0..m).filter(|&j| is_zero(x.row(j))).count();
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cosine_distance(a.row(i), x.row(j));
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                let mut consider = |p: (f64, usize)| {
                    if p.0 < best.0 || (p.0 == best.0 && p.1 < best.1) {
                        best = p;
                    }
                };
                if i > 0 && j > 0 {
                    consider(acc[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    consider(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    consider(acc[i * m + j - 1]);
                }
                best
            };
            acc[i * m + j] = (best.0 + c, best.1 + 1);
        }
    }
    let (sum, len) = acc[n * m - 1];
    Ok(Dtw {
        cost: sum / len as f64,
        path_len: len,
        zero_norm_frames,
    })
}

pub fn dtw_cosine(a: &Tensor, x: &Tensor) -> Result<f64> {
    Ok(dtw_cosine_detail(a, x)?.cost)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbxScore {
    /// Percent.
    pub error: f64,
    pub n: usize,
    pub ties: usize,
}

/// Percentage of triplets with `d(A, X) > d(A, B)`, ties counted as half.
pub fn abx_error<F>(triplets: &[AbxTriplet], mut embed: F) -> Result<AbxScore>
where
    F: FnMut(&Utterance) -> Result<Tensor>,
{
    if triplets.is_empty() {
        return Err(Error::Input("abx_error on no triplets".into()));
    }
    let mut wrong = 0.0;
    let mut ties = 0;
    for t in triplets {
        let (ea, eb, ex) = (embed(&t.a)?, embed(&t.b)?, embed(&t.x)?);
        let dax = dtw_cosine(&ea, &ex)?;
        let dab = dtw_cosine(&ea, &eb)?;
        if dax > dab {
            wrong += 1.0;
        } else if dax == dab {
            wrong += 0.5;
            ties += 1;
        }
    }
    Ok(AbxScore {
        error: 100.0 * wrong / triplets.len() as f64,
        n: triplets.len(),
        ties,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbxResult {
    pub within_error: f64,
    pub across_error: f64,
    pub n_triplets: usize,
}

pub fn abx_eval<F>(within: &[AbxTriplet], across: &[AbxTriplet], mut embed: F) -> Result<AbxResult>
where
    F: FnMut(&Utterance) -> Result<Tensor>,
{
    let w = abx_error(within, &mut embed)?;
    let a = abx_error(across, &mut embed)?;
    Ok(AbxResult {
        within_error: w.error,
        across_error: a.error,
        n_triplets: w.n + a.n,
    })
}

/// Last frame-encoder layer, the representation scored by ABX.
pub fn frame_embedding(model: &Model, utt: &Utterance) -> Result<Tensor> {
    Ok(model.frame_layers(utt)?.pop().expect("at least one layer"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Phone,
    Speaker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    FrameEnc,
    UttEnc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Final layer of the source (pooled `z^L` for utterance-level speaker
    /// probes, `z^{L-1}` for utterance-encoder phone probes).
    Last,
    /// 1-based layer index.
    Single(usize),
    /// Softmax-weighted sum of every layer, weights learned with the head.
    WeightedSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub target: ProbeTarget,
    pub source: ProbeSource,
    pub layer_mode: LayerMode,
    pub epochs: usize,
    /// `None` picks `1 / lambda_max` of the training covariance.
    pub lr: Option<f64>,
    pub momentum: f64,
    /// Frame-level probes draw whole utterances until this many frames.
    pub max_frames: usize,
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            target: ProbeTarget::Phone,
            source: ProbeSource::FrameEnc,
            layer_mode: LayerMode::Last,
            epochs: 200,
            lr: None,
            momentum: 0.9,
            max_frames: 20_000,
            test_fraction: 0.2,
        }
    }
}

/// Probe inputs: one matrix per candidate layer, row-aligned with `labels`;
/// `groups` holds the utterance id of each row for the split.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub layers: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

fn time_mean(t: &Tensor) -> Vec<f64> {
    let (n, d) = (t.rows(), t.cols());
    let mut m = vec![0.0; d];
    for i in 0..n {
        for (a, &b) in m.iter_mut().zip(t.row(i)) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

/// Per-utterance layer list for the configured source and target.
fn source_layers(model: &Model, utt: &Utterance, cfg: &ProbeConfig) -> Result<Vec<Tensor>> {
    Ok(match (cfg.source, cfg.target) {
        (ProbeSource::FrameEnc, ProbeTarget::Phone) => model.frame_layers(utt)?,
        (ProbeSource::FrameEnc, ProbeTarget::Speaker) => model
            .frame_layers(utt)?
            .iter()
            .map(|l| Tensor::matrix(1, l.cols(), time_mean(l)))
            .collect::<Result<_>>()?,
        (ProbeSource::UttEnc, ProbeTarget::Phone) => model.utt_layers(utt)?.0,
        (ProbeSource::UttEnc, ProbeTarget::Speaker) => {
            let (hidden, pooled) = model.utt_layers(utt)?;
            let mut v: Vec<Tensor> = hidden
                .iter()
                .map(|l| Tensor::matrix(1, l.cols(), time_mean(l)))
                .collect::<Result<_>>()?;
            v.push(pooled.reshape(vec![1, model.cfg.d_utt])?);
            v
        }
    })
}

fn select_layers(all: Vec<Tensor>, mode: LayerMode) -> Result<Vec<Tensor>> {
    match mode {
        LayerMode::Last => Ok(vec![all.into_iter().last().expect("layers")]),
        LayerMode::Single(l) => {
            let n = all.len();
            all.into_iter()
                .nth(l.wrapping_sub(1))
                .map(|t| vec![t])
                .ok_or_else(|| Error::Config(format!("probe layer {l} outside 1..={n}")))
        }
        LayerMode::WeightedSum => Ok(all),
    }
}

/// Gathers probe features from a frozen model.
pub fn probe_data(corpus: &Corpus, model: &Model, cfg: &ProbeConfig, seed: u64) -> Result<ProbeData> {
    if corpus.is_empty() {
        return Err(Error::Input("probe on an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let frame_level = cfg.target == ProbeTarget::Phone;
    if frame_level {
        order.shuffle(&mut stream_rng(seed, "probe-utts", 0));
    }
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for &ui in &order {
        if frame_level && labels.len() >= cfg.max_frames {
            break;
        }
        let utt = &corpus.utterances[ui];
        let layers = select_layers(source_layers(model, utt, cfg)?, cfg.layer_mode)?;
        if rows.is_empty() {
            rows = vec![Vec::new(); layers.len()];
        }
        let n = layers[0].rows();
        for (dst, l) in rows.iter_mut().zip(&layers) {
            dst.extend(l.to_rows());
        }
        for t in 0..n {
            labels.push(if frame_level {
                utt.phone_labels[t] as usize
            } else {
                utt.speaker_id as usize
            });
            groups.push(utt.id as usize);
        }
    }
    let layers = rows
        .iter()
        .map(|r| Tensor::from_rows(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeData {
        layers,
        labels,
        groups,
    })
}

/// Largest eigenvalue of `X^T X / n` by power iteration.
fn top_eigenvalue(x: &Tensor) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut xv = vec![0.0; n];
        for i in 0..n {
            xv[i] = x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut w = vec![0.0; d];
        for i in 0..n {
            for (wc, &xc) in w.iter_mut().zip(x.row(i)) {
                *wc += xc * xv[i];
            }
        }
        w.iter_mut().for_each(|c| *c /= n as f64);
        let norm = w.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|c| c / norm).collect();
    }
    lambda
}

/// Centres each layer on the training mean and rescales it by one global
/// factor (both rotation-invariant).
fn standardize(layer: &Tensor, train: &[usize]) -> Result<Tensor> {
    let d = layer.cols();
    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, &v) in mean.iter_mut().zip(layer.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut out = layer.clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let ms: f64 = train
        .iter()
        .map(|&i| out.row(i).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / train.len() as f64;
    let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
    Ok(out.map(|v| v * scale))
}

/// Trains a linear softmax head (plus layer weights) by full-batch gradient
/// descent with momentum; returns test accuracy in percent.
pub fn probe_accuracy(data: &ProbeData, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let n = data.labels.len();
    if data.layers.is_empty() || data.layers.iter().any(|l| l.rows() != n) || data.groups.len() != n {
        return Err(Error::Input("probe data rows are not aligned".into()));
    }
    let mut classes: Vec<usize> = data.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Input("probe needs at least two classes".into()));
    }
    let num_classes = classes.last().unwrap() + 1;

    let mut uniq: Vec<usize> = data.groups.clone();
    uniq.sort_unstable();
    uniq.dedup();
    uniq.shuffle(&mut stream_rng(seed, "probe-split", 0));
    let n_test = ((uniq.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, uniq.len() - 1);
    let test_groups: std::collections::HashSet<usize> = uniq[..n_test].iter().copied().collect();
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| test_groups.contains(&data.groups[*i]));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("probe split left an empty side".into()));
    }

    let layers = data
        .layers
        .iter()
        .map(|l| standardize(l, &train))
        .collect::<Result<Vec<_>>>()?;
    let gather = |t: &Tensor, idx: &[usize]| -> Result<Tensor> {
        Tensor::from_rows(&idx.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>())
    };
    let x_train: Vec<Tensor> = layers.iter().map(|l| gather(l, &train)).collect::<Result<_>>()?;
    let x_test: Vec<Tensor> = layers.iter().map(|l| gather(l, &test)).collect::<Result<_>>()?;
    let y_train: Vec<usize> = train.iter().map(|&i| data.labels[i]).collect();
    let y_test: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();

    let dim = x_train[0].cols();
    if x_train.iter().any(|x| x.cols() != dim) {
        return Err(Error::Input("weighted-sum layers differ in width".into()));
    }
    let lr = match cfg.lr {
        Some(lr) => lr,
        None => {
            let lam = x_train.iter().map(top_eigenvalue).fold(0.0, f64::max);
            if lam > 0.0 {
                1.0 / lam
            } else {
                1.0
            }
        }
    };

    let mut store = ParamStore::new();
    let g = ParamGroup::Projection;
    let w = store.add_zeros("probe.w", g, &[dim, num_classes])?;
    let b = store.add_zeros("probe.b", g, &[num_classes])?;
    let lw = store.add_zeros("probe.layer_w", g, &[layers.len(), 1])?;
    let forward = |tape: &mut Tape, store: &ParamStore, xs: &[Tensor]| -> Result<crate::autograd::Var> {
        let feats = if xs.len() == 1 {
            tape.constant(xs[0].clone())
        } else {
            let lwv = tape.param(store, lw);
            let s = tape.softmax(lwv, 0)?;
            let mut acc = None;
            for (l, x) in xs.iter().enumerate() {
                let xv = tape.constant(x.clone());
                let sl = tape.slice_rows(s, l, 1)?;
                let term = tape.scale_by(xv, sl)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            acc.unwrap()
        };
        let wv = tape.param(store, w);
        let bv = tape.param(store, b);
        let h = tape.matmul(feats, wv)?;
        tape.add_row_vec(h, bv)
    };

    let mut velocity: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let logits = forward(&mut tape, &store, &x_train)?;
        let lsm = tape.log_softmax(logits, 1)?;
        let picked = tape.pick_per_row(lsm, &y_train)?;
        let m = tape.mean_all(picked);
        let loss = tape.neg(m);
        tape.backward(loss)?;
        store.zero_grad();
        tape.accumulate_param_grads(&mut store);
        for ((_, p), v) in store.iter_mut().zip(velocity.iter_mut()) {
            for ((val, &gr), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
                *vel = cfg.momentum * *vel - lr * gr;
                *val += *vel;
            }
        }
    }

    let mut tape = Tape::new();
    let logits = forward(&mut tape, &store, &x_test)?;
    let lt = tape.value(logits);
    let correct = (0..lt.rows())
        .filter(|&i| {
            let row = lt.row(i);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == y_test[i]
        })
        .count();
    Ok(100.0 * correct as f64 / y_test.len() as f64)
}

pub fn train_probe(corpus: &Corpus, model: &Model, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let data = probe_data(corpus, model, cfg, seed)?;
    probe_accuracy(&data, cfg, seed)
}

/// Speaker purity of a `q`-cluster k-means over pooled `z^L`, in percent.
pub fn utterance_purity(corpus: &Corpus, model: &Model, q: usize, iters: usize, seed: u64) -> Result<f64> {
    let rows = corpus
        .utterances
        .iter()
        .map(|u| Ok(model.utt_layers(u)?.1.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let points = Tensor::from_rows(&rows)?;
    let km = crate::clustering::kmeans_fit(&points, q, iters, seed)?;
    let labels = crate::clustering::kmeans_assign(&km, &points);
    let truth: Vec<usize> = corpus.utterances.iter().map(|u| u.speaker_id as usize).collect();
    Ok(100.0 * crate::clustering::purity(&labels, &truth)?)
}

/// Probe data straight from raw frames (phone) or their time-means (speaker).
pub fn raw_frame_probe_data(corpus: &Corpus, target: ProbeTarget, max_frames: usize) -> Result<ProbeData> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for u in &corpus.utterances {
        let t = u.frames_tensor();
        match target {
            ProbeTarget::Phone => {
                if labels.len() >= max_frames {
                    break;
                }
                rows.extend(t.to_rows());
                labels.extend(u.phone_labels.iter().map(|&p| p as usize));
                groups.extend(std::iter::repeat_n(u.id as usize, u.num_frames()));
            }
            ProbeTarget::Speaker => {
                rows.push(time_mean(&t));
                labels.push(u.speaker_id as usize);
                groups.push(u.id as usize);
            }
        }
    }
    Ok(ProbeData {
        layers: vec![Tensor::from_rows(&rows)?],
        labels,
        groups,
    })
}
