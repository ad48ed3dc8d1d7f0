//! Factorized synthetic corpus with known phone and speaker ground truth.
//!
//! Every frame is `phone_scale * E_phone[p_t] + speaker_scale * E_spk[s] + c + noise`
//! where the embedding tables are fixed unit-norm random draws, `c` is a
//! per-utterance channel vector and the phone sequence follows a Markov chain
//! with uniform run lengths. Each utterance is generated from its own child
//! seed, so generation order does not matter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Successor offsets and probabilities of the default phone chain.
pub const DEFAULT_SUCCESSORS: [(usize, f64); 3] = [(1, 0.7), (2, 0.2), (3, 0.1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub num_phones: usize,
    pub feat_dim: usize,
    /// Row-stochastic phone transition matrix; `None` means the sparse
    /// circulant chain of `DEFAULT_SUCCESSORS`.
    pub phone_markov: Option<Vec<Vec<f64>>>,
    pub duration_min: usize,
    pub duration_max: usize,
    pub noise_sigma: f64,
    pub speaker_scale: f64,
    pub phone_scale: f64,
    pub channel_sigma: f64,
    pub frames_per_second: usize,
    /// Shortest utterance generated (two segments must fit).
    pub min_frames: usize,
    /// Corpus size used by the command-line pipeline.
    pub num_utts: usize,
    /// Mean utterance length used by the command-line pipeline.
    pub mean_frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 20,
            num_phones: 12,
            feat_dim: 32,
            phone_markov: None,
            duration_min: 2,
            duration_max: 5,
            noise_sigma: 0.3,
            speaker_scale: 0.7,
            phone_scale: 1.0,
            channel_sigma: 0.1,
            frames_per_second: 50,
            min_frames: 100,
            num_utts: 2000,
            mean_frames: 150,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_speakers < 2 {
            return bad(format!("num_speakers {} < 2", self.num_speakers));
        }
        if self.num_phones < 3 {
            return bad(format!("num_phones {} < 3", self.num_phones));
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be positive".into());
        }
        if self.duration_min < 1 || self.duration_max < self.duration_min {
            return bad(format!(
                "duration range [{}, {}] invalid",
                self.duration_min, self.duration_max
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("speaker_scale", self.speaker_scale),
            ("phone_scale", self.phone_scale),
            ("channel_sigma", self.channel_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if self.min_frames == 0 {
            return bad("min_frames must be positive".into());
        }
        if let Some(m) = &self.phone_markov {
            if m.len() != self.num_phones {
                return bad(format!(
                    "phone_markov has {} rows, expected {}",
                    m.len(),
                    self.num_phones
                ));
            }
            for (i, row) in m.iter().enumerate() {
                if row.len() != self.num_phones || row.iter().any(|&p| !(p >= 0.0)) {
                    return bad(format!("phone_markov row {i} malformed"));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return bad(format!("phone_markov row {i} sums to {s}"));
                }
            }
        }
        Ok(())
    }

    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        match &self.phone_markov {
            Some(m) => m.clone(),
            None => {
                // sparse circulant chain: context largely determines the next phone
                let v = self.num_phones;
                let mut m = vec![vec![0.0; v]; v];
                for (i, row) in m.iter_mut().enumerate() {
                    for (step, p) in DEFAULT_SUCCESSORS {
                        let j = (i + step) % v;
                        // tiny inventories fold self-loops onto the next phone
                        row[if j == i { (i + 1) % v } else { j }] += p;
                    }
                }
                m
            }
        }
    }
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Vec<f64> {
    let v = p.len();
    let mut pi = vec![1.0 / v as f64; v];
    for _ in 0..10_000 {
        let mut next = vec![0.0; v];
        for (i, row) in p.iter().enumerate() {
            for (j, &pij) in row.iter().enumerate() {
                next[j] += pi[i] * pij;
            }
        }
        // average with the previous iterate so periodic chains converge too
        let next: Vec<f64> = next.iter().zip(&pi).map(|(a, b)| 0.5 * (a + b)).collect();
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u32,
    pub speaker_id: u32,
    /// Row-major `T x feat_dim` frames.
    pub frames: Vec<f32>,
    pub phone_labels: Vec<u32>,
    pub channel: Vec<f32>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.phone_labels.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.channel.len()
    }

    pub fn frames_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.num_frames(), self.feat_dim()],
            self.frames.iter().map(|&x| x as f64).collect(),
        )
        .expect("utterance frames consistent")
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let d = self.feat_dim();
        &self.frames[t * d..(t + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub num_speakers: usize,
    pub num_phones: usize,
    pub feat_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.num_frames()).sum()
    }
}

/// The fixed unit-norm phone and speaker embedding tables of a config.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub phone: Vec<Vec<f64>>,
    pub speaker: Vec<Vec<f64>>,
}

impl EmbeddingTables {
    pub fn new(cfg: &SynthConfig) -> Self {
        let draw = |stream: &str, n: usize| {
            let mut rng = stream_rng(cfg.seed, stream, 0);
            (0..n)
                .map(|_| unit_vector(cfg.feat_dim, &mut rng))
                .collect::<Vec<_>>()
        };
        EmbeddingTables {
            phone: draw("phone-table", cfg.num_phones),
            speaker: draw("speaker-table", cfg.num_speakers),
        }
    }
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    tables: EmbeddingTables,
    transitions: Vec<WeightedIndex<f64>>,
    initial: WeightedIndex<f64>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.transition_matrix();
        let transitions = p
            .iter()
            .map(WeightedIndex::new)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("phone_markov: {e}")))?;
        let initial = WeightedIndex::new(stationary_distribution(&p))
            .map_err(|e| Error::Config(format!("stationary distribution: {e}")))?;
        Ok(Generator {
            cfg,
            tables: EmbeddingTables::new(cfg),
            transitions,
            initial,
        })
    }

    fn duration(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.cfg.duration_min..=self.cfg.duration_max)
    }

    fn render(&self, id: u32, speaker: u32, labels: Vec<u32>, rng: &mut ChaCha8Rng) -> Utterance {
        let cfg = self.cfg;
        let d = cfg.feat_dim;
        let channel: Vec<f64> = (0..d)
            .map(|_| cfg.channel_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let spk = &self.tables.speaker[speaker as usize];
        // noise has RMS norm noise_sigma, on the scale of the unit-norm tables
        let noise_sd = cfg.noise_sigma / (d as f64).sqrt();
        let mut frames = Vec::with_capacity(labels.len() * d);
        for &p in &labels {
            let ph = &self.tables.phone[p as usize];
            for k in 0..d {
                let noise = noise_sd * rng.sample::<f64, _>(StandardNormal);
                let x = cfg.phone_scale * ph[k] + cfg.speaker_scale * spk[k] + channel[k] + noise;
                frames.push(x as f32);
            }
        }
        Utterance {
            id,
            speaker_id: speaker,
            frames,
            phone_labels: labels,
            channel: channel.into_iter().map(|x| x as f32).collect(),
        }
    }

    fn utterance(&self, id: u32, mean_t: usize) -> Utterance {
        let cfg = self.cfg;
        let mut rng = stream_rng(cfg.seed, "utterance", id as u64);
        let speaker = id % cfg.num_speakers as u32;
        let lo = cfg.min_frames.max(mean_t - mean_t / 4);
        let hi = lo.max(mean_t + mean_t / 4);
        let t_len = rng.gen_range(lo..=hi);
        let mut labels = Vec::with_capacity(t_len);
        let mut phone = self.initial.sample(&mut rng);
        while labels.len() < t_len {
            let run = self.duration(&mut rng).min(t_len - labels.len());
            labels.extend(std::iter::repeat_n(phone as u32, run));
            phone = self.transitions[phone].sample(&mut rng);
        }
        self.render(id, speaker, labels, &mut rng)
    }

    fn word(&self, id: u32, speaker: u32, phones: [u32; 3], rng: &mut ChaCha8Rng) -> Utterance {
        let mut labels = Vec::new();
        for p in phones {
            let run = self.duration(rng);
            labels.extend(std::iter::repeat_n(p, run));
        }
        self.render(id, speaker, labels, rng)
    }
}

/// Generates `num_utts` utterances with lengths spread around `mean_t`.
pub fn generate_corpus(cfg: &SynthConfig, num_utts: usize, mean_t: usize) -> Result<Corpus> {
    if num_utts == 0 {
        return Err(Error::Config("num_utts must be >= 1".into()));
    }
    if mean_t < cfg.min_frames {
        return Err(Error::Config(format!(
            "mean_t {} below min_frames {}",
            mean_t, cfg.min_frames
        )));
    }
    let gen = Generator::new(cfg)?;
    let utterances = (0..num_utts as u32).map(|id| gen.utterance(id, mean_t)).collect();
    Ok(Corpus {
        num_speakers: cfg.num_speakers,
        num_phones: cfg.num_phones,
        feat_dim: cfg.feat_dim,
        utterances,
    })
}

/// One utterance of the corpus `generate_corpus` would produce, by id.
pub fn generate_utterance(cfg: &SynthConfig, id: u32, mean_t: usize) -> Result<Utterance> {
    Ok(Generator::new(cfg)?.utterance(id, mean_t))
}

/// Three-phone words A, B, X: A and B share first and last phone and differ
/// in the center; X repeats A's phones with fresh durations.
#[derive(Clone, Debug, PartialEq)]
pub struct AbxTriplet {
    pub a: Utterance,
    pub b: Utterance,
    pub x: Utterance,
    pub within_speaker: bool,
}

pub fn generate_abx_triplets(cfg: &SynthConfig, n: usize, within: bool) -> Result<Vec<AbxTriplet>> {
    let gen = Generator::new(cfg)?;
    if cfg.num_phones < 4 {
        return Err(Error::Config("ABX triplets need at least 4 phones".into()));
    }
    let v = cfg.num_phones as u32;
    let s = cfg.num_speakers as u32;
    let stream = if within { "abx-within" } else { "abx-across" };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(cfg.seed, stream, i as u64);
        let first = rng.gen_range(0..v);
        let last = rng.gen_range(0..v);
        // centers differ from both flanks so A and B stay a minimal pair under DTW
        let pool: Vec<u32> = (0..v).filter(|&p| p != first && p != last).collect();
        let ia = rng.gen_range(0..pool.len());
        let center_a = pool[ia];
        let center_b = pool[(ia + rng.gen_range(1..pool.len())) % pool.len()];
        let spk = rng.gen_range(0..s);
        let spk_x = if within {
            spk
        } else {
            (spk + rng.gen_range(1..s)) % s
        };
        let base = 3 * i as u32;
        let a = gen.word(base, spk, [first, center_a, last], &mut rng);
        let b = gen.word(base + 1, spk, [first, center_b, last], &mut rng);
        let x = gen.word(base + 2, spk_x, [first, center_a, last], &mut rng);
        out.push(AbxTriplet {
            a,
            b,
            x,
            within_speaker: within,
        });
    }
    Ok(out)
}

const CORPUS_MAGIC: &[u8; 8] = b"SYNCORP\0";
const CORPUS_VERSION: u32 = 1;

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus_to(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

pub fn write_corpus_to<W: Write>(w: &mut W, corpus: &Corpus) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_u32::<LittleEndian>(CORPUS_VERSION)?;
    w.write_u32::<LittleEndian>(corpus.num_speakers as u32)?;
    w.write_u32::<LittleEndian>(corpus.num_phones as u32)?;
    w.write_u32::<LittleEndian>(corpus.feat_dim as u32)?;
    w.write_u32::<LittleEndian>(corpus.utterances.len() as u32)?;
    for u in &corpus.utterances {
        w.write_u32::<LittleEndian>(u.id)?;
        w.write_u32::<LittleEndian>(u.speaker_id)?;
        w.write_u32::<LittleEndian>(u.num_frames() as u32)?;
        for &x in &u.frames {
            w.write_f32::<LittleEndian>(x)?;
        }
        for &l in &u.phone_labels {
            w.write_u32::<LittleEndian>(l)?;
        }
        for &c in &u.channel {
            w.write_f32::<LittleEndian>(c)?;
        }
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mut r = BufReader::new(File::open(path)?);
    read_corpus_from(&mut r)
}

pub fn read_corpus_from<R: Read>(r: &mut R) -> Result<Corpus> {
    let header = |msg: &str| Error::Parse {
        record: 0,
        msg: format!("header: {msg}"),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| header("truncated"))?;
    if &magic != CORPUS_MAGIC {
        return Err(header("bad magic"));
    }
    let mut hdr = [0u32; 5];
    for h in hdr.iter_mut() {
        *h = r.read_u32::<LittleEndian>().map_err(|_| header("truncated"))?;
    }
    let [version, s, v, d, count] = hdr;
    if version != CORPUS_VERSION {
        return Err(header(&format!("unsupported version {version}")));
    }
    let d = d as usize;
    let mut utterances = Vec::with_capacity(count as usize);
    for rec in 0..count as usize {
        let perr = |e: std::io::Error| Error::Parse {
            record: rec,
            msg: e.to_string(),
        };
        let id = r.read_u32::<LittleEndian>().map_err(perr)?;
        let speaker_id = r.read_u32::<LittleEndian>().map_err(perr)?;
        let t_len = r.read_u32::<LittleEndian>().map_err(perr)? as usize;
        if speaker_id >= s {
            return Err(Error::Parse {
                record: rec,
                msg: format!("speaker {speaker_id} out of range"),
            });
        }
        let mut frames = vec![0f32; t_len * d];
        r.read_f32_into::<LittleEndian>(&mut frames).map_err(perr)?;
        let mut phone_labels = vec![0u32; t_len];
        r.read_u32_into::<LittleEndian>(&mut phone_labels).map_err(perr)?;
        if let Some(&bad) = phone_labels.iter().find(|&&l| l >= v) {
            return Err(Error::Parse {
                record: rec,
                msg: format!("phone label {bad} out of range"),
            });
        }
        let mut channel = vec![0f32; d];
        r.read_f32_into::<LittleEndian>(&mut channel).map_err(perr)?;
        utterances.push(Utterance {
            id,
            speaker_id,
            frames,
            phone_labels,
            channel,
        });
    }
    Ok(Corpus {
        num_speakers: s as usize,
        num_phones: v as usize,
        feat_dim: d,
        utterances,
    })
}
