//! Deterministic synthetic (speech, transcription, translation) triples.
//!
//! Source sentences are random token strings. Speech is produced by
//! repeating a fixed per-token prototype frame a random number of times,
//! adding Gaussian noise and optional blank (pause) segments between tokens.
//! Translation is a bijective relabelling, optionally reversed.
//!
//! Every sample is a pure function of `(CorpusConfig, sample_seed)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared id for the CTC blank, the text-noise blank and generator pauses.
pub const BLANK: usize = 0;

/// Token id layout: `0` blank, `1..=size` real tokens, then BOS, EOS, PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Self {
        Vocab { size }
    }

    pub fn bos(&self) -> usize {
        self.size + 1
    }

    pub fn eos(&self) -> usize {
        self.size + 2
    }

    pub fn pad(&self) -> usize {
        self.size + 3
    }

    /// Embedding / output table size.
    pub fn total(&self) -> usize {
        self.size + 4
    }

    /// Classes of the CTC head: blank plus real tokens.
    pub fn ctc_classes(&self) -> usize {
        self.size + 1
    }

    pub fn is_token(&self, id: usize) -> bool {
        (1..=self.size).contains(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranslationRule {
    ReverseAndPermute,
    FixedPermutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub expansion_min: usize,
    pub expansion_max: usize,
    pub blank_insert_prob: f64,
    pub frame_noise_std: f64,
    pub frame_dim: usize,
    pub translation_rule: TranslationRule,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 20,
            max_src_len: 8,
            expansion_min: 2,
            expansion_max: 4,
            blank_insert_prob: 0.2,
            frame_noise_std: 0.1,
            frame_dim: 16,
            translation_rule: TranslationRule::FixedPermutation,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_src_len == 0 || self.frame_dim == 0 {
            return Err(Error::Config("vocab_size, max_src_len and frame_dim must be positive".into()));
        }
        if self.expansion_min == 0 || self.expansion_min > self.expansion_max {
            return Err(Error::Config(format!(
                "need 1 <= expansion_min <= expansion_max, got {}..{}",
                self.expansion_min, self.expansion_max
            )));
        }
        if !(0.0..1.0).contains(&self.blank_insert_prob) {
            return Err(Error::Config(format!(
                "blank_insert_prob {} outside [0, 1)",
                self.blank_insert_prob
            )));
        }
        if !(self.frame_noise_std >= 0.0 && self.frame_noise_std.is_finite()) {
            return Err(Error::Config("frame_noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }

    /// Closed-form expected frame count for a source of `len` tokens.
    pub fn expected_frames(&self, len: usize) -> f64 {
        let mean_r = (self.expansion_min + self.expansion_max) as f64 / 2.0;
        let gaps = len.saturating_sub(1) as f64;
        mean_r * (len as f64 + self.blank_insert_prob * gaps)
    }
}

/// Bijection on token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(table: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; table.len()];
        for &t in &table {
            if t >= table.len() || std::mem::replace(&mut seen[t], true) {
                return Err(Error::invalid(format!("{table:?} is not a permutation")));
            }
        }
        Ok(Permutation(table))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &t) in self.0.iter().enumerate() {
            inv[t] = i;
        }
        Permutation(inv)
    }

    pub fn apply(&self, id: usize) -> usize {
        self.0[id]
    }

    pub fn table(&self) -> &[usize] {
        &self.0
    }
}

/// Deterministic target-language image of `src`.
pub fn translate(src: &[usize], rule: TranslationRule, table: &Permutation) -> Vec<usize> {
    let mapped = src.iter().map(|&t| table.apply(t));
    match rule {
        TranslationRule::FixedPermutation => mapped.collect(),
        TranslationRule::ReverseAndPermute => {
            let mut v: Vec<usize> = mapped.collect();
            v.reverse();
            v
        }
    }
}

/// Speech-like corruption of a token sequence: after each position, with
/// probability `p`, either a blank is inserted or the token is duplicated
/// (fair coin).
pub fn noise_inject(tokens: &[usize], p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + tokens.len() / 2 + 1);
    for &t in tokens {
        out.push(t);
        if p > 0.0 && rng.random::<f64>() < p {
            if rng.random::<bool>() {
                out.push(BLANK);
            } else {
                out.push(t);
            }
        }
    }
    out
}

/// One generated triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_seed: u64,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// `[frames, frame_dim]`, row-major.
    pub frames: Vec<f64>,
    /// Per frame: index of the source token it renders, or `None` for a pause.
    pub alignment: Vec<Option<usize>>,
}

impl Sample {
    pub fn num_frames(&self) -> usize {
        self.alignment.len()
    }
}

/// Length of the run-length compression of an alignment (blank runs count).
pub fn alignment_runs(alignment: &[Option<usize>]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment.windows(2).filter(|w| w[0] != w[1]).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub batch_size: usize,
    pub frame_dim: usize,
    /// `[B, T, frame_dim]`, zero padded.
    pub speech: Vec<f64>,
    pub max_frames: usize,
    pub speech_lens: Vec<usize>,
    /// `[B, L_x]`, PAD padded.
    pub src_tokens: Vec<usize>,
    pub max_src: usize,
    pub src_lens: Vec<usize>,
    /// `[B, L_y]`, PAD padded.
    pub tgt_tokens: Vec<usize>,
    pub max_tgt: usize,
    pub tgt_lens: Vec<usize>,
    pub sample_seeds: Vec<u64>,
    pub alignments: Vec<Vec<Option<usize>>>,
}

impl SyntheticBatch {
    pub fn src(&self, b: usize) -> &[usize] {
        &self.src_tokens[b * self.max_src..b * self.max_src + self.src_lens[b]]
    }

    pub fn tgt(&self, b: usize) -> &[usize] {
        &self.tgt_tokens[b * self.max_tgt..b * self.max_tgt + self.tgt_lens[b]]
    }

    /// Frames of one example, `[speech_lens[b], frame_dim]`.
    pub fn speech_of(&self, b: usize) -> &[f64] {
        let start = b * self.max_frames * self.frame_dim;
        &self.speech[start..start + self.speech_lens[b] * self.frame_dim]
    }

    /// Sub-batch holding the listed examples, in that order.
    pub fn select(&self, items: &[usize], vocab: &Vocab) -> SyntheticBatch {
        let samples: Vec<Sample> = items
            .iter()
            .map(|&b| Sample {
                sample_seed: self.sample_seeds[b],
                src: self.src(b).to_vec(),
                tgt: self.tgt(b).to_vec(),
                frames: self.speech_of(b).to_vec(),
                alignment: self.alignments[b].clone(),
            })
            .collect();
        SyntheticBatch::from_samples(&samples, self.frame_dim, vocab)
    }

    pub fn from_samples(samples: &[Sample], frame_dim: usize, vocab: &Vocab) -> SyntheticBatch {
        let b = samples.len();
        let max_frames = samples.iter().map(Sample::num_frames).max().unwrap_or(0);
        let max_src = samples.iter().map(|s| s.src.len()).max().unwrap_or(0);
        let max_tgt = samples.iter().map(|s| s.tgt.len()).max().unwrap_or(0);
        let mut speech = vec![0.0; b * max_frames * frame_dim];
        let mut src_tokens = vec![vocab.pad(); b * max_src];
        let mut tgt_tokens = vec![vocab.pad(); b * max_tgt];
        for (i, s) in samples.iter().enumerate() {
            let off = i * max_frames * frame_dim;
            speech[off..off + s.frames.len()].copy_from_slice(&s.frames);
            src_tokens[i * max_src..i * max_src + s.src.len()].copy_from_slice(&s.src);
            tgt_tokens[i * max_tgt..i * max_tgt + s.tgt.len()].copy_from_slice(&s.tgt);
        }
        SyntheticBatch {
            batch_size: b,
            frame_dim,
            speech,
            max_frames,
            speech_lens: samples.iter().map(Sample::num_frames).collect(),
            src_tokens,
            max_src,
            src_lens: samples.iter().map(|s| s.src.len()).collect(),
            tgt_tokens,
            max_tgt,
            tgt_lens: samples.iter().map(|s| s.tgt.len()).collect(),
            sample_seeds: samples.iter().map(|s| s.sample_seed).collect(),
            alignments: samples.iter().map(|s| s.alignment.clone()).collect(),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named seed streams so that, e.g., scheduler probes never shift the
/// training data order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Train,
    Probe,
    Eval,
    Analysis,
}

impl SeedStream {
    fn tag(self) -> u64 {
        match self {
            SeedStream::Train => 0x7261_696e,
            SeedStream::Probe => 0x7072_6f62,
            SeedStream::Eval => 0x6576_616c,
            SeedStream::Analysis => 0x616e_6c79,
        }
    }

    pub fn sample_seed(self, index: u64) -> u64 {
        mix_seed(self.tag(), index)
    }
}

const STREAM_SRC: u64 = 1;
const STREAM_SPEECH: u64 = 2;

/// A configured generator: token prototypes and the translation table.
#[derive(Debug, Clone)]
pub struct Corpus {
    config: CorpusConfig,
    prototypes: Vec<f64>,
    permutation: Permutation,
}

impl Corpus {
    pub fn new(config: CorpusConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x70726f74));
        let rows = config.vocab_size + 1;
        let prototypes = orthonormal_blocks(rows, config.frame_dim, &mut rng);
        let mut tokens: Vec<usize> = (1..=config.vocab_size).collect();
        tokens.shuffle(&mut rng);
        let mut table = vec![BLANK];
        table.extend(tokens);
        let permutation = Permutation::new(table)?;
        Ok(Corpus {
            config,
            prototypes,
            permutation,
        })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    pub fn prototype(&self, id: usize) -> &[f64] {
        let d = self.config.frame_dim;
        &self.prototypes[id * d..(id + 1) * d]
    }

    fn rng(&self, sample_seed: u64, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.config.seed, sample_seed), stream))
    }

    /// Renders tokens as noisy frames. Each token becomes `r ∈ [expansion_min,
    /// expansion_max]` copies of its prototype; between tokens a pause segment
    /// of the same length distribution appears with `blank_insert_prob`.
    pub fn expand_to_speech(&self, src: &[usize], sample_seed: u64) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
        if src.is_empty() {
            return Err(Error::invalid("cannot render an empty token sequence"));
        }
        let vocab = self.vocab();
        if let Some(bad) = src.iter().find(|&&t| !vocab.is_token(t)) {
            return Err(Error::invalid(format!(
                "token id {bad} outside 1..={}",
                self.config.vocab_size
            )));
        }
        let c = &self.config;
        let mut rng = self.rng(sample_seed, STREAM_SPEECH);
        let mut alignment = Vec::new();
        for (i, _) in src.iter().enumerate() {
            if i > 0 && c.blank_insert_prob > 0.0 && rng.random::<f64>() < c.blank_insert_prob {
                let r = rng.random_range(c.expansion_min..=c.expansion_max);
                alignment.extend(std::iter::repeat(None).take(r));
            }
            let r = rng.random_range(c.expansion_min..=c.expansion_max);
            alignment.extend(std::iter::repeat(Some(i)).take(r));
        }
        let d = c.frame_dim;
        let mut frames = Vec::with_capacity(alignment.len() * d);
        for a in &alignment {
            let proto = self.prototype(a.map_or(BLANK, |i| src[i]));
            for &p in proto {
                let noise = if c.frame_noise_std > 0.0 {
                    c.frame_noise_std * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                frames.push(p + noise);
            }
        }
        Ok((frames, alignment))
    }

    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        translate(src, self.config.translation_rule, &self.permutation)
    }

    pub fn sample(&self, sample_seed: u64) -> Result<Sample> {
        let mut rng = self.rng(sample_seed, STREAM_SRC);
        let len = rng.random_range(1..=self.config.max_src_len);
        let src: Vec<usize> = (0..len)
            .map(|_| rng.random_range(1..=self.config.vocab_size))
            .collect();
        let tgt = self.translate(&src);
        let (frames, alignment) = self.expand_to_speech(&src, sample_seed)?;
        Ok(Sample {
            sample_seed,
            src,
            tgt,
            frames,
            alignment,
        })
    }

    pub fn batch(&self, sample_seeds: &[u64]) -> Result<SyntheticBatch> {
        let samples = sample_seeds
            .iter()
            .map(|&s| self.sample(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticBatch::from_samples(&samples, self.config.frame_dim, &self.vocab()))
    }

    /// Batch `index` of a seed stream: samples `index*size .. (index+1)*size`.
    pub fn stream_batch(&self, stream: SeedStream, index: u64, size: usize) -> Result<SyntheticBatch> {
        let seeds: Vec<u64> = (0..size as u64)
            .map(|b| stream.sample_seed(index * size as u64 + b))
            .collect();
        self.batch(&seeds)
    }

    /// Writes `n` samples of `stream` as JSON lines `{sample_seed, src, tgt, T}`.
    pub fn export_jsonl(&self, mut w: impl std::io::Write, stream: SeedStream, n: u64) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            sample_seed: u64,
            src: &'a [usize],
            tgt: &'a [usize],
            #[serde(rename = "T")]
            frames: usize,
        }
        for i in 0..n {
            let s = self.sample(stream.sample_seed(i))?;
            let rec = Record {
                sample_seed: s.sample_seed,
                src: &s.src,
                tgt: &s.tgt,
                frames: s.num_frames(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }
}

/// `rows` unit vectors in `dim` dimensions; each consecutive block of `dim`
/// rows is orthonormal (Gram–Schmidt on Gaussian draws).
fn orthonormal_blocks(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let block_start = (r / dim) * dim;
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut *rng)).collect();
            for q in block_start..r {
                let basis = &out[q * dim..(q + 1) * dim];
                let dot: f64 = v.iter().zip(basis).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(basis).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                out.extend(v.iter().map(|a| a / norm));
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CorpusConfig {
        CorpusConfig::default()
    }

    #[test]
    fn noiseless_fixed_expansion_repeats_prototypes() {
        let c = CorpusConfig {
            expansion_min: 2,
            expansion_max: 2,
            blank_insert_prob: 0.0,
            frame_noise_std: 0.0,
            ..cfg()
        };
        let corpus = Corpus::new(c).unwrap();
        let (frames, align) = corpus.expand_to_speech(&[3, 5], 11).unwrap();
        let d = corpus.config().frame_dim;
        assert_eq!(align, vec![Some(0), Some(0), Some(1), Some(1)]);
        let a = corpus.prototype(3);
        let b = corpus.prototype(5);
        let want: Vec<f64> = [a, a, b, b].concat();
        assert_eq!(frames.len(), 4 * d);
        assert_eq!(frames, want);
    }

    #[test]
    fn frame_count_matches_closed_form() {
        let corpus = Corpus::new(cfg()).unwrap();
        let src = [1, 2, 3, 4, 5, 6];
        let n = 10_000;
        let total: usize = (0..n)
            .map(|s| corpus.expand_to_speech(&src, s).unwrap().1.len())
            .sum();
        let mean = total as f64 / n as f64;
        let expected = corpus.config().expected_frames(src.len());
        assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
    }

    #[test]
    fn same_seed_same_frames() {
        let corpus = Corpus::new(cfg()).unwrap();
        assert_eq!(corpus.sample(42).unwrap(), corpus.sample(42).unwrap());
        assert_ne!(corpus.sample(42).unwrap().frames, corpus.sample(43).unwrap().frames);
    }

    #[test]
    fn empty_source_is_rejected() {
        let corpus = Corpus::new(cfg()).unwrap();
        assert!(corpus.expand_to_speech(&[], 0).is_err());
        assert!(corpus.expand_to_speech(&[0], 0).is_err());
    }

    #[test]
    fn alignment_compresses_to_source_with_pauses() {
        let corpus = Corpus::new(cfg()).unwrap();
        for seed in 0..200 {
            let s = corpus.sample(seed).unwrap();
            let mut runs: Vec<Option<usize>> = Vec::new();
            for a in &s.alignment {
                if runs.last() != Some(a) {
                    runs.push(*a);
                }
            }
            let tokens: Vec<usize> = runs.iter().flatten().copied().collect();
            assert_eq!(tokens, (0..s.src.len()).collect::<Vec<_>>());
            assert_eq!(runs.len(), alignment_runs(&s.alignment));
            assert!(s.num_frames() >= s.src.len());
            assert!(runs.first().unwrap().is_some() && runs.last().unwrap().is_some());
        }
    }

    #[test]
    fn identity_translation_is_a_copy() {
        let src = vec![3, 1, 2];
        assert_eq!(translate(&src, TranslationRule::FixedPermutation, &Permutation::identity(4)), src);
    }

    #[test]
    fn reverse_and_permute_inverts() {
        let p = Permutation::new(vec![0, 4, 2, 1, 3]).unwrap();
        let src = vec![1, 2, 3, 4, 4];
        let y = translate(&src, TranslationRule::ReverseAndPermute, &p);
        let back = translate(&y, TranslationRule::ReverseAndPermute, &p.inverse());
        assert_eq!(back, src);
    }

    #[test]
    fn hand_applied_permutation_table() {
        // {0→3, 1→0, 2→1, 3→2}; [1, 2] maps to [0, 1], reversed [1, 0].
        let p = Permutation::new(vec![3, 0, 1, 2]).unwrap();
        assert_eq!(translate(&[1, 2], TranslationRule::ReverseAndPermute, &p), vec![1, 0]);
        assert_eq!(translate(&[1, 2], TranslationRule::FixedPermutation, &p), vec![0, 1]);
    }

    #[test]
    fn zero_noise_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = vec![4, 4, 1, 9];
        assert_eq!(noise_inject(&t, 0.0, &mut rng), t);
    }

    #[test]
    fn noise_length_matches_binomial() {
        let p = 0.2;
        let l = 1000;
        let tokens: Vec<usize> = (0..l).map(|i| 1 + i % 20).collect();
        let runs = 1000;
        let mut total = 0.0;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = noise_inject(&tokens, p, &mut rng);
            assert!(out.iter().all(|t| *t == BLANK || tokens.contains(t)));
            total += out.len() as f64;
        }
        let mean = total / runs as f64;
        // Mean of `runs` Binomial(L, p) draws shifted by L.
        let sigma = (l as f64 * p * (1.0 - p) / runs as f64).sqrt();
        assert!((mean - l as f64 * (1.0 + p)).abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn prototypes_are_unit_and_blockwise_orthogonal() {
        let corpus = Corpus::new(cfg()).unwrap();
        let d = corpus.config().frame_dim;
        for i in 0..=corpus.config().vocab_size {
            let a = corpus.prototype(i);
            assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for j in (i / d) * d..i {
                let b = corpus.prototype(j);
                assert!(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(Corpus::new(CorpusConfig {
            expansion_min: 3,
            expansion_max: 2,
            ..cfg()
        })
        .is_err());
        assert!(Corpus::new(CorpusConfig {
            blank_insert_prob: 1.0,
            ..cfg()
        })
        .is_err());
    }

    #[test]
    fn translation_is_rule_image_of_source() {
        let corpus = Corpus::new(cfg()).unwrap();
        let b = corpus.stream_batch(SeedStream::Train, 0, 8).unwrap();
        for i in 0..8 {
            assert_eq!(b.tgt(i), corpus.translate(b.src(i)).as_slice());
            assert!(b.speech_lens[i] >= b.src_lens[i]);
        }
        assert_eq!(corpus.permutation().apply(BLANK), BLANK);
    }
}
