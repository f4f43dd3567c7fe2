//! Seeded synthetic moment-retrieval data.
//!
//! Every video mixes three concepts: the query's target concept fills the
//! ground-truth span, two distractor concepts fill the clips before and after
//! it. Clips straddling a boundary blend the two sides in proportion to their
//! overlap. The last feature channel carries the scaled normalized clip center so
//! that downstream position-free blocks can still localise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaPdf, Continuous};

use crate::error::{Error, Result};
use crate::heads::{MaskedQuery, MomentSpan};
use crate::nn::Tensor2D;
use crate::rng::{stream_rng, Stream};

/// Reserved id of the mask token.
pub const MASK_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Mask,
    Noun,
    Verb,
    Attribute,
}

/// Token inventory: one mask token, then nouns, verbs and attributes in
/// contiguous id ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub n_nouns: usize,
    pub n_verbs: usize,
    pub n_attributes: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 7 {
            return Err(Error::Config(format!("vocabulary of {size} tokens is too small (need >= 7)")));
        }
        let n_nouns = (size - 1) / 2;
        let rest = size - 1 - n_nouns;
        let n_verbs = rest / 2;
        Ok(Self {
            size,
            n_nouns,
            n_verbs,
            n_attributes: rest - n_verbs,
        })
    }

    pub fn noun(&self, i: usize) -> usize {
        1 + i
    }

    pub fn verb(&self, i: usize) -> usize {
        1 + self.n_nouns + i
    }

    pub fn attribute(&self, i: usize) -> usize {
        1 + self.n_nouns + self.n_verbs + i
    }

    pub fn class(&self, token: usize) -> TokenClass {
        if token == MASK_TOKEN {
            TokenClass::Mask
        } else if token <= self.n_nouns {
            TokenClass::Noun
        } else if token <= self.n_nouns + self.n_verbs {
            TokenClass::Verb
        } else {
            TokenClass::Attribute
        }
    }

    /// Tokens bound to a concept: its noun, linked verb and linked attribute.
    pub fn concept_tokens(&self, concept: usize) -> [usize; 3] {
        [
            self.noun(concept),
            self.verb(concept % self.n_verbs),
            self.attribute(concept % self.n_attributes),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Clips per video.
    pub clips: usize,
    /// Feature width, including the positional channel.
    pub dim: usize,
    pub vocab_size: usize,
    pub n_concepts: usize,
    pub query_len: usize,
    /// Norm of each concept signature.
    pub signal_norm: f64,
    /// Per-sample amplitude of the target concept, drawn uniformly.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Std of the Gaussian jitter on every non-positional entry.
    pub clip_jitter: f64,
    /// Probability that the verb and attribute slots use the concept's linked tokens.
    pub link_prob: f64,
    /// The positional channel holds `position_scale * clip center`.
    pub position_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1200,
            clips: 32,
            dim: 16,
            vocab_size: 64,
            n_concepts: 16,
            query_len: 6,
            signal_norm: 2.0,
            amplitude_min: 0.4,
            amplitude_max: 1.2,
            clip_jitter: 0.3,
            link_prob: 0.8,
            position_scale: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        if self.dim < 4 {
            return Err(Error::Config(format!("feature width must be >= 4; got {}", self.dim)));
        }
        if self.clips < 2 {
            return Err(Error::Config(format!("need at least 2 clips; got {}", self.clips)));
        }
        if self.n_concepts < 3 || self.n_concepts > vocab.n_nouns {
            return Err(Error::Config(format!(
                "n_concepts must be in [3, {}] for a {}-token vocabulary; got {}",
                vocab.n_nouns, self.vocab_size, self.n_concepts
            )));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(Error::Config(format!("position_scale must be > 0; got {}", self.position_scale)));
        }
        if self.query_len < 4 {
            return Err(Error::Config(format!("queries need >= 4 tokens; got {}", self.query_len)));
        }
        if !(self.amplitude_min > 0.0 && self.amplitude_min <= self.amplitude_max) {
            return Err(Error::Config("amplitude range must satisfy 0 < min <= max".into()));
        }
        if !(self.clip_jitter >= 0.0 && self.signal_norm > 0.0) {
            return Err(Error::Config("clip_jitter must be >= 0 and signal_norm > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.link_prob) {
            return Err(Error::Config("link_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Uniform,
    Biased,
}

/// Distribution of ground-truth spans.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSpec {
    pub mode: BiasMode,
    /// Biased starts follow `Beta(1, start_concentration)`.
    pub start_concentration: f64,
    /// Biased lengths follow `Beta(length_shape, length_concentration)` on `[min_len, max_len]`.
    pub length_shape: f64,
    pub length_concentration: f64,
    pub min_len: f64,
    pub max_len: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            mode: BiasMode::Biased,
            start_concentration: 4.0,
            length_shape: 1.5,
            length_concentration: 5.0,
            min_len: 0.05,
            max_len: 0.5,
        }
    }
}

impl BiasSpec {
    pub fn uniform() -> Self {
        Self {
            mode: BiasMode::Uniform,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_len > 0.0 && self.min_len < self.max_len && self.max_len <= 1.0) {
            return Err(Error::Config(format!(
                "span lengths need 0 < min_len < max_len <= 1; got [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if !(self.start_concentration > 0.0 && self.length_shape > 0.0 && self.length_concentration > 0.0) {
            return Err(Error::Config("bias concentrations must be > 0".into()));
        }
        Ok(())
    }

    pub fn sample_span(&self, rng: &mut ChaCha8Rng) -> Result<MomentSpan> {
        match self.mode {
            BiasMode::Biased => {
                let start_dist = Beta::new(1.0, self.start_concentration).map_err(|e| Error::Config(e.to_string()))?;
                let len_dist = Beta::new(self.length_shape, self.length_concentration)
                    .map_err(|e| Error::Config(e.to_string()))?;
                let start = start_dist.sample(rng) * (1.0 - self.min_len);
                let len = self.min_len + (self.max_len - self.min_len) * len_dist.sample(rng);
                MomentSpan::new(start, (start + len).min(1.0))
            }
            BiasMode::Uniform => {
                let half = 0.5 * self.min_len;
                let center = rng.random_range(half..1.0 - half);
                let longest = self.max_len.min(2.0 * center.min(1.0 - center)).max(self.min_len);
                let len = if longest > self.min_len {
                    rng.random_range(self.min_len..longest)
                } else {
                    self.min_len
                };
                MomentSpan::new((center - 0.5 * len).max(0.0), (center + 0.5 * len).min(1.0))
            }
        }
    }

    /// Density of the biased sampler at a span, ignoring the clip to 1 at the
    /// end; zero outside its support.
    pub fn biased_density(&self, span: &MomentSpan) -> f64 {
        let s = span.start / (1.0 - self.min_len);
        let l = (span.length() - self.min_len) / (self.max_len - self.min_len);
        if !(0.0..1.0).contains(&s) || !(0.0..1.0).contains(&l) || l <= 0.0 {
            return 0.0;
        }
        let (Ok(sd), Ok(ld)) = (
            BetaPdf::new(1.0, self.start_concentration),
            BetaPdf::new(self.length_shape, self.length_concentration),
        ) else {
            return 0.0;
        };
        sd.pdf(s) / (1.0 - self.min_len) * ld.pdf(l) / (self.max_len - self.min_len)
    }
}

/// Noise injected at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub visual_sigma: f64,
    pub text_replace_ratio: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            visual_sigma: 0.0,
            text_replace_ratio: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn visual(sigma: f64) -> Self {
        Self {
            visual_sigma: sigma,
            ..Self::default()
        }
    }

    pub fn text(ratio: f64) -> Self {
        Self {
            text_replace_ratio: ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.visual_sigma >= 0.0 && self.visual_sigma.is_finite()) {
            return Err(Error::Config(format!("visual_sigma must be >= 0; got {}", self.visual_sigma)));
        }
        if !(0.0..=1.0).contains(&self.text_replace_ratio) {
            return Err(Error::Config(format!(
                "text_replace_ratio must lie in [0, 1]; got {}",
                self.text_replace_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Generation index; unique within a run.
    pub id: u64,
    /// `clips x dim`, last column positional.
    pub video: Tensor2D,
    pub query: Vec<usize>,
    pub gt: MomentSpan,
    pub concept_id: usize,
}

/// Concept signatures, shared by every split generated from one seed.
pub fn concept_signatures(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(cfg.seed, Stream::Concepts, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..cfg.n_concepts)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim - 1).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| cfg.signal_norm * x / norm).collect()
        })
        .collect()
}

fn build_query(cfg: &SynthConfig, vocab: &Vocab, concept: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let [noun, verb, attr] = vocab.concept_tokens(concept);
    let random_attr = |rng: &mut ChaCha8Rng| vocab.attribute(rng.random_range(0..vocab.n_attributes));
    let random_verb = |rng: &mut ChaCha8Rng| vocab.verb(rng.random_range(0..vocab.n_verbs));
    let mut q = Vec::with_capacity(cfg.query_len);
    q.push(if rng.random_bool(cfg.link_prob) { attr } else { random_attr(rng) });
    q.push(noun);
    q.push(if rng.random_bool(cfg.link_prob) { verb } else { random_verb(rng) });
    // Scene noun: a noun outside the concept set when one exists.
    let scene = if vocab.n_nouns > cfg.n_concepts {
        vocab.noun(rng.random_range(cfg.n_concepts..vocab.n_nouns))
    } else {
        let mut other = rng.random_range(0..vocab.n_nouns - 1);
        if other >= concept {
            other += 1;
        }
        vocab.noun(other)
    };
    q.push(scene);
    while q.len() < cfg.query_len {
        let t = if q.len() % 2 == 0 { random_attr(rng) } else { random_verb(rng) };
        q.push(t);
    }
    q
}

/// Tiles `[from, to)` with segments of distractor concepts. Lengths follow
/// the span-length range of `bias`; neighbours never share a concept.
fn distractor_run(
    cfg: &SynthConfig,
    bias: &BiasSpec,
    from: f64,
    to: f64,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64, usize, f64)> {
    let mut out: Vec<(f64, f64, usize, f64)> = Vec::new();
    let mut at = from;
    while at < to {
        let len = rng.random_range(bias.min_len..bias.max_len);
        let end = if to - (at + len) < bias.min_len { to } else { at + len };
        let previous = out.last().map(|seg| seg.2);
        let mut c = rng.random_range(0..cfg.n_concepts - 1);
        if c >= target {
            c += 1;
        }
        if Some(c) == previous {
            c = (0..cfg.n_concepts).find(|&k| k != target && Some(k) != previous).unwrap_or(c);
        }
        let a = rng.random_range(cfg.amplitude_min..=cfg.amplitude_max);
        out.push((at, end, c, a));
        at = end;
    }
    out
}

fn sample_with(
    cfg: &SynthConfig,
    vocab: &Vocab,
    signatures: &[Vec<f64>],
    bias: &BiasSpec,
    id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let concept = rng.random_range(0..cfg.n_concepts);
    let gt = bias.sample_span(rng)?;
    let amplitude = rng.random_range(cfg.amplitude_min..=cfg.amplitude_max);
    let jitter = Normal::new(0.0, cfg.clip_jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    // Segments `(start, end, concept, amplitude)` tiling [0, 1]: the target
    // span plus runs of distractor segments on either side, so neither the
    // position nor the strength of a segment reveals which one the query
    // names.
    let mut segments = distractor_run(cfg, bias, 0.0, gt.start, concept, rng);
    segments.push((gt.start, gt.end, concept, amplitude));
    segments.extend(distractor_run(cfg, bias, gt.end, 1.0, concept, rng));

    let (n, d) = (cfg.clips, cfg.dim);
    let mut video = Tensor2D::zeros(n, d);
    for i in 0..n {
        let (lo, hi) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
        let row = video.row_mut(i);
        for &(s, e, c, a) in &segments {
            let overlap = (hi.min(e) - lo.max(s)).max(0.0) * n as f64;
            if overlap > 0.0 {
                for (v, sig) in row[..d - 1].iter_mut().zip(&signatures[c]) {
                    *v += overlap * a * sig;
                }
            }
        }
        if cfg.clip_jitter > 0.0 {
            for v in &mut row[..d - 1] {
                *v += jitter.sample(rng);
            }
        }
        row[d - 1] = cfg.position_scale * 0.5 * (lo + hi);
    }
    Ok(Sample {
        id,
        video,
        query: build_query(cfg, vocab, concept, rng),
        gt,
        concept_id: concept,
    })
}

/// Generates `cfg.n_samples` samples; sample `i` depends only on the seed and `i`.
pub fn generate_dataset(cfg: &SynthConfig, bias: &BiasSpec) -> Result<Vec<Sample>> {
    generate_range(cfg, bias, Stream::Dataset, 0, cfg.n_samples)
}

fn generate_range(cfg: &SynthConfig, bias: &BiasSpec, stream: Stream, first_id: u64, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    bias.validate()?;
    let vocab = cfg.vocab()?;
    let signatures = concept_signatures(cfg);
    (0..count as u64)
        .map(|k| {
            let id = first_id + k;
            let mut rng = stream_rng(cfg.seed, stream, id);
            sample_with(cfg, &vocab, &signatures, bias, id, &mut rng)
        })
        .collect()
}

/// Adds `N(0, sigma^2)` to every non-positional video entry.
pub fn inject_visual_noise(s: &Sample, spec: &NoiseSpec, seed: u64) -> Result<Sample> {
    let sigma = spec.visual_sigma;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("visual noise sigma must be >= 0; got {sigma}")));
    }
    let mut out = s.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, Stream::VisualNoise, s.id);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let d = out.video.cols();
    for r in 0..out.video.rows() {
        for v in &mut out.video.row_mut(r)[..d - 1] {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Replaces each non-mask token with probability `ratio` by the same-class
/// token of a different concept. Returns the noisy sample and the replaced
/// positions.
pub fn inject_text_noise_tracked(
    s: &Sample,
    spec: &NoiseSpec,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<(Sample, Vec<usize>)> {
    let ratio = spec.text_replace_ratio;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("text replace ratio must lie in [0, 1]; got {ratio}")));
    }
    let vocab = cfg.vocab()?;
    let mut out = s.clone();
    let mut replaced = Vec::new();
    if ratio == 0.0 {
        return Ok((out, replaced));
    }
    let mut rng = stream_rng(seed, Stream::TextNoise, s.id);
    for (pos, tok) in out.query.iter_mut().enumerate() {
        let class = vocab.class(*tok);
        if class == TokenClass::Mask || !rng.random_bool(ratio) {
            continue;
        }
        let slot = match class {
            TokenClass::Noun => 0,
            TokenClass::Verb => 1,
            _ => 2,
        };
        // Draw other concepts until the token actually changes.
        let mut candidates: Vec<usize> = (0..cfg.n_concepts).filter(|&c| c != s.concept_id).collect();
        candidates.shuffle(&mut rng);
        let replacement = candidates
            .iter()
            .map(|&c| vocab.concept_tokens(c)[slot])
            .find(|&t| t != *tok)
            .unwrap_or(*tok);
        if replacement != *tok {
            *tok = replacement;
            replaced.push(pos);
        }
    }
    Ok((out, replaced))
}

pub fn inject_text_noise(s: &Sample, spec: &NoiseSpec, seed: u64, cfg: &SynthConfig) -> Result<Sample> {
    inject_text_noise_tracked(s, spec, seed, cfg).map(|(s, _)| s)
}

/// Which query tokens the reconstruction task hides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "ratio")]
pub enum MaskPolicy {
    /// Exactly one noun, chosen at random.
    OneNoun,
    /// Every token independently with this probability.
    Ratio(f64),
    AllNouns,
}

/// Masks the query of `s` under `policy`; `stream_index` selects the draw.
pub fn mask_for_qr(s: &Sample, policy: MaskPolicy, vocab: &Vocab, seed: u64, stream_index: u64) -> Result<MaskedQuery> {
    let nouns: Vec<usize> = s
        .query
        .iter()
        .enumerate()
        .filter(|(_, &t)| vocab.class(t) == TokenClass::Noun)
        .map(|(i, _)| i)
        .collect();
    let mut rng = stream_rng(seed, Stream::Masking, stream_index);
    let positions: Vec<usize> = match policy {
        MaskPolicy::OneNoun | MaskPolicy::AllNouns if nouns.is_empty() => {
            return Err(Error::InvalidInput(format!("query of sample {} has no noun to mask", s.id)))
        }
        MaskPolicy::OneNoun => vec![nouns[rng.random_range(0..nouns.len())]],
        MaskPolicy::AllNouns => nouns,
        MaskPolicy::Ratio(r) => {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidInput(format!("mask ratio must lie in [0, 1]; got {r}")));
            }
            (0..s.query.len()).filter(|_| rng.random_bool(r)).collect()
        }
    };
    let targets = positions.iter().map(|&p| s.query[p]).collect();
    let mut tokens = s.query.clone();
    for &p in &positions {
        tokens[p] = MASK_TOKEN;
    }
    MaskedQuery::new(tokens, positions, targets)
}

/// How a biased dataset is split into train, in-distribution test and
/// temporally out-of-distribution test sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub n_ood: usize,
    /// OOD spans have biased density below this quantile of the training densities.
    pub ood_quantile: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            n_ood: 160,
            ood_quantile: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        if !(self.ood_quantile > 0.0 && self.ood_quantile < 1.0) {
            return Err(Error::Config("ood_quantile must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub test_iid: Vec<Sample>,
    pub test_ood: Vec<Sample>,
}

/// Builds the three splits. Train and in-distribution test come from the
/// biased sampler; OOD candidates are drawn uniformly and kept only where the
/// biased density is low.
pub fn split_iid_ood(cfg: &SynthConfig, bias: &BiasSpec, split: &SplitSpec) -> Result<Splits> {
    split.validate()?;
    let biased = BiasSpec {
        mode: BiasMode::Biased,
        ..*bias
    };
    let mut all = generate_range(cfg, &biased, Stream::Dataset, 0, cfg.n_samples)?;
    let n_test = ((cfg.n_samples as f64) * split.test_fraction).round() as usize;
    if n_test == 0 || n_test >= cfg.n_samples {
        return Err(Error::Config(format!(
            "test fraction {} leaves an empty split of {} samples",
            split.test_fraction, cfg.n_samples
        )));
    }
    let test_iid = all.split_off(cfg.n_samples - n_test);
    let train = all;

    let mut densities: Vec<f64> = train.iter().map(|s| biased.biased_density(&s.gt)).collect();
    densities.sort_by(f64::total_cmp);
    let threshold = densities[((densities.len() - 1) as f64 * split.ood_quantile).round() as usize];

    let uniform = BiasSpec {
        mode: BiasMode::Uniform,
        ..*bias
    };
    let vocab = cfg.vocab()?;
    let signatures = concept_signatures(cfg);
    let mut test_ood = Vec::with_capacity(split.n_ood);
    let first_id = cfg.n_samples as u64;
    let max_attempts = 1000 * split.n_ood.max(1) as u64;
    let mut k = 0u64;
    while test_ood.len() < split.n_ood {
        if k >= max_attempts {
            return Err(Error::Config(format!(
                "found only {} OOD spans in {max_attempts} uniform draws",
                test_ood.len()
            )));
        }
        let id = first_id + k;
        let mut rng = stream_rng(cfg.seed, Stream::OodCandidates, id);
        let s = sample_with(cfg, &vocab, &signatures, &uniform, id, &mut rng)?;
        if biased.biased_density(&s.gt) < threshold {
            test_ood.push(s);
        }
        k += 1;
    }
    Ok(Splits {
        train,
        test_iid,
        test_ood,
    })
}
