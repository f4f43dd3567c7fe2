//! Evaluation and diagnostic experiments on trained models.

use serde::Serialize;

use crate::config::{NoiseLadder, RunConfig};
use crate::data::{self, inject_text_noise, inject_visual_noise, NoiseSpec, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::heads::{ClipPrediction, LossWeights, MaskedQuery, MomentSpan};
use crate::metrics::{
    calibration_report, metric_report, modality_variance, nms, ood_uncertainty_contrast, CalibrationReport, Detection,
    MetricReport, ModalityVariance, DEFAULT_NMS_THRESHOLD,
};
use crate::model::{BatchItem, FusionKind, Model, ModelConfig, StepConfig, Terms};
use crate::nn::{grad_check, GradCheckReport, ParamStore};
use crate::regularizers::{sample_gradient_field, RegularizerMode};
use crate::rng::{stream_rng, Stream};

/// Post-NMS outcome of one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleEval {
    pub id: u64,
    pub gt: MomentSpan,
    /// Ranked, post-NMS.
    pub detections: Vec<Detection>,
    /// Clip that produced the top detection.
    pub top_clip: usize,
    /// Evidential boundary estimates of the top clip.
    pub evidential_span: (f64, f64),
    /// Mean absolute boundary error of the evidential estimates.
    pub error: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// Ranks clip proposals by foreground probability and applies NMS.
pub fn rank_detections(preds: &[ClipPrediction]) -> Result<(Vec<Detection>, usize)> {
    let dets = preds
        .iter()
        .map(|p| Detection::new(p.decoded_span(), p.score()))
        .collect::<Result<Vec<_>>>()?;
    let top = (0..preds.len())
        .min_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)))
        .ok_or_else(|| Error::InvalidInput("no clip predictions".into()))?;
    Ok((nms(&dets, DEFAULT_NMS_THRESHOLD)?, top))
}

pub fn evaluate_sample(model: &Model, s: &Sample) -> Result<SampleEval> {
    let preds = model.predict(&s.video, &s.query)?;
    let (detections, top) = rank_detections(&preds)?;
    let p = &preds[top];
    Ok(SampleEval {
        id: s.id,
        gt: s.gt,
        detections,
        top_clip: top,
        evidential_span: (p.nig_start.gamma, p.nig_end.gamma),
        error: p.evidential_error(&s.gt),
        aleatoric: p.aleatoric()?,
        epistemic: p.epistemic()?,
    })
}

pub fn evaluate_samples(model: &Model, samples: &[Sample]) -> Result<Vec<SampleEval>> {
    samples.iter().map(|s| evaluate_sample(model, s)).collect()
}

pub fn report_from_evals(evals: &[SampleEval]) -> Result<MetricReport> {
    if evals.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let ranked: Vec<Vec<Detection>> = evals.iter().map(|e| e.detections.clone()).collect();
    let gts: Vec<MomentSpan> = evals.iter().map(|e| e.gt).collect();
    metric_report(&ranked, &gts)
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    report_from_evals(&evaluate_samples(model, samples)?)
}

/// Model plus split compatibility.
pub fn check_split(model: &Model, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    for s in samples {
        if s.video.cols() != model.arch.dim {
            return Err(Error::InvalidInput(format!(
                "sample {} has {}-wide features; the model expects {}",
                s.id,
                s.video.cols(),
                model.arch.dim
            )));
        }
    }
    Ok(())
}

pub fn calibrate(model: &Model, samples: &[Sample], n_bins: usize) -> Result<(CalibrationReport, Vec<SampleEval>)> {
    let evals = evaluate_samples(model, samples)?;
    let errors: Vec<f64> = evals.iter().map(|e| e.error).collect();
    let alea: Vec<f64> = evals.iter().map(|e| e.aleatoric).collect();
    let epi: Vec<f64> = evals.iter().map(|e| e.epistemic).collect();
    Ok((calibration_report(&errors, &alea, &epi, n_bins)?, evals))
}

/// Scatter rows `error,aleatoric,epistemic`, errors normalized by their
/// maximum.
pub fn calibration_csv(evals: &[SampleEval]) -> String {
    let max = evals.iter().map(|e| e.error).fold(0.0, f64::max);
    let mut out = String::from("error,aleatoric,epistemic\n");
    for e in evals {
        let err = if max > 0.0 { e.error / max } else { 0.0 };
        out.push_str(&format!("{},{},{}\n", err, e.aleatoric, e.epistemic));
    }
    out
}

pub fn ood_contrast(model: &Model, test_iid: &[Sample], test_ood: &[Sample]) -> Result<f64> {
    let epi = |set: &[Sample]| -> Result<Vec<f64>> {
        Ok(evaluate_samples(model, set)?.into_iter().map(|e| e.epistemic).collect())
    };
    ood_uncertainty_contrast(&epi(test_iid)?, &epi(test_ood)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSweep {
    /// `(level, modality, per-sample epistemic uncertainties)`.
    pub levels: Vec<(f64, Modality, Vec<f64>)>,
    pub visual_means: Vec<f64>,
    pub text_means: Vec<f64>,
    pub summary: ModalityVariance,
}

impl NoiseSweep {
    /// Rows `noise_level,modality,uncertainty`.
    pub fn csv(&self) -> String {
        let mut out = String::from("noise_level,modality,uncertainty\n");
        for (level, m, values) in &self.levels {
            for v in values {
                out.push_str(&format!("{level},{},{v}\n", m.as_str()));
            }
        }
        out
    }
}

/// Mean epistemic uncertainty per noise level and modality, and the
/// variance of those means across each ladder.
pub fn noise_sweep(
    model: &Model,
    samples: &[Sample],
    ladder: &NoiseLadder,
    synth: &SynthConfig,
    seed: u64,
) -> Result<NoiseSweep> {
    ladder.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("noise sweep over an empty split".into()));
    }
    let mut levels = Vec::new();
    let mut visual_means = Vec::new();
    let mut text_means = Vec::new();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for &sigma in &ladder.visual {
        let spec = NoiseSpec::visual(sigma);
        let values = samples
            .iter()
            .map(|s| evaluate_sample(model, &inject_visual_noise(s, &spec, seed)?).map(|e| e.epistemic))
            .collect::<Result<Vec<_>>>()?;
        visual_means.push(mean(&values));
        levels.push((sigma, Modality::Visual, values));
    }
    for &ratio in &ladder.text {
        let spec = NoiseSpec::text(ratio);
        let values = samples
            .iter()
            .map(|s| evaluate_sample(model, &inject_text_noise(s, &spec, seed, synth)?).map(|e| e.epistemic))
            .collect::<Result<Vec<_>>>()?;
        text_means.push(mean(&values));
        levels.push((ratio, Modality::Text, values));
    }
    let summary = modality_variance(&visual_means, &text_means)?;
    Ok(NoiseSweep {
        levels,
        visual_means,
        text_means,
        summary,
    })
}

/// Rows `delta,phi,minus_grad` of the regularizer gradient field.
pub fn gradient_field_csv(mode: RegularizerMode, resolution: usize) -> Result<String> {
    let mut out = String::from("delta,phi,minus_grad\n");
    for p in sample_gradient_field(mode, resolution)? {
        out.push_str(&format!("{},{},{}\n", p.delta, p.phi, p.minus_grad));
    }
    Ok(out)
}

/// Settings of the assembled-model gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub batch: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

/// Largest tensor the check accepts.
pub const GRADCHECK_MAX_TENSOR: usize = 64;

impl GradCheckSetup {
    /// A small model with every loss weight at 1 so all terms are visible.
    pub fn small(seed: u64) -> Self {
        Self {
            synth: SynthConfig {
                n_samples: 2,
                clips: 8,
                dim: 4,
                vocab_size: 16,
                n_concepts: 4,
                query_len: 6,
                position_scale: 1.0,
                seed,
                ..SynthConfig::default()
            },
            model: ModelConfig {
                fusion: FusionKind::Rff,
                n_rff: 2,
                qr: true,
                ..ModelConfig::default()
            },
            weights: LossWeights {
                lambda_l1: 1.0,
                lambda_iou: 1.0,
                lambda_nll: 1.0,
                lambda_geom: 1.0,
                lambda_reg: 1.0,
                lambda_der: 1.0,
            },
            batch: 2,
            h: 1e-5,
            tol: 1e-4,
            seed,
        }
    }

    /// Small setup derived from a run config's seed, fusion and residual
    /// choices.
    pub fn from_run(cfg: &RunConfig) -> Self {
        let mut s = Self::small(cfg.seed);
        s.model.fusion = cfg.model.fusion;
        s.model.residual = cfg.model.residual;
        s.model.qr = cfg.model.qr;
        s
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeCheck {
    pub mode: RegularizerMode,
    pub loss: f64,
    pub report: GradCheckReport,
}

/// Gradient check of the assembled model under every regularizer mode.
///
/// Parameters are drawn uniformly from `[-0.5, 0.5]` so that every path carries
/// a gradient well above finite-difference roundoff. `corrupt` perturbs the
/// analytic gradient of one tensor and must make the check fail.
pub fn run_grad_check(setup: &GradCheckSetup, corrupt: bool) -> Result<Vec<ModeCheck>> {
    let samples = data::generate_dataset(
        &SynthConfig {
            n_samples: setup.batch,
            ..setup.synth.clone()
        },
        &data::BiasSpec::default(),
    )?;
    let mut model = Model::new(&setup.model, setup.synth.dim, setup.synth.vocab_size, setup.seed)?;
    if let Some(p) = model.store.iter().find(|p| p.value.len() > GRADCHECK_MAX_TENSOR) {
        return Err(Error::Config(format!(
            "tensor {} has {} entries; gradient checks allow at most {GRADCHECK_MAX_TENSOR}",
            p.name,
            p.value.len()
        )));
    }
    randomize(&mut model.store, setup.seed);
    let vocab = setup.synth.vocab()?;
    let masks: Vec<Option<MaskedQuery>> = if setup.model.qr {
        samples
            .iter()
            .map(|s| data::mask_for_qr(s, data::MaskPolicy::OneNoun, &vocab, setup.seed, s.id).map(Some))
            .collect::<Result<_>>()?
    } else {
        vec![None; samples.len()]
    };
    let batch: Vec<BatchItem> = samples
        .iter()
        .zip(&masks)
        .map(|(s, m)| BatchItem {
            video: &s.video,
            tokens: &s.query,
            gt: s.gt,
            mask: m.as_ref(),
        })
        .collect();
    let corrupt_id = model.arch.evidential_params()[0];

    let mut out = Vec::new();
    for mode in RegularizerMode::ALL {
        let step = StepConfig {
            weights: setup.weights,
            mode,
            qr_active: setup.model.qr,
            terms: Terms::default(),
        };
        let arch = model.arch.clone();
        let mut store = model.store.clone();
        let frozen = arch.freeze(&mut store, &batch, &step)?;
        let loss = arch.objective(&mut store, &batch, &step, Some(&frozen), false)?.total;
        let report = grad_check(
            &mut store,
            |st, with_grad| {
                let l = arch.objective(st, &batch, &step, Some(&frozen), with_grad)?.total;
                if with_grad && corrupt {
                    let g = &mut st.get_mut(corrupt_id).grad;
                    g.data_mut()[0] = g.data()[0] * 1.5 + 1e-3;
                }
                Ok(l)
            },
            setup.h,
            setup.tol,
        )?;
        out.push(ModeCheck { mode, loss, report });
    }
    Ok(out)
}

fn randomize(store: &mut ParamStore, seed: u64) {
    use rand::Rng;
    let mut rng = stream_rng(seed, Stream::Init, u64::MAX);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}
