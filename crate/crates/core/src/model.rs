//! The assembled retrieval model and its training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{RffOptions, RffStack};
use crate::heads::{foreground_mask, mr_head_forward, ClipPrediction, LossWeights, MaskedQuery, MomentSpan};
use crate::losses::{evidential_factor, evidential_term, mr_loss_with_grad, qr_loss_with_grad};
use crate::nn::{Affine, Embedding, Mlp2, ParamId, ParamStore, Tape, Tensor2D, Var};
use crate::regularizers::{evidence_pair, BatchScale, EvidencePair, RegularizerMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Stacked reflective flipped fusion layers.
    Rff,
    /// Each clip concatenated with the mean query embedding, then a two-layer MLP.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion: FusionKind,
    pub n_rff: usize,
    /// Skip connection around each fusion attention sublayer.
    pub residual: bool,
    /// Multiplier on the Glorot draw of fusion value projections.
    pub value_init_scale: f64,
    /// Build the query-reconstruction head.
    pub qr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionKind::Rff,
            n_rff: 4,
            residual: true,
            value_init_scale: 0.1,
            qr: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self.fusion {
            FusionKind::Rff if self.n_rff == 0 => Err(Error::Config("n_rff must be >= 1".into())),
            _ if !(self.value_init_scale > 0.0 && self.value_init_scale <= 10.0) => Err(Error::Config(format!(
                "model.value_init_scale must lie in (0, 10]; got {}",
                self.value_init_scale
            ))),
            FusionKind::Concat if self.qr => Err(Error::Config(
                "query reconstruction reads the fused text branch; the concat fusion has none".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    Rff(RffStack),
    Concat(Mlp2),
}

/// Parameter layout of the model. Values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub dim: usize,
    pub vocab_size: usize,
    embedding: Embedding,
    fusion: Fusion,
    foreground: Affine,
    offsets: Affine,
    evidential: Affine,
    qr_head: Option<Affine>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub fused_video: Var,
    pub fused_text: Option<Var>,
    /// `L x 1`.
    pub logits: Var,
    /// `L x 2`, after softplus.
    pub offsets: Var,
    /// `L x 8` raw evidential outputs.
    pub evidential: Var,
    /// The evidential head applied to a gradient-stopped copy of the fused
    /// features; carries the regularizer gradient.
    pub evidential_detached: Var,
    pub qr_logits: Option<Var>,
}

impl Architecture {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, dim: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dim == 0 || vocab_size == 0 {
            return Err(Error::Config("model width and vocabulary must be nonzero".into()));
        }
        let embedding = Embedding::new(store, "text.embedding", vocab_size, dim, seed)?;
        let fusion = match config.fusion {
            FusionKind::Rff => Fusion::Rff(RffStack::new(
                store,
                "fusion.rff",
                dim,
                config.n_rff,
                RffOptions {
                    residual: config.residual,
                    value_init_scale: config.value_init_scale,
                },
                seed,
            )?),
            FusionKind::Concat => Fusion::Concat(Mlp2::new(store, "fusion.concat", 2 * dim, dim, dim, seed)?),
        };
        let foreground = Affine::new(store, "head.foreground", dim, 1, seed)?;
        let offsets = Affine::new(store, "head.offsets", dim, 2, seed)?;
        let evidential = Affine::new(store, "head.evidential", dim, 8, seed)?;
        let qr_head = if config.qr {
            Some(Affine::new(store, "head.qr", dim, vocab_size, seed)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            dim,
            vocab_size,
            embedding,
            fusion,
            foreground,
            offsets,
            evidential,
            qr_head,
        })
    }

    pub fn qr_params(&self) -> Vec<ParamId> {
        self.qr_head.map(|h| h.params().to_vec()).unwrap_or_default()
    }

    pub fn evidential_params(&self) -> [ParamId; 2] {
        self.evidential.params()
    }

    /// Everything between the raw inputs and the heads.
    pub fn fusion_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding.table];
        match &self.fusion {
            Fusion::Rff(stack) => ids.extend(stack.params()),
            Fusion::Concat(mlp) => {
                ids.extend(mlp.hidden.params());
                ids.extend(mlp.output.params());
            }
        }
        ids
    }

    fn check_inputs(&self, video: &Tensor2D, tokens: &[usize]) -> Result<()> {
        if video.cols() != self.dim || video.rows() == 0 {
            return Err(Error::InvalidInput(format!(
                "video features are {}x{}; the model expects L x {}",
                video.rows(),
                video.cols(),
                self.dim
            )));
        }
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty query".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::InvalidInput(format!("token {t} outside a {}-token vocabulary", self.vocab_size)));
        }
        Ok(())
    }

    /// Records one forward pass. `qr_positions` selects the fused text rows
    /// fed to the reconstruction head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        video: &Tensor2D,
        tokens: &[usize],
        qr_positions: Option<&[usize]>,
    ) -> Result<ForwardVars> {
        self.check_inputs(video, tokens)?;
        let v = tape.input(video.clone());
        let t = self.embedding.forward(tape, store, tokens)?;
        let (fused_video, fused_text) = match &self.fusion {
            Fusion::Rff(stack) => {
                let out = stack.forward(tape, store, v, t)?;
                (out.video, Some(out.text))
            }
            Fusion::Concat(mlp) => {
                let pooled = tape.mean_rows(t);
                let pooled = tape.repeat_rows(pooled, video.rows())?;
                let joint = tape.concat_cols(v, pooled)?;
                (mlp.forward(tape, store, joint)?, None)
            }
        };
        let logits = self.foreground.forward(tape, store, fused_video)?;
        let offsets = self.offsets.forward(tape, store, fused_video)?;
        let offsets = tape.softplus(offsets);
        let evidential = self.evidential.forward(tape, store, fused_video)?;
        let detached = tape.detach(fused_video);
        let evidential_detached = self.evidential.forward(tape, store, detached)?;
        let qr_logits = match (qr_positions, self.qr_head, fused_text) {
            (Some(pos), Some(head), Some(text)) if !pos.is_empty() => {
                let rows = tape.gather(text, pos)?;
                Some(head.forward(tape, store, rows)?)
            }
            (Some(pos), None, _) if !pos.is_empty() => {
                return Err(Error::Config("model has no query-reconstruction head".into()))
            }
            _ => None,
        };
        Ok(ForwardVars {
            fused_video,
            fused_text,
            logits,
            offsets,
            evidential,
            evidential_detached,
            qr_logits,
        })
    }

    pub fn predict(&self, store: &ParamStore, video: &Tensor2D, tokens: &[usize]) -> Result<Vec<ClipPrediction>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, store, video, tokens, None)?;
        mr_head_forward(tape.value(f.logits), tape.value(f.offsets), tape.value(f.evidential))
    }

    /// Batch objective: mean moment-retrieval loss, plus the evidential term
    /// over all foreground clips of the batch, plus (when active) the mean
    /// reconstruction loss. When `accumulate` is set, gradients are added to
    /// `store`.
    ///
    /// `frozen` pins the gradient-stopped quantities (fused features seen by
    /// the regularizer and the batch normalizers) to values captured by an
    /// earlier call, which makes the returned loss the function whose
    /// gradient is accumulated. Pass `None` in training.
    pub fn objective(
        &self,
        store: &mut ParamStore,
        batch: &[BatchItem<'_>],
        step: &StepConfig,
        frozen: Option<&Frozen>,
        accumulate: bool,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut tape = Tape::new();
        let mut passes = Vec::with_capacity(batch.len());
        for (k, item) in batch.iter().enumerate() {
            let qr_positions = match (step.qr_active && step.terms.qr, item.mask) {
                (true, Some(mq)) => Some(mq.mask_positions.as_slice()),
                _ => None,
            };
            let tokens = match (qr_positions, item.mask) {
                (Some(_), Some(mq)) => mq.tokens.as_slice(),
                _ => item.tokens,
            };
            let mut f = self.forward(&mut tape, store, item.video, tokens, qr_positions)?;
            if let Some(fz) = frozen {
                let fixed = fz.fused.get(k).ok_or_else(|| Error::InvalidInput("frozen state batch size mismatch".into()))?;
                let fixed = tape.input(fixed.clone());
                f.evidential_detached = self.evidential.forward(&mut tape, store, fixed)?;
            }
            passes.push(f);
        }

        // Foreground observations: (sample, clip, boundary, target).
        let mut observations = Vec::new();
        for (k, item) in batch.iter().enumerate() {
            let n = item.video.rows();
            for (i, fg) in foreground_mask(&item.gt, n).into_iter().enumerate() {
                if fg {
                    observations.push((k, i, 0usize, item.gt.start));
                    observations.push((k, i, 1usize, item.gt.end));
                }
            }
        }
        let n_fg = observations.len() / 2;

        let mut loss = BatchLoss::default();
        let mut seeds: Vec<(Var, Tensor2D)> = Vec::new();
        for (item, f) in batch.iter().zip(&passes) {
            let n = item.video.rows();
            let mask = foreground_mask(&item.gt, n);
            let mr = mr_loss_with_grad(tape.value(f.logits), tape.value(f.offsets), &item.gt, &mask, &step.weights)?;
            if step.terms.mr {
                loss.mr += inv_b * mr.value;
                seeds.push((f.logits, mr.d_logits.map(|g| g * inv_b)));
                seeds.push((f.offsets, mr.d_offsets.map(|g| g * inv_b)));
            }
            if let (Some(var), Some(mq)) = (f.qr_logits, item.mask) {
                let (qr, d) = qr_loss_with_grad(tape.value(var), mq, self.vocab_size)?;
                loss.qr += inv_b * qr;
                seeds.push((var, d.map(|g| g * inv_b)));
            }
        }

        let mode = step.mode;
        let evidential_on = mode != RegularizerMode::None && (step.terms.nll || step.terms.reg);
        if evidential_on && n_fg > 0 {
            let raw_of = |var: Var, i: usize, side: usize| -> [f64; 4] {
                let row = tape.value(var).row(i);
                [row[4 * side], row[4 * side + 1], row[4 * side + 2], row[4 * side + 3]]
            };
            let scale = match (mode, frozen.and_then(|f| f.scale)) {
                (RegularizerMode::Geom, Some(s)) => Some(s),
                (RegularizerMode::Geom, None) => {
                    let pairs = observations
                        .iter()
                        .map(|&(k, i, side, b)| {
                            let p = crate::evidential::constrain_raw_to_nig(raw_of(passes[k].evidential, i, side))?;
                            Ok(evidence_pair(b, &p))
                        })
                        .collect::<Result<Vec<EvidencePair>>>()?;
                    Some(BatchScale::of(&pairs)?)
                }
                _ => None,
            };
            loss.scale = scale;
            let factor = evidential_factor(mode, n_fg)? * step.weights.lambda_der;
            let mut d_main: Vec<Tensor2D> = passes.iter().map(|f| Tensor2D::zeros(tape.value(f.evidential).rows(), 8)).collect();
            let mut d_reg = d_main.clone();
            for &(k, i, side, b) in &observations {
                let f = &passes[k];
                let term = evidential_term(b, raw_of(f.evidential, i, side), scale.as_ref(), &step.weights, mode)?;
                // The regularizer is evaluated on the detached branch; its value
                // only differs from the main branch under a frozen state.
                let reg_term = if frozen.is_some() {
                    evidential_term(b, raw_of(f.evidential_detached, i, side), scale.as_ref(), &step.weights, mode)?
                } else {
                    term
                };
                if step.terms.nll {
                    loss.evidential += factor * step.weights.lambda_nll * term.nll;
                    loss.nll += term.nll / observations.len() as f64;
                    for c in 0..4 {
                        d_main[k].row_mut(i)[4 * side + c] += factor * term.d_raw_nll[c];
                    }
                }
                if step.terms.reg {
                    loss.evidential += factor * reg_term.reg;
                    loss.reg += reg_term.reg / observations.len() as f64;
                    for c in 0..4 {
                        d_reg[k].row_mut(i)[4 * side + c] += factor * reg_term.d_raw_reg[c];
                    }
                }
            }
            for (f, (dm, dr)) in passes.iter().zip(d_main.into_iter().zip(d_reg)) {
                seeds.push((f.evidential, dm));
                seeds.push((f.evidential_detached, dr));
            }
        }
        loss.n_foreground = n_fg;
        loss.total = loss.mr + loss.evidential + loss.qr;
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite batch loss {}", loss.total)));
        }
        if accumulate {
            tape.backward(&seeds, store)?;
        }
        Ok(loss)
    }

    /// Captures the gradient-stopped quantities of `batch` at the current
    /// parameters, for [`Architecture::objective`] with `frozen`.
    pub fn freeze(&self, store: &mut ParamStore, batch: &[BatchItem<'_>], step: &StepConfig) -> Result<Frozen> {
        let mut fused = Vec::with_capacity(batch.len());
        for item in batch {
            let mut tape = Tape::new();
            let qr_positions = match (step.qr_active && step.terms.qr, item.mask) {
                (true, Some(mq)) => Some(mq.mask_positions.as_slice()),
                _ => None,
            };
            let tokens = match (qr_positions, item.mask) {
                (Some(_), Some(mq)) => mq.tokens.as_slice(),
                _ => item.tokens,
            };
            let f = self.forward(&mut tape, store, item.video, tokens, qr_positions)?;
            fused.push(tape.value(f.fused_video).clone());
        }
        let loss = self.objective(store, batch, step, None, false)?;
        Ok(Frozen {
            fused,
            scale: loss.scale,
        })
    }
}

/// One training example as seen by the objective.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub video: &'a Tensor2D,
    pub tokens: &'a [usize],
    pub gt: MomentSpan,
    /// Masked query for reconstruction; its tokens replace `tokens` while
    /// reconstruction is active.
    pub mask: Option<&'a MaskedQuery>,
}

/// Which objective terms contribute. All on in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub mr: bool,
    pub nll: bool,
    pub reg: bool,
    pub qr: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Self {
            mr: true,
            nll: true,
            reg: true,
            qr: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub weights: LossWeights,
    pub mode: RegularizerMode,
    pub qr_active: bool,
    pub terms: Terms,
}

/// Gradient-stopped values pinned by [`Architecture::freeze`].
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    pub fused: Vec<Tensor2D>,
    pub scale: Option<BatchScale>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BatchLoss {
    pub total: f64,
    pub mr: f64,
    /// Weighted evidential contribution to `total`.
    pub evidential: f64,
    pub qr: f64,
    /// Unweighted mean likelihood term per boundary observation.
    pub nll: f64,
    /// Weighted mean regularizer per boundary observation.
    pub reg: f64,
    pub n_foreground: usize,
    #[serde(skip)]
    pub scale: Option<BatchScale>,
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig, dim: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Architecture::new(&mut store, config, dim, vocab_size, seed)?;
        Ok(Self { arch, store })
    }

    pub fn predict(&self, video: &Tensor2D, tokens: &[usize]) -> Result<Vec<ClipPrediction>> {
        self.arch.predict(&self.store, video, tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    pub(super) fn toy() -> (Vec<Tensor2D>, Vec<Vec<usize>>, Vec<MomentSpan>) {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, crate::rng::Stream::Dataset, 0);
        let videos = (0..2)
            .map(|_| Tensor2D::from_vec(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let tokens = vec![vec![1, 2, 3], vec![4, 5, 1, 2]];
        let spans = vec![MomentSpan::new(0.1, 0.45).unwrap(), MomentSpan::new(0.5, 0.93).unwrap()];
        (videos, tokens, spans)
    }

    #[test]
    fn regularizer_alone_leaves_fusion_untouched() {
        let mut model = Model::new(&ModelConfig { n_rff: 2, ..ModelConfig::default() }, 4, 8, 1).unwrap();
        let (videos, tokens, spans) = toy();
        let batch: Vec<BatchItem> = (0..2)
            .map(|k| BatchItem { video: &videos[k], tokens: &tokens[k], gt: spans[k], mask: None })
            .collect();
        let step = StepConfig {
            weights: LossWeights { lambda_der: 1.0, ..LossWeights::default() },
            mode: RegularizerMode::Geom,
            qr_active: false,
            terms: Terms { mr: false, nll: false, reg: true, qr: false },
        };
        let loss = model.arch.objective(&mut model.store, &batch, &step, None, true).unwrap();
        assert!(loss.reg > 0.0);
        for id in model.arch.fusion_params() {
            assert!(model.store.grad(id).data().iter().all(|&g| g == 0.0), "{}", model.store.get(id).name);
        }
        let [w, _] = model.arch.evidential_params();
        assert!(model.store.grad(w).max_abs() > 0.0);
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Init, 99);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }

    #[test]
    fn concat_with_qr_rejected() {
        let cfg = ModelConfig { fusion: FusionKind::Concat, qr: true, ..ModelConfig::default() };
        assert!(Model::new(&cfg, 4, 8, 0).is_err());
    }

    #[test]
    fn small_model_gradients_match() {
        for fusion in [FusionKind::Rff, FusionKind::Concat] {
            let cfg = ModelConfig { fusion, n_rff: 1, qr: fusion == FusionKind::Rff, ..ModelConfig::default() };
            let mut model = Model::new(&cfg, 4, 8, 2).unwrap();
            randomize(&mut model.store, 5);
            let (videos, tokens, spans) = toy();
            let mq = MaskedQuery::new(vec![1, 0, 3], vec![1], vec![2]).unwrap();
            let batch: Vec<BatchItem> = (0..2)
                .map(|k| BatchItem { video: &videos[k], tokens: &tokens[k], gt: spans[k], mask: (k == 0).then_some(&mq) })
                .collect();
            let step = StepConfig {
                weights: LossWeights { lambda_der: 1.0, lambda_geom: 1.0, ..LossWeights::default() },
                mode: RegularizerMode::Geom,
                qr_active: cfg.qr,
                terms: Terms::default(),
            };
            let arch = model.arch.clone();
            let frozen = arch.freeze(&mut model.store, &batch, &step).unwrap();
            let report = grad_check(
                &mut model.store,
                |st, g| Ok(arch.objective(st, &batch, &step, Some(&frozen), g)?.total),
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{:?}", report.offenders().collect::<Vec<_>>());
        }
    }
}
