//! Reflective flipped fusion.
//!
//! Each layer runs one cross-attention module twice with its roles swapped
//! (video rows querying text, then text rows querying video), and refines
//! each branch with its own self-attention. Both cross-attention calls read
//! the layer's input state, so the branch updates are independent.

use crate::error::{Error, Result};
use crate::nn::{scaled_dot_attention, Init, ParamId, ParamStore, Tape, Tensor2D, Var};

/// Query/key/value projections of one single-head attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub dim: usize,
}

/// Projection weights of an [`AttentionBlock`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    query: Var,
    key: Var,
    value: Var,
    dim: usize,
}

impl AttentionBlock {
    /// Glorot projections, with the value projection scaled by `value_scale`.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, value_scale: f64, seed: u64) -> Result<Self> {
        let value = store.add(&format!("{name}.value"), dim, dim, Init::Glorot, seed)?;
        store.get_mut(value).value.data_mut().iter_mut().for_each(|w| *w *= value_scale);
        Ok(Self {
            query: store.add(&format!("{name}.query"), dim, dim, Init::Glorot, seed)?,
            key: store.add(&format!("{name}.key"), dim, dim, Init::Glorot, seed)?,
            value,
            dim,
        })
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.query, self.key, self.value]
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundAttention {
        BoundAttention {
            query: tape.param(store, self.query),
            key: tape.param(store, self.key),
            value: tape.param(store, self.value),
            dim: self.dim,
        }
    }
}

impl BoundAttention {
    /// Rows of `queries` attend over rows of `context`.
    pub fn attend(&self, tape: &mut Tape, queries: Var, context: Var) -> Result<Var> {
        let q = tape.matmul(queries, self.query)?;
        let k = tape.matmul(context, self.key)?;
        let v = tape.matmul(context, self.value)?;
        scaled_dot_attention(tape, q, k, v, self.dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Video rows are queries over text keys/values; output is `L_v x D`.
    VideoAsQuery,
    /// Text rows are queries over video keys/values; output is `L_q x D`.
    TextAsQuery,
}

/// Video and text features flowing through the stack.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub video: Var,
    pub text: Var,
    pub layer_index: usize,
}

/// Materialised fusion output.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionState {
    pub video: Tensor2D,
    pub text: Tensor2D,
    pub layer_index: usize,
}

impl FusionState {
    pub fn new(video: Tensor2D, text: Tensor2D) -> Result<Self> {
        if video.cols() != text.cols() {
            return Err(Error::shape("fusion state width", video.shape(), text.shape()));
        }
        if video.rows() == 0 || text.rows() == 0 {
            return Err(Error::InvalidInput("fusion state needs at least one row per branch".into()));
        }
        Ok(Self {
            video,
            text,
            layer_index: 0,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RffLayer {
    /// Shared by both directions.
    pub cross: AttentionBlock,
    pub self_video: AttentionBlock,
    pub self_text: AttentionBlock,
}

/// Per-layer bound weights so a forward pass reads each parameter once.
#[derive(Clone, Copy, Debug)]
pub struct BoundRffLayer {
    pub cross: BoundAttention,
    pub self_video: BoundAttention,
    pub self_text: BoundAttention,
}

impl RffLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, value_scale: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            cross: AttentionBlock::new(store, &format!("{name}.cross"), dim, value_scale, seed)?,
            self_video: AttentionBlock::new(store, &format!("{name}.self_video"), dim, value_scale, seed)?,
            self_text: AttentionBlock::new(store, &format!("{name}.self_text"), dim, value_scale, seed)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.cross, self.self_video, self.self_text]
            .iter()
            .flat_map(|b| b.params())
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundRffLayer {
        BoundRffLayer {
            cross: self.cross.bind(tape, store),
            self_video: self.self_video.bind(tape, store),
            self_text: self.self_text.bind(tape, store),
        }
    }
}

impl BoundRffLayer {
    pub fn cross_attend(&self, tape: &mut Tape, state: FusionVars, direction: Direction) -> Result<Var> {
        check_widths(tape, state)?;
        match direction {
            Direction::VideoAsQuery => self.cross.attend(tape, state.video, state.text),
            Direction::TextAsQuery => self.cross.attend(tape, state.text, state.video),
        }
    }

    pub fn self_refine_video(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.self_video.attend(tape, x, x)
    }

    pub fn self_refine_text(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.self_text.attend(tape, x, x)
    }

    /// One fusion layer. With `residual`, each attention sublayer adds its
    /// output to its input instead of replacing it.
    pub fn forward(&self, tape: &mut Tape, state: FusionVars, residual: bool) -> Result<FusionVars> {
        let mut video = self.cross_attend(tape, state, Direction::VideoAsQuery)?;
        let mut text = self.cross_attend(tape, state, Direction::TextAsQuery)?;
        if residual {
            video = tape.add(state.video, video)?;
            text = tape.add(state.text, text)?;
        }
        let video_sa = self.self_refine_video(tape, video)?;
        let text_sa = self.self_refine_text(tape, text)?;
        if residual {
            video = tape.add(video, video_sa)?;
            text = tape.add(text, text_sa)?;
        } else {
            video = video_sa;
            text = text_sa;
        }
        Ok(FusionVars {
            video,
            text,
            layer_index: state.layer_index + 1,
        })
    }
}

fn check_widths(tape: &Tape, state: FusionVars) -> Result<()> {
    let (v, t) = (tape.value(state.video).shape(), tape.value(state.text).shape());
    if v.1 != t.1 {
        return Err(Error::shape("cross attention width", v, t));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RffOptions {
    /// Skip connection around each attention sublayer.
    pub residual: bool,
    /// Multiplier on the Glorot draw of every value projection.
    pub value_init_scale: f64,
}

impl RffOptions {
    /// Plain composition with unscaled Glorot weights.
    pub const PLAIN: RffOptions = RffOptions {
        residual: false,
        value_init_scale: 1.0,
    };
}

/// `n` stacked fusion layers; layers do not share parameters.
#[derive(Clone, Debug)]
pub struct RffStack {
    pub layers: Vec<RffLayer>,
    pub residual: bool,
}

impl RffStack {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n: usize, options: RffOptions, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("fusion stack needs at least one layer".into()));
        }
        let layers = (0..n)
            .map(|i| RffLayer::new(store, &format!("{name}.{i}"), dim, options.value_init_scale, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            residual: options.residual,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(RffLayer::params).collect()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, video: Var, text: Var) -> Result<FusionVars> {
        let mut state = FusionVars {
            video,
            text,
            layer_index: 0,
        };
        check_widths(tape, state)?;
        for layer in &self.layers {
            let bound = layer.bind(tape, store);
            state = bound.forward(tape, state, self.residual)?;
        }
        Ok(state)
    }

    /// Gradient-free evaluation on plain tensors.
    pub fn evaluate(&self, store: &ParamStore, video: &Tensor2D, text: &Tensor2D) -> Result<FusionState> {
        let state = FusionState::new(video.clone(), text.clone())?;
        let mut tape = Tape::new();
        let v = tape.input(state.video);
        let t = tape.input(state.text);
        let out = self.forward(&mut tape, store, v, t)?;
        Ok(FusionState {
            video: tape.value(out.video).clone(),
            text: tape.value(out.text).clone(),
            layer_index: out.layer_index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Dataset, 0);
        Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_text_row_broadcasts_to_every_clip() {
        let mut store = ParamStore::new();
        let layer = RffLayer::new(&mut store, "l", 4, 1.0, 9).unwrap();
        let mut tape = Tape::new();
        let video = tape.input(rand_tensor(5, 4, 1));
        let text = tape.input(rand_tensor(1, 4, 2));
        let bound = layer.bind(&mut tape, &store);
        let state = FusionVars { video, text, layer_index: 0 };
        let out = bound.cross_attend(&mut tape, state, Direction::VideoAsQuery).unwrap();
        let projected = tape.value(text).matmul(store.value(layer.cross.value)).unwrap();
        let y = tape.value(out);
        assert_eq!(y.shape(), (5, 4));
        for r in 0..5 {
            for c in 0..4 {
                assert!((y.get(r, c) - projected.get(0, c)).abs() < 1e-12);
            }
        }
        let back = bound.cross_attend(&mut tape, state, Direction::TextAsQuery).unwrap();
        assert_eq!(tape.value(back).shape(), (1, 4));
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::new();
        let stack = RffStack::new(&mut store, "s", 4, 1, RffOptions::PLAIN, 0).unwrap();
        assert!(stack.evaluate(&store, &Tensor2D::zeros(3, 4), &Tensor2D::zeros(2, 3)).is_err());
        assert!(RffStack::new(&mut ParamStore::new(), "s", 4, 0, RffOptions::PLAIN, 0).is_err());
    }

    #[test]
    fn layer_has_three_attention_modules() {
        let mut store = ParamStore::new();
        let layer = RffLayer::new(&mut store, "l", 4, 1.0, 0).unwrap();
        assert_eq!(layer.params().len(), 9);
        assert_eq!(store.len(), 9);
    }
}
