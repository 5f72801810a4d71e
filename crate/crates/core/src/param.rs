//! Trainable parameters and their attention-head annotations.

use serde::{Deserialize, Serialize};

use crate::optim::{AdamState, MuonState};
use crate::tensor::Tensor;

/// What an attention weight contributes to, which decides how QK-Clip treats it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnRole {
    /// MHA `W_q` or MLA `W_qc` (query content up-projection).
    Query,
    /// MHA `W_k` or MLA `W_kc`.
    Key,
    /// MLA `W_qr`, head-specific rotary query.
    QueryRotary,
    /// MLA `W_kr`, one rotary key shared by all heads of a layer. Never clipped.
    SharedKeyRotary,
    Value,
    Output,
    QueryDown,
    KvDown,
}

impl AttnRole {
    pub fn is_clippable(self) -> bool {
        matches!(self, AttnRole::Query | AttnRole::Key | AttnRole::QueryRotary)
    }
}

/// Marks a weight as belonging to attention layer `layer`. For per-head roles the
/// columns are split into `heads` contiguous blocks of `head_width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSlice {
    pub layer: usize,
    pub role: AttnRole,
    pub heads: usize,
    pub head_width: usize,
}

impl HeadSlice {
    pub fn columns(&self, head: usize) -> std::ops::Range<usize> {
        head * self.head_width..(head + 1) * self.head_width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimState {
    Muon(MuonState),
    Adam(AdamState),
}

/// Which optimizer updates a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Muon,
    AdamW,
}

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub state: OptimState,
    pub head_slice: Option<HeadSlice>,
    /// Hidden 2-D matrices go to Muon; embeddings, the LM head and gains do not.
    pub muon_eligible: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let state = OptimState::Adam(AdamState::new(value.shape()));
        Self {
            name: name.into(),
            value,
            grad,
            state,
            head_slice: None,
            muon_eligible: false,
        }
    }

    pub fn matrix(name: impl Into<String>, value: Tensor) -> Self {
        let mut p = Self::new(name, value);
        p.muon_eligible = p.value.rank() == 2;
        p
    }

    pub fn with_head_slice(mut self, slice: HeadSlice) -> Self {
        self.head_slice = Some(slice);
        self
    }

    /// Resets optimizer state for `route`.
    pub fn init_state(&mut self, route: Route) {
        self.state = match route {
            Route::Muon => OptimState::Muon(MuonState::new(self.value.shape())),
            Route::AdamW => OptimState::Adam(AdamState::new(self.value.shape())),
        };
    }

    /// Multiplies the columns of `head` by `factor`. Other columns are untouched.
    pub fn scale_head(&mut self, head: usize, factor: f64) {
        let slice = self.head_slice.expect("scale_head on a parameter without head slices");
        let cols = self.value.cols();
        let range = slice.columns(head);
        for row in self.value.data_mut().chunks_mut(cols) {
            for x in &mut row[range.clone()] {
                *x *= factor;
            }
        }
    }

    /// Copy of the columns belonging to `head`.
    pub fn head_block(&self, head: usize) -> Tensor {
        let slice = self.head_slice.expect("head_block on a parameter without head slices");
        let cols = self.value.cols();
        let range = slice.columns(head);
        let data: Vec<f64> = self
            .value
            .data()
            .chunks(cols)
            .flat_map(|row| row[range.clone()].iter().copied())
            .collect();
        Tensor::new(&[self.value.rows(), slice.head_width], data).expect("block shape")
    }
}
