//! Full recognizer: backbone features reduced to a unit-norm embedding.
//!
//! Class centers are deliberately not part of this struct — they belong to
//! the objective, not the feature extractor — but checkpoints carry both.

use ndarray::{Array2, Array4, Array5};

use crate::backbone::{BackboneConfig, BackboneModel};
use crate::metric::EmbedHead;
use crate::nn::{BufferVisitor, ParamVisitor, Rng};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Recognizer {
    pub backbone: BackboneModel,
    pub head: EmbedHead,
}

impl Recognizer {
    pub fn build(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        Self::build_with_dropout(config, crate::backbone::DEFAULT_DROPOUT_RATE, rng)
    }

    pub fn build_with_dropout(config: BackboneConfig, dropout_rate: f64, rng: &mut Rng) -> Result<Self> {
        let backbone = BackboneModel::build_with_dropout(config, dropout_rate, rng)?;
        let (c, _, _, _) = backbone.out_shape()?;
        let head = EmbedHead::new(c, rng);
        Ok(Recognizer { backbone, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn in_shape(&self) -> (usize, usize, usize, usize) {
        self.backbone.in_shape()
    }

    /// Unit-norm embeddings `(N, 256)`, inference mode.
    pub fn embed(&self, x: &Array5<f64>) -> Result<Array2<f64>> {
        let features = self.backbone.infer(x)?;
        self.head.infer(&features)
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        let features = self.backbone.train_fwd(x, rng)?;
        self.head.train_fwd(&features)
    }

    /// `de` is the loss gradient w.r.t. the embeddings; `dscores` carries
    /// the attention TV gradients in network order (empty to skip).
    pub fn backward(&mut self, de: &Array2<f64>, dscores: &[Array4<f64>]) -> Array5<f64> {
        let dfeat = self.head.backward(de);
        self.backbone.backward(&dfeat, dscores)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor) {
        self.backbone.visit_params("backbone", f);
        self.head.visit_params("head", f);
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor) {
        self.backbone.visit_buffers("backbone", f);
        self.head.visit_buffers("head", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Trainable parameters across backbone and head.
    pub fn param_count(&mut self) -> u64 {
        let mut n = 0u64;
        self.visit_params(&mut |_, p| n += p.count());
        n
    }
}
