//! The segmentation network: a ViT encoder producing one feature vector per
//! RoI, followed by a single- or dual-head convolutional mask decoder.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DecoderStage, HeadKind, ModelConfig, INPUT_CHANNELS};
pub use network::{
    truncated_normal, DecoderLayout, ForwardOptions, ForwardOutput, Network, StageShape, INIT_STD, LN_EPS,
};
pub use params::{BnUpdate, ParamEntry, ParamId, ParamRole, ParamStore};

use crate::autodiff::{ParamAccess, Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::ops::NormMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use network::Forward;

/// Encoder output `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector<T> {
    pub values: Tensor<T>,
}

/// Mask probabilities `[N,1,S,S]`, strictly inside (0,1).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub amodal: Tensor<T>,
    pub occluded: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    network: Network,
    params: ParamStore<T>,
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

impl<T: Scalar> Model<T> {
    /// Builds the network and initializes its parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let network = Network::build(&config, &mut params)?;
        Ok(Self { config, network, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layout(&self) -> DecoderLayout {
        self.network.layout()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            network: self.network.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_side;
        if shape.len() != 4 {
            return dim_err(format!("model input must be [N,4,S,S], got {shape:?}"));
        }
        if shape[1] != INPUT_CHANNELS {
            return contract_err(format!(
                "model input needs {INPUT_CHANNELS} channels (RGB + visible mask), got {}",
                shape[1]
            ));
        }
        if shape[2] != s || shape[3] != s {
            return dim_err(format!("model input side must be {s}, got {}x{}", shape[2], shape[3]));
        }
        Ok(())
    }

    /// Records a full forward pass of `x: [N,4,S,S]` on `tape` using this
    /// model's parameters as tape parameters keyed by [`ParamId`].
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        mode: NormMode,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        self.check_input(tape.shape(x))?;
        let mut f = Forward {
            tape,
            params: &self.params,
            mode,
            bn_updates: Vec::new(),
            trace: Vec::new(),
        };
        let features = f.encode(&self.network.encoder, x, self.config.heads)?;
        let (amodal, occluded) = f.decode(&self.network.decoder, features, opts)?;
        Ok(ForwardOutput {
            features,
            amodal,
            occluded,
            bn_updates: f.bn_updates,
            trace: f.trace,
        })
    }

    /// Inference with running batch-norm statistics.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Prediction<T>> {
        self.predict_traced(x, ForwardOptions::default()).map(|(p, _)| p)
    }

    pub fn predict_traced(&self, x: &Tensor<T>, opts: ForwardOptions) -> Result<(Prediction<T>, Vec<StageShape>)> {
        let mut tape = Tape::no_grad();
        let xv = tape.input(x);
        let out = self.forward(&mut tape, xv, NormMode::Eval, opts)?;
        let amodal = tape.value(out.amodal).clone();
        let occluded = out.occluded.map(|o| tape.value(o).clone());
        Ok((Prediction { amodal, occluded }, out.trace))
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<FeatureVector<T>> {
        self.check_input(x.shape())?;
        let mut tape = Tape::no_grad();
        let xv = tape.input(x);
        let mut f = Forward {
            tape: &mut tape,
            params: &self.params,
            mode: NormMode::Eval,
            bn_updates: Vec::new(),
            trace: Vec::new(),
        };
        let v = f.encode(&self.network.encoder, xv, self.config.heads)?;
        Ok(FeatureVector { values: tape.take(v) })
    }

    /// Patch tokens with positional embeddings, `[N, T, D]`.
    pub fn patch_embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut tape = Tape::no_grad();
        let xv = tape.input(x);
        let mut f = Forward {
            tape: &mut tape,
            params: &self.params,
            mode: NormMode::Eval,
            bn_updates: Vec::new(),
            trace: Vec::new(),
        };
        let t = f.patch_embed(&self.network.encoder, xv)?;
        Ok(tape.take(t))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        self.params.apply_bn_updates(updates);
    }

    /// Installs 3-channel patch-projection weights, extended to 4 channels
    /// with [`adapt_input_weights`].
    pub fn load_rgb_patch_weights(&mut self, rgb: &Tensor<T>) -> Result<()> {
        let adapted = adapt_input_weights(rgb)?;
        let id = self.network.patch_weight();
        if adapted.shape() != self.params.get(id).shape() {
            return dim_err(format!(
                "patch weights {:?} do not fit {:?}",
                adapted.shape(),
                self.params.get(id).shape()
            ));
        }
        self.params.replace(id, adapted.into_data())
    }
}

/// Extends `[D,3,p,p]` patch weights to `[D,4,p,p]`: channels 0..3 are
/// copied and channel 3 is their mean.
pub fn adapt_input_weights<T: Scalar>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let s = rgb.shape();
    if s.len() != 4 || s[1] != 3 {
        return dim_err(format!("expected [D,3,p,p] weights, got {s:?}"));
    }
    let (d, plane) = (s[0], s[2] * s[3]);
    let src = rgb.data();
    let three = T::lit(3.0);
    let mut out = Vec::with_capacity(d * 4 * plane);
    for o in 0..d {
        let base = o * 3 * plane;
        out.extend_from_slice(&src[base..base + 3 * plane]);
        out.extend((0..plane).map(|i| (src[base + i] + src[base + plane + i] + src[base + 2 * plane + i]) / three));
    }
    Tensor::new(vec![d, 4, s[2], s[3]], out)
}

impl ParamAccess for Model<f64> {
    fn count(&self) -> usize {
        self.params.count()
    }
    fn tensor(&self, i: usize) -> &Tensor<f64> {
        self.params.tensor(i)
    }
    fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f64> {
        self.params.tensor_mut(i)
    }
    fn label(&self, i: usize) -> String {
        self.params.label(i)
    }
}
