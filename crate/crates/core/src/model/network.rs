use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{HeadKind, ModelConfig, INPUT_CHANNELS};
use super::params::{BnUpdate, ParamId, ParamRole, ParamStore};
use crate::autodiff::{NormStats, Tape, Var};
use crate::error::Result;
use crate::ops::{NormMode, BN_EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Layer-norm epsilon in the encoder.
pub const LN_EPS: f64 = 1e-6;

/// Normal(0, std) resampled until it lies within two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    patch: Conv,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

/// Transposed-conv upsample, 3x3 conv, batch norm, ReLU.
#[derive(Clone, Debug)]
pub(crate) struct DecoderBlock {
    up: Conv,
    conv: Conv,
    bn: BatchNorm,
}

/// 1x1 conv, batch norm, ReLU.
#[derive(Clone, Debug)]
pub(crate) struct Reduce {
    conv: Conv,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub(crate) enum Decoder {
    Single {
        blocks: Vec<DecoderBlock>,
        hidden: Conv,
        out: Conv,
    },
    Dual {
        shared: Vec<DecoderBlock>,
        amodal_reduce: Reduce,
        occluded_reduce: Reduce,
        amodal_blocks: Vec<DecoderBlock>,
        occluded_blocks: Vec<DecoderBlock>,
        amodal_hidden: Conv,
        amodal_out: Conv,
        occluded_out: Conv,
    },
}

/// Layer structure of a built network.
#[derive(Clone, Debug)]
pub struct Network {
    pub(crate) encoder: Encoder,
    pub(crate) decoder: Decoder,
}

/// Number of decoder blocks and head convolutions, by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayout {
    pub shared_blocks: usize,
    pub branch_blocks: usize,
    pub branches: usize,
    pub amodal_head_convs: usize,
    pub occluded_head_convs: usize,
}

struct Builder<'s, T> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, role: ParamRole, shape: Vec<usize>) -> Result<ParamId> {
        let t = match role {
            ParamRole::Weight => {
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::lit(truncated_normal(rng, INIT_STD)))
            }
            ParamRole::Bias | ParamRole::NormShift | ParamRole::RunningMean => Tensor::zeros(shape),
            ParamRole::NormScale | ParamRole::RunningVar => Tensor::ones(shape),
        };
        self.store.insert(name, role, t)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.add(format!("{name}.weight"), ParamRole::Weight, vec![din, dout])?,
            b: self.add(format!("{name}.bias"), ParamRole::Bias, vec![dout])?,
        })
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Conv> {
        Ok(Conv {
            w: self.add(format!("{name}.weight"), ParamRole::Weight, vec![cout, cin, k, k])?,
            b: self.add(format!("{name}.bias"), ParamRole::Bias, vec![cout])?,
            stride,
            pad,
        })
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv> {
        Ok(Conv {
            w: self.add(format!("{name}.weight"), ParamRole::Weight, vec![cin, cout, k, k])?,
            b: self.add(format!("{name}.bias"), ParamRole::Bias, vec![cout])?,
            stride,
            pad: 0,
        })
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.add(format!("{name}.gamma"), ParamRole::NormScale, vec![c])?,
            beta: self.add(format!("{name}.beta"), ParamRole::NormShift, vec![c])?,
            mean: self.add(format!("{name}.running_mean"), ParamRole::RunningMean, vec![c])?,
            var: self.add(format!("{name}.running_var"), ParamRole::RunningVar, vec![c])?,
        })
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.add(format!("{name}.gamma"), ParamRole::NormScale, vec![d])?,
            beta: self.add(format!("{name}.beta"), ParamRole::NormShift, vec![d])?,
        })
    }

    /// Upsample from `(cin, side_in)` to `(cout, side_out)`. A 1x1 input is
    /// expanded by a transposed conv whose kernel spans the whole target;
    /// otherwise kernel and stride equal the integer scale factor.
    fn decoder_block(&mut self, name: &str, cin: usize, side_in: usize, cout: usize, side_out: usize) -> Result<DecoderBlock> {
        let (k, stride) = if side_in == 1 { (side_out, 1) } else { let r = side_out / side_in; (r, r) };
        Ok(DecoderBlock {
            up: self.conv_t(&format!("{name}.up"), cin, cout, k, stride)?,
            conv: self.conv(&format!("{name}.conv"), cout, cout, 3, 1, 1)?,
            bn: self.batch_norm(&format!("{name}.bn"), cout)?,
        })
    }

    fn reduce(&mut self, name: &str, cin: usize, cout: usize) -> Result<Reduce> {
        Ok(Reduce {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 1, 1, 0)?,
            bn: self.batch_norm(&format!("{name}.bn"), cout)?,
        })
    }
}

impl Network {
    /// Builds the layer structure and initializes every tensor in `store`
    /// from `config.seed`.
    pub(crate) fn build<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store,
            rng: <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed),
        };
        let (d, p) = (config.embed_dim, config.patch_size);
        let patch = b.conv("encoder.patch", INPUT_CHANNELS, d, p, p, 0)?;
        let pos = b.add("encoder.pos".into(), ParamRole::Weight, vec![config.tokens(), d])?;
        let hidden = d * config.mlp_ratio;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let n = format!("encoder.block{i}");
            blocks.push(EncoderBlock {
                ln1: b.layer_norm(&format!("{n}.ln1"), d)?,
                q: b.linear(&format!("{n}.attn.q"), d, d)?,
                k: b.linear(&format!("{n}.attn.k"), d, d)?,
                v: b.linear(&format!("{n}.attn.v"), d, d)?,
                o: b.linear(&format!("{n}.attn.o"), d, d)?,
                ln2: b.layer_norm(&format!("{n}.ln2"), d)?,
                fc1: b.linear(&format!("{n}.mlp.fc1"), d, hidden)?,
                fc2: b.linear(&format!("{n}.mlp.fc2"), hidden, d)?,
            });
        }
        let norm = b.layer_norm("encoder.norm", d)?;
        let encoder = Encoder { patch, pos, blocks, norm };

        let s = &config.decoder_schedule;
        let decoder = match config.head_kind {
            HeadKind::Single => {
                let mut blocks = Vec::with_capacity(4);
                for i in 0..4 {
                    blocks.push(b.decoder_block(
                        &format!("decoder.block{}", i + 1),
                        s[i].channels,
                        s[i].side,
                        s[i + 1].channels,
                        s[i + 1].side,
                    )?);
                }
                let c4 = s[4].channels;
                Decoder::Single {
                    blocks,
                    hidden: b.conv("head.hidden", c4, c4 / 2, 3, 1, 1)?,
                    out: b.conv("head.out", c4 / 2, 1, 1, 1, 0)?,
                }
            }
            HeadKind::Dual => {
                let mut shared = Vec::with_capacity(2);
                for i in 0..2 {
                    shared.push(b.decoder_block(
                        &format!("decoder.shared{}", i + 1),
                        s[i].channels,
                        s[i].side,
                        s[i + 1].channels,
                        s[i + 1].side,
                    )?);
                }
                let (c2, c3, c4) = (s[2].channels, s[3].channels / 2, s[4].channels / 2);
                let branch = |b: &mut Builder<'_, T>, name: &str| -> Result<(Reduce, Vec<DecoderBlock>)> {
                    let reduce = b.reduce(&format!("decoder.{name}.reduce"), c2, c2 / 2)?;
                    let blocks = vec![
                        b.decoder_block(&format!("decoder.{name}.block1"), c2 / 2, s[2].side, c3, s[3].side)?,
                        b.decoder_block(&format!("decoder.{name}.block2"), c3, s[3].side, c4, s[4].side)?,
                    ];
                    Ok((reduce, blocks))
                };
                let (amodal_reduce, amodal_blocks) = branch(&mut b, "amodal")?;
                let (occluded_reduce, occluded_blocks) = branch(&mut b, "occluded")?;
                Decoder::Dual {
                    shared,
                    amodal_reduce,
                    occluded_reduce,
                    amodal_blocks,
                    occluded_blocks,
                    amodal_hidden: b.conv("head.amodal.hidden", 2 * c4, c4, 3, 1, 1)?,
                    amodal_out: b.conv("head.amodal.out", c4, 1, 1, 1, 0)?,
                    occluded_out: b.conv("head.occluded.out", c4, 1, 1, 1, 0)?,
                }
            }
        };
        Ok(Self { encoder, decoder })
    }

    pub fn layout(&self) -> DecoderLayout {
        match &self.decoder {
            Decoder::Single { blocks, .. } => DecoderLayout {
                shared_blocks: blocks.len(),
                branch_blocks: 0,
                branches: 0,
                amodal_head_convs: 2,
                occluded_head_convs: 0,
            },
            Decoder::Dual { shared, amodal_blocks, .. } => DecoderLayout {
                shared_blocks: shared.len(),
                branch_blocks: amodal_blocks.len(),
                branches: 2,
                amodal_head_convs: 2,
                occluded_head_convs: 1,
            },
        }
    }

    pub(crate) fn patch_weight(&self) -> ParamId {
        self.encoder.patch.w
    }
}

/// Per-sample feature shape recorded at a named point of the forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub label: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the occluded-branch features entering the amodal head with
    /// zeros (dual head only).
    pub zero_occluded_features: bool,
}

/// Tape handles for the outputs of one forward pass.
pub struct ForwardOutput<T> {
    pub features: Var,
    pub amodal: Var,
    pub occluded: Option<Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub trace: Vec<StageShape>,
}

pub(crate) struct Forward<'t, 'a, T> {
    pub tape: &'t mut Tape<'a, T>,
    pub params: &'a ParamStore<T>,
    pub mode: NormMode,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub trace: Vec<StageShape>,
}

impl<'a, T: Scalar> Forward<'_, 'a, T> {
    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(id, self.params.get(id))
    }

    fn record(&mut self, label: &str, v: Var) {
        let shape = self.tape.shape(v)[1..].to_vec();
        self.trace.push(StageShape { label: label.to_string(), shape });
    }

    fn linear(&mut self, l: &Linear, x: Var) -> Result<Var> {
        let (w, b) = (self.p(l.w), self.p(l.b));
        self.tape.linear(x, w, Some(b))
    }

    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let (w, b) = (self.p(c.w), self.p(c.b));
        self.tape.conv2d(x, w, Some(b), c.stride, c.pad)
    }

    fn conv_t(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let (w, b) = (self.p(c.w), self.p(c.b));
        self.tape.conv_transpose2d(x, w, Some(b), c.stride, c.pad)
    }

    fn layer_norm(&mut self, l: &LayerNorm, x: Var) -> Result<Var> {
        let (g, b) = (self.p(l.gamma), self.p(l.beta));
        self.tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }

    fn batch_norm(&mut self, l: &BatchNorm, x: Var) -> Result<Var> {
        let (g, b) = (self.p(l.gamma), self.p(l.beta));
        let stats = match self.mode {
            NormMode::Train => NormStats::Batch,
            NormMode::Eval => NormStats::Running {
                mean: self.params.get(l.mean).data(),
                var: self.params.get(l.var).data(),
            },
        };
        let (out, observed) = self.tape.batch_norm2d(x, g, b, stats, T::lit(BN_EPS))?;
        if let Some(observed) = observed {
            self.bn_updates.push(BnUpdate { mean: l.mean, var: l.var, observed });
        }
        Ok(out)
    }

    fn decoder_block(&mut self, blk: &DecoderBlock, x: Var, label: &str) -> Result<Var> {
        let h = self.conv_t(&blk.up, x)?;
        let h = self.conv(&blk.conv, h)?;
        let h = self.batch_norm(&blk.bn, h)?;
        let h = self.tape.relu(h)?;
        self.record(label, h);
        Ok(h)
    }

    fn reduce(&mut self, r: &Reduce, x: Var, label: &str) -> Result<Var> {
        let h = self.conv(&r.conv, x)?;
        let h = self.batch_norm(&r.bn, h)?;
        let h = self.tape.relu(h)?;
        self.record(label, h);
        Ok(h)
    }

    pub fn patch_embed(&mut self, enc: &Encoder, x: Var) -> Result<Var> {
        let h = self.conv(&enc.patch, x)?;
        let h = self.tape.tokens_from_map(h)?;
        let pos = self.p(enc.pos);
        self.tape.add_broadcast(h, pos)
    }

    fn encoder_block(&mut self, blk: &EncoderBlock, x: Var, heads: usize) -> Result<Var> {
        let h = self.layer_norm(&blk.ln1, x)?;
        let q = self.linear(&blk.q, h)?;
        let k = self.linear(&blk.k, h)?;
        let v = self.linear(&blk.v, h)?;
        let a = self.tape.attention(q, k, v, heads)?;
        let a = self.linear(&blk.o, a)?;
        let x = self.tape.add(x, a)?;
        let h = self.layer_norm(&blk.ln2, x)?;
        let h = self.linear(&blk.fc1, h)?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(&blk.fc2, h)?;
        self.tape.add(x, h)
    }

    /// `[N,4,S,S] -> [N,D]`.
    pub fn encode(&mut self, enc: &Encoder, x: Var, heads: usize) -> Result<Var> {
        let mut h = self.patch_embed(enc, x)?;
        for blk in &enc.blocks {
            h = self.encoder_block(blk, h, heads)?;
        }
        let h = self.layer_norm(&enc.norm, h)?;
        let v = self.tape.mean_tokens(h)?;
        Ok(v)
    }

    /// Returns `(amodal, occluded)` probability maps.
    pub fn decode(&mut self, dec: &Decoder, v: Var, opts: ForwardOptions) -> Result<(Var, Option<Var>)> {
        let s = self.tape.shape(v).to_vec();
        let x = self.tape.reshape(v, &[s[0], s[1], 1, 1])?;
        self.record("features", x);
        match dec {
            Decoder::Single { blocks, hidden, out } => {
                let mut h = x;
                for (i, blk) in blocks.iter().enumerate() {
                    h = self.decoder_block(blk, h, &format!("block{}", i + 1))?;
                }
                let h = self.conv(hidden, h)?;
                let h = self.tape.relu(h)?;
                self.record("head.hidden", h);
                let h = self.conv(out, h)?;
                let a = self.tape.sigmoid(h)?;
                self.record("head.out", a);
                Ok((a, None))
            }
            Decoder::Dual {
                shared,
                amodal_reduce,
                occluded_reduce,
                amodal_blocks,
                occluded_blocks,
                amodal_hidden,
                amodal_out,
                occluded_out,
            } => {
                let mut h = x;
                for (i, blk) in shared.iter().enumerate() {
                    h = self.decoder_block(blk, h, &format!("shared{}", i + 1))?;
                }
                let mut a = self.reduce(amodal_reduce, h, "amodal.reduce")?;
                let mut o = self.reduce(occluded_reduce, h, "occluded.reduce")?;
                for (i, blk) in amodal_blocks.iter().enumerate() {
                    a = self.decoder_block(blk, a, &format!("amodal.block{}", i + 1))?;
                }
                for (i, blk) in occluded_blocks.iter().enumerate() {
                    o = self.decoder_block(blk, o, &format!("occluded.block{}", i + 1))?;
                }
                let o_feat = if opts.zero_occluded_features {
                    let zeros = Tensor::zeros(self.tape.shape(o).to_vec());
                    self.tape.constant(zeros)
                } else {
                    o
                };
                let cat = self.tape.concat_channels(a, o_feat)?;
                self.record("amodal.concat", cat);
                let ha = self.conv(amodal_hidden, cat)?;
                let ha = self.tape.relu(ha)?;
                self.record("amodal.head.hidden", ha);
                let ha = self.conv(amodal_out, ha)?;
                let pa = self.tape.sigmoid(ha)?;
                self.record("amodal.head.out", pa);
                let ho = self.conv(occluded_out, o)?;
                let po = self.tape.sigmoid(ho)?;
                self.record("occluded.head.out", po);
                Ok((pa, Some(po)))
            }
        }
    }
}
