//! Network assembly: the original 2D baseline, the fast 2D/3D variants with
//! one 256D capsule per location, and a tiny configuration for gradient
//! checking. A model is a named parameter set plus the recipe for building
//! the differentiable forward graph.

use crate::decoder;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::routing::{self, RoutingGrouping};
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const DECODER_FILTERS: usize = 16;
pub const DECODER_KERNEL: usize = 4;
pub const DECODER_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Original2d,
    Fast2d,
    Fast3d,
    TinyTest,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original-2d" => Ok(Variant::Original2d),
            "fast-2d" => Ok(Variant::Fast2d),
            "fast-3d" => Ok(Variant::Fast3d),
            "tiny-test" => Ok(Variant::TinyTest),
            _ => Err(Error::Config(format!("unknown model variant '{s}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Original2d => "original-2d",
            Variant::Fast2d => "fast-2d",
            Variant::Fast3d => "fast-3d",
            Variant::TinyTest => "tiny-test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryCapsSpec {
    /// Capsules at each grid location (32 in the original, 1 in the fast
    /// variants, which is what makes per-location routing consistent).
    pub capsules_per_location: usize,
    pub capsule_dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    Conv,
    FeedForward,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Spatial input extents: [H, W] or [D, H, W].
    pub input_shape: Vec<usize>,
    pub conv1: ConvSpec,
    pub primary: PrimaryCapsSpec,
    pub classes: usize,
    pub out_caps_dim: usize,
    pub routing_iters: usize,
    pub decoder: DecoderVariant,
    /// Hidden widths of the feed-forward decoder.
    pub ff_hidden: (usize, usize),
}

impl ModelConfig {
    pub fn preset(variant: Variant) -> ModelConfig {
        match variant {
            Variant::Original2d => ModelConfig {
                variant,
                input_shape: vec![32, 32],
                conv1: ConvSpec { filters: 256, kernel: 9, stride: 1 },
                primary: PrimaryCapsSpec {
                    capsules_per_location: 32,
                    capsule_dim: 8,
                    kernel: 9,
                    stride: 2,
                },
                classes: 2,
                out_caps_dim: 16,
                routing_iters: 3,
                decoder: DecoderVariant::FeedForward,
                ff_hidden: (512, 1024),
            },
            Variant::Fast2d => ModelConfig {
                variant,
                input_shape: vec![32, 32],
                conv1: ConvSpec { filters: 256, kernel: 9, stride: 1 },
                primary: PrimaryCapsSpec {
                    capsules_per_location: 1,
                    capsule_dim: 256,
                    kernel: 9,
                    stride: 2,
                },
                classes: 2,
                out_caps_dim: 16,
                routing_iters: 3,
                decoder: DecoderVariant::Conv,
                ff_hidden: (512, 1024),
            },
            Variant::Fast3d => ModelConfig {
                variant,
                input_shape: vec![32, 32, 32],
                conv1: ConvSpec { filters: 256, kernel: 9, stride: 1 },
                primary: PrimaryCapsSpec {
                    capsules_per_location: 1,
                    capsule_dim: 256,
                    kernel: 9,
                    stride: 2,
                },
                classes: 2,
                out_caps_dim: 16,
                routing_iters: 3,
                decoder: DecoderVariant::Conv,
                ff_hidden: (512, 1024),
            },
            Variant::TinyTest => ModelConfig {
                variant,
                input_shape: vec![12, 12],
                conv1: ConvSpec { filters: 8, kernel: 5, stride: 1 },
                primary: PrimaryCapsSpec {
                    capsules_per_location: 1,
                    capsule_dim: 8,
                    kernel: 5,
                    stride: 3,
                },
                classes: 2,
                out_caps_dim: 4,
                routing_iters: 3,
                decoder: DecoderVariant::Conv,
                ff_hidden: (512, 1024),
            },
        }
    }

    /// Reduced fast-3d used for desk-scale training: smaller kernels,
    /// 32D capsules, no reconstruction head.
    pub fn fast3d_tiny() -> ModelConfig {
        let mut cfg = ModelConfig::preset(Variant::Fast3d);
        cfg.conv1 = ConvSpec { filters: 16, kernel: 7, stride: 2 };
        cfg.primary = PrimaryCapsSpec {
            capsules_per_location: 1,
            capsule_dim: 32,
            kernel: 5,
            stride: 2,
        };
        cfg.decoder = DecoderVariant::None;
        cfg
    }

    pub fn spatial_rank(&self) -> usize {
        self.input_shape.len()
    }

    fn conv_chain(extent: usize, kernel: usize, stride: usize) -> Result<usize> {
        if kernel > extent {
            return Err(Error::Config(format!(
                "spatial underflow: kernel {kernel} exceeds extent {extent}"
            )));
        }
        Ok((extent - kernel) / stride + 1)
    }

    pub fn conv1_out(&self) -> Result<Vec<usize>> {
        self.input_shape
            .iter()
            .map(|&e| Self::conv_chain(e, self.conv1.kernel, self.conv1.stride))
            .collect()
    }

    /// PrimaryCaps grid extents.
    pub fn grid(&self) -> Result<Vec<usize>> {
        self.conv1_out()?
            .iter()
            .map(|&e| Self::conv_chain(e, self.primary.kernel, self.primary.stride))
            .collect()
    }

    pub fn grid_locations(&self) -> Result<usize> {
        Ok(self.grid()?.iter().product())
    }

    /// Child capsule count I.
    pub fn num_children(&self) -> Result<usize> {
        Ok(self.grid_locations()? * self.primary.capsules_per_location)
    }

    pub fn input_pixels(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn decoder_output_extent(grid: usize) -> usize {
        let mid = (grid - 1) * DECODER_STRIDE + DECODER_KERNEL;
        (mid - 1) * DECODER_STRIDE + DECODER_KERNEL
    }

    pub fn validate(&self) -> Result<()> {
        let rank = self.spatial_rank();
        match self.variant {
            Variant::Fast3d => {
                if rank != 3 {
                    return Err(Error::Config("fast-3d needs a 3D input shape".into()));
                }
            }
            _ => {
                if rank != 2 {
                    return Err(Error::Config(format!(
                        "{} needs a 2D input shape",
                        self.variant.name()
                    )));
                }
            }
        }
        let fast = matches!(self.variant, Variant::Fast2d | Variant::Fast3d | Variant::TinyTest);
        if fast && self.primary.capsules_per_location != 1 {
            return Err(Error::Config(
                "fast variants allow exactly one capsule per location".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.routing_iters == 0 {
            return Err(Error::Config("routing_iters must be >= 1".into()));
        }
        if self.conv1.filters == 0
            || self.primary.capsule_dim == 0
            || self.primary.capsules_per_location == 0
            || self.out_caps_dim == 0
        {
            return Err(Error::Config("layer sizes must be >= 1".into()));
        }
        let grid = self.grid()?; // catches spatial underflow
        match self.decoder {
            DecoderVariant::Conv => {
                if self.primary.capsules_per_location != 1 {
                    return Err(Error::Config(
                        "conv decoder requires one capsule per location".into(),
                    ));
                }
                for (&g, &inp) in grid.iter().zip(&self.input_shape) {
                    let out = Self::decoder_output_extent(g);
                    if out < inp {
                        return Err(Error::Config(format!(
                            "conv decoder output {out} cannot cover input extent {inp}"
                        )));
                    }
                }
            }
            DecoderVariant::FeedForward => {
                if rank != 2 {
                    return Err(Error::Config(
                        "feed-forward decoder is 2D-only".into(),
                    ));
                }
            }
            DecoderVariant::None => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// A built model: validated config plus named, seeded parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    params: Vec<NamedTensor<T>>,
}

/// Differentiable forward pass over one batch.
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    /// Node ids aligned with `Model::params()`.
    pub param_ids: Vec<NodeId>,
    pub input_id: NodeId,
    /// û votes [N, I, J, D_out].
    pub votes_id: NodeId,
    /// Class capsule activations v [N, J, D_out].
    pub class_vectors_id: NodeId,
    /// ||v_j|| per class [N, J].
    pub lengths_id: NodeId,
    /// Final routing coefficients [N, G, J] (constants on the tape).
    pub coefficients: Tensor<T>,
    pub batch: usize,
    /// Wall time spent inside the iterative routing loop.
    pub routing_seconds: f64,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn lengths(&self) -> &Tensor<T> {
        self.tape.value(self.lengths_id)
    }

    pub fn class_vectors(&self) -> &Tensor<T> {
        self.tape.value(self.class_vectors_id)
    }

    pub fn votes(&self) -> &Tensor<T> {
        self.tape.value(self.votes_id)
    }
}

/// Argmax over class lengths; ties break to the lowest index.
pub fn predict<T: Scalar>(lengths: &Tensor<T>) -> Vec<usize> {
    let dims = lengths.dims();
    let j = dims[dims.len() - 1];
    lengths
        .data()
        .chunks(j)
        .map(|row| {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Allocate and seed all parameters for a validated config.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed).fork(0x6d6f64656c); // "model"
        let rank = config.spatial_rank();
        let mut params: Vec<NamedTensor<T>> = Vec::new();
        fn push_init<T: Scalar>(
            params: &mut Vec<NamedTensor<T>>,
            name: &str,
            dims: &[usize],
            fan_in: usize,
            rng: &mut SplitMix64,
        ) -> Result<()> {
            params.push(NamedTensor {
                name: name.to_string(),
                tensor: Tensor::uniform_init(dims, fan_in, rng)?,
            });
            Ok(())
        }
        fn push_zeros<T: Scalar>(
            params: &mut Vec<NamedTensor<T>>,
            name: &str,
            dims: &[usize],
        ) -> Result<()> {
            params.push(NamedTensor {
                name: name.to_string(),
                tensor: Tensor::zeros(dims)?,
            });
            Ok(())
        }

        let k1 = config.conv1.kernel;
        let mut conv1_dims = vec![config.conv1.filters, 1];
        conv1_dims.extend(std::iter::repeat(k1).take(rank));
        push_init(&mut params, "conv1.kernel", &conv1_dims, k1.pow(rank as u32), &mut rng)?;
        push_zeros(&mut params, "conv1.bias", &[config.conv1.filters])?;

        let p_filters = config.primary.capsules_per_location * config.primary.capsule_dim;
        let k2 = config.primary.kernel;
        let mut p_dims = vec![p_filters, config.conv1.filters];
        p_dims.extend(std::iter::repeat(k2).take(rank));
        push_init(
            &mut params,
            "primarycaps.kernel",
            &p_dims,
            config.conv1.filters * k2.pow(rank as u32),
            &mut rng,
        )?;
        push_zeros(&mut params, "primarycaps.bias", &[p_filters])?;

        let i_cnt = config.num_children()?;
        push_init(
            &mut params,
            "votes.weight",
            &[i_cnt, config.classes, config.primary.capsule_dim, config.out_caps_dim],
            config.primary.capsule_dim,
            &mut rng,
        )?;

        match config.decoder {
            DecoderVariant::Conv => {
                let in_ch = config.out_caps_dim + config.classes;
                let mut d1 = vec![in_ch, DECODER_FILTERS];
                d1.extend(std::iter::repeat(DECODER_KERNEL).take(rank));
                push_init(
                    &mut params,
                    "decoder.deconv1.kernel",
                    &d1,
                    in_ch * DECODER_KERNEL.pow(rank as u32),
                    &mut rng,
                )?;
                push_zeros(&mut params, "decoder.deconv1.bias", &[DECODER_FILTERS])?;
                let mut d2 = vec![DECODER_FILTERS, 1];
                d2.extend(std::iter::repeat(DECODER_KERNEL).take(rank));
                push_init(
                    &mut params,
                    "decoder.deconv2.kernel",
                    &d2,
                    DECODER_FILTERS * DECODER_KERNEL.pow(rank as u32),
                    &mut rng,
                )?;
                push_zeros(&mut params, "decoder.deconv2.bias", &[1])?;
            }
            DecoderVariant::FeedForward => {
                let d_in = config.classes * config.out_caps_dim;
                let (h1, h2) = config.ff_hidden;
                let pixels = config.input_pixels();
                push_init(&mut params, "decoder.fc1.weight", &[d_in, h1], d_in, &mut rng)?;
                push_zeros(&mut params, "decoder.fc1.bias", &[h1])?;
                push_init(&mut params, "decoder.fc2.weight", &[h1, h2], h1, &mut rng)?;
                push_zeros(&mut params, "decoder.fc2.bias", &[h2])?;
                push_init(&mut params, "decoder.fc3.weight", &[h2, pixels], h2, &mut rng)?;
                push_zeros(&mut params, "decoder.fc3.bias", &[pixels])?;
            }
            DecoderVariant::None => {}
        }

        Ok(Model { config, params })
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    /// Exact count of scalar parameters, biases included.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Test helper: zero every parameter.
    pub fn zero_params(&mut self) {
        for p in &mut self.params {
            p.tensor = Tensor::zeros(p.tensor.dims()).expect("valid dims");
        }
    }

    /// Child-to-location grouping for this architecture. With one capsule
    /// per location this is the identity grouping.
    pub fn grouping(&self) -> Result<RoutingGrouping> {
        Ok(RoutingGrouping::by_location(
            self.config.grid_locations()?,
            self.config.primary.capsules_per_location,
        ))
    }

    fn normalize_input(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let sp = &self.config.input_shape;
        let dims = input.dims();
        let with_channel: Vec<usize> = [&[dims[0], 1][..], sp].concat();
        if dims.len() == sp.len() + 1 && dims[1..] == **sp {
            input.reshaped(&with_channel)
        } else if dims.len() == sp.len() + 2 && dims[1] == 1 && dims[2..] == **sp {
            Ok(input.clone())
        } else {
            Err(Error::shape(
                "model input",
                format!("[N, {sp:?}] or [N, 1, {sp:?}]"),
                input.shape(),
            ))
        }
    }

    /// Run the encoder: conv1 + ReLU, PrimaryCaps conv, squash, votes,
    /// dynamic routing (coefficients held constant on the tape), squash.
    pub fn forward(&self, input: &Tensor<T>) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        let input = self.normalize_input(input)?;
        let n = input.dims()[0];
        let rank = cfg.spatial_rank();

        let mut tape = Tape::new();
        let param_ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect();
        let pid = |name: &str| -> NodeId {
            param_ids[self.param_index(name).expect("parameter exists")]
        };

        let input_id = tape.leaf(input);
        let c1 = tape.conv(input_id, pid("conv1.kernel"), pid("conv1.bias"), cfg.conv1.stride)?;
        let a1 = tape.relu(c1);
        let p = tape.conv(a1, pid("primarycaps.kernel"), pid("primarycaps.bias"), cfg.primary.stride)?;

        // [N, P, grid...] -> [N, grid..., P] -> [N, I, capsule_dim]
        let perm: Vec<usize> = match rank {
            2 => vec![0, 2, 3, 1],
            3 => vec![0, 2, 3, 4, 1],
            _ => unreachable!("validated rank"),
        };
        let pl = tape.permute(p, &perm)?;
        let i_cnt = cfg.num_children()?;
        let caps = tape.reshape(pl, &[n, i_cnt, cfg.primary.capsule_dim])?;
        let u = tape.squash(caps);

        let u5 = tape.reshape(u, &[n, i_cnt, 1, 1, cfg.primary.capsule_dim])?;
        let votes5 = tape.matmul(u5, pid("votes.weight"))?;
        let votes_id = tape.reshape(votes5, &[n, i_cnt, cfg.classes, cfg.out_caps_dim])?;

        let grouping = self.grouping()?;
        let t0 = std::time::Instant::now();
        let coefficients =
            routing::route_batch_coefficients(tape.value(votes_id), &grouping, cfg.routing_iters)?;
        let routing_seconds = t0.elapsed().as_secs_f64();

        let s = tape.weighted_vote_sum(votes_id, coefficients.clone(), grouping.group_of())?;
        let class_vectors_id = tape.squash(s);
        let lengths_id = tape.vec_norm(class_vectors_id)?;

        Ok(ForwardPass {
            tape,
            param_ids,
            input_id,
            votes_id,
            class_vectors_id,
            lengths_id,
            coefficients,
            batch: n,
            routing_seconds,
        })
    }

    /// Append the configured reconstruction head for the given per-sample
    /// classes (targets during training, predictions during evaluation).
    /// Returns the reconstruction node [N, 1, spatial...], or None for
    /// decoder-less configs.
    pub fn attach_decoder(
        &self,
        fwd: &mut ForwardPass<T>,
        classes: &[usize],
    ) -> Result<Option<NodeId>> {
        let cfg = &self.config;
        let pid = |name: &str| -> NodeId {
            fwd.param_ids[self.param_index(name).expect("parameter exists")]
        };
        match cfg.decoder {
            DecoderVariant::None => Ok(None),
            DecoderVariant::Conv => {
                let grid = cfg.grid()?;
                let recon = decoder::conv_decode_graph(
                    &mut fwd.tape,
                    fwd.votes_id,
                    classes,
                    &grid,
                    cfg.classes,
                    pid("decoder.deconv1.kernel"),
                    pid("decoder.deconv1.bias"),
                    pid("decoder.deconv2.kernel"),
                    pid("decoder.deconv2.bias"),
                    &cfg.input_shape,
                )?;
                Ok(Some(recon))
            }
            DecoderVariant::FeedForward => {
                let recon = decoder::ff_decode_graph(
                    &mut fwd.tape,
                    fwd.class_vectors_id,
                    classes,
                    pid("decoder.fc1.weight"),
                    pid("decoder.fc1.bias"),
                    pid("decoder.fc2.weight"),
                    pid("decoder.fc2.bias"),
                    pid("decoder.fc3.weight"),
                    pid("decoder.fc3.bias"),
                    &cfg.input_shape,
                )?;
                Ok(Some(recon))
            }
        }
    }
}
