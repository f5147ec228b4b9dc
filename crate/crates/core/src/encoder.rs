//! Residual 1-D convolutional encoder with per-example instance
//! normalization and global average pooling over time.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{batch_tensor, Window};
use crate::error::{Error, Result};
use crate::ndtensor::{checkpoint, Bound, ParamId, ParamStore, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub kernel_size: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Stride of the first block in each stage.
    pub stage_strides: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            stem_width: 16,
            stem_kernel: 7,
            kernel_size: 3,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            stage_strides: vec![2, 2, 2],
        }
    }

    /// ResNet-34-style stage layout.
    pub fn full_scale() -> Self {
        Self {
            stem_width: 64,
            stem_kernel: 7,
            kernel_size: 3,
            stage_widths: vec![64, 128, 256, 256],
            blocks_per_stage: vec![3, 4, 6, 3],
            stage_strides: vec![1, 2, 2, 2],
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(self.stem_width)
    }

    /// Shortest input that every strided stage can still downsample.
    pub fn min_len(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_widths.len();
        if n == 0 || self.blocks_per_stage.len() != n || self.stage_strides.len() != n {
            return Err(Error::Config("encoder stage lists must be non-empty and equally long".into()));
        }
        if self.stem_width == 0 || self.stage_widths.contains(&0) || self.blocks_per_stage.contains(&0) || self.stage_strides.contains(&0) {
            return Err(Error::Config("encoder widths, block counts and strides must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config("encoder kernel sizes must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ParamId,
    conv2: ParamId,
    skip: Option<ParamId>,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    stem: (ParamId, ParamId),
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut he = |params: &mut ParamStore, name: String, k: usize, c_in: usize, c_out: usize| {
            let std = (2.0 / (k * c_in) as f64).sqrt();
            params.push(name, Tensor::randn([k, c_in, c_out], std, &mut rng));
        };
        he(&mut params, "stem.weight".into(), config.stem_kernel, 3, config.stem_width);
        params.push("stem.bias", Tensor::zeros([config.stem_width]));
        let mut c_in = config.stem_width;
        for (s, (&width, &count)) in config.stage_widths.iter().zip(&config.blocks_per_stage).enumerate() {
            for b in 0..count {
                let stride = if b == 0 { config.stage_strides[s] } else { 1 };
                he(&mut params, format!("stage{s}.block{b}.conv1"), config.kernel_size, c_in, width);
                he(&mut params, format!("stage{s}.block{b}.conv2"), config.kernel_size, width, width);
                if stride != 1 || c_in != width {
                    he(&mut params, format!("stage{s}.block{b}.skip"), 1, c_in, width);
                }
                c_in = width;
            }
        }
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let lookup = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Config(format!("encoder parameter {name} missing")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let stem = (
            lookup("stem.weight", &[config.stem_kernel, 3, config.stem_width])?,
            lookup("stem.bias", &[config.stem_width])?,
        );
        let mut blocks = Vec::new();
        let mut c_in = config.stem_width;
        let k = config.kernel_size;
        for (s, (&width, &count)) in config.stage_widths.iter().zip(&config.blocks_per_stage).enumerate() {
            for b in 0..count {
                let stride = if b == 0 { config.stage_strides[s] } else { 1 };
                let skip = if stride != 1 || c_in != width {
                    Some(lookup(&format!("stage{s}.block{b}.skip"), &[1, c_in, width])?)
                } else {
                    None
                };
                blocks.push(Block {
                    conv1: lookup(&format!("stage{s}.block{b}.conv1"), &[k, c_in, width])?,
                    conv2: lookup(&format!("stage{s}.block{b}.conv2"), &[k, width, width])?,
                    skip,
                    stride,
                });
                c_in = width;
            }
        }
        let expected = 2 + blocks.iter().map(|b| 2 + usize::from(b.skip.is_some())).sum::<usize>();
        if params.len() != expected {
            return Err(Error::Config("encoder checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            config,
            params,
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Embeddings `[B, embed_dim]` of a `[B, T, 3]` input on the tape.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("encode", format!("expected [B, T, 3], got {shape:?}")));
        }
        if shape[1] < self.config.min_len() {
            return Err(Error::Data(format!(
                "window of {} samples is shorter than the encoder minimum {}",
                shape[1],
                self.config.min_len()
            )));
        }
        let h = tape.conv1d(x, bound.var(self.stem.0), 1, 1)?;
        let h = tape.add(h, bound.var(self.stem.1))?;
        let mut h = tape.relu(h)?;
        for block in &self.blocks {
            let main = tape.conv1d(h, bound.var(block.conv1), 1, block.stride)?;
            let main = instance_norm(tape, main)?;
            let main = tape.relu(main)?;
            let main = tape.conv1d(main, bound.var(block.conv2), 1, 1)?;
            let main = instance_norm(tape, main)?;
            let skip = match block.skip {
                Some(p) => tape.conv1d(h, bound.var(p), 1, block.stride)?,
                None => h,
            };
            let sum = tape.add(main, skip)?;
            h = tape.relu(sum)?;
        }
        tape.mean(h, 1, false)
    }

    pub fn encode(&self, window: &Window) -> Result<Vec<f64>> {
        Ok(self.encode_batch(std::slice::from_ref(window))?.into_data())
    }

    /// Row `i` equals `encode(&windows[i])` bit for bit.
    pub fn encode_batch(&self, windows: &[Window]) -> Result<Tensor> {
        const CHUNK: usize = 128;
        let mut data = Vec::with_capacity(windows.len() * self.embed_dim());
        for chunk in windows.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = tape.constant(batch_tensor(chunk)?);
            let e = self.forward(&mut tape, &bound, x)?;
            data.extend_from_slice(tape.value(e));
        }
        if data.is_empty() {
            return Err(Error::shape("encode_batch", "empty batch"));
        }
        Tensor::new(vec![windows.len(), self.embed_dim()], data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": "encoder", "config": self.config });
        checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("encoder") {
            return Err(Error::Data(format!("{} is not an encoder checkpoint", path.display())));
        }
        let config: EncoderConfig = serde_json::from_value(meta["config"].clone())?;
        Self::from_parts(config, params)
    }
}

/// Normalizes each example's channels over time.
fn instance_norm(tape: &mut Tape, x: Var) -> Result<Var> {
    let mean = tape.mean(x, 1, true)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, 1, true)?;
    let var = tape.add_scalar(var, NORM_EPS)?;
    let std = tape.sqrt(var)?;
    tape.div(centered, std)
}
