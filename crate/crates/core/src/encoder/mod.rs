//! Post-LN transformer encoder with a bottleneck adapter after each sublayer.
//!
//! Base weights are frozen: they are only reachable through shared references.
//! The adapters are the only parameters [`EncoderModel::adapters_mut`] hands out.
//!
//! Tensor names in the weight container:
//!
//! | name | shape |
//! |------|-------|
//! | `embeddings.word` | vocab × d |
//! | `embeddings.position` | max_positions × d |
//! | `embeddings.token_type` | type_vocab × d |
//! | `embeddings.norm.{weight,bias}` | d |
//! | `layer.{i}.attn.{q,k,v,o}.weight` | d × d |
//! | `layer.{i}.attn.{q,k,v,o}.bias` | d |
//! | `layer.{i}.attn.norm.{weight,bias}` | d |
//! | `layer.{i}.ffn.in.weight` / `.bias` | ffn × d / ffn |
//! | `layer.{i}.ffn.out.weight` / `.bias` | d × ffn / d |
//! | `layer.{i}.ffn.norm.{weight,bias}` | d |
//! | `layer.{i}.adapter.{attn,ffn}.down` | m × d |
//! | `layer.{i}.adapter.{attn,ffn}.up` | d × m |
//! | `config.num_heads`, `config.extract_layer` | 1 |
//! | `config.adapter_dim` | 1 (required only when adapters are absent) |
//! | `config.ffn_dim` | 1 (optional, used by zero-layer models) |
//! | `config.cls_id`, `config.sep_id` | 1 (optional) |

mod forward;

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use forward::{
    adapter_backward, adapter_forward, adapter_forward_cached, AdapterCache, HiddenStates, Tape,
};

/// Encoder geometry and the layer alignments are read from.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub adapter_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub extract_layer: usize,
    /// Prepended to every sentence when set.
    pub cls_id: Option<u32>,
    /// Appended to every sentence when set.
    pub sep_id: Option<u32>,
}

impl EncoderConfig {
    /// BERT-base geometry with 128-wide adapters.
    pub fn base(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            adapter_dim: 128,
            vocab_size,
            max_positions: 512,
            type_vocab_size: 2,
            extract_layer: 6,
            cls_id: Some(101),
            sep_id: Some(102),
        }
    }

    /// Two-layer, 16-wide configuration used by tests and demo models.
    pub fn tiny() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            adapter_dim: 4,
            vocab_size: 32,
            max_positions: 32,
            type_vocab_size: 2,
            extract_layer: 2,
            cls_id: Some(1),
            sep_id: Some(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.hidden_dim {
            return fail(format!(
                "adapter_dim {} must satisfy 0 < m < hidden_dim {}",
                self.adapter_dim, self.hidden_dim
            ));
        }
        if self.extract_layer > self.num_layers {
            return fail(format!(
                "extract_layer {} exceeds num_layers {}",
                self.extract_layer, self.num_layers
            ));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return fail("ffn_dim, vocab_size and max_positions must be positive".into());
        }
        if self.type_vocab_size == 0 {
            return fail("type_vocab_size must be positive".into());
        }
        for id in [self.cls_id, self.sep_id].into_iter().flatten() {
            if id as usize >= self.vocab_size {
                return fail(format!("special token id {id} outside vocabulary"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Wraps content ids in the configured special tokens. Returns the full
    /// sequence and the row range holding the content.
    pub fn with_special_tokens(&self, ids: &[u32]) -> (Vec<u32>, Range<usize>) {
        let mut seq = Vec::with_capacity(ids.len() + 2);
        seq.extend(self.cls_id);
        let start = seq.len();
        seq.extend_from_slice(ids);
        let end = seq.len();
        seq.extend(self.sep_id);
        (seq, start..end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Norm {
    pub(crate) gain: Tensor,
    pub(crate) bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Embeddings {
    pub(crate) word: Tensor,
    pub(crate) position: Tensor,
    pub(crate) token_type: Tensor,
    pub(crate) norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BaseLayer {
    pub(crate) q: Linear,
    pub(crate) k: Linear,
    pub(crate) v: Linear,
    pub(crate) o: Linear,
    pub(crate) attn_norm: Norm,
    pub(crate) ffn_in: Linear,
    pub(crate) ffn_out: Linear,
    pub(crate) ffn_norm: Norm,
}

/// Frozen pretrained weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub(crate) embeddings: Embeddings,
    pub(crate) layers: Vec<BaseLayer>,
}

/// `h' = W_up · tanh(W_down · h) + h`, with `down: m×d` and `up: d×m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub down: Tensor,
    pub up: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapters {
    pub attn: Adapter,
    pub ffn: Adapter,
}

/// One adapter pair per layer. Also used as the gradient buffer for itself.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub layers: Vec<LayerAdapters>,
}

pub type AdapterGrads = AdapterSet;

impl AdapterSet {
    pub fn zeros(num_layers: usize, hidden_dim: usize, adapter_dim: usize) -> Self {
        let adapter = || Adapter {
            down: Tensor::zeros(&[adapter_dim, hidden_dim]),
            up: Tensor::zeros(&[hidden_dim, adapter_dim]),
        };
        AdapterSet {
            layers: (0..num_layers)
                .map(|_| LayerAdapters {
                    attn: adapter(),
                    ffn: adapter(),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Tensors in canonical order: per layer, attn down/up then ffn down/up.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.attn.down, &l.attn.up, &l.ffn.down, &l.ffn.up])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.attn.down,
                    &mut l.attn.up,
                    &mut l.ffn.down,
                    &mut l.ffn.up,
                ]
            })
            .collect()
    }

    /// Container names matching [`AdapterSet::tensors`] order.
    pub fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| {
                ["attn.down", "attn.up", "ffn.down", "ffn.up"]
                    .map(|s| format!("layer.{i}.adapter.{s}"))
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &AdapterSet) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, k: f32) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    base: BaseWeights,
    adapters: AdapterSet,
}

impl EncoderModel {
    /// Random weights, for tests and demo models. Adapters start at the identity.
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
        let d = config.hidden_dim;
        let embeddings = Embeddings {
            word: init.normal(&[config.vocab_size, d], 1.0),
            position: init.normal(&[config.max_positions, d], 0.1),
            token_type: init.normal(&[config.type_vocab_size, d], 0.1),
            norm: init.norm(d),
        };
        let layers = (0..config.num_layers)
            .map(|_| BaseLayer {
                q: init.linear(d, d),
                k: init.linear(d, d),
                v: init.linear(d, d),
                o: init.linear(d, d),
                attn_norm: init.norm(d),
                ffn_in: init.linear(config.ffn_dim, d),
                ffn_out: init.linear(d, config.ffn_dim),
                ffn_norm: init.norm(d),
            })
            .collect();
        let adapters = AdapterSet::zeros(config.num_layers, d, config.adapter_dim);
        Ok(EncoderModel {
            config,
            base: BaseWeights { embeddings, layers },
            adapters,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut AdapterSet {
        &mut self.adapters
    }

    /// Replaces the adapters after checking every shape.
    pub fn set_adapters(&mut self, adapters: AdapterSet) -> Result<()> {
        let expected = AdapterSet::zeros(
            self.config.num_layers,
            self.config.hidden_dim,
            self.config.adapter_dim,
        );
        if adapters.layers.len() != expected.layers.len() {
            return Err(Error::Data(format!(
                "adapter set has {} layers, model has {}",
                adapters.layers.len(),
                expected.layers.len()
            )));
        }
        for ((name, want), got) in expected
            .names()
            .into_iter()
            .zip(expected.tensors())
            .zip(adapters.tensors())
        {
            if want.shape() != got.shape() {
                return Err(Error::TensorShape {
                    name,
                    expected: want.shape().to_vec(),
                    found: got.shape().to_vec(),
                });
            }
        }
        self.adapters = adapters;
        Ok(())
    }

    /// Training start point: `down ~ N(0, 1e-3)`, `up = 0`.
    pub fn init_adapters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, 1e-3).expect("positive std");
        for layer in &mut self.adapters.layers {
            for adapter in [&mut layer.attn, &mut layer.ffn] {
                adapter
                    .down
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = dist.sample(&mut rng));
                adapter.up.fill(0.0);
            }
        }
    }

    /// Sets every adapter weight to zero.
    pub fn zero_adapters(&mut self) {
        self.adapters
            .tensors_mut()
            .into_iter()
            .for_each(|t| t.fill(0.0));
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let c = &self.config;
        let mut f = Vec::new();
        let e = &self.base.embeddings;
        f.push(("embeddings.word".to_string(), e.word.clone()));
        f.push(("embeddings.position".to_string(), e.position.clone()));
        f.push(("embeddings.token_type".to_string(), e.token_type.clone()));
        push_norm(&mut f, "embeddings.norm", &e.norm);
        for (i, l) in self.base.layers.iter().enumerate() {
            for (name, lin) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o)] {
                push_linear(&mut f, &format!("layer.{i}.attn.{name}"), lin);
            }
            push_norm(&mut f, &format!("layer.{i}.attn.norm"), &l.attn_norm);
            push_linear(&mut f, &format!("layer.{i}.ffn.in"), &l.ffn_in);
            push_linear(&mut f, &format!("layer.{i}.ffn.out"), &l.ffn_out);
            push_norm(&mut f, &format!("layer.{i}.ffn.norm"), &l.ffn_norm);
        }
        f.extend(adapter_entries(&self.adapters));
        let scalar = |v: usize| Tensor::vector(vec![v as f32]);
        f.push(("config.num_heads".into(), scalar(c.num_heads)));
        f.push(("config.extract_layer".into(), scalar(c.extract_layer)));
        f.push(("config.adapter_dim".into(), scalar(c.adapter_dim)));
        f.push(("config.ffn_dim".into(), scalar(c.ffn_dim)));
        if let Some(id) = c.cls_id {
            f.push(("config.cls_id".into(), scalar(id as usize)));
        }
        if let Some(id) = c.sep_id {
            f.push(("config.sep_id".into(), scalar(id as usize)));
        }
        f.into_iter().collect()
    }

    /// Builds a model from a weight container. Geometry is inferred from the
    /// tensor shapes. If no adapter tensors are present, adapters are zero and
    /// sized by `config.adapter_dim`.
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let word = file
            .get("embeddings.word")
            .ok_or_else(|| Error::MissingTensor("embeddings.word".into()))?;
        let (vocab_size, d) = word.dims2()?;
        let dims = |name: &str| -> Result<Vec<usize>> {
            file.get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::MissingTensor(name.into()))
        };
        let max_positions = dims("embeddings.position")?[0];
        let type_vocab_size = dims("embeddings.token_type")?[0];
        let num_layers = (0..)
            .take_while(|i| file.contains(&format!("layer.{i}.attn.q.weight")))
            .count();
        let ffn_dim = if num_layers > 0 {
            dims("layer.0.ffn.in.weight")?[0]
        } else {
            read_scalar(file, "config.ffn_dim")?.unwrap_or(4 * d)
        };
        let has_adapters = file.contains("layer.0.adapter.attn.down");
        let adapter_dim = if has_adapters {
            dims("layer.0.adapter.attn.down")?[0]
        } else {
            read_scalar(file, "config.adapter_dim")?
                .ok_or_else(|| Error::MissingTensor("config.adapter_dim".into()))?
        };
        let num_heads = read_scalar(file, "config.num_heads")?
            .ok_or_else(|| Error::MissingTensor("config.num_heads".into()))?;
        let extract_layer = read_scalar(file, "config.extract_layer")?
            .unwrap_or(6.min(num_layers));
        let config = EncoderConfig {
            num_layers,
            hidden_dim: d,
            num_heads,
            ffn_dim,
            adapter_dim,
            vocab_size,
            max_positions,
            type_vocab_size,
            extract_layer,
            cls_id: read_scalar(file, "config.cls_id")?.map(|v| v as u32),
            sep_id: read_scalar(file, "config.sep_id")?.map(|v| v as u32),
        };
        config.validate()?;

        let norm = |prefix: &str| -> Result<Norm> {
            Ok(Norm {
                gain: file.require(&format!("{prefix}.weight"), &[d])?.clone(),
                bias: file.require(&format!("{prefix}.bias"), &[d])?.clone(),
            })
        };
        let linear = |prefix: &str, out: usize, inp: usize| -> Result<Linear> {
            Ok(Linear {
                weight: file.require(&format!("{prefix}.weight"), &[out, inp])?.clone(),
                bias: file.require(&format!("{prefix}.bias"), &[out])?.clone(),
            })
        };
        let embeddings = Embeddings {
            word: word.clone(),
            position: file
                .require("embeddings.position", &[max_positions, d])?
                .clone(),
            token_type: file
                .require("embeddings.token_type", &[type_vocab_size, d])?
                .clone(),
            norm: norm("embeddings.norm")?,
        };
        let layers = (0..num_layers)
            .map(|i| {
                Ok(BaseLayer {
                    q: linear(&format!("layer.{i}.attn.q"), d, d)?,
                    k: linear(&format!("layer.{i}.attn.k"), d, d)?,
                    v: linear(&format!("layer.{i}.attn.v"), d, d)?,
                    o: linear(&format!("layer.{i}.attn.o"), d, d)?,
                    attn_norm: norm(&format!("layer.{i}.attn.norm"))?,
                    ffn_in: linear(&format!("layer.{i}.ffn.in"), ffn_dim, d)?,
                    ffn_out: linear(&format!("layer.{i}.ffn.out"), d, ffn_dim)?,
                    ffn_norm: norm(&format!("layer.{i}.ffn.norm"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let adapters = if has_adapters {
            adapters_from_file(file, num_layers, d, adapter_dim)?
        } else {
            AdapterSet::zeros(num_layers, d, adapter_dim)
        };
        Ok(EncoderModel {
            config,
            base: BaseWeights { embeddings, layers },
            adapters,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    /// Writes only the adapter tensors.
    pub fn save_adapters(&self, path: impl AsRef<Path>) -> Result<()> {
        adapter_entries(&self.adapters)
            .into_iter()
            .collect::<TensorFile>()
            .write(path)
    }

    /// Replaces the adapters with those stored at `path`. Every adapter tensor
    /// must be present with the model's shapes.
    pub fn load_adapters(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let file = TensorFile::read(path)?;
        let c = &self.config;
        let adapters = adapters_from_file(&file, c.num_layers, c.hidden_dim, c.adapter_dim)?;
        self.adapters = adapters;
        Ok(())
    }
}

struct Init(ChaCha8Rng);

impl Init {
    fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| dist.sample(&mut self.0)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    fn linear(&mut self, out: usize, inp: usize) -> Linear {
        Linear {
            weight: self.normal(&[out, inp], 1.0 / (inp as f32).sqrt()),
            bias: self.normal(&[out], 0.02),
        }
    }

    fn norm(&mut self, d: usize) -> Norm {
        let mut gain = self.normal(&[d], 0.05);
        gain.data_mut().iter_mut().for_each(|g| *g += 1.0);
        Norm {
            gain,
            bias: self.normal(&[d], 0.05),
        }
    }
}

fn read_scalar(file: &TensorFile, name: &str) -> Result<Option<usize>> {
    match file.get(name) {
        None => Ok(None),
        Some(t) if t.len() == 1 && t.data()[0] >= 0.0 && t.data()[0].fract() == 0.0 => {
            Ok(Some(t.data()[0] as usize))
        }
        Some(t) => Err(Error::TensorShape {
            name: name.into(),
            expected: vec![1],
            found: t.shape().to_vec(),
        }),
    }
}

fn push_linear(f: &mut Vec<(String, Tensor)>, prefix: &str, l: &Linear) {
    f.push((format!("{prefix}.weight"), l.weight.clone()));
    f.push((format!("{prefix}.bias"), l.bias.clone()));
}

fn push_norm(f: &mut Vec<(String, Tensor)>, prefix: &str, n: &Norm) {
    f.push((format!("{prefix}.weight"), n.gain.clone()));
    f.push((format!("{prefix}.bias"), n.bias.clone()));
}

fn adapter_entries(adapters: &AdapterSet) -> Vec<(String, Tensor)> {
    adapters
        .names()
        .into_iter()
        .zip(adapters.tensors().into_iter().cloned())
        .collect()
}

fn adapters_from_file(
    file: &TensorFile,
    num_layers: usize,
    d: usize,
    m: usize,
) -> Result<AdapterSet> {
    let mut set = AdapterSet::zeros(num_layers, d, m);
    let names = set.names();
    for (name, slot) in names.iter().zip(set.tensors_mut()) {
        let shape = slot.shape().to_vec();
        *slot = file.require(name, &shape)?.clone();
    }
    Ok(set)
}
