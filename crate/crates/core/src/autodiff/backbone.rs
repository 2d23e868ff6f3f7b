//! Rectifier MLP shared by all three streams, its parameter store, and the
//! versioned weight file.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Class probabilities.
    Softmax,
    /// Raw scalar regression output.
    Identity,
}

/// Layer layout of a fully connected ReLU network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backbone {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    pub head: Head,
}

/// Output of a forward pass: head output and the last hidden activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub features: Tensor,
}

impl Backbone {
    pub fn classifier(input_width: usize, hidden: &[usize], num_classes: usize) -> Self {
        Self {
            input_width,
            hidden: hidden.to_vec(),
            output_width: num_classes,
            head: Head::Softmax,
        }
    }

    pub fn regressor(input_width: usize, hidden: &[usize]) -> Self {
        Self {
            input_width,
            hidden: hidden.to_vec(),
            output_width: 1,
            head: Head::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.output_width == 0 {
            return Err(Error::InvalidArgument("backbone widths must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "backbone needs at least one hidden layer of positive width".into(),
            ));
        }
        if self.head == Head::Identity && self.output_width != 1 {
            return Err(Error::InvalidArgument("identity head must have width 1".into()));
        }
        if self.head == Head::Softmax && self.output_width < 2 {
            return Err(Error::InvalidArgument("softmax head needs at least two classes".into()));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.hidden.last().expect("validated backbone has hidden layers")
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width];
        widths.extend(&self.hidden);
        widths.push(self.output_width);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// Records a forward pass on `graph`, registering every parameter.
    pub fn forward_graph(&self, graph: &mut Graph, params: &ParamStore, input: Var) -> (Var, Var) {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut h = input;
        let mut features = input;
        for (l, _) in dims.iter().enumerate() {
            let w = graph.param(Self::weight_name(l), params.expect(&Self::weight_name(l)));
            let b = graph.param(Self::bias_name(l), params.expect(&Self::bias_name(l)));
            let z = graph.matmul(h, w);
            let z = graph.add_bias(z, b);
            if l < last {
                h = graph.relu(z);
                features = h;
            } else {
                h = match self.head {
                    Head::Softmax => graph.softmax(z),
                    Head::Identity => z,
                };
            }
        }
        (h, features)
    }

    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.shape()[1] != self.input_width {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match input width {}",
                batch.shape(),
                self.input_width
            )));
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn forward(&self, params: &ParamStore, batch: &Tensor) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        params.check_matches(self)?;
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let (out, feat) = self.forward_graph(&mut g, params, x);
        Ok(ForwardOutput {
            output: g.value(out).clone(),
            features: g.value(feat).clone(),
        })
    }
}

/// Named parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    /// Glorot-uniform weights, zero biases.
    pub fn init(backbone: &Backbone, seed: u64) -> Result<Self> {
        backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (l, (fan_in, fan_out)) in backbone.layer_dims().into_iter().enumerate() {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
            params.insert(Backbone::weight_name(l), Tensor::from_parts(vec![fan_in, fan_out], w));
            params.insert(Backbone::bias_name(l), Tensor::zeros(&[fan_out]));
        }
        Ok(Self { params, rng_seed: seed })
    }

    pub fn zeros(backbone: &Backbone) -> Result<Self> {
        backbone.validate()?;
        let mut params = BTreeMap::new();
        for (l, (fan_in, fan_out)) in backbone.layer_dims().into_iter().enumerate() {
            params.insert(Backbone::weight_name(l), Tensor::zeros(&[fan_in, fan_out]));
            params.insert(Backbone::bias_name(l), Tensor::zeros(&[fan_out]));
        }
        Ok(Self { params, rng_seed: 0 })
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    fn expect(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Errors unless every layer tensor exists with the expected shape.
    pub fn check_matches(&self, backbone: &Backbone) -> Result<()> {
        let dims = backbone.layer_dims();
        if self.params.len() != 2 * dims.len() {
            return Err(Error::shape(format!(
                "store has {} tensors, backbone needs {}",
                self.params.len(),
                2 * dims.len()
            )));
        }
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let expect = [
                (Backbone::weight_name(l), vec![fan_in, fan_out]),
                (Backbone::bias_name(l), vec![fan_out]),
            ];
            for (name, shape) in expect {
                match self.params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::shape(format!(
                            "`{name}` has shape {:?}, expected {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::shape(format!("parameter `{name}` missing"))),
                }
            }
        }
        Ok(())
    }

    /// Element-wise `param += scale * grad` for every gradient present.
    pub fn add_scaled(&mut self, grads: &Gradients, scale: f64) {
        for (name, g) in grads.iter() {
            if let Some(p) = self.params.get_mut(name) {
                for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *v += scale * d;
                }
            }
        }
    }

    pub fn to_weight_file(&self, backbone: &Backbone) -> WeightFile {
        WeightFile {
            format_version: WEIGHT_FORMAT_VERSION,
            backbone: backbone.clone(),
            rng_seed: self.rng_seed,
            params: self
                .params
                .iter()
                .map(|(name, t)| NamedArray {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_weight_file(file: WeightFile) -> Result<(Backbone, Self)> {
        if file.format_version != WEIGHT_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported weight format version {}",
                file.format_version
            )));
        }
        file.backbone.validate()?;
        let mut params = BTreeMap::new();
        for arr in file.params {
            let t = Tensor::new(arr.shape, arr.data)?;
            if params.insert(arr.name.clone(), t).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate parameter `{}`", arr.name)));
            }
        }
        let store = Self {
            params,
            rng_seed: file.rng_seed,
        };
        store.check_matches(&file.backbone)?;
        Ok((file.backbone, store))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk weights. Floats are written in shortest round-trip form, so
/// reading a file back reproduces every value bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub format_version: u32,
    pub backbone: Backbone,
    pub rng_seed: u64,
    pub params: Vec<NamedArray>,
}

pub fn save_weights(path: &Path, backbone: &Backbone, params: &ParamStore) -> Result<()> {
    let json = serde_json::to_string_pretty(&params.to_weight_file(backbone))?;
    crate::datagen::write_atomic(path, (json + "\n").as_bytes())
}

pub fn load_weights(path: &Path) -> Result<(Backbone, ParamStore)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: WeightFile = serde_json::from_str(&text)?;
    ParamStore::from_weight_file(file)
}
