//! The classifier abstraction shared by attacks and the trainer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{trainable_param_count, AdapterParams, ParamCount};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vit::{self, ViTParams};

/// A differentiable image classifier over `[B, H, W, C]` inputs.
///
/// `logits` must be a pure function of the parameters and the input so that
/// graphs for different inputs can be built against shared weights.
pub trait Classifier {
    fn logits(&self, g: &mut Graph, images: Var) -> Result<Var>;

    fn num_classes(&self) -> usize;

    /// Every parameter store the logits read from. Names are unique across
    /// stores.
    fn param_stores(&self) -> Vec<&ParamStore>;

    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore>;
}

/// Logits for a batch without tracking any gradients.
pub fn predict(model: &dyn Classifier, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::without_param_grads();
    let x = g.input(images.clone(), false);
    let out = model.logits(&mut g, x)?;
    Ok(g.value(out).clone())
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// A ViT, optionally carrying adapters on a frozen base.
#[derive(Clone, Debug, PartialEq)]
pub struct VitClassifier {
    pub base: ViTParams,
    pub adapters: Option<AdapterParams>,
}

impl VitClassifier {
    pub fn new(base: ViTParams) -> Self {
        VitClassifier { base, adapters: None }
    }

    pub fn with_adapters(base: ViTParams, adapters: AdapterParams) -> Self {
        VitClassifier {
            base,
            adapters: Some(adapters),
        }
    }

    pub fn trainable_count(&self) -> ParamCount {
        trainable_param_count(&self.base, self.adapters.as_ref())
    }
}

impl Classifier for VitClassifier {
    fn logits(&self, g: &mut Graph, images: Var) -> Result<Var> {
        vit::forward(g, images, &self.base, self.adapters.as_ref())
    }

    fn num_classes(&self) -> usize {
        self.base.config.num_classes
    }

    fn param_stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.base.store];
        if let Some(a) = &self.adapters {
            v.push(&a.store);
        }
        v
    }

    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![&mut self.base.store];
        if let Some(a) = &mut self.adapters {
            v.push(&mut a.store);
        }
        v
    }
}

/// Affine classifier on flattened pixels: `logits = flatten(x)·W + b`.
///
/// Small enough for closed-form oracles of attacks and optimiser steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub store: ParamStore,
}

impl LinearProbe {
    pub const WEIGHT: &'static str = "probe.weight";
    pub const BIAS: &'static str = "probe.bias";

    pub fn new(input_shape: [usize; 3], weight: Tensor, bias: Tensor) -> Result<Self> {
        let dim: usize = input_shape.iter().product();
        let classes = bias.numel();
        if weight.shape() != [dim, classes] || bias.shape() != [classes] {
            return Err(Error::dim(
                "linear probe",
                format!(
                    "weight {:?} / bias {:?} incompatible with input {input_shape:?}",
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        let mut store = ParamStore::new();
        store.insert(Self::WEIGHT, weight)?;
        store.insert(Self::BIAS, bias)?;
        Ok(LinearProbe {
            input_shape,
            classes,
            store,
        })
    }

    pub fn random(input_shape: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        let dim: usize = input_shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn([dim, classes], 1.0 / (dim as f64).sqrt(), &mut rng);
        Self::new(input_shape, w, Tensor::zeros([classes]))
    }
}

impl Classifier for LinearProbe {
    fn logits(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let batch = g.shape(images)[0];
        let dim: usize = self.input_shape.iter().product();
        let flat = g.reshape(images, &[batch, dim])?;
        let w = g.param(Self::WEIGHT, self.store.require(Self::WEIGHT)?);
        let b = g.param(Self::BIAS, self.store.require(Self::BIAS)?);
        let xw = g.matmul(flat, w)?;
        g.add(xw, b)
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn param_stores(&self) -> Vec<&ParamStore> {
        vec![&self.store]
    }

    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}
