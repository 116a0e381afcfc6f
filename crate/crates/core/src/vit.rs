//! Vision Transformer: patch embedding, pre-norm encoder layers and a
//! class-token classification head.
//!
//! Images are `[batch, height, width, channels]` with values in `[0, 1]`.
//! A patch is flattened row-major with channels fastest, i.e. element
//! `(py, px, c)` of a patch lands at `(py · P + px) · C + c`. Patches are
//! enumerated row-major over the patch grid. Checkpoints depend on this order.
//!
//! Weight matrices are stored `[in, out]` so a projection is `x · W + b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{self, AdapterParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Standard deviation of the class token and position embedding at
/// initialisation. These feed the first layernorm directly; much smaller
/// values leave every token nearly identical and make early SGD steps
/// ill-conditioned.
pub const EMBED_INIT_STD: f64 = 0.5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// ViT-B/16 at 224×224 resolution.
    pub fn vit_base(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            num_classes,
        }
    }

    /// ViT-S/16 at 224×224 resolution.
    pub fn vit_small(num_classes: usize) -> Self {
        ViTConfig {
            embed_dim: 384,
            num_heads: 6,
            ..Self::vit_base(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("vit {name} must be >= 1")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Every parameter as `(name, shape)` in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_patches() + 1, d]),
        ];
        for l in 0..self.depth {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.scale"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            for proj in ["q", "k", "v", "out"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                out.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            out.push((p("ln2.scale"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
            out.push((p("mlp.fc1.weight"), vec![d, h]));
            out.push((p("mlp.fc1.bias"), vec![h]));
            out.push((p("mlp.fc2.weight"), vec![h, d]));
            out.push((p("mlp.fc2.bias"), vec![d]));
        }
        out.push(("final_ln.scale".to_string(), vec![d]));
        out.push(("final_ln.bias".to_string(), vec![d]));
        out.push(("head.weight".to_string(), vec![d, self.num_classes]));
        out.push(("head.bias".to_string(), vec![self.num_classes]));
        out
    }

    /// `key=value` pairs describing the architecture, for checkpoint headers.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        [
            ("vit.image_size", self.image_size),
            ("vit.channels", self.channels),
            ("vit.patch_size", self.patch_size),
            ("vit.embed_dim", self.embed_dim),
            ("vit.depth", self.depth),
            ("vit.num_heads", self.num_heads),
            ("vit.mlp_ratio", self.mlp_ratio),
            ("vit.num_classes", self.num_classes),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub fn from_meta<'a>(lookup: impl Fn(&str) -> Option<&'a str>) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            let raw = lookup(key)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing header key `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::MalformedCheckpoint(format!("bad value `{raw}` for `{key}`")))
        };
        let cfg = ViTConfig {
            image_size: get("vit.image_size")?,
            channels: get("vit.channels")?,
            patch_size: get("vit.patch_size")?,
            embed_dim: get("vit.embed_dim")?,
            depth: get("vit.depth")?,
            num_heads: get("vit.num_heads")?,
            mlp_ratio: get("vit.mlp_ratio")?,
            num_classes: get("vit.num_classes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All learnable base weights of a ViT, keyed by the names of
/// [`ViTConfig::param_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub store: ParamStore,
}

impl ViTParams {
    /// Every tensor zero, layernorm scales included.
    pub fn zeros(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            store.insert(name, Tensor::zeros(shape))?;
        }
        Ok(ViTParams { config, store })
    }

    /// Seeded initialisation: weight matrices ~ N(0, 1/fan_in), class token
    /// and position embedding ~ N(0, EMBED_INIT_STD²), biases zero,
    /// layernorm scales one.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".scale") {
                Tensor::ones(shape)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name.ends_with(".weight") {
                let std = 1.0 / (shape[0] as f64).sqrt();
                Tensor::randn(shape, std, &mut rng)
            } else {
                Tensor::randn(shape, EMBED_INIT_STD, &mut rng)
            };
            store.insert(name, t)?;
        }
        Ok(ViTParams { config, store })
    }

    /// Rebuild from named tensors, checking every expected tensor is present
    /// with the right shape.
    pub fn from_tensors(config: ViTConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            store.insert(name, t.clone())?;
        }
        Ok(ViTParams { config, store })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.store.require(name)?.value)
    }
}

fn bind(g: &mut Graph, params: &ViTParams, name: &str) -> Result<Var> {
    let p = params.store.require(name)?;
    Ok(g.param(name, p))
}

/// `x · W + b` with an optional low-rank branch for `site`.
fn projection(
    g: &mut Graph,
    x: Var,
    params: &ViTParams,
    adapters: Option<&AdapterParams>,
    site: &str,
    branch_input: Option<Var>,
) -> Result<Var> {
    let w = bind(g, params, &format!("{site}.weight"))?;
    let b = bind(g, params, &format!("{site}.bias"))?;
    let xw = g.matmul(x, w)?;
    let base = g.add(xw, b)?;
    match adapters.and_then(|a| a.site(site).map(|s| (a, s))) {
        Some((ad, factors)) => {
            let input = branch_input.unwrap_or(x);
            let delta = adapters::low_rank_delta(g, input, ad, factors)?;
            g.add(base, delta)
        }
        None => Ok(base),
    }
}

/// Input of the low-rank branches that consume `x`: `x` itself for plain
/// LoRA or when no adapter attaches there, otherwise the LNLoRA
/// normalisation named `ln_site`.
fn branch_input(
    g: &mut Graph,
    x: Var,
    adapters: Option<&AdapterParams>,
    ln_site: &str,
) -> Result<Option<Var>> {
    match adapters {
        Some(ad) => ad.normalized_input(g, x, ln_site),
        None => Ok(None),
    }
}

fn layer_norm(g: &mut Graph, x: Var, params: &ViTParams, prefix: &str) -> Result<Var> {
    let scale = bind(g, params, &format!("{prefix}.scale"))?;
    let bias = bind(g, params, &format!("{prefix}.bias"))?;
    g.layer_norm(x, scale, bias)
}

/// Patch extraction, projection by `E`, class-token prepend and position
/// embedding: `[B, H, W, C] → [B, N + 1, D]`.
pub fn patch_embed(
    g: &mut Graph,
    images: Var,
    params: &ViTParams,
    adapters: Option<&AdapterParams>,
) -> Result<Var> {
    let cfg = &params.config;
    let shape = g.shape(images).to_vec();
    let expect = [cfg.image_size, cfg.image_size, cfg.channels];
    if shape.len() != 4 || shape[1..] != expect {
        return Err(Error::dim(
            "patch_embed",
            format!("images {shape:?} do not match [batch, {}, {}, {}]", expect[0], expect[1], expect[2]),
        ));
    }
    let batch = shape[0];
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let d = cfg.embed_dim;

    // [B, side, P, side, P, C] → swap the in-patch row axis with the grid
    // column axis → [B, side, side, P, P, C] → [B, N, P·P·C]
    let grid = g.reshape(images, &[batch, side, p, side, p, cfg.channels])?;
    let grid = g.transpose(grid, 2, 3)?;
    let patches = g.reshape(grid, &[batch, cfg.num_patches(), cfg.patch_dim()])?;

    let ln_in = branch_input(g, patches, adapters, "patch_embed")?;
    let tokens = projection(g, patches, params, adapters, "patch_embed", ln_in)?;

    let cls = bind(g, params, "cls_token")?;
    let cls = g.reshape(cls, &[1, 1, d])?;
    let cls = if batch == 1 {
        cls
    } else {
        g.concat(&vec![cls; batch], 0)?
    };
    let seq = g.concat(&[cls, tokens], 1)?;
    let pos = bind(g, params, "pos_embed")?;
    g.add(seq, pos)
}

/// Multi-head scaled dot-product self-attention of layer `layer` applied to
/// already-normalised tokens `[B, T, D]`. The residual is added by the caller.
pub fn msa(
    g: &mut Graph,
    tokens: Var,
    params: &ViTParams,
    adapters: Option<&AdapterParams>,
    layer: usize,
) -> Result<Var> {
    let cfg = &params.config;
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.embed_dim {
        return Err(Error::dim(
            "msa",
            format!("tokens {shape:?} do not match [batch, seq, {}]", cfg.embed_dim),
        ));
    }
    let (batch, seq) = (shape[0], shape[1]);
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let prefix = format!("layers.{layer}.attn");

    let ln_in = branch_input(g, tokens, adapters, &format!("{prefix}.qkv"))?;
    let mut qkv = Vec::with_capacity(3);
    for proj in ["q", "k", "v"] {
        let site = format!("{prefix}.{proj}");
        let ln_in = match ln_in {
            Some(v) => Some(v),
            None => branch_input(g, tokens, adapters, &site)?,
        };
        let x = projection(g, tokens, params, adapters, &site, ln_in)?;
        // [B, T, D] → [B, T, h, hd] → [B, h, T, hd] → [B·h, T, hd]
        let x = g.reshape(x, &[batch, seq, heads, hd])?;
        let x = g.transpose(x, 1, 2)?;
        qkv.push(g.reshape(x, &[batch * heads, seq, hd])?);
    }
    let kt = g.transpose(qkv[1], 1, 2)?;
    let scores = g.matmul(qkv[0], kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let weights = g.softmax(scores)?;
    let ctx = g.matmul(weights, qkv[2])?;
    let ctx = g.reshape(ctx, &[batch, heads, seq, hd])?;
    let ctx = g.transpose(ctx, 1, 2)?;
    let ctx = g.reshape(ctx, &[batch, seq, cfg.embed_dim])?;
    projection(g, ctx, params, adapters, &format!("{prefix}.out"), None)
}

fn mlp(
    g: &mut Graph,
    tokens: Var,
    params: &ViTParams,
    adapters: Option<&AdapterParams>,
    layer: usize,
) -> Result<Var> {
    let fc1 = format!("layers.{layer}.mlp.fc1");
    let fc2 = format!("layers.{layer}.mlp.fc2");
    let ln_in = branch_input(g, tokens, adapters, &fc1)?;
    let hidden = projection(g, tokens, params, adapters, &fc1, ln_in)?;
    let hidden = g.gelu(hidden);
    let ln_in = branch_input(g, hidden, adapters, &fc2)?;
    projection(g, hidden, params, adapters, &fc2, ln_in)
}

/// Logits `[B, num_classes]` for images `[B, H, W, C]`.
pub fn forward(
    g: &mut Graph,
    images: Var,
    params: &ViTParams,
    adapters: Option<&AdapterParams>,
) -> Result<Var> {
    params.config.validate()?;
    if let Some(ad) = adapters {
        if ad.arch != params.config {
            return Err(Error::Config(format!(
                "adapters were built for {:?}, model is {:?}",
                ad.arch, params.config
            )));
        }
    }
    let mut z = patch_embed(g, images, params, adapters)?;
    for l in 0..params.config.depth {
        let normed = layer_norm(g, z, params, &format!("layers.{l}.ln1"))?;
        let attn = msa(g, normed, params, adapters, l)?;
        z = g.add(attn, z)?;
        let normed = layer_norm(g, z, params, &format!("layers.{l}.ln2"))?;
        let ff = mlp(g, normed, params, adapters, l)?;
        z = g.add(ff, z)?;
    }
    let z = layer_norm(g, z, params, "final_ln")?;
    let batch = g.shape(z)[0];
    let cls = g.slice(z, 1, 0, 1)?;
    let cls = g.reshape(cls, &[batch, params.config.embed_dim])?;
    let ln_in = branch_input(g, cls, adapters, "head")?;
    projection(g, cls, params, adapters, "head", ln_in)
}

/// Convenience wrapper: logits as a tensor, no gradients tracked.
pub fn predict_logits(
    images: &Tensor,
    params: &ViTParams,
    adapters: Option<&AdapterParams>,
) -> Result<Tensor> {
    let mut g = Graph::without_param_grads();
    let x = g.input(images.clone(), false);
    let out = forward(&mut g, x, params, adapters)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            channels: 2,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut c = tiny();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_count_for_sixteen_pixel_images() {
        let cfg = ViTConfig {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
        };
        let params = ViTParams::init(cfg, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full([2, 16, 16, 3], 0.5), false);
        let tokens = patch_embed(&mut g, x, &params, None).unwrap();
        assert_eq!(g.shape(tokens), &[2, 17, 8]);
    }

    #[test]
    fn zero_embedding_gives_zero_tokens() {
        let params = ViTParams::zeros(tiny()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 8, 8, 2], 0.3), false);
        let tokens = patch_embed(&mut g, x, &params, None).unwrap();
        assert!(g.value(tokens).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_projection_exposes_flattened_patch() {
        // One 2×2×2 patch, D = P²·C = 8, E = I.
        let cfg = ViTConfig {
            image_size: 2,
            channels: 2,
            patch_size: 2,
            embed_dim: 8,
            depth: 1,
            num_heads: 1,
            mlp_ratio: 1,
            num_classes: 2,
        };
        let mut params = ViTParams::zeros(cfg).unwrap();
        let mut eye = Tensor::zeros([8, 8]);
        for i in 0..8 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        params.store.get_mut("patch_embed.weight").unwrap().value = eye;
        let img: Vec<f64> = (0..8).map(|i| i as f64 / 10.0).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new([1, 2, 2, 2], img.clone()).unwrap(), false);
        let tokens = patch_embed(&mut g, x, &params, None).unwrap();
        // Row-major within the patch with channels fastest is exactly the
        // image's own memory order for a single patch.
        assert_eq!(&g.value(tokens).data()[8..], img.as_slice());
    }

    #[test]
    fn patch_flattening_order_row_major_channels_fastest() {
        let cfg = ViTConfig {
            image_size: 4,
            channels: 2,
            patch_size: 2,
            embed_dim: 8,
            depth: 1,
            num_heads: 1,
            mlp_ratio: 1,
            num_classes: 2,
        };
        let mut params = ViTParams::zeros(cfg.clone()).unwrap();
        let mut eye = Tensor::zeros([8, 8]);
        for i in 0..8 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        params.store.get_mut("patch_embed.weight").unwrap().value = eye;
        // pixel (y, x, c) encoded as 100y + 10x + c
        let mut img = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..2 {
                    img.push((100 * y + 10 * x + c) as f64);
                }
            }
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new([1, 4, 4, 2], img).unwrap(), false);
        let tokens = patch_embed(&mut g, x, &params, None).unwrap();
        let t = g.value(tokens).data();
        for patch in 0..4 {
            let (gy, gx) = (patch / 2, patch % 2);
            for py in 0..2 {
                for px in 0..2 {
                    for c in 0..2 {
                        let got = t[(patch + 1) * 8 + (py * 2 + px) * 2 + c];
                        let want = (100 * (gy * 2 + py) + 10 * (gx * 2 + px) + c) as f64;
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let cfg = tiny();
        let params = ViTParams::init(cfg.clone(), 3).unwrap();
        let x = Tensor::randn([1, 1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let mut g = Graph::new();
        let xv = g.input(x.clone(), false);
        let out = msa(&mut g, xv, &params, None, 0).unwrap();

        let mut h = Graph::new();
        let xv = h.input(x, false);
        let v = projection(&mut h, xv, &params, None, "layers.0.attn.v", None).unwrap();
        let o = projection(&mut h, v, &params, None, "layers.0.attn.out", None).unwrap();
        assert!(g.value(out).max_abs_diff(h.value(o)) < 1e-15);
    }

    #[test]
    fn zero_value_projection_gives_zero_attention() {
        let mut params = ViTParams::init(tiny(), 4).unwrap();
        params.store.get_mut("layers.0.attn.v.weight").unwrap().value = Tensor::zeros([8, 8]);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn([2, 5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1)), false);
        let out = msa(&mut g, x, &params, None, 0).unwrap();
        assert!(g.value(out).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let params = ViTParams::init(tiny(), 5).unwrap();
        let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).cos()).collect();
        let data = [row.clone(), row].concat();
        let mut g = Graph::new();
        let x = g.input(Tensor::new([1, 2, 8], data).unwrap(), false);
        msa(&mut g, x, &params, None, 0).unwrap();
        let softmax = g
            .vars()
            .find(|&v| g.op_kind(v) == crate::autodiff::OpKind::Softmax)
            .unwrap();
        for w in g.value(softmax).data() {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_yield_head_bias() {
        let mut params = ViTParams::zeros(tiny()).unwrap();
        let bias = Tensor::new([3], vec![0.25, -1.0, 2.0]).unwrap();
        params.store.get_mut("head.bias").unwrap().value = bias.clone();
        let x = Tensor::randn([4, 8, 8, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let logits = predict_logits(&x, &params, None).unwrap();
        for row in logits.data().chunks(3) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let params = ViTParams::init(tiny(), 11).unwrap();
        let x = Tensor::randn([3, 8, 8, 2], 0.3, &mut ChaCha8Rng::seed_from_u64(12));
        let a = predict_logits(&x, &params, None).unwrap();
        let b = predict_logits(&x, &ViTParams::init(tiny(), 11).unwrap(), None).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let params = ViTParams::init(tiny(), 0).unwrap();
        let x = Tensor::zeros([1, 4, 4, 2]);
        assert!(matches!(
            predict_logits(&x, &params, None),
            Err(Error::Dimension { .. })
        ));
    }
}
