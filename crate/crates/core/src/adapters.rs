//! Low-rank adapters attached to frozen ViT projections.
//!
//! For a base projection `h = x·W + b` (`W` stored `[in, out]`), an adapter
//! adds `s · u·Aᵀ·Bᵀ` with `A: [r, in]`, `B: [out, r]`, i.e. the usual
//! `ΔW = B·A` on the `[out, in]` orientation. Plain LoRA feeds `u = x`;
//! LNLoRA feeds `u = α ⊙ norm(x) + β`, a full layer normalisation with its
//! own learnable affine.
//!
//! Sites per placement flag:
//! - patch embedding: `E`
//! - msa: `W_Q`, `W_K`, `W_V` (the output projection is not adapted)
//! - mlp: `fc1`, `fc2`
//! - head: the classifier matrix
//!
//! By default LNLoRA normalisations are shared per distinct input tensor, so
//! Q/K/V share one while fc1 and fc2 each get their own
//! ([`LnSharing::PerInput`]).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};
use crate::vit::{ViTConfig, ViTParams};

/// Prefix of every adapter tensor name in a checkpoint.
pub const ADAPTER_PREFIX: &str = "adapter/";

/// Standard deviation of the Gaussian used for `A` at injection.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    Lora,
    LnLora,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Lora => "lora",
            AdapterKind::LnLora => "lnlora",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "lnlora" => Ok(AdapterKind::LnLora),
            other => Err(Error::Config(format!(
                "unknown adapter kind `{other}` (expected lora or lnlora)"
            ))),
        }
    }
}

/// Which ViT components receive adapters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Placement {
    pub patch_embedding: bool,
    pub msa: bool,
    pub mlp: bool,
    pub head: bool,
}

impl Placement {
    /// Patch embedding, MSA, MLP and head.
    pub const ALL: Placement = Placement {
        patch_embedding: true,
        msa: true,
        mlp: true,
        head: true,
    };

    /// The classic LoRA placement: MSA and MLP only.
    pub const MSA_MLP: Placement = Placement {
        patch_embedding: false,
        msa: true,
        mlp: true,
        head: false,
    };

    pub fn any(&self) -> bool {
        self.patch_embedding || self.msa || self.mlp || self.head
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.patch_embedding, "patch"),
            (self.msa, "msa"),
            (self.mlp, "mlp"),
            (self.head, "head"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for Placement {
    type Err = Error;

    /// Comma-separated component list, e.g. `patch,msa,mlp,head`.
    fn from_str(s: &str) -> Result<Self> {
        let mut p = Placement::default();
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "patch" | "patch_embedding" | "patch_embed" => p.patch_embedding = true,
                "msa" => p.msa = true,
                "mlp" => p.mlp = true,
                "head" => p.head = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown placement `{other}` (expected patch, msa, mlp, head)"
                    )))
                }
            }
        }
        if !p.any() {
            return Err(Error::Config("placement must name at least one component".into()));
        }
        Ok(p)
    }
}

/// Granularity of LNLoRA normalisations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LnSharing {
    /// One normalisation per distinct input tensor (Q/K/V share one).
    #[default]
    PerInput,
    /// One normalisation per adapted projection.
    PerProjection,
}

impl fmt::Display for LnSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LnSharing::PerInput => "per-input",
            LnSharing::PerProjection => "per-projection",
        })
    }
}

impl FromStr for LnSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-input" => Ok(LnSharing::PerInput),
            "per-projection" => Ok(LnSharing::PerProjection),
            other => Err(Error::Config(format!(
                "unknown ln sharing `{other}` (expected per-input or per-projection)"
            ))),
        }
    }
}

/// What to do when the requested rank exceeds `min(in, out)` of a site.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RankPolicy {
    /// Use `min(rank, in, out)` at that site.
    #[default]
    Clamp,
    /// Fail with [`Error::AdapterRank`].
    Strict,
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankPolicy::Clamp => "clamp",
            RankPolicy::Strict => "strict",
        })
    }
}

impl FromStr for RankPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamp" => Ok(RankPolicy::Clamp),
            "strict" => Ok(RankPolicy::Strict),
            other => Err(Error::Config(format!(
                "unknown rank policy `{other}` (expected clamp or strict)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub rank: usize,
    pub placement: Placement,
    pub scaling: f64,
    pub ln_sharing: LnSharing,
    pub rank_policy: RankPolicy,
}

impl AdapterConfig {
    pub fn new(kind: AdapterKind, rank: usize, placement: Placement) -> Self {
        AdapterConfig {
            kind,
            rank,
            placement,
            scaling: 1.0,
            ln_sharing: LnSharing::default(),
            rank_policy: RankPolicy::default(),
        }
    }

    /// LNLoRA in all four components.
    pub fn full_lora_at(rank: usize) -> Self {
        Self::new(AdapterKind::LnLora, rank, Placement::ALL)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Rank("adapter rank must be >= 1".into()));
        }
        if !self.placement.any() {
            return Err(Error::Config("placement must name at least one component".into()));
        }
        if !self.scaling.is_finite() {
            return Err(Error::Config(format!("scaling {} is not finite", self.scaling)));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("adapter.kind".into(), self.kind.to_string()),
            ("adapter.rank".into(), self.rank.to_string()),
            ("adapter.placement".into(), self.placement.to_string()),
            ("adapter.scaling".into(), self.scaling.to_string()),
            ("adapter.ln_sharing".into(), self.ln_sharing.to_string()),
            ("adapter.rank_policy".into(), self.rank_policy.to_string()),
        ]
    }

    pub fn from_meta<'a>(lookup: impl Fn(&str) -> Option<&'a str>) -> Result<Self> {
        let get = |key: &str| {
            lookup(key)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing header key `{key}`")))
        };
        let rank = get("adapter.rank")?;
        let scaling = get("adapter.scaling")?;
        let cfg = AdapterConfig {
            kind: get("adapter.kind")?.parse()?,
            rank: rank
                .parse()
                .map_err(|_| Error::MalformedCheckpoint(format!("bad adapter.rank `{rank}`")))?,
            placement: get("adapter.placement")?.parse()?,
            scaling: scaling
                .parse()
                .map_err(|_| Error::MalformedCheckpoint(format!("bad adapter.scaling `{scaling}`")))?,
            ln_sharing: get("adapter.ln_sharing")?.parse()?,
            rank_policy: get("adapter.rank_policy")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which bucket of the trainable-parameter breakdown a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Patch,
    Msa,
    Mlp,
    Head,
    LnLoraAffine,
    /// Base layernorm scales and biases (per-layer and final).
    LayerNorm,
    /// Class token and position embedding.
    Embedding,
}

/// One adapted projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    /// Base projection prefix, e.g. `layers.0.attn.q`.
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Effective rank at this site.
    pub rank: usize,
    pub component: Component,
    /// LNLoRA normalisation feeding this site, if any.
    pub ln_site: Option<String>,
}

impl Site {
    pub fn a_name(&self) -> String {
        format!("{ADAPTER_PREFIX}{}.lora_a", self.name)
    }

    pub fn b_name(&self) -> String {
        format!("{ADAPTER_PREFIX}{}.lora_b", self.name)
    }
}

/// One LNLoRA normalisation with affine `(α, β)` of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LnSite {
    pub name: String,
    pub dim: usize,
}

impl LnSite {
    pub fn scale_name(&self) -> String {
        format!("{ADAPTER_PREFIX}{}.ln_scale", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{ADAPTER_PREFIX}{}.ln_bias", self.name)
    }
}

/// Sites and normalisations implied by an architecture and adapter config,
/// without allocating any tensors.
pub fn layout(arch: &ViTConfig, cfg: &AdapterConfig) -> Result<(Vec<Site>, Vec<LnSite>)> {
    arch.validate()?;
    cfg.validate()?;
    let d = arch.embed_dim;
    let hidden = arch.mlp_hidden();
    // (site, in, out, component, shared ln name)
    let mut raw: Vec<(String, usize, usize, Component, String)> = Vec::new();
    if cfg.placement.patch_embedding {
        raw.push(("patch_embed".into(), arch.patch_dim(), d, Component::Patch, "patch_embed".into()));
    }
    for l in 0..arch.depth {
        if cfg.placement.msa {
            for proj in ["q", "k", "v"] {
                raw.push((
                    format!("layers.{l}.attn.{proj}"),
                    d,
                    d,
                    Component::Msa,
                    format!("layers.{l}.attn.qkv"),
                ));
            }
        }
        if cfg.placement.mlp {
            let fc1 = format!("layers.{l}.mlp.fc1");
            let fc2 = format!("layers.{l}.mlp.fc2");
            raw.push((fc1.clone(), d, hidden, Component::Mlp, fc1));
            raw.push((fc2.clone(), hidden, d, Component::Mlp, fc2));
        }
    }
    if cfg.placement.head {
        raw.push(("head".into(), d, arch.num_classes, Component::Head, "head".into()));
    }

    let mut sites = Vec::with_capacity(raw.len());
    let mut ln_sites: Vec<LnSite> = Vec::new();
    for (name, in_dim, out_dim, component, shared) in raw {
        let max = in_dim.min(out_dim);
        let rank = if cfg.rank <= max {
            cfg.rank
        } else {
            match cfg.rank_policy {
                RankPolicy::Clamp => max,
                RankPolicy::Strict => {
                    return Err(Error::AdapterRank {
                        site: name,
                        rank: cfg.rank,
                        max,
                    })
                }
            }
        };
        let ln_site = match cfg.kind {
            AdapterKind::Lora => None,
            AdapterKind::LnLora => {
                let ln_name = match cfg.ln_sharing {
                    LnSharing::PerInput => shared,
                    LnSharing::PerProjection => name.clone(),
                };
                if !ln_sites.iter().any(|s| s.name == ln_name) {
                    ln_sites.push(LnSite {
                        name: ln_name.clone(),
                        dim: in_dim,
                    });
                }
                Some(ln_name)
            }
        };
        sites.push(Site {
            name,
            in_dim,
            out_dim,
            rank,
            component,
            ln_site,
        });
    }
    Ok((sites, ln_sites))
}

/// Adapter tensors for one ViT. All adapter parameters are trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// Architecture the adapters were built for.
    pub arch: ViTConfig,
    pub config: AdapterConfig,
    pub store: ParamStore,
    sites: Vec<Site>,
    ln_sites: Vec<LnSite>,
}

impl AdapterParams {
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn ln_sites(&self) -> &[LnSite] {
        &self.ln_sites
    }

    pub fn site(&self, name: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.name == name)
    }

    /// Rebuild from named tensors (checkpoint loading).
    pub fn from_tensors(
        arch: ViTConfig,
        config: AdapterConfig,
        tensors: &[(String, Tensor)],
    ) -> Result<Self> {
        let (sites, ln_sites) = layout(&arch, &config)?;
        let mut store = ParamStore::new();
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for s in &sites {
            expected.push((s.a_name(), vec![s.rank, s.in_dim]));
            expected.push((s.b_name(), vec![s.out_dim, s.rank]));
        }
        for l in &ln_sites {
            expected.push((l.scale_name(), vec![l.dim]));
            expected.push((l.bias_name(), vec![l.dim]));
        }
        for (name, shape) in expected {
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
        if let Some((extra, _)) = tensors
            .iter()
            .find(|(n, _)| n.starts_with(ADAPTER_PREFIX) && !store.contains(n))
        {
            return Err(Error::MalformedCheckpoint(format!(
                "unexpected adapter tensor `{extra}` for a {} adapter",
                config.kind
            )));
        }
        Ok(AdapterParams {
            arch,
            config,
            store,
            sites,
            ln_sites,
        })
    }

    /// LNLoRA-normalised copy of `x` for the normalisation named `ln_site`,
    /// or `None` when this adapter set has no such normalisation.
    pub fn normalized_input(&self, g: &mut Graph, x: Var, ln_site: &str) -> Result<Option<Var>> {
        let Some(site) = self.ln_sites.iter().find(|s| s.name == ln_site) else {
            return Ok(None);
        };
        let scale_name = site.scale_name();
        let bias_name = site.bias_name();
        let alpha = g.param(&scale_name, self.store.require(&scale_name)?);
        let beta = g.param(&bias_name, self.store.require(&bias_name)?);
        g.layer_norm(x, alpha, beta).map(Some)
    }

    /// Dense merged weight `W + s·(B·A)ᵀ` for a plain-LoRA site.
    pub fn merge_site(&self, base: &ViTParams, site: &str) -> Result<Tensor> {
        if self.config.kind == AdapterKind::LnLora {
            return Err(Error::Unsupported(format!(
                "LNLoRA site `{site}` depends on its input and cannot be merged"
            )));
        }
        let s = self
            .site(site)
            .ok_or_else(|| Error::Config(format!("no adapter at site `{site}`")))?;
        merge_lora(
            base.tensor(&format!("{site}.weight"))?,
            &self.store.require(&s.a_name())?.value,
            &self.store.require(&s.b_name())?.value,
            self.config.scaling,
        )
    }
}

/// Freeze every base parameter and attach freshly initialised adapters:
/// `A ~ N(0, 0.02²)`, `B = 0`, `α = 1`, `β = 0`.
pub fn inject_adapters(base: &mut ViTParams, cfg: &AdapterConfig, seed: u64) -> Result<AdapterParams> {
    let (sites, ln_sites) = layout(&base.config, cfg)?;
    base.store.set_frozen_all(true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in &sites {
        store.insert(s.a_name(), Tensor::randn([s.rank, s.in_dim], A_INIT_STD, &mut rng))?;
        store.insert(s.b_name(), Tensor::zeros([s.out_dim, s.rank]))?;
    }
    for l in &ln_sites {
        store.insert(l.scale_name(), Tensor::ones([l.dim]))?;
        store.insert(l.bias_name(), Tensor::zeros([l.dim]))?;
    }
    Ok(AdapterParams {
        arch: base.config.clone(),
        config: cfg.clone(),
        store,
        sites,
        ln_sites,
    })
}

/// Graph form of the low-rank branch: `input · Aᵀ · (s·B)ᵀ`.
///
/// Scaling is applied to `B` so that `(s, A, B)` and `(1, A, s·B)` give
/// bitwise-identical results.
pub fn lora_branch(g: &mut Graph, input: Var, a: Var, b: Var, scaling: f64) -> Result<Var> {
    let at = g.transpose(a, 0, 1)?;
    let down = g.matmul(input, at)?;
    let b = g.scale(b, scaling);
    let bt = g.transpose(b, 0, 1)?;
    g.matmul(down, bt)
}

/// Low-rank branch of `site` within a ViT forward pass.
pub(crate) fn low_rank_delta(g: &mut Graph, input: Var, ad: &AdapterParams, site: &Site) -> Result<Var> {
    let (an, bn) = (site.a_name(), site.b_name());
    let a = g.param(&an, ad.store.require(&an)?);
    let b = g.param(&bn, ad.store.require(&bn)?);
    lora_branch(g, input, a, b, ad.config.scaling)
}

fn linear(g: &mut Graph, x: Var, w: &Tensor, bias: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let bias = g.constant(bias.clone());
    let xw = g.matmul(x, w)?;
    g.add(xw, bias)
}

/// `h = x·W + bias + s · x·Aᵀ·Bᵀ` with `W: [in, out]`, `A: [r, in]`,
/// `B: [out, r]`, `x: [.., in]`.
pub fn lora_forward(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    a: &Tensor,
    b: &Tensor,
    scaling: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let base = linear(&mut g, xv, w, bias)?;
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let delta = lora_branch(&mut g, xv, av, bv, scaling)?;
    let h = g.add(base, delta)?;
    Ok(g.value(h).clone())
}

/// `h = x·W + bias + s · LN_{α,β}(x)·Aᵀ·Bᵀ` where `LN_{α,β}` normalises
/// the last axis to zero mean and unit variance and then applies `α ⊙ · + β`.
#[allow(clippy::too_many_arguments)]
pub fn lnlora_forward(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    a: &Tensor,
    b: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    scaling: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let base = linear(&mut g, xv, w, bias)?;
    let alpha = g.constant(alpha.clone());
    let beta = g.constant(beta.clone());
    let normed = g.layer_norm(xv, alpha, beta)?;
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let delta = lora_branch(&mut g, normed, av, bv, scaling)?;
    let h = g.add(base, delta)?;
    Ok(g.value(h).clone())
}

/// Dense `W + s·(B·A)ᵀ` in the `[in, out]` storage orientation.
pub fn merge_lora(w: &Tensor, a: &Tensor, b: &Tensor, scaling: f64) -> Result<Tensor> {
    let (ws, as_, bs) = (w.shape(), a.shape(), b.shape());
    if ws.len() != 2 || as_.len() != 2 || bs.len() != 2 {
        return Err(Error::dim("merge_lora", "weight and factors must be matrices"));
    }
    let (fan_in, fan_out) = (ws[0], ws[1]);
    let rank = as_[0];
    if as_[1] != fan_in || bs[0] != fan_out || bs[1] != rank {
        return Err(Error::dim(
            "merge_lora",
            format!("weight {ws:?} (in × out) incompatible with A {as_:?} and B {bs:?}"),
        ));
    }
    let scaled_b: Vec<f64> = b.data().iter().map(|v| v * scaling).collect();
    let mut merged = w.data().to_vec();
    // merged += Aᵀ [in, r] · (sB)ᵀ [r, out]
    gemm(fan_in, rank, fan_out, a.data(), true, &scaled_b, true, &mut merged, true);
    Tensor::new([fan_in, fan_out], merged)
}

/// Exact trainable-parameter count with a per-component breakdown.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub patch: usize,
    pub msa: usize,
    pub mlp: usize,
    pub head: usize,
    pub lnlora_affine: usize,
    pub layernorm: usize,
    pub embedding: usize,
}

impl ParamCount {
    fn add(&mut self, component: Component, n: usize) {
        self.total += n;
        match component {
            Component::Patch => self.patch += n,
            Component::Msa => self.msa += n,
            Component::Mlp => self.mlp += n,
            Component::Head => self.head += n,
            Component::LnLoraAffine => self.lnlora_affine += n,
            Component::LayerNorm => self.layernorm += n,
            Component::Embedding => self.embedding += n,
        }
    }

    /// Sum of the breakdown buckets; always equals `total`.
    pub fn breakdown_sum(&self) -> usize {
        self.patch + self.msa + self.mlp + self.head + self.lnlora_affine + self.layernorm + self.embedding
    }
}

/// Breakdown bucket of a base parameter name.
pub fn base_component(name: &str) -> Component {
    if name.starts_with("patch_embed.") {
        Component::Patch
    } else if name == "cls_token" || name == "pos_embed" {
        Component::Embedding
    } else if name.starts_with("head.") {
        Component::Head
    } else if name.contains(".attn.") {
        Component::Msa
    } else if name.contains(".mlp.") {
        Component::Mlp
    } else {
        Component::LayerNorm
    }
}

/// Count over materialised parameters, honouring freeze flags.
pub fn trainable_param_count(base: &ViTParams, adapters: Option<&AdapterParams>) -> ParamCount {
    let mut count = ParamCount::default();
    for (name, p) in base.store.iter() {
        if p.trainable() {
            count.add(base_component(name), p.numel());
        }
    }
    if let Some(ad) = adapters {
        for s in &ad.sites {
            for n in [s.a_name(), s.b_name()] {
                if let Some(p) = ad.store.get(&n).filter(|p| p.trainable()) {
                    count.add(s.component, p.numel());
                }
            }
        }
        for l in &ad.ln_sites {
            for n in [l.scale_name(), l.bias_name()] {
                if let Some(p) = ad.store.get(&n).filter(|p| p.trainable()) {
                    count.add(Component::LnLoraAffine, p.numel());
                }
            }
        }
    }
    count
}

/// Closed-form count from configurations alone. With `adapter = None` the
/// base is fully trainable (full finetuning); otherwise the base is frozen
/// and only adapter tensors count.
pub fn param_count_for_config(arch: &ViTConfig, adapter: Option<&AdapterConfig>) -> Result<ParamCount> {
    arch.validate()?;
    let mut count = ParamCount::default();
    match adapter {
        None => {
            for (name, shape) in arch.param_shapes() {
                count.add(base_component(&name), shape.iter().product());
            }
        }
        Some(cfg) => {
            let (sites, ln_sites) = layout(arch, cfg)?;
            for s in &sites {
                count.add(s.component, s.rank * (s.in_dim + s.out_dim));
            }
            for l in &ln_sites {
                count.add(Component::LnLoraAffine, 2 * l.dim);
            }
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::predict_logits;
    use rand::SeedableRng;

    fn tiny() -> ViTConfig {
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

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn vit_b_lora_msa_mlp_count() {
        let cfg = AdapterConfig::new(AdapterKind::Lora, 32, Placement::MSA_MLP);
        let c = param_count_for_config(&ViTConfig::vit_base(10), Some(&cfg)).unwrap();
        assert_eq!(c.total, 12 * (3 * 32 * 1536 + 32 * 3840 + 32 * 3840));
        assert_eq!(c.total, 4_718_592);
        assert_eq!(c.breakdown_sum(), c.total);
    }

    #[test]
    fn lnlora_adds_two_dims_per_ln_site() {
        let arch = tiny();
        for sharing in [LnSharing::PerInput, LnSharing::PerProjection] {
            let mut lora = AdapterConfig::new(AdapterKind::Lora, 2, Placement::ALL);
            lora.ln_sharing = sharing;
            let mut ln = lora.clone();
            ln.kind = AdapterKind::LnLora;
            let (_, ln_sites) = layout(&arch, &ln).unwrap();
            let a = param_count_for_config(&arch, Some(&lora)).unwrap();
            let b = param_count_for_config(&arch, Some(&ln)).unwrap();
            let extra: usize = ln_sites.iter().map(|s| 2 * s.dim).sum();
            assert_eq!(b.total - a.total, extra);
            assert_eq!(b.lnlora_affine, extra);
        }
    }

    #[test]
    fn per_input_sharing_gives_one_qkv_norm_per_layer() {
        let (_, ln_sites) = layout(&tiny(), &AdapterConfig::full_lora_at(2)).unwrap();
        let names: Vec<&str> = ln_sites.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "patch_embed",
                "layers.0.attn.qkv",
                "layers.0.mlp.fc1",
                "layers.0.mlp.fc2",
                "layers.1.attn.qkv",
                "layers.1.mlp.fc1",
                "layers.1.mlp.fc2",
                "head"
            ]
        );
        assert_eq!(ln_sites[3].dim, 16);
    }

    #[test]
    fn strict_rank_policy_names_the_site() {
        let mut cfg = AdapterConfig::full_lora_at(4);
        cfg.rank_policy = RankPolicy::Strict;
        match layout(&tiny(), &cfg) {
            Err(Error::AdapterRank { site, rank, max }) => {
                assert_eq!((site.as_str(), rank, max), ("head", 4, 3));
            }
            other => panic!("expected rank error, got {other:?}"),
        }
        cfg.rank_policy = RankPolicy::Clamp;
        let (sites, _) = layout(&tiny(), &cfg).unwrap();
        assert_eq!(sites.last().unwrap().rank, 3);
        assert!(sites.iter().all(|s| s.rank <= s.in_dim.min(s.out_dim)));
    }

    #[test]
    fn zero_rank_rejected() {
        let cfg = AdapterConfig::new(AdapterKind::Lora, 0, Placement::ALL);
        assert!(matches!(cfg.validate(), Err(Error::Rank(_))));
    }

    #[test]
    fn placement_parsing() {
        let p: Placement = "patch,msa,mlp,head".parse().unwrap();
        assert_eq!(p, Placement::ALL);
        assert_eq!(p.to_string(), "patch,msa,mlp,head");
        assert!("".parse::<Placement>().is_err());
        assert!("msa,attn".parse::<Placement>().is_err());
    }

    #[test]
    fn injection_freezes_base_and_initialises_factors() {
        let mut base = ViTParams::init(tiny(), 1).unwrap();
        let ad = inject_adapters(&mut base, &AdapterConfig::full_lora_at(2), 7).unwrap();
        assert!(base.store.iter().all(|(_, p)| p.frozen));
        assert!(ad.store.iter().all(|(_, p)| p.trainable()));
        for s in ad.sites() {
            assert!(ad.store.get(&s.b_name()).unwrap().value.data().iter().all(|v| *v == 0.0));
            assert!(ad.store.get(&s.a_name()).unwrap().value.data().iter().any(|v| *v != 0.0));
        }
        for l in ad.ln_sites() {
            assert!(ad.store.get(&l.scale_name()).unwrap().value.data().iter().all(|v| *v == 1.0));
            assert!(ad.store.get(&l.bias_name()).unwrap().value.data().iter().all(|v| *v == 0.0));
        }
        let count = trainable_param_count(&base, Some(&ad));
        assert_eq!(count.total, ad.store.total_numel());
        assert_eq!(count, param_count_for_config(&base.config, Some(&ad.config)).unwrap());
    }

    #[test]
    fn lora_kind_has_no_affine() {
        let mut base = ViTParams::init(tiny(), 1).unwrap();
        let ad = inject_adapters(&mut base, &AdapterConfig::new(AdapterKind::Lora, 2, Placement::ALL), 7).unwrap();
        assert!(ad.ln_sites().is_empty());
        assert!(ad.store.iter().all(|(n, _)| n.ends_with(".lora_a") || n.ends_with(".lora_b")));
    }

    #[test]
    fn zero_b_is_identity_for_both_kinds() {
        let x = Tensor::randn([4, 8, 8, 2], 0.5, &mut rng(3));
        for kind in [AdapterKind::Lora, AdapterKind::LnLora] {
            let mut base = ViTParams::init(tiny(), 2).unwrap();
            let reference = predict_logits(&x, &base, None).unwrap();
            let ad = inject_adapters(&mut base, &AdapterConfig::new(kind, 2, Placement::ALL), 5).unwrap();
            let adapted = predict_logits(&x, &base, Some(&ad)).unwrap();
            assert!(adapted.max_abs_diff(&reference) < 1e-12);
        }
    }

    #[test]
    fn mismatched_adapter_arch_rejected() {
        let mut base = ViTParams::init(tiny(), 2).unwrap();
        let ad = inject_adapters(&mut base, &AdapterConfig::full_lora_at(2), 5).unwrap();
        let mut other = tiny();
        other.num_classes = 4;
        let other = ViTParams::init(other, 2).unwrap();
        let x = Tensor::zeros([1, 8, 8, 2]);
        assert!(matches!(predict_logits(&x, &other, Some(&ad)), Err(Error::Config(_))));
    }

    #[test]
    fn lora_forward_zero_b_and_zero_scaling_are_base() {
        let x = Tensor::randn([5, 6], 1.0, &mut rng(1));
        let w = Tensor::randn([6, 4], 1.0, &mut rng(2));
        let bias = Tensor::randn([4], 1.0, &mut rng(3));
        let a = Tensor::randn([2, 6], 1.0, &mut rng(4));
        let b = Tensor::randn([4, 2], 1.0, &mut rng(5));
        let base = lora_forward(&x, &w, &bias, &a, &Tensor::zeros([4, 2]), 1.0).unwrap();
        let plain = lora_forward(&x, &w, &bias, &a, &b, 0.0).unwrap();
        assert_eq!(base, plain);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let expect = linear(&mut g, xv, &w, &bias).unwrap();
        assert_eq!(&base, g.value(expect));
    }

    #[test]
    fn lora_forward_rank_one_mean_matches_dense_merge() {
        let k = 5;
        let x = Tensor::randn([3, k], 1.0, &mut rng(8));
        let w = Tensor::zeros([k, 1]);
        let bias = Tensor::zeros([1]);
        let a = Tensor::new([1, k], (1..=k).map(|i| i as f64 / k as f64).collect()).unwrap();
        let b = Tensor::ones([1, 1]);
        let h = lora_forward(&x, &w, &bias, &a, &b, 1.0).unwrap();
        let merged = merge_lora(&w, &a, &b, 1.0).unwrap();
        for (row, out) in x.data().chunks(k).zip(h.data()) {
            let dense: f64 = row.iter().zip(merged.data()).map(|(p, q)| p * q).sum();
            let direct: f64 = row.iter().enumerate().map(|(i, v)| v * (i + 1) as f64 / k as f64).sum();
            assert!((out - dense).abs() < 1e-14);
            assert!((out - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn scaling_folds_into_b_exactly() {
        let x = Tensor::randn([4, 6], 1.0, &mut rng(11));
        let w = Tensor::randn([6, 5], 1.0, &mut rng(12));
        let bias = Tensor::randn([5], 1.0, &mut rng(13));
        let a = Tensor::randn([3, 6], 1.0, &mut rng(14));
        let b = Tensor::randn([5, 3], 1.0, &mut rng(15));
        for s in [0.37, 2.0, -1.5, 1e-3] {
            let sb = Tensor::new([5, 3], b.data().iter().map(|v| v * s).collect()).unwrap();
            let lhs = lora_forward(&x, &w, &bias, &a, &b, s).unwrap();
            let rhs = lora_forward(&x, &w, &bias, &a, &sb, 1.0).unwrap();
            assert!(lhs.bitwise_eq(&rhs), "scaling {s}");
        }
    }

    #[test]
    fn lnlora_branch_annihilation_cases() {
        let x = Tensor::randn([3, 6], 1.0, &mut rng(21));
        let w = Tensor::randn([6, 4], 1.0, &mut rng(22));
        let bias = Tensor::randn([4], 1.0, &mut rng(23));
        let a = Tensor::randn([2, 6], 1.0, &mut rng(24));
        let b = Tensor::randn([4, 2], 1.0, &mut rng(25));
        let alpha = Tensor::randn([6], 1.0, &mut rng(26));
        let beta = Tensor::randn([6], 1.0, &mut rng(27));
        let base = lora_forward(&x, &w, &bias, &a, &b, 0.0).unwrap();

        let zero_b = lnlora_forward(&x, &w, &bias, &a, &Tensor::zeros([4, 2]), &alpha, &beta, 1.0).unwrap();
        assert_eq!(zero_b, base);

        let zero_affine =
            lnlora_forward(&x, &w, &bias, &a, &b, &Tensor::zeros([6]), &Tensor::zeros([6]), 1.0).unwrap();
        assert_eq!(zero_affine, base);

        let constant = Tensor::full([3, 6], 0.5);
        let base_c = lora_forward(&constant, &w, &bias, &a, &b, 0.0).unwrap();
        let h = lnlora_forward(&constant, &w, &bias, &a, &b, &alpha, &Tensor::zeros([6]), 1.0).unwrap();
        assert_eq!(h, base_c);
    }

    #[test]
    fn merge_matches_adapted_forward() {
        let mut r = rng(31);
        let w = Tensor::randn([16, 16], 1.0, &mut r);
        let bias = Tensor::randn([16], 1.0, &mut r);
        let a = Tensor::randn([4, 16], 1.0, &mut r);
        let b = Tensor::randn([16, 4], 1.0, &mut r);
        let merged = merge_lora(&w, &a, &b, 1.0).unwrap();
        let x = Tensor::randn([100, 16], 1.0, &mut r);
        let adapted = lora_forward(&x, &w, &bias, &a, &b, 1.0).unwrap();
        let dense = lora_forward(&x, &merged, &bias, &a, &Tensor::zeros([16, 4]), 1.0).unwrap();
        assert!(adapted.max_abs_diff(&dense) < 1e-10);

        assert_eq!(merge_lora(&w, &a, &Tensor::zeros([16, 4]), 1.0).unwrap(), w);

        let m2 = merge_lora(&w, &a, &b, 2.0).unwrap();
        for ((m1, m2), w0) in merged.data().iter().zip(m2.data()).zip(w.data()) {
            assert!(((m2 - w0) - 2.0 * (m1 - w0)).abs() < 1e-12);
        }
    }

    #[test]
    fn merging_lnlora_site_unsupported() {
        let mut base = ViTParams::init(tiny(), 1).unwrap();
        let ad = inject_adapters(&mut base, &AdapterConfig::full_lora_at(2), 7).unwrap();
        assert!(matches!(ad.merge_site(&base, "layers.0.attn.q"), Err(Error::Unsupported(_))));

        let mut base = ViTParams::init(tiny(), 1).unwrap();
        let ad = inject_adapters(&mut base, &AdapterConfig::new(AdapterKind::Lora, 2, Placement::ALL), 7).unwrap();
        let merged = ad.merge_site(&base, "layers.0.attn.q").unwrap();
        assert_eq!(&merged, base.tensor("layers.0.attn.q.weight").unwrap());
    }

    #[test]
    fn meta_round_trip() {
        let mut cfg = AdapterConfig::full_lora_at(8);
        cfg.scaling = 0.1;
        cfg.ln_sharing = LnSharing::PerProjection;
        let meta = cfg.to_meta();
        let back = AdapterConfig::from_meta(|k| meta.iter().find(|(n, _)| n == k).map(|(_, v)| v.as_str())).unwrap();
        assert_eq!(back, cfg);
    }
}
