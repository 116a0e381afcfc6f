//! Per-layer parameter magnitude statistics and evaluation reports.
//!
//! Statistics are per-element means of absolute values over every tensor in
//! a group, weights and biases together.

use std::fmt::Write as _;

use crate::attacks::{robust_accuracy, AttackConfig};
use crate::checkpoint::Checkpoint;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

/// Group labels in report order.
pub const GROUPS: [&str; 8] = [
    "ln1.scale",
    "ln1.bias",
    "ln2.scale",
    "ln2.bias",
    "qkv",
    "attn_out",
    "fc1",
    "fc2",
];

/// Tensor names (relative to `layers.{l}.`) that make up a group.
pub fn group_members(group: &str) -> &'static [&'static str] {
    match group {
        "ln1.scale" => &["ln1.scale"],
        "ln1.bias" => &["ln1.bias"],
        "ln2.scale" => &["ln2.scale"],
        "ln2.bias" => &["ln2.bias"],
        "qkv" => &[
            "attn.q.weight",
            "attn.q.bias",
            "attn.k.weight",
            "attn.k.bias",
            "attn.v.weight",
            "attn.v.bias",
        ],
        "attn_out" => &["attn.out.weight", "attn.out.bias"],
        "fc1" => &["mlp.fc1.weight", "mlp.fc1.bias"],
        "fc2" => &["mlp.fc2.weight", "mlp.fc2.bias"],
        _ => &[],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroupStats {
    pub layer: usize,
    pub group: &'static str,
    pub mean_abs: f64,
}

fn require<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a Tensor> {
    ckpt.tensor(name)
        .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor `{name}`")))
}

fn depth_of(ckpt: &Checkpoint) -> Result<usize> {
    Ok(ckpt.vit_config()?.depth)
}

/// Visit every (layer, group) and reduce the member tensors with `f`, which
/// returns `(sum of |·|, element count)` for one member name.
fn collect(
    depth: usize,
    mut f: impl FnMut(&str) -> Result<(f64, usize)>,
) -> Result<Vec<ParamGroupStats>> {
    let mut out = Vec::with_capacity(depth * GROUPS.len());
    for layer in 0..depth {
        for group in GROUPS {
            let mut sum = 0.0;
            let mut count = 0usize;
            for member in group_members(group) {
                let (s, c) = f(&format!("layers.{layer}.{member}"))?;
                sum += s;
                count += c;
            }
            out.push(ParamGroupStats {
                layer,
                group,
                mean_abs: sum / count as f64,
            });
        }
    }
    Ok(out)
}

/// Mean |w| per (layer, group).
pub fn param_group_stats(ckpt: &Checkpoint) -> Result<Vec<ParamGroupStats>> {
    collect(depth_of(ckpt)?, |name| {
        let t = require(ckpt, name)?;
        Ok((t.data().iter().map(|v| v.abs()).sum(), t.numel()))
    })
}

/// Mean |a − b| per (layer, group). Both checkpoints must describe the same
/// architecture.
pub fn param_diff_stats(a: &Checkpoint, b: &Checkpoint) -> Result<Vec<ParamGroupStats>> {
    let (ca, cb) = (a.vit_config()?, b.vit_config()?);
    if ca != cb {
        return Err(Error::Incompatible(format!(
            "architectures differ: {ca:?} vs {cb:?}"
        )));
    }
    collect(ca.depth, |name| {
        let (ta, tb) = (require(a, name)?, require(b, name)?);
        if ta.shape() != tb.shape() {
            return Err(Error::Incompatible(format!(
                "tensor `{name}` has shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let sum = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        Ok((sum, ta.numel()))
    })
}

/// CSV with header `layer,group,mean_abs`.
pub fn stats_csv(stats: &[ParamGroupStats]) -> String {
    let mut s = String::from("layer,group,mean_abs\n");
    for r in stats {
        writeln!(s, "{},{},{}", r.layer, r.group, r.mean_abs).expect("writing to a String");
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub attack: String,
    pub accuracy: f64,
}

/// One row per named attack, each computed with [`robust_accuracy`] under
/// the same seed.
pub fn evaluation_report(
    model: &dyn Classifier,
    data: &LabeledImageSet,
    attacks: &[(String, AttackConfig)],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    attacks
        .iter()
        .map(|(name, cfg)| {
            cfg.validate()?;
            Ok(EvalRow {
                attack: name.clone(),
                accuracy: robust_accuracy(model, data, cfg, batch_size, seed)?,
            })
        })
        .collect()
}

/// CSV with header `attack,accuracy`, accuracies to 4 decimals.
pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("attack,accuracy\n");
    for r in rows {
        writeln!(s, "{},{:.4}", r.attack, r.accuracy).expect("writing to a String");
    }
    s
}

/// Mean of a group's per-layer values, used to summarise a diff report.
pub fn group_means(stats: &[ParamGroupStats]) -> Vec<(&'static str, f64)> {
    GROUPS
        .iter()
        .map(|&g| {
            let vals: Vec<f64> = stats.iter().filter(|s| s.group == g).map(|s| s.mean_abs).collect();
            let mean = if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (g, mean)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{ViTConfig, ViTParams};

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            embed_dim: 4,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
        }
    }

    #[test]
    fn zero_checkpoint_gives_zero_stats() {
        let ck = Checkpoint::from_vit(&ViTParams::zeros(tiny()).unwrap());
        let stats = param_group_stats(&ck).unwrap();
        assert_eq!(stats.len(), 2 * GROUPS.len());
        assert!(stats.iter().all(|s| s.mean_abs == 0.0));
    }

    #[test]
    fn missing_tensor_is_named() {
        let mut ck = Checkpoint::from_vit(&ViTParams::zeros(tiny()).unwrap());
        ck.tensors.retain(|(n, _)| n != "layers.1.mlp.fc2.bias");
        match param_group_stats(&ck) {
            Err(Error::MalformedCheckpoint(m)) => assert!(m.contains("layers.1.mlp.fc2.bias")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn arch_mismatch_is_incompatible() {
        let a = Checkpoint::from_vit(&ViTParams::zeros(tiny()).unwrap());
        let b = Checkpoint::from_vit(
            &ViTParams::zeros(ViTConfig {
                depth: 1,
                ..tiny()
            })
            .unwrap(),
        );
        assert!(matches!(param_diff_stats(&a, &b), Err(Error::Incompatible(_))));
    }

    #[test]
    fn csv_formats() {
        let rows = vec![EvalRow {
            attack: "clean".into(),
            accuracy: 0.123456,
        }];
        assert_eq!(report_csv(&rows), "attack,accuracy\nclean,0.1235\n");
        let stats = vec![ParamGroupStats {
            layer: 0,
            group: "qkv",
            mean_abs: 2.0,
        }];
        let csv = stats_csv(&stats);
        assert!(csv.starts_with("layer,group,mean_abs\n0,qkv,"));
        let v: f64 = csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(v, 2.0);
    }
}
