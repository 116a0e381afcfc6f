//! Central-difference checks of every primitive and of whole ViT losses.

use lnlora_core::adapters::{inject_adapters, AdapterConfig, AdapterKind, Placement};
use lnlora_core::autodiff::{grad_check, Graph, Var};
use lnlora_core::vit::{self, ViTConfig, ViTParams};
use lnlora_core::{Result, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

/// Contract a tensor-valued output to a scalar with fixed random weights so
/// that every output coordinate contributes a distinct gradient.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(randn(&shape, &mut rng(seed ^ 0xABCD)));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn dims(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(2..5)).collect()
}

fn check(name: &str, seed: u64, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    check_with(name, seed, x, None, f)
}

/// Whole-network losses use a step of 1e-4. Some attention gradients are
/// O(1e-6); with a 1e-6 step the rounding error of the loss difference is
/// ~1e-4 relative to them, and at 1e-3 the truncation error reaches ~1e-5.
const NETWORK_STEP: Option<f64> = Some(1e-4);

fn check_with(name: &str, seed: u64, x: &Tensor, h: Option<f64>, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(f, x, h).unwrap();
    assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
}

const SEEDS: std::ops::Range<u64> = 0..8;

#[test]
fn matmul_shared_and_batched() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let d = dims(&mut r, 4);
        let (b, m, k, n) = (d[0], d[1], d[2], d[3]);
        let w = randn(&[k, n], &mut r);
        let x = randn(&[b, m, k], &mut r);
        check("matmul lhs", seed, &x, |g, v| {
            let w = g.constant(w.clone());
            let y = g.matmul(v, w)?;
            contract(g, y, seed)
        });
        check("matmul rhs", seed, &w, |g, v| {
            let x = g.constant(x.clone());
            let y = g.matmul(x, v)?;
            contract(g, y, seed)
        });
        let bw = randn(&[b, k, n], &mut r);
        check("batched matmul rhs", seed, &bw, |g, v| {
            let x = g.constant(x.clone());
            let y = g.matmul(x, v)?;
            contract(g, y, seed)
        });
    }
}

#[test]
fn add_and_mul_with_broadcast() {
    for seed in SEEDS {
        let mut r = rng(100 + seed);
        let d = dims(&mut r, 3);
        let big = randn(&d, &mut r);
        let small = randn(&d[1..], &mut r);
        for (label, op) in [("add", 0), ("mul", 1)] {
            let apply = move |g: &mut Graph, a: Var, b: Var| if op == 0 { g.add(a, b) } else { g.mul(a, b) };
            check(label, seed, &big, |g, v| {
                let s = g.constant(small.clone());
                let y = apply(g, v, s)?;
                contract(g, y, seed)
            });
            check(label, seed, &small, |g, v| {
                let b = g.constant(big.clone());
                let y = apply(g, b, v)?;
                contract(g, y, seed)
            });
        }
    }
}

#[test]
fn shape_ops() {
    for seed in SEEDS {
        let mut r = rng(200 + seed);
        let d = dims(&mut r, 3);
        let x = randn(&d, &mut r);
        check("scale", seed, &x, |g, v| {
            let y = g.scale(v, -1.7);
            contract(g, y, seed)
        });
        check("reshape", seed, &x, |g, v| {
            let y = g.reshape(v, &[d[0] * d[1], d[2]])?;
            contract(g, y, seed)
        });
        check("transpose", seed, &x, |g, v| {
            let y = g.transpose(v, 0, 2)?;
            contract(g, y, seed)
        });
        check("slice", seed, &x, |g, v| {
            let y = g.slice(v, 1, 1, d[1])?;
            contract(g, y, seed)
        });
        let other = randn(&[d[0], 3, d[2]], &mut r);
        check("concat", seed, &x, |g, v| {
            let o = g.constant(other.clone());
            let y = g.concat(&[o, v, o], 1)?;
            contract(g, y, seed)
        });
    }
}

#[test]
fn nonlinearities_and_reductions() {
    for seed in SEEDS {
        let mut r = rng(300 + seed);
        let d = dims(&mut r, 2);
        let x = randn(&d, &mut r);
        check("softmax", seed, &x, |g, v| {
            let y = g.softmax(v)?;
            contract(g, y, seed)
        });
        check("gelu", seed, &x, |g, v| {
            let y = g.gelu(v);
            contract(g, y, seed)
        });
        check("sum", seed, &x, |g, v| {
            let y = g.mul(v, v)?;
            Ok(g.sum(y))
        });
        check("mean", seed, &x, |g, v| {
            let y = g.mul(v, v)?;
            Ok(g.mean(y))
        });
        let labels: Vec<usize> = (0..d[0]).map(|_| r.random_range(0..d[1])).collect();
        check("cross_entropy", seed, &x, |g, v| g.cross_entropy(v, &labels));
    }
}

#[test]
fn gelu_sum_of_32() {
    for seed in SEEDS {
        let x = randn(&[32], &mut rng(400 + seed));
        check("sum(gelu)", seed, &x, |g, v| {
            let y = g.gelu(v);
            Ok(g.sum(y))
        });
    }
}

#[test]
fn layernorm_all_inputs() {
    for seed in SEEDS {
        let mut r = rng(500 + seed);
        let d = dims(&mut r, 2);
        let n = d[1] + 2;
        let x = randn(&[d[0], n], &mut r);
        let gamma = randn(&[n], &mut r);
        let beta = randn(&[n], &mut r);
        check("layernorm x", seed, &x, |g, v| {
            let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            let y = g.layer_norm(v, ga, be)?;
            contract(g, y, seed)
        });
        check("layernorm gamma", seed, &gamma, |g, v| {
            let (xx, be) = (g.constant(x.clone()), g.constant(beta.clone()));
            let y = g.layer_norm(xx, v, be)?;
            contract(g, y, seed)
        });
        check("layernorm beta", seed, &beta, |g, v| {
            let (xx, ga) = (g.constant(x.clone()), g.constant(gamma.clone()));
            let y = g.layer_norm(xx, ga, v)?;
            contract(g, y, seed)
        });
        // Sixteen entries, summed after a non-trivial affine (with unit
        // scale and zero bias the sum is identically zero).
        let x16 = randn(&[16], &mut r);
        let g16 = randn(&[16], &mut r);
        check("sum(layernorm)", seed, &x16, |g, v| {
            let (ga, be) = (g.constant(g16.clone()), g.constant(Tensor::zeros([16])));
            let y = g.layer_norm(v, ga, be)?;
            Ok(g.sum(y))
        });
    }
}

fn tiny() -> ViTConfig {
    ViTConfig {
        image_size: 4,
        channels: 2,
        patch_size: 2,
        embed_dim: 8,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

fn images(seed: u64, batch: usize) -> Tensor {
    let mut r = rng(seed);
    let n = batch * 4 * 4 * 2;
    Tensor::new([batch, 4, 4, 2], (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

/// A parameter point with every entry ~ N(0, 0.5²). Query and key
/// gradients are vanishingly small at the default initialisation, which
/// would make the relative-error metric measure rounding noise.
fn spread(cfg: ViTConfig, seed: u64) -> ViTParams {
    let mut p = ViTParams::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5EED);
    for (_, param) in p.store.iter_mut() {
        let shape = param.value.shape().to_vec();
        param.value = Tensor::randn(shape, 0.5, &mut r);
    }
    p
}

#[test]
fn full_vit_loss_wrt_input() {
    for seed in 0..6u64 {
        let params = ViTParams::init(tiny(), seed).unwrap();
        let labels = vec![seed as usize % 3, (seed as usize + 1) % 3];
        let x = images(600 + seed, 2);
        check_with("vit input", seed, &x, NETWORK_STEP, |g, v| {
            let z = vit::forward(g, v, &params, None)?;
            g.cross_entropy(z, &labels)
        });
    }
}

#[test]
fn full_vit_loss_wrt_every_parameter() {
    let seed = 7;
    let params = spread(tiny(), seed);
    let x = images(700, 3);
    let labels = vec![0, 1, 2];
    for (name, p) in params.store.iter() {
        if name.ends_with("attn.k.bias") {
            // Softmax is shift-invariant per query row, so the key bias has
            // an exactly zero gradient; relative error is meaningless there.
            let mut g = Graph::new();
            let v = g.input(p.value.clone(), true);
            g.override_param(name, v);
            let xs = g.constant(x.clone());
            let z = vit::forward(&mut g, xs, &params, None).unwrap();
            let loss = g.cross_entropy(z, &labels).unwrap();
            g.backward(loss).unwrap();
            let grad = g.grad(v).unwrap();
            assert!(grad.data().iter().all(|d| d.abs() < 1e-12), "{name}: {:?}", grad.data());
            continue;
        }
        check_with(name, seed, &p.value, NETWORK_STEP, |g, v| {
            g.override_param(name, v);
            let xs = g.constant(x.clone());
            let z = vit::forward(g, xs, &params, None)?;
            g.cross_entropy(z, &labels)
        });
    }
}

#[test]
fn adapted_vit_loss_wrt_adapter_parameters() {
    for kind in [AdapterKind::Lora, AdapterKind::LnLora] {
        let mut base = spread(tiny(), 3);
        let cfg = AdapterConfig::new(kind, 2, Placement::ALL);
        let mut ad = inject_adapters(&mut base, &cfg, 4).unwrap();
        // Move off the B = 0 / α = 1 / β = 0 initialisation so that no
        // gradient is identically zero.
        let mut r = rng(5);
        for (_, p) in ad.store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::randn(shape, 0.5, &mut r);
        }
        let x = images(800, 2);
        let labels = vec![2, 0];
        for (name, p) in ad.store.iter() {
            check_with(name, 3, &p.value, NETWORK_STEP, |g, v| {
                g.override_param(name, v);
                let xs = g.constant(x.clone());
                let z = vit::forward(g, xs, &base, Some(&ad))?;
                g.cross_entropy(z, &labels)
            });
        }
    }
}
