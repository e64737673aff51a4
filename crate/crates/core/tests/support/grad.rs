//! Finite-difference checks shared by the gradient tests and the acceptance
//! suite. Each check returns `(name, relative error)` pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wla::bqm::{quantize_rows, QuantMode};
use wla::downstream::{bce_loss, neighbourhood, Forecaster, ForecasterConfig, WindowConfig};
use wla::griddata::{NormStats, PvsMeta};
use wla::model::{Wla, WlaConfig};
use wla::numerics::gradcheck::{check_inputs, check_params};
use wla::numerics::nn::{grid_windows, TransformerBlock};
use wla::numerics::{Graph, ParamStore, Tensor, Var};
use wla::pvum::PvumConfig;
use wla::vaeformer::{patchify, unpatchify, PatchConfig, StackConfig};
use wla::Result;

const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar `mean(x * r)` for a fixed random `r`, so every output entry
/// contributes a distinct weight.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let (m, n) = g.dims(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(rand_tensor(&mut rng, &[m, n]));
    let p = g.mul(x, r)?;
    Ok(g.mean(p))
}

pub type Checks = Vec<(&'static str, f64)>;

pub fn matmul_products() -> Checks {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
    let err = check_inputs(&inputs, H, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 9)
    })
    .unwrap();
    out.push(("matmul", err));

    let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4])];
    let err = check_inputs(&inputs, H, |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        project(g, y, 10)
    })
    .unwrap();
    out.push(("matmul_nt", err));
    out
}

pub fn elementwise_and_row_ops() -> Checks {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])];
    let err = check_inputs(&inputs, H, |g, v| {
        let a = g.add_row(v[0], v[1])?;
        let a = g.gelu(a);
        let a = g.layer_norm(a, v[2], v[1], 1e-5)?;
        let s = g.softmax_rows(a);
        let t = g.transpose(s);
        let c = g.slice_cols(t, 1, 2)?;
        let r = g.slice_rows(c, 2, 3)?;
        let gathered = g.gather_rows(r, &[2, 0, 0, 1])?;
        let stacked = g.concat_rows(&[c, gathered])?;
        let both = g.concat_cols(&[stacked, stacked])?;
        let sc = g.scale(both, 1.7);
        project(g, sc, 11)
    })
    .unwrap();
    out.push(("row ops", err));
    out
}

pub fn transformer_block_input_and_params() -> Checks {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    let block = TransformerBlock::new(&mut ps, &mut rng, "b", 8, 2, 2, 0.3).unwrap();
    let ps64 = ps.cast::<f64>();
    let x = rand_tensor(&mut rng, &[4, 8]);
    let err = check_inputs(std::slice::from_ref(&x), H, |g, v| {
        let y = block.forward(g, &ps64, v[0], None)?;
        project(g, y, 12)
    })
    .unwrap();
    out.push(("block input", err));

    let err = check_params(&ps64, H, 16, |g, ps| {
        let xv = g.constant(x.clone());
        let y = block.forward(g, ps, xv, None)?;
        project(g, y, 12)
    })
    .unwrap();
    out.push(("block params", err));

    let windows = grid_windows(2, 3, 2, 1);
    let x6 = rand_tensor(&mut rng, &[6, 8]);
    let err = check_inputs(&[x6], H, |g, v| {
        let y = block.forward(g, &ps64, v[0], Some(&windows))?;
        project(g, y, 13)
    })
    .unwrap();
    out.push(("windowed block", err));
    out
}

pub fn patchify_and_unpatchify() -> Checks {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = PatchConfig { patch: (3, 3), stride: (2, 2), pad: (1, 1) };
    let (h, w, c) = (7, 9, 2);
    let x = rand_tensor(&mut rng, &[h * w, c]);
    let err = check_inputs(&[x], H, |g, v| {
        let p = patchify(g, v[0], &cfg, h, w)?;
        project(g, p, 14)
    })
    .unwrap();
    out.push(("patchify", err));

    let tokens = cfg.token_grid_shape(h, w).unwrap();
    let p = rand_tensor(&mut rng, &[tokens.0 * tokens.1, 9 * c]);
    let err = check_inputs(&[p], H, |g, v| {
        let y = unpatchify(g, v[0], &cfg, h, w, c)?;
        project(g, y, 15)
    })
    .unwrap();
    out.push(("unpatchify", err));
    out
}

pub fn sphere_projection_and_entropy() -> Checks {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = rand_tensor(&mut rng, &[5, 8]);
    let err = check_inputs(std::slice::from_ref(&u), H, |g, v| {
        let s = g.l2_normalize_rows(v[0], 1e-12);
        project(g, s, 16)
    })
    .unwrap();
    out.push(("sphere projection", err));

    let err = check_inputs(&[u], H, |g, v| {
        let s = g.l2_normalize_rows(v[0], 1e-12);
        g.entropy_reg(s, 10.0)
    })
    .unwrap();
    out.push(("entropy regularizer", err));
    out
}

pub fn loss_functions() -> Checks {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = rand_tensor(&mut rng, &[4, 8]).map(|v| 3.0 * v);
    let y = Tensor::new(&[4, 8], (0..32).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let err = check_inputs(std::slice::from_ref(&z), H, |g, v| g.bce_logits(v[0], &y)).unwrap();
    out.push(("bce", err));

    let w = [0.5, 1.0, 1.5, 1.0];
    let err = check_inputs(&[z], H, |g, v| g.weighted_mse(v[0], &y, &w)).unwrap();
    out.push(("weighted mse", err));
    out
}

/// The straight-through gradient of `L(sign(v(u)) / sqrt(nb))` equals the
/// exact gradient of its linearization `L(q0 + (v(u) - v(u0)) / sqrt(nb))`.
pub fn straight_through_composition() -> Checks {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let nb = 8;
    let u0 = rand_tensor(&mut rng, &[3, nb]);
    let wdec = rand_tensor(&mut rng, &[nb, 5]);
    let target = rand_tensor(&mut rng, &[3, 5]);
    let weights = [1.0, 0.5, 2.0];
    let loss = |g: &mut Graph<f64>, q: Var| -> Result<Var> {
        let w = g.constant(wdec.clone());
        let y = g.matmul(q, w)?;
        let y = g.gelu(y);
        g.weighted_mse(y, &target, &weights)
    };

    let mut g = Graph::new();
    let u = g.leaf(u0.clone());
    let (v, q) = quantize_rows(&mut g, u, QuantMode::Sign);
    let l = loss(&mut g, q).unwrap();
    let ste = g.backward(l).unwrap().of(u).unwrap().clone();
    let q0 = g.value(q).clone();
    let v0 = g.value(v).clone();
    let s = 1.0 / (nb as f64).sqrt();
    let offset = q0.zip_map(&v0, |a, b| a - s * b).unwrap();

    let linearized = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let v = g.l2_normalize_rows(vars[0], 1e-12);
        let v = g.scale(v, s);
        let o = g.constant(offset.clone());
        let q = g.add(o, v)?;
        loss(g, q)
    };
    let mut g2 = Graph::new();
    let u2 = g2.leaf(u0.clone());
    let l2 = linearized(&mut g2, &[u2]).unwrap();
    let exact = g2.backward(l2).unwrap().of(u2).unwrap().clone();
    out.push(("straight-through vs linearization", ste.max_abs_diff(&exact)));

    let err = check_inputs(&[u0], H, linearized).unwrap();
    out.push(("straight-through linearization", err));
    out
}

pub fn two_token_model() -> Wla {
    let meta = PvsMeta::parse_list("t850,z500,10u").unwrap();
    let cfg = WlaConfig {
        meta,
        height: 6,
        width: 12,
        patch: PatchConfig::desk(),
        stack: StackConfig { encoder_depth: 1, decoder_depth: 2, d_model: 16, heads: 2, mlp_ratio: 2 },
        pvum: PvumConfig { d: 8, blocks: 1, heads: 2, c2: 4, mlp_ratio: 2 },
        nb: 8,
        seed: 3,
    };
    let m = Wla::new(cfg, NormStats::identity(3)).unwrap();
    assert_eq!(m.token_grid(), (1, 2));
    m
}

pub fn autoencoder_loss_in_bypass_mode() -> Checks {
    let mut out = Checks::new();
    let model = two_token_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[6 * 12, 3]);
    let ps = model.params.cast::<f64>();
    let err = check_params(&ps, H, 64, |g, ps| {
        Ok(model.loss_graph(g, ps, &x, 1e-2, QuantMode::Bypass)?.total)
    })
    .unwrap();
    out.push(("autoencoder loss (bypass)", err));
    out
}

pub fn decoder_params_under_sign_quantization() -> Checks {
    let mut out = Checks::new();
    let model = two_token_model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = rand_tensor(&mut rng, &[2, 8]).map(|v| if v >= 0.0 { 1.0 } else { -1.0 } / 8f64.sqrt());
    let ps = model.params.cast::<f64>();
    let err = check_params(&ps, H, 64, |g, ps| {
        let qv = g.constant(q.clone());
        let y = model.decode_graph(g, ps, qv)?;
        project(g, y, 17)
    })
    .unwrap();
    out.push(("decoder", err));
    out
}

pub fn forecaster_and_bce() -> Checks {
    let mut out = Checks::new();
    let cfg = ForecasterConfig {
        window: WindowConfig { window: 2, depth: 2, d_model: 8, heads: 2, mlp_ratio: 2 },
        grid: (4, 4),
        nb: 8,
        copy_gain: 0.5,
        head_std: 0.3,
        seed: 1,
    };
    let f = Forecaster::new(cfg).unwrap();
    let signs: Vec<i8> = (0..128).map(|i| if (i * 5) % 7 < 3 { 1 } else { -1 }).collect();
    let input = wla::bqm::pack_bits(4, 4, 8, &signs).unwrap();
    let target = wla::bqm::pack_bits(4, 4, 8, &signs.iter().rev().copied().collect::<Vec<_>>()).unwrap();
    let ps = f.params.cast::<f64>();
    let err = check_params(&ps, H, 1000, |g, ps| {
        let q = g.constant(input.dequantized());
        let z = f.logits_graph(g, ps, q)?;
        bce_loss(g, z, &target)
    })
    .unwrap();
    out.push(("forecaster", err));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[6, 3]);
    let err = check_inputs(&[x], H, |g, v| {
        let n = neighbourhood(g, v[0], (2, 3))?;
        project(g, n, 18)
    })
    .unwrap();
    out.push(("neighbourhood", err));
    out
}

pub fn all() -> Checks {
    [matmul_products, elementwise_and_row_ops, transformer_block_input_and_params, patchify_and_unpatchify, sphere_projection_and_entropy, loss_functions, straight_through_composition, autoencoder_loss_in_bypass_mode, decoder_params_under_sign_quantization, forecaster_and_bce].into_iter().flat_map(|f| f()).collect()
}
