//! Measurements shared by the integration tests and the acceptance runner.
//! Each returns the quantity a criterion bounds, so callers pick the
//! tolerance.

use std::sync::Arc;

use rlr::eval::auroc;
use rlr::model::{
    build_mask, init_reference, BoundModel, BranchInputs, BranchKind, MaskKind, ModelConfig, ReferenceBank,
    Reconstructor, Variant,
};
use rlr::rng::CounterRng;
use rlr::tensor::{finite_difference_gradient, max_relative_error, Graph, MaskGrid, Tensor, Var};
use rlr::train::scale_loss;

use super::{forward, randomize, Mat};

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = CounterRng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Checks one graph operation: the scalar `sum(op(inputs) ⊙ W)` for a fixed
/// random `W` is differentiated by the tape and by central differences with
/// respect to every input. Returns the largest relative error.
pub fn op_gradient_error(inputs: &[Tensor<f64>], op: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let probe_out = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let y = op(&mut g, &vars);
        g.value(y).shape().to_vec()
    };
    let weight = random_tensor(&probe_out, 0xfeed);
    let eval = |xs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
        let y = op(&mut g, &vars);
        let w = g.leaf(weight.clone(), false);
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        (value, vars.iter().map(|&v| g.grad(v).cloned()).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |x| {
                let mut xs = inputs.to_vec();
                xs[i] = x.clone();
                eval(&xs, false).0
            },
            &inputs[i],
            FD_STEP,
        );
        let a = a.clone().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        worst = worst.max(max_relative_error(a.data(), numeric.data()));
    }
    worst
}

fn local_grid(h: usize, w: usize, window: usize) -> Arc<MaskGrid> {
    build_mask(MaskKind::Local, h, w, window).unwrap().grid().clone()
}

fn neighbor_grid(h: usize, w: usize, window: usize) -> Arc<MaskGrid> {
    build_mask(MaskKind::Neighbor, h, w, window).unwrap().grid().clone()
}

/// Relative finite-difference error of every differentiable graph operation.
pub fn all_op_gradient_errors() -> Vec<(&'static str, f64)> {
    let t = |shape: &[usize], seed: u64| random_tensor(shape, seed);
    let positive = |shape: &[usize], seed: u64| random_tensor(shape, seed).map(|v| v.abs() + 0.5);
    let local = local_grid(3, 3, 3);
    let neighbor = neighbor_grid(1, 9, 3);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    out.push(("matmul", op_gradient_error(&[t(&[3, 4], 1), t(&[4, 5], 2)], &|g, v| g.matmul(v[0], v[1]).unwrap())));
    out.push(("matmul_t", op_gradient_error(&[t(&[3, 4], 3), t(&[5, 4], 4)], &|g, v| g.matmul_t(v[0], v[1]).unwrap())));
    out.push(("transpose", op_gradient_error(&[t(&[3, 4], 5)], &|g, v| g.transpose(v[0]).unwrap())));
    out.push(("add", op_gradient_error(&[t(&[3, 4], 6), t(&[3, 4], 7)], &|g, v| g.add(v[0], v[1]).unwrap())));
    out.push(("sub", op_gradient_error(&[t(&[3, 4], 8), t(&[3, 4], 9)], &|g, v| g.sub(v[0], v[1]).unwrap())));
    out.push(("mul", op_gradient_error(&[t(&[3, 4], 10), t(&[3, 4], 11)], &|g, v| g.mul(v[0], v[1]).unwrap())));
    out.push(("scale", op_gradient_error(&[t(&[3, 4], 12)], &|g, v| g.scale(v[0], -1.7).unwrap())));
    out.push(("add_bias", op_gradient_error(&[t(&[3, 4], 13), t(&[4], 14)], &|g, v| g.add_bias(v[0], v[1]).unwrap())));
    out.push((
        "linear",
        op_gradient_error(&[t(&[3, 4], 15), t(&[4, 2], 16), t(&[2], 17)], &|g, v| {
            g.linear(v[0], v[1], Some(v[2])).unwrap()
        }),
    ));
    out.push(("gelu", op_gradient_error(&[t(&[3, 4], 18)], &|g, v| g.gelu(v[0]).unwrap())));
    out.push((
        "layer_norm",
        op_gradient_error(&[t(&[3, 6], 19), t(&[6], 20), t(&[6], 21)], &|g, v| {
            g.layer_norm(v[0], v[1], v[2]).unwrap()
        }),
    ));
    out.push(("softmax", op_gradient_error(&[t(&[3, 5], 22)], &|g, v| g.softmax(v[0]).unwrap())));
    out.push((
        "masked_softmax (local)",
        op_gradient_error(&[t(&[9, 9], 23)], &|g, v| g.masked_softmax(v[0], Some(&local)).unwrap()),
    ));
    out.push((
        "masked_softmax (neighbor)",
        op_gradient_error(&[t(&[9, 9], 24)], &|g, v| g.masked_softmax(v[0], Some(&neighbor)).unwrap()),
    ));
    out.push(("row_norm", op_gradient_error(&[t(&[4, 3], 25)], &|g, v| g.row_norm(v[0], false).unwrap())));
    out.push(("row_norm (squared)", op_gradient_error(&[t(&[4, 3], 26)], &|g, v| g.row_norm(v[0], true).unwrap())));
    out.push((
        "row_cosine",
        op_gradient_error(&[t(&[4, 3], 27), positive(&[4, 3], 28)], &|g, v| g.row_cosine(v[0], v[1]).unwrap()),
    ));
    out.push(("sum", op_gradient_error(&[t(&[3, 4], 29)], &|g, v| g.sum(v[0]).unwrap())));
    out.push(("mean", op_gradient_error(&[t(&[3, 4], 30)], &|g, v| g.mean(v[0]).unwrap())));
    out.push(("slice_cols", op_gradient_error(&[t(&[3, 6], 31)], &|g, v| g.slice_cols(v[0], 2, 3).unwrap())));
    out.push((
        "concat_cols",
        op_gradient_error(&[t(&[3, 2], 32), t(&[3, 3], 33)], &|g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
    ));
    out.push(("reshape", op_gradient_error(&[t(&[3, 4], 34)], &|g, v| g.reshape(v[0], &[2, 6]).unwrap())));
    out
}

/// A model with every parameter group moved off its initial value.
pub fn randomized_model(cfg: &ModelConfig, seed: u64) -> (Reconstructor<f64>, ReferenceBank<f64>) {
    let mut model = Reconstructor::<f64>::new(cfg).unwrap();
    let mut bank = init_reference::<f64>(cfg, seed).unwrap();
    randomize(model.params_mut(), seed ^ 0x5a5a);
    randomize(bank.params_mut(), seed ^ 0xa5a5);
    (model, bank)
}

fn single_scale_loss(
    model: &Reconstructor<f64>,
    bank: &ReferenceBank<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    squared: bool,
) -> f64 {
    let mut g = Graph::new();
    let b = BoundModel::new(&mut g, model, bank, false);
    let xv = g.leaf(x.clone(), false);
    let tv = g.leaf(target.clone(), false);
    let out = b.forward_scale(&mut g, 0, xv).unwrap();
    let loss = scale_loss(&mut g, out, tv, squared).unwrap();
    g.value(loss).data()[0]
}

/// Relative error of the training-loss gradient for every parameter tensor
/// (network and reference bank) and for the input, on the one-block 1×9
/// model.
pub fn model_gradient_errors(cfg: &ModelConfig, squared: bool) -> Vec<(String, f64)> {
    let (model, bank) = randomized_model(cfg, 3);
    let s = &cfg.scales[0];
    let x = random_tensor(&[s.tokens(), s.channels], 101);
    let target = random_tensor(&[s.tokens(), s.channels], 102);

    let mut g = Graph::new();
    let bound = BoundModel::new(&mut g, &model, &bank, true);
    let xv = g.leaf(x.clone(), true);
    let tv = g.leaf(target.clone(), false);
    let out = bound.forward_scale(&mut g, 0, xv).unwrap();
    let loss = scale_loss(&mut g, out, tv, squared).unwrap();
    g.backward(loss).unwrap();

    let mut errors = Vec::new();
    let grad_of = |g: &Graph<f64>, v: Var, shape: &[usize]| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(shape));
    for (i, name) in model.params().names().iter().enumerate() {
        let value = &model.params().tensors()[i];
        let analytic = grad_of(&g, bound.net_vars()[i], value.shape());
        let numeric = finite_difference_gradient(
            |p| {
                let mut m = model.clone();
                m.params_mut().tensors_mut()[i] = p.clone();
                single_scale_loss(&m, &bank, &x, &target, squared)
            },
            value,
            FD_STEP,
        );
        errors.push((name.clone(), max_relative_error(analytic.data(), numeric.data())));
    }
    for (i, name) in bank.params().names().iter().enumerate() {
        let value = &bank.params().tensors()[i];
        let analytic = grad_of(&g, bound.bank_vars()[i], value.shape());
        let numeric = finite_difference_gradient(
            |p| {
                let mut b = bank.clone();
                b.params_mut().tensors_mut()[i] = p.clone();
                single_scale_loss(&model, &b, &x, &target, squared)
            },
            value,
            FD_STEP,
        );
        errors.push((name.clone(), max_relative_error(analytic.data(), numeric.data())));
    }
    let analytic = grad_of(&g, xv, x.shape());
    let numeric = finite_difference_gradient(|p| single_scale_loss(&model, &bank, p, &target, squared), &x, FD_STEP);
    errors.push(("input".into(), max_relative_error(analytic.data(), numeric.data())));
    errors
}

/// Relative error of the per-scale loss gradient with respect to `F_rec`.
pub fn loss_gradient_error(squared: bool) -> f64 {
    let target = random_tensor(&[6, 3], 200);
    op_gradient_error(&[random_tensor(&[6, 3], 201)], &|g, v| {
        let t = g.leaf(target.clone(), false);
        scale_loss(g, v[0], t, squared).unwrap()
    })
}

/// Largest absolute difference between the library forward pass and the
/// direct-summation oracle, over every scale.
pub fn oracle_forward_error(cfg: &ModelConfig, seed: u64) -> f64 {
    let (model, bank) = randomized_model(cfg, seed);
    let inputs = super::random_tokens(cfg, seed + 1);
    let got = rlr::model::model_forward(&model, &bank, &inputs).unwrap();
    let mats: Vec<Mat> = inputs.iter().map(Mat::from_tensor).collect();
    let want = forward(&model, &bank, &mats);
    want.iter().zip(&got).map(|(w, g)| w.max_abs_diff(g)).fold(0.0, f64::max)
}

/// Largest absolute difference between every branch and block of the
/// library and the oracle, evaluated on a random hidden state.
pub fn oracle_block_error(cfg: &ModelConfig, seed: u64) -> f64 {
    let (model, bank) = randomized_model(cfg, seed);
    let mut worst = 0.0f64;
    for (j, s) in cfg.scales.iter().enumerate() {
        let y = random_tensor(&[s.tokens(), s.hidden], seed + 10 + j as u64);
        let ym = Mat::from_tensor(&y);
        let r_h = super::reference_hidden(bank.params(), j);
        let (_, branches) = super::layout(cfg.variant, cfg.alpha);
        for k in 0..cfg.blocks {
            let mut g = Graph::new();
            let bound = BoundModel::new(&mut g, &model, &bank, false);
            let yv = g.leaf(y.clone(), false);
            let rv = bound.reference_hidden(&mut g, j).unwrap();
            worst = worst.max(r_h.max_abs_diff(g.value(rv)));
            for (b, (kind, _)) in branches.iter().enumerate() {
                let o = bound.branch(&mut g, j, k, b, BranchInputs::shared(yv, rv)).unwrap();
                let want = super::branch(kind, &ym, &r_h, model.params(), &format!("s{j}.b{k}"), s, cfg.heads);
                worst = worst.max(want.max_abs_diff(g.value(o)));
            }
            let out = bound.block(&mut g, j, k, yv, rv).unwrap();
            let (z, yk) = super::block(cfg, model.params(), j, k, &ym, &r_h, None);
            worst = worst.max(z.max_abs_diff(g.value(out.z)));
            worst = worst.max(yk.max_abs_diff(g.value(out.y)));
        }
    }
    worst
}

/// Worst oracle disagreement over every variant on the one-block 1×9 model
/// and on a two-scale, two-block, two-head model.
pub fn oracle_all_variants() -> Vec<(Variant, f64)> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let tiny = super::tiny_config(v);
            let small = super::small_config(v);
            let e = oracle_forward_error(&tiny, 5)
                .max(oracle_forward_error(&small, 6))
                .max(oracle_block_error(&tiny, 7))
                .max(oracle_block_error(&small, 8));
            (v, e)
        })
        .collect()
}

/// Softmax rows sum error and whether any masked entry is nonzero, for every
/// grid up to `max_side`×`max_side` and windows 3, 5 and 7. Also confirms the
/// two masks partition every row and that the local mask matches direct
/// window enumeration. Returns `Err` describing the first violation.
pub fn mask_properties(max_side: usize) -> Result<f64, String> {
    let mut worst_sum = 0.0f64;
    let mut seed = 0u64;
    for h in 1..=max_side {
        for w in 1..=max_side {
            for window in [3usize, 5, 7] {
                let local = build_mask(MaskKind::Local, h, w, window).map_err(|e| format!("local {h}x{w} w{window}: {e}"))?;
                let neighbor = build_mask(MaskKind::Neighbor, h, w, window);
                let full_cover = h <= window && w <= window;
                if full_cover != neighbor.is_err() {
                    return Err(format!("neighbor mask on {h}x{w} w{window}: expected error = {full_cover}"));
                }
                let n = h * w;
                for i in 0..n {
                    for q in 0..n {
                        let inside = super::near(i, q, w, window);
                        if local.is_blocked(i, q) == inside {
                            return Err(format!("local {h}x{w} w{window} wrong at ({i},{q})"));
                        }
                        if local.additive(i, q) != if inside { 0.0 } else { rlr::tensor::MASK_SENTINEL } {
                            return Err(format!("local additive {h}x{w} w{window} wrong at ({i},{q})"));
                        }
                        if let Ok(nm) = &neighbor {
                            if nm.is_blocked(i, q) == local.is_blocked(i, q) {
                                return Err(format!("masks overlap on {h}x{w} w{window} at ({i},{q})"));
                            }
                            if nm.additive(i, q) + local.additive(i, q) != rlr::tensor::MASK_SENTINEL {
                                return Err(format!("additive masks do not partition at ({i},{q})"));
                            }
                        }
                    }
                }
                let mut grids = vec![local.grid().clone()];
                if let Ok(nm) = &neighbor {
                    grids.push(nm.grid().clone());
                }
                for grid in grids {
                    seed += 1;
                    let logits = random_tensor(&[n, n], seed).map(|v| 4.0 * v);
                    let mut g = Graph::new();
                    let l = g.leaf(logits, false);
                    let a = g.masked_softmax(l, Some(&grid)).map_err(|e| e.to_string())?;
                    let a = g.value(a);
                    for i in 0..n {
                        let mut sum = 0.0;
                        for q in 0..n {
                            let v = a.at2(i, q);
                            if grid.is_blocked(i, q) && v != 0.0 {
                                return Err(format!("masked weight {v} at ({i},{q}) on {h}x{w} w{window}"));
                            }
                            sum += v;
                        }
                        worst_sum = worst_sum.max((sum - 1.0).abs());
                    }
                }
            }
        }
    }
    Ok(worst_sum)
}

/// Gradient of the LCA output with respect to the block input when the
/// input feeds every path except Q. Returns the largest magnitude, or
/// `None` when the tape never reaches the input at all.
pub fn lca_value_path_gradient() -> Option<f64> {
    value_path_gradient(Variant::Lca, BranchKind::Lca)
}

/// The same measurement for MLKA, whose values come from the input.
pub fn mlka_value_path_gradient() -> Option<f64> {
    value_path_gradient(Variant::Mlka, BranchKind::Mlka)
}

fn value_path_gradient(variant: Variant, kind: BranchKind) -> Option<f64> {
    let cfg = super::tiny_config(variant);
    let (model, bank) = randomized_model(&cfg, 9);
    let s = &cfg.scales[0];
    let y = random_tensor(&[s.tokens(), s.hidden], 41);
    let mut g = Graph::new();
    let bound = BoundModel::new(&mut g, &model, &bank, false);
    assert_eq!(bound.branch_kind(0, 0, 0), kind);
    let frozen = g.leaf(y.clone(), false);
    let live = g.leaf(y, true);
    let r_h = bound.reference_hidden(&mut g, 0).unwrap();
    let o = bound
        .branch(
            &mut g,
            0,
            0,
            0,
            BranchInputs {
                query: frozen,
                input: live,
                reference: r_h,
            },
        )
        .unwrap();
    let w = g.leaf(random_tensor(g.value(o).shape(), 42), false);
    let prod = g.mul(o, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    g.grad(live).map(|t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// `max |∂Z_k/∂Y_{k−1}|` with every attention projection of the block set to
/// zero. Zero for every shortcut-free variant.
pub fn zeroed_projection_gradient(variant: Variant) -> f64 {
    let cfg = super::tiny_config(variant);
    let (mut model, bank) = randomized_model(&cfg, 13);
    let names: Vec<String> = model.params().names().to_vec();
    for name in names.iter().filter(|n| n.ends_with(".wq") || n.ends_with(".wk") || n.ends_with(".wv")) {
        for v in model.params_mut().by_name_mut(name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let s = &cfg.scales[0];
    let y = random_tensor(&[s.tokens(), s.hidden], 43);
    let mut g = Graph::new();
    let bound = BoundModel::new(&mut g, &model, &bank, false);
    let yv = g.leaf(y, true);
    let r_h = bound.reference_hidden(&mut g, 0).unwrap();
    let out = bound.block(&mut g, 0, 0, yv, r_h).unwrap();
    let w = g.leaf(random_tensor(g.value(out.z).shape(), 44), false);
    let prod = g.mul(out.z, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    g.grad(yv).map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Pairwise AUROC: wins plus half the ties over all positive/negative pairs.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (k, &lk) in labels.iter().enumerate() {
            if lk {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[k] {
                wins += 1.0;
            } else if scores[i] == scores[k] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random score/label sets with both classes present and frequent ties.
pub fn auroc_sets(count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<bool>)> {
    let mut rng = CounterRng::new(seed);
    (0..count)
        .map(|_| {
            let n = 2 + rng.below(120);
            let levels = 1 + rng.below(12);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
            labels[0] = true;
            labels[1] = false;
            let scores = (0..n)
                .map(|_| if rng.uniform() < 0.5 { rng.below(levels) as f64 } else { rng.normal() })
                .collect();
            (scores, labels)
        })
        .collect()
}

pub fn auroc_oracle_error(count: usize) -> f64 {
    auroc_sets(count, 77)
        .iter()
        .map(|(s, l)| (auroc(s, l).unwrap() - pairwise_auroc(s, l)).abs())
        .fold(0.0, f64::max)
}
