//! Direct-summation reference implementation of the reconstruction network.
//!
//! Everything here works on plain `Vec<f64>` row-major matrices with explicit
//! loops and reads weights by parameter name. Masked keys are skipped rather
//! than pushed through an additive sentinel.

#![allow(dead_code)]

pub mod checks;

use rlr::model::{ModelConfig, ParamStore, ReferenceBank, Reconstructor, ScaleConfig, Variant};
use rlr::rng::CounterRng;
use rlr::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        match t.shape() {
            [r, c] => Self::new(*r, *c, t.data().to_vec()),
            [c] => Self::new(1, *c, t.data().to_vec()),
            s => panic!("unexpected shape {s:?}"),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.len(), self.data.len());
        self.data
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for p in 0..a.cols {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * b.cols + j] = s;
        }
    }
    Mat::new(a.rows, b.cols, out)
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    Mat::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().map(|x| x * s).collect())
}

fn param(store: &ParamStore<f64>, name: &str) -> Mat {
    Mat::from_tensor(store.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}")))
}

pub fn linear(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b"));
    let mut y = matmul(x, &w);
    for i in 0..y.rows {
        for j in 0..y.cols {
            y.data[i * y.cols + j] += b.data[j];
        }
    }
    y
}

pub fn gelu(v: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3));
    0.5 * v * (1.0 + inner.tanh())
}

pub fn ffn(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    let h = linear(x, store, &format!("{name}.up"));
    let h = Mat::new(h.rows, h.cols, h.data.iter().map(|&v| gelu(v)).collect());
    linear(&h, store, &format!("{name}.down"))
}

pub fn layer_norm(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    let gain = param(store, &format!("{name}.gain"));
    let bias = param(store, &format!("{name}.bias"));
    let mut out = vec![0.0; x.data.len()];
    for i in 0..x.rows {
        let row = &x.data[i * x.cols..(i + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.cols as f64;
        for j in 0..x.cols {
            out[i * x.cols + j] = (row[j] - mean) / (var + 1e-5).sqrt() * gain.data[j] + bias.data[j];
        }
    }
    Mat::new(x.rows, x.cols, out)
}

/// Whether `q` is inside the `window×window` square around `i`.
pub fn near(i: usize, q: usize, width: usize, window: usize) -> bool {
    let (iy, ix) = ((i / width) as i64, (i % width) as i64);
    let (qy, qx) = ((q / width) as i64, (q % width) as i64);
    let r = (window / 2) as i64;
    (iy - qy).abs() <= r && (ix - qx).abs() <= r
}

/// Multi-head attention by direct summation. Keys with `visible(i, q) ==
/// false` are left out of row `i`'s softmax.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q_src: &Mat,
    k_src: &Mat,
    v_src: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let q = matmul(q_src, wq);
    let k = matmul(k_src, wk);
    let v = matmul(v_src, wv);
    let dk = q.cols / heads;
    let n = q.rows;
    let mut out = vec![0.0; n * v.cols];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..n {
            let keys: Vec<usize> = (0..k.rows).filter(|&p| visible(i, p)).collect();
            assert!(!keys.is_empty(), "row {i} has no visible key");
            let logits: Vec<f64> = keys
                .iter()
                .map(|&p| cols.clone().map(|c| q.at(i, c) * k.at(p, c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            for c in cols.clone() {
                out[i * v.cols + c] = keys.iter().zip(&weights).map(|(&p, w)| w / total * v.at(p, c)).sum();
            }
        }
    }
    Mat::new(n, v.cols, out)
}

/// Output of one named branch (`self`, `cross`, `mlka`, `lca`) of a block.
pub fn branch(
    kind: &str,
    y: &Mat,
    r_h: &Mat,
    store: &ParamStore<f64>,
    prefix: &str,
    scale: &ScaleConfig,
    heads: usize,
) -> Mat {
    let w = |n: &str| param(store, &format!("{prefix}.{kind}.{n}"));
    let (wq, wk, wv) = (w("wq"), w("wk"), w("wv"));
    let width = scale.width;
    match kind {
        "self" => attention(y, y, y, &wq, &wk, &wv, heads, &|_, _| true),
        "cross" => attention(y, r_h, r_h, &wq, &wk, &wv, heads, &|_, _| true),
        "mlka" => attention(y, r_h, y, &wq, &wk, &wv, heads, &|i, q| !near(i, q, width, scale.neighbor_window)),
        "lca" => attention(y, r_h, r_h, &wq, &wk, &wv, heads, &|i, q| near(i, q, width, scale.local_window)),
        other => panic!("unknown branch {other}"),
    }
}

/// `(residual, [(branch, weight)])` for each variant, written out by hand.
pub fn layout(variant: Variant, alpha: f64) -> (bool, Vec<(&'static str, f64)>) {
    match variant.as_str() {
        "residual+self" => (true, vec![("self", 1.0)]),
        "residual+cross" => (true, vec![("cross", 1.0)]),
        "cross" => (false, vec![("cross", 1.0)]),
        "mlka" => (false, vec![("mlka", 1.0)]),
        "lca" => (false, vec![("lca", 1.0)]),
        "cross+mlka" => (false, vec![("mlka", 1.0), ("cross", alpha)]),
        "mlka+lca" => (false, vec![("mlka", 1.0), ("lca", alpha)]),
        other => panic!("unknown variant {other}"),
    }
}

/// Returns `(z, y)` of block `k` at scale `j`.
pub fn block(
    cfg: &ModelConfig,
    store: &ParamStore<f64>,
    j: usize,
    k: usize,
    y: &Mat,
    r_h: &Mat,
    weights: Option<&[f64]>,
) -> (Mat, Mat) {
    let prefix = format!("s{j}.b{k}");
    let (residual, branches) = layout(cfg.variant, cfg.alpha);
    let mut mix = Mat::new(y.rows, y.cols, vec![0.0; y.data.len()]);
    for (b, (kind, w)) in branches.iter().enumerate() {
        let w = weights.map_or(*w, |ws| ws[b]);
        let o = branch(kind, y, r_h, store, &prefix, &cfg.scales[j], cfg.heads);
        mix = add(&mix, &scale(&o, w));
    }
    if residual {
        mix = add(&mix, y);
    }
    let z = layer_norm(&mix, store, &format!("{prefix}.norm1"));
    let f = ffn(&z, store, &format!("{prefix}.ffn"));
    let out = layer_norm(&add(&f, &z), store, &format!("{prefix}.norm2"));
    (z, out)
}

pub fn reference_hidden(bank: &ParamStore<f64>, j: usize) -> Mat {
    let r = param(bank, &format!("ref.s{j}.tokens"));
    linear(&r, bank, &format!("ref.s{j}.proj"))
}

/// Full reconstruction of every scale.
pub fn forward(model: &Reconstructor<f64>, bank: &ReferenceBank<f64>, inputs: &[Mat]) -> Vec<Mat> {
    let cfg = model.config();
    let store = model.params();
    inputs
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let r_h = reference_hidden(bank.params(), j);
            let mut y = ffn(x, store, &format!("s{j}.in"));
            for k in 0..cfg.blocks {
                y = block(cfg, store, j, k, &y, &r_h, None).1;
            }
            ffn(&y, store, &format!("s{j}.out"))
        })
        .collect()
}

pub fn scale_config(channels: usize, height: usize, width: usize, hidden: usize, window: usize) -> ScaleConfig {
    ScaleConfig {
        channels,
        height,
        width,
        hidden,
        neighbor_window: window,
        local_window: window,
    }
}

/// One-block, single-scale model on a 1×9 grid with 4 channels and hidden 8.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        scales: vec![scale_config(4, 1, 9, 8, 3)],
        blocks: 1,
        alpha: 2.0,
        heads: 1,
        ffn_expansion: 4,
        variant,
        seed: 11,
    }
}

/// Two scales, two blocks and two heads.
pub fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        scales: vec![scale_config(4, 1, 9, 8, 3), scale_config(3, 4, 4, 6, 3)],
        blocks: 2,
        alpha: 2.0,
        heads: 2,
        ffn_expansion: 2,
        variant,
        seed: 23,
    }
}

pub fn random_tokens(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = CounterRng::new(seed);
    cfg.scales
        .iter()
        .map(|s| {
            let n = s.tokens() * s.channels;
            Tensor::from_vec(&[s.tokens(), s.channels], (0..n).map(|_| rng.normal()).collect()).unwrap()
        })
        .collect()
}

/// Gives every bias and LayerNorm parameter a random value so that no
/// parameter group sits at a symmetric point.
pub fn randomize<T: rlr::tensor::Real>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = CounterRng::new(seed);
    let names: Vec<String> = store.names().to_vec();
    for name in names {
        let t = store.by_name_mut(&name).unwrap();
        let gain = name.ends_with(".gain");
        for v in t.data_mut() {
            let noise = 0.3 * rng.normal();
            *v = if gain {
                T::lit(1.0 + noise)
            } else if name.ends_with(".b") || name.ends_with(".bias") {
                T::lit(noise)
            } else {
                *v
            };
        }
    }
}

/// A two-scale synthetic dataset small enough to train in well under a
/// second per epoch, with a matching model.
pub struct Mini {
    pub model: ModelConfig,
    pub synth: rlr::features::SynthConfig,
    pub train: Vec<rlr::features::Sample>,
    pub test: Vec<rlr::features::Sample>,
}

pub fn mini() -> Mini {
    use rlr::features::{generate_synthetic_dataset, prepare_samples, AggregationSpec, SynthConfig};
    let synth = SynthConfig {
        train_per_class: 4,
        test_per_class: 4,
        scales: vec![(4, 8, 8), (6, 4, 4)],
        image_height: 16,
        image_width: 16,
        ..SynthConfig::default()
    };
    let (train, test) = generate_synthetic_dataset(&synth).unwrap();
    let agg = AggregationSpec { windows: vec![3, 3] };
    let model = ModelConfig {
        scales: vec![scale_config(4, 8, 8, 8, 3), scale_config(6, 4, 4, 8, 3)],
        blocks: 1,
        alpha: 2.0,
        heads: 1,
        ffn_expansion: 2,
        variant: Variant::MlkaLca,
        seed: 0,
    };
    Mini {
        model,
        synth,
        train: prepare_samples(&train, &agg).unwrap(),
        test: prepare_samples(&test, &agg).unwrap(),
    }
}

pub fn mini_training(epochs: usize) -> rlr::train::TrainConfig {
    rlr::train::TrainConfig {
        epochs,
        batch_size: 4,
        ..rlr::train::TrainConfig::default()
    }
}
