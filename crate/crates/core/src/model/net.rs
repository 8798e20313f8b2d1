use std::sync::Arc;

use crate::rng::CounterRng;
use crate::tensor::{Graph, MaskGrid, Real, Tensor, TensorError, Var};

use super::mask::{build_mask, AttentionMask, MaskKind};
use super::params::{ParamId, ParamStore};
use super::{BranchKind, ModelConfig, Result};

const MODEL_STREAM: u64 = 0x6d6f_6465_6c;
const REFERENCE_STREAM: u64 = 0x7265_6665_72;

#[derive(Debug, Clone)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct FfnIds {
    up: LinearIds,
    down: LinearIds,
}

#[derive(Debug, Clone)]
struct BranchIds {
    kind: BranchKind,
    weight: f64,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    branches: Vec<BranchIds>,
    norm1: (ParamId, ParamId),
    ffn: FfnIds,
    norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct ScaleIds {
    ffn_in: FfnIds,
    blocks: Vec<BlockIds>,
    ffn_out: FfnIds,
}

#[derive(Debug, Clone)]
struct ScaleMasks {
    neighbor: Option<AttentionMask>,
    local: AttentionMask,
}

fn push_linear<T: Real>(p: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut CounterRng) -> LinearIds {
    let w = p.push_weight(format!("{name}.w"), cin, cout, rng);
    let b = p.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    LinearIds { w, b }
}

fn push_ffn<T: Real>(
    p: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    width: usize,
    cout: usize,
    rng: &mut CounterRng,
) -> FfnIds {
    FfnIds {
        up: push_linear(p, &format!("{name}.up"), cin, width, rng),
        down: push_linear(p, &format!("{name}.down"), width, cout, rng),
    }
}

fn push_norm<T: Real>(p: &mut ParamStore<T>, name: &str, width: usize) -> (ParamId, ParamId) {
    (
        p.push(format!("{name}.gain"), Tensor::ones(&[width])),
        p.push(format!("{name}.bias"), Tensor::zeros(&[width])),
    )
}

/// The per-scale reconstruction network without its reference bank.
///
/// Parameter names follow `s{j}.in.*`, `s{j}.b{k}.{branch}.{wq,wk,wv}`,
/// `s{j}.b{k}.{norm1,ffn,norm2}.*` and `s{j}.out.*`.
#[derive(Debug, Clone)]
pub struct Reconstructor<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    scales: Vec<ScaleIds>,
    masks: Vec<ScaleMasks>,
}

impl<T: Real> Reconstructor<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::stream(config.seed, &[MODEL_STREAM]);
        let mut params = ParamStore::new();
        let structure = config.structure();
        let mut scales = Vec::new();
        let mut masks = Vec::new();
        for (j, s) in config.scales.iter().enumerate() {
            let wide = s.hidden * config.ffn_expansion;
            let ffn_in = push_ffn(&mut params, &format!("s{j}.in"), s.channels, wide, s.hidden, &mut rng);
            let mut blocks = Vec::new();
            for k in 0..config.blocks {
                let prefix = format!("s{j}.b{k}");
                let branches = structure
                    .branches
                    .iter()
                    .map(|&(kind, weight)| {
                        let name = format!("{prefix}.{}", kind.as_str());
                        BranchIds {
                            kind,
                            weight,
                            wq: params.push_weight(format!("{name}.wq"), s.hidden, s.hidden, &mut rng),
                            wk: params.push_weight(format!("{name}.wk"), s.hidden, s.hidden, &mut rng),
                            wv: params.push_weight(format!("{name}.wv"), s.hidden, s.hidden, &mut rng),
                        }
                    })
                    .collect();
                let norm1 = push_norm(&mut params, &format!("{prefix}.norm1"), s.hidden);
                let ffn = push_ffn(&mut params, &format!("{prefix}.ffn"), s.hidden, wide, s.hidden, &mut rng);
                let norm2 = push_norm(&mut params, &format!("{prefix}.norm2"), s.hidden);
                blocks.push(BlockIds {
                    branches,
                    norm1,
                    ffn,
                    norm2,
                });
            }
            let ffn_out = push_ffn(&mut params, &format!("s{j}.out"), s.hidden, wide, s.channels, &mut rng);
            scales.push(ScaleIds { ffn_in, blocks, ffn_out });
            let neighbor = if config.variant.uses_neighbor_mask() {
                Some(build_mask(MaskKind::Neighbor, s.height, s.width, s.neighbor_window)?)
            } else {
                None
            };
            let local = build_mask(MaskKind::Local, s.height, s.width, s.local_window)?;
            masks.push(ScaleMasks { neighbor, local });
        }
        Ok(Self {
            config: config.clone(),
            params,
            scales,
            masks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn mask(&self, scale: usize, kind: MaskKind) -> Option<&AttentionMask> {
        let m = &self.masks[scale];
        match kind {
            MaskKind::Neighbor => m.neighbor.as_ref(),
            MaskKind::Local => Some(&m.local),
        }
    }

    /// Same structure and values in another precision.
    pub fn cast<U: Real>(&self) -> Reconstructor<U> {
        Reconstructor {
            config: self.config.clone(),
            params: self.params.cast(),
            scales: self.scales.clone(),
            masks: self.masks.clone(),
        }
    }
}

/// Learnable per-position reference tokens `R^j` (`N_j×C_j`) with their
/// projection to the hidden width. Names: `ref.s{j}.tokens`, `ref.s{j}.proj.*`.
#[derive(Debug, Clone)]
pub struct ReferenceBank<T> {
    params: ParamStore<T>,
    tokens: Vec<ParamId>,
    proj: Vec<LinearIds>,
}

pub fn init_reference<T: Real>(config: &ModelConfig, seed: u64) -> Result<ReferenceBank<T>> {
    config.validate()?;
    let mut rng = CounterRng::stream(seed, &[REFERENCE_STREAM]);
    let mut params = ParamStore::new();
    let mut tokens = Vec::new();
    let mut proj = Vec::new();
    for (j, s) in config.scales.iter().enumerate() {
        let std = 1.0 / (s.channels as f64).sqrt();
        tokens.push(params.push_normal(format!("ref.s{j}.tokens"), &[s.tokens(), s.channels], std, &mut rng));
        proj.push(push_linear(&mut params, &format!("ref.s{j}.proj"), s.channels, s.hidden, &mut rng));
    }
    Ok(ReferenceBank { params, tokens, proj })
}

impl<T: Real> ReferenceBank<T> {
    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn tokens(&self, scale: usize) -> &Tensor<T> {
        self.params.get(self.tokens[scale])
    }

    pub fn cast<U: Real>(&self) -> ReferenceBank<U> {
        ReferenceBank {
            params: self.params.cast(),
            tokens: self.tokens.clone(),
            proj: self.proj.clone(),
        }
    }
}

/// Sources a branch reads from: `query` feeds Q; `input` feeds whatever the
/// branch takes from the block input besides Q; `reference` is `R_h`.
#[derive(Debug, Clone, Copy)]
pub struct BranchInputs {
    pub query: Var,
    pub input: Var,
    pub reference: Var,
}

impl BranchInputs {
    pub fn shared(y: Var, reference: Var) -> Self {
        Self {
            query: y,
            input: y,
            reference,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    /// Normalised attention mix before the FFN.
    pub z: Var,
    pub y: Var,
}

/// A model and bank registered as leaves of one graph.
pub struct BoundModel<'m, T> {
    model: &'m Reconstructor<T>,
    bank: &'m ReferenceBank<T>,
    net: Vec<Var>,
    reference: Vec<Var>,
}

impl<'m, T: Real> BoundModel<'m, T> {
    pub fn new(g: &mut Graph<T>, model: &'m Reconstructor<T>, bank: &'m ReferenceBank<T>, requires_grad: bool) -> Self {
        let net = model.params.bind(g, requires_grad);
        let reference = bank.params.bind(g, requires_grad);
        Self {
            model,
            bank,
            net,
            reference,
        }
    }

    pub fn net_vars(&self) -> &[Var] {
        &self.net
    }

    pub fn bank_vars(&self) -> &[Var] {
        &self.reference
    }

    fn p(&self, id: ParamId) -> Var {
        self.net[id.0]
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, ids: &LinearIds) -> Result<Var> {
        Ok(g.linear(x, self.p(ids.w), Some(self.p(ids.b)))?)
    }

    fn ffn(&self, g: &mut Graph<T>, x: Var, ids: &FfnIds) -> Result<Var> {
        let h = self.linear(g, x, &ids.up)?;
        let h = g.gelu(h)?;
        self.linear(g, h, &ids.down)
    }

    /// `R_h = R^j W + b`, rebuilt from the current tokens.
    pub fn reference_hidden(&self, g: &mut Graph<T>, scale: usize) -> Result<Var> {
        let ids = &self.bank.proj[scale];
        let r = self.reference[self.bank.tokens[scale].0];
        Ok(g.linear(r, self.reference[ids.w.0], Some(self.reference[ids.b.0]))?)
    }

    pub fn input_ffn(&self, g: &mut Graph<T>, scale: usize, x: Var) -> Result<Var> {
        self.ffn(g, x, &self.model.scales[scale].ffn_in)
    }

    pub fn output_ffn(&self, g: &mut Graph<T>, scale: usize, y: Var) -> Result<Var> {
        self.ffn(g, y, &self.model.scales[scale].ffn_out)
    }

    pub fn branch_kind(&self, scale: usize, block: usize, branch: usize) -> BranchKind {
        self.model.scales[scale].blocks[block].branches[branch].kind
    }

    /// Unweighted output of one attention branch.
    pub fn branch(&self, g: &mut Graph<T>, scale: usize, block: usize, branch: usize, inputs: BranchInputs) -> Result<Var> {
        let ids = &self.model.scales[scale].blocks[block].branches[branch];
        let masks = &self.model.masks[scale];
        let (key_src, value_src, mask) = match ids.kind {
            BranchKind::SelfAttention => (inputs.input, inputs.input, None),
            BranchKind::Cross => (inputs.reference, inputs.reference, None),
            BranchKind::Mlka => (
                inputs.reference,
                inputs.input,
                Some(masks.neighbor.as_ref().expect("neighbor mask built for MLKA").grid()),
            ),
            BranchKind::Lca => (inputs.reference, inputs.reference, Some(masks.local.grid())),
        };
        attend(
            g,
            [inputs.query, key_src, value_src],
            [self.p(ids.wq), self.p(ids.wk), self.p(ids.wv)],
            mask,
            self.model.config.heads,
        )
    }

    pub fn block(&self, g: &mut Graph<T>, scale: usize, block: usize, y: Var, r_h: Var) -> Result<BlockOutput> {
        let weights: Vec<f64> = self.model.scales[scale].blocks[block]
            .branches
            .iter()
            .map(|b| b.weight)
            .collect();
        self.block_weighted(g, scale, block, y, r_h, &weights)
    }

    /// As [`BoundModel::block`] with explicit branch weights.
    pub fn block_weighted(
        &self,
        g: &mut Graph<T>,
        scale: usize,
        block: usize,
        y: Var,
        r_h: Var,
        weights: &[f64],
    ) -> Result<BlockOutput> {
        let ids = &self.model.scales[scale].blocks[block];
        if weights.len() != ids.branches.len() {
            return Err(TensorError::Invalid(format!(
                "{} branch weights for {} branches",
                weights.len(),
                ids.branches.len()
            ))
            .into());
        }
        let mut mix: Option<Var> = None;
        for (b, &w) in weights.iter().enumerate() {
            let mut o = self.branch(g, scale, block, b, BranchInputs::shared(y, r_h))?;
            if w != 1.0 {
                o = g.scale(o, T::lit(w))?;
            }
            mix = Some(match mix {
                Some(acc) => g.add(acc, o)?,
                None => o,
            });
        }
        let mut mix = mix.expect("blocks have at least one branch");
        if self.model.config.structure().residual {
            mix = g.add(mix, y)?;
        }
        let z = g.layer_norm(mix, self.p(ids.norm1.0), self.p(ids.norm1.1))?;
        let f = self.ffn(g, z, &ids.ffn)?;
        let f = g.add(f, z)?;
        let y = g.layer_norm(f, self.p(ids.norm2.0), self.p(ids.norm2.1))?;
        Ok(BlockOutput { z, y })
    }

    /// `F_in` (`N_j×C_j`) to `F_out` (`N_j×C_j`).
    pub fn forward_scale(&self, g: &mut Graph<T>, scale: usize, input: Var) -> Result<Var> {
        let r_h = self.reference_hidden(g, scale)?;
        let mut y = self.input_ffn(g, scale, input)?;
        for k in 0..self.model.config.blocks {
            y = self.block(g, scale, k, y, r_h)?.y;
        }
        self.output_ffn(g, scale, y)
    }
}

fn attend<T: Real>(
    g: &mut Graph<T>,
    [q_src, k_src, v_src]: [Var; 3],
    [wq, wk, wv]: [Var; 3],
    mask: Option<&Arc<MaskGrid>>,
    heads: usize,
) -> Result<Var> {
    let q = g.matmul(q_src, wq)?;
    let k = g.matmul(k_src, wk)?;
    let v = g.matmul(v_src, wv)?;
    let width = g.value(q).dims2()?.1;
    let dk = width / heads;
    let inv = T::lit(1.0 / (dk as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dk, dk)?,
                g.slice_cols(k, h * dk, dk)?,
                g.slice_cols(v, h * dk, dk)?,
            )
        };
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, inv)?;
        let a = g.masked_softmax(logits, mask)?;
        outs.push(g.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        Ok(g.concat_cols(&outs)?)
    }
}

/// Reconstructs every scale of one record. `inputs[j]` is `N_j×C_j`.
pub fn model_forward<T: Real>(
    model: &Reconstructor<T>,
    bank: &ReferenceBank<T>,
    inputs: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let cfg = &model.config;
    if inputs.len() != cfg.scales.len() {
        return Err(super::ModelError::Config(format!(
            "record has {} scales, model expects {}",
            inputs.len(),
            cfg.scales.len()
        )));
    }
    let mut g = Graph::new();
    let bound = BoundModel::new(&mut g, model, bank, false);
    let mut outs = Vec::with_capacity(inputs.len());
    for (j, (x, s)) in inputs.iter().zip(&cfg.scales).enumerate() {
        if x.shape() != [s.tokens(), s.channels] {
            return Err(TensorError::Shape {
                op: "model_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![s.tokens(), s.channels],
            }
            .into());
        }
        let xv = g.leaf(x.clone(), false);
        let out = bound.forward_scale(&mut g, j, xv)?;
        outs.push(g.value(out).clone());
    }
    Ok(outs)
}
