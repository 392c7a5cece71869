//! Discontinuous Galerkin operator layer.
//!
//! The latent field is split into `p×p` elements. Each element carries an
//! `h×d×d` coefficient matrix built from layer-normalised keys and values
//! (the low-rank `Q·(K̃ᵀṼ)/n` Galerkin form). Cross-element coupling is added
//! by operator-valued numerical fluxes evaluated on every element face, and
//! the assembled per-element coefficients are applied to the element's full
//! query block.
//!
//! All batched routines take element tensors laid out as `[E, n, C]` and
//! coefficient tensors as `[E, h, d, d]`; heads are contiguous channel blocks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::partition::{BoundaryCondition, ElementPartition, Neighbor, NeighborMap, Side};
use crate::tape::{Activation, NodeId, Tape, LAYERNORM_EPS, ZERO_SLOT};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FluxKind {
    Central,
    Jump,
    AvgJump,
    Upwind,
}

impl FluxKind {
    pub const ALL: [FluxKind; 4] = [
        FluxKind::Central,
        FluxKind::Jump,
        FluxKind::AvgJump,
        FluxKind::Upwind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FluxKind::Central => "central",
            FluxKind::Jump => "jump",
            FluxKind::AvgJump => "avg_jump",
            FluxKind::Upwind => "upwind",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the flux carries a penalty coefficient τ.
    pub fn uses_penalty(self) -> bool {
        matches!(self, FluxKind::Jump | FluxKind::AvgJump)
    }
}

/// Penalty coefficient τ for jump-type fluxes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty {
    /// Per-layer learnable scalar with the given initial value.
    Learnable(f64),
    Fixed(f64),
}

impl Penalty {
    pub fn initial(self) -> f64 {
        match self {
            Penalty::Learnable(v) | Penalty::Fixed(v) => v,
        }
    }
}

/// How a layer builds its integral operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatorVariant {
    /// One element covering the whole field, no fluxes.
    Global,
    /// Element-local volume operators only.
    Local,
    /// Fluxes from face-strip coefficient matrices.
    Face,
    /// Fluxes from the neighbouring elements' volume coefficients (P0DG).
    Cell,
}

impl OperatorVariant {
    pub const ALL: [OperatorVariant; 4] = [
        OperatorVariant::Global,
        OperatorVariant::Local,
        OperatorVariant::Face,
        OperatorVariant::Cell,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorVariant::Global => "gg",
            OperatorVariant::Local => "lg",
            OperatorVariant::Face => "face",
            OperatorVariant::Cell => "cell",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn has_flux(self) -> bool {
        matches!(self, OperatorVariant::Face | OperatorVariant::Cell)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluxConfig {
    pub kind: FluxKind,
    pub penalty: Penalty,
    pub bc: BoundaryCondition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoeffTag {
    Volume,
    Face,
    Flux,
    Assembled,
}

/// A single element's `h×d×d` coefficient matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffMatrix {
    pub tag: CoeffTag,
    /// Shape `[h, d, d]`.
    pub values: Tensor,
}

impl CoeffMatrix {
    pub fn new(tag: CoeffTag, values: Tensor) -> Result<Self> {
        match values.shape() {
            &[_, d1, d2] if d1 == d2 => Ok(Self { tag, values }),
            s => Err(Error::contract(format!("coefficient matrix must be [h, d, d], got {s:?}"))),
        }
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn identity(heads: usize, d: usize, tag: CoeffTag) -> Self {
        let mut t = Tensor::zeros([heads, d, d]);
        for h in 0..heads {
            for i in 0..d {
                t.data_mut()[(h * d + i) * d + i] = 1.0;
            }
        }
        Self { tag, values: t }
    }

    fn batched(&self) -> Tensor {
        let s = self.values.shape();
        self.values.clone().reshape([1, s[0], s[1], s[2]]).expect("rank 3 -> 4")
    }

    fn from_batched(tag: CoeffTag, t: &Tensor) -> Self {
        let s = t.shape();
        let values = t.clone().reshape([s[1], s[2], s[3]]).expect("rank 4 -> 3");
        Self { tag, values }
    }
}

/// Query/key/value maps of one layer, `C×C` each (applied as `z·W`).
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub heads: usize,
}

// ---- batched tape routines ------------------------------------------------

/// `(1/n)·K̃ᵀṼ` per block and head, for already-normalised keys and values of
/// shape `[E, n, C]`.
pub fn galerkin_gram(tape: &mut Tape, keys: NodeId, values: NodeId, heads: usize) -> Result<NodeId> {
    let n = tape.value(keys).shape().get(1).copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::contract("galerkin coefficients need at least one sample"));
    }
    tape.block_gram(keys, values, heads, 1.0 / n as f64)
}

/// Layer-normalises each head slice of every sample.
pub fn head_layernorm(tape: &mut Tape, x: NodeId, heads: usize) -> Result<NodeId> {
    let c = *tape.value(x).shape().last().unwrap_or(&0);
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::contract(format!("heads={heads} must divide C={c}")));
    }
    tape.layernorm(x, c / heads, LAYERNORM_EPS)
}

/// Operator-valued numerical flux between interior-side coefficients `own`
/// and exterior-side coefficients `ext`, both `[E, h, d, d]`.
pub fn flux(tape: &mut Tape, own: NodeId, ext: NodeId, kind: FluxKind, tau: Option<NodeId>) -> Result<NodeId> {
    let need_tau = || tau.ok_or_else(|| Error::contract(format!("{} flux requires τ", kind.name())));
    match kind {
        FluxKind::Central => {
            let s = tape.add(own, ext)?;
            Ok(tape.scale(s, 0.5))
        }
        FluxKind::Jump => {
            let tau = need_tau()?;
            jump(tape, own, ext, tau)
        }
        FluxKind::AvgJump => {
            let tau = need_tau()?;
            let s = tape.add(own, ext)?;
            let avg = tape.scale(s, 0.5);
            let j = jump(tape, own, ext, tau)?;
            tape.add(avg, j)
        }
        FluxKind::Upwind => {
            // α = sigmoid(mean(own) − mean(ext)); F = ext + α·(own − ext)
            let m_own = tape.block_mean(own)?;
            let m_ext = tape.block_mean(ext)?;
            let dm = tape.sub(m_own, m_ext)?;
            let alpha = tape.pointwise(dm, Activation::Sigmoid);
            let diff = tape.sub(own, ext)?;
            let weighted = tape.row_scale(diff, alpha)?;
            tape.add(ext, weighted)
        }
    }
}

fn jump(tape: &mut Tape, own: NodeId, ext: NodeId, tau: NodeId) -> Result<NodeId> {
    let diff = tape.sub(own, ext)?;
    let scaled = tape.scale_by(diff, tau)?;
    Ok(tape.scale(scaled, -1.0))
}

/// Gather map selecting, for every element, the exterior coefficients seen
/// across `side`: the neighbour's opposite-face block for interior faces, the
/// element's own block under Dirichlet, zero under Neumann. Indices refer to
/// the concatenation `[opposite; own]`.
pub fn exterior_index(neighbors: &NeighborMap, side: Side, block: usize) -> Arc<[usize]> {
    let count = neighbors.len();
    let mut idx = Vec::with_capacity(count * block);
    for e in 0..count {
        match neighbors.get(e, side) {
            Neighbor::Interior(n) => idx.extend(n * block..(n + 1) * block),
            Neighbor::Boundary => match neighbors.bc() {
                BoundaryCondition::Dirichlet => {
                    idx.extend((count + e) * block..(count + e + 1) * block)
                }
                _ => idx.extend(std::iter::repeat_n(ZERO_SLOT, block)),
            },
        }
    }
    idx.into()
}

/// Exterior coefficients across `side` for every element.
pub fn exterior(
    tape: &mut Tape,
    own: NodeId,
    opposite: NodeId,
    side: Side,
    neighbors: &NeighborMap,
) -> Result<NodeId> {
    let shape = tape.value(own).shape().to_vec();
    let block: usize = shape[1..].iter().product();
    let both = tape.concat(&[opposite, own])?;
    tape.gather(both, exterior_index(neighbors, side, block), shape)
}

/// `K^vol + Σ_f K^flux_f` over the four faces in assembly order.
pub fn assemble(tape: &mut Tape, volume: NodeId, fluxes: &[NodeId]) -> Result<NodeId> {
    if fluxes.len() != 4 {
        return Err(Error::contract(format!(
            "assembly needs 4 face fluxes, got {}",
            fluxes.len()
        )));
    }
    let mut acc = volume;
    for &f in fluxes {
        acc = tape.add(acc, f)?;
    }
    Ok(acc)
}

// ---- single-element value API ----------------------------------------------

fn project_samples(tape: &mut Tape, samples: &Tensor, w: &Tensor) -> Result<NodeId> {
    let s = tape.constant(samples.clone());
    let w = tape.constant(w.clone());
    tape.matmul(s, w)
}

fn coefficients(samples: &Tensor, weights: &HeadWeights, tag: CoeffTag) -> Result<CoeffMatrix> {
    let (n, c) = match samples.shape() {
        &[n, c] if n >= 1 => (n, c),
        s => return Err(Error::contract(format!("samples must be [n, C], got {s:?}"))),
    };
    let mut tape = Tape::new();
    let k = project_samples(&mut tape, samples, &weights.key)?;
    let v = project_samples(&mut tape, samples, &weights.value)?;
    let k = tape.reshape(k, [1, n, c])?;
    let v = tape.reshape(v, [1, n, c])?;
    let kt = head_layernorm(&mut tape, k, weights.heads)?;
    let vt = head_layernorm(&mut tape, v, weights.heads)?;
    let g = galerkin_gram(&mut tape, kt, vt, weights.heads)?;
    Ok(CoeffMatrix::from_batched(tag, tape.value(g)))
}

/// Volume coefficients `(1/p²)·Ln(z W_k)ᵀ Ln(z W_v)` of one element `[p², C]`.
pub fn volume_coefficients(element: &Tensor, weights: &HeadWeights) -> Result<CoeffMatrix> {
    coefficients(element, weights, CoeffTag::Volume)
}

/// Face coefficients `(1/n_f)·Ln(K_f)ᵀ Ln(V_f)` of one strip `[n_f, C]`.
pub fn face_coefficients(strip: &Tensor, weights: &HeadWeights) -> Result<CoeffMatrix> {
    coefficients(strip, weights, CoeffTag::Face)
}

/// `Q_e·K` per head for a query block `[n, C]`.
pub fn apply_coefficients(queries: &Tensor, k: &CoeffMatrix) -> Result<Tensor> {
    let (n, c) = match queries.shape() {
        &[n, c] => (n, c),
        s => return Err(Error::contract(format!("queries must be [n, C], got {s:?}"))),
    };
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone().reshape([1, n, c])?);
    let kk = tape.constant(k.batched());
    let out = tape.block_apply(q, kk, k.heads())?;
    tape.value(out).clone().reshape([n, c])
}

/// Numerical flux between two single-element coefficient matrices; `tau` is
/// ignored by central and upwind fluxes.
pub fn numerical_flux(own: &CoeffMatrix, ext: &CoeffMatrix, kind: FluxKind, tau: f64) -> Result<CoeffMatrix> {
    if own.values.shape() != ext.values.shape() {
        return Err(Error::Shape {
            op: "numerical_flux",
            lhs: own.values.shape().to_vec(),
            rhs: ext.values.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let a = tape.constant(own.batched());
    let b = tape.constant(ext.batched());
    let t = tape.constant(Tensor::scalar(tau));
    let f = flux(&mut tape, a, b, kind, Some(t))?;
    Ok(CoeffMatrix::from_batched(CoeffTag::Flux, tape.value(f)))
}

/// Exterior operator on a physical boundary face.
pub fn boundary_exterior(own: &CoeffMatrix, bc: BoundaryCondition) -> Result<CoeffMatrix> {
    match bc {
        BoundaryCondition::Dirichlet => Ok(own.clone()),
        BoundaryCondition::Neumann => Ok(CoeffMatrix {
            tag: own.tag,
            values: Tensor::zeros(own.values.shape().to_vec()),
        }),
        BoundaryCondition::Periodic => Err(Error::contract(
            "periodic faces are paired through the neighbour map, not a boundary exterior",
        )),
    }
}

pub fn assemble_element(volume: &CoeffMatrix, fluxes: &[CoeffMatrix]) -> Result<CoeffMatrix> {
    let mut tape = Tape::new();
    let v = tape.constant(volume.batched());
    let fs = fluxes
        .iter()
        .map(|f| tape.constant(f.batched()))
        .collect::<Vec<_>>();
    let out = assemble(&mut tape, v, &fs)?;
    Ok(CoeffMatrix::from_batched(CoeffTag::Assembled, tape.value(out)))
}

// ---- full layer --------------------------------------------------------------

/// Parameter handles of one operator layer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub local: ParamId,
    pub bias: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub tau: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerConfig {
    pub heads: usize,
    pub variant: OperatorVariant,
    pub flux: FluxConfig,
    pub activation: Activation,
}

/// Intermediate values of one layer evaluation, for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub output: NodeId,
    /// Operator term `Q_e·K^DG_e` reassembled as `[H·W, C]`.
    pub operator: NodeId,
    /// Per-element assembled coefficients (`[E, h, d, d]`).
    pub coefficients: NodeId,
}

/// Registers the parameters of one layer. Weights use a uniform
/// `±1/√C` initialisation; `τ` is registered only for jump-type fluxes with a
/// learnable penalty.
pub fn init_layer(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    cfg: &LayerConfig,
    rng: &mut impl rand::Rng,
) -> LayerParams {
    let bound = 1.0 / (channels as f64).sqrt();
    let mat = |rng: &mut dyn rand::RngCore| {
        let data = (0..channels * channels)
            .map(|_| rand::Rng::gen_range(rng, -bound..bound))
            .collect();
        Tensor::from_parts(vec![channels, channels], data)
    };
    let local = store.add(format!("{prefix}.w"), mat(rng));
    let bias = store.add(format!("{prefix}.b"), Tensor::zeros([channels]));
    let query = store.add(format!("{prefix}.wq"), mat(rng));
    let key = store.add(format!("{prefix}.wk"), mat(rng));
    let value = store.add(format!("{prefix}.wv"), mat(rng));
    let tau = match cfg.flux.penalty {
        Penalty::Learnable(v) if cfg.variant.has_flux() && cfg.flux.kind.uses_penalty() => {
            Some(store.add(format!("{prefix}.tau"), Tensor::scalar(v)))
        }
        _ => None,
    };
    LayerParams {
        local,
        bias,
        query,
        key,
        value,
        tau,
    }
}

/// One operator layer `σ(W z + b + (K z))` on a `[H, W, C]` latent field.
pub fn dg_layer(
    tape: &mut Tape,
    store: &ParamStore,
    z: NodeId,
    params: &LayerParams,
    cfg: &LayerConfig,
    partition: &ElementPartition,
) -> Result<LayerNodes> {
    let (h, w, c) = match tape.value(z).shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::contract(format!("latent must be [H, W, C], got {s:?}"))),
    };
    if partition.extents() != (h, w) && cfg.variant != OperatorVariant::Global {
        return Err(Error::contract(format!(
            "partition {:?} does not match latent {h}×{w}",
            partition.extents()
        )));
    }
    let heads = cfg.heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::contract(format!("heads={heads} must divide C={c}")));
    }
    let pixels = h * w;
    let flat = tape.reshape(z, [pixels, c])?;

    let wl = tape.param(store, params.local);
    let bl = tape.param(store, params.bias);
    let local = tape.matmul(flat, wl)?;
    let local = tape.add_bias(local, bl)?;

    let wq = tape.param(store, params.query);
    let wk = tape.param(store, params.key);
    let wv = tape.param(store, params.value);
    let q = tape.matmul(flat, wq)?;
    let k = tape.matmul(flat, wk)?;
    let v = tape.matmul(flat, wv)?;

    let (operator, coefficients) = if cfg.variant == OperatorVariant::Global {
        let q = tape.reshape(q, [1, pixels, c])?;
        let k = tape.reshape(k, [1, pixels, c])?;
        let v = tape.reshape(v, [1, pixels, c])?;
        let kt = head_layernorm(tape, k, heads)?;
        let vt = head_layernorm(tape, v, heads)?;
        let kvol = galerkin_gram(tape, kt, vt, heads)?;
        let out = tape.block_apply(q, kvol, heads)?;
        (tape.reshape(out, [pixels, c])?, kvol)
    } else {
        let e = partition.count();
        let n = partition.pixels_per_element();
        let pmap = partition.partition_index(c);
        let qe = tape.gather(q, pmap.clone(), [e, n, c])?;
        let ke = tape.gather(k, pmap.clone(), [e, n, c])?;
        let ve = tape.gather(v, pmap, [e, n, c])?;
        let kt = head_layernorm(tape, ke, heads)?;
        let vt = head_layernorm(tape, ve, heads)?;
        let kvol = galerkin_gram(tape, kt, vt, heads)?;
        let kdg = element_coefficients(tape, store, kvol, kt, vt, params, cfg, partition)?;
        let out = tape.block_apply(qe, kdg, heads)?;
        let umap = partition.unpartition_index(c);
        (tape.gather(out, umap, [pixels, c])?, kdg)
    };

    let pre = tape.add(local, operator)?;
    let act = tape.pointwise(pre, cfg.activation);
    let output = tape.reshape(act, [h, w, c])?;
    Ok(LayerNodes {
        output,
        operator,
        coefficients,
    })
}

#[allow(clippy::too_many_arguments)]
fn element_coefficients(
    tape: &mut Tape,
    store: &ParamStore,
    kvol: NodeId,
    kt: NodeId,
    vt: NodeId,
    params: &LayerParams,
    cfg: &LayerConfig,
    partition: &ElementPartition,
) -> Result<NodeId> {
    if !cfg.variant.has_flux() {
        return Ok(kvol);
    }
    let tau = if cfg.flux.kind.uses_penalty() {
        Some(match (params.tau, cfg.flux.penalty) {
            (Some(id), _) => tape.param(store, id),
            (None, p) => tape.constant(Tensor::scalar(p.initial())),
        })
    } else {
        None
    };
    let neighbors = partition.neighbor_map(cfg.flux.bc);
    let boundary: [NodeId; 4] = match cfg.variant {
        OperatorVariant::Face => {
            let (e, c) = (partition.count(), *tape.value(kt).shape().last().unwrap());
            let p = partition.element_size();
            let mut out = [kvol; 4];
            for side in Side::ALL {
                let idx = partition.strip_index(side, c);
                let ks = tape.gather(kt, idx.clone(), [e, p, c])?;
                let vs = tape.gather(vt, idx, [e, p, c])?;
                out[side.index()] = galerkin_gram(tape, ks, vs, cfg.heads)?;
            }
            out
        }
        _ => [kvol; 4],
    };
    let mut fluxes = Vec::with_capacity(4);
    for side in Side::ALL {
        let own = boundary[side.index()];
        let opposite = boundary[side.opposite().index()];
        let ext = exterior(tape, own, opposite, side, &neighbors)?;
        fluxes.push(flux(tape, own, ext, cfg.flux.kind, tau)?);
    }
    assemble(tape, kvol, &fluxes)
}
