//! Layer-pruned ViT encoder with asynchronous template/search extraction.
//!
//! The template runs through every layer in plain self-attention and its
//! final-layer tokens are cached. The search region runs the first
//! `fe_layers` layers attending only to itself, then `ai_layers` layers in
//! which its queries attend to the concatenation of its own keys/values and
//! those of the cached template. Only search rows are updated in the
//! interaction stage, so the template never needs recomputation.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{self, gelu, layer_norm, matmul, matmul_transposed, softmax_rows, MacCounter, Tensor};
use crate::weights::{LayerWeights, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Template,
    Search,
}

/// Which image a token sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Template,
    Search,
    Joint,
}

impl From<Branch> for Origin {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Template => Origin::Template,
            Branch::Search => Origin::Search,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    /// `N × C`.
    pub tokens: Tensor,
    pub origin: Origin,
}

impl TokenSeq {
    pub fn new(tokens: Tensor, origin: Origin) -> Self {
        TokenSeq { tokens, origin }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A unit of encoder or head work recorded by a tracing [`Meter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    PatchEmbed(Branch),
    SelfBlock { origin: Origin, layer: usize },
    AsymBlock { layer: usize },
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub op: Op,
    /// Multiply-accumulates spent inside this op.
    pub macs: u64,
}

/// MAC counter plus an optional execution trace.
#[derive(Debug, Clone, Default)]
pub struct Meter {
    pub macs: MacCounter,
    trace: Option<Vec<Event>>,
}

impl Meter {
    /// Neither counts nor traces.
    pub fn off() -> Self {
        Meter::default()
    }

    pub fn counting() -> Self {
        Meter {
            macs: MacCounter::enabled(),
            trace: None,
        }
    }

    /// Counts MACs and records one [`Event`] per op.
    pub fn tracing() -> Self {
        Meter {
            macs: MacCounter::enabled(),
            trace: Some(Vec::new()),
        }
    }

    pub fn total(&self) -> u64 {
        self.macs.total()
    }

    pub fn events(&self) -> &[Event] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn clear(&mut self) {
        self.macs = if self.macs.enabled {
            MacCounter::enabled()
        } else {
            MacCounter::disabled()
        };
        if let Some(t) = &mut self.trace {
            t.clear();
        }
    }

    pub(crate) fn scoped<T>(&mut self, op: Op, f: impl FnOnce(&mut MacCounter) -> Result<T>) -> Result<T> {
        let start = self.macs.total();
        let out = f(&mut self.macs)?;
        if let Some(t) = &mut self.trace {
            t.push(Event {
                op,
                macs: self.macs.total() - start,
            });
        }
        Ok(out)
    }
}

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor, macs: &mut MacCounter) -> Result<Tensor> {
    matmul(x, w, macs)?.add_row_vector(b)
}

/// Multi-head attention with queries from `q_src` and keys/values from
/// `kv_src`, including the output projection. When `probs` is given, the
/// per-head softmax matrices are appended to it.
fn attention(
    q_src: &Tensor,
    kv_src: &Tensor,
    lw: &LayerWeights<'_>,
    heads: usize,
    macs: &mut MacCounter,
    mut probs: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let (nq, c) = q_src.dims2()?;
    let dk = c / heads;
    let scale = 1.0 / (dk as f32).sqrt();
    let q = linear(q_src, lw.q_weight, lw.q_bias, macs)?;
    let k = linear(kv_src, lw.k_weight, lw.k_bias, macs)?;
    let v = linear(kv_src, lw.v_weight, lw.v_bias, macs)?;
    let mut mixed = vec![0.0f32; nq * c];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let qh = q.slice_cols(cols.clone())?;
        let kh = k.slice_cols(cols.clone())?;
        let vh = v.slice_cols(cols)?;
        let p = softmax_rows(&matmul_transposed(&qh, &kh, macs)?.scale(scale))?;
        let out = matmul(&p, &vh, macs)?;
        if let Some(store) = probs.as_deref_mut() {
            store.push(p);
        }
        for r in 0..nq {
            mixed[r * c + h * dk..r * c + (h + 1) * dk].copy_from_slice(out.row(r));
        }
    }
    linear(&Tensor::new([nq, c], mixed)?, lw.proj_weight, lw.proj_bias, macs)
}

fn mlp(x: &Tensor, lw: &LayerWeights<'_>, macs: &mut MacCounter) -> Result<Tensor> {
    let hidden = gelu(&linear(x, lw.fc1_weight, lw.fc1_bias, macs)?);
    linear(&hidden, lw.fc2_weight, lw.fc2_bias, macs)
}

/// Pre-norm block. `context` adds extra key/value rows that are normalized
/// with the same `norm1` but never updated.
fn block(
    x: &Tensor,
    context: Option<&Tensor>,
    lw: &LayerWeights<'_>,
    heads: usize,
    macs: &mut MacCounter,
    probs: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let eps = tensor::LAYER_NORM_EPS;
    let h = layer_norm(x, lw.norm1_weight, lw.norm1_bias, eps)?;
    let attended = match context {
        None => attention(&h, &h, lw, heads, macs, probs)?,
        Some(z) => {
            let hz = layer_norm(z, lw.norm1_weight, lw.norm1_bias, eps)?;
            attention(&h, &h.concat_rows(&hz)?, lw, heads, macs, probs)?
        }
    };
    let x1 = x.add(&attended)?;
    let h2 = layer_norm(&x1, lw.norm2_weight, lw.norm2_bias, eps)?;
    x1.add(&mlp(&h2, lw, macs)?)
}

fn check_width(t: &Tensor, config: &ModelConfig, what: &str) -> Result<()> {
    let (_, c) = t.dims2()?;
    if c != config.embed_dim {
        return Err(Error::Dimension(format!(
            "{what} has channel width {c}, model expects {}",
            config.embed_dim
        )));
    }
    Ok(())
}

/// Patchify, project to `C` channels and add the branch's positional table.
pub fn patch_embed(image: &Tensor, weights: &WeightStore, branch: Branch, meter: &mut Meter) -> Result<TokenSeq> {
    let config = weights.config();
    let (h, w) = match branch {
        Branch::Template => config.template_size,
        Branch::Search => config.search_size,
    };
    if image.shape() != [3, h, w] {
        return Err(Error::Config(format!(
            "{branch:?} image has shape {:?}, expected [3, {h}, {w}]",
            image.shape()
        )));
    }
    let pos = match branch {
        Branch::Template => weights.get("pos_embed.template")?,
        Branch::Search => weights.get("pos_embed.search")?,
    };
    let tokens = meter.scoped(Op::PatchEmbed(branch), |macs| {
        let patches = tensor::patchify(image, config.patch_size)?;
        linear(&patches, weights.get("patch_embed.weight")?, weights.get("patch_embed.bias")?, macs)?.add(pos)
    })?;
    Ok(TokenSeq::new(tokens, branch.into()))
}

/// Standard self-attention block; used for the whole template pass and for
/// the search region's feature-extraction stage. On `Joint` tokens it is the
/// full concatenated attention that [`asym_block`] must agree with.
pub fn self_block(x: &TokenSeq, lw: &LayerWeights<'_>, config: &ModelConfig, meter: &mut Meter) -> Result<TokenSeq> {
    check_width(&x.tokens, config, "block input")?;
    let op = Op::SelfBlock {
        origin: x.origin,
        layer: lw.index,
    };
    let tokens = meter.scoped(op, |macs| block(&x.tokens, None, lw, config.num_heads, macs, None))?;
    Ok(TokenSeq::new(tokens, x.origin))
}

/// Interaction block: queries from the search tokens only, keys and values
/// from `[search; template]`. Returns updated search tokens; the template is
/// read, never modified.
pub fn asym_block(
    x: &TokenSeq,
    z_cached: &TokenSeq,
    lw: &LayerWeights<'_>,
    config: &ModelConfig,
    meter: &mut Meter,
) -> Result<TokenSeq> {
    if x.origin != Origin::Search || z_cached.origin != Origin::Template {
        return Err(Error::Input(format!(
            "asym_block needs (search, template) tokens, got ({:?}, {:?})",
            x.origin, z_cached.origin
        )));
    }
    check_width(&x.tokens, config, "search tokens")?;
    check_width(&z_cached.tokens, config, "template tokens")?;
    let tokens = meter.scoped(Op::AsymBlock { layer: lw.index }, |macs| {
        block(&x.tokens, Some(&z_cached.tokens), lw, config.num_heads, macs, None)
    })?;
    Ok(TokenSeq::new(tokens, Origin::Search))
}

fn final_norm(x: &Tensor, weights: &WeightStore) -> Result<Tensor> {
    layer_norm(x, weights.get("norm.weight")?, weights.get("norm.bias")?, tensor::LAYER_NORM_EPS)
}

/// Runs the template through all `fe + ai` layers and returns the
/// final-normalized `N_z × C` token matrix that gets cached.
pub fn extract_template(template: &Tensor, weights: &WeightStore, meter: &mut Meter) -> Result<Tensor> {
    let config = weights.config();
    let mut z = patch_embed(template, weights, Branch::Template, meter)?;
    for i in 0..config.num_layers() {
        z = self_block(&z, &weights.layer(i)?, config, meter)?;
    }
    final_norm(&z.tokens, weights)
}

fn check_template(template_features: &Tensor, config: &ModelConfig) -> Result<()> {
    let expected = [config.template_tokens(), config.embed_dim];
    if template_features.shape() != expected {
        return Err(Error::Config(format!(
            "template features have shape {:?}, expected {expected:?}",
            template_features.shape()
        )));
    }
    Ok(())
}

/// Search tokens after the feature-extraction stage.
fn search_features(search: &Tensor, weights: &WeightStore, meter: &mut Meter) -> Result<TokenSeq> {
    let config = weights.config();
    let mut x = patch_embed(search, weights, Branch::Search, meter)?;
    for i in 0..config.fe_layers {
        x = self_block(&x, &weights.layer(i)?, config, meter)?;
    }
    Ok(x)
}

/// Full search pass against cached template features; returns the
/// final-normalized `N_x × C` search tokens.
pub fn forward_search(
    search: &Tensor,
    template_features: &Tensor,
    weights: &WeightStore,
    meter: &mut Meter,
) -> Result<Tensor> {
    let config = weights.config();
    check_template(template_features, config)?;
    let z = TokenSeq::new(template_features.clone(), Origin::Template);
    let mut x = search_features(search, weights, meter)?;
    for i in config.fe_layers..config.num_layers() {
        x = asym_block(&x, &z, &weights.layer(i)?, config, meter)?;
    }
    final_norm(&x.tokens, weights)
}

/// Head-averaged attention matrix `N_x × (N_x + N_z)` of an interaction
/// layer. Columns are search keys first, then template keys.
pub fn interaction_attention(
    search: &Tensor,
    template_features: &Tensor,
    weights: &WeightStore,
    layer_index: usize,
) -> Result<Tensor> {
    let config = weights.config();
    if !(config.fe_layers..config.num_layers()).contains(&layer_index) {
        return Err(Error::Range(format!(
            "layer {layer_index} is not an interaction layer; valid layers are {:?}",
            (config.fe_layers..config.num_layers()).collect::<Vec<_>>()
        )));
    }
    check_template(template_features, config)?;
    let mut meter = Meter::off();
    let z = TokenSeq::new(template_features.clone(), Origin::Template);
    let mut x = search_features(search, weights, &mut meter)?;
    for i in config.fe_layers..layer_index {
        x = asym_block(&x, &z, &weights.layer(i)?, config, &mut meter)?;
    }
    let mut probs = Vec::with_capacity(config.num_heads);
    block(
        &x.tokens,
        Some(template_features),
        &weights.layer(layer_index)?,
        config.num_heads,
        &mut meter.macs,
        Some(&mut probs),
    )?;
    let (rows, cols) = probs[0].dims2()?;
    let mut avg = vec![0.0f64; rows * cols];
    for p in &probs {
        for (a, &v) in avg.iter_mut().zip(p.data()) {
            *a += v as f64;
        }
    }
    let heads = probs.len() as f64;
    Tensor::new([rows, cols], avg.into_iter().map(|v| (v / heads) as f32).collect::<Vec<_>>())
}

/// Mean attention each search token pays to the template tokens at an
/// interaction layer, shaped as the search token grid.
pub fn attention_probe(
    search: &Tensor,
    template_features: &Tensor,
    weights: &WeightStore,
    layer_index: usize,
) -> Result<Tensor> {
    let config = weights.config();
    let attn = interaction_attention(search, template_features, weights, layer_index)?;
    let nx = config.search_tokens();
    let nz = config.template_tokens();
    let grid = config.search_size.0 / config.patch_size;
    let map: Vec<f32> = (0..nx)
        .map(|r| {
            let row = attn.row(r);
            (row[nx..].iter().map(|&v| v as f64).sum::<f64>() / nz as f64) as f32
        })
        .collect();
    Tensor::new([grid, config.search_size.1 / config.patch_size], map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_weights(fe: usize, ai: usize) -> WeightStore {
        WeightStore::generate(&ModelConfig::toy(fe, ai), 5).unwrap()
    }

    fn image(h: usize, w: usize, seed: u32) -> Tensor {
        Tensor::from_fn([3, h, w], |i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 1000.0)
    }

    #[test]
    fn patch_embed_shapes_and_zero_case() {
        let w = toy_weights(1, 1);
        let mut m = Meter::off();
        let z = patch_embed(&image(32, 32, 1), &w, Branch::Template, &mut m).unwrap();
        assert_eq!(z.tokens.shape(), &[4, 64]);
        let x = patch_embed(&image(64, 64, 1), &w, Branch::Search, &mut m).unwrap();
        assert_eq!(x.tokens.shape(), &[16, 64]);
        assert!(patch_embed(&image(64, 64, 1), &w, Branch::Template, &mut m).is_err());

        let w0 = w.with_tensor("pos_embed.template", Tensor::zeros([4, 64])).unwrap();
        let z = patch_embed(&Tensor::zeros([3, 32, 32]), &w0, Branch::Template, &mut m).unwrap();
        assert!(z.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_dims_token_counts() {
        let c = crate::config::Variant::B4.config();
        assert_eq!(c.template_tokens(), 64);
        assert_eq!(c.search_tokens(), 256);
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let w = toy_weights(1, 0);
        let lw = w.layer(0).unwrap();
        let x = Tensor::from_fn([1, 64], |i| (i as f32 * 0.37).sin());
        let mut macs = MacCounter::disabled();
        let attended = attention(&x, &x, &lw, 4, &mut macs, None).unwrap();
        let v = linear(&x, lw.v_weight, lw.v_bias, &mut macs).unwrap();
        let expected = linear(&v, lw.proj_weight, lw.proj_bias, &mut macs).unwrap();
        assert!(attended.max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn identical_tokens_stay_identical() {
        let w = toy_weights(1, 0);
        let row: Vec<f32> = (0..64).map(|i| (i as f32 * 0.11).cos()).collect();
        let x = TokenSeq::new(Tensor::new([5, 64], row.repeat(5)).unwrap(), Origin::Search);
        let y = self_block(&x, &w.layer(0).unwrap(), w.config(), &mut Meter::off()).unwrap();
        for r in 1..5 {
            assert_eq!(y.tokens.row(r), y.tokens.row(0));
        }
    }

    #[test]
    fn empty_template_reduces_to_self_block() {
        let w = toy_weights(0, 1);
        let lw = w.layer(0).unwrap();
        let x = TokenSeq::new(Tensor::from_fn([16, 64], |i| (i as f32 * 0.013).sin()), Origin::Search);
        let z = TokenSeq::new(Tensor::zeros([0, 64]), Origin::Template);
        let a = asym_block(&x, &z, &lw, w.config(), &mut Meter::off()).unwrap();
        let s = self_block(&x, &lw, w.config(), &mut Meter::off()).unwrap();
        assert_eq!(a, s);
    }

    #[test]
    fn asym_block_rejects_wrong_origins_and_widths() {
        let w = toy_weights(0, 1);
        let lw = w.layer(0).unwrap();
        let x = TokenSeq::new(Tensor::zeros([16, 64]), Origin::Search);
        let z = TokenSeq::new(Tensor::zeros([4, 32]), Origin::Template);
        assert!(asym_block(&x, &z, &lw, w.config(), &mut Meter::off()).is_err());
        assert!(asym_block(&z, &x, &lw, w.config(), &mut Meter::off()).is_err());
        assert!(asym_block(&x, &x, &lw, w.config(), &mut Meter::off()).is_err());
    }

    #[test]
    fn layer_trace_matches_stage_split() {
        let w = toy_weights(2, 2);
        let mut m = Meter::tracing();
        let z = extract_template(&image(32, 32, 3), &w, &mut m).unwrap();
        assert_eq!(z.shape(), &[4, 64]);
        let template_blocks: Vec<_> = m
            .events()
            .iter()
            .filter_map(|e| match e.op {
                Op::SelfBlock { origin: Origin::Template, layer } => Some(layer),
                _ => None,
            })
            .collect();
        assert_eq!(template_blocks, vec![0, 1, 2, 3]);

        m.clear();
        let out = forward_search(&image(64, 64, 4), &z, &w, &mut m).unwrap();
        assert_eq!(out.shape(), &[16, 64]);
        let ops: Vec<_> = m.events().iter().map(|e| e.op).collect();
        assert_eq!(
            ops,
            vec![
                Op::PatchEmbed(Branch::Search),
                Op::SelfBlock { origin: Origin::Search, layer: 0 },
                Op::SelfBlock { origin: Origin::Search, layer: 1 },
                Op::AsymBlock { layer: 2 },
                Op::AsymBlock { layer: 3 },
            ]
        );
    }

    #[test]
    fn template_shape_is_checked() {
        let w = toy_weights(1, 1);
        assert!(forward_search(&image(64, 64, 1), &Tensor::zeros([3, 64]), &w, &mut Meter::off()).is_err());
    }

    #[test]
    fn no_interaction_layers_ignores_template() {
        let w = toy_weights(2, 0);
        let x = image(64, 64, 9);
        let a = forward_search(&x, &Tensor::zeros([4, 64]), &w, &mut Meter::off()).unwrap();
        let b = forward_search(&x, &Tensor::full([4, 64], 3.0), &w, &mut Meter::off()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probe_rejects_feature_extraction_layers() {
        let w = toy_weights(2, 1);
        let z = extract_template(&image(32, 32, 1), &w, &mut Meter::off()).unwrap();
        let err = attention_probe(&image(64, 64, 2), &z, &w, 1).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
        assert!(err.to_string().contains("[2]"));
        let map = attention_probe(&image(64, 64, 2), &z, &w, 2).unwrap();
        assert_eq!(map.shape(), &[4, 4]);
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
