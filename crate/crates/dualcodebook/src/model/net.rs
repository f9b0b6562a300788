//! The completion network: shallow region features, dual quantization with an
//! information exchange between the two codebooks, and coarse-to-fine
//! decoding. One forward call builds the whole graph on a gradient tape.

use super::config::{CoarseSource, LossWeights, ModelConfig};
use super::params::{self, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::codebook::{nearest_indices, vq_losses};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, group_regions, PointCloud};
use crate::qie::{self, RetargetVars};
use std::collections::HashMap;

/// Half-width of the square folding patch attached to each coarse point.
pub const FOLD_SPAN: f64 = 0.2;

/// The `(u, v)` coordinates of the g x g folding grid, row-major. A single
/// cell sits at the patch center; larger grids span `[-FOLD_SPAN, FOLD_SPAN]`
/// inclusively.
pub fn fold_grid_coords(g: usize) -> Vec<[f64; 2]> {
    let axis: Vec<f64> = if g == 1 {
        vec![0.0]
    } else {
        (0..g)
            .map(|i| -FOLD_SPAN + 2.0 * FOLD_SPAN * i as f64 / (g - 1) as f64)
            .collect()
    };
    let mut coords = Vec::with_capacity(g * g);
    for &u in &axis {
        for &v in &axis {
            coords.push([u, v]);
        }
    }
    coords
}

#[derive(Clone, Copy)]
struct LinearVars {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct LnVars {
    g: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct AttnVars {
    q: LinearVars,
    k: LinearVars,
    v: LinearVars,
    o: LinearVars,
}

/// Store parameters registered as tape variables, looked up by name.
struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    fn new(tape: &mut Tape, store: &'a ParamStore) -> Self {
        let vars = store.tensors().iter().map(|t| tape.param(t.clone())).collect();
        Bound { store, vars }
    }

    fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from the store"));
        self.vars[i]
    }

    fn linear(&self, prefix: &str) -> LinearVars {
        LinearVars {
            w: self.var(&format!("{prefix}.w")),
            b: self.var(&format!("{prefix}.b")),
        }
    }

    fn layer_norm(&self, prefix: &str) -> LnVars {
        LnVars {
            g: self.var(&format!("{prefix}.g")),
            b: self.var(&format!("{prefix}.b")),
        }
    }

    fn attention(&self, prefix: &str) -> AttnVars {
        AttnVars {
            q: self.linear(&format!("{prefix}.q")),
            k: self.linear(&format!("{prefix}.k")),
            v: self.linear(&format!("{prefix}.v")),
            o: self.linear(&format!("{prefix}.o")),
        }
    }

    fn qie_mlp(&self, prefix: &str) -> RetargetVars {
        RetargetVars {
            w1: self.var(&format!("{prefix}.l1.w")),
            b1: self.var(&format!("{prefix}.l1.b")),
            w2: self.var(&format!("{prefix}.l2.w")),
            b2: self.var(&format!("{prefix}.l2.b")),
            w3: self.var(&format!("{prefix}.l3.w")),
            b3: self.var(&format!("{prefix}.l3.b")),
        }
    }
}

fn linear(tape: &mut Tape, x: Var, l: &LinearVars) -> Result<Var> {
    let h = tape.matmul(x, l.w)?;
    tape.add_row(h, l.b)
}

/// Two-layer MLP with a ReLU between the layers.
fn mlp2(tape: &mut Tape, x: Var, l1: &LinearVars, l2: &LinearVars) -> Result<Var> {
    let h = linear(tape, x, l1)?;
    let h = tape.relu(h);
    linear(tape, h, l2)
}

/// Multi-head scaled dot-product attention: project, split columns into
/// heads, attend per head, concatenate, and project out.
fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    memory: Var,
    p: &AttnVars,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, query, &p.q)?;
    let k = linear(tape, memory, &p.k)?;
    let v = linear(tape, memory, &p.v)?;
    let width = tape.value(q).cols();
    debug_assert_eq!(width % heads, 0);
    let dh = width / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        outs.push(tape.scaled_dot_attention(qh, kh, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    linear(tape, cat, &p.o)
}

/// Pre-norm encoder block: self-attention and feed-forward, each with a
/// residual connection around the normalized input.
fn encoder_layer(tape: &mut Tape, x: Var, b: &Bound, prefix: &str, heads: usize) -> Result<Var> {
    let ln1 = b.layer_norm(&format!("{prefix}.ln1"));
    let n1 = tape.layer_norm(x, ln1.g, ln1.b)?;
    let attn = multi_head_attention(tape, n1, n1, &b.attention(&format!("{prefix}.attn")), heads)?;
    let x = tape.add(x, attn)?;
    let ln2 = b.layer_norm(&format!("{prefix}.ln2"));
    let n2 = tape.layer_norm(x, ln2.g, ln2.b)?;
    let h = mlp2(
        tape,
        n2,
        &b.linear(&format!("{prefix}.ffn.l1")),
        &b.linear(&format!("{prefix}.ffn.l2")),
    )?;
    tape.add(x, h)
}

/// Pre-norm decoder block: self-attention over the queries, cross-attention
/// into the encoder memory, then the feed-forward, each residual.
fn decoder_layer(
    tape: &mut Tape,
    x: Var,
    memory: Var,
    b: &Bound,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let ln1 = b.layer_norm(&format!("{prefix}.ln1"));
    let n1 = tape.layer_norm(x, ln1.g, ln1.b)?;
    let s = multi_head_attention(tape, n1, n1, &b.attention(&format!("{prefix}.self")), heads)?;
    let x = tape.add(x, s)?;
    let ln2 = b.layer_norm(&format!("{prefix}.ln2"));
    let n2 = tape.layer_norm(x, ln2.g, ln2.b)?;
    let c = multi_head_attention(tape, n2, memory, &b.attention(&format!("{prefix}.cross")), heads)?;
    let x = tape.add(x, c)?;
    let ln3 = b.layer_norm(&format!("{prefix}.ln3"));
    let n3 = tape.layer_norm(x, ln3.g, ln3.b)?;
    let h = mlp2(
        tape,
        n3,
        &b.linear(&format!("{prefix}.ffn.l1")),
        &b.linear(&format!("{prefix}.ffn.l2")),
    )?;
    tape.add(x, h)
}

/// Tape variables produced by one forward pass.
pub struct ForwardVars {
    /// Coarse prediction, `H x 3`.
    pub coarse: Var,
    /// Dense completion, `H·g² x 3`.
    pub complete: Var,
    /// Exchange loss (internal + external, both directions if configured).
    pub codebook_loss: Var,
    /// Sum of VQ codebook terms over the active quantization sites.
    pub vq_codebook: Var,
    /// Sum of VQ commitment terms over the active quantization sites.
    pub vq_commitment: Var,
    /// Encoder-site code assignment per region, when that site is active.
    pub encoder_indices: Option<Vec<usize>>,
    /// Decoder-site code assignment per coarse point, when active.
    pub decoder_indices: Option<Vec<usize>>,
}

/// Codebook usage increments gathered during one forward pass. Kept separate
/// from the model so batches can run in parallel over a shared `&Model`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageDelta {
    pub encoder: Vec<u64>,
    pub decoder: Vec<u64>,
}

impl UsageDelta {
    fn for_config(config: &ModelConfig) -> Self {
        let len = |on: bool| if on { config.codebook_size } else { 0 };
        UsageDelta {
            encoder: vec![0; len(config.use_encoder_codebook)],
            decoder: vec![0; len(config.use_decoder_codebook)],
        }
    }

    pub fn merge(&mut self, other: &UsageDelta) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            *a += b;
        }
        for (a, b) in self.decoder.iter_mut().zip(&other.decoder) {
            *a += b;
        }
    }
}

/// Scalar loss values extracted from one pass, serializable for logs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cd_complete: f64,
    pub cd_coarse: f64,
    pub codebook: f64,
    pub vq_codebook: f64,
    pub vq_commitment: f64,
}

/// Tape variables of the weighted objective and its components.
pub struct LossVars {
    pub total: Var,
    pub cd_complete: Var,
    pub cd_coarse: Var,
    pub codebook: Var,
    pub vq_codebook: Var,
    pub vq_commitment: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> Result<LossBreakdown> {
        let get = |v: Var| tape.value(v).scalar_value();
        Ok(LossBreakdown {
            total: get(self.total)?,
            cd_complete: get(self.cd_complete)?,
            cd_coarse: get(self.cd_coarse)?,
            codebook: get(self.codebook)?,
            vq_codebook: get(self.vq_codebook)?,
            vq_commitment: get(self.vq_commitment)?,
        })
    }
}

/// Builds the weighted training objective from a forward pass and the ground
/// truth: Chamfer on the dense and coarse predictions plus the quantization
/// and exchange terms.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &ForwardVars,
    gt: &PointCloud,
    weights: &LossWeights,
) -> Result<LossVars> {
    if gt.is_empty() {
        return Err(Error::data("ground-truth cloud is empty".to_string()));
    }
    let gt_leaf = tape.leaf(Tensor::new(vec![gt.len(), 3], gt.flat())?);
    let cd_complete = tape.chamfer_l1(fwd.complete, gt_leaf)?;
    let cd_coarse = tape.chamfer_l1(fwd.coarse, gt_leaf)?;

    let mut total = tape.scale(cd_complete, weights.complete);
    let wc = tape.scale(cd_coarse, weights.coarse);
    total = tape.add(total, wc)?;
    let wb = tape.scale(fwd.codebook_loss, weights.codebook);
    total = tape.add(total, wb)?;
    let wv = tape.scale(fwd.vq_codebook, weights.vq);
    total = tape.add(total, wv)?;
    let wm = tape.scale(fwd.vq_commitment, weights.commitment);
    total = tape.add(total, wm)?;

    Ok(LossVars {
        total,
        cd_complete,
        cd_coarse,
        codebook: fwd.codebook_loss,
        vq_codebook: fwd.vq_codebook,
        vq_commitment: fwd.vq_commitment,
    })
}

/// Coarse and dense predictions as plain clouds.
#[derive(Debug, Clone)]
pub struct CompletionOutput {
    pub coarse: PointCloud,
    pub complete: PointCloud,
}

/// A configured model: parameters plus per-site codebook usage counters.
///
/// Usage counters are only advanced when a caller applies a [`UsageDelta`]
/// (the trainer does this once per sample); inference helpers leave them
/// untouched so evaluation does not pollute training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    usage_encoder: Vec<u64>,
    usage_decoder: Vec<u64>,
}

impl Model {
    /// Fresh model with seeded parameters and zeroed usage.
    pub fn init(config: &ModelConfig) -> Result<Model> {
        let params = params::init_params(config)?;
        let delta = UsageDelta::for_config(config);
        Ok(Model {
            config: config.clone(),
            params,
            usage_encoder: delta.encoder,
            usage_decoder: delta.decoder,
        })
    }

    /// Rebuilds a model from checkpointed parts, checking that the parameter
    /// list matches what the configuration defines.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        usage_encoder: Vec<u64>,
        usage_decoder: Vec<u64>,
    ) -> Result<Model> {
        let expected = params::init_params(&config)?;
        if expected.names() != params.names() {
            return Err(Error::config(format!(
                "parameter list does not match the configuration: expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter '{name}' expects shape {:?}, got {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        let blank = UsageDelta::for_config(&config);
        if usage_encoder.len() != blank.encoder.len() || usage_decoder.len() != blank.decoder.len()
        {
            return Err(Error::shape(format!(
                "usage counters have lengths {}/{}, configuration expects {}/{}",
                usage_encoder.len(),
                usage_decoder.len(),
                blank.encoder.len(),
                blank.decoder.len()
            )));
        }
        Ok(Model { config, params, usage_encoder, usage_decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn usage_encoder(&self) -> &[u64] {
        &self.usage_encoder
    }

    pub fn usage_decoder(&self) -> &[u64] {
        &self.usage_decoder
    }

    pub fn apply_usage(&mut self, delta: &UsageDelta) {
        for (a, b) in self.usage_encoder.iter_mut().zip(&delta.encoder) {
            *a += b;
        }
        for (a, b) in self.usage_decoder.iter_mut().zip(&delta.decoder) {
            *a += b;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage_encoder.iter_mut().for_each(|c| *c = 0);
        self.usage_decoder.iter_mut().for_each(|c| *c = 0);
    }

    /// Store position of the codebook serving the encoder site, if any.
    pub fn encoder_codebook_position(&self) -> Option<usize> {
        params::encoder_codebook_name(&self.config).and_then(|n| self.params.position(n))
    }

    /// Store position of the codebook serving the decoder site, if any.
    pub fn decoder_codebook_position(&self) -> Option<usize> {
        params::decoder_codebook_name(&self.config).and_then(|n| self.params.position(n))
    }

    /// Builds the full completion graph on `tape` and returns the output
    /// variables together with this pass's codebook usage increments.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        partial: &PointCloud,
    ) -> Result<(ForwardVars, UsageDelta)> {
        let cfg = &self.config;
        if partial.len() < cfg.min_partial_points() {
            return Err(Error::data(format!(
                "partial cloud has {} points; the configuration needs at least {}",
                partial.len(),
                cfg.min_partial_points()
            )));
        }
        let bound = Bound::new(tape, &self.params);
        let mut usage = UsageDelta::for_config(cfg);

        // Region sampling and grouping are index-level operations; gradients
        // flow through the per-point offsets, not the sampling itself.
        let centers = farthest_point_sample(partial, cfg.regions, 0)?;
        let groups = group_regions(partial, &centers, cfg.region_size)?;

        // Shallow features: per-region offset MLP pooled by a row-wise max.
        let sf1 = bound.linear("sf.l1");
        let sf2 = bound.linear("sf.l2");
        let mut region_rows = Vec::with_capacity(cfg.regions);
        for (gi, group) in groups.iter().enumerate() {
            let c = centers.centers[gi];
            let mut data = Vec::with_capacity(group.len() * 3);
            for &pi in group {
                let p = partial.points()[pi];
                data.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
            let offsets = tape.leaf(Tensor::new(vec![group.len(), 3], data)?);
            let h = linear(tape, offsets, &sf1)?;
            let h = tape.relu(h);
            let h = linear(tape, h, &sf2)?;
            region_rows.push(tape.max_over_rows(h)?);
        }
        let f_shallow = tape.concat_rows(&region_rows)?; // M x R

        // Encoder-side quantization with a straight-through estimator.
        let mut vq_cb_terms = Vec::new();
        let mut vq_commit_terms = Vec::new();
        let mut enc_cb_var = None;
        let (z_enc, encoder_indices) =
            if let Some(name) = params::encoder_codebook_name(cfg) {
                let cb = bound.var(name);
                let idx = nearest_indices(tape.value(f_shallow), tape.value(cb))?;
                for &i in &idx {
                    usage.encoder[i] += 1;
                }
                let codes = tape.select_rows(cb, &idx)?;
                let (cb_term, commit) = vq_losses(tape, f_shallow, codes)?;
                vq_cb_terms.push(cb_term);
                vq_commit_terms.push(commit);
                let st = tape.straight_through(f_shallow, codes)?;
                enc_cb_var = Some(cb);
                (st, Some(idx))
            } else {
                (f_shallow, None)
            };

        // Transformer encoder over projected region features plus a learned
        // positional embedding of the region centers.
        let centers_flat: Vec<f64> = centers.centers.iter().flatten().copied().collect();
        let centers_leaf = tape.leaf(Tensor::new(vec![cfg.regions, 3], centers_flat)?);
        let pos = mlp2(tape, centers_leaf, &bound.linear("posenc.l1"), &bound.linear("posenc.l2"))?;
        let projected = linear(tape, z_enc, &bound.linear("in_proj"))?;
        let mut x = tape.add(projected, pos)?;
        for i in 0..cfg.encoder_depth {
            x = encoder_layer(tape, x, &bound, &format!("enc.{i}"), cfg.heads)?;
        }
        let memory = x; // M x C

        // Coarse prediction from a max-pooled global feature; tanh keeps the
        // sketch inside the normalized unit box.
        let pooled_src = match cfg.coarse_source {
            CoarseSource::EncoderOutput => memory,
            CoarseSource::ShallowFeatures => z_enc,
        };
        let pooled = tape.max_over_rows(pooled_src)?;
        let h = linear(tape, pooled, &bound.linear("coarse.l1"))?;
        let h = tape.relu(h);
        let h = linear(tape, h, &bound.linear("coarse.l2"))?;
        let h = tape.tanh(h);
        let coarse = tape.reshape(h, vec![cfg.coarse_points, 3])?; // H x 3

        // Decoder: embedded coarse points attend to the encoder memory. The
        // query embedding keeps the graph differentiable through `coarse`.
        let queries = mlp2(
            tape,
            coarse,
            &bound.linear("queryenc.l1"),
            &bound.linear("queryenc.l2"),
        )?;
        let mut y = queries;
        for i in 0..cfg.decoder_depth {
            y = decoder_layer(tape, y, memory, &bound, &format!("dec.{i}"), cfg.heads)?;
        }
        let f_deep = y; // H x C
        let z_raw = linear(tape, f_deep, &bound.linear("down_proj"))?; // H x R

        // Decoder-side quantization; with the exchange active, merged vectors
        // substitute the plain codes of the rows they were re-targeted onto.
        let mut codebook_loss = tape.leaf(Tensor::scalar(0.0));
        let (z_used, decoder_indices) =
            if let Some(name) = params::decoder_codebook_name(cfg) {
                let cb_d = bound.var(name);
                let idx = nearest_indices(tape.value(z_raw), tape.value(cb_d))?;
                for &i in &idx {
                    usage.decoder[i] += 1;
                }
                let plain = tape.select_rows(cb_d, &idx)?; // H x R
                let (cb_term, commit) = vq_losses(tape, z_raw, plain)?;
                vq_cb_terms.push(cb_term);
                vq_commit_terms.push(commit);
                let consumed = if cfg.use_qie {
                    let cb_e = enc_cb_var.expect("validated: exchange needs the encoder site");
                    let enc_idx = encoder_indices
                        .as_deref()
                        .expect("validated: exchange needs encoder assignments");
                    let fwd =
                        qie::qie_apply(tape, enc_idx, cb_e, cb_d, &bound.qie_mlp("qie.fwd"))?;
                    codebook_loss = fwd.loss;
                    if cfg.qie_reverse_loss {
                        let rev =
                            qie::qie_apply(tape, &idx, cb_d, cb_e, &bound.qie_mlp("qie.rev"))?;
                        codebook_loss = tape.add(codebook_loss, rev.loss)?;
                    }
                    // First merged vector per distinct target code wins.
                    let mut by_target: HashMap<usize, Var> = HashMap::new();
                    for (t, &ti) in fwd.target_indices.iter().enumerate() {
                        by_target.entry(ti).or_insert(fwd.merged[t]);
                    }
                    let mut rows = Vec::with_capacity(idx.len());
                    for (r, ti) in idx.iter().enumerate() {
                        match by_target.get(ti) {
                            Some(&m) => rows.push(m),
                            None => rows.push(tape.select_rows(plain, &[r])?),
                        }
                    }
                    tape.concat_rows(&rows)?
                } else {
                    plain
                };
                let st = tape.straight_through(z_raw, consumed)?;
                (st, Some(idx))
            } else {
                (z_raw, None)
            };

        // Fuse deep features with the consumed codes, then fold a small grid
        // patch around every coarse point.
        let fused_in = tape.concat_cols(&[f_deep, z_used])?;
        let fused = linear(tape, fused_in, &bound.linear("fuse"))?; // H x C
        let gg = cfg.fold_grid * cfg.fold_grid;
        let grid_flat: Vec<f64> = fold_grid_coords(cfg.fold_grid).into_iter().flatten().collect();
        let grid = tape.leaf(Tensor::new(vec![gg, 2], grid_flat)?);
        let grid_tiled = tape.tile_rows(grid, cfg.coarse_points)?; // H·g² x 2
        let fused_rep = tape.repeat_rows(fused, gg)?; // H·g² x C
        let fold_in = tape.concat_cols(&[grid_tiled, fused_rep])?;
        let h = linear(tape, fold_in, &bound.linear("fold.l1"))?;
        let h = tape.relu(h);
        let offsets = linear(tape, h, &bound.linear("fold.l2"))?; // H·g² x 3
        let coarse_rep = tape.repeat_rows(coarse, gg)?;
        let complete = tape.add(coarse_rep, offsets)?;

        // Sum the per-site VQ terms into single scalars.
        let mut vq_codebook = tape.leaf(Tensor::scalar(0.0));
        for t in vq_cb_terms {
            vq_codebook = tape.add(vq_codebook, t)?;
        }
        let mut vq_commitment = tape.leaf(Tensor::scalar(0.0));
        for t in vq_commit_terms {
            vq_commitment = tape.add(vq_commitment, t)?;
        }

        let fwd = ForwardVars {
            coarse,
            complete,
            codebook_loss,
            vq_codebook,
            vq_commitment,
            encoder_indices,
            decoder_indices,
        };
        Ok((fwd, usage))
    }

    /// Runs the pipeline and extracts the predictions as point clouds. Usage
    /// counters are not advanced.
    pub fn complete_cloud(&self, partial: &PointCloud) -> Result<CompletionOutput> {
        let mut tape = Tape::new();
        let (fwd, _usage) = self.forward_on_tape(&mut tape, partial)?;
        let coarse = PointCloud::from_flat(tape.value(fwd.coarse).data())?;
        let complete = PointCloud::from_flat(tape.value(fwd.complete).data())?;
        Ok(CompletionOutput { coarse, complete })
    }

    /// Encoder-site code assignment for a partial cloud, ordered by region.
    pub fn encoder_codes(&self, partial: &PointCloud) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let (fwd, _usage) = self.forward_on_tape(&mut tape, partial)?;
        fwd.encoder_indices
            .ok_or_else(|| Error::config("encoder codebook is disabled".to_string()))
    }

    /// Loss values for one sample without computing gradients.
    pub fn evaluate_loss(&self, partial: &PointCloud, gt: &PointCloud) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let (fwd, _usage) = self.forward_on_tape(&mut tape, partial)?;
        let loss = total_loss(&mut tape, &fwd, gt, &self.config.loss_weights)?;
        loss.values(&tape)
    }

    /// One training evaluation: loss values, per-parameter gradients aligned
    /// with the store order, and the usage increments of this pass.
    pub fn loss_and_gradients(
        &self,
        partial: &PointCloud,
        gt: &PointCloud,
    ) -> Result<(LossBreakdown, Vec<Tensor>, UsageDelta)> {
        let mut tape = Tape::new();
        let bound_count = self.params.len();
        let (fwd, usage) = self.forward_on_tape(&mut tape, partial)?;
        let loss = total_loss(&mut tape, &fwd, gt, &self.config.loss_weights)?;
        let values = loss.values(&tape)?;
        if !values.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite training loss: {:?}",
                values
            )));
        }
        tape.backward(loss.total)?;
        // Parameters were bound first, in store order, so their variable
        // indices are exactly 0..bound_count.
        let grads: Vec<Tensor> = (0..bound_count).map(|i| tape.grad_tensor(Var(i))).collect();
        Ok((values, grads, usage))
    }
}
