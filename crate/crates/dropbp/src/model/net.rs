//! The residual transformer: explicit forward with activation caching and a
//! hand-written backward that honors per-layer drop decisions.
//!
//! Forward output never depends on the plan; skipping a layer's backward
//! only elides its cached activations and gradients. The backward of a
//! dropped branch is the residual identity, so the gradient entering the
//! unit equals the gradient leaving it and every parameter gradient of that
//! branch (including its layer norm) is exactly zero.

use crate::error::{Error, Result};
use crate::flops::{self, FlopsMeter};
use crate::model::cache::{ActivationCache, AttnBranchCache, BranchCache, FfnBranchCache};
use crate::model::config::{layer_of_param, LayerIndex, ModelConfig, TrainMode};
use crate::model::params::{is_trainable, Gradients, LinearMap, Params, TransformerUnit};
use crate::model::plan::{BranchBackward, IterationPlan};
use crate::ops::{self, CrossEntropyCache};
use crate::rng::{Domain, Rng};
use crate::tensor::Tensor;

/// Finite stand-in for -inf in masked attention scores; exp underflows to
/// exactly zero, so masked positions carry zero probability and gradient.
const MASK_VALUE: f64 = -1e30;

/// A batch of token id sequences, row-major [batch, seq].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::Input(format!(
                "token batch wants {batch}x{seq} ids, got {}",
                ids.len()
            )));
        }
        Ok(TokenBatch { ids, batch, seq })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Fresh model with deterministic init derived from the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::substream(seed, Domain::Init, 0);
        let params = Params::init(&config, &mut rng);
        Ok(Model { config, params })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers()
    }

    /// Forward pass. Logits are identical for every plan that does not skip
    /// forward branches; the plan decides which activations get cached.
    pub fn forward(
        &self,
        tokens: &TokenBatch,
        plan: &IterationPlan,
        meter: &mut FlopsMeter,
    ) -> Result<(Tensor, ActivationCache)> {
        if plan.n_layers() != self.n_layers() {
            return Err(Error::State(format!(
                "plan covers {} layers, model has {}",
                plan.n_layers(),
                self.n_layers()
            )));
        }
        if tokens.seq > self.config.seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds configured maximum {}",
                tokens.seq, self.config.seq_len
            )));
        }
        let mut x = ops::embedding_forward(&self.params.embedding, &tokens.ids, meter)?;
        let mut layers: Vec<Option<BranchCache>> = Vec::with_capacity(self.n_layers());

        for (u, unit) in self.params.units.iter().enumerate() {
            let attn_idx = 2 * u;
            if plan.forward_skip[attn_idx] {
                layers.push(None);
            } else {
                let (branch_out, cache) = self.attn_forward(&x, unit, tokens, meter)?;
                x = ops::add(&x, &branch_out, meter)?;
                layers.push(plan.needs_cache(attn_idx).then_some(BranchCache::Attn(cache)));
            }

            let ffn_idx = 2 * u + 1;
            if plan.forward_skip[ffn_idx] {
                layers.push(None);
            } else {
                let (branch_out, cache) = self.ffn_forward(&x, unit, meter)?;
                x = ops::add(&x, &branch_out, meter)?;
                layers.push(plan.needs_cache(ffn_idx).then_some(BranchCache::Ffn(cache)));
            }
        }

        let (ln_out, ln_cache) = ops::layer_norm_forward(
            &x,
            &self.params.final_ln.scale,
            &self.params.final_ln.bias,
            meter,
        )?;
        let logits = ops::matmul_forward(&ln_out, &self.params.head, meter)?;
        Ok((
            logits,
            ActivationCache {
                tokens: tokens.ids.clone(),
                batch: tokens.batch,
                seq: tokens.seq,
                layers,
                final_ln: ln_cache,
                final_ln_out: ln_out,
            },
        ))
    }

    /// Mean cross entropy of logits against (maskable) targets.
    pub fn loss(
        &self,
        logits: &Tensor,
        targets: &[u32],
        meter: &mut FlopsMeter,
    ) -> Result<(f64, CrossEntropyCache)> {
        ops::cross_entropy_forward(logits, targets, meter)
    }

    /// Backward pass from the logits gradient. The cache must hold branch
    /// activations for every layer the plan keeps; caching more is fine,
    /// which lets one all-kept forward serve several backward passes.
    pub fn backward(
        &self,
        cache: &ActivationCache,
        plan: &IterationPlan,
        dlogits: &Tensor,
        meter: &mut FlopsMeter,
    ) -> Result<Gradients> {
        let n_layers = self.n_layers();
        if plan.n_layers() != n_layers {
            return Err(Error::State("plan/model layer count mismatch".into()));
        }
        let needs: Vec<bool> = (0..n_layers).map(|i| plan.needs_cache(i)).collect();
        cache.check_covers(&needs)?;

        let mode = self.config.mode;
        let mut grads = Gradients::new();

        // Head and final layer norm.
        let d_ln_out = ops::matmul_grad_left(dlogits, &self.params.head, meter)?;
        if is_trainable("head", mode) {
            let dw = ops::matmul_grad_right(&cache.final_ln_out, dlogits, meter)?;
            grads.insert("head", dw);
        }
        let (mut dx, dscale, dbias) = ops::layer_norm_backward(
            &d_ln_out,
            &self.params.final_ln.scale,
            &cache.final_ln,
            meter,
        )?;
        if is_trainable("final_ln.scale", mode) {
            grads.insert("final_ln.scale", dscale);
        }
        if is_trainable("final_ln.bias", mode) {
            grads.insert("final_ln.bias", dbias);
        }

        let mut truncated = false;
        for flat in (0..n_layers).rev() {
            if flat < plan.stop_below {
                truncated = true;
                break;
            }
            let unit = &self.params.units[flat / 2];
            match plan.backward[flat] {
                BranchBackward::SkipBranch => {
                    if plan.param_grads[flat] {
                        self.zero_layer_grads(flat, &mut grads);
                    }
                }
                BranchBackward::Full | BranchBackward::BranchOnly => {
                    let want_params = plan.param_grads[flat]
                        && plan.backward[flat] == BranchBackward::Full;
                    let branch_cache = cache.layers[flat].as_ref().expect("checked above");
                    let d_branch = if flat % 2 == 0 {
                        let c = match branch_cache {
                            BranchCache::Attn(c) => c,
                            _ => return Err(Error::State("cache branch kind mismatch".into())),
                        };
                        self.attn_backward(&dx, unit, flat / 2, c, cache, want_params, &mut grads, meter)?
                    } else {
                        let c = match branch_cache {
                            BranchCache::Ffn(c) => c,
                            _ => return Err(Error::State("cache branch kind mismatch".into())),
                        };
                        self.ffn_backward(&dx, unit, flat / 2, c, want_params, &mut grads, meter)?
                    };
                    if plan.backward[flat] == BranchBackward::Full {
                        add_into_backward(&mut dx, &d_branch, meter)?;
                    } else {
                        dx = d_branch;
                    }
                }
            }
        }

        if !truncated && is_trainable("embedding", mode) {
            let de = ops::embedding_backward(
                &dx,
                &cache.tokens,
                self.config.vocab_size,
                meter,
            )?;
            grads.insert("embedding", de);
        }
        grads.ensure_finite()?;
        Ok(grads)
    }

    /// Gradient of the residual stream entering the first unit, for the
    /// path-length analyses. Same contract as `backward` otherwise.
    pub fn input_gradient(
        &self,
        cache: &ActivationCache,
        plan: &IterationPlan,
        dlogits: &Tensor,
        meter: &mut FlopsMeter,
    ) -> Result<Tensor> {
        let n_layers = self.n_layers();
        let needs: Vec<bool> = (0..n_layers).map(|i| plan.needs_cache(i)).collect();
        cache.check_covers(&needs)?;
        let mut grads = Gradients::new();

        let d_ln_out = ops::matmul_grad_left(dlogits, &self.params.head, meter)?;
        let (mut dx, _, _) = ops::layer_norm_backward(
            &d_ln_out,
            &self.params.final_ln.scale,
            &cache.final_ln,
            meter,
        )?;
        for flat in (0..n_layers).rev() {
            let unit = &self.params.units[flat / 2];
            match plan.backward[flat] {
                BranchBackward::SkipBranch => {}
                mode_kind => {
                    let branch_cache = cache.layers[flat].as_ref().expect("checked above");
                    let d_branch = if flat % 2 == 0 {
                        let c = match branch_cache {
                            BranchCache::Attn(c) => c,
                            _ => return Err(Error::State("cache branch kind mismatch".into())),
                        };
                        self.attn_backward(&dx, unit, flat / 2, c, cache, false, &mut grads, meter)?
                    } else {
                        let c = match branch_cache {
                            BranchCache::Ffn(c) => c,
                            _ => return Err(Error::State("cache branch kind mismatch".into())),
                        };
                        self.ffn_backward(&dx, unit, flat / 2, c, false, &mut grads, meter)?
                    };
                    if mode_kind == BranchBackward::Full {
                        add_into_backward(&mut dx, &d_branch, meter)?;
                    } else {
                        dx = d_branch;
                    }
                }
            }
        }
        Ok(dx)
    }

    fn attn_forward(
        &self,
        x: &Tensor,
        unit: &TransformerUnit,
        tokens: &TokenBatch,
        meter: &mut FlopsMeter,
    ) -> Result<(Tensor, AttnBranchCache)> {
        let (batch, seq) = (tokens.batch, tokens.seq);
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let d = self.config.d_model;

        let (ln_out, ln) = ops::layer_norm_forward(x, &unit.ln1.scale, &unit.ln1.bias, meter)?;
        let (q, mid_q) = linear_forward(&ln_out, &unit.attn.wq, meter)?;
        let (k, mid_k) = linear_forward(&ln_out, &unit.attn.wk, meter)?;
        let (v, mid_v) = linear_forward(&ln_out, &unit.attn.wv, meter)?;

        let alpha = 1.0 / (dh as f64).sqrt();
        let mut scores = Tensor::zeros(vec![batch * heads * seq, seq]);
        for b in 0..batch {
            for h in 0..heads {
                let qh = extract_head(&q, b, h, seq, dh, d);
                let kh = extract_head(&k, b, h, seq, dh, d);
                let sh = ops::matmul_forward(&qh, &kh.transpose2(), meter)?;
                let base = (b * heads + h) * seq;
                scores.data_mut()[base * seq..(base + seq) * seq].copy_from_slice(sh.data());
            }
        }
        // Scale, then causal mask (mask writes constants: no flops).
        for val in scores.data_mut().iter_mut() {
            *val *= alpha;
        }
        meter.add_forward(flops::scale(batch * heads * seq * seq));
        for bh in 0..batch * heads {
            for i in 0..seq {
                let row = (bh * seq + i) * seq;
                for j in i + 1..seq {
                    scores.data_mut()[row + j] = MASK_VALUE;
                }
            }
        }
        let probs = ops::softmax_forward(&scores, meter)?;

        let mut merged = Tensor::zeros(vec![batch * seq, d]);
        for b in 0..batch {
            for h in 0..heads {
                let ph = extract_prob_block(&probs, b, h, heads, seq);
                let vh = extract_head(&v, b, h, seq, dh, d);
                let ctx = ops::matmul_forward(&ph, &vh, meter)?;
                place_head(&mut merged, &ctx, b, h, seq, dh, d);
            }
        }
        let (out, mid_o) = linear_forward(&merged, &unit.attn.wo, meter)?;

        let adapter_mid: Vec<Tensor> = [mid_q, mid_k, mid_v, mid_o].into_iter().flatten().collect();
        Ok((
            out,
            AttnBranchCache {
                ln,
                ln_out,
                q,
                k,
                v,
                probs,
                merged,
                adapter_mid,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_backward(
        &self,
        g: &Tensor,
        unit: &TransformerUnit,
        u: usize,
        c: &AttnBranchCache,
        cache: &ActivationCache,
        want_params: bool,
        grads: &mut Gradients,
        meter: &mut FlopsMeter,
    ) -> Result<Tensor> {
        let (batch, seq) = (cache.batch, cache.seq);
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let d = self.config.d_model;
        let mode = self.config.mode;

        let dmerged = linear_backward(
            &format!("unit{u}.attn.wo"),
            &c.merged,
            c.adapter_mid.get(3),
            &unit.attn.wo,
            g,
            want_params,
            mode,
            grads,
            meter,
        )?;

        let mut dprobs = Tensor::zeros(vec![batch * heads * seq, seq]);
        let mut dv = Tensor::zeros(vec![batch * seq, d]);
        for b in 0..batch {
            for h in 0..heads {
                let dctx = extract_head(&dmerged, b, h, seq, dh, d);
                let ph = extract_prob_block(&c.probs, b, h, heads, seq);
                let vh = extract_head(&c.v, b, h, seq, dh, d);
                let dp = ops::matmul_grad_left(&dctx, &vh, meter)?;
                let dvh = ops::matmul_grad_right(&ph, &dctx, meter)?;
                let base = (b * heads + h) * seq;
                dprobs.data_mut()[base * seq..(base + seq) * seq].copy_from_slice(dp.data());
                place_head(&mut dv, &dvh, b, h, seq, dh, d);
            }
        }

        let mut dscores = ops::softmax_backward(&c.probs, &dprobs, meter)?;
        let alpha = 1.0 / (dh as f64).sqrt();
        for val in dscores.data_mut().iter_mut() {
            *val *= alpha;
        }
        meter.add_backward(flops::scale(batch * heads * seq * seq));

        let mut dq = Tensor::zeros(vec![batch * seq, d]);
        let mut dk = Tensor::zeros(vec![batch * seq, d]);
        for b in 0..batch {
            for h in 0..heads {
                let ds = extract_prob_block(&dscores, b, h, heads, seq);
                let qh = extract_head(&c.q, b, h, seq, dh, d);
                let kh = extract_head(&c.k, b, h, seq, dh, d);
                let dqh = ops::matmul_product_backward(&ds, &kh, meter)?;
                let dkh = ops::matmul_grad_right(&ds, &qh, meter)?;
                place_head(&mut dq, &dqh, b, h, seq, dh, d);
                place_head(&mut dk, &dkh, b, h, seq, dh, d);
            }
        }

        let mut d_ln = linear_backward(
            &format!("unit{u}.attn.wq"),
            &c.ln_out,
            c.adapter_mid.first(),
            &unit.attn.wq,
            &dq,
            want_params,
            mode,
            grads,
            meter,
        )?;
        let d_ln_k = linear_backward(
            &format!("unit{u}.attn.wk"),
            &c.ln_out,
            c.adapter_mid.get(1),
            &unit.attn.wk,
            &dk,
            want_params,
            mode,
            grads,
            meter,
        )?;
        let d_ln_v = linear_backward(
            &format!("unit{u}.attn.wv"),
            &c.ln_out,
            c.adapter_mid.get(2),
            &unit.attn.wv,
            &dv,
            want_params,
            mode,
            grads,
            meter,
        )?;
        add_into_backward(&mut d_ln, &d_ln_k, meter)?;
        add_into_backward(&mut d_ln, &d_ln_v, meter)?;

        let (dx, dscale, dbias) =
            ops::layer_norm_backward(&d_ln, &unit.ln1.scale, &c.ln, meter)?;
        if want_params {
            let scale_name = format!("unit{u}.ln1.scale");
            if is_trainable(&scale_name, mode) {
                grads.insert(scale_name, dscale);
            }
            let bias_name = format!("unit{u}.ln1.bias");
            if is_trainable(&bias_name, mode) {
                grads.insert(bias_name, dbias);
            }
        }
        Ok(dx)
    }

    fn ffn_forward(
        &self,
        x: &Tensor,
        unit: &TransformerUnit,
        meter: &mut FlopsMeter,
    ) -> Result<(Tensor, FfnBranchCache)> {
        let (ln_out, ln) = ops::layer_norm_forward(x, &unit.ln2.scale, &unit.ln2.bias, meter)?;
        let (pre_act, mid1) = linear_forward(&ln_out, &unit.ffn.w1, meter)?;
        let act = ops::gelu_forward(&pre_act, meter);
        let (out, mid2) = linear_forward(&act, &unit.ffn.w2, meter)?;
        let adapter_mid: Vec<Tensor> = [mid1, mid2].into_iter().flatten().collect();
        Ok((
            out,
            FfnBranchCache {
                ln,
                ln_out,
                pre_act,
                act,
                adapter_mid,
            },
        ))
    }

    fn ffn_backward(
        &self,
        g: &Tensor,
        unit: &TransformerUnit,
        u: usize,
        c: &FfnBranchCache,
        want_params: bool,
        grads: &mut Gradients,
        meter: &mut FlopsMeter,
    ) -> Result<Tensor> {
        let mode = self.config.mode;
        let d_act = linear_backward(
            &format!("unit{u}.ffn.w2"),
            &c.act,
            c.adapter_mid.get(1),
            &unit.ffn.w2,
            g,
            want_params,
            mode,
            grads,
            meter,
        )?;
        let d_pre = ops::gelu_backward(&c.pre_act, &d_act, meter)?;
        let d_ln = linear_backward(
            &format!("unit{u}.ffn.w1"),
            &c.ln_out,
            c.adapter_mid.first(),
            &unit.ffn.w1,
            &d_pre,
            want_params,
            mode,
            grads,
            meter,
        )?;
        let (dx, dscale, dbias) =
            ops::layer_norm_backward(&d_ln, &unit.ln2.scale, &c.ln, meter)?;
        if want_params {
            let scale_name = format!("unit{u}.ln2.scale");
            if is_trainable(&scale_name, mode) {
                grads.insert(scale_name, dscale);
            }
            let bias_name = format!("unit{u}.ln2.bias");
            if is_trainable(&bias_name, mode) {
                grads.insert(bias_name, dbias);
            }
        }
        Ok(dx)
    }

    /// Exactly-zero gradient entries for every trainable parameter of a
    /// dropped layer.
    fn zero_layer_grads(&self, flat: usize, grads: &mut Gradients) {
        let layer = LayerIndex::from_flat(flat);
        let mode = self.config.mode;
        self.params.visit(&mut |name, t| {
            if layer_of_param(name) == Some(layer) && is_trainable(name, mode) {
                grads.insert(name, Tensor::zeros(t.shape().to_vec()));
            }
        });
    }
}

/// y = x * W (+ x * A * B when an adapter is attached). Returns the adapter
/// mid product for the backward.
fn linear_forward(
    x: &Tensor,
    map: &LinearMap,
    meter: &mut FlopsMeter,
) -> Result<(Tensor, Option<Tensor>)> {
    let base = ops::matmul_forward(x, &map.weight, meter)?;
    match &map.adapter {
        None => Ok((base, None)),
        Some(ad) => {
            let mid = ops::matmul_forward(x, &ad.a, meter)?;
            let extra = ops::matmul_forward(&mid, &ad.b, meter)?;
            let out = ops::add(&base, &extra, meter)?;
            Ok((out, Some(mid)))
        }
    }
}

/// Input gradient of a linear map; parameter gradients are emitted only when
/// requested and trainable, so frozen base weights never materialize one.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    prefix: &str,
    x: &Tensor,
    mid: Option<&Tensor>,
    map: &LinearMap,
    dout: &Tensor,
    want_params: bool,
    mode: TrainMode,
    grads: &mut Gradients,
    meter: &mut FlopsMeter,
) -> Result<Tensor> {
    let mut dx = ops::matmul_grad_left(dout, &map.weight, meter)?;
    if want_params {
        let name = format!("{prefix}.weight");
        if is_trainable(&name, mode) {
            let dw = ops::matmul_grad_right(x, dout, meter)?;
            grads.insert(name, dw);
        }
    }
    if let Some(ad) = &map.adapter {
        let mid = mid.ok_or_else(|| Error::State(format!("{prefix}: adapter mid not cached")))?;
        let dmid = ops::matmul_grad_left(dout, &ad.b, meter)?;
        if want_params {
            let name = format!("{prefix}.adapter_b");
            if is_trainable(&name, mode) {
                let db = ops::matmul_grad_right(mid, dout, meter)?;
                grads.insert(name, db);
            }
        }
        let dx_ad = ops::matmul_grad_left(&dmid, &ad.a, meter)?;
        if want_params {
            let name = format!("{prefix}.adapter_a");
            if is_trainable(&name, mode) {
                let da = ops::matmul_grad_right(x, &dmid, meter)?;
                grads.insert(name, da);
            }
        }
        add_into_backward(&mut dx, &dx_ad, meter)?;
    }
    Ok(dx)
}

/// dst += src, metered as one backward pass.
fn add_into_backward(dst: &mut Tensor, src: &Tensor, meter: &mut FlopsMeter) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Dimension("gradient accumulate shape mismatch".into()));
    }
    for (d, s) in dst.data_mut().iter_mut().zip(src.iter()) {
        *d += s;
    }
    meter.add_backward(flops::add(src.len()));
    Ok(())
}

/// Copy one head's block out of a merged [batch*seq, d_model] tensor.
fn extract_head(x: &Tensor, b: usize, h: usize, seq: usize, dh: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; seq * dh];
    for s in 0..seq {
        let src = (b * seq + s) * d + h * dh;
        out[s * dh..(s + 1) * dh].copy_from_slice(&x.data()[src..src + dh]);
    }
    Tensor::from_parts(vec![seq, dh], out)
}

fn place_head(dst: &mut Tensor, block: &Tensor, b: usize, h: usize, seq: usize, dh: usize, d: usize) {
    for s in 0..seq {
        let at = (b * seq + s) * d + h * dh;
        dst.data_mut()[at..at + dh].copy_from_slice(&block.data()[s * dh..(s + 1) * dh]);
    }
}

/// Rows of one (batch, head) block in a [batch*heads*seq, seq] tensor.
fn extract_prob_block(probs: &Tensor, b: usize, h: usize, heads: usize, seq: usize) -> Tensor {
    let base = (b * heads + h) * seq;
    Tensor::from_parts(
        vec![seq, seq],
        probs.data()[base * seq..(base + seq) * seq].to_vec(),
    )
}
