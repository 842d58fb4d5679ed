//! Transformer forecasting variants built from shared pre-LN blocks, with
//! pluggable positional encodings and attention masks.

use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::features::{self, WindowBatch};
use crate::heads::{self, HeadKind, HeadOutput};
use crate::rng;
use crate::tensor::{trunc_normal, zeros, Graph, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10000.0;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EncDecIms,
    EncDecDms,
    EncoderMean,
    EncoderCls,
    EncoderFlatten,
    MaskedEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEnc {
    DatetimeOnly,
    Sinusoidal,
    Learned,
    Rope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnMask {
    Full,
    FullCausal,
    MaskCausal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub d_kv: usize,
    pub pe: PosEnc,
    pub use_datetime: bool,
    pub attn_mask: AttnMask,
    pub head: HeadKind,
    pub l: usize,
    pub h: usize,
    pub d_y: usize,
    pub d_pd: usize,
}

impl ModelConfig {
    /// Named size presets. `tiny`/`small` are desk-scale additions; the rest
    /// follow the published model-size table.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let (layers, d_model, d_ff, n_heads, d_kv, l, h) = match name {
            "tiny" => (2, 64, 256, 2, 32, 96, 24),
            "small" => (4, 128, 512, 4, 32, 96, 24),
            "base" => (6, 384, 1536, 6, 64, 480, 48),
            "large" => (9, 512, 2048, 8, 64, 480, 48),
            "xlarge" => (12, 768, 3072, 12, 64, 480, 48),
            other => return Err(Error::Config(format!("unknown model preset '{other}'"))),
        };
        Ok(ModelConfig {
            variant: Variant::MaskedEncoder,
            layers,
            d_model,
            d_ff,
            n_heads,
            d_kv,
            pe: PosEnc::Rope,
            use_datetime: true,
            attn_mask: AttnMask::MaskCausal,
            head: HeadKind::StudentT,
            l,
            h,
            d_y: 1,
            d_pd: 0,
        })
    }

    pub fn d_in(&self) -> usize {
        features::input_dim(self.d_y, self.d_pd, self.use_datetime)
    }

    /// Decoder input width for the encoder-decoder variants.
    fn d_dec_in(&self) -> usize {
        let d_z = self.d_in() - self.d_y;
        match self.variant {
            Variant::EncDecIms => self.d_y + d_z,
            Variant::EncDecDms => d_z,
            _ => 0,
        }
    }

    fn is_enc_dec(&self) -> bool {
        matches!(self.variant, Variant::EncDecIms | Variant::EncDecDms)
    }
}

/// Boolean attention mask over `(l+h)^2` positions, row = query.
pub fn build_attention_mask(scheme: AttnMask, l: usize, h: usize) -> Vec<bool> {
    let t = l + h;
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            m[i * t + j] = match scheme {
                AttnMask::Full => true,
                AttnMask::FullCausal => j <= i,
                // bidirectional within the context block; prediction
                // positions see the whole context and are causal among
                // themselves; context never sees the prediction range
                AttnMask::MaskCausal => {
                    if i < l {
                        j < l
                    } else {
                        j < l || j <= i
                    }
                }
            };
        }
    }
    m
}

/// Standard sinusoidal position table for rows `offset..offset+t`.
pub fn sinusoidal_pe<E: Elem>(t: usize, d_model: usize, offset: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(t * d_model);
    for pos in offset..offset + t {
        for c in 0..d_model {
            let i = c / 2;
            let angle = pos as f64 / ROPE_BASE.powf(2.0 * i as f64 / d_model as f64);
            out.push(E::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

fn is_no_decay(name: &str) -> bool {
    name.ends_with(".b")
        || name.ends_with(".bq")
        || name.ends_with(".bk")
        || name.ends_with(".bv")
        || name.ends_with(".bo")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
        || name.contains("ln")
}

/// Create all parameters for a config: truncated-normal (std 0.02) weights,
/// zero biases, unit layer-norm gains. Deterministic under `seed`.
pub fn build_model<E: Elem>(cfg: &ModelConfig, seed: u64) -> ParamStore<E> {
    fn weight<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        shape: Vec<usize>,
        seed: u64,
        counter: &mut u64,
    ) {
        let n = shape.iter().product();
        let mut r = rng::stream(seed, 3, *counter);
        *counter += 1;
        let v = trunc_normal(&mut r, n, 0.02);
        store.add(name, shape, v, !is_no_decay(name));
    }
    fn bias<E: Elem>(store: &mut ParamStore<E>, name: &str, n: usize) {
        store.add(name, vec![n], zeros(n), false);
    }
    fn ln<E: Elem>(store: &mut ParamStore<E>, prefix: &str, n: usize) {
        store.add(&format!("{prefix}.g"), vec![n], vec![E::ONE; n], false);
        store.add(&format!("{prefix}.b"), vec![n], zeros(n), false);
    }
    fn attn_block<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        d: usize,
        hd: usize,
        seed: u64,
        counter: &mut u64,
    ) {
        weight(store, &format!("{prefix}.wq"), vec![d, hd], seed, counter);
        bias(store, &format!("{prefix}.bq"), hd);
        weight(store, &format!("{prefix}.wk"), vec![d, hd], seed, counter);
        bias(store, &format!("{prefix}.bk"), hd);
        weight(store, &format!("{prefix}.wv"), vec![d, hd], seed, counter);
        bias(store, &format!("{prefix}.bv"), hd);
        weight(store, &format!("{prefix}.wo"), vec![hd, d], seed, counter);
        bias(store, &format!("{prefix}.bo"), d);
    }
    fn ff_block<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        d: usize,
        d_ff: usize,
        seed: u64,
        counter: &mut u64,
    ) {
        weight(store, &format!("{prefix}.w1"), vec![d, d_ff], seed, counter);
        bias(store, &format!("{prefix}.b1"), d_ff);
        weight(store, &format!("{prefix}.w2"), vec![d_ff, d], seed, counter);
        bias(store, &format!("{prefix}.b2"), d);
    }

    let mut store = ParamStore::new();
    let mut counter = 0u64;
    let c = &mut counter;
    let d = cfg.d_model;
    let hd = cfg.n_heads * cfg.d_kv;
    let p = cfg.head.params_per_step(cfg.d_y);

    weight(&mut store, "input_proj.w", vec![cfg.d_in(), d], seed, c);
    bias(&mut store, "input_proj.b", d);
    match cfg.variant {
        Variant::MaskedEncoder => weight(&mut store, "mask_embed", vec![d], seed, c),
        Variant::EncoderCls => weight(&mut store, "cls", vec![d], seed, c),
        Variant::EncDecIms | Variant::EncDecDms => {
            weight(&mut store, "dec_proj.w", vec![cfg.d_dec_in(), d], seed, c);
            bias(&mut store, "dec_proj.b", d);
        }
        _ => {}
    }
    if cfg.pe == PosEnc::Learned {
        weight(&mut store, "lpe", vec![cfg.l + cfg.h + 1, d], seed, c);
    }

    for i in 0..cfg.layers {
        let pre = format!("enc.{i}");
        ln(&mut store, &format!("{pre}.ln1"), d);
        attn_block(&mut store, &format!("{pre}.attn"), d, hd, seed, c);
        ln(&mut store, &format!("{pre}.ln2"), d);
        ff_block(&mut store, &format!("{pre}.ff"), d, cfg.d_ff, seed, c);
    }
    if cfg.is_enc_dec() {
        ln(&mut store, "enc_ln", d);
        for i in 0..cfg.layers {
            let pre = format!("dec.{i}");
            ln(&mut store, &format!("{pre}.ln1"), d);
            attn_block(&mut store, &format!("{pre}.attn"), d, hd, seed, c);
            ln(&mut store, &format!("{pre}.ln2"), d);
            attn_block(&mut store, &format!("{pre}.cross"), d, hd, seed, c);
            ln(&mut store, &format!("{pre}.ln3"), d);
            ff_block(&mut store, &format!("{pre}.ff"), d, cfg.d_ff, seed, c);
        }
    }
    ln(&mut store, "final_ln", d);

    match cfg.variant {
        Variant::MaskedEncoder | Variant::EncDecIms | Variant::EncDecDms => {
            weight(&mut store, "head.w", vec![d, p], seed, c);
            bias(&mut store, "head.b", p);
        }
        Variant::EncoderMean | Variant::EncoderCls => {
            weight(&mut store, "head.w", vec![d, cfg.h * p], seed, c);
            bias(&mut store, "head.b", cfg.h * p);
        }
        Variant::EncoderFlatten => {
            weight(&mut store, "head.w", vec![cfg.l * d, cfg.h * p], seed, c);
            bias(&mut store, "head.b", cfg.h * p);
        }
    }
    store
}

pub fn parameter_count(cfg: &ModelConfig) -> usize {
    build_model::<f32>(cfg, 0).total_parameters()
}

fn pvar<E: Elem>(g: &mut Graph<E>, store: &ParamStore<E>, name: &str) -> Var {
    let id = store
        .id_of(name)
        .unwrap_or_else(|| panic!("missing parameter '{name}'"));
    g.param(store, id)
}

fn linear<E: Elem>(g: &mut Graph<E>, store: &ParamStore<E>, x: Var, prefix: &str) -> Var {
    let w = pvar(g, store, &format!("{prefix}.w"));
    let b = pvar(g, store, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add(y, b)
}

fn mask_bias<E: Elem>(g: &mut Graph<E>, mask: &[bool], tq: usize, tk: usize) -> Var {
    debug_assert_eq!(mask.len(), tq * tk);
    let vals: Vec<E> = mask
        .iter()
        .map(|&ok| if ok { E::ZERO } else { E::from_f64(MASK_NEG) })
        .collect();
    g.constant(vals, vec![tq, tk])
}

struct AttnIn<'a> {
    prefix: String,
    /// RoPE positions for queries/keys; None for non-rotary encodings.
    rope: Option<(&'a [usize], &'a [usize])>,
}

fn mha<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    x_q: Var,
    x_kv: Var,
    bias: Var,
    attn: &AttnIn,
) -> Var {
    let (b, tq) = (g.shape(x_q)[0], g.shape(x_q)[1]);
    let tk = g.shape(x_kv)[1];
    let (nh, dk) = (cfg.n_heads, cfg.d_kv);
    let split = |g: &mut Graph<E>, v: Var, t: usize| {
        let r = g.reshape(v, vec![b, t, nh, dk]);
        g.permute(r, &[0, 2, 1, 3])
    };
    let wq = pvar(g, store, &format!("{}.wq", attn.prefix));
    let bq = pvar(g, store, &format!("{}.bq", attn.prefix));
    let wk = pvar(g, store, &format!("{}.wk", attn.prefix));
    let bk = pvar(g, store, &format!("{}.bk", attn.prefix));
    let wv = pvar(g, store, &format!("{}.wv", attn.prefix));
    let bv = pvar(g, store, &format!("{}.bv", attn.prefix));
    let q = g.matmul(x_q, wq);
    let q = g.add(q, bq);
    let k = g.matmul(x_kv, wk);
    let k = g.add(k, bk);
    let v = g.matmul(x_kv, wv);
    let v = g.add(v, bv);
    let mut q = split(g, q, tq);
    let mut k = split(g, k, tk);
    let v = split(g, v, tk);
    if let Some((pos_q, pos_k)) = attn.rope {
        q = g.rope(q, pos_q, ROPE_BASE);
        k = g.rope(k, pos_k, ROPE_BASE);
    }
    let kt = g.transpose_last2(k);
    let scores = g.matmul(q, kt);
    let scores = g.mul_scalar(scores, E::from_f64(1.0 / (dk as f64).sqrt()));
    let scores = g.add(scores, bias);
    let weights = g.softmax(scores, 3);
    let ctx = g.matmul(weights, v);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, vec![b, tq, nh * dk]);
    let wo = pvar(g, store, &format!("{}.wo", attn.prefix));
    let bo = pvar(g, store, &format!("{}.bo", attn.prefix));
    let out = g.matmul(ctx, wo);
    g.add(out, bo)
}

fn layer_norm_p<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    x: Var,
    prefix: &str,
) -> Var {
    let gain = pvar(g, store, &format!("{prefix}.g"));
    let b = pvar(g, store, &format!("{prefix}.b"));
    g.layer_norm(x, gain, b, E::from_f64(LN_EPS))
}

fn ff<E: Elem>(g: &mut Graph<E>, store: &ParamStore<E>, x: Var, prefix: &str) -> Var {
    let w1 = pvar(g, store, &format!("{prefix}.w1"));
    let b1 = pvar(g, store, &format!("{prefix}.b1"));
    let w2 = pvar(g, store, &format!("{prefix}.w2"));
    let b2 = pvar(g, store, &format!("{prefix}.b2"));
    let h = g.matmul(x, w1);
    let h = g.add(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    g.add(h, b2)
}

fn encoder_layer<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    x: Var,
    bias: Var,
    prefix: &str,
    rope: Option<(&[usize], &[usize])>,
) -> Var {
    let h = layer_norm_p(g, store, x, &format!("{prefix}.ln1"));
    let a = mha(
        g,
        store,
        cfg,
        h,
        h,
        bias,
        &AttnIn { prefix: format!("{prefix}.attn"), rope },
    );
    let x = g.add(x, a);
    let h = layer_norm_p(g, store, x, &format!("{prefix}.ln2"));
    let f = ff(g, store, h, &format!("{prefix}.ff"));
    g.add(x, f)
}

/// Run the pre-LN encoder stack (without final layer norm) over `x`
/// (`B x T x d_model`) using the given mask and positions. Exposed for
/// structural probes as well as the forward paths.
pub fn encoder_stack<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    mut x: Var,
    mask: &[bool],
    positions: &[usize],
) -> Var {
    let t = g.shape(x)[1];
    let bias = mask_bias(g, mask, t, t);
    let rope = (cfg.pe == PosEnc::Rope).then_some((positions, positions));
    for i in 0..cfg.layers {
        x = encoder_layer(g, store, cfg, x, bias, &format!("enc.{i}"), rope);
    }
    x
}

/// Additive positional encoding rows for `positions`, or None for
/// datetime-only / rotary configurations.
fn additive_pe<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    positions: &[usize],
) -> Option<Var> {
    match cfg.pe {
        PosEnc::Sinusoidal => {
            let contiguous = positions.windows(2).all(|w| w[1] == w[0] + 1);
            assert!(contiguous, "sinusoidal rows expect contiguous positions");
            let t = positions.len();
            let v = sinusoidal_pe::<E>(t, cfg.d_model, positions[0]);
            Some(g.constant(v, vec![t, cfg.d_model]))
        }
        PosEnc::Learned => {
            let lpe = pvar(g, store, "lpe");
            let max = cfg.l + cfg.h + 1;
            let contiguous = positions.windows(2).all(|w| w[1] == w[0] + 1);
            assert!(contiguous && *positions.last().unwrap() < max, "LPE position range");
            Some(g.narrow(lpe, 0, positions[0], positions.len()))
        }
        PosEnc::DatetimeOnly | PosEnc::Rope => None,
    }
}

fn batch_constant<E: Elem>(g: &mut Graph<E>, data: &[f32], shape: Vec<usize>) -> Var {
    let v: Vec<E> = data.iter().map(|&x| E::from_f64(x as f64)).collect();
    g.constant(v, shape)
}

/// Full forward pass from a sampled batch to head parameters in normalized
/// scale. `mode` only affects `enc_dec_ims` (teacher forcing vs iterative
/// decoding).
pub fn forward<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    mode: ForwardMode,
) -> Result<HeadOutput> {
    if batch.l != cfg.l || batch.h != cfg.h || batch.d_y != cfg.d_y || batch.d_pd != cfg.d_pd {
        return Err(Error::contract(format!(
            "batch geometry (L={}, H={}, d_y={}, d_pd={}) does not match model config \
             (L={}, H={}, d_y={}, d_pd={})",
            batch.l, batch.h, batch.d_y, batch.d_pd, cfg.l, cfg.h, cfg.d_y, cfg.d_pd
        )));
    }
    let assembled = features::assemble_inputs(batch, cfg.use_datetime, Some(cfg.d_in()))?;
    let (b, t, d_in) = (assembled.b, assembled.t, assembled.d_in);
    let x = batch_constant(g, &assembled.data, vec![b, t, d_in]);
    match cfg.variant {
        Variant::MaskedEncoder => forward_masked_encoder(g, store, cfg, x, b),
        Variant::EncoderMean | Variant::EncoderCls | Variant::EncoderFlatten => {
            forward_encoder(g, store, cfg, x, b)
        }
        Variant::EncDecIms | Variant::EncDecDms => forward_enc_dec(g, store, cfg, batch, x, b, mode),
    }
}

fn head_per_position<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    rep: Var,
) -> HeadOutput {
    let raw = linear(g, store, rep, "head");
    heads::project_head(g, raw, cfg.head, cfg.d_y)
}

fn forward_masked_encoder<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    x: Var,
    b: usize,
) -> Result<HeadOutput> {
    let (l, h) = (cfg.l, cfg.h);
    let t = l + h;
    let mut rep = linear(g, store, x, "input_proj");
    // learnable mask embedding added at the prediction positions
    let indicator: Vec<E> = (0..t)
        .map(|p| if p >= l { E::ONE } else { E::ZERO })
        .collect();
    let ind = g.constant(indicator, vec![t, 1]);
    let me = pvar(g, store, "mask_embed");
    let add = g.mul(ind, me);
    rep = g.add(rep, add);
    let positions: Vec<usize> = (0..t).collect();
    if let Some(pe) = additive_pe(g, store, cfg, &positions) {
        rep = g.add(rep, pe);
    }
    let mask = build_attention_mask(cfg.attn_mask, l, h);
    let out = encoder_stack(g, store, cfg, rep, &mask, &positions);
    let out = layer_norm_p(g, store, out, "final_ln");
    let pred = g.narrow(out, 1, l, h);
    let _ = b;
    Ok(head_per_position(g, store, cfg, pred))
}

fn forward_encoder<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    x: Var,
    b: usize,
) -> Result<HeadOutput> {
    let l = cfg.l;
    let ctx = g.narrow(x, 1, 0, l);
    let mut rep = linear(g, store, ctx, "input_proj");
    let cls = cfg.variant == Variant::EncoderCls;
    let positions: Vec<usize> = if cls { (0..=l).collect() } else { (0..l).collect() };
    if cls {
        let c = pvar(g, store, "cls");
        let c = g.reshape(c, vec![1, 1, cfg.d_model]);
        let c = g.broadcast_to(c, vec![b, 1, cfg.d_model]);
        rep = g.concat(&[c, rep], 1);
    }
    if let Some(pe) = additive_pe(g, store, cfg, &positions) {
        rep = g.add(rep, pe);
    }
    let t = positions.len();
    let mut mask = build_attention_mask(cfg.attn_mask, t, 0);
    if cls {
        // the readout token always sees the whole context
        for j in 0..t {
            mask[j] = true;
        }
    }
    let out = encoder_stack(g, store, cfg, rep, &mask, &positions);
    let out = layer_norm_p(g, store, out, "final_ln");
    let pooled = match cfg.variant {
        Variant::EncoderMean => g.mean_axis(out, 1),
        Variant::EncoderCls => {
            let first = g.narrow(out, 1, 0, 1);
            g.reshape(first, vec![b, cfg.d_model])
        }
        Variant::EncoderFlatten => g.reshape(out, vec![b, l * cfg.d_model]),
        _ => unreachable!(),
    };
    let raw = linear(g, store, pooled, "head");
    let p = cfg.head.params_per_step(cfg.d_y);
    let raw = g.reshape(raw, vec![b, cfg.h, p]);
    Ok(heads::project_head(g, raw, cfg.head, cfg.d_y))
}

fn forward_enc_dec<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    x: Var,
    b: usize,
    mode: ForwardMode,
) -> Result<HeadOutput> {
    let (l, h, d_y) = (cfg.l, cfg.h, cfg.d_y);
    // encoder over the context with a bidirectional mask
    let ctx = g.narrow(x, 1, 0, l);
    let mut rep = linear(g, store, ctx, "input_proj");
    let enc_pos: Vec<usize> = (0..l).collect();
    if let Some(pe) = additive_pe(g, store, cfg, &enc_pos) {
        rep = g.add(rep, pe);
    }
    let enc_mask = build_attention_mask(AttnMask::Full, l, 0);
    let mem = encoder_stack(g, store, cfg, rep, &enc_mask, &enc_pos);
    let mem = layer_norm_p(g, store, mem, "enc_ln");

    // covariate channels of the prediction range
    let fut = g.narrow(x, 1, l, h);
    let z = g.narrow(fut, 2, d_y, cfg.d_in() - d_y);

    match cfg.variant {
        Variant::EncDecDms => {
            let out = decode(g, store, cfg, mem, z, h, AttnMask::Full)?;
            Ok(head_per_position(g, store, cfg, out))
        }
        Variant::EncDecIms => match mode {
            ForwardMode::Train => {
                // teacher forcing: decoder input t pairs y_{t-1} with z_t
                let prev = teacher_prev(batch);
                let prev = batch_constant(g, &prev, vec![b, h, d_y]);
                let dec_in = g.concat(&[prev, z], 2);
                let out = decode(g, store, cfg, mem, dec_in, h, AttnMask::FullCausal)?;
                Ok(head_per_position(g, store, cfg, out))
            }
            ForwardMode::Infer => {
                // iterative decoding, feeding back the predicted mean
                let mut prev = vec![0.0f32; b * h * d_y];
                for slot in 0..b {
                    for k in 0..d_y {
                        prev[(slot * h) * d_y + k] =
                            batch.context_targets[(slot * cfg.l + cfg.l - 1) * d_y + k];
                    }
                }
                let mut final_out = None;
                for step in 0..h {
                    let tp = step + 1;
                    let prev_v = batch_constant(g, &prev[..b * tp * d_y], vec![b, tp, d_y]);
                    let z_pfx = g.narrow(z, 1, 0, tp);
                    let dec_in = g.concat(&[prev_v, z_pfx], 2);
                    let out = decode(g, store, cfg, mem, dec_in, tp, AttnMask::FullCausal)?;
                    let head = head_per_position(g, store, cfg, out);
                    if step + 1 < h {
                        let dist = head.to_distribution(g, [b, tp, d_y]);
                        let mean = dist.mean();
                        for slot in 0..b {
                            for k in 0..d_y {
                                prev[(slot * h + step + 1) * d_y + k] =
                                    mean[(slot * tp + step) * d_y + k];
                            }
                        }
                    } else {
                        final_out = Some(head);
                    }
                }
                Ok(final_out.expect("h >= 1"))
            }
        },
        _ => unreachable!(),
    }
}

/// Build a batch-shaped vector of previous targets for teacher forcing:
/// position 0 takes the last context value, the rest shift the future.
fn teacher_prev(batch: &WindowBatch) -> Vec<f32> {
    let (b, l, h, d_y) = (batch.b, batch.l, batch.h, batch.d_y);
    let mut prev = vec![0.0f32; b * h * d_y];
    for slot in 0..b {
        for k in 0..d_y {
            prev[(slot * h) * d_y + k] = batch.context_targets[(slot * l + l - 1) * d_y + k];
            for p in 1..h {
                prev[(slot * h + p) * d_y + k] = batch.future_targets[(slot * h + p - 1) * d_y + k];
            }
        }
    }
    prev
}

fn decode<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    mem: Var,
    dec_in: Var,
    t_dec: usize,
    self_mask: AttnMask,
) -> Result<Var> {
    let l = cfg.l;
    let mut x = linear(g, store, dec_in, "dec_proj");
    let dec_pos: Vec<usize> = (l..l + t_dec).collect();
    if let Some(pe) = additive_pe(g, store, cfg, &dec_pos) {
        x = g.add(x, pe);
    }
    let self_bias = {
        let m = build_attention_mask(self_mask, t_dec, 0);
        mask_bias::<E>(g, &m, t_dec, t_dec)
    };
    let cross_bias = {
        let m = vec![true; t_dec * l];
        mask_bias::<E>(g, &m, t_dec, l)
    };
    let enc_pos: Vec<usize> = (0..l).collect();
    let rope_self = (cfg.pe == PosEnc::Rope).then_some((dec_pos.as_slice(), dec_pos.as_slice()));
    let rope_cross = (cfg.pe == PosEnc::Rope).then_some((dec_pos.as_slice(), enc_pos.as_slice()));
    for i in 0..cfg.layers {
        let pre = format!("dec.{i}");
        let hn = layer_norm_p(g, store, x, &format!("{pre}.ln1"));
        let a = mha(
            g,
            store,
            cfg,
            hn,
            hn,
            self_bias,
            &AttnIn { prefix: format!("{pre}.attn"), rope: rope_self },
        );
        x = g.add(x, a);
        let hn = layer_norm_p(g, store, x, &format!("{pre}.ln2"));
        let c = mha(
            g,
            store,
            cfg,
            hn,
            mem,
            cross_bias,
            &AttnIn { prefix: format!("{pre}.cross"), rope: rope_cross },
        );
        x = g.add(x, c);
        let hn = layer_norm_p(g, store, x, &format!("{pre}.ln3"));
        let f = ff(g, store, hn, &format!("{pre}.ff"));
        x = g.add(x, f);
    }
    Ok(layer_norm_p(g, store, x, "final_ln"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etl::{gen_synthetic, SyntheticParams};
    use crate::features::sample_windows;
    use crate::heads::head_loss;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.l = 32;
        cfg.h = 8;
        cfg
    }

    fn tiny_batch(cfg: &ModelConfig, b: usize, seed: u64) -> WindowBatch {
        let coll = gen_synthetic(4, 200, 5, &SyntheticParams::default());
        sample_windows(&coll, b, cfg.l, cfg.h, seed, 0).unwrap()
    }

    #[test]
    fn preset_counts_match_published_sizes() {
        for (name, expect) in [("base", 10.7e6), ("large", 28.4e6), ("xlarge", 85.1e6)] {
            let cfg = ModelConfig::preset(name).unwrap();
            let n = parameter_count(&cfg) as f64;
            let rel = (n - expect).abs() / expect;
            assert!(rel < 0.03, "{name}: {n} vs {expect} (rel {rel:.4})");
        }
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(ModelConfig::preset("huge"), Err(Error::Config(_))));
    }

    #[test]
    fn decay_mask_partitions_parameters() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = build_model(&cfg, 0);
        let decayed: usize = store.params.iter().filter(|p| p.decay).map(|p| p.numel()).sum();
        let excluded: usize = store.params.iter().filter(|p| !p.decay).map(|p| p.numel()).sum();
        assert_eq!(decayed + excluded, store.total_parameters());
        assert!(decayed > 0 && excluded > 0);
        for p in &store.params {
            if p.name.contains("ln") || p.name.contains(".b") {
                assert!(!p.decay, "{} should not decay", p.name);
            }
        }
    }

    #[test]
    fn mask_shapes() {
        let full = build_attention_mask(AttnMask::Full, 2, 2);
        assert_eq!(full.iter().filter(|&&b| b).count(), 16);
        let causal = build_attention_mask(AttnMask::FullCausal, 2, 2);
        for i in 0..4 {
            let row = &causal[i * 4..(i + 1) * 4];
            assert_eq!(row.iter().filter(|&&b| b).count(), i + 1);
        }
        let mc = build_attention_mask(AttnMask::MaskCausal, 2, 2);
        // context rows never see prediction columns
        assert!(!mc[2] && !mc[3] && !mc[4 + 2] && !mc[4 + 3]);
        // context block bidirectional
        assert!(mc[0] && mc[1] && mc[4] && mc[5]);
        // first prediction row: context + itself
        assert_eq!(&mc[8..12], &[true, true, true, false]);
    }

    #[test]
    fn sinusoidal_pe_basics() {
        let pe: Vec<f64> = sinusoidal_pe(3, 4, 0);
        assert_eq!(pe[0], 0.0); // sin at pos 0
        assert_eq!(pe[1], 1.0); // cos at pos 0
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn masked_encoder_output_shape_and_determinism() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = build_model(&cfg, 7);
        let batch = tiny_batch(&cfg, 3, 1);
        let run = || {
            let mut g = Graph::new();
            let out = forward(&mut g, &store, &cfg, &batch, ForwardMode::Train).unwrap();
            let HeadOutput::StudentT { loc, .. } = &out else { panic!() };
            assert_eq!(g.shape(*loc), &[3, cfg.h, 1]);
            g.value(*loc).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn all_variants_forward_and_train_loss() {
        let base = tiny_cfg();
        let batch = tiny_batch(&base, 2, 3);
        for variant in [
            Variant::MaskedEncoder,
            Variant::EncDecIms,
            Variant::EncDecDms,
            Variant::EncoderMean,
            Variant::EncoderCls,
            Variant::EncoderFlatten,
        ] {
            let cfg = ModelConfig { variant, ..base.clone() };
            let store: ParamStore<f32> = build_model(&cfg, 11);
            let mut g = Graph::new();
            let out = forward(&mut g, &store, &cfg, &batch, ForwardMode::Train).unwrap();
            let y = g.constant(
                batch.future_targets.iter().map(|&v| v).collect(),
                vec![2, cfg.h, 1],
            );
            let loss = head_loss(&mut g, &out, y, 1);
            assert!(g.value(loss)[0].is_finite(), "{variant:?}");
            g.backward(loss).unwrap();
        }
    }

    #[test]
    fn enc_dec_ims_train_matches_infer_under_self_consistency() {
        // if the ground-truth future equals the model's mean forecast, the
        // teacher-forced pass and the iterative pass see the same inputs
        let mut cfg = tiny_cfg();
        cfg.variant = Variant::EncDecIms;
        let store: ParamStore<f32> = build_model(&cfg, 2);
        let mut batch = tiny_batch(&cfg, 1, 9);
        // run inference, then write its mean back as the "ground truth"
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &batch, ForwardMode::Infer).unwrap();
        let infer_mean = out.to_distribution(&g, [1, cfg.h, 1]).mean();
        batch.future_targets = infer_mean.clone();
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &batch, ForwardMode::Train).unwrap();
        let train_mean = out.to_distribution(&g, [1, cfg.h, 1]).mean();
        for (a, b) in infer_mean.iter().zip(&train_mean) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn geometry_mismatch_is_contract_error() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = build_model(&cfg, 0);
        let other = ModelConfig { l: 16, ..cfg.clone() };
        let batch = tiny_batch(&other, 1, 0);
        let mut g = Graph::new();
        assert!(forward(&mut g, &store, &cfg, &batch, ForwardMode::Train).is_err());
    }

    #[test]
    fn causality_under_full_causal_mask() {
        // perturbing the stack input at a later position must not change
        // earlier outputs
        let mut cfg = tiny_cfg();
        cfg.attn_mask = AttnMask::FullCausal;
        cfg.pe = PosEnc::Rope;
        let store: ParamStore<f64> = build_model(&cfg, 3);
        let t = 8;
        let mask = build_attention_mask(AttnMask::FullCausal, t, 0);
        let positions: Vec<usize> = (0..t).collect();
        let base: Vec<f64> = (0..t * cfg.d_model).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |vals: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(vals, vec![1, t, cfg.d_model]);
            let out = encoder_stack(&mut g, &store, &cfg, x, &mask, &positions);
            g.value(out).to_vec()
        };
        let a = run(base.clone());
        let mut perturbed = base.clone();
        for v in &mut perturbed[5 * cfg.d_model..] {
            *v += 3.0;
        }
        let b = run(perturbed);
        for p in 0..5 {
            for c in 0..cfg.d_model {
                let i = p * cfg.d_model + c;
                assert!((a[i] - b[i]).abs() <= 1e-6, "pos {p} changed");
            }
        }
        // and later positions do change
        assert!((a[6 * cfg.d_model] - b[6 * cfg.d_model]).abs() > 1e-9);
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        // datetime-only encoding and no datetime features: permuting context
        // rows leaves prediction-position outputs unchanged
        let mut cfg = tiny_cfg();
        cfg.pe = PosEnc::DatetimeOnly;
        cfg.attn_mask = AttnMask::MaskCausal;
        let store: ParamStore<f64> = build_model(&cfg, 4);
        let (l, h) = (6, 3);
        let t = l + h;
        let mask = build_attention_mask(AttnMask::MaskCausal, l, h);
        let positions: Vec<usize> = (0..t).collect();
        let base: Vec<f64> = (0..t * cfg.d_model).map(|i| (i as f64 * 0.21).cos()).collect();
        let run = |vals: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(vals, vec![1, t, cfg.d_model]);
            let out = encoder_stack(&mut g, &store, &cfg, x, &mask, &positions);
            g.value(out).to_vec()
        };
        let a = run(base.clone());
        let mut shuffled = base.clone();
        shuffled[..l * cfg.d_model].rotate_left(2 * cfg.d_model);
        let b = run(shuffled);
        for p in l..t {
            for c in 0..cfg.d_model {
                let i = p * cfg.d_model + c;
                assert!((a[i] - b[i]).abs() <= 1e-9, "prediction pos {p} changed");
            }
        }
    }

    #[test]
    fn rope_scores_are_shift_invariant() {
        let d = 8;
        let q: Vec<f64> = (0..d).map(|i| (i as f64 * 0.31).sin()).collect();
        let k: Vec<f64> = (0..d).map(|i| (i as f64 * 0.17).cos()).collect();
        let score = |pi: usize, pj: usize| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let qv = g.constant(q.clone(), vec![1, d]);
            let kv = g.constant(k.clone(), vec![1, d]);
            let qr = g.rope(qv, &[pi], ROPE_BASE);
            let kr = g.rope(kv, &[pj], ROPE_BASE);
            let kt = g.transpose_last2(kr);
            let s = g.matmul(qr, kt);
            g.value(s)[0]
        };
        let a = score(7, 3);
        let b = score(7 + 11, 3 + 11);
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }

    #[test]
    fn cls_variant_runs_over_l_plus_one_positions() {
        let cfg = ModelConfig { variant: Variant::EncoderCls, ..tiny_cfg() };
        let store: ParamStore<f32> = build_model(&cfg, 0);
        let batch = tiny_batch(&cfg, 1, 2);
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &batch, ForwardMode::Train).unwrap();
        let HeadOutput::StudentT { loc, .. } = out else { panic!() };
        assert_eq!(g.shape(loc), &[1, cfg.h, 1]);
        // the attention score matrices inside the stack are (L+1)^2
        let want = cfg.l + 1;
        let found = g
            .node_shapes()
            .any(|s| s.len() == 4 && s[2] == want && s[3] == want);
        assert!(found, "no (L+1)x(L+1) score matrix found");
        let leaked = g
            .node_shapes()
            .any(|s| s.len() == 4 && s[2] == cfg.l + cfg.h);
        assert!(!leaked, "encoder variant attended over L+H positions");
    }

    #[test]
    fn flatten_head_dominates_size() {
        let cfg = ModelConfig {
            variant: Variant::EncoderFlatten,
            ..ModelConfig::preset("tiny").unwrap()
        };
        let store: ParamStore<f32> = build_model(&cfg, 0);
        let head = store
            .params
            .iter()
            .find(|p| p.name == "head.w")
            .unwrap()
            .numel();
        assert!(head as f64 > 0.5 * store.total_parameters() as f64);
    }

    #[test]
    fn build_is_deterministic_under_seed() {
        let cfg = tiny_cfg();
        let a: ParamStore<f32> = build_model(&cfg, 42);
        let b: ParamStore<f32> = build_model(&cfg, 42);
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.value, pb.value, "{}", pa.name);
        }
    }
}
