//! Frozen two-tower encoder: a per-frame ViT-style visual tower and a
//! bidirectional text tower. Adapters attach through [`HookSet`].
//!
//! Block layout is pre-norm: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`.
//! Frames are independent inside the visual tower; only an attention
//! override can mix them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Init, ParamSpec, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisualConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    pub mlp_ratio: usize,
}

impl VisualConfig {
    /// `N = H·W / P²`.
    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Tokens per frame including the CLS slot.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("dim_v", self.dim),
            ("heads", self.heads),
            ("patch", self.patch),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("frames", self.frames),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("visual `{k}` must be positive")));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim_v {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl TextConfig {
    /// The last vocabulary id is reserved for the end-of-sentence token.
    pub fn eos(&self) -> usize {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("text tower dimensions must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must hold at least one word and EOS".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim_t {} is not divisible by text heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// One layer's visual features `x` of shape `T×(N+1)×D_v`; token 0 is CLS.
#[derive(Clone, Copy, Debug)]
pub struct LayerFeatures {
    /// Block output before any modulation hook.
    pub block_out: Var,
    /// What feeds the next block (equal to `block_out` without a hook).
    pub x: Var,
}

impl LayerFeatures {
    /// Frame CLS features `f`, shape `T×D_v`.
    pub fn frame_cls(&self, tape: &mut Tape) -> Result<Var> {
        let s = tape.shape(self.x).to_vec();
        let f = tape.narrow(self.x, 1, 0, 1)?;
        tape.reshape(f, &[s[0], s[2]])
    }

    /// Patch features `p`, shape `T×N×D_v`.
    pub fn patches(&self, tape: &mut Tape) -> Result<Var> {
        let n = tape.shape(self.x)[1] - 1;
        tape.narrow(self.x, 1, 1, n)
    }
}

/// Frozen attention projections of one block, bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub heads: usize,
}

impl AttentionWeights {
    /// `(x·W_q, x·W_k, x·W_v)`.
    pub fn qkv(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
        Ok((
            tape.matmul(x, self.wq)?,
            tape.matmul(x, self.wk)?,
            tape.matmul(x, self.wv)?,
        ))
    }
}

/// Replaceable attention inside a block. Receives the block input and its
/// layer-normed copy (both `T×S×D`) and returns the attention context before
/// the output projection.
pub trait AttentionOp {
    fn attend(&self, tape: &mut Tape, layer: usize, input: Var, normed: Var, weights: &AttentionWeights)
        -> Result<Var>;
}

/// Post-block feature transform (the modulation hook point).
pub trait FeatureHook {
    fn apply(&self, tape: &mut Tape, layer: usize, x: Var) -> Result<Var>;
}

/// Plain multi-head scaled dot-product self-attention.
#[derive(Clone, Copy, Debug, Default)]
pub struct VanillaAttention;

impl AttentionOp for VanillaAttention {
    fn attend(
        &self,
        tape: &mut Tape,
        _layer: usize,
        _input: Var,
        normed: Var,
        weights: &AttentionWeights,
    ) -> Result<Var> {
        let (q, k, v) = weights.qkv(tape, normed)?;
        multi_head_attention(tape, q, k, v, weights.heads)
    }
}

/// `softmax(q·kᵀ/√d_h)·v` per head over the last axis, heads concatenated.
/// Inputs are `B×S×D` with the batch axis treated independently.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = *tape.shape(q).last().ok_or_else(|| Error::dim("attention", &[], &[]))?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let axis = tape.shape(q).len() - 1;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.narrow(q, axis, h * dh, dh)?,
                tape.narrow(k, axis, h * dh, dh)?,
                tape.narrow(v, axis, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax(scores, axis)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, axis)
    }
}

/// Layer-indexed adapter attachments. Layers are 1-based.
#[derive(Default)]
pub struct HookSet<'a> {
    modulators: BTreeMap<usize, &'a dyn FeatureHook>,
    attention: BTreeMap<usize, &'a dyn AttentionOp>,
}

impl<'a> HookSet<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn modulate(&mut self, layer: usize, hook: &'a dyn FeatureHook) -> &mut Self {
        self.modulators.insert(layer, hook);
        self
    }

    pub fn attend(&mut self, layer: usize, op: &'a dyn AttentionOp) -> &mut Self {
        self.attention.insert(layer, op);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.modulators.is_empty() && self.attention.is_empty()
    }

    fn validate(&self, layers: usize) -> Result<()> {
        let bad = self
            .modulators
            .keys()
            .chain(self.attention.keys())
            .find(|&&l| l == 0 || l > layers);
        match bad {
            Some(l) => Err(Error::Config(format!("hook layer {l} outside [1, {layers}]"))),
            None => Ok(()),
        }
    }
}

/// Output of the visual tower.
#[derive(Clone, Debug)]
pub struct VideoFeatures {
    pub layers: Vec<LayerFeatures>,
    /// Final-layer frame CLS sequence `f^L`, `T×D_v`.
    pub frame_cls: Var,
}

/// Output of the text tower.
#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// Per-layer sentence (EOS) features `w^l`, each `1×D_t`, after hooks.
    pub layers: Vec<Var>,
    /// Final sentence feature, `1×D_t`.
    pub feature: Var,
}

fn block_specs(prefix: &str, dim: usize, mlp: usize) -> Vec<ParamSpec> {
    let s = 1.0 / (dim as f64).sqrt();
    let hidden = dim * mlp;
    let frozen = |n: &str, shape: &[usize], init| ParamSpec::new(format!("{prefix}.{n}"), shape, false, init);
    vec![
        frozen("attn.wq", &[dim, dim], Init::Normal(s)),
        frozen("attn.wk", &[dim, dim], Init::Normal(s)),
        frozen("attn.wv", &[dim, dim], Init::Normal(s)),
        frozen("attn.wo", &[dim, dim], Init::Normal(0.5 * s)),
        frozen("mlp.w1", &[dim, hidden], Init::Normal(s)),
        frozen("mlp.b1", &[hidden], Init::Normal(0.02)),
        frozen("mlp.w2", &[hidden, dim], Init::Normal(0.5 / (hidden as f64).sqrt())),
        frozen("mlp.b2", &[dim], Init::Normal(0.02)),
    ]
}

/// The frozen encoder pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backbone {
    pub visual: VisualConfig,
    pub text: TextConfig,
}

impl Backbone {
    pub fn new(visual: VisualConfig, text: TextConfig) -> Result<Self> {
        visual.validate()?;
        text.validate()?;
        Ok(Self { visual, text })
    }

    pub fn visual_block_prefix(layer: usize) -> String {
        format!("visual.block{layer}")
    }

    pub fn text_block_prefix(layer: usize) -> String {
        format!("text.block{layer}")
    }

    /// Declarations of every backbone weight, all frozen.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let v = &self.visual;
        let t = &self.text;
        let ppc = v.patch * v.patch * v.channels;
        let mut specs = vec![
            ParamSpec::new(
                "visual.patch_proj",
                &[ppc, v.dim],
                false,
                Init::Normal(1.0 / (ppc as f64).sqrt()),
            ),
            ParamSpec::new("visual.cls", &[v.dim], false, Init::Normal(0.5)),
            ParamSpec::new("visual.pos", &[v.tokens(), v.dim], false, Init::Normal(0.1)),
        ];
        for l in 1..=v.layers {
            specs.extend(block_specs(&Self::visual_block_prefix(l), v.dim, v.mlp_ratio));
        }
        specs.push(ParamSpec::new(
            "text.tok_emb",
            &[t.vocab, t.dim],
            false,
            Init::Normal(1.0),
        ));
        specs.push(ParamSpec::new(
            "text.pos",
            &[t.max_len, t.dim],
            false,
            Init::Normal(0.1),
        ));
        for l in 1..=t.layers {
            specs.extend(block_specs(&Self::text_block_prefix(l), t.dim, t.mlp_ratio));
        }
        specs
    }

    /// Flags every backbone entry frozen.
    pub fn freeze(store: &mut ParamStore) {
        store.freeze_prefix("visual.");
        store.freeze_prefix("text.");
    }

    /// Splits each frame into row-major `P×P` patches, projects them to
    /// `D_v`, prepends CLS and adds positional embeddings. Input is `T×H×W×C`.
    pub fn patchify(&self, store: &ParamStore, video: &Tensor) -> Result<Tensor> {
        let v = &self.visual;
        let s = video.shape();
        if s.len() != 4 {
            return Err(Error::Input(format!("video must be T×H×W×C, got {s:?}")));
        }
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % v.patch != 0 || w % v.patch != 0 {
            return Err(Error::Config(format!(
                "frame {h}x{w} is not divisible by patch size {}",
                v.patch
            )));
        }
        if (t, h, w, c) != (v.frames, v.height, v.width, v.channels) {
            return Err(Error::Input(format!(
                "video shape {s:?} does not match config [{}, {}, {}, {}]",
                v.frames, v.height, v.width, v.channels
            )));
        }
        let p = v.patch;
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let ppc = p * p * c;
        let d = v.dim;
        let proj = store.get("visual.patch_proj")?.data();
        let cls = store.get("visual.cls")?.data();
        let pos = store.get("visual.pos")?.data();
        let px = video.data();
        let mut out = vec![0.0; t * (n + 1) * d];
        let mut patch = vec![0.0; ppc];
        for ti in 0..t {
            let frame = &mut out[ti * (n + 1) * d..(ti + 1) * (n + 1) * d];
            frame[..d].copy_from_slice(cls);
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut idx = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            let base = ((ti * h + gy * p + dy) * w + gx * p + dx) * c;
                            patch[idx..idx + c].copy_from_slice(&px[base..base + c]);
                            idx += c;
                        }
                    }
                    let tok = &mut frame[(1 + gy * gw + gx) * d..(2 + gy * gw + gx) * d];
                    for (k, &pv) in patch.iter().enumerate() {
                        if pv != 0.0 {
                            for (o, &wv) in tok.iter_mut().zip(&proj[k * d..(k + 1) * d]) {
                                *o += pv * wv;
                            }
                        }
                    }
                }
            }
            for (o, &e) in frame.iter_mut().zip(pos) {
                *o += e;
            }
        }
        Tensor::new(&[t, n + 1, d], out)
    }

    /// One pre-norm transformer block over `B×S×D` with an injected attention.
    pub fn vit_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        heads: usize,
        layer: usize,
        x: Var,
        attention: &dyn AttentionOp,
    ) -> Result<Var> {
        let p = |n: &str| format!("{prefix}.{n}");
        let weights = AttentionWeights {
            wq: tape.param(store, &p("attn.wq"))?,
            wk: tape.param(store, &p("attn.wk"))?,
            wv: tape.param(store, &p("attn.wv"))?,
            heads,
        };
        let wo = tape.param(store, &p("attn.wo"))?;
        let normed = tape.layer_norm(x)?;
        let ctx = attention.attend(tape, layer, x, normed, &weights)?;
        let attn_out = tape.matmul(ctx, wo)?;
        let x = tape.add(x, attn_out)?;

        let w1 = tape.param(store, &p("mlp.w1"))?;
        let b1 = tape.param(store, &p("mlp.b1"))?;
        let w2 = tape.param(store, &p("mlp.w2"))?;
        let b2 = tape.param(store, &p("mlp.b2"))?;
        let h = tape.layer_norm(x)?;
        let h = tape.matmul(h, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add(h, b2)?;
        tape.add(x, h)
    }

    /// Runs the visual tower. After each block the layer's modulation hook
    /// (if any) transforms the output before it feeds the next block.
    pub fn encode_video(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        video: &Tensor,
        hooks: &HookSet<'_>,
    ) -> Result<VideoFeatures> {
        hooks.validate(self.visual.layers)?;
        let embedded = self.patchify(store, video)?;
        let mut x = tape.constant(embedded);
        let mut layers = Vec::with_capacity(self.visual.layers);
        for l in 1..=self.visual.layers {
            let attention: &dyn AttentionOp = match hooks.attention.get(&l) {
                Some(op) => *op,
                None => &VanillaAttention,
            };
            let prefix = Self::visual_block_prefix(l);
            let block_out = self.vit_block(tape, store, &prefix, self.visual.heads, l, x, attention)?;
            x = match hooks.modulators.get(&l) {
                Some(hook) => hook.apply(tape, l, block_out)?,
                None => block_out,
            };
            layers.push(LayerFeatures { block_out, x });
        }
        let frame_cls = layers.last().expect("at least one layer").frame_cls(tape)?;
        Ok(VideoFeatures { layers, frame_cls })
    }

    /// Runs the text tower over `tokens` with EOS appended. Hooks receive the
    /// whole `1×S×D_t` sequence and are expected to touch only the EOS slot.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        hooks: &HookSet<'_>,
    ) -> Result<TextFeatures> {
        let t = &self.text;
        hooks.validate(t.layers)?;
        if tokens.len() + 1 > t.max_len {
            return Err(Error::Input(format!(
                "caption of {} tokens plus EOS exceeds max length {}",
                tokens.len(),
                t.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= t.eos()) {
            return Err(Error::Input(format!(
                "token id {bad} outside word range [0, {})",
                t.eos()
            )));
        }
        let emb = store.get("text.tok_emb")?.data();
        let pos = store.get("text.pos")?.data();
        let d = t.dim;
        let len = tokens.len() + 1;
        let mut data = Vec::with_capacity(len * d);
        for (i, &id) in tokens.iter().chain(std::iter::once(&t.eos())).enumerate() {
            data.extend(
                emb[id * d..(id + 1) * d]
                    .iter()
                    .zip(&pos[i * d..(i + 1) * d])
                    .map(|(a, b)| a + b),
            );
        }
        let mut x = tape.constant(Tensor::new(&[1, len, d], data)?);
        let mut layers = Vec::with_capacity(t.layers);
        for l in 1..=t.layers {
            let attention: &dyn AttentionOp = match hooks.attention.get(&l) {
                Some(op) => *op,
                None => &VanillaAttention,
            };
            let prefix = Self::text_block_prefix(l);
            x = self.vit_block(tape, store, &prefix, t.heads, l, x, attention)?;
            if let Some(hook) = hooks.modulators.get(&l) {
                x = hook.apply(tape, l, x)?;
            }
            let eos = tape.narrow(x, 1, len - 1, 1)?;
            layers.push(tape.reshape(eos, &[1, d])?);
        }
        let feature = *layers.last().expect("at least one layer");
        Ok(TextFeatures { layers, feature })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::Rng;

    pub fn toy() -> Backbone {
        Backbone::new(
            VisualConfig {
                layers: 2,
                dim: 8,
                heads: 2,
                patch: 2,
                height: 4,
                width: 4,
                channels: 1,
                frames: 3,
                mlp_ratio: 2,
            },
            TextConfig {
                layers: 2,
                dim: 6,
                heads: 2,
                vocab: 10,
                max_len: 6,
                mlp_ratio: 2,
            },
        )
        .unwrap()
    }

    pub fn store_for(b: &Backbone, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        s.allocate(&b.param_specs(), &mut Rng::new(seed)).unwrap();
        s
    }

    fn random_video(b: &Backbone, seed: u64) -> Tensor {
        let v = &b.visual;
        let mut rng = Rng::new(seed);
        let shape = [v.frames, v.height, v.width, v.channels];
        Tensor::new(&shape, rng.normal_vec(shape.iter().product(), 1.0)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut v = toy().visual;
        v.height = 5;
        assert!(matches!(v.validate(), Err(Error::Config(_))));
        let mut v = toy().visual;
        v.heads = 3;
        assert!(v.validate().is_err());
    }

    #[test]
    fn patchify_zero_video_gives_cls_everywhere() {
        let b = toy();
        let mut s = store_for(&b, 1);
        for name in ["visual.patch_proj", "visual.pos"] {
            s.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let v = &b.visual;
        let video = Tensor::zeros(&[v.frames, v.height, v.width, v.channels]);
        let out = b.patchify(&s, &video).unwrap();
        let cls = s.get("visual.cls").unwrap().data().to_vec();
        assert_eq!(out.shape(), &[3, 5, 8]);
        for (i, tok) in out.data().chunks(8).enumerate() {
            if i % 5 == 0 {
                assert_eq!(tok, cls);
            } else {
                assert!(tok.iter().all(|&v| v == 0.0));
            }
        }
        // With a zero CLS init every token equals it.
        s.get_mut("visual.cls").unwrap().data_mut().fill(0.0);
        let out = b.patchify(&s, &video).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_single_patch_shape() {
        let mut b = toy();
        b.visual.frames = 1;
        b.visual.height = 2;
        b.visual.width = 2;
        let s = store_for(&b, 2);
        let out = b.patchify(&s, &Tensor::ones(&[1, 2, 2, 1])).unwrap();
        assert_eq!(out.shape(), &[1, 2, 8]);
    }

    #[test]
    fn patchify_row_major_order() {
        let mut b = toy();
        b.visual.frames = 1;
        b.visual.height = 2;
        b.visual.width = 2;
        b.visual.patch = 1;
        b.visual.dim = 2;
        b.visual.heads = 1;
        let mut s = store_for(&b, 3);
        // Projection [1, 0]: token value lands in coordinate 0.
        s.get_mut("visual.patch_proj")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 0.0]);
        s.get_mut("visual.pos").unwrap().data_mut().fill(0.0);
        s.get_mut("visual.cls").unwrap().data_mut().fill(0.0);
        let video = Tensor::new(&[1, 2, 2, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let out = b.patchify(&s, &video).unwrap();
        let firsts: Vec<f64> = out.data().chunks(2).map(|c| c[0]).collect();
        assert_eq!(firsts, [0.0, 10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let b = toy();
        let mut s = store_for(&b, 4);
        for (name, t) in s.iter_mut() {
            if name.starts_with("visual.block1.") {
                t.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let x0 = Tensor::from_fn(&[3, 5, 8], |i| (i as f64 * 0.37).sin());
        let x = tape.constant(x0.clone());
        let y = b
            .vit_block(&mut tape, &s, "visual.block1", 2, 1, x, &VanillaAttention)
            .unwrap();
        assert!(tape.value(y).bit_eq(&x0));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut tape = Tape::new();
        let v = Tensor::new(&[1, 1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let q = tape.constant(Tensor::new(&[1, 1, 4], vec![5.0, 1.0, -1.0, 2.0]).unwrap());
        let k = tape.constant(Tensor::new(&[1, 1, 4], vec![0.3, 0.2, 0.1, 0.0]).unwrap());
        let vv = tape.constant(v.clone());
        let out = multi_head_attention(&mut tape, q, k, vv, 1).unwrap();
        assert!(tape.value(out).bit_eq(&v));
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = Rng::new(9);
        let (s, d) = (3, 4);
        let q: Vec<f64> = rng.normal_vec(s * d, 1.0);
        let k: Vec<f64> = rng.normal_vec(s * d, 1.0);
        let v: Vec<f64> = rng.normal_vec(s * d, 1.0);
        let mut tape = Tape::new();
        let qv = tape.constant(Tensor::new(&[1, s, d], q.clone()).unwrap());
        let kv = tape.constant(Tensor::new(&[1, s, d], k.clone()).unwrap());
        let vv = tape.constant(Tensor::new(&[1, s, d], v.clone()).unwrap());
        let out = multi_head_attention(&mut tape, qv, kv, vv, 2).unwrap();
        let got = tape.value(out).data().to_vec();
        // Loop oracle, two heads of width 2.
        let dh = 2;
        for h in 0..2 {
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
                for c in 0..dh {
                    let want: f64 = (0..s).map(|j| (scores[j] - m).exp() / z * v[j * d + h * dh + c]).sum();
                    assert!((got[i * d + h * dh + c] - want).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn encode_video_is_pure_and_shaped() {
        let b = toy();
        let s = store_for(&b, 5);
        let video = random_video(&b, 6);
        let run = || {
            let mut tape = Tape::new();
            let f = b.encode_video(&mut tape, &s, &video, &HookSet::new()).unwrap();
            let shapes: Vec<Vec<usize>> = f.layers.iter().map(|l| tape.shape(l.x).to_vec()).collect();
            (tape.value(f.frame_cls).clone(), shapes)
        };
        let (a, shapes) = run();
        let (b2, _) = run();
        assert!(a.bit_eq(&b2));
        assert_eq!(shapes, vec![vec![3, 5, 8]; 2]);
    }

    #[test]
    fn frames_are_processed_independently() {
        let b = toy();
        let s = store_for(&b, 7);
        let video = random_video(&b, 8);
        let frame_len = video.numel() / 3;
        let perm = [2usize, 0, 1];
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(&video.data()[p * frame_len..(p + 1) * frame_len]);
        }
        let permuted = Tensor::new(video.shape(), permuted).unwrap();
        let enc = |v: &Tensor| {
            let mut tape = Tape::new();
            let f = b.encode_video(&mut tape, &s, v, &HookSet::new()).unwrap();
            tape.value(f.frame_cls).clone()
        };
        let (a, p) = (enc(&video), enc(&permuted));
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(p.row(i), a.row(src));
        }
    }

    #[test]
    fn hook_layer_out_of_range() {
        struct Nop;
        impl FeatureHook for Nop {
            fn apply(&self, _: &mut Tape, _: usize, x: Var) -> Result<Var> {
                Ok(x)
            }
        }
        let b = toy();
        let s = store_for(&b, 1);
        let mut hooks = HookSet::new();
        hooks.modulate(3, &Nop);
        let mut tape = Tape::new();
        let r = b.encode_video(&mut tape, &s, &random_video(&b, 1), &hooks);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn text_tower_cases() {
        let b = toy();
        let s = store_for(&b, 11);
        let mut tape = Tape::new();
        let empty = b.encode_text(&mut tape, &s, &[], &HookSet::new()).unwrap();
        assert_eq!(tape.shape(empty.feature), &[1, 6]);
        assert_eq!(empty.layers.len(), 2);

        let a = b.encode_text(&mut tape, &s, &[1, 2, 3], &HookSet::new()).unwrap();
        let c = b.encode_text(&mut tape, &s, &[1, 2, 3], &HookSet::new()).unwrap();
        assert!(tape.value(a.feature).bit_eq(tape.value(c.feature)));

        let too_long = b.encode_text(&mut tape, &s, &[1; 6], &HookSet::new());
        assert!(matches!(too_long, Err(Error::Input(_))));
        let reserved = b.encode_text(&mut tape, &s, &[9], &HookSet::new());
        assert!(matches!(reserved, Err(Error::Input(_))));
    }

    #[test]
    fn freeze_marks_everything() {
        let b = toy();
        let mut s = ParamStore::new();
        let specs: Vec<ParamSpec> = b
            .param_specs()
            .into_iter()
            .map(|mut p| {
                p.trainable = true;
                p
            })
            .collect();
        s.allocate(&specs, &mut Rng::new(0)).unwrap();
        Backbone::freeze(&mut s);
        assert_eq!(s.trainable_count(), 0);
    }
}
