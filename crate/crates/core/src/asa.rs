//! Asynchronous self-attention.
//!
//! For each frame a few patches are selected (by text relevance, by
//! similarity to the frame's CLS token, at random, or all of them). Keys and
//! values of the selected patches are resampled from neighbouring frames and
//! patch positions using two learnable offset vectors shared by every layer:
//! `delta` (one entry per frame) and `gamma` (one entry per patch index).
//! Unselected patches and the CLS token keep their own keys and values.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{multi_head_attention, AttentionOp, AttentionWeights};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::{mix, CustomOp, Init, ParamSpec, ParamStore, Rng, Tape, Tensor, Var};

pub const GAMMA: &str = "asa.gamma";
pub const DELTA: &str = "asa.delta";

/// Default number of selected patches per frame.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectionMode {
    TextTopK,
    TextBottomK,
    VisionTopK,
    VisionBottomK,
    Random,
    None,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 6] = [
        SelectionMode::None,
        SelectionMode::Random,
        SelectionMode::VisionBottomK,
        SelectionMode::VisionTopK,
        SelectionMode::TextBottomK,
        SelectionMode::TextTopK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::TextTopK => "text-top-k",
            SelectionMode::TextBottomK => "text-bottom-k",
            SelectionMode::VisionTopK => "vision-top-k",
            SelectionMode::VisionBottomK => "vision-bottom-k",
            SelectionMode::Random => "random",
            SelectionMode::None => "none",
        }
    }

    pub fn needs_text(self) -> bool {
        matches!(self, SelectionMode::TextTopK | SelectionMode::TextBottomK)
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown selection mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WarpAxes {
    Both,
    TemporalOnly,
    SpatialOnly,
}

impl WarpAxes {
    pub const ALL: [WarpAxes; 3] = [WarpAxes::TemporalOnly, WarpAxes::SpatialOnly, WarpAxes::Both];

    pub fn name(self) -> &'static str {
        match self {
            WarpAxes::Both => "both",
            WarpAxes::TemporalOnly => "temporal",
            WarpAxes::SpatialOnly => "spatial",
        }
    }

    pub fn temporal(self) -> bool {
        self != WarpAxes::SpatialOnly
    }

    pub fn spatial(self) -> bool {
        self != WarpAxes::TemporalOnly
    }
}

impl FromStr for WarpAxes {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown warp axes `{s}`")))
    }
}

/// How fractional sample coordinates are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sampling {
    Bilinear,
    /// Round to the nearest grid point; offsets receive the bilinear
    /// gradient (straight-through).
    Nearest,
}

impl FromStr for Sampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Sampling::Bilinear),
            "nearest" => Ok(Sampling::Nearest),
            _ => Err(Error::Config(format!("unknown sampling `{s}`"))),
        }
    }
}

impl Sampling {
    pub fn name(self) -> &'static str {
        match self {
            Sampling::Bilinear => "bilinear",
            Sampling::Nearest => "nearest",
        }
    }
}

/// Per-frame selected patch indices (0-based, rank order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSelection {
    pub frames: Vec<Vec<usize>>,
    pub patches: usize,
    /// Set when every patch is selected because selection is disabled.
    pub warp_all: bool,
}

impl PatchSelection {
    pub fn all(frames: usize, patches: usize) -> Self {
        Self {
            frames: vec![(0..patches).collect(); frames],
            patches,
            warp_all: true,
        }
    }

    /// Dense `T·N` membership mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.frames.len() * self.patches];
        for (t, set) in self.frames.iter().enumerate() {
            for &n in set {
                m[t * self.patches + n] = true;
            }
        }
        m
    }
}

/// Everything a selector may look at for one layer. Features are values
/// only; selection carries no gradient.
pub struct SelectionInput<'a> {
    /// `T×N×D_v` patch features entering the layer.
    pub patches: &'a Tensor,
    /// `T×D_v` frame CLS features entering the layer.
    pub cls: &'a Tensor,
    /// `1×D_t` selected sentence feature, required by text modes.
    pub sentence: Option<&'a Tensor>,
    /// `D_v×D_t` projection.
    pub proj: &'a Tensor,
    pub k: usize,
    pub layer: usize,
    pub seed: u64,
}

pub trait PatchSelector: Send + Sync {
    fn mode(&self) -> SelectionMode;
    fn select(&self, input: &SelectionInput<'_>) -> Result<PatchSelection>;
}

/// Indices of the `k` largest (or smallest) scores; ties go to the lower
/// index.
pub fn rank_indices(scores: &[f64], k: usize, largest: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        let ord = if largest { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn dims(input: &SelectionInput<'_>) -> Result<(usize, usize, usize)> {
    let s = input.patches.shape();
    if s.len() != 3 {
        return Err(Error::dim("select_patches", s, &[0, 0, 0]));
    }
    if input.k > s[1] {
        return Err(Error::Config(format!("top-k {} exceeds {} patches", input.k, s[1])));
    }
    Ok((s[0], s[1], s[2]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `proj · w` as a `D_v` vector, so that `Proj(u)·w = u·(proj·w)`.
fn pulled_back_query(proj: &Tensor, w: &Tensor) -> Result<Vec<f64>> {
    let (dv, dt) = (proj.shape()[0], proj.shape()[1]);
    if w.numel() != dt {
        return Err(Error::dim("select_patches", proj.shape(), w.shape()));
    }
    Ok((0..dv).map(|i| dot(proj.row(i), w.data())).collect())
}

struct TextSelector {
    largest: bool,
}

impl PatchSelector for TextSelector {
    fn mode(&self) -> SelectionMode {
        if self.largest {
            SelectionMode::TextTopK
        } else {
            SelectionMode::TextBottomK
        }
    }

    fn select(&self, input: &SelectionInput<'_>) -> Result<PatchSelection> {
        let (t, n, d) = dims(input)?;
        let w = input
            .sentence
            .ok_or_else(|| Error::Contract("text-conditioned selection without a sentence".into()))?;
        let query = pulled_back_query(input.proj, w)?;
        let data = input.patches.data();
        let frames = (0..t)
            .map(|ti| {
                let scores: Vec<f64> = (0..n)
                    .map(|ni| dot(&data[(ti * n + ni) * d..(ti * n + ni + 1) * d], &query))
                    .collect();
                rank_indices(&scores, input.k, self.largest)
            })
            .collect();
        Ok(PatchSelection {
            frames,
            patches: n,
            warp_all: false,
        })
    }
}

struct VisionSelector {
    largest: bool,
}

impl PatchSelector for VisionSelector {
    fn mode(&self) -> SelectionMode {
        if self.largest {
            SelectionMode::VisionTopK
        } else {
            SelectionMode::VisionBottomK
        }
    }

    fn select(&self, input: &SelectionInput<'_>) -> Result<PatchSelection> {
        let (t, n, d) = dims(input)?;
        let data = input.patches.data();
        let frames = (0..t)
            .map(|ti| {
                let cls = input.cls.row(ti);
                let scores: Vec<f64> = (0..n)
                    .map(|ni| dot(&data[(ti * n + ni) * d..(ti * n + ni + 1) * d], cls))
                    .collect();
                rank_indices(&scores, input.k, self.largest)
            })
            .collect();
        Ok(PatchSelection {
            frames,
            patches: n,
            warp_all: false,
        })
    }
}

struct RandomSelector;

impl PatchSelector for RandomSelector {
    fn mode(&self) -> SelectionMode {
        SelectionMode::Random
    }

    fn select(&self, input: &SelectionInput<'_>) -> Result<PatchSelection> {
        let (t, n, _) = dims(input)?;
        let frames = (0..t)
            .map(|ti| {
                let mut rng = Rng::new(mix(mix(input.seed, input.layer as u64), ti as u64));
                let mut idx: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut idx);
                idx.truncate(input.k);
                idx
            })
            .collect();
        Ok(PatchSelection {
            frames,
            patches: n,
            warp_all: false,
        })
    }
}

struct AllSelector;

impl PatchSelector for AllSelector {
    fn mode(&self) -> SelectionMode {
        SelectionMode::None
    }

    fn select(&self, input: &SelectionInput<'_>) -> Result<PatchSelection> {
        let (t, n, _) = dims(input)?;
        Ok(PatchSelection::all(t, n))
    }
}

pub fn selector_registry() -> Registry<dyn PatchSelector> {
    let mut r: Registry<dyn PatchSelector> = Registry::new("selection mode");
    r.register("text-top-k", |_| Box::new(TextSelector { largest: true }))
        .register("text-bottom-k", |_| Box::new(TextSelector { largest: false }))
        .register("vision-top-k", |_| Box::new(VisionSelector { largest: true }))
        .register("vision-bottom-k", |_| Box::new(VisionSelector { largest: false }))
        .register("random", |_| Box::new(RandomSelector))
        .register("none", |_| Box::new(AllSelector));
    r
}

pub fn select_patches(mode: SelectionMode, input: &SelectionInput<'_>) -> Result<PatchSelection> {
    selector_registry().create(mode.name(), &())?.select(input)
}

/// Offset parameter declarations: `gamma` `N×1`, `delta` `T×1`, both zero.
/// An axis excluded by `axes` is declared frozen.
pub fn offset_specs(frames: usize, patches: usize, axes: WarpAxes) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(DELTA, &[frames, 1], axes.temporal(), Init::Zeros),
        ParamSpec::new(GAMMA, &[patches, 1], axes.spatial(), Init::Zeros),
    ]
}

/// One resolved sample: up to four weighted grid reads plus the partial
/// derivatives of the sampled value with respect to each coordinate.
struct Sample {
    t0: usize,
    t1: usize,
    n0: usize,
    n1: usize,
    ft: f64,
    fn_: f64,
    /// Whether the raw coordinate lies strictly inside the clamp range.
    live_t: bool,
    live_n: bool,
}

impl Sample {
    fn resolve(raw_t: f64, raw_n: f64, frames: usize, patches: usize) -> Sample {
        let (t0, t1, ft, live_t) = axis_cell(raw_t, frames);
        let (n0, n1, fn_, live_n) = axis_cell(raw_n, patches);
        Sample {
            t0,
            t1,
            n0,
            n1,
            ft,
            fn_,
            live_t,
            live_n,
        }
    }

    /// `(index, weight)` reads in a fixed order; zero-weight reads are
    /// omitted so integer coordinates copy exactly.
    fn reads(&self, sampling: Sampling) -> Vec<((usize, usize), f64)> {
        match sampling {
            Sampling::Nearest => {
                let t = if self.ft >= 0.5 { self.t1 } else { self.t0 };
                let n = if self.fn_ >= 0.5 { self.n1 } else { self.n0 };
                vec![((t, n), 1.0)]
            }
            Sampling::Bilinear => {
                let mut r = vec![((self.t0, self.n0), (1.0 - self.ft) * (1.0 - self.fn_))];
                if self.fn_ > 0.0 {
                    r.push(((self.t0, self.n1), (1.0 - self.ft) * self.fn_));
                }
                if self.ft > 0.0 {
                    r.push(((self.t1, self.n0), self.ft * (1.0 - self.fn_)));
                    if self.fn_ > 0.0 {
                        r.push(((self.t1, self.n1), self.ft * self.fn_));
                    }
                }
                r
            }
        }
    }
}

/// Clamps `raw` to `[0, len-1]` and returns the enclosing cell.
fn axis_cell(raw: f64, len: usize) -> (usize, usize, f64, bool) {
    let hi = (len - 1) as f64;
    let live = raw > 0.0 && raw < hi;
    let c = raw.clamp(0.0, hi);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    let f = if i1 == i0 { 0.0 } else { c - i0 as f64 };
    (i0, i1, f, live)
}

/// Resamples selected `(t, n)` rows of a `T×N×D` field at
/// `(t + delta[t], n + gamma[n])`.
struct WarpOp {
    mask: Vec<bool>,
    sampling: Sampling,
}

impl WarpOp {
    fn samples<'a>(
        &'a self,
        gamma: &'a [f64],
        delta: &'a [f64],
        frames: usize,
        patches: usize,
    ) -> impl Iterator<Item = (usize, usize, Sample)> + 'a {
        (0..frames).flat_map(move |t| {
            (0..patches).filter_map(move |n| {
                self.mask[t * patches + n].then(|| {
                    let s = Sample::resolve(t as f64 + delta[t], n as f64 + gamma[n], frames, patches);
                    (t, n, s)
                })
            })
        })
    }

    fn forward(&self, x: &Tensor, gamma: &[f64], delta: &[f64]) -> Tensor {
        let (t_len, n_len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let src = x.data();
        let mut out = src.to_vec();
        for (t, n, s) in self.samples(gamma, delta, t_len, n_len) {
            let dst = &mut out[(t * n_len + n) * d..(t * n_len + n + 1) * d];
            let reads = s.reads(self.sampling);
            if let [((rt, rn), w)] = reads.as_slice() {
                if *w == 1.0 {
                    dst.copy_from_slice(&src[(rt * n_len + rn) * d..(rt * n_len + rn + 1) * d]);
                    continue;
                }
            }
            dst.fill(0.0);
            for ((rt, rn), w) in reads {
                let row = &src[(rt * n_len + rn) * d..(rt * n_len + rn + 1) * d];
                for (o, v) in dst.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        Tensor::new(x.shape(), out).expect("warp keeps shape")
    }
}

impl CustomOp for WarpOp {
    fn name(&self) -> &'static str {
        "warp_kv"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, gamma, delta) = (inputs[0], inputs[1].data(), inputs[2].data());
        let (t_len, n_len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let src = x.data();
        let row = |t: usize, n: usize| &src[(t * n_len + n) * d..(t * n_len + n + 1) * d];
        let mut dx = if needs[0] {
            let mut g = grad.to_vec();
            for (i, &m) in self.mask.iter().enumerate() {
                if m {
                    g[i * d..(i + 1) * d].fill(0.0);
                }
            }
            Some(g)
        } else {
            None
        };
        let mut dgamma = needs[1].then(|| vec![0.0; n_len]);
        let mut ddelta = needs[2].then(|| vec![0.0; t_len]);

        for (t, n, s) in self.samples(gamma, delta, t_len, n_len) {
            let g = &grad[(t * n_len + n) * d..(t * n_len + n + 1) * d];
            if let Some(dx) = dx.as_mut() {
                for ((rt, rn), w) in s.reads(self.sampling) {
                    let base = (rt * n_len + rn) * d;
                    for (o, gv) in dx[base..base + d].iter_mut().zip(g) {
                        *o += w * gv;
                    }
                }
            }
            if let Some(dd) = ddelta.as_mut().filter(|_| s.live_t && s.t1 != s.t0) {
                let v: f64 = (0..d)
                    .map(|i| {
                        let a = (1.0 - s.fn_) * (row(s.t1, s.n0)[i] - row(s.t0, s.n0)[i]);
                        let b = s.fn_ * (row(s.t1, s.n1)[i] - row(s.t0, s.n1)[i]);
                        g[i] * (a + b)
                    })
                    .sum();
                dd[t] += v;
            }
            if let Some(dg) = dgamma.as_mut().filter(|_| s.live_n && s.n1 != s.n0) {
                let v: f64 = (0..d)
                    .map(|i| {
                        let a = (1.0 - s.ft) * (row(s.t0, s.n1)[i] - row(s.t0, s.n0)[i]);
                        let b = s.ft * (row(s.t1, s.n1)[i] - row(s.t1, s.n0)[i]);
                        g[i] * (a + b)
                    })
                    .sum();
                dg[n] += v;
            }
        }
        vec![dx, dgamma, ddelta]
    }
}

/// Warps the selected rows of `field` (`T×N×D`) by the shared offsets
/// `gamma` (`N×1`) and `delta` (`T×1`); unselected rows pass through.
pub fn warp_field(
    tape: &mut Tape,
    field: Var,
    gamma: Var,
    delta: Var,
    selection: &PatchSelection,
    sampling: Sampling,
) -> Result<Var> {
    let shape = tape.shape(field).to_vec();
    let (t, n) = match shape.as_slice() {
        [t, n, _] => (*t, *n),
        _ => return Err(Error::dim("warp_kv", &shape, &[0, 0, 0])),
    };
    if tape.shape(gamma) != [n, 1] {
        return Err(Error::dim("warp_kv", &shape, tape.shape(gamma)));
    }
    if tape.shape(delta) != [t, 1] {
        return Err(Error::dim("warp_kv", &shape, tape.shape(delta)));
    }
    if selection.frames.len() != t || selection.patches != n {
        return Err(Error::Contract(format!(
            "selection covers {}×{} but field is {t}×{n}",
            selection.frames.len(),
            selection.patches
        )));
    }
    let op = WarpOp {
        mask: selection.mask(),
        sampling,
    };
    let out = op.forward(tape.value(field), tape.value(gamma).data(), tape.value(delta).data());
    Ok(tape.custom(&[field, gamma, delta], out, Box::new(op)))
}

/// Warps keys and values with the same offsets and selection.
pub fn warp_kv(
    tape: &mut Tape,
    k: Var,
    v: Var,
    gamma: Var,
    delta: Var,
    selection: &PatchSelection,
    sampling: Sampling,
) -> Result<(Var, Var)> {
    Ok((
        warp_field(tape, k, gamma, delta, selection, sampling)?,
        warp_field(tape, v, gamma, delta, selection, sampling)?,
    ))
}

/// `(u·W_q, u·W_k, u·W_v)`.
pub fn qkv(tape: &mut Tape, u: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var, Var)> {
    AttentionWeights { wq, wk, wv, heads: 1 }.qkv(tape, u)
}

/// Mean over frames: `T×D → 1×D`.
pub fn pool_video(tape: &mut Tape, frames: Var) -> Result<Var> {
    if tape.shape(frames).len() != 2 {
        return Err(Error::dim("pool_video", tape.shape(frames), &[0, 0]));
    }
    tape.mean_axis(frames, 0)
}

/// Index of the candidate row maximizing `(pooled·proj)·candidateᵀ`; ties go
/// to the lowest index.
pub fn select_sentence(pooled: &Tensor, candidates: &Tensor, proj: &Tensor) -> Result<usize> {
    let q = candidates.shape().first().copied().unwrap_or(0);
    if q == 0 {
        return Err(Error::Input("empty candidate sentence set".into()));
    }
    let (dv, dt) = (proj.shape()[0], proj.shape()[1]);
    if pooled.numel() != dv || candidates.shape()[1] != dt {
        return Err(Error::dim("select_sentence", pooled.shape(), candidates.shape()));
    }
    let projected: Vec<f64> = (0..dt)
        .map(|j| (0..dv).map(|i| pooled.data()[i] * proj.get(&[i, j])).sum())
        .collect();
    let scores: Vec<f64> = (0..q).map(|r| dot(candidates.row(r), &projected)).collect();
    Ok(rank_indices(&scores, 1, true)[0])
}

/// Attention override for one video: selects patches from the block input,
/// warps patch keys and values, then runs multi-head attention over CLS and
/// patches.
pub struct AsaAttention<'a> {
    pub store: &'a ParamStore,
    pub selector: &'a dyn PatchSelector,
    /// `1×D_t` sentence feature for text-conditioned modes.
    pub sentence: Option<&'a Tensor>,
    /// Name of the `D_v×D_t` projection in `store`.
    pub proj: &'a str,
    pub k: usize,
    pub axes: WarpAxes,
    pub sampling: Sampling,
    pub seed: u64,
}

impl AsaAttention<'_> {
    fn offset(&self, tape: &mut Tape, name: &str, active: bool) -> Result<Var> {
        if active {
            tape.param(self.store, name)
        } else {
            let shape = self.store.get(name)?.shape().to_vec();
            Ok(tape.constant(Tensor::zeros(&shape)))
        }
    }

    /// Selection for one layer's block input `T×(N+1)×D`.
    pub fn selection(&self, input: &Tensor, layer: usize) -> Result<PatchSelection> {
        let s = input.shape();
        let (t, tokens, d) = (s[0], s[1], s[2]);
        let n = tokens - 1;
        let mut cls = Vec::with_capacity(t * d);
        let mut patches = Vec::with_capacity(t * n * d);
        for frame in input.data().chunks(tokens * d) {
            cls.extend_from_slice(&frame[..d]);
            patches.extend_from_slice(&frame[d..]);
        }
        let cls = Tensor::new(&[t, d], cls)?;
        let patches = Tensor::new(&[t, n, d], patches)?;
        self.selector.select(&SelectionInput {
            patches: &patches,
            cls: &cls,
            sentence: self.sentence,
            proj: self.store.get(self.proj)?,
            k: self.k,
            layer,
            seed: self.seed,
        })
    }
}

impl AttentionOp for AsaAttention<'_> {
    fn attend(
        &self,
        tape: &mut Tape,
        layer: usize,
        input: Var,
        normed: Var,
        weights: &AttentionWeights,
    ) -> Result<Var> {
        let selection = self.selection(tape.value(input), layer)?;
        let (q, k, v) = weights.qkv(tape, normed)?;
        let tokens = tape.shape(k)[1];
        let gamma = self.offset(tape, GAMMA, self.axes.spatial())?;
        let delta = self.offset(tape, DELTA, self.axes.temporal())?;
        let split = |tape: &mut Tape, x: Var| -> Result<(Var, Var)> {
            Ok((tape.narrow(x, 1, 0, 1)?, tape.narrow(x, 1, 1, tokens - 1)?))
        };
        let (k_cls, k_patch) = split(tape, k)?;
        let (v_cls, v_patch) = split(tape, v)?;
        let (k_hat, v_hat) = warp_kv(tape, k_patch, v_patch, gamma, delta, &selection, self.sampling)?;
        let k = tape.concat(&[k_cls, k_hat], 1)?;
        let v = tape.concat(&[v_cls, v_hat], 1)?;
        multi_head_attention(tape, q, k, v, weights.heads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::VanillaAttention;

    fn field(t: usize, n: usize, d: usize) -> Tensor {
        Tensor::from_fn(&[t, n, d], |i| ((i * 7 + 3) as f64 * 0.37).sin())
    }

    fn warp_values(x: &Tensor, gamma: &[f64], delta: &[f64], sel: &PatchSelection, sampling: Sampling) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::new(&[gamma.len(), 1], gamma.to_vec()).unwrap());
        let dl = tape.constant(Tensor::new(&[delta.len(), 1], delta.to_vec()).unwrap());
        let out = warp_field(&mut tape, xv, g, dl, sel, sampling).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn rank_indices_sort_oracle() {
        assert_eq!(rank_indices(&[3.0, 1.0, 4.0, 2.0], 2, true), vec![2, 0]);
        assert_eq!(rank_indices(&[3.0, 1.0, 4.0, 2.0], 2, false), vec![1, 3]);
        assert_eq!(rank_indices(&[1.0, 1.0, 1.0], 2, true), vec![0, 1]);
        assert!(rank_indices(&[1.0, 2.0], 0, true).is_empty());
    }

    #[test]
    fn selection_modes_and_bounds() {
        let patches = field(2, 4, 3);
        let cls = Tensor::from_fn(&[2, 3], |i| i as f64);
        let proj = Tensor::eye(3);
        let w = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let input = |k| SelectionInput {
            patches: &patches,
            cls: &cls,
            sentence: Some(&w),
            proj: &proj,
            k,
            layer: 1,
            seed: 9,
        };
        for mode in SelectionMode::ALL {
            let all = select_patches(mode, &input(4)).unwrap();
            for set in &all.frames {
                let mut s = set.clone();
                s.sort();
                assert_eq!(s, vec![0, 1, 2, 3], "{mode}");
            }
            if mode != SelectionMode::None {
                assert!(select_patches(mode, &input(0))
                    .unwrap()
                    .frames
                    .iter()
                    .all(Vec::is_empty));
            }
            assert!(matches!(select_patches(mode, &input(5)), Err(Error::Config(_))));
        }
        let a = select_patches(SelectionMode::Random, &input(2)).unwrap();
        let b = select_patches(SelectionMode::Random, &input(2)).unwrap();
        assert_eq!(a, b);
        assert!(select_patches(SelectionMode::None, &input(1)).unwrap().warp_all);
    }

    #[test]
    fn text_top_k_crafted_scores() {
        // Scores along the first feature only: [3, 1, 4, 2].
        let patches = Tensor::new(&[1, 4, 2], vec![3.0, 9.0, 1.0, 9.0, 4.0, 9.0, 2.0, 9.0]).unwrap();
        let cls = Tensor::zeros(&[1, 2]);
        let proj = Tensor::eye(2);
        let w = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let sel = select_patches(
            SelectionMode::TextTopK,
            &SelectionInput {
                patches: &patches,
                cls: &cls,
                sentence: Some(&w),
                proj: &proj,
                k: 2,
                layer: 1,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(sel.frames, vec![vec![2, 0]]);
    }

    #[test]
    fn zero_offsets_are_identity() {
        let x = field(3, 4, 2);
        let sel = PatchSelection::all(3, 4);
        let y = warp_values(&x, &[0.0; 4], &[0.0; 3], &sel, Sampling::Bilinear);
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn integer_offset_matches_indexing() {
        let x = field(4, 3, 2);
        let sel = PatchSelection::all(4, 3);
        let y = warp_values(&x, &[0.0; 3], &[1.0, 1.0, 0.0, 0.0], &sel, Sampling::Bilinear);
        for n in 0..3 {
            for d in 0..2 {
                assert_eq!(y.get(&[1, n, d]).to_bits(), x.get(&[2, n, d]).to_bits());
                assert_eq!(y.get(&[0, n, d]).to_bits(), x.get(&[1, n, d]).to_bits());
            }
        }
    }

    #[test]
    fn offsets_clamp_to_last_frame() {
        let x = field(3, 2, 2);
        let sel = PatchSelection::all(3, 2);
        let y = warp_values(&x, &[0.0; 2], &[103.0; 3], &sel, Sampling::Bilinear);
        for t in 0..3 {
            for n in 0..2 {
                for d in 0..2 {
                    assert_eq!(y.get(&[t, n, d]), x.get(&[2, n, d]));
                }
            }
        }
    }

    #[test]
    fn unselected_rows_untouched_and_half_step_averages() {
        let x = field(2, 3, 2);
        let sel = PatchSelection {
            frames: vec![vec![1], vec![]],
            patches: 3,
            warp_all: false,
        };
        let y = warp_values(&x, &[0.5, 0.5, 0.5], &[0.0, 0.0], &sel, Sampling::Bilinear);
        for d in 0..2 {
            assert_eq!(y.get(&[0, 0, d]), x.get(&[0, 0, d]));
            assert_eq!(y.get(&[0, 2, d]), x.get(&[0, 2, d]));
            let want = 0.5 * (x.get(&[0, 1, d]) + x.get(&[0, 2, d]));
            assert!((y.get(&[0, 1, d]) - want).abs() < 1e-15);
        }
        let near = warp_values(&x, &[0.4, 0.4, 0.4], &[0.0, 0.0], &sel, Sampling::Nearest);
        assert!(near.bit_eq(&x));
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let (t, n, d) = (3, 4, 2);
        let mut store = ParamStore::new();
        store.insert("x", field(t, n, d), true).unwrap();
        store
            .insert(GAMMA, Tensor::new(&[n, 1], vec![0.3, -0.6, 0.45, 1.2]).unwrap(), true)
            .unwrap();
        store
            .insert(DELTA, Tensor::new(&[t, 1], vec![0.7, -0.25, 0.1]).unwrap(), true)
            .unwrap();
        let sel = PatchSelection {
            frames: vec![vec![0, 1, 2], vec![1, 3], vec![0, 2]],
            patches: n,
            warp_all: false,
        };
        let weights = Tensor::from_fn(&[t, n, d], |i| (i as f64 * 0.9).cos());
        let f = |tape: &mut Tape, st: &ParamStore| {
            let x = tape.param(st, "x")?;
            let g = tape.param(st, GAMMA)?;
            let dl = tape.param(st, DELTA)?;
            let y = warp_field(tape, x, g, dl, &sel, Sampling::Bilinear)?;
            let w = tape.constant(weights.clone());
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        };
        let err = crate::tensor::fd_check(f, &mut store, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pool_and_sentence_selection() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        let p = pool_video(&mut tape, f).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);

        let pooled = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let proj = Tensor::eye(2);
        let cands = Tensor::new(&[2, 2], vec![-1.0, -2.0, 1.0, 2.0]).unwrap();
        assert_eq!(select_sentence(&pooled, &cands, &proj).unwrap(), 1);
        let ties = Tensor::new(&[2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(select_sentence(&pooled, &ties, &proj).unwrap(), 0);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(matches!(select_sentence(&pooled, &empty, &proj), Err(Error::Input(_))));
    }

    #[test]
    fn zero_offset_asa_equals_vanilla_bitwise() {
        let (t, s, d) = (2, 4, 4);
        let mut store = ParamStore::new();
        store
            .allocate(&offset_specs(t, s - 1, WarpAxes::Both), &mut Rng::new(0))
            .unwrap();
        store.insert("proj", Tensor::eye(4), false).unwrap();
        let x0 = Tensor::from_fn(&[t, s, d], |i| (i as f64 * 0.21).sin());
        let selector = AllSelector;
        let asa = AsaAttention {
            store: &store,
            selector: &selector,
            sentence: None,
            proj: "proj",
            k: 3,
            axes: WarpAxes::Both,
            sampling: Sampling::Bilinear,
            seed: 0,
        };
        let run = |op: &dyn AttentionOp| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let w = |tape: &mut Tape, seed: u64| {
                tape.constant(Tensor::from_fn(&[d, d], |i| (i as f64 + seed as f64).cos()))
            };
            let weights = AttentionWeights {
                wq: w(&mut tape, 1),
                wk: w(&mut tape, 2),
                wv: w(&mut tape, 3),
                heads: 2,
            };
            let y = op.attend(&mut tape, 1, x, x, &weights).unwrap();
            tape.value(y).clone()
        };
        assert!(run(&asa).bit_eq(&run(&VanillaAttention)));
    }
}
