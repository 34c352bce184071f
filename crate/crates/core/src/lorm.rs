//! Low-rank modulation of frozen features.
//!
//! Visual features of each adapted layer are calibrated as `u = c ⊙ x + s`,
//! where the scale `c` and shift `s` are products of small learnable factors.
//! The factorization axis is a strategy ([`Modulator`]) selected by name:
//!
//! | name                     | `c`, `s` per layer          | factors                        |
//! |--------------------------|-----------------------------|--------------------------------|
//! | `temporal`               | `T×D`                       | `(T×R)·(R×D)`                  |
//! | `spatial-temporal`       | `T×S×D`                     | `(T×S×R)·(R×D)`                |
//! | `spatial-temporal-layer` | `M×T×S×D` shared over layers | `(M×R)·(R×T×S×R)·(R×D)`       |
//! | `none`                   | pass-through                | -                              |
//!
//! `S = N + 1` counts the CLS slot, so every token of a frame is covered.
//! Text features get a full-rank `1×D_t` scale/shift on the sentence token.

use std::fmt;
use std::str::FromStr;

use crate::backbone::FeatureHook;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::{Init, ParamSpec, ParamStore, Rng, Tape, Tensor, Var};

/// Standard deviation of the small noise placed in factor rows that the
/// identity pattern annihilates.
pub const INIT_NOISE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecomposeMode {
    Temporal,
    SpatialTemporal,
    SpatialTemporalLayer,
    None,
}

impl DecomposeMode {
    pub const ALL: [DecomposeMode; 4] = [
        DecomposeMode::None,
        DecomposeMode::Temporal,
        DecomposeMode::SpatialTemporal,
        DecomposeMode::SpatialTemporalLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecomposeMode::Temporal => "temporal",
            DecomposeMode::SpatialTemporal => "spatial-temporal",
            DecomposeMode::SpatialTemporalLayer => "spatial-temporal-layer",
            DecomposeMode::None => "none",
        }
    }
}

impl fmt::Display for DecomposeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecomposeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown decompose mode `{s}`")))
    }
}

/// Geometry shared by all modulators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModulationShape {
    pub frames: usize,
    /// Tokens per frame, CLS included.
    pub tokens: usize,
    pub dim: usize,
    pub rank: usize,
    /// Adapted layers, 1-based, ascending.
    pub layers: Vec<usize>,
}

/// A decomposition strategy for the visual scale/shift pair.
pub trait Modulator: Send + Sync {
    fn mode(&self) -> DecomposeMode;

    fn shape(&self) -> &ModulationShape;

    fn param_specs(&self) -> Vec<ParamSpec>;

    /// Sets factors so that the composed scale is exactly ones and the shift
    /// exactly zero.
    fn identity_init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()>;

    /// `(c, s)` for `layer`, broadcastable against `T×S×D`, or `None` when
    /// the layer is not adapted.
    fn modulation(&self, tape: &mut Tape, store: &ParamStore, layer: usize) -> Result<Option<(Var, Var)>>;

    /// Trainable scalar count implied by the factor shapes.
    fn closed_form_count(&self) -> usize;

    /// Composed values of `(c, s)` for `layer`.
    fn composed(&self, store: &ParamStore, layer: usize) -> Result<Option<(Tensor, Tensor)>> {
        let mut tape = Tape::new();
        Ok(self
            .modulation(&mut tape, store, layer)?
            .map(|(c, s)| (tape.value(c).clone(), tape.value(s).clone())))
    }
}

pub fn factor_name(layer: usize, factor: &str) -> String {
    format!("lorm.layer{layer}.{factor}")
}

fn shared_name(factor: &str) -> String {
    format!("lorm.shared.{factor}")
}

/// Writes the identity pattern into a `(…×R)·(R×D)` factor pair:
/// `a[..., 0] = 1`, other columns 0; `b[0, :] = 1`, other rows small noise.
fn identity_pair(store: &mut ParamStore, a: &str, b: &str, rng: &mut Rng) -> Result<()> {
    let at = store.get_mut(a)?;
    let r = *at.shape().last().expect("factor rank");
    for (i, v) in at.data_mut().iter_mut().enumerate() {
        *v = if i % r == 0 { 1.0 } else { 0.0 };
    }
    let bt = store.get_mut(b)?;
    let d = bt.shape()[1];
    for (i, v) in bt.data_mut().iter_mut().enumerate() {
        *v = if i < d { 1.0 } else { INIT_NOISE * rng.normal() };
    }
    Ok(())
}

/// `a = 0`, `b ~ N(0, noise)`: composed shift is exactly zero.
fn zero_shift_pair(store: &mut ParamStore, a: &str, b: &str, rng: &mut Rng) -> Result<()> {
    store.get_mut(a)?.data_mut().fill(0.0);
    for v in store.get_mut(b)?.data_mut() {
        *v = INIT_NOISE * rng.normal();
    }
    Ok(())
}

/// `c = cᵃ·cᵇ`, `s = sᵃ·sᵇ` with `T×R` and `R×D` factors.
pub struct TemporalLorm {
    shape: ModulationShape,
}

impl TemporalLorm {
    pub fn new(shape: ModulationShape) -> Self {
        Self { shape }
    }
}

impl Modulator for TemporalLorm {
    fn mode(&self) -> DecomposeMode {
        DecomposeMode::Temporal
    }

    fn shape(&self) -> &ModulationShape {
        &self.shape
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let ModulationShape {
            frames: t,
            dim: d,
            rank: r,
            ..
        } = self.shape;
        self.shape
            .layers
            .iter()
            .flat_map(|&l| {
                [("c_a", [t, r]), ("c_b", [r, d]), ("s_a", [t, r]), ("s_b", [r, d])]
                    .map(|(n, s)| ParamSpec::new(factor_name(l, n), &s, true, Init::Zeros))
            })
            .collect()
    }

    fn identity_init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for &l in &self.shape.layers {
            identity_pair(store, &factor_name(l, "c_a"), &factor_name(l, "c_b"), rng)?;
            zero_shift_pair(store, &factor_name(l, "s_a"), &factor_name(l, "s_b"), rng)?;
        }
        Ok(())
    }

    fn modulation(&self, tape: &mut Tape, store: &ParamStore, layer: usize) -> Result<Option<(Var, Var)>> {
        if !self.shape.layers.contains(&layer) {
            return Ok(None);
        }
        compose_modulation(tape, store, layer).map(Some)
    }

    fn closed_form_count(&self) -> usize {
        let ModulationShape {
            frames: t,
            dim: d,
            rank: r,
            ..
        } = self.shape;
        self.shape.layers.len() * 2 * (t * r + r * d)
    }
}

/// Composes a temporal layer's factors into `(c_v, s_v)`, each `T×D`.
pub fn compose_modulation(tape: &mut Tape, store: &ParamStore, layer: usize) -> Result<(Var, Var)> {
    let ca = tape.param(store, &factor_name(layer, "c_a"))?;
    let cb = tape.param(store, &factor_name(layer, "c_b"))?;
    let sa = tape.param(store, &factor_name(layer, "s_a"))?;
    let sb = tape.param(store, &factor_name(layer, "s_b"))?;
    Ok((tape.matmul(ca, cb)?, tape.matmul(sa, sb)?))
}

/// Per-token factors `(T×S×R)·(R×D)`.
pub struct SpatialTemporalLorm {
    shape: ModulationShape,
}

impl SpatialTemporalLorm {
    pub fn new(shape: ModulationShape) -> Self {
        Self { shape }
    }
}

impl Modulator for SpatialTemporalLorm {
    fn mode(&self) -> DecomposeMode {
        DecomposeMode::SpatialTemporal
    }

    fn shape(&self) -> &ModulationShape {
        &self.shape
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let ModulationShape {
            frames: t,
            tokens: s,
            dim: d,
            rank: r,
            ..
        } = self.shape;
        self.shape
            .layers
            .iter()
            .flat_map(|&l| {
                [
                    ("c_a", vec![t, s, r]),
                    ("c_b", vec![r, d]),
                    ("s_a", vec![t, s, r]),
                    ("s_b", vec![r, d]),
                ]
                .map(|(n, sh)| ParamSpec::new(factor_name(l, n), &sh, true, Init::Zeros))
            })
            .collect()
    }

    fn identity_init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for &l in &self.shape.layers {
            identity_pair(store, &factor_name(l, "c_a"), &factor_name(l, "c_b"), rng)?;
            zero_shift_pair(store, &factor_name(l, "s_a"), &factor_name(l, "s_b"), rng)?;
        }
        Ok(())
    }

    fn modulation(&self, tape: &mut Tape, store: &ParamStore, layer: usize) -> Result<Option<(Var, Var)>> {
        if !self.shape.layers.contains(&layer) {
            return Ok(None);
        }
        let ca = tape.param(store, &factor_name(layer, "c_a"))?;
        let cb = tape.param(store, &factor_name(layer, "c_b"))?;
        let sa = tape.param(store, &factor_name(layer, "s_a"))?;
        let sb = tape.param(store, &factor_name(layer, "s_b"))?;
        Ok(Some((tape.matmul(ca, cb)?, tape.matmul(sa, sb)?)))
    }

    fn closed_form_count(&self) -> usize {
        let ModulationShape {
            frames: t,
            tokens: s,
            dim: d,
            rank: r,
            ..
        } = self.shape;
        self.shape.layers.len() * 2 * (t * s * r + r * d)
    }
}

/// One factorization shared by all `M` adapted layers:
/// `(M×R)·(R×T×S×R)·(R×D)`; layer `l` reads slice `m = index of l`.
pub struct SpatialTemporalLayerLorm {
    shape: ModulationShape,
}

impl SpatialTemporalLayerLorm {
    pub fn new(shape: ModulationShape) -> Self {
        Self { shape }
    }

    fn compose(&self, tape: &mut Tape, store: &ParamStore, p: &str, m_idx: usize) -> Result<Var> {
        let ModulationShape {
            frames: t,
            tokens: s,
            dim: d,
            rank: r,
            ..
        } = self.shape;
        let m = self.shape.layers.len();
        let lm = tape.param(store, &shared_name(&format!("{p}_m")))?;
        let core = tape.param(store, &shared_name(&format!("{p}_core")))?;
        let b = tape.param(store, &shared_name(&format!("{p}_b")))?;
        let core2 = tape.reshape(core, &[r, t * s * r])?;
        let mixed = tape.matmul(lm, core2)?; // M × (T·S·R)
        let mixed = tape.reshape(mixed, &[m, t * s, r])?;
        let row = tape.narrow(mixed, 0, m_idx, 1)?;
        let row = tape.reshape(row, &[t * s, r])?;
        let full = tape.matmul(row, b)?;
        tape.reshape(full, &[t, s, d])
    }
}

impl Modulator for SpatialTemporalLayerLorm {
    fn mode(&self) -> DecomposeMode {
        DecomposeMode::SpatialTemporalLayer
    }

    fn shape(&self) -> &ModulationShape {
        &self.shape
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let ModulationShape {
            frames: t,
            tokens: s,
            dim: d,
            rank: r,
            ..
        } = self.shape;
        let m = self.shape.layers.len();
        ["c", "s"]
            .iter()
            .flat_map(|p| {
                [
                    (format!("{p}_m"), vec![m, r]),
                    (format!("{p}_core"), vec![r, t, s, r]),
                    (format!("{p}_b"), vec![r, d]),
                ]
                .map(|(n, sh)| ParamSpec::new(shared_name(&n), &sh, true, Init::Zeros))
            })
            .collect()
    }

    fn identity_init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let r = self.shape.rank;
        for p in ["c", "s"] {
            let m = store.get_mut(&shared_name(&format!("{p}_m")))?;
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v = if i % r == 0 { 1.0 } else { 0.0 };
            }
            let core = store.get_mut(&shared_name(&format!("{p}_core")))?;
            let slab = core.numel() / r; // one leading-rank slice
            for (i, v) in core.data_mut().iter_mut().enumerate() {
                *v = match (p, i < slab) {
                    ("c", true) => {
                        if i % r == 0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    ("c", false) => INIT_NOISE * rng.normal(),
                    _ => 0.0,
                };
            }
            let b = store.get_mut(&shared_name(&format!("{p}_b")))?;
            let d = b.shape()[1];
            for (i, v) in b.data_mut().iter_mut().enumerate() {
                *v = if p == "c" && i < d {
                    1.0
                } else {
                    INIT_NOISE * rng.normal()
                };
            }
        }
        Ok(())
    }

    fn modulation(&self, tape: &mut Tape, store: &ParamStore, layer: usize) -> Result<Option<(Var, Var)>> {
        let Some(m_idx) = self.shape.layers.iter().position(|&l| l == layer) else {
            return Ok(None);
        };
        let c = self.compose(tape, store, "c", m_idx)?;
        let s = self.compose(tape, store, "s", m_idx)?;
        Ok(Some((c, s)))
    }

    fn closed_form_count(&self) -> usize {
        let ModulationShape {
            frames: t,
            tokens: s,
            dim: d,
            rank: r,
            ..
        } = self.shape;
        let m = self.shape.layers.len();
        2 * (m * r + r * t * s * r + r * d)
    }
}

/// No modulation; every layer passes through.
pub struct NoModulation {
    shape: ModulationShape,
}

impl NoModulation {
    pub fn new(shape: ModulationShape) -> Self {
        Self { shape }
    }
}

impl Modulator for NoModulation {
    fn mode(&self) -> DecomposeMode {
        DecomposeMode::None
    }

    fn shape(&self) -> &ModulationShape {
        &self.shape
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        Vec::new()
    }

    fn identity_init(&self, _: &mut ParamStore, _: &mut Rng) -> Result<()> {
        Ok(())
    }

    fn modulation(&self, _: &mut Tape, _: &ParamStore, _: usize) -> Result<Option<(Var, Var)>> {
        Ok(None)
    }

    fn closed_form_count(&self) -> usize {
        0
    }
}

/// All decomposition strategies keyed by [`DecomposeMode::name`].
pub fn modulator_registry() -> Registry<dyn Modulator, ModulationShape> {
    let mut r: Registry<dyn Modulator, ModulationShape> = Registry::new("decompose mode");
    r.register("temporal", |s| Box::new(TemporalLorm::new(s.clone())))
        .register("spatial-temporal", |s| Box::new(SpatialTemporalLorm::new(s.clone())))
        .register("spatial-temporal-layer", |s| {
            Box::new(SpatialTemporalLayerLorm::new(s.clone()))
        })
        .register("none", |s| Box::new(NoModulation::new(s.clone())));
    r
}

pub fn build_modulator(mode: DecomposeMode, shape: ModulationShape) -> Result<Box<dyn Modulator>> {
    if mode != DecomposeMode::None && (shape.rank == 0 || shape.rank > shape.frames.min(shape.dim)) {
        return Err(Error::Config(format!(
            "rank {} outside [1, min(T={}, D={})]",
            shape.rank, shape.frames, shape.dim
        )));
    }
    modulator_registry().create(mode.name(), &shape)
}

/// `u = c ⊙ x + s` with `x: T×S×D`. A `T×D` modulation is shared by every
/// token of its frame; a `T×S×D` one is applied per token.
pub fn modulate_video(tape: &mut Tape, x: Var, c: Var, s: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let lift = |tape: &mut Tape, m: Var| -> Result<Var> {
        let ms = tape.shape(m).to_vec();
        match ms.as_slice() {
            [t, d] if xs.len() == 3 && *t == xs[0] && *d == xs[2] => tape.reshape(m, &[*t, 1, *d]),
            [..] if ms == xs => Ok(m),
            _ => Err(Error::dim("modulate_video", &xs, &ms)),
        }
    };
    let c = lift(tape, c)?;
    let s = lift(tape, s)?;
    let scaled = tape.mul(c, x)?;
    tape.add(scaled, s)
}

/// Applies a layer's modulator as a backbone hook.
pub struct LormHook<'a> {
    pub modulator: &'a dyn Modulator,
    pub store: &'a ParamStore,
}

impl FeatureHook for LormHook<'_> {
    fn apply(&self, tape: &mut Tape, layer: usize, x: Var) -> Result<Var> {
        match self.modulator.modulation(tape, self.store, layer)? {
            Some((c, s)) => modulate_video(tape, x, c, s),
            None => Ok(x),
        }
    }
}

/// Where text modulation lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextModLevel {
    /// The sentence (EOS) token only.
    Sentence,
    /// Every token, sharing one `1×D_t` pair. Ablation only.
    Word,
}

impl TextModLevel {
    pub fn name(self) -> &'static str {
        match self {
            TextModLevel::Sentence => "sentence",
            TextModLevel::Word => "word",
        }
    }
}

impl FromStr for TextModLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(TextModLevel::Sentence),
            "word" => Ok(TextModLevel::Word),
            _ => Err(Error::Config(format!("unknown text modulation level `{s}`"))),
        }
    }
}

/// Full-rank `1×D_t` scale/shift per text layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextModulation {
    pub layers: usize,
    pub dim: usize,
    pub level: TextModLevel,
}

impl TextModulation {
    pub fn scale_name(layer: usize) -> String {
        format!("textmod.layer{layer}.c_t")
    }

    pub fn shift_name(layer: usize) -> String {
        format!("textmod.layer{layer}.s_t")
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        (1..=self.layers)
            .flat_map(|l| {
                [
                    ParamSpec::new(Self::scale_name(l), &[1, self.dim], true, Init::Ones),
                    ParamSpec::new(Self::shift_name(l), &[1, self.dim], true, Init::Zeros),
                ]
            })
            .collect()
    }

    /// `c_t = 1`, `s_t = 0`.
    pub fn identity_init(&self, store: &mut ParamStore) -> Result<()> {
        for l in 1..=self.layers {
            store.get_mut(&Self::scale_name(l))?.data_mut().fill(1.0);
            store.get_mut(&Self::shift_name(l))?.data_mut().fill(0.0);
        }
        Ok(())
    }

    pub fn closed_form_count(&self) -> usize {
        self.layers * 2 * self.dim
    }
}

/// `z = c_t ⊙ w + s_t` on a `1×D_t` sentence feature.
pub fn modulate_text(tape: &mut Tape, w: Var, c: Var, s: Var) -> Result<Var> {
    let scaled = tape.mul(c, w)?;
    tape.add(scaled, s)
}

/// Text modulation as a backbone hook over the `1×S×D_t` token sequence.
pub struct TextModHook<'a> {
    pub textmod: &'a TextModulation,
    pub store: &'a ParamStore,
}

impl FeatureHook for TextModHook<'_> {
    fn apply(&self, tape: &mut Tape, layer: usize, x: Var) -> Result<Var> {
        let c = tape.param(self.store, &TextModulation::scale_name(layer))?;
        let s = tape.param(self.store, &TextModulation::shift_name(layer))?;
        match self.textmod.level {
            TextModLevel::Word => modulate_text(tape, x, c, s),
            TextModLevel::Sentence => {
                let len = tape.shape(x)[1];
                let eos = tape.narrow(x, 1, len - 1, 1)?;
                let z = modulate_text(tape, eos, c, s)?;
                if len == 1 {
                    return Ok(z);
                }
                let words = tape.narrow(x, 1, 0, len - 1)?;
                tape.concat(&[words, z], 1)
            }
        }
    }
}
