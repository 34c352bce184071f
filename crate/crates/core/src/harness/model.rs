//! The frozen backbone with its adapters and retrieval head assembled from an
//! [`ExperimentConfig`].

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ProjInit};
use super::data::{generate_dataset, SyntheticDataset};
use crate::asa::{offset_specs, select_sentence, selector_registry, AsaAttention, PatchSelector};
use crate::backbone::{Backbone, HookSet, VideoFeatures};
use crate::error::{Error, Result};
use crate::lorm::{build_modulator, LormHook, Modulator, TextModHook, TextModulation};
use crate::retrieval::{
    contrastive_loss, similarity, text_embedding, video_embedding, SimilarityMatrix, LOG_TAU, PROJ,
};
use crate::tensor::{mix, Init, ParamSpec, ParamStore, Rng, Tape, Tensor, Var};

const ADAPTER_STREAM: u64 = 0xada9;
const HEAD_STREAM: u64 = 0x4ead;
const ALIGN_STREAM: u64 = 0xa119;

pub struct Model {
    pub config: ExperimentConfig,
    pub backbone: Backbone,
    pub modulator: Box<dyn Modulator>,
    pub textmod: Option<TextModulation>,
    pub selector: Box<dyn PatchSelector>,
    pub layers: Vec<usize>,
    pub store: ParamStore,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("decompose", &self.modulator.mode())
            .field("selection", &self.selector.mode())
            .field("layers", &self.layers)
            .field("params", &self.store.len())
            .finish()
    }
}

/// Adapter and head declarations (everything except the backbone).
pub fn adapter_specs(cfg: &ExperimentConfig) -> Result<Vec<ParamSpec>> {
    let modulator = build_modulator(cfg.decompose, cfg.modulation_shape()?)?;
    let mut specs = modulator.param_specs();
    if let Some(level) = cfg.text_mod {
        let tm = TextModulation {
            layers: cfg.text.layers,
            dim: cfg.text.dim,
            level,
        };
        specs.extend(tm.param_specs());
    }
    if cfg.asa {
        specs.extend(offset_specs(cfg.visual.frames, cfg.visual.patches(), cfg.warp_axes));
    }
    let std = 1.0 / (cfg.visual.dim as f64).sqrt();
    specs.push(ParamSpec::new(
        PROJ,
        &[cfg.visual.dim, cfg.text.dim],
        cfg.train_head,
        Init::Normal(std),
    ));
    specs.push(ParamSpec::new(LOG_TAU, &[1], cfg.train_head, Init::Zeros));
    Ok(specs)
}

/// Every declaration of a configured model, backbone first.
pub fn model_specs(cfg: &ExperimentConfig) -> Result<Vec<ParamSpec>> {
    let mut specs = cfg.backbone()?.param_specs();
    specs.extend(adapter_specs(cfg)?);
    Ok(specs)
}

/// SHA-256 over the names and little-endian bytes of every backbone entry.
pub fn backbone_hash(store: &ParamStore) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in store
        .iter()
        .filter(|(n, _)| n.starts_with("visual.") || n.starts_with("text."))
    {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

impl Model {
    /// Builds and initializes a model: backbone weights from
    /// `backbone_seed`, identity adapters, zero offsets, and the head.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        if model.config.proj_init == ProjInit::Aligned {
            model.align_projection()?;
        }
        Ok(model)
    }

    /// Allocates every parameter without the projection warm start.
    pub fn skeleton(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let backbone = config.backbone()?;
        let shape = config.modulation_shape()?;
        let layers = shape.layers.clone();
        let modulator = build_modulator(config.decompose, shape)?;
        let textmod = config.text_mod.map(|level| TextModulation {
            layers: config.text.layers,
            dim: config.text.dim,
            level,
        });
        let selector = selector_registry().create(config.selection.name(), &())?;

        let mut store = ParamStore::new();
        store.allocate(&backbone.param_specs(), &mut Rng::new(config.backbone_seed))?;
        let mut rng = Rng::new(mix(config.seed, ADAPTER_STREAM));
        store.allocate(&adapter_specs(&config)?, &mut Rng::new(mix(config.seed, HEAD_STREAM)))?;
        modulator.identity_init(&mut store, &mut rng)?;
        if let Some(tm) = &textmod {
            tm.identity_init(&mut store)?;
        }
        store.get_mut(LOG_TAU)?.data_mut()[0] = config.log_tau_init;
        Backbone::freeze(&mut store);
        Ok(Self {
            config,
            backbone,
            modulator,
            textmod,
            selector,
            layers,
            store,
        })
    }

    /// Ridge fit of the projection from pooled frozen video features to
    /// normalized frozen text features on a held-out generated set.
    fn align_projection(&mut self) -> Result<()> {
        let cfg = &self.config;
        let set = generate_dataset(mix(cfg.backbone_seed, ALIGN_STREAM), cfg.align_pairs, cfg)?;
        let (dv, dt) = (cfg.visual.dim, cfg.text.dim);
        let mut x = DMatrix::zeros(set.len(), dv);
        let mut y = DMatrix::zeros(set.len(), dt);
        let hooks = HookSet::new();
        for (i, pair) in set.pairs.iter().enumerate() {
            let mut tape = Tape::new();
            let feats = self
                .backbone
                .encode_video(&mut tape, &self.store, &pair.video, &hooks)?;
            let pooled = crate::asa::pool_video(&mut tape, feats.frame_cls)?;
            let text = self
                .backbone
                .encode_text(&mut tape, &self.store, &pair.caption, &hooks)?;
            let w = tape.l2_normalize(text.feature)?;
            for j in 0..dv {
                x[(i, j)] = tape.value(pooled).data()[j];
            }
            for j in 0..dt {
                y[(i, j)] = tape.value(w).data()[j];
            }
        }
        let gram = x.transpose() * &x + DMatrix::identity(dv, dv) * cfg.align_ridge;
        let rhs = x.transpose() * y;
        let p = gram
            .cholesky()
            .ok_or_else(|| Error::Numeric("projection warm start is singular".into()))?
            .solve(&rhs);
        let proj = self.store.get_mut(PROJ)?;
        for i in 0..dv {
            for j in 0..dt {
                proj.set(&[i, j], p[(i, j)]);
            }
        }
        Ok(())
    }

    pub fn backbone_hash(&self) -> [u8; 32] {
        backbone_hash(&self.store)
    }

    /// Normalized sentence embedding, `1×D_t`.
    pub fn encode_text(&self, tape: &mut Tape, caption: &[usize]) -> Result<Var> {
        let hook = self.textmod.as_ref().map(|tm| TextModHook {
            textmod: tm,
            store: &self.store,
        });
        let mut hooks = HookSet::new();
        if let Some(h) = &hook {
            for l in 1..=self.config.text.layers {
                hooks.modulate(l, h);
            }
        }
        let feats = self.backbone.encode_text(tape, &self.store, caption, &hooks)?;
        text_embedding(tape, feats.feature)
    }

    /// Runs the visual tower with modulation only (vanilla attention).
    fn modulated_video(&self, tape: &mut Tape, video: &Tensor) -> Result<VideoFeatures> {
        let hook = LormHook {
            modulator: self.modulator.as_ref(),
            store: &self.store,
        };
        let mut hooks = HookSet::new();
        for &l in &self.layers {
            hooks.modulate(l, &hook);
        }
        self.backbone.encode_video(tape, &self.store, video, &hooks)
    }

    /// The candidate sentence best matching the modulated video, by value.
    pub fn select_sentence(&self, video: &Tensor, candidates: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let feats = self.modulated_video(&mut tape, video)?;
        let pooled = crate::asa::pool_video(&mut tape, feats.frame_cls)?;
        let idx = select_sentence(tape.value(pooled), candidates, self.store.get(PROJ)?)?;
        Tensor::new(&[1, candidates.shape()[1]], candidates.row(idx).to_vec())
    }

    /// The sentence feature conditioning patch selection, when the selection
    /// mode uses one.
    pub fn video_sentence(&self, video: &Tensor, candidates: Option<&Tensor>) -> Result<Option<Tensor>> {
        match (self.config.asa && self.selector.mode().needs_text(), candidates) {
            (true, Some(c)) => Ok(Some(self.select_sentence(video, c)?)),
            (true, None) => Err(Error::Contract(
                "text-conditioned selection needs candidate sentences".into(),
            )),
            (false, _) => Ok(None),
        }
    }

    /// The configured asynchronous attention bound to this model.
    pub fn attention_op<'a>(&'a self, sentence: Option<&'a Tensor>) -> AsaAttention<'a> {
        AsaAttention {
            store: &self.store,
            selector: self.selector.as_ref(),
            sentence,
            proj: PROJ,
            k: self.config.top_k,
            axes: self.config.warp_axes,
            sampling: self.config.sampling,
            seed: self.config.seed,
        }
    }

    /// Full visual pass with modulation and asynchronous attention at the
    /// adapted layers. `candidates` are the sentence features available for
    /// text-conditioned selection.
    pub fn encode_video_features(
        &self,
        tape: &mut Tape,
        video: &Tensor,
        candidates: Option<&Tensor>,
    ) -> Result<VideoFeatures> {
        if !self.config.asa {
            return self.modulated_video(tape, video);
        }
        let sentence = self.video_sentence(video, candidates)?;
        let lorm = LormHook {
            modulator: self.modulator.as_ref(),
            store: &self.store,
        };
        let asa = self.attention_op(sentence.as_ref());
        let mut hooks = HookSet::new();
        for &l in &self.layers {
            hooks.modulate(l, &lorm).attend(l, &asa);
        }
        self.backbone.encode_video(tape, &self.store, video, &hooks)
    }

    /// Normalized video embedding, `1×D_t`.
    pub fn encode_video(&self, tape: &mut Tape, video: &Tensor, candidates: Option<&Tensor>) -> Result<Var> {
        let feats = self.encode_video_features(tape, video, candidates)?;
        let proj = tape.param(&self.store, PROJ)?;
        video_embedding(tape, feats.frame_cls, proj)
    }

    /// Value-only text embeddings, `Q×D_t`.
    pub fn text_embeddings(&self, data: &SyntheticDataset) -> Result<Tensor> {
        let rows = data
            .pairs
            .iter()
            .map(|p| {
                let mut tape = Tape::new();
                let e = self.encode_text(&mut tape, &p.caption)?;
                Ok(tape.value(e).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Value-only video embeddings, `V×D_t`, selecting sentences among
    /// `texts`.
    pub fn video_embeddings(&self, data: &SyntheticDataset, texts: &Tensor) -> Result<Tensor> {
        let rows = data
            .pairs
            .iter()
            .map(|p| {
                let mut tape = Tape::new();
                let e = self.encode_video(&mut tape, &p.video, Some(texts))?;
                Ok(tape.value(e).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Similarity of every video against every caption, diagonal pairing.
    pub fn similarity_matrix(&self, data: &SyntheticDataset) -> Result<SimilarityMatrix> {
        let texts = self.text_embeddings(data)?;
        let videos = self.video_embeddings(data, &texts)?;
        let mut tape = Tape::new();
        let v = tape.constant(videos);
        let t = tape.constant(texts);
        let s = similarity(&mut tape, v, t)?;
        SimilarityMatrix::diagonal(tape.value(s).clone())
    }

    /// Contrastive loss of one batch recorded on `tape`. Candidate sentences
    /// for selection are the batch's own captions.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &SyntheticDataset) -> Result<Var> {
        let texts: Vec<Var> = batch
            .pairs
            .iter()
            .map(|p| self.encode_text(tape, &p.caption))
            .collect::<Result<_>>()?;
        let text_mat = tape.concat(&texts, 0)?;
        let candidates = tape.value(text_mat).clone();
        let videos: Vec<Var> = batch
            .pairs
            .iter()
            .map(|p| self.encode_video(tape, &p.video, Some(&candidates)))
            .collect::<Result<_>>()?;
        let video_mat = tape.concat(&videos, 0)?;
        let sim = similarity(tape, video_mat, text_mat)?;
        let log_tau = tape.param(&self.store, LOG_TAU)?;
        contrastive_loss(tape, sim, log_tau)
    }
}
