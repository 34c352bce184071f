//! Ablation suites: each suite derives a list of named variants from a base
//! configuration; every variant is trained and evaluated on the same data.

use std::fmt::Write as _;

use serde::Serialize;

use super::config::{ExperimentConfig, LayerSet};
use super::data::generate_dataset;
use super::params::count_params;
use super::train::train;
use crate::asa::{SelectionMode, WarpAxes};
use crate::error::Result;
use crate::lorm::DecomposeMode;
use crate::registry::Registry;
use crate::retrieval::MetricsReport;

pub trait Suite: Send + Sync {
    fn name(&self) -> &'static str;
    fn variants(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)>;
}

fn variant(base: &ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut c = base.clone();
    edit(&mut c);
    c
}

/// Frozen backbone plus head versus each adapter alone and together.
struct Components;

impl Suite for Components {
    fn name(&self) -> &'static str {
        "components"
    }

    fn variants(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let baseline = variant(base, |c| {
            c.decompose = DecomposeMode::None;
            c.asa = false;
            c.text_mod = None;
        });
        vec![
            ("none/none".into(), baseline.clone()),
            (
                "lorm".into(),
                variant(&baseline, |c| {
                    c.decompose = base.decompose;
                    c.text_mod = base.text_mod;
                }),
            ),
            ("asa".into(), variant(&baseline, |c| c.asa = true)),
            ("lorm+asa".into(), base.clone()),
        ]
    }
}

struct Decompose;

impl Suite for Decompose {
    fn name(&self) -> &'static str {
        "decompose"
    }

    fn variants(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        DecomposeMode::ALL
            .iter()
            .map(|&m| (m.name().to_string(), variant(base, |c| c.decompose = m)))
            .collect()
    }
}

struct Selection;

impl Suite for Selection {
    fn name(&self) -> &'static str {
        "selection"
    }

    fn variants(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        SelectionMode::ALL
            .iter()
            .map(|&m| {
                (
                    m.name().to_string(),
                    variant(base, |c| {
                        c.asa = true;
                        c.selection = m;
                    }),
                )
            })
            .collect()
    }
}

struct Warp;

impl Suite for Warp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn variants(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        WarpAxes::ALL
            .iter()
            .map(|&a| {
                (
                    a.name().to_string(),
                    variant(base, |c| {
                        c.asa = true;
                        c.warp_axes = a;
                    }),
                )
            })
            .collect()
    }
}

/// All layers, the last four (the light configuration), and the last two.
struct Layers;

impl Suite for Layers {
    fn name(&self) -> &'static str {
        "layers"
    }

    fn variants(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let depth = base.visual.layers;
        [
            LayerSet::All,
            LayerSet::Last(4.min(depth)),
            LayerSet::Last(2.min(depth)),
        ]
        .into_iter()
        .zip(["all", "last-4", "last-2"])
        .map(|(set, label)| (label.to_string(), variant(base, |c| c.adapter_layers = set)))
        .collect()
    }
}

pub fn suite_registry() -> Registry<dyn Suite> {
    let mut r: Registry<dyn Suite> = Registry::new("ablation suite");
    r.register("components", |_| Box::new(Components))
        .register("decompose", |_| Box::new(Decompose))
        .register("selection", |_| Box::new(Selection))
        .register("warp", |_| Box::new(Warp))
        .register("layers", |_| Box::new(Layers));
    r
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub trainable_params: usize,
    pub steps: usize,
    pub steps_to_perfect: Option<usize>,
    pub final_loss: Option<f64>,
    pub text_to_video: MetricsReport,
    pub video_to_text: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub suite: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mode: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Aligned-column table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "suite: {}", self.suite);
        let _ = writeln!(
            s,
            "{:<24} {:>9} {:>6} {:>8} {:>7} {:>7} {:>7} {:>6} {:>6} {:>7} {:>6}",
            "mode", "params", "steps", "perfect@", "t2v@1", "t2v@5", "t2v@10", "MdR", "MnR", "v2t@1", "v2tMnR"
        );
        for r in &self.rows {
            let t = &r.text_to_video;
            let v = &r.video_to_text;
            let _ = writeln!(
                s,
                "{:<24} {:>9} {:>6} {:>8} {:>7.3} {:>7.3} {:>7.3} {:>6.1} {:>6.2} {:>7.3} {:>6.2}",
                r.mode,
                r.trainable_params,
                r.steps,
                r.steps_to_perfect.map_or("-".to_string(), |n| n.to_string()),
                t.r_at[&1],
                t.r_at[&5],
                t.r_at[&10],
                t.mdr,
                t.mnr,
                v.r_at[&1],
                v.mnr
            );
        }
        s
    }
}

/// Trains and evaluates every variant of `suite` on one shared dataset.
pub fn run_ablation(suite: &str, base: &ExperimentConfig) -> Result<AblationReport> {
    let suite = suite_registry().create(suite, &())?;
    let data = generate_dataset(base.data_seed, base.pairs, base)?;
    let rows = suite
        .variants(base)
        .into_iter()
        .map(|(mode, cfg)| {
            let params = count_params(&cfg)?.trainable();
            let out = train(&cfg, &data)?;
            let last = out.history.last().expect("history starts with the initial evaluation");
            Ok(AblationRow {
                mode,
                trainable_params: params,
                steps: out.steps,
                steps_to_perfect: out.steps_to_perfect,
                final_loss: last.loss,
                text_to_video: last.eval.text_to_video.clone(),
                video_to_text: last.eval.video_to_text.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        suite: suite.name().to_string(),
        rows,
    })
}
