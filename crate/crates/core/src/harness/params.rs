//! Trainable-parameter accounting from declarations, cross-checked against
//! closed forms.

use std::fmt;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::model::model_specs;
use crate::error::{Error, Result};
use crate::lorm::{build_modulator, DecomposeMode, TextModulation};
use crate::retrieval::{LOG_TAU, PROJ};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub lorm_visual: usize,
    pub lorm_text: usize,
    pub asa_offsets: usize,
    pub proj: usize,
    pub tau: usize,
    pub frozen_backbone: usize,
}

impl ParamCounts {
    pub fn trainable(&self) -> usize {
        self.lorm_visual + self.lorm_text + self.asa_offsets + self.proj + self.tau
    }

    pub fn total(&self) -> usize {
        self.trainable() + self.frozen_backbone
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable() as f64 / self.total() as f64
    }
}

impl fmt::Display for ParamCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("lorm-visual", self.lorm_visual),
            ("lorm-text", self.lorm_text),
            ("asa-offsets", self.asa_offsets),
            ("proj", self.proj),
            ("tau", self.tau),
            ("trainable", self.trainable()),
            ("frozen-backbone", self.frozen_backbone),
            ("total", self.total()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<16} {v:>12}")?;
        }
        write!(
            f,
            "{:<16} {:>11.4}%",
            "trainable-share",
            100.0 * self.trainable_fraction()
        )
    }
}

/// Counts trainable scalars per group by enumerating declarations, then
/// checks each group against its closed form.
pub fn count_params(cfg: &ExperimentConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let mut c = ParamCounts::default();
    for spec in model_specs(cfg)? {
        let n = spec.numel();
        if !spec.trainable {
            if spec.name.starts_with("visual.") || spec.name.starts_with("text.") {
                c.frozen_backbone += n;
            }
            continue;
        }
        let group = match spec.name.as_str() {
            PROJ => &mut c.proj,
            LOG_TAU => &mut c.tau,
            s if s.starts_with("lorm.") => &mut c.lorm_visual,
            s if s.starts_with("textmod.") => &mut c.lorm_text,
            s if s.starts_with("asa.") => &mut c.asa_offsets,
            s => return Err(Error::Consistency(format!("parameter `{s}` belongs to no group"))),
        };
        *group += n;
    }

    let shape = cfg.modulation_shape()?;
    let (t, d, r, m) = (shape.frames, shape.dim, shape.rank, shape.layers.len());
    let expect_visual = match cfg.decompose {
        DecomposeMode::Temporal => m * 2 * (t * r + r * d),
        _ => build_modulator(cfg.decompose, shape)?.closed_form_count(),
    };
    let expect_text = cfg.text_mod.map_or(0, |level| {
        TextModulation {
            layers: cfg.text.layers,
            dim: cfg.text.dim,
            level,
        }
        .closed_form_count()
    });
    let expect_offsets = if cfg.asa {
        cfg.warp_axes.spatial() as usize * cfg.visual.patches() + cfg.warp_axes.temporal() as usize * t
    } else {
        0
    };
    let expect_head = if cfg.train_head {
        (cfg.visual.dim * cfg.text.dim, 1)
    } else {
        (0, 0)
    };
    let checks = [
        ("lorm-visual", c.lorm_visual, expect_visual),
        ("lorm-text", c.lorm_text, expect_text),
        ("asa-offsets", c.asa_offsets, expect_offsets),
        ("proj", c.proj, expect_head.0),
        ("tau", c.tau, expect_head.1),
    ];
    for (group, got, want) in checks {
        if got != want {
            return Err(Error::Consistency(format!(
                "{group}: enumerated {got} trainable scalars, closed form gives {want}"
            )));
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_and_large_counts() {
        let toy = count_params(&ExperimentConfig::toy()).unwrap();
        assert_eq!(toy.lorm_visual, 912);
        assert_eq!(toy.asa_offsets, 4 + 6);

        let big = count_params(&ExperimentConfig::vit_b32()).unwrap();
        assert_eq!(big.lorm_visual, 56_160);
        assert_eq!(big.asa_offsets, 61);
        assert!(big.trainable_fraction() < 0.02);
    }

    #[test]
    fn frozen_axes_are_not_counted() {
        let mut cfg = ExperimentConfig::toy();
        cfg.warp_axes = crate::asa::WarpAxes::TemporalOnly;
        assert_eq!(count_params(&cfg).unwrap().asa_offsets, 6);
        cfg.asa = false;
        assert_eq!(count_params(&cfg).unwrap().asa_offsets, 0);
    }

    #[test]
    fn zero_rank_is_a_config_error() {
        let mut cfg = ExperimentConfig::toy();
        cfg.rank = 0;
        assert!(matches!(count_params(&cfg), Err(Error::Config(_))));
    }
}
