//! CSV exports of learned modulation and patch-to-patch attention affinity.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::data::SyntheticDataset;
use super::model::Model;
use crate::asa::{warp_field, DELTA, GAMMA};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Singular values, descending, of `t` viewed as `(numel / D) × D` with `D`
/// its last axis.
pub fn singular_values(t: &Tensor) -> Vec<f64> {
    let d = *t.shape().last().unwrap_or(&1);
    let rows = t.numel() / d.max(1);
    let m = DMatrix::from_row_slice(rows, d, t.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Per-frame view of a composed modulation: `T×D` as is, `T×S×D` averaged
/// over tokens.
pub fn per_frame(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [_, _] => Ok(t.clone()),
        [frames, tokens, d] => Ok(Tensor::from_fn(&[frames, d], |i| {
            let (f, j) = (i / d, i % d);
            (0..tokens).map(|s| t.get(&[f, s, j])).sum::<f64>() / tokens as f64
        })),
        _ => Err(Error::dim("per_frame", t.shape(), &[0, 0])),
    }
}

/// Head-averaged scaled dot product between one query patch and the
/// (warped) keys of every patch of every frame at `layer`. Returns `T×N`.
pub fn attention_map(
    model: &Model,
    video: &Tensor,
    candidates: Option<&Tensor>,
    layer: usize,
    query: (usize, usize),
) -> Result<Tensor> {
    let v = &model.config.visual;
    let (t_len, n) = (v.frames, v.patches());
    if layer == 0 || layer > v.layers || query.0 >= t_len || query.1 >= n {
        return Err(Error::Config(format!(
            "query {query:?} at layer {layer} outside {t_len} frames × {n} patches × {} layers",
            v.layers
        )));
    }
    let mut tape = Tape::new();
    let feats = model.encode_video_features(&mut tape, video, candidates)?;
    let input = if layer == 1 {
        tape.constant(model.backbone.patchify(&model.store, video)?)
    } else {
        feats.layers[layer - 2].x
    };
    let prefix = Backbone::visual_block_prefix(layer);
    let wq = tape.param(&model.store, &format!("{prefix}.attn.wq"))?;
    let wk = tape.param(&model.store, &format!("{prefix}.attn.wk"))?;
    let normed = tape.layer_norm(input)?;
    let q = tape.matmul(normed, wq)?;
    let k = tape.matmul(normed, wk)?;
    let mut k_patch = tape.narrow(k, 1, 1, n)?;
    if model.config.asa && model.layers.contains(&layer) {
        let sentence = model.video_sentence(video, candidates)?;
        let op = model.attention_op(sentence.as_ref());
        let selection = op.selection(tape.value(input), layer)?;
        let offset = |tape: &mut Tape, name: &str, on: bool| -> Result<_> {
            let t = model.store.get(name)?.clone();
            Ok(tape.constant(if on { t } else { Tensor::zeros(t.shape()) }))
        };
        let gamma = offset(&mut tape, GAMMA, model.config.warp_axes.spatial())?;
        let delta = offset(&mut tape, DELTA, model.config.warp_axes.temporal())?;
        k_patch = warp_field(&mut tape, k_patch, gamma, delta, &selection, model.config.sampling)?;
    }
    let qv = tape.value(q);
    let kv = tape.value(k_patch);
    let d = v.dim;
    let heads = v.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qrow: Vec<f64> = (0..d).map(|j| qv.get(&[query.0, query.1 + 1, j])).collect();
    Ok(Tensor::from_fn(&[t_len, n], |i| {
        let (t, p) = (i / n, i % n);
        (0..heads)
            .map(|h| {
                (h * dh..(h + 1) * dh)
                    .map(|j| qrow[j] * kv.get(&[t, p, j]))
                    .sum::<f64>()
                    * scale
            })
            .sum::<f64>()
            / heads as f64
    }))
}

fn write_csv(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn matrix_rows(t: &Tensor) -> impl Iterator<Item = Vec<f64>> + '_ {
    let c = t.shape()[1];
    t.data().chunks(c.max(1)).map(<[f64]>::to_vec)
}

/// Writes, for every adapted layer, the per-frame scale and shift (`T×D_v`)
/// and the scale's singular spectrum; then the affinity map (`T×N`) of the
/// first video's `query` patch at the last adapted layer. Returns the paths
/// written.
pub fn export_diagnostics(
    model: &Model,
    data: &SyntheticDataset,
    out_dir: &Path,
    query: (usize, usize),
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &l in &model.layers {
        let Some((c, s)) = model.modulator.composed(&model.store, l)? else {
            continue;
        };
        let scale = out_dir.join(format!("modulation_layer{l}_scale.csv"));
        write_csv(&scale, matrix_rows(&per_frame(&c)?))?;
        let shift = out_dir.join(format!("modulation_layer{l}_shift.csv"));
        write_csv(&shift, matrix_rows(&per_frame(&s)?))?;
        let spectrum = out_dir.join(format!("modulation_layer{l}_spectrum.csv"));
        write_csv(&spectrum, singular_values(&c).into_iter().map(|v| vec![v]))?;
        written.extend([scale, shift, spectrum]);
    }
    let first = data
        .pairs
        .first()
        .ok_or_else(|| Error::Input("diagnostics need at least one video".into()))?;
    let texts = model.text_embeddings(data)?;
    let layer = *model.layers.last().unwrap_or(&model.config.visual.layers);
    let map = attention_map(model, &first.video, Some(&texts), layer, query)?;
    let path = out_dir.join(format!("similarity_layer{layer}_frame{}_patch{}.csv", query.0, query.1));
    write_csv(&path, matrix_rows(&map))?;
    written.push(path);
    Ok(written)
}
