use rap_core::backbone::{Backbone, HookSet, TextConfig, VisualConfig};
use rap_core::tensor::{ParamStore, Rng, Tape, Tensor};

fn backbone() -> Backbone {
    Backbone::new(
        VisualConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            patch: 2,
            height: 4,
            width: 4,
            channels: 2,
            frames: 3,
            mlp_ratio: 2,
        },
        TextConfig {
            layers: 2,
            dim: 6,
            heads: 2,
            vocab: 4,
            max_len: 5,
            mlp_ratio: 2,
        },
    )
    .unwrap()
}

fn store(b: &Backbone, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    s.allocate(&b.param_specs(), &mut Rng::new(seed)).unwrap();
    s
}

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-loop pre-norm block.
fn block(x: &Mat, s: &ParamStore, prefix: &str, heads: usize) -> Mat {
    let w = |n: &str| mat(s.get(&format!("{prefix}.{n}")).unwrap());
    let bias = |n: &str| s.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let h = layer_norm(x);
    let (q, k, v) = (
        matmul(&h, &w("attn.wq")),
        matmul(&h, &w("attn.wk")),
        matmul(&h, &w("attn.wv")),
    );
    let d = x[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; x.len()];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..x.len() {
            let scores: Vec<f64> = (0..x.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|v| (v - m).exp()).sum();
            for c in cols.clone() {
                ctx[i][c] = (0..x.len()).map(|j| (scores[j] - m).exp() / z * v[j][c]).sum();
            }
        }
    }
    let attn = matmul(&ctx, &w("attn.wo"));
    let x: Mat = x
        .iter()
        .zip(&attn)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    let h = layer_norm(&x);
    let b1 = bias("mlp.b1");
    let b2 = bias("mlp.b2");
    let h: Mat = matmul(&h, &w("mlp.w1"))
        .into_iter()
        .map(|r| r.iter().zip(&b1).map(|(a, b)| gelu(a + b)).collect())
        .collect();
    let out = matmul(&h, &w("mlp.w2"));
    x.iter()
        .zip(&out)
        .map(|(a, o)| a.iter().zip(o).zip(&b2).map(|((p, q), b)| p + q + b).collect())
        .collect()
}

#[test]
fn text_tower_matches_loop_oracle() {
    let b = backbone();
    let s = store(&b, 21);
    let tokens = [0usize, 2, 1];
    let mut tape = Tape::new();
    let feats = b.encode_text(&mut tape, &s, &tokens, &HookSet::new()).unwrap();

    let emb = mat(s.get("text.tok_emb").unwrap());
    let pos = mat(s.get("text.pos").unwrap());
    let mut x: Mat = tokens
        .iter()
        .chain(std::iter::once(&b.text.eos()))
        .enumerate()
        .map(|(i, &id)| emb[id].iter().zip(&pos[i]).map(|(a, p)| a + p).collect())
        .collect();
    for l in 1..=b.text.layers {
        x = block(&x, &s, &Backbone::text_block_prefix(l), b.text.heads);
        let got = tape.value(feats.layers[l - 1]).data();
        for (g, w) in got.iter().zip(x.last().unwrap()) {
            assert!((g - w).abs() < 1e-12, "layer {l}: {g} vs {w}");
        }
    }
}

#[test]
fn visual_tower_matches_loop_oracle_per_frame() {
    let b = backbone();
    let s = store(&b, 22);
    let v = &b.visual;
    let mut rng = Rng::new(3);
    let video = Tensor::from_fn(&[v.frames, v.height, v.width, v.channels], |_| rng.normal());
    let mut tape = Tape::new();
    let feats = b.encode_video(&mut tape, &s, &video, &HookSet::new()).unwrap();
    let embedded = b.patchify(&s, &video).unwrap();
    let tokens = v.tokens();
    let out = tape.value(feats.layers.last().unwrap().x);
    for f in 0..v.frames {
        let mut x: Mat = (0..tokens)
            .map(|t| embedded.data()[(f * tokens + t) * v.dim..][..v.dim].to_vec())
            .collect();
        for l in 1..=v.layers {
            x = block(&x, &s, &Backbone::visual_block_prefix(l), v.heads);
        }
        for (t, row) in x.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((out.get(&[f, t, j]) - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoding_leaves_backbone_untouched() {
    let b = backbone();
    let mut s = store(&b, 23);
    let before = s.clone();
    let v = &b.visual;
    let video = Tensor::ones(&[v.frames, v.height, v.width, v.channels]);
    let mut tape = Tape::new();
    let feats = b.encode_video(&mut tape, &s, &video, &HookSet::new()).unwrap();
    let loss = tape.sum(feats.frame_cls);
    tape.backward(loss, &mut s).unwrap();
    for ((n, a), (_, z)) in s.iter().zip(before.iter()) {
        assert!(a.bit_eq(z), "{n} changed");
        assert!(!a.requires_grad());
        assert!(
            a.grad().is_none_or(|g| g.iter().all(|&x| x == 0.0)),
            "{n} has a gradient"
        );
    }
}
