use rap_core::harness::{generate_dataset, singular_values, Adam, ExperimentConfig, Model};
use rap_core::lorm::{build_modulator, factor_name, DecomposeMode, ModulationShape};
use rap_core::tensor::{ParamStore, Rng, Tape};

fn shape(rank: usize) -> ModulationShape {
    ModulationShape {
        frames: 4,
        tokens: 3,
        dim: 3,
        rank,
        layers: vec![1, 2],
    }
}

fn random_factors(mode: DecomposeMode, rank: usize, seed: u64) -> (Box<dyn rap_core::lorm::Modulator>, ParamStore) {
    let m = build_modulator(mode, shape(rank)).unwrap();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    store.allocate(&m.param_specs(), &mut rng).unwrap();
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.normal();
        }
    }
    (m, store)
}

#[test]
fn composed_rank_never_exceeds_factor_rank() {
    for mode in [
        DecomposeMode::Temporal,
        DecomposeMode::SpatialTemporal,
        DecomposeMode::SpatialTemporalLayer,
    ] {
        for seed in 0..20 {
            let (m, store) = random_factors(mode, 2, seed);
            for l in [1, 2] {
                let (c, s) = m.composed(&store, l).unwrap().unwrap();
                for t in [&c, &s] {
                    let sv = singular_values(t);
                    assert!(
                        sv[2..].iter().all(|&x| x <= 1e-9 * sv[0]),
                        "{mode:?} seed {seed}: {sv:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn identity_init_composes_exactly() {
    for mode in DecomposeMode::ALL {
        let m = build_modulator(mode, shape(2)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        store.allocate(&m.param_specs(), &mut rng).unwrap();
        m.identity_init(&mut store, &mut rng).unwrap();
        for l in [1, 2] {
            if let Some((c, s)) = m.composed(&store, l).unwrap() {
                assert!(c.data().iter().all(|&v| v == 1.0), "{mode:?}");
                assert!(s.data().iter().all(|&v| v == 0.0), "{mode:?}");
            }
        }
        assert!(m.composed(&store, 3).unwrap().is_none());
    }
}

#[test]
fn every_factor_receives_gradient_after_one_step() {
    let mut cfg = ExperimentConfig::toy();
    cfg.asa = false;
    cfg.pairs = 4;
    let data = generate_dataset(cfg.data_seed, cfg.pairs, &cfg).unwrap();
    let mut model = Model::new(cfg).unwrap();
    let grads = |model: &mut Model| {
        let mut tape = Tape::new();
        let loss = model.batch_loss(&mut tape, &data).unwrap();
        tape.backward(loss, &mut model.store).unwrap();
    };

    // At exact identity the shift's left factor is zero, so its right
    // factor sees no gradient yet.
    grads(&mut model);
    let sb = model.store.get(&factor_name(1, "s_b")).unwrap().grad().unwrap();
    assert!(sb.iter().all(|&g| g == 0.0));

    Adam::default().step(&mut model.store, 1e-3);
    grads(&mut model);
    for &l in &model.layers.clone() {
        for f in ["c_a", "c_b", "s_a", "s_b"] {
            let g = model.store.get(&factor_name(l, f)).unwrap().grad().unwrap();
            assert!(g.iter().any(|&x| x != 0.0), "layer {l} {f}");
        }
    }
}
