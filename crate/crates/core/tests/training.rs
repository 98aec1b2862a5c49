use geosurf::config::TrainConfig;
use geosurf::data::synthetic_blobs;
use geosurf::losses::distance_regularization;
use geosurf::tensor::{Graph, Tensor};
use geosurf::train::{
    batch_indices_for, discriminator_objective, generator_objective, prepare_inputs,
    sample_batch_indices, step_rng, train_step, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn five_hundred_steps_on_ten_images_stay_finite() {
    let cfg = TrainConfig::default();
    let data = synthetic_blobs(10, cfg.image_size, 11).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    for _ in 0..500 {
        let idx = batch_indices_for(&state, &cfg, data.len());
        let r = train_step(&mut state, &cfg, data.batch(&idx).unwrap()).unwrap();
        for v in [
            r.l_adv_g, r.l_adv_d, r.l_inp, r.l_dr, r.l_g, r.total_g, r.total_d,
        ] {
            assert!(v.is_finite(), "step {}: {r:?}", state.step);
        }
    }
    assert_eq!(state.history.len(), 500);
}

#[test]
fn ten_shot_sampling_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = [0usize; 10];
    for i in sample_batch_indices(&mut rng, 10, 10_000) {
        counts[i] += 1;
    }
    for c in counts {
        assert!((900..=1100).contains(&c), "{counts:?}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = TrainConfig::default();
    let state = TrainState::new(&cfg).unwrap();
    let data = synthetic_blobs(10, cfg.image_size, 1).unwrap();
    let mut rng = step_rng(cfg.seed, 0, 1);
    let inputs = prepare_inputs(
        &mut rng,
        &state.disc,
        &cfg,
        data.batch(&[0, 1, 2, 3]).unwrap(),
    )
    .unwrap();

    let mut g = Graph::new();
    let gv = state.gen.params.bind(&mut g, false);
    let dv = state.disc.params.bind(&mut g, true);
    let o = discriminator_objective(
        &mut g,
        &state.gen,
        &gv,
        &state.disc,
        &dv,
        &inputs,
        cfg.lambdas,
        cfg.adv_form,
    )
    .unwrap();
    let grads = g.backward(o.total).unwrap();
    for ((name, _), v) in state.disc.params.entries().iter().zip(&dv) {
        let gr = grads
            .get(*v)
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(gr.iter().any(|x| *x != 0.0), "{name} gradient is all zero");
    }

    let mut g = Graph::new();
    let gv = state.gen.params.bind(&mut g, true);
    let dv = state.disc.params.bind(&mut g, false);
    let o = generator_objective(
        &mut g,
        &state.gen,
        &gv,
        &state.disc,
        &dv,
        &inputs,
        cfg.lambdas,
    )
    .unwrap();
    let grads = g.backward(o.total).unwrap();
    for ((name, _), v) in state.gen.params.entries().iter().zip(&gv) {
        let gr = grads
            .get(*v)
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(gr.iter().any(|x| *x != 0.0), "{name} gradient is all zero");
    }
}

#[test]
fn distance_regularization_is_nonnegative_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let k = rng.random_range(2..9);
        let (c, h) = (rng.random_range(1..4), rng.random_range(1..9));
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let maps: Vec<Tensor> = (0..k)
            .map(|_| {
                let data = (0..c * h * h)
                    .map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0))
                    .collect();
                Tensor::new(vec![c, h, h], data).unwrap()
            })
            .collect();
        let l = distance_regularization(&maps).unwrap();
        // Exact zeros (k = 2 has equal cyclic distances) may round to -1e-16.
        assert!(l >= -1e-12, "k={k} c={c} h={h}: {l}");
    }
}
