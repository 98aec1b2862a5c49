//! Acceptance criteria, run sequentially so runtimes are measured without
//! contention. Each criterion prints one PASS/FAIL line; the test fails if
//! any criterion fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use geosurf::checkpoint::load_checkpoint;
use geosurf::config::{DatasetSource, TrainConfig};
use geosurf::geometry::{
    geodesic_curve_point, geodesic_distance, geodesic_surface_point, GeodesicSpec, PreShape,
    WeightVector,
};
use geosurf::gradsuite::{run_gradient_suite, GradTarget};
use geosurf::losses::{
    cyclic_distances_var, distance_regularization, distance_regularization_var, distance_target,
};
use geosurf::metrics::frechet_feature_distance;
use geosurf::run::{checkpoint_dir, resume, run_ablation, train, LOSSES_CSV};
use geosurf::tensor::{Graph, Tensor};
use geosurf::train::{
    discriminator_objective, generator_objective, prepare_inputs, step_rng, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random_preshape(rng: &mut ChaCha8Rng, m: usize) -> PreShape {
    let flat: Vec<f64> = (0..2 * m).map(|_| StandardNormal.sample(rng)).collect();
    PreShape::project(&flat).unwrap()
}

fn max_abs_diff(a: &PreShape, b: &PreShape) -> f64 {
    a.points()
        .iter()
        .zip(b.points())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn invariant_error(p: &PreShape) -> f64 {
    let (mx, my) = p.row_means();
    mx.abs().max(my.abs()).max((p.norm() - 1.0).abs())
}

fn geometry_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut proj, mut endpoint, mut along, mut onehot, mut scaling) =
        (0f64, 0f64, 0f64, 0f64, 0f64);
    for m in [8, 64, 512] {
        for _ in 0..1000 {
            let a = random_preshape(&mut rng, m);
            let b = random_preshape(&mut rng, m);
            proj = proj.max(invariant_error(&a)).max(invariant_error(&b));
            let d = geodesic_distance(&a, &b);
            let p0 = geodesic_curve_point(&GeodesicSpec::new(&a, &b, 0.0).unwrap()).unwrap();
            let p1 = geodesic_curve_point(&GeodesicSpec::new(&a, &b, d).unwrap()).unwrap();
            endpoint = endpoint
                .max(max_abs_diff(&p0, &a))
                .max(max_abs_diff(&p1, &b));
            let s = rng.random::<f64>() * d;
            let mid = geodesic_curve_point(&GeodesicSpec::new(&a, &b, s).unwrap()).unwrap();
            along = along.max(invariant_error(&mid));

            let c = random_preshape(&mut rng, m);
            let taus = [a.clone(), b.clone(), c];
            let j = rng.random_range(0..3);
            let hit = geodesic_surface_point(&taus, &WeightVector::one_hot(3, j).unwrap()).unwrap();
            onehot = onehot.max(max_abs_diff(&hit, &taus[j]));
            let w: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.01).collect();
            let factor = 10f64.powf(rng.random_range(-3.0..3.0));
            let p = geodesic_surface_point(&taus, &WeightVector::new(w.clone()).unwrap()).unwrap();
            let scaled: Vec<f64> = w.iter().map(|x| x * factor).collect();
            let q = geodesic_surface_point(&taus, &WeightVector::new(scaled).unwrap()).unwrap();
            scaling = scaling.max(max_abs_diff(&p, &q));
        }
    }
    let elapsed = start.elapsed();
    let passed = proj <= 1e-9
        && endpoint <= 1e-7
        && along <= 1e-9
        && onehot <= 1e-9
        && scaling <= 1e-12
        && elapsed < Duration::from_secs(10);
    outcome(
        passed,
        format!(
            "projection {proj:.1e}, endpoints {endpoint:.1e}, along-curve {along:.1e}, one-hot {onehot:.1e}, \
             scaling {scaling:.1e}, {elapsed:.2?}"
        ),
    )
}

fn surface_curve_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for i in 0..1000 {
        let m = [8, 64, 512][i % 3];
        let a = random_preshape(&mut rng, m);
        let b = random_preshape(&mut rng, m);
        let w = vec![rng.random::<f64>() + 1e-3, rng.random::<f64>() + 1e-3];
        let surface = geodesic_surface_point(
            &[a.clone(), b.clone()],
            &WeightVector::new(w.clone()).unwrap(),
        )
        .unwrap();
        let curve =
            geodesic_curve_point(&GeodesicSpec::at_fraction(&a, &b, w[1] / (w[0] + w[1])).unwrap())
                .unwrap();
        worst = worst.max(max_abs_diff(&surface, &curve));
    }
    outcome(
        worst <= 1e-9,
        format!("max deviation {worst:.1e} over 1000 cases"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let suites = run_gradient_suite(GradTarget::All, 0).unwrap();
    let elapsed = start.elapsed();
    let worst = suites.iter().map(|s| s.pass_fraction).fold(1.0, f64::min);
    let failing: Vec<&str> = suites
        .iter()
        .filter(|s| !s.passed())
        .map(|s| s.name.as_str())
        .collect();
    outcome(
        failing.is_empty() && suites.len() == 10 && elapsed < Duration::from_secs(120),
        format!(
            "{} suites, min pass fraction {worst:.4}, failing {failing:?}, {elapsed:.2?}",
            suites.len()
        ),
    )
}

/// Adaptive average pooling cell `i` of `n` inputs into `out` cells.
fn cell(i: usize, n: usize, out: usize) -> (usize, usize) {
    ((i * n) / out, ((i + 1) * n).div_ceil(out))
}

/// Scalar reference for the distance regularizer over `[c, h, w]` maps.
fn regularizer_oracle(maps: &[Vec<f64>], c: usize, h: usize, w: usize) -> f64 {
    let (oh, ow) = (h.div_ceil(4), w.div_ceil(4));
    let pooled: Vec<Vec<f64>> = maps
        .iter()
        .map(|f| {
            let mut out = Vec::new();
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let (r0, r1) = cell(i, h, oh);
                        let (c0, c1) = cell(j, w, ow);
                        let mut s = 0.0;
                        for r in r0..r1 {
                            for q in c0..c1 {
                                s += f[ch * h * w + r * w + q];
                            }
                        }
                        out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                    }
                }
            }
            out
        })
        .collect();
    let k = maps.len();
    let dist: Vec<f64> = (0..k)
        .map(|i| {
            let (a, b) = (&pooled[i], &pooled[(i + 1) % k]);
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let top = dist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + dist.iter().map(|d| (d - top).exp()).sum::<f64>().ln();
    let mut q = vec![1.0; k];
    q[k - 1] = (k - 1) as f64;
    let total: f64 = q.iter().sum();
    (0..k)
        .map(|i| {
            let qi = q[i] / total;
            qi * (qi.ln() - (dist[i] - lse))
        })
        .sum::<f64>()
        / k as f64
}

fn regularizer_oracle_suite() -> Outcome {
    let target_exact = distance_target(4).unwrap() == vec![1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut min_loss) = (0f64, f64::INFINITY);
    for _ in 0..100 {
        let k = rng.random_range(2..9);
        let (c, h, w) = (
            rng.random_range(1..5),
            rng.random_range(1..20),
            rng.random_range(1..20),
        );
        let maps: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..c * h * w)
                    .map(|_| rng.random::<f64>() * 4.0 - 2.0)
                    .collect()
            })
            .collect();
        let tensors: Vec<Tensor> = maps
            .iter()
            .map(|m| Tensor::new(vec![c, h, w], m.clone()).unwrap())
            .collect();
        let got = distance_regularization(&tensors).unwrap();
        worst = worst.max((got - regularizer_oracle(&maps, c, h, w)).abs());
        min_loss = min_loss.min(got);
    }

    let (k, c, h) = (4, 8, 16);
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut feats = Tensor::new(
        vec![k, c, h, h],
        (0..k * c * h * h)
            .map(|_| normal.sample(&mut rng))
            .collect(),
    )
    .unwrap();
    let q = distance_target(k).unwrap();
    let gap = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let d = cyclic_distances_var(&mut g, v).unwrap();
        let d = g.value(d).to_vec();
        let top = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = d.iter().map(|x| (x - top).exp()).sum();
        d.iter()
            .zip(&q)
            .map(|(x, qi)| ((x - top).exp() / z - qi).abs())
            .fold(0.0, f64::max)
    };
    let initial_gap = gap(&feats);
    let mut steps = 0;
    while steps < 200 && gap(&feats) >= 0.05 {
        let mut g = Graph::new();
        let v = g.leaf(&feats.clone().tracked());
        let l = distance_regularization_var(&mut g, v).unwrap();
        let grads = g.backward(l).unwrap();
        let grad = grads.get(v).unwrap();
        let data: Vec<f64> = feats
            .data()
            .iter()
            .zip(grad)
            .map(|(x, gr)| x - 10.0 * gr)
            .collect();
        feats = Tensor::new(feats.shape().to_vec(), data).unwrap();
        steps += 1;
    }
    let final_gap = gap(&feats);
    outcome(
        target_exact && worst <= 1e-10 && min_loss >= -1e-12 && final_gap < 0.05,
        format!(
            "target exact {target_exact}, oracle deviation {worst:.1e}, min loss {min_loss:.1e}, \
             descent gap {initial_gap:.3} -> {final_gap:.4} in {steps} steps"
        ),
    )
}

fn routing() -> Outcome {
    let cfg = TrainConfig::default();
    let s = TrainState::new(&cfg).unwrap();
    let data = cfg.dataset.load(cfg.image_size).unwrap();
    let mut rng = step_rng(cfg.seed, 0, 1);
    let inputs =
        prepare_inputs(&mut rng, &s.disc, &cfg, data.batch(&[0, 2, 4, 6]).unwrap()).unwrap();
    let max_abs = |grads: &geosurf::tensor::Gradients, vars: &[geosurf::tensor::Var]| {
        vars.iter()
            .filter_map(|v| grads.get(*v))
            .flat_map(|x| x.iter().map(|e| e.abs()))
            .fold(0.0, f64::max)
    };

    let mut g = Graph::new();
    let gv = s.gen.params.bind(&mut g, true);
    let dv = s.disc.params.bind(&mut g, true);
    let d = discriminator_objective(
        &mut g,
        &s.gen,
        &gv,
        &s.disc,
        &dv,
        &inputs,
        cfg.lambdas,
        cfg.adv_form,
    )
    .unwrap();
    let grads = g.backward(d.l_g.unwrap()).unwrap();
    let (lg_on_g, lg_on_d) = (max_abs(&grads, &gv), max_abs(&grads, &dv));

    let mut g = Graph::new();
    let gv = s.gen.params.bind(&mut g, true);
    let dv = s.disc.params.bind(&mut g, true);
    let o = generator_objective(&mut g, &s.gen, &gv, &s.disc, &dv, &inputs, cfg.lambdas).unwrap();
    let grads = g.backward(o.l_dr.unwrap()).unwrap();
    let (ldr_on_d, ldr_on_g) = (max_abs(&grads, &dv), max_abs(&grads, &gv));

    outcome(
        lg_on_g <= 1e-12 && ldr_on_d <= 1e-12 && lg_on_d > 0.0 && ldr_on_g > 0.0,
        format!(
            "L_g on generator {lg_on_g:.1e} (on discriminator {lg_on_d:.1e}), \
             L_dr on discriminator {ldr_on_d:.1e} (on generator {ldr_on_g:.1e})"
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ablation(root: &Path) -> Outcome {
    let cfg = TrainConfig {
        steps: 2000,
        dataset: DatasetSource::Synthetic { n: 10, seed: 0 },
        image_size: 16,
        out_dir: root.join("ablation"),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let rows = run_ablation(&cfg, &[0, 1, 2]).unwrap();
    let elapsed = start.elapsed();
    let pick = |f: &dyn Fn(&geosurf::run::AblationRow) -> bool,
                m: &dyn Fn(&geosurf::run::AblationRow) -> f64| {
        median(rows.iter().filter(|r| f(r)).map(m).collect())
    };
    let smooth_on = pick(&|r| r.iandr_on, &|r| r.metrics.smoothness);
    let smooth_off = pick(&|r| !r.iandr_on, &|r| r.metrics.smoothness);
    let div_full = pick(&|r| r.fags_on && r.iandr_on, &|r| {
        r.metrics.pairwise_diversity
    });
    let div_plain = pick(&|r| !r.fags_on && !r.iandr_on, &|r| {
        r.metrics.pairwise_diversity
    });
    let finite = rows.iter().all(|r| r.all_finite);
    let ratio = smooth_on / smooth_off;
    let (a, b) = (ratio <= 0.8, div_full >= div_plain);
    outcome(
        a && b && finite && elapsed < Duration::from_secs(30 * 60),
        format!(
            "(a) smoothness median I&R on {smooth_on:.4} / off {smooth_off:.4} = {ratio:.3} [{}]; \
             (b) diversity full {div_full:.4} vs plain {div_plain:.4} [{}]; (c) finite {finite}; {elapsed:.1?}",
            if a { "ok" } else { "needs <= 0.8" },
            if b { "ok" } else { "below baseline" },
        ),
    )
}

fn determinism(root: &Path) -> Outcome {
    let base = TrainConfig {
        steps: 251,
        checkpoint_every: 250,
        ..TrainConfig::default()
    };
    let run = |name: &str, steps: u64| {
        let cfg = TrainConfig {
            steps,
            out_dir: root.join(name),
            ..base.clone()
        };
        train(&cfg).unwrap();
        cfg
    };
    run("a", 251);
    run("b", 251);
    let read = |name: &str| fs::read(root.join(name).join(LOSSES_CSV)).unwrap();
    let identical = read("a") == read("b");

    let mut cfg = run("c", 250);
    cfg.steps = 251;
    resume(&cfg, &checkpoint_dir(&root.join("c"), 250)).unwrap();
    let continuous = load_checkpoint(&checkpoint_dir(&root.join("a"), 251)).unwrap();
    let resumed = load_checkpoint(&checkpoint_dir(&root.join("c"), 251)).unwrap();
    let resume_equal = continuous == resumed && read("a") == read("c");
    outcome(
        identical && resume_equal,
        format!("same-seed loss logs identical {identical}; resumed step 251 equals continuous {resume_equal}"),
    )
}

fn gaussian_set(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(mean, std).unwrap();
    (0..10_000).map(|_| vec![normal.sample(rng)]).collect()
}

fn ffd_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = gaussian_set(&mut rng, 0.0, 1.0);
    let shifted = gaussian_set(&mut rng, 1.0, 1.0);
    let wide = gaussian_set(&mut rng, 0.0, 2.0);
    let mean_case = frechet_feature_distance(&base, &shifted).unwrap();
    let std_case = frechet_feature_distance(&base, &wide).unwrap();
    outcome(
        (mean_case - 1.0).abs() <= 0.1 && (std_case - 1.0).abs() <= 0.1,
        format!("N(0,1) vs N(1,1): {mean_case:.4} (expect 1); N(0,1) vs N(0,4): {std_case:.4} (expect 1)"),
    )
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 geometry suite", Box::new(geometry_suite)),
        (
            "2 surface/curve equivalence",
            Box::new(surface_curve_equivalence),
        ),
        ("3 gradient suite", Box::new(gradient_suite)),
        (
            "4 distance regularizer oracle",
            Box::new(regularizer_oracle_suite),
        ),
        ("5 routing", Box::new(routing)),
        ("6 ablation grid", Box::new(|| ablation(dir.path()))),
        (
            "7 determinism and resume",
            Box::new(|| determinism(dir.path())),
        ),
        (
            "8 Frechet distance closed forms",
            Box::new(ffd_closed_forms),
        ),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        let o = check();
        println!(
            "{} criterion {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.passed {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
