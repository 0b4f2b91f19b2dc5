use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng;
use crate::segnet::NetConfig;

fn params(w1: f64, w2: f64, sa: f64, sb: f64, sg: f64) -> CrfParams {
    CrfParams {
        w1,
        w2,
        sigma_alpha: sa,
        sigma_beta: sb,
        sigma_gamma: sg,
        n_mf_iters: 5,
        truncation: Truncation::Unbounded,
    }
}

fn random_problem(w: usize, h: usize, labels: usize, seed: u64) -> CrfProblem {
    let mut r = rng::stream(seed, "crf-problem");
    let unaries = ProbMap::new(w, h, labels, (0..w * h * labels).map(|_| r.random_range(0.0..3.0)).collect()).unwrap();
    let image = Image::new(w, h, (0..w * h).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
    CrfProblem::new(unaries, LabelMap::unknown(w, h), image).unwrap()
}

/// Every labeling of `n` pixels over `labels` labels.
fn all_labelings(n: usize, labels: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..labels as u8).map(move |l| {
                    let mut v = v.clone();
                    v.push(l);
                    v
                })
            })
            .collect();
    }
    out
}

fn exact_map(problem: &CrfProblem, p: &CrfParams) -> LabelMap {
    let (w, h) = (problem.image.width(), problem.image.height());
    let mut best = (f64::INFINITY, vec![]);
    for z in all_labelings(w * h, problem.num_labels()) {
        let z = LabelMap::new(w, h, z).unwrap();
        if let Ok(e) = energy(problem, &z, p) {
            if e < best.0 {
                best = (e, z.data().to_vec());
            }
        }
    }
    LabelMap::new(w, h, best.1).unwrap()
}

#[test]
fn pairwise_examples() {
    let p = params(5.0, 10.0, 2.0, 0.1, 5.0);
    assert_eq!(pairwise_potential(1, 1, (0.0, 0.0), (3.0, 4.0), 0.2, 0.9, &p), 0.0);
    assert_eq!(pairwise_potential(0, 1, (2.0, 2.0), (2.0, 2.0), 0.4, 0.4, &p), 15.0);
    let v = pairwise_potential(0, 1, (0.0, 0.0), (2.0, 0.0), 0.5, 0.6, &p);
    assert!((v - 11.07056066972357).abs() < 1e-9, "{v}");
}

#[test]
fn named_profiles() {
    let c = CrfParams::cardiac();
    assert_eq!((c.w1, c.w2, c.sigma_alpha, c.sigma_beta, c.sigma_gamma), (5.0, 10.0, 2.0, 0.1, 5.0));
    let p = CrfParams::prostate();
    assert_eq!((p.w1, p.w2, p.sigma_alpha, p.sigma_beta, p.sigma_gamma), (6.0, 10.0, 3.0, 0.01, 2.0));
    assert_eq!(c.n_mf_iters, 5);
    assert_eq!(c.radius(100, 100), 20);
    assert!(CrfParams { sigma_beta: 0.0, ..c.clone() }.validate().is_err());
    assert!(CrfParams { n_mf_iters: 0, ..c }.validate().is_err());
}

#[test]
fn energy_unary_only_and_single_pixel() {
    let prob = random_problem(3, 2, 2, 1);
    let z = LabelMap::new(3, 2, vec![0, 1, 1, 0, 0, 1]).unwrap();
    let want: f64 = (0..6).map(|i| prob.unaries.get(z.data()[i] as usize, i)).sum();
    assert_eq!(energy(&prob, &z, &CrfParams::unary_only()).unwrap(), want);

    let single = random_problem(1, 1, 3, 2);
    let z = LabelMap::filled(1, 1, 2);
    assert_eq!(energy(&single, &z, &CrfParams::cardiac()).unwrap(), single.unaries.get(2, 0));
}

#[test]
fn energy_matches_clique_enumeration_on_2x2() {
    let mut r = rng::stream(3, "energy");
    for case in 0..20 {
        let prob = random_problem(2, 2, 2, 100 + case);
        let p = params(
            r.random_range(0.0..5.0),
            r.random_range(0.0..5.0),
            r.random_range(0.5..3.0),
            r.random_range(0.05..1.0),
            r.random_range(0.5..3.0),
        );
        for z in all_labelings(4, 2) {
            let mut oracle = 0.0;
            for i in 0..4 {
                oracle += prob.unaries.get(z[i] as usize, i);
                for j in i + 1..4 {
                    if z[i] != z[j] {
                        let d2 = ((i % 2) as f64 - (j % 2) as f64).powi(2) + ((i / 2) as f64 - (j / 2) as f64).powi(2);
                        let di = (prob.image.data()[i] - prob.image.data()[j]) as f64;
                        oracle += p.w1 * (-d2 / (2.0 * p.sigma_alpha * p.sigma_alpha) - di * di / (2.0 * p.sigma_beta * p.sigma_beta)).exp()
                            + p.w2 * (-d2 / (2.0 * p.sigma_gamma * p.sigma_gamma)).exp();
                    }
                }
            }
            let got = energy(&prob, &LabelMap::new(2, 2, z).unwrap(), &p).unwrap();
            assert!((got - oracle).abs() < 1e-10);
        }
    }
}

#[test]
fn energy_rejects_seed_violation() {
    let mut prob = random_problem(2, 1, 2, 4);
    prob.seeds.set(0, 0, 1);
    let bad = LabelMap::new(2, 1, vec![0, 0]).unwrap();
    assert!(matches!(energy(&prob, &bad, &CrfParams::cardiac()), Err(Error::Input(_))));
    let good = LabelMap::new(2, 1, vec![1, 0]).unwrap();
    assert!(energy(&prob, &good, &CrfParams::cardiac()).is_ok());
}

#[test]
fn unary_only_inference_is_argmin_unary() {
    let prob = random_problem(6, 5, 3, 5);
    let (_, z) = mean_field_infer(&prob, &CrfParams::unary_only()).unwrap();
    for i in 0..30 {
        let best = (0..3)
            .min_by(|&a, &b| prob.unaries.get(a, i).total_cmp(&prob.unaries.get(b, i)))
            .unwrap();
        assert_eq!(z.data()[i] as usize, best);
    }
}

#[test]
fn all_seed_image_returns_seeds() {
    let mut prob = random_problem(4, 3, 3, 6);
    let seeds = LabelMap::new(4, 3, (0..12).map(|i| (i % 3) as u8).collect()).unwrap();
    prob.seeds = seeds.clone();
    let (q, z) = mean_field_infer(&prob, &CrfParams::cardiac()).unwrap();
    assert_eq!(z, seeds);
    assert!(q.max_normalization_error() < 1e-12);
}

#[test]
fn chain_with_strong_smoothness_matches_exact_map() {
    let unaries = ProbMap::new(3, 1, 2, vec![0.0, 0.693, 0.693, 8.0, 0.693, 0.693]).unwrap();
    let image = Image::filled(3, 1, 0.5);
    let prob = CrfProblem::new(unaries, LabelMap::unknown(3, 1), image).unwrap();
    let p = params(0.0, 3.0, 1.0, 1.0, 2.0);
    let (_, z) = mean_field_infer(&prob, &p).unwrap();
    assert_eq!(z.data(), &[0, 0, 0]);
    assert_eq!(exact_map(&prob, &p), z);
}

#[test]
fn small_instances_agree_with_exact_map() {
    let mut r = rng::stream(7, "map");
    let mut agree = 0;
    for case in 0..200 {
        // each pixel prefers one label by a margin of at least 2
        let mut u = vec![0.0; 8];
        for i in 0..4 {
            let pref = r.random_range(0..2);
            u[pref * 4 + i] = 0.0;
            u[(1 - pref) * 4 + i] = r.random_range(2.0..4.0);
        }
        let image = Image::new(4, 1, (0..4).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
        let prob = CrfProblem::new(ProbMap::new(4, 1, 2, u).unwrap(), LabelMap::unknown(4, 1), image).unwrap();
        let w1 = r.random_range(0.0..0.5);
        let w2 = r.random_range(0.0..0.5);
        let p = params(w1, w2, r.random_range(0.5..3.0), r.random_range(0.05..0.5), r.random_range(0.5..3.0));
        let (_, z) = mean_field_infer(&prob, &p).unwrap();
        if z == exact_map(&prob, &p) {
            agree += 1;
        } else {
            eprintln!("case {case} disagrees");
        }
    }
    assert!(agree >= 190, "{agree}/200");
}

#[test]
fn converged_marginals_are_a_fixed_point() {
    let mut prob = random_problem(7, 6, 3, 8);
    prob.seeds.set(1, 1, 2);
    let p = params(1.0, 1.0, 2.0, 0.3, 1.5);
    let kernels = PairwiseKernels::new(&prob.image, &p);
    let mut iters = 5;
    let mf = loop {
        let mf = mean_field_with(&prob, &kernels, iters).unwrap();
        if mf.last_change < 1e-7 || iters > 5000 {
            break mf;
        }
        iters *= 2;
    };
    assert!(mf.last_change < 1e-7, "did not converge: {}", mf.last_change);
    let again = mean_field_step(&prob, &kernels, mf.marginals.data()).unwrap();
    let worst = again
        .iter()
        .zip(mf.marginals.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn truncated_messages_match_brute_force() {
    let prob = random_problem(9, 8, 2, 9);
    let p = CrfParams {
        truncation: Truncation::Radius(3),
        ..params(2.0, 1.0, 2.0, 0.2, 1.5)
    };
    let kernels = PairwiseKernels::new(&prob.image, &p);
    let q: Vec<f64> = (0..144).map(|i| ((i * 31) % 13) as f64 / 13.0).collect();
    let got = kernels.potts_messages(&q, 2);
    let img = prob.image.data();
    for l in 0..2 {
        for i in 0..72usize {
            let mut want = 0.0;
            for j in 0..72usize {
                let (xi, yi, xj, yj) = (i % 9, i / 9, j % 9, j / 9);
                if i == j || xi.abs_diff(xj) > 3 || yi.abs_diff(yj) > 3 {
                    continue;
                }
                let k = pairwise_potential(0, 1, (xi as f64, yi as f64), (xj as f64, yj as f64), img[i] as f64, img[j] as f64, &p);
                want += k * (1.0 - q[l * 72 + j]);
            }
            assert!((got[l * 72 + i] - want).abs() < 1e-9);
        }
    }
}

fn tiny_net() -> NetParams<f32> {
    let cfg = NetConfig {
        depth: 2,
        base_channels: 4,
        num_labels: 3,
        dropout_p: 0.5,
        dropout_blocks: 1,
    };
    NetParams::init(cfg, &mut rng::stream(12, "net")).unwrap()
}

fn synth_image(seed: u64) -> Image {
    let mut r = rng::stream(seed, "img");
    Image::new(8, 8, (0..64).map(|i| ((i % 8) as f32 / 8.0 + r.random_range(0.0f32..0.2)).min(1.0)).collect()).unwrap()
}

#[test]
fn relabel_dataset_composition() {
    let net = tiny_net();
    assert!(relabel_dataset(&net, &[], &[], &CrfParams::cardiac()).unwrap().is_empty());

    let img = synth_image(1);
    let mut seeds = LabelMap::unknown(8, 8);
    seeds.set(0, 0, 0);
    seeds.set(7, 7, 2);

    let zero = relabel_dataset(&net, &[img.clone()], &[seeds.clone()], &CrfParams::unary_only()).unwrap();
    let mut expected = segnet::predict(&net, &img).unwrap();
    expected.overwrite_with(&seeds);
    assert_eq!(zero[0], expected);

    let p = CrfParams::cardiac();
    let via = relabel_dataset(&net, &[img.clone()], &[seeds.clone()], &p).unwrap();
    let probs = segnet::forward(&net, &img, false, &mut rng::stream(0, "x")).unwrap().probs;
    let prob = CrfProblem::new(unaries_from_probs(&probs), seeds, img).unwrap();
    assert_eq!(via[0], mean_field_infer(&prob, &p).unwrap().1);
    assert!(!via[0].has_unknown());
}

/// Disk truth with per-pixel noisy probabilities.
fn noisy_disk(seed: u64) -> (Image, LabelMap, ProbMap<f64>) {
    let mut r = rng::stream(seed, "disk");
    let (w, h) = (16, 16);
    let truth: Vec<u8> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 - 7.5, (i / w) as f64 - 7.5);
            (x * x + y * y < 25.0) as u8
        })
        .collect();
    let image = Image::new(w, h, truth.iter().map(|&t| 0.3 + 0.4 * t as f32).collect()).unwrap();
    let mut probs = ProbMap::zeros(w, h, 2);
    for (i, &t) in truth.iter().enumerate() {
        let p_true = if r.random_bool(0.25) { 0.3 } else { 0.75 };
        probs.set(t as usize, i, p_true);
        probs.set(1 - t as usize, i, 1.0 - p_true);
    }
    (image, LabelMap::new(w, h, truth).unwrap(), probs)
}

#[test]
fn grid_search_prefers_smoothing_on_noisy_unaries() {
    let (mut images, mut masks, mut probs, mut seeds) = (vec![], vec![], vec![], vec![]);
    for s in 0..3 {
        let (i, m, p) = noisy_disk(s);
        images.push(i);
        masks.push(m);
        probs.push(p);
        seeds.push(LabelMap::unknown(16, 16));
    }
    let smooth = CrfParams {
        w1: 0.2,
        w2: 0.3,
        sigma_gamma: 2.0,
        ..CrfParams::cardiac()
    };
    let grid = vec![CrfParams::unary_only(), smooth.clone()];
    let res = grid_search_probs(&grid, &probs, &images, &seeds, &masks, 2).unwrap();
    assert!(res.scores[1] > res.scores[0], "{:?}", res.scores);
    assert_eq!(res.best, smooth);

    let single = grid_search_probs(&grid[..1], &probs, &images, &seeds, &masks, 2).unwrap();
    assert_eq!(single.best, CrfParams::unary_only());
    assert!(grid_search_probs(&[], &probs, &images, &seeds, &masks, 2).is_err());
}

#[test]
fn product_grid_order() {
    let g = product_grid(&[1.0, 2.0], &[3.0], &[1.0], &[0.1, 0.2], &[5.0], &CrfParams::cardiac());
    assert_eq!(g.len(), 4);
    assert_eq!((g[0].w1, g[0].sigma_beta), (1.0, 0.1));
    assert_eq!((g[1].w1, g[1].sigma_beta), (1.0, 0.2));
    assert_eq!(g[2].w1, 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairwise_is_symmetric(
        li in 0u8..3, lj in 0u8..3,
        xi in 0.0f64..20.0, yi in 0.0f64..20.0, xj in 0.0f64..20.0, yj in 0.0f64..20.0,
        ii in 0.0f64..1.0, ij in 0.0f64..1.0,
    ) {
        let p = CrfParams::cardiac();
        prop_assert_eq!(
            pairwise_potential(li, lj, (xi, yi), (xj, yj), ii, ij, &p),
            pairwise_potential(lj, li, (xj, yj), (xi, yi), ij, ii, &p)
        );
    }

    #[test]
    fn seeds_are_never_changed(seed in 0u64..1000, density in 0.0f64..1.0) {
        let mut prob = random_problem(6, 6, 3, seed);
        let mut r = rng::stream(seed, "seeds");
        for i in 0..36 {
            if r.random_bool(density) {
                prob.seeds.data_mut()[i] = r.random_range(0..3);
            }
        }
        let (_, z) = mean_field_infer(&prob, &CrfParams::cardiac()).unwrap();
        for i in 0..36 {
            if prob.seeds.data()[i] != UNKNOWN {
                prop_assert_eq!(z.data()[i], prob.seeds.data()[i]);
            }
        }
    }
}
