//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them). Criteria that need a trained model
//! share one default-configuration world; the detector-vs-baseline check
//! additionally trains two more seeds and applies a majority rule.
//!
//! The end-to-end CLI reproducibility criterion lives in the CLI crate's own
//! acceptance test, next to the binary it exercises.

mod common;

use common::Plan;
use epgs_lab::baselines::SampleSet;
use epgs_lab::config::RunConfig;
use epgs_lab::curvature::{correlation, lambda_max_of_grad_fn};
use epgs_lab::epgs::{
    epgs_from_gradients, epgs_score, isomorphism_residual, kl_stability, masked_loss_grad,
    perturb_embeddings, pseudo_target, EpgsConfig,
};
use epgs_lab::eval::{self, auroc, auroc_pair_count, BenchmarkOutput};
use epgs_lab::model::Model;
use epgs_lab::oracle::{finite_diff_grad, hvp, hvp_step, l2_norm, max_rel_err};
use epgs_lab::rng;
use epgs_lab::taskgen::{generate_corpus, Corpus, ExampleCategory};
use epgs_lab::tape::Tensor;
use epgs_lab::trainer::{self, TrainReport};
use once_cell::sync::Lazy;
use rand::Rng;

struct World {
    cfg: RunConfig,
    corpus: Corpus,
    model: Model,
    report: TrainReport,
}

fn build_world(seed: u64) -> World {
    let mut cfg = RunConfig::default();
    cfg.run_seed = seed;
    let corpus = generate_corpus(&cfg.task_spec(), cfg.model_vocab_size).expect("corpus");
    let model = Model::init(cfg.model_config()).expect("model");
    let (model, report) = trainer::train(model, &corpus, &cfg.train_config()).expect("training");
    World { cfg, corpus, model, report }
}

static WORLD_A: Lazy<World> = Lazy::new(|| build_world(42));

static BENCH_A: Lazy<BenchmarkOutput> = Lazy::new(|| {
    let w = &*WORLD_A;
    let bench_cfg = w.cfg.benchmark_config("acceptance".into());
    eval::run_benchmark(&w.model, &w.corpus, &bench_cfg).expect("benchmark")
});

fn verdict(criterion: &str, ok: bool, detail: &str) {
    println!("{}: criterion {criterion} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_01_autodiff_correctness() {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let plan = loop {
            let p = Plan::random(seed * 31 + 7);
            if p.param_count() <= 64 {
                break p;
            }
        };
        let n = plan.param_count();
        let mut r = rng::stream(seed, "graph-params");
        let flat: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, grad) = plan.eval(&flat, true);
        let fd = finite_diff_grad(|p| plan.eval(p, false).0, &flat, 2e-5).unwrap();
        worst = worst.max(max_rel_err(&grad.unwrap(), &fd, 1e-8));
    }
    verdict(
        "1 (autodiff vs central differences)",
        worst <= 1e-4,
        &format!("max relative error {worst:.3e} over 50 random graphs (tolerance 1e-4)"),
    );
}

#[test]
fn criterion_02_hvp_and_power_iteration() {
    let mut worst_hvp: f64 = 0.0;
    let mut worst_lambda: f64 = 0.0;
    for (idx, dim) in [8usize, 17, 30].into_iter().enumerate() {
        // Symmetric A with a positive-dominant spectrum (a diagonal shift
        // keeps the top eigenvalue well separated, as at a trained minimum).
        let mut r = rng::stream(idx as u64, "quadratic");
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let v: f64 = r.random_range(-1.0..1.0);
                a[i * dim + j] = v;
                a[j * dim + i] = v;
            }
        }
        for i in 0..dim {
            a[i * dim + i] += 3.0;
        }
        let apply_a = |v: &[f64]| -> Vec<f64> {
            (0..dim).map(|i| epgs_lab::oracle::dot(&a[i * dim..(i + 1) * dim], v)).collect()
        };

        // HVP of f = 0.5 theta' A theta against A v directly.
        let theta: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let grad = |p: &[f64]| apply_a(p);
        let h = hvp_step(l2_norm(&theta), l2_norm(&v));
        let hv = hvp(grad, &theta, &v, h).unwrap();
        let av = apply_a(&v);
        worst_hvp = worst_hvp.max(max_rel_err(&hv, &av, 1e-8));

        // Power iteration over the same quadratic's gradient field vs a
        // dense eigendecomposition.
        let theta0 = vec![0.0; dim];
        let (lambda, _, _) =
            lambda_max_of_grad_fn(|p| Ok(apply_a(p)), &theta0, 20_000, 1e-14, 9 + idx as u64)
                .unwrap();
        let na = nalgebra::DMatrix::from_row_slice(dim, dim, &a);
        let dense = na
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .max_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap())
            .unwrap();
        worst_lambda = worst_lambda.max((lambda - dense).abs() / dense.abs());
    }
    verdict(
        "2 (HVP + power iteration vs dense eigendecomposition)",
        worst_hvp <= 1e-5 && worst_lambda <= 1e-5,
        &format!("worst HVP error {worst_hvp:.3e}, worst lambda error {worst_lambda:.3e} (tolerance 1e-5)"),
    );
}

#[test]
fn criterion_03_eq6_unit_fidelity() {
    let (s, norm, cos) = epgs_from_gradients(&[3.0, 4.0], &[4.0, 3.0], 1e-8).unwrap();
    let hand_ok = (s - 0.2).abs() <= 1e-12 && (norm - 5.0).abs() <= 1e-12 && (cos - 0.96).abs() <= 1e-12;

    let w = &*WORLD_A;
    let cfg = EpgsConfig { sigma: 0.0, noise_seed: w.cfg.noise_seed(), ..EpgsConfig::default() };
    let mut max_s: f64 = 0.0;
    for (i, e) in w.corpus.eval_examples.iter().enumerate() {
        let rec = epgs_score(&w.model, i, e, &cfg).unwrap();
        max_s = max_s.max(rec.epgs.abs());
    }
    verdict(
        "3 (Eq. 6 fidelity: injected pair and zero-noise identity)",
        hand_ok && max_s == 0.0,
        &format!("hand case S=0.2 ok={hand_ok}; max |S| at sigma=0 over all examples = {max_s:e}"),
    );
}

#[test]
fn criterion_04_rank1_equivalence_first_order() {
    let w = &*WORLD_A;
    let d = w.cfg.model_d_model;

    // Zero perturbation: both sides coincide exactly.
    let e0 = &w.corpus.eval_examples[0];
    let pt = pseudo_target(&w.model, e0, 6).unwrap();
    let zero = Tensor::zeros(vec![pt.full.len(), d]);
    let r0 = isomorphism_residual(&w.model, e0, &zero, 6).unwrap();

    // Median residual ratio under perturbation halving across >= 20 examples.
    // The equivalence is a local statement; sigma = 0.002 keeps the probe in
    // the quadratic regime of the saturated per-example losses (larger
    // perturbations reach the exponential tail of the cross-entropy, smaller
    // ones drown in the linear leakage of imperfect stationarity).
    let mut ratios = Vec::new();
    for i in (0..w.corpus.eval_examples.len()).step_by(4) {
        let e = &w.corpus.eval_examples[i];
        let pt = pseudo_target(&w.model, e, 6).unwrap();
        if pt.degenerate {
            continue;
        }
        let l = pt.full.len();
        let seed = rng::derive_indexed(w.cfg.noise_seed(), "iso", i as u64);
        let delta = perturb_embeddings(&Tensor::zeros(vec![l, d]), 0.002, seed);
        let half = Tensor::new(l_shape(l, d), delta.data.iter().map(|v| v / 2.0).collect()).unwrap();
        let r_full = isomorphism_residual(&w.model, e, &delta, 6).unwrap();
        let r_half = isomorphism_residual(&w.model, e, &half, 6).unwrap();
        if r_half.residual > 1e-13 {
            ratios.push(r_full.residual / r_half.residual);
        }
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[ratios.len() / 2];
    verdict(
        "4 (rank-1 input-parameter equivalence, first-order validity)",
        r0.residual == 0.0 && ratios.len() >= 20 && (3.0..=5.0).contains(&median),
        &format!(
            "zero-delta residual {}, median halving ratio {median:.3} over {} examples (target [3, 5])",
            r0.residual,
            ratios.len()
        ),
    );
}

fn l_shape(l: usize, d: usize) -> Vec<usize> {
    vec![l, d]
}

#[test]
fn criterion_05_gradient_norm_tracks_curvature() {
    let w = &*WORLD_A;
    let bench = &*BENCH_A;
    let d = w.cfg.model_d_model;
    // Matched perturbation norm in the local regime where the Hessian bound
    // applies (the sigma = 0.001-scale norm over the 8-token teacher-forced
    // embedding matrix; at macro scales the second-order expansion is void).
    let matched_norm = 0.001 * ((8 * d) as f64).sqrt();

    let mut g_norms = Vec::new();
    let mut lambdas = Vec::new();
    for c in &bench.curvature {
        let e = &w.corpus.eval_examples[c.example_id];
        let pt = pseudo_target(&w.model, e, 6).unwrap();
        let emb = w.model.embed(&pt.full).unwrap();
        let seed = rng::derive_indexed(w.cfg.noise_seed(), "matched", c.example_id as u64);
        let mut r = rng::stream(seed, "direction");
        let mut dir: Vec<f64> =
            (0..emb.data.len()).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let scale = matched_norm / l2_norm(&dir);
        for v in &mut dir {
            *v *= scale;
        }
        let mut perturbed = emb.clone();
        for (p, dv) in perturbed.data.iter_mut().zip(&dir) {
            *p += dv;
        }
        let (_, g) =
            masked_loss_grad(&w.model, &perturbed, &pt.full, &pt.mask, &w.cfg.epgs_location)
                .unwrap();
        g_norms.push(g.norm_l2);
        lambdas.push(c.lambda_max);
    }
    let (_, spearman) = correlation(&g_norms, &lambdas).unwrap();
    verdict(
        "5 (perturbed gradient norm tracks top Hessian eigenvalue)",
        spearman > 0.5,
        &format!(
            "Spearman(||g_perturbed||, lambda_max) = {spearman:.4} over {} stubborn-subset examples at matched ||delta|| (target > 0.5)",
            lambdas.len()
        ),
    );
}

#[test]
fn criterion_06_curvature_correlation_and_sharpness_ratio() {
    let bench = &*BENCH_A;
    let block = bench.report.curvature.as_ref().expect("curvature block");
    let w = &*WORLD_A;
    let n_fact = bench
        .curvature
        .iter()
        .filter(|c| w.corpus.eval_examples[c.example_id].category == ExampleCategory::Fact)
        .count();
    let n_stub = bench
        .curvature
        .iter()
        .filter(|c| w.corpus.eval_examples[c.example_id].category == ExampleCategory::StubbornSeed)
        .count();
    let pearson = block.pearson_epgs_lambda.unwrap_or(f64::NAN);
    let ratio = block.sharpness_ratio.unwrap_or(f64::NAN);
    let within_budget = bench.timings.curvature_s <= 300.0;
    verdict(
        "6 (EPGS-curvature correlation and sharpness ratio)",
        pearson > 0.5 && ratio > 1.5 && n_fact >= 30 && n_stub >= 30 && within_budget,
        &format!(
            "Pearson {pearson:.4} (> 0.5), sharpness ratio {ratio:.3} (> 1.5), n = {n_fact}+{n_stub} (>= 30+30), curvature phase {:.1}s (<= 300s)",
            bench.timings.curvature_s
        ),
    );
}

fn stubborn_margins(out: &BenchmarkOutput) -> (f64, f64) {
    let epgs = out.report.auroc["epgs"].stubborn_subset.expect("epgs stubborn auroc");
    let dse = out.report.auroc["discrete_semantic_entropy"]
        .stubborn_subset
        .expect("dse stubborn auroc");
    (epgs, dse)
}

#[test]
fn criterion_07_detector_beats_semantic_entropy_on_stubborn_subset() {
    // Stochastic criterion: three fixed seeds, majority rule.
    let mut passes = 0;
    let mut details = Vec::new();
    for seed in [42u64, 43, 44] {
        let (epgs, dse) = if seed == 42 {
            stubborn_margins(&BENCH_A)
        } else {
            let w = build_world(seed);
            let mut bench_cfg = w.cfg.benchmark_config("acceptance".into());
            bench_cfg.methods =
                vec!["epgs".to_string(), "discrete_semantic_entropy".to_string()];
            bench_cfg.curvature_max_examples = Some(0);
            let out = eval::run_benchmark(&w.model, &w.corpus, &bench_cfg).expect("benchmark");
            stubborn_margins(&out)
        };
        let ok = epgs >= 0.70 && dse <= 0.60 && epgs - dse >= 0.10;
        if ok {
            passes += 1;
        }
        details.push(format!("seed {seed}: EPGS {epgs:.4} vs DSE {dse:.4} ({})", if ok { "ok" } else { "miss" }));
    }
    verdict(
        "7 (stubborn subset: EPGS >= 0.70, DSE <= 0.60, gap >= 0.10; 3-seed majority)",
        passes >= 2,
        &format!("{} of 3 seeds pass [{}]", passes, details.join("; ")),
    );
}

static SIGMA_TABLE: Lazy<eval::AblationTable> = Lazy::new(|| {
    let w = &*WORLD_A;
    let bench_cfg = w.cfg.benchmark_config("acceptance".into());
    let grid = eval::AblationGrid::Sigma(vec![0.001, 0.01, 0.1, 1.0]);
    eval::run_ablation(&w.model, &w.corpus, &grid, &bench_cfg).expect("sigma ablation")
});

#[test]
fn criterion_08_noise_magnitude_robustness() {
    let table = &*SIGMA_TABLE;
    let aurocs: Vec<f64> = table.rows.iter().map(|r| r.auroc.expect("auroc")).collect();
    let max = aurocs.iter().copied().fold(f64::MIN, f64::max);
    let min = aurocs.iter().copied().fold(f64::MAX, f64::min);
    verdict(
        "8 (EPGS robust across four decades of noise)",
        max - min <= 0.15,
        &format!("full-set AUROC fluctuation {:.4} across sigma {{0.001, 0.01, 0.1, 1}} (<= 0.15); values {:?}", max - min, aurocs),
    );
}

#[test]
fn criterion_09_noise_ratio_scales_per_decade() {
    let table = &*SIGMA_TABLE;
    let ratios: Vec<f64> = table.rows.iter().map(|r| r.noise_ratio.expect("ratio")).collect();
    let mut ok = true;
    let mut steps = Vec::new();
    for pair in ratios.windows(2) {
        let step = pair[1] / pair[0];
        ok &= (step - 10.0).abs() / 10.0 <= 0.05;
        steps.push(step);
    }
    verdict(
        "9 (measured ||delta||/||E|| scales 10x per decade of sigma)",
        ok,
        &format!("decade steps {steps:?} (each within 5% of 10)"),
    );
}

#[test]
fn criterion_10_auroc_dual_route_equivalence() {
    let hand = auroc(&[0.8, 0.3, 0.6, 0.2], &[1, 1, 0, 0]).unwrap();
    let mut worst: f64 = (hand - 0.75).abs();
    let mut r = rng::stream(11, "auroc-acceptance");
    for _ in 0..100 {
        let n = r.random_range(4..50);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64 / 7.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let a = auroc(&scores, &labels).unwrap();
        let b = auroc_pair_count(&scores, &labels).unwrap();
        worst = worst.max((a - b).abs());
    }
    verdict(
        "10 (AUROC rank formula vs pair counting)",
        worst <= 1e-12,
        &format!("worst disagreement {worst:.3e} over 100 tied instances plus the hand case (tolerance 1e-12)"),
    );
}

#[test]
fn criterion_12_kl_stability_does_not_discriminate_stubborn_from_fact() {
    let w = &*WORLD_A;
    let d = w.cfg.model_d_model;
    let prompt_len = w.corpus.prompt_len();
    // sigma = 0.01-scale ball radius over the flattened prompt embedding.
    let rho = 0.01 * ((prompt_len * d) as f64).sqrt();

    let mean_kl = |cat: ExampleCategory| -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (i, e) in w.corpus.eval_examples.iter().enumerate() {
            if e.category == cat {
                let seed = rng::derive_indexed(w.cfg.run_seed, "kl-acceptance", i as u64);
                total += kl_stability(&w.model, e, rho, 6, seed).unwrap();
                count += 1;
            }
        }
        total / count as f64
    };
    let stubborn = mean_kl(ExampleCategory::StubbornSeed);
    let transient = mean_kl(ExampleCategory::Transient);
    let fact = mean_kl(ExampleCategory::Fact);
    verdict(
        "12 (output-space stability mimics facts: KL cannot flag stubborn errors)",
        stubborn < transient && fact < transient,
        &format!("mean KL: fact {fact:.4e}, stubborn {stubborn:.4e}, transient {transient:.4e} (stubborn and fact both below transient)"),
    );
}

// Keeps `SampleSet` linked into this test target so the JSONL schema stays
// exercised end to end through the benchmark fixture.
#[test]
fn benchmark_fixture_is_well_formed() {
    let bench = &*BENCH_A;
    let _: &Vec<SampleSet> = &bench.samples;
    assert_eq!(bench.records.len(), WORLD_A.corpus.eval_examples.len());
    assert!(WORLD_A.report.converged, "world A failed its convergence gate");
    for rec in &bench.records {
        let recomputed = rec.grad_norm_clean * (1.0 - rec.cos_sim);
        assert!((rec.epgs - recomputed).abs() <= 1e-12, "product identity violated");
    }
}
