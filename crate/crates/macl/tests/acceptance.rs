//! Acceptance suite. Each test prints one PASS/FAIL line for its criterion
//! (visible with `cargo test -p macl --test acceptance -- --nocapture`).
//!
//! Criteria: loss-oracle equivalence, gradient checks, shape alignment,
//! reduction identities, metric hand cases, the directional ablation,
//! connection-mode ordering (warning-only), and bit-level determinism.

use std::time::Instant;

use macl::ablation::{run_single, InitMode};
use macl::augment::down_nchw;
use macl::config::ExperimentConfig;
use macl::losses::{
    dense_contrastive_loss, dense_contrastive_loss_grad, equivariant_regularization,
    equivariant_regularization_grad, global_contrastive_loss, global_contrastive_loss_grad,
    multi_level_loss, LossWeights,
};
use macl::metrics;
use macl::model::{BranchOutputs, ConnectionMode, MaclModel, ModelConfig};
use macl::oracle;
use macl::synthdata::{AnchorMeta, PairLabelMatrix, VolumeId};
use macl::train::loss_csv;
use macl::util::{rng_from, sign_test_p};
use ndarray::{Array2, Array4};
use rand::RngExt;

fn report(name: &str, passed: bool, detail: &str) {
    println!(
        "ACCEPTANCE {name}: {} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "{name}: {detail}");
}

fn random_labels(n: usize, seed: u64) -> PairLabelMatrix {
    let mut rng = rng_from(seed);
    let meta: Vec<AnchorMeta> = (0..n)
        .flat_map(|i| {
            let m = AnchorMeta {
                volume_id: VolumeId(i as u64),
                position: rng.random_range(0.0..1.0),
            };
            [m.clone(), m]
        })
        .collect();
    PairLabelMatrix::build(&meta, 0.15).unwrap()
}

fn rand2(r: usize, c: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(seed);
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0f64..1.0))
}

fn rand4(n: usize, c: usize, s: usize, seed: u64) -> Array4<f64> {
    let mut rng = rng_from(seed);
    Array4::from_shape_fn((n, c, s, s), |_| rng.random_range(-1.0f64..1.0))
}

/// Criterion: over >= 1000 random instances (2N <= 8, C <= 8, S <= 4,
/// tau in {0.1, 0.5, 1}), vectorized losses match brute force within
/// relative 1e-5 in f32; the hand case 4 ln(1 + 2/e) reproduces to 1e-6.
/// Runtime < 1 min.
#[test]
fn loss_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = rng_from(2024);
    let taus = [0.1f64, 0.5, 1.0];
    let mut worst_g = 0.0f64;
    let mut worst_d = 0.0f64;
    let mut count = 0usize;
    for trial in 0..1000u64 {
        let n = rng.random_range(1..=4usize); // 2N <= 8
        let ch = rng.random_range(1..=8usize);
        let s = rng.random_range(1..=4usize);
        let tau = taus[trial as usize % 3];
        let labels = random_labels(n, 90_000 + trial);

        let zg = rand2(2 * n, ch, trial);
        let zg_aux = rand2(2 * n, ch, 10_000 + trial);
        let brute = oracle::global_loss_bruteforce(&zg, &zg_aux, &labels, tau).unwrap();
        let f32_val = global_contrastive_loss(
            &zg.mapv(|v| v as f32),
            &zg_aux.mapv(|v| v as f32),
            &labels,
            tau as f32,
        )
        .unwrap() as f64;
        worst_g = worst_g.max((f32_val - brute).abs() / brute.abs().max(1e-9));

        let zl = rand4(2 * n, ch, s, 20_000 + trial);
        let zl_aux = rand4(2 * n, ch, s, 30_000 + trial);
        let brute_d = oracle::dense_loss_bruteforce(&zl, &zl_aux, &labels, tau).unwrap();
        let f32_d = dense_contrastive_loss(
            &zl.mapv(|v| v as f32),
            &zl_aux.mapv(|v| v as f32),
            &labels,
            tau as f32,
        )
        .unwrap() as f64;
        worst_d = worst_d.max((f32_d - brute_d).abs() / brute_d.abs().max(1e-9));
        count += 1;
    }

    // Hand case: orthogonal slice pairs, sibling positives only, tau = 1.
    let z = ndarray::array![[1.0f64, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
    let meta: Vec<AnchorMeta> = [0.0, 0.0, 1.0, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &p)| AnchorMeta {
            volume_id: VolumeId((i / 2) as u64),
            position: p,
        })
        .collect();
    let labels = PairLabelMatrix::build(&meta, 1e-9).unwrap();
    let hand = global_contrastive_loss(&z, &z, &labels, 1.0).unwrap();
    let expect = 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln();
    let hand_err = (hand - expect).abs();

    let elapsed = t0.elapsed();
    report(
        "loss_oracle_equivalence",
        worst_g < 1e-5 && worst_d < 1e-5 && hand_err < 1e-6 && elapsed.as_secs() < 60,
        &format!(
            "{count} instances, worst rel err global {worst_g:.2e} dense {worst_d:.2e}, \
             hand case err {hand_err:.2e}, {elapsed:.2?}"
        ),
    );
}

/// Criterion: analytic gradients of Lg, Ld, LER match central finite
/// differences (f64, eps = 1e-4) with max relative error < 1e-3 over >= 50
/// random instances. Runtime < 2 min.
#[test]
fn gradient_checks() {
    let t0 = Instant::now();
    let mut rng = rng_from(4048);
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let n = rng.random_range(1..=3usize);
        let ch = rng.random_range(2..=6usize);
        let labels = random_labels(n, 50_000 + trial);
        let tau = [0.1, 0.5, 1.0][trial as usize % 3];

        let zg = rand2(2 * n, ch, 1000 + trial);
        let zg_aux = rand2(2 * n, ch, 2000 + trial);
        let (_, d_zg, d_zg_aux) =
            global_contrastive_loss_grad(&zg, &zg_aux, &labels, tau).unwrap();
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                global_contrastive_loss(&z, &zg_aux, &labels, tau).unwrap()
            },
            &zg.clone().into_dyn(),
            eps,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_zg.into_dyn(), &fd));
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                global_contrastive_loss(&zg, &z, &labels, tau).unwrap()
            },
            &zg_aux.clone().into_dyn(),
            eps,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_zg_aux.into_dyn(), &fd));

        let s = rng.random_range(1..=2usize);
        let zl = rand4(2 * n, 3, s, 3000 + trial);
        let zl_aux = rand4(2 * n, 3, s, 4000 + trial);
        let (_, d_zl, d_zl_aux) =
            dense_contrastive_loss_grad(&zl, &zl_aux, &labels, tau).unwrap();
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                dense_contrastive_loss(&z, &zl_aux, &labels, tau).unwrap()
            },
            &zl.clone().into_dyn(),
            eps,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_zl.into_dyn(), &fd));
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                dense_contrastive_loss(&zl, &z, &labels, tau).unwrap()
            },
            &zl_aux.clone().into_dyn(),
            eps,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_zl_aux.into_dyn(), &fd));

        let y = rand4(2, 3, 2, 5000 + trial);
        let y_aux = rand4(2, 3, 4, 6000 + trial);
        let (_, d_y, d_y_aux) =
            equivariant_regularization_grad(&y, &y_aux, 0.5, true).unwrap();
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                equivariant_regularization(&z, &y_aux, 0.5).unwrap()
            },
            &y.clone().into_dyn(),
            eps,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_y.into_dyn(), &fd));
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                equivariant_regularization(&y, &z, 0.5).unwrap()
            },
            &y_aux.clone().into_dyn(),
            eps,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_y_aux.into_dyn(), &fd));
    }
    let elapsed = t0.elapsed();
    report(
        "gradient_checks",
        worst < 1e-3 && elapsed.as_secs() < 120,
        &format!("50 instances x 3 losses, worst rel err {worst:.2e}, {elapsed:.2?}"),
    );
}

/// Criterion: for (L, N) in {2..5} x {0..min(2, L-1)} with lambda = 2^-N,
/// spatial(Zl) = spatial(Zl_aux) and spatial(Y) = spatial(down(Y_aux)).
#[test]
fn alignment_invariant() {
    let mut checked = 0usize;
    for levels in 2..=5usize {
        for blocks in 0..=2usize.min(levels - 1) {
            let cfg = ModelConfig {
                levels,
                base_channels: 2,
                in_channels: 1,
                channel_cap: 32,
                decoder_blocks: blocks,
                pixel_channels: 3,
                embed_dim: 4,
                ..ModelConfig::default()
            };
            let model = MaclModel::<f32>::init(&cfg, ConnectionMode::Shared, 7).unwrap();
            let mut rng = rng_from(levels as u64 * 31 + blocks as u64);
            let x =
                Array4::from_shape_fn((2, 1, 64, 64), |_| rng.random_range(0.0f64..1.0) as f32);
            let (out, _) = model.forward(&x, &x, cfg.lambda()).unwrap();
            assert_eq!(
                (out.zl.dim().2, out.zl.dim().3),
                (out.zl_aux.dim().2, out.zl_aux.dim().3),
                "pixel projections misaligned at L={levels} N={blocks}"
            );
            let down_aux = down_nchw(&out.y_aux, cfg.lambda()).unwrap();
            assert_eq!(
                (out.y.dim().2, out.y.dim().3),
                (down_aux.dim().2, down_aux.dim().3),
                "feature maps misaligned at L={levels} N={blocks}"
            );
            checked += 1;
        }
    }
    report(
        "alignment_invariant",
        checked == 11,
        &format!("{checked} (L, N) cells, exact shape equality"),
    );
}

/// Criterion: dense loss at S=1 equals the global loss to 1e-7; weights
/// (1, 0, 0) reduce the combined loss to Lg exactly; LER is 0 at identity.
#[test]
fn reduction_identities() {
    let mut rng = rng_from(808);
    let mut worst_s1 = 0.0f64;
    for trial in 0..25u64 {
        let n = rng.random_range(1..=4usize);
        let ch = rng.random_range(1..=8usize);
        let labels = random_labels(n, 7000 + trial);
        let z2 = rand2(2 * n, ch, 100 + trial);
        let z2b = rand2(2 * n, ch, 200 + trial);
        let z4 = z2.clone().into_shape_with_order((2 * n, ch, 1, 1)).unwrap();
        let z4b = z2b.clone().into_shape_with_order((2 * n, ch, 1, 1)).unwrap();
        let g = global_contrastive_loss(&z2, &z2b, &labels, 0.5).unwrap();
        let d = dense_contrastive_loss(&z4, &z4b, &labels, 0.5).unwrap();
        worst_s1 = worst_s1.max((g - d).abs());
    }

    let n = 2usize;
    let labels = random_labels(n, 9999);
    let y_aux = rand4(2 * n, 3, 8, 300);
    let y = down_nchw(&y_aux, 0.5).unwrap();
    let outputs = BranchOutputs {
        y: y.clone(),
        y_aux: y_aux.clone(),
        zg: rand2(2 * n, 5, 301),
        zg_aux: rand2(2 * n, 5, 302),
        zl: rand4(2 * n, 4, 2, 303),
        zl_aux: rand4(2 * n, 4, 2, 304),
    };
    let w100 = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
        lambda3: 0.0,
        tau: 0.5,
    };
    let b = multi_level_loss(&outputs, &labels, &w100).unwrap();
    let weights_exact = b.total == b.lg;
    let ler = equivariant_regularization(&y, &y_aux, 0.5).unwrap();

    report(
        "reduction_identities",
        worst_s1 < 1e-7 && weights_exact && ler == 0.0,
        &format!(
            "dense@S=1 worst diff {worst_s1:.2e}; (1,0,0) exact: {weights_exact}; \
             LER at identity {ler}"
        ),
    );
}

/// Criterion: dsc subset case 0.6667 +- 1e-4; jc = dsc/(2-dsc) to 1e-9 over
/// 100 random mask pairs; shifted-square hd95 = 1.0; asd matches an
/// enumeration oracle to 1e-6.
#[test]
fn metric_hand_cases() {
    let p = Array2::from_shape_fn((2, 4), |(y, x)| y == 0 && x < 2);
    let g = Array2::from_shape_fn((2, 4), |(y, _)| y == 0);
    let d = metrics::dsc(&p, &g).unwrap();
    let dsc_ok = (d - 0.6667).abs() < 1e-4;

    let mut rng = rng_from(111);
    let mut jc_worst = 0.0f64;
    for _ in 0..100 {
        let a: metrics::Mask = Array2::from_shape_fn((9, 9), |_| rng.random_range(0.0..1.0) < 0.4);
        let b: metrics::Mask = Array2::from_shape_fn((9, 9), |_| rng.random_range(0.0..1.0) < 0.4);
        let dv = metrics::dsc(&a, &b).unwrap();
        let jv = metrics::jc(&a, &b).unwrap();
        jc_worst = jc_worst.max((jv - dv / (2.0 - dv)).abs());
    }

    let square = |x0: usize| -> metrics::Mask {
        Array2::from_shape_fn((32, 32), |(y, x)| {
            (8..24).contains(&y) && (x0..x0 + 16).contains(&x)
        })
    };
    let (pm, gm) = (square(8), square(9));
    let hd = metrics::hd95(&pm, &gm, (1.0, 1.0)).unwrap();

    // Independent enumeration oracle for the surface distances.
    let surface = |m: &metrics::Mask| {
        let (h, w) = m.dim();
        let mut pts = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !m[(y, x)] {
                    continue;
                }
                let mut boundary = y == 0 || x == 0 || y == h - 1 || x == w - 1;
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0
                        && nx >= 0
                        && ny < h as i64
                        && nx < w as i64
                        && !m[(ny as usize, nx as usize)]
                    {
                        boundary = true;
                    }
                }
                if boundary {
                    pts.push((y as f64, x as f64));
                }
            }
        }
        pts
    };
    let sp = surface(&pm);
    let sg = surface(&gm);
    let dist = |a: &(f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut pool: Vec<f64> = sp.iter().map(|q| dist(q, &sg)).collect();
    pool.extend(sg.iter().map(|q| dist(q, &sp)));
    let oracle_asd = pool.iter().sum::<f64>() / pool.len() as f64;
    let asd_val = metrics::asd(&pm, &gm, (1.0, 1.0)).unwrap();

    report(
        "metric_hand_cases",
        dsc_ok && jc_worst < 1e-9 && (hd - 1.0).abs() < 1e-12 && (asd_val - oracle_asd).abs() < 1e-6,
        &format!(
            "dsc {d:.4}; jc identity worst {jc_worst:.2e}; hd95 {hd}; \
             asd {asd_val:.6} vs oracle {oracle_asd:.6}"
        ),
    );
}

/// Shared configuration of the directional ablation and connection-mode
/// criteria. Scaled so the full criterion fits the CPU budget.
fn ablation_exp() -> ExperimentConfig {
    let mut exp = ExperimentConfig::desk();
    exp.data.volumes = 10;
    exp.data.depth = 12;
    exp.data.height = 32;
    exp.data.classes = 3;
    exp.data.noise_sigma = 0.25;
    exp.data.train_fraction = 0.8;
    exp.model.levels = 3;
    exp.model.base_channels = 16;
    exp.model.decoder_blocks = 1;
    exp.model.embed_dim = 64;
    exp.pretrain.epochs = 8;
    exp.pretrain.batch_size = 8;
    exp.finetune.epochs = 40;
    exp.finetune.lr0 = 2e-3;
    exp.finetune.label_fraction = 0.1;
    exp.finetune.eval_every = 4;
    exp
}

fn paired_stats(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = a.iter().zip(b.iter()).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b.iter()).filter(|(x, y)| x < y).count();
    (mean(a), mean(b), sign_test_p(wins, losses))
}

/// Criterion: with 10% labels over >= 5 seeds, mean holdout DSC of the full
/// configuration beats the global-only (Lg, N=0) configuration and the
/// scratch baseline, with one-sided paired sign tests at p < 0.1 each.
/// Runtime < 45 min CPU.
#[test]
fn directional_ablation() {
    let t0 = Instant::now();
    let exp = ablation_exp();
    let mut global_only = exp.clone();
    global_only.model.decoder_blocks = 0;
    global_only.pretrain.lambda = None;
    global_only.pretrain.weights.lambda2 = 0.0;
    global_only.pretrain.weights.lambda3 = 0.0;

    let seeds: Vec<u64> = (1..=9).collect();
    let mut full = Vec::new();
    let mut global = Vec::new();
    let mut scratch = Vec::new();
    for &seed in &seeds {
        full.push(run_single(&exp, seed, InitMode::Pretrained).unwrap().report.mean.dsc);
        global.push(
            run_single(&global_only, seed, InitMode::Pretrained)
                .unwrap()
                .report
                .mean
                .dsc,
        );
        scratch.push(run_single(&exp, seed, InitMode::Scratch).unwrap().report.mean.dsc);
    }
    let (m_full, m_global, p_fg) = paired_stats(&full, &global);
    let (_, m_scratch, p_fs) = paired_stats(&full, &scratch);
    let elapsed = t0.elapsed();
    report(
        "directional_ablation",
        m_full > m_global && p_fg < 0.1 && m_full > m_scratch && p_fs < 0.1
            && elapsed.as_secs() < 45 * 60,
        &format!(
            "{} seeds: full {m_full:.4} vs global-only {m_global:.4} (p={p_fg:.4}), \
             vs scratch {m_scratch:.4} (p={p_fs:.4}), {elapsed:.0?}",
            seeds.len()
        ),
    );
}

/// Criterion: shared-encoder mode should reach at least the independent
/// mode's mean DSC over 5 seeds. A violated ordering downgrades to a
/// warning: the comparison report is always produced.
#[test]
fn connection_mode_ordering() {
    let t0 = Instant::now();
    let exp = ablation_exp();
    let mut independent = exp.clone();
    independent.pretrain.connection = ConnectionMode::Independent;
    let seeds: Vec<u64> = (1..=5).collect();
    let mut shared = Vec::new();
    let mut indep = Vec::new();
    for &seed in &seeds {
        shared.push(run_single(&exp, seed, InitMode::Pretrained).unwrap().report.mean.dsc);
        indep.push(
            run_single(&independent, seed, InitMode::Pretrained)
                .unwrap()
                .report
                .mean
                .dsc,
        );
    }
    let (m_shared, m_indep, p) = paired_stats(&shared, &indep);
    let ordered = m_shared >= m_indep;
    let status = if ordered { "PASS" } else { "WARN" };
    println!(
        "ACCEPTANCE connection_mode_ordering: {status} (shared {m_shared:.4} vs independent \
         {m_indep:.4}, p={p:.4}, {} seeds, {:.0?}{})",
        seeds.len(),
        t0.elapsed(),
        if ordered {
            ""
        } else {
            "; ordering violated at desk scale, downgraded to a warning"
        }
    );
    // The criterion requires the comparison to run and report; the ordering
    // itself is informational at desk scale.
    assert_eq!(shared.len(), seeds.len());
    assert_eq!(indep.len(), seeds.len());
}

/// Criterion: two identical-seed pretrain + finetune runs produce bit-equal
/// loss and metric CSVs in deterministic mode.
#[test]
fn determinism_bit_equal_reports() {
    let mut exp = ExperimentConfig::desk();
    exp.data.volumes = 4;
    exp.data.depth = 6;
    exp.data.height = 16;
    exp.data.classes = 2;
    exp.data.noise_sigma = 0.1;
    exp.model.levels = 2;
    exp.model.base_channels = 4;
    exp.model.channel_cap = 32;
    exp.model.decoder_blocks = 1;
    exp.model.pixel_channels = 4;
    exp.model.embed_dim = 8;
    exp.pretrain.epochs = 2;
    exp.pretrain.batch_size = 4;
    exp.finetune.epochs = 3;
    exp.finetune.batch_size = 4;

    let a = run_single(&exp, 33, InitMode::Pretrained).unwrap();
    let b = run_single(&exp, 33, InitMode::Pretrained).unwrap();
    let csv_a = a.report.to_csv();
    let csv_b = b.report.to_csv();
    let loss_a = loss_csv(&a.pretrain.as_ref().unwrap().log);
    let loss_b = loss_csv(&b.pretrain.as_ref().unwrap().log);
    report(
        "determinism",
        csv_a == csv_b && csv_a.len() > 40 && loss_a == loss_b,
        &format!(
            "metric CSV {} bytes bit-equal: {}; loss CSV {} bytes bit-equal: {}",
            csv_a.len(),
            csv_a == csv_b,
            loss_a.len(),
            loss_a == loss_b
        ),
    );
}
