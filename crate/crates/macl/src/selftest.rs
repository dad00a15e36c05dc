//! Built-in verification suite behind the `selftest` CLI command: oracle
//! equivalence, gradient checks, shape alignment, reduction identities, and
//! the metric hand cases. Returns structured results; writes no files.

use ndarray::{Array2, Array4};
use rand::RngExt;

use crate::augment::down_nchw;
use crate::losses::{
    dense_contrastive_loss, dense_contrastive_loss_grad, equivariant_regularization,
    equivariant_regularization_grad, global_contrastive_loss, global_contrastive_loss_grad,
};
use crate::metrics;
use crate::model::{ConnectionMode, MaclModel, ModelConfig, NormKind};
use crate::nn::Activation;
use crate::oracle;
use crate::synthdata::{AnchorMeta, PairLabelMatrix, VolumeId};
use crate::util::rng_from;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct SelfTestReport {
    pub results: Vec<CheckResult>,
}

impl SelfTestReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{} {} ({})\n",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            ));
        }
        let n_pass = self.results.iter().filter(|r| r.passed).count();
        out.push_str(&format!("{n_pass}/{} checks passed\n", self.results.len()));
        out
    }
}

fn labels_with_positions(n: usize, seed: u64, theta: f64) -> PairLabelMatrix {
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
    PairLabelMatrix::build(&meta, theta).unwrap()
}

fn rand2(r: usize, c: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(seed);
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0f64..1.0))
}

fn rand4(n: usize, c: usize, s: usize, seed: u64) -> Array4<f64> {
    let mut rng = rng_from(seed);
    Array4::from_shape_fn((n, c, s, s), |_| rng.random_range(-1.0f64..1.0))
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn check_hand_value() -> CheckResult {
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
    let expect = 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln();
    let brute = oracle::global_loss_bruteforce(&z, &z, &labels, 1.0).unwrap();
    let ours = global_contrastive_loss(&z, &z, &labels, 1.0).unwrap();
    let ok = (brute - expect).abs() < 1e-6 && (ours - expect).abs() < 1e-6;
    check(
        "hand_value_orthogonal_pairs",
        ok,
        format!("expected {expect:.6}, oracle {brute:.6}, vectorized {ours:.6}"),
    )
}

fn check_oracle_agreement(trials: usize) -> CheckResult {
    let mut rng = rng_from(777);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = rng.random_range(1..=4usize);
        let ch = rng.random_range(1..=8usize);
        let zg = rand2(2 * n, ch, 10_000 + t as u64);
        let zg_aux = rand2(2 * n, ch, 20_000 + t as u64);
        let labels = labels_with_positions(n, 30_000 + t as u64, 0.15);
        let tau = [0.1, 0.5, 1.0][t % 3];
        let brute = oracle::global_loss_bruteforce(&zg, &zg_aux, &labels, tau).unwrap();
        let f32_val = global_contrastive_loss(
            &zg.mapv(|v| v as f32),
            &zg_aux.mapv(|v| v as f32),
            &labels,
            tau as f32,
        )
        .unwrap() as f64;
        worst = worst.max((f32_val - brute).abs() / brute.abs().max(1e-9));
    }
    check(
        "global_loss_oracle_agreement",
        worst < 1e-5,
        format!("worst relative error {worst:.2e} over {trials} instances"),
    )
}

fn check_dense_agreement(trials: usize) -> CheckResult {
    let mut rng = rng_from(888);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = rng.random_range(1..=3usize);
        let ch = rng.random_range(1..=6usize);
        let s = rng.random_range(1..=4usize);
        let zl = rand4(2 * n, ch, s, 40_000 + t as u64);
        let zl_aux = rand4(2 * n, ch, s, 50_000 + t as u64);
        let labels = labels_with_positions(n, 60_000 + t as u64, 0.15);
        let brute = oracle::dense_loss_bruteforce(&zl, &zl_aux, &labels, 0.1).unwrap();
        let ours = dense_contrastive_loss(&zl, &zl_aux, &labels, 0.1).unwrap();
        worst = worst.max((ours - brute).abs() / brute.abs().max(1e-9));
    }
    check(
        "dense_loss_oracle_agreement",
        worst < 1e-10,
        format!("worst relative error {worst:.2e} over {trials} instances"),
    )
}

fn check_gradients(trials: usize) -> CheckResult {
    let mut rng = rng_from(999);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = rng.random_range(1..=3usize);
        let ch = rng.random_range(2..=5usize);
        let labels = labels_with_positions(n, 70_000 + t as u64, 0.2);
        let zg = rand2(2 * n, ch, 80_000 + t as u64);
        let zg_aux = rand2(2 * n, ch, 90_000 + t as u64);
        let (_, d_zg, _) = global_contrastive_loss_grad(&zg, &zg_aux, &labels, 0.5).unwrap();
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                global_contrastive_loss(&z, &zg_aux, &labels, 0.5).unwrap()
            },
            &zg.clone().into_dyn(),
            1e-4,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_zg.into_dyn(), &fd));

        let zl = rand4(2 * n, 3, 2, 100_000 + t as u64);
        let zl_aux = rand4(2 * n, 3, 2, 110_000 + t as u64);
        let (_, d_zl, _) = dense_contrastive_loss_grad(&zl, &zl_aux, &labels, 0.5).unwrap();
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                dense_contrastive_loss(&z, &zl_aux, &labels, 0.5).unwrap()
            },
            &zl.clone().into_dyn(),
            1e-4,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_zl.into_dyn(), &fd));

        let y = rand4(2, 3, 2, 120_000 + t as u64);
        let y_aux = rand4(2, 3, 4, 130_000 + t as u64);
        let (_, d_y, _) = equivariant_regularization_grad(&y, &y_aux, 0.5, true).unwrap();
        let fd = oracle::finite_diff_gradient(
            |x| {
                let z = x.clone().into_dimensionality().unwrap();
                equivariant_regularization(&z, &y_aux, 0.5).unwrap()
            },
            &y.clone().into_dyn(),
            1e-4,
        )
        .unwrap();
        worst = worst.max(oracle::max_rel_err(&d_y.into_dyn(), &fd));
    }
    check(
        "loss_gradients_vs_finite_differences",
        worst < 1e-3,
        format!("worst relative error {worst:.2e} over {trials} instances x 3 losses"),
    )
}

fn check_alignment() -> CheckResult {
    for levels in 2..=5usize {
        for blocks in 0..=2usize.min(levels - 1) {
            let cfg = ModelConfig {
                levels,
                base_channels: 2,
                in_channels: 1,
                channel_cap: 32,
                decoder_blocks: blocks,
                uses_skips: true,
                pixel_channels: 3,
                embed_dim: 4,
                activation: Activation::LeakyRelu,
                norm: NormKind::Instance,
            };
            let model = match MaclModel::<f32>::init(&cfg, ConnectionMode::Shared, 5) {
                Ok(m) => m,
                Err(e) => {
                    return check("shape_alignment_grid", false, format!("init failed: {e}"))
                }
            };
            let mut rng = rng_from(levels as u64 * 100 + blocks as u64);
            let x = Array4::from_shape_fn((2, 1, 64, 64), |_| rng.random_range(0.0f64..1.0) as f32);
            match model.forward(&x, &x, cfg.lambda()) {
                Err(e) => {
                    return check(
                        "shape_alignment_grid",
                        false,
                        format!("L={levels} N={blocks}: {e}"),
                    )
                }
                Ok((out, _)) => {
                    let pix_ok = (out.zl.dim().2, out.zl.dim().3)
                        == (out.zl_aux.dim().2, out.zl_aux.dim().3);
                    let down_aux = down_nchw(&out.y_aux, cfg.lambda()).unwrap();
                    let feat_ok =
                        (out.y.dim().2, out.y.dim().3) == (down_aux.dim().2, down_aux.dim().3);
                    if !(pix_ok && feat_ok) {
                        return check(
                            "shape_alignment_grid",
                            false,
                            format!("misaligned at L={levels} N={blocks}"),
                        );
                    }
                }
            }
        }
    }
    check(
        "shape_alignment_grid",
        true,
        "pixel and feature maps aligned for L in 2..=5, N in 0..=min(2, L-1)".into(),
    )
}

fn check_reduction_identities() -> CheckResult {
    let n = 3usize;
    let labels = labels_with_positions(n, 1234, 0.15);
    let z2 = rand2(2 * n, 5, 11);
    let z2b = rand2(2 * n, 5, 12);
    let z4 = z2.clone().into_shape_with_order((2 * n, 5, 1, 1)).unwrap();
    let z4b = z2b.clone().into_shape_with_order((2 * n, 5, 1, 1)).unwrap();
    let g = global_contrastive_loss(&z2, &z2b, &labels, 0.5).unwrap();
    let d = dense_contrastive_loss(&z4, &z4b, &labels, 0.5).unwrap();
    let s1_ok = (g - d).abs() < 1e-7;
    let y_aux = rand4(2, 3, 8, 13);
    let y = down_nchw(&y_aux, 0.5).unwrap();
    let ler = equivariant_regularization(&y, &y_aux, 0.5).unwrap();
    let ler_ok = ler == 0.0;
    check(
        "reduction_identities",
        s1_ok && ler_ok,
        format!("dense@S=1 vs global diff {:.2e}; LER at identity {ler}", (g - d).abs()),
    )
}

fn check_metric_hand_cases() -> CheckResult {
    let mask = |rows: &[&[u8]]| -> metrics::Mask {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| rows[y][x] != 0)
    };
    let p = mask(&[&[1, 1, 0, 0]]);
    let g = mask(&[&[1, 1, 1, 1]]);
    let d = metrics::dsc(&p, &g).unwrap();
    let dsc_ok = (d - 2.0 / 3.0).abs() < 1e-4;
    let mut jc_ok = true;
    let mut rng = rng_from(3333);
    for t in 0..100u64 {
        let a: metrics::Mask =
            Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0) < 0.4);
        let b: metrics::Mask =
            Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0) < 0.4);
        let dv = metrics::dsc(&a, &b).unwrap();
        let jv = metrics::jc(&a, &b).unwrap();
        if (jv - dv / (2.0 - dv)).abs() >= 1e-9 {
            jc_ok = false;
            let _ = t;
        }
    }
    let sq = |x0: usize| -> metrics::Mask {
        Array2::from_shape_fn((32, 32), |(y, x)| (8..24).contains(&y) && (x0..x0 + 16).contains(&x))
    };
    let hd = metrics::hd95(&sq(8), &sq(9), (1.0, 1.0)).unwrap();
    let hd_ok = (hd - 1.0).abs() < 1e-9;
    check(
        "metric_hand_cases",
        dsc_ok && jc_ok && hd_ok,
        format!("dsc {d:.4}, jc identity over 100 pairs: {jc_ok}, shifted-square hd95 {hd:.4}"),
    )
}

fn check_pair_labels() -> CheckResult {
    let labels = labels_with_positions(6, 4444, 0.1);
    let n = labels.len();
    let mut ok = true;
    for i in 0..n {
        if labels.is_positive(i, i) {
            ok = false;
        }
        if labels.positives_of(i).is_empty() {
            ok = false;
        }
        for j in 0..n {
            if labels.is_positive(i, j) != labels.is_positive(j, i) {
                ok = false;
            }
        }
    }
    check(
        "pair_label_invariants",
        ok,
        "symmetric, false diagonal, sibling positivity".into(),
    )
}

fn check_downsampling() -> CheckResult {
    let x = ndarray::array![[0.0f64, 2.0], [4.0, 6.0]];
    let hand_ok = crate::augment::down(&x, 0.5).unwrap() == ndarray::array![[3.0]];
    let mut rng = rng_from(5555);
    let big = Array2::from_shape_fn((16, 16), |_| rng.random_range(-1.0f64..1.0));
    let mean_ok = (crate::augment::down(&big, 0.25).unwrap().mean().unwrap()
        - big.mean().unwrap())
    .abs()
        < 1e-6;
    check(
        "alignment_downsampling",
        hand_ok && mean_ok,
        "block average and mean preservation".into(),
    )
}

/// Run the whole verification suite.
pub fn run_selftest() -> SelfTestReport {
    let results = vec![
        check_hand_value(),
        check_oracle_agreement(300),
        check_dense_agreement(40),
        check_gradients(10),
        check_alignment(),
        check_reduction_identities(),
        check_metric_hand_cases(),
        check_pair_labels(),
        check_downsampling(),
    ];
    SelfTestReport { results }
}
