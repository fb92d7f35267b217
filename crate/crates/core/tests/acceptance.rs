//! Acceptance suite. Each test prints one PASS/FAIL line and then asserts it.
//!
//! Run with `cargo test -p sgdlm --test acceptance -- --nocapture` to see the
//! verdict lines.

use std::collections::BTreeMap;
use std::time::Instant;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::digamma;

use sgdlm::backtest::ledger::{metrics, DayRecord, StrategyDay, INITIAL_VALUE};
use sgdlm::backtest::{export, run_filter, simulate, BacktestLedger, ModelConfig, SimulationConfig, SyntheticSpec};
use sgdlm::dlm::{self, BeliefRole, EvolutionSpec, NormalGammaBelief, StatePartition};
use sgdlm::engine::{self, decouple};
use sgdlm::portfolio::{self, TARGET_RETURN_LOW};
use sgdlm::rng::Stage;
use sgdlm::selection::{self, Membership, ParentalSets, SelectionConfig};
use sgdlm::wdlm::{self, MatrixNIWBelief};

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    println!("criterion {n:>2} {}: {name} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {name} ({detail})");
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a * a.transpose() + DMatrix::identity(n, n) * 0.5 * n as f64) * scale
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn max_rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(1e-300);
    (a - b).amax() / scale
}

// ---------------------------------------------------------------------------

/// Batch normal/gamma posterior for a static regression: with `P = s C⁻¹`,
/// `P_T = P_0 + Σ F F'`, `m_T = P_T⁻¹ (P_0 m_0 + Σ F y)`,
/// `n_T s_T = n_0 s_0 + Σ y² + m_0' P_0 m_0 - m_T' P_T m_T`, `C_T = s_T P_T⁻¹`.
fn batch_normal_gamma(prior: &NormalGammaBelief, fs: &[DVector<f64>], ys: &[f64]) -> NormalGammaBelief {
    let p0 = prior.scale.clone().try_inverse().unwrap() * prior.precision_scale;
    let mut pt = p0.clone();
    let mut rhs = &p0 * &prior.mean;
    let mut yy = 0.0;
    for (f, &y) in fs.iter().zip(ys) {
        pt += f * f.transpose();
        rhs += f * y;
        yy += y * y;
    }
    let pt_inv = pt.clone().try_inverse().unwrap();
    let mt = &pt_inv * &rhs;
    let n = prior.dof + ys.len() as f64;
    let ss = prior.dof * prior.precision_scale + yy + prior.mean.dot(&(&p0 * &prior.mean)) - mt.dot(&(&pt * &mt));
    let s = ss / n;
    NormalGammaBelief {
        mean: mt,
        scale: pt_inv * s,
        dof: n,
        precision_scale: s,
        role: BeliefRole::Posterior,
    }
}

/// Batch matrix-normal/inverse-Wishart posterior: `C_T⁻¹ = C_0⁻¹ + Σ F F'`,
/// `M_T = C_T (C_0⁻¹ M_0 + Σ F y')`,
/// `D_T = D_0 + Σ y y' + M_0' C_0⁻¹ M_0 - M_T' C_T⁻¹ M_T`.
fn batch_matrix_niw(prior: &MatrixNIWBelief, fs: &[DVector<f64>], ys: &[DVector<f64>]) -> MatrixNIWBelief {
    let c0_inv = prior.state_scale.clone().try_inverse().unwrap();
    let mut ct_inv = c0_inv.clone();
    let mut rhs = &c0_inv * &prior.state_mode;
    let mut yy = DMatrix::zeros(ys[0].len(), ys[0].len());
    for (f, y) in fs.iter().zip(ys) {
        ct_inv += f * f.transpose();
        rhs += f * y.transpose();
        yy += y * y.transpose();
    }
    let ct = ct_inv.clone().try_inverse().unwrap();
    let mt = &ct * rhs;
    let d = &prior.sum_squares + yy + prior.state_mode.transpose() * &c0_inv * &prior.state_mode
        - mt.transpose() * &ct_inv * &mt;
    MatrixNIWBelief {
        state_mode: mt,
        state_scale: ct,
        dof: prior.dof + ys.len() as f64,
        sum_squares: d,
        role: BeliefRole::Posterior,
    }
}

#[test]
fn conjugacy_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t_len = 20;
    let mut worst: f64 = 0.0;
    for instance in 0..20 {
        let p = 1 + instance % 2;
        let m = 1 + instance % 3;

        // Univariate normal/gamma DLM with unit discounts.
        let prior = NormalGammaBelief::new(
            normal_vec(&mut rng, p, 0.1),
            random_spd(&mut rng, p, 0.2),
            3.0 + rng.random::<f64>() * 5.0,
            0.5 + rng.random::<f64>(),
            BeliefRole::Prior,
        )
        .unwrap();
        let part = StatePartition::new(0, p, Vec::new()).unwrap();
        let spec = EvolutionSpec::new(1.0, 1.0, 1.0).unwrap();
        let fs: Vec<DVector<f64>> = (0..t_len).map(|_| normal_vec(&mut rng, p, 1.0)).collect();
        let ys: Vec<f64> = (0..t_len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut belief = prior.clone();
        for t in 0..t_len {
            let (post, _) = dlm::update(&belief, &fs[t], ys[t]).unwrap();
            belief = if t + 1 < t_len { dlm::evolve(&post, &spec, &part).unwrap() } else { post };
        }
        let oracle = batch_normal_gamma(&prior, &fs, &ys);
        worst = worst
            .max((&belief.mean - &oracle.mean).amax() / oracle.mean.amax().max(1e-12))
            .max(max_rel_mat(&belief.scale, &oracle.scale))
            .max(rel_err(belief.dof, oracle.dof))
            .max(rel_err(belief.precision_scale, oracle.precision_scale));

        // Matrix-normal/inverse-Wishart DLM with unit discounts.
        let prior = MatrixNIWBelief {
            state_mode: DMatrix::from_fn(p, m, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)),
            state_scale: random_spd(&mut rng, p, 0.2),
            dof: m as f64 + 2.0 + rng.random::<f64>() * 3.0,
            sum_squares: random_spd(&mut rng, m, 0.3),
            role: BeliefRole::Prior,
        };
        let fs: Vec<DVector<f64>> = (0..t_len).map(|_| normal_vec(&mut rng, p, 1.0)).collect();
        let ys: Vec<DVector<f64>> = (0..t_len).map(|_| normal_vec(&mut rng, m, 1.0)).collect();
        let mut belief = prior.clone();
        for t in 0..t_len {
            let post = wdlm::wdlm_update(&belief, &fs[t], &ys[t]).unwrap();
            belief = if t + 1 < t_len { wdlm::wdlm_evolve(&post, 1.0, 1.0).unwrap() } else { post };
        }
        let oracle = batch_matrix_niw(&prior, &fs, &ys);
        worst = worst
            .max(max_rel_mat(&belief.state_mode, &oracle.state_mode))
            .max(max_rel_mat(&belief.state_scale, &oracle.state_scale))
            .max(max_rel_mat(&belief.sum_squares, &oracle.sum_squares))
            .max(rel_err(belief.dof, oracle.dof));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "sequential updates match batch conjugate posteriors",
        worst < 1e-8 && secs < 1.0,
        format!("max rel err {worst:.2e}, {secs:.3}s"),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn vb_self_recovery() {
    let start = Instant::now();
    let truth = NormalGammaBelief::new(
        DVector::from_vec(vec![0.02, -0.5]),
        DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.1]),
        10.0,
        2e-4,
        BeliefRole::Posterior,
    )
    .unwrap();
    let draws = 100_000;
    // Replicates give the Monte Carlo spread of each estimate.
    let fits: Vec<NormalGammaBelief> = (0..25u64)
        .map(|seed| {
            let sample = engine::sample_normal_gamma(std::slice::from_ref(&truth), draws, seed + 1, Stage::Posterior, 0)
                .unwrap();
            decouple::vb_decouple(&sample, std::slice::from_ref(&truth)).unwrap().beliefs.remove(0)
        })
        .collect();
    let spread = |f: &dyn Fn(&NormalGammaBelief) -> f64| {
        let v: Vec<f64> = fits.iter().map(f).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let fit = &fits[0];
    let mut checks: Vec<(String, f64, f64, f64)> = Vec::new();
    for i in 0..2 {
        checks.push((format!("m[{i}]"), fit.mean[i], truth.mean[i], spread(&|b| b.mean[i])));
        for k in i..2 {
            checks.push((format!("C[{i}{k}]"), fit.scale[(i, k)], truth.scale[(i, k)], spread(&|b| b.scale[(i, k)])));
        }
    }
    checks.push(("s".into(), fit.precision_scale, truth.precision_scale, spread(&|b| b.precision_scale)));
    let worst_z = checks.iter().map(|(_, est, tru, se)| (est - tru).abs() / se).fold(0.0, f64::max);
    let n_err = rel_err(fit.dof, truth.dof);
    let secs = start.elapsed().as_secs_f64();
    let detail = checks
        .iter()
        .map(|(name, est, tru, se)| format!("{name} z={:.2}", (est - tru) / se))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        2,
        "VB decoupling recovers a known normal/gamma",
        n_err < 0.05 && worst_z < 3.0 && secs < 10.0,
        format!("n={:.3} (rel err {:.2}%), {detail}, {secs:.2}s", fit.dof, 100.0 * n_err),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn digamma_root_solve() {
    let mut worst: f64 = 0.0;
    for n0 in [2.0, 5.0, 10.0, 50.0] {
        for s in [1e-4, 1.0, 30.0] {
            // λ ~ Gamma(n/2, rate n s / 2): E[λ] = 1/s, E[log λ] = ψ(n/2) - log(n s / 2).
            let e_lambda = 1.0 / s;
            let e_log = digamma(0.5 * n0) - (0.5 * n0 * s).ln();
            for p in [0.0, 1.0, 3.0] {
                let n = decouple::solve_dof(e_lambda, e_log, p, p).expect("root found");
                worst = worst.max((n - n0).abs());
            }
        }
    }
    verdict(3, "dof root-solve returns n0 from exact moments", worst < 1e-8, format!("max abs err {worst:.2e}"));
}

// ---------------------------------------------------------------------------

#[test]
fn recoupling_without_parents() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = 4;
    let draws = 10_000;
    let beliefs: Vec<NormalGammaBelief> = (0..m)
        .map(|_| {
            NormalGammaBelief::new(
                normal_vec(&mut rng, 2, 1e-3),
                random_spd(&mut rng, 2, 1e-2),
                20.0,
                1e-4,
                BeliefRole::Posterior,
            )
            .unwrap()
        })
        .collect();
    let partitions: Vec<StatePartition> = (0..m).map(|j| StatePartition::new(j, 2, Vec::new()).unwrap()).collect();
    let (sample, diag) = engine::recouple(&beliefs, &partitions, draws, 3, 0, None).unwrap();
    let uniform = sample.weights().iter().all(|&w| w == 1.0 / draws as f64);
    let entropy = decouple::vb_decouple(&sample, &beliefs).unwrap().entropy;
    verdict(
        4,
        "recoupling with empty parental sets is exact",
        uniform && sample.ess() == draws as f64 && diag.ess == draws as f64 && entropy.value < 0.05,
        format!("uniform={uniform}, ESS={}, entropy={:.4}", sample.ess(), entropy.value),
    );
}

// ---------------------------------------------------------------------------

/// Null-space oracle for `min w'Σw s.t. A w = b`. Rows of `A` are first
/// normalised; `Z` spans the null space of `A` (eigenvectors of `A'A` with
/// zero eigenvalue), `w₀ = A'(AA')⁻¹ b`, and the minimiser is
/// `w₀ + Z u` with `Z'ΣZ u = -Z'Σ w₀`.
fn null_space_qp(cov: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = cov.nrows();
    let norms: Vec<f64> = a.row_iter().map(|r| r.norm()).collect();
    let a = DMatrix::from_fn(a.nrows(), m, |i, j| a[(i, j)] / norms[i]);
    let b = DVector::from_fn(b.len(), |i, _| b[i] / norms[i]);
    let w0 = a.transpose() * (&a * a.transpose()).try_inverse().unwrap() * b;
    let eig = (a.transpose() * &a).symmetric_eigen();
    let null: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i].abs() < 1e-9).collect();
    if null.is_empty() {
        return w0;
    }
    let z = DMatrix::from_fn(m, null.len(), |i, c| eig.eigenvectors[(i, null[c])]);
    let zsz = z.transpose() * cov * &z;
    let u = zsz.cholesky().unwrap().solve(&(-(z.transpose() * cov * &w0)));
    w0 + z * u
}

fn stack(rows: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

#[test]
fn qp_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut degenerate_ok = true;
    for instance in 0..100 {
        let m = 2 + instance % 5;
        let cov = random_spd(&mut rng, m, 1e-4);
        let mean = normal_vec(&mut rng, m, 1e-3);
        let tau = TARGET_RETURN_LOW;
        let ones = DVector::from_element(m, 1.0);
        let var = |w: &DVector<f64>| w.dot(&(&cov * w));
        let scaled = |w: &DVector<f64>, o: &DVector<f64>| (w - o).amax() / o.amax().max(1.0);

        let w_mv = portfolio::min_variance(&mean, &cov).unwrap();
        let o_mv = null_space_qp(&cov, &stack(&[ones.clone()]), &DVector::from_vec(vec![1.0]));
        worst = worst.max(scaled(&w_mv, &o_mv));

        let w_tr = portfolio::target_return(&mean, &cov, tau).unwrap();
        let o_tr = null_space_qp(&cov, &stack(&[ones.clone(), mean.clone()]), &DVector::from_vec(vec![1.0, tau]));
        worst = worst.max(scaled(&w_tr, &o_tr));

        // With two assets the neutral rule pins both weights and the
        // covariance constraint cannot hold as well.
        let e0 = DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 });
        if m == 2 {
            degenerate_ok &= matches!(
                portfolio::benchmark_neutral(&mean, &cov, None),
                Err(sgdlm::Error::DegenerateConstraint { .. })
            );
            continue;
        }
        let mut cross = cov.column(0).into_owned();
        cross[0] = 0.0;
        let mut rows = vec![ones.clone(), e0.clone(), cross.clone()];
        let mut rhs = vec![1.0, 0.0, 0.0];
        if m > 3 {
            rows.push(mean.clone());
            rhs.push(tau);
        }
        let tau_opt = (m > 3).then_some(tau);
        let w_bn = portfolio::benchmark_neutral(&mean, &cov, tau_opt).unwrap();
        let o_bn = null_space_qp(&cov, &stack(&rows), &DVector::from_vec(rhs.clone()));
        worst = worst.max(scaled(&w_bn, &o_bn));

        // Each rule adds constraints to the previous one.
        let slack = 1e-12 * var(&w_mv).abs().max(1e-12);
        monotone &= var(&w_mv) <= var(&w_tr) + slack;
        if m > 3 {
            monotone &= var(&w_tr) <= var(&w_bn) + slack;
        }
    }
    verdict(
        5,
        "portfolio rules match a null-space QP oracle",
        worst < 1e-8 && monotone && degenerate_ok,
        format!("max scaled err {worst:.2e}, nested monotone={monotone}, two-asset neutral flagged={degenerate_ok}"),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn phase_out_exactness() {
    let cfg = SelectionConfig::default();
    let span = cfg.warmup_span;
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    // Series 0 with local level plus parents 1 (core) and 2 (just demoted).
    let mut sets = ParentalSets::with_core(0, [1]).unwrap();
    sets.phase_out.insert(2, 0);
    let part = sets.partition(1).unwrap();
    let pos = part.position_of(2).unwrap();
    let mut post = NormalGammaBelief::new(
        DVector::from_vec(vec![1e-3, 0.4, -0.55]),
        random_spd(&mut rng, 3, 1e-2),
        30.0,
        1e-4,
        BeliefRole::Posterior,
    )
    .unwrap();
    let mut means = Vec::new();
    for _ in 0..span {
        let g = sets.transition_diag(&part, span).unwrap();
        let spec = EvolutionSpec::new(0.99, 0.99, 0.95).unwrap().with_transition(g);
        let prior = dlm::evolve(&post, &spec, &part).unwrap();
        means.push(prior.mean[pos]);
        let f = DVector::from_vec(vec![1.0, 0.01 * rng.random::<f64>(), 0.01 * rng.random::<f64>()]);
        post = dlm::update(&prior, &f, 0.01 * rng.sample::<f64, _>(StandardNormal)).unwrap().0;
        sets.increment_ages();
    }
    let exact_zero = means[span - 1] == 0.0 && means[..span - 1].iter().all(|&v| v != 0.0);

    // Random selection sequence: ages, review, proposals, invariants.
    let m = 12;
    let cfg = SelectionConfig {
        core_target: 4,
        n_max: 5,
        ..SelectionConfig::default()
    };
    let mut sets = ParentalSets::new(3);
    let mut disjoint = true;
    let mut matured_ok = true;
    let mut admitted_at: BTreeMap<usize, usize> = BTreeMap::new();
    for step in 0..10_000 {
        sets.increment_ages();
        let snr: BTreeMap<usize, f64> = sets.all_parents().into_iter().map(|k| (k, rng.random::<f64>())).collect();
        let (next, _) = selection::review(&sets, &snr, &cfg).unwrap();
        sets = next;
        // A parent admitted Δt steps ago must now be core or phasing out.
        for (&k, &t0) in &admitted_at {
            if step - t0 == span {
                let state = sets.membership().into_iter().find(|&(p, _)| p == k).map(|(_, s)| s);
                matured_ok &= matches!(state, Some(Membership::Core) | Some(Membership::PhaseOut));
            }
        }
        let row: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let candidates = selection::propose_candidates(&row, &sets, &cfg);
        for k in selection::admit(&mut sets, &candidates, &cfg) {
            admitted_at.insert(k, step);
        }
        disjoint &= sets.check_invariants(&cfg).is_ok();
    }
    verdict(
        6,
        "phase-out reaches exact zero; parental sets stay disjoint",
        exact_zero && disjoint && matured_ok,
        format!("final prior mean {:e}, disjoint={disjoint}, matured={matured_ok}", means[span - 1]),
    );
}

// ---------------------------------------------------------------------------

fn core_edge_recovery(ledger: &BacktestLedger, truth: &[Vec<usize>], last: usize) -> f64 {
    let rows = &ledger.rows[ledger.rows.len() - last..];
    let total: usize = truth.iter().map(Vec::len).sum();
    let hits: usize = rows
        .iter()
        .map(|r| {
            let sel = r.selection.as_ref().expect("selection log");
            truth
                .iter()
                .enumerate()
                .map(|(j, parents)| {
                    parents
                        .iter()
                        .filter(|&&k| sel.membership[j].contains(&(k, Membership::Core)))
                        .count()
                })
                .sum::<usize>()
        })
        .sum();
    hits as f64 / (total * rows.len()) as f64
}

#[test]
fn synthetic_structure_payoff() {
    let start = Instant::now();
    let sim = SimulationConfig {
        n_series: 10,
        n_steps: 1500,
        parents_per_series: 3,
        seed: 11,
        ..SimulationConfig::default()
    };
    let (panel, truth) = simulate(&SyntheticSpec::ring(&sim).unwrap()).unwrap();
    let wishart = run_filter(&panel, &ModelConfig::preset("W1").unwrap()).unwrap();
    let ll_w = wishart.summary.log_likelihood;

    let mut lls = Vec::new();
    let mut recovery = Vec::new();
    for seed in 1..=5 {
        let mut cfg = ModelConfig::preset("M1").unwrap();
        cfg.seed = seed;
        cfg.sgdlm.n_draws = 500;
        cfg.sgdlm.prior.gamma_var = 0.1;
        cfg.selection.new_parent_prior_var = 0.1;
        cfg.selection.core_target = 6;
        cfg.selection.n_max = 9;
        let ledger = run_filter(&panel, &cfg).unwrap();
        lls.push(ledger.summary.log_likelihood);
        recovery.push(core_edge_recovery(&ledger, &truth.parents(), 200));
    }
    let n = lls.len() as f64;
    let mean = lls.iter().sum::<f64>() / n;
    // Standard error of the seed-averaged log-likelihood.
    let se = (lls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let margin = mean - ll_w;
    let min_recovery = recovery.iter().copied().fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "SGDLM with selection beats the Wishart DLM on a sparse simultaneous panel",
        margin > 3.0 * se && min_recovery >= 0.6 && secs < 300.0,
        format!(
            "ll margin {margin:.1} vs 3 se {:.1} (per seed {:?}), edge recovery min {:.0}% (per seed {:?}), {secs:.0}s",
            3.0 * se,
            lls.iter().map(|l| (l - ll_w).round()).collect::<Vec<_>>(),
            100.0 * min_recovery,
            recovery.iter().map(|r| (100.0 * r).round()).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn forecast_calibration() {
    let sim = SimulationConfig {
        n_series: 5,
        n_steps: 1000,
        parents_per_series: 2,
        seed: 21,
        ..SimulationConfig::default()
    };
    let (panel, truth) = simulate(&SyntheticSpec::ring(&sim).unwrap()).unwrap();
    let mut cfg = ModelConfig::preset("M1").unwrap();
    cfg.selection_enabled = false;
    cfg.sgdlm.parents = Some(truth.parents());
    cfg.sgdlm.beta = 1.0;
    cfg.sgdlm.delta_phi = 1.0;
    cfg.sgdlm.delta_gamma = 1.0;
    cfg.sgdlm.prior.gamma_var = 0.1;
    cfg.sgdlm.n_draws = 1000;
    let ledger = run_filter(&panel, &cfg).unwrap();
    let coverage = ledger.summary.coverage_90;
    verdict(
        8,
        "90% forecast intervals are calibrated on matched synthetic truth",
        (0.85..=0.95).contains(&coverage),
        format!("coverage {:.2}%", 100.0 * coverage),
    );
}

// ---------------------------------------------------------------------------

fn exported_bytes(ledger: &BacktestLedger) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    export(ledger, dir.path()).unwrap();
    let mut names: Vec<&str> = export::CSV_FILES.to_vec();
    names.push(export::REPORT_FILE);
    names
        .into_iter()
        .map(|n| (n.to_string(), std::fs::read(dir.path().join(n)).unwrap()))
        .collect()
}

#[test]
fn determinism_across_thread_counts() {
    let sim = SimulationConfig {
        n_series: 5,
        n_steps: 120,
        seed: 4,
        ..SimulationConfig::default()
    };
    let (panel, _) = simulate(&SyntheticSpec::ring(&sim).unwrap()).unwrap();
    let mut cfg = ModelConfig::preset("M1").unwrap();
    cfg.sgdlm.n_draws = 500;
    cfg.selection.core_target = 2;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| exported_bytes(&run_filter(&panel, &cfg).unwrap()))
    };
    let one = run(1);
    let again = run(1);
    let four = run(4);
    let differing: Vec<&str> = one
        .iter()
        .zip(&four)
        .zip(&again)
        .filter(|((a, b), c)| a.1 != b.1 || a.1 != c.1)
        .map(|((a, _), _)| a.0.as_str())
        .collect();
    verdict(
        9,
        "identical seeds give byte-identical exports for 1 and 4 threads",
        differing.is_empty(),
        format!("{} files compared, differing {:?}", one.len(), differing),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn metric_formula_fidelity() {
    let daily = [0.01, -0.02, 0.015, 0.003];
    let rows: Vec<DayRecord> = daily
        .iter()
        .enumerate()
        .map(|(t, &r)| DayRecord {
            date: NaiveDate::from_ymd_opt(2021, 3, 1 + t as u32).unwrap(),
            forecast_mean: DVector::zeros(1),
            forecast_sd: DVector::from_element(1, 0.01),
            observation: DVector::from_element(1, r),
            log_density: 0.0,
            abs_errors: DVector::from_element(1, r.abs()),
            pit: DVector::from_element(1, 0.5),
            ess: None,
            entropy: None,
            selection: None,
            strategies: vec![StrategyDay {
                weights: DVector::from_element(1, 1.0),
                turnover: 0.0,
                cost: 0.0,
                traded: false,
                net_log_return: Some(r),
            }],
        })
        .collect();
    let summary = metrics(&rows, &["P".to_string()]);
    let s = &summary.strategies[0];
    // Mean 0.002; squared deviations 6.4e-5, 4.84e-4, 1.69e-4, 1e-6 sum to 7.18e-4.
    let ret = 252.0 * 0.002;
    let vol = (252.0 * 7.18e-4 / 3.0f64).sqrt();
    let errs = [
        (s.annual_return - ret).abs(),
        (s.annual_volatility - vol).abs(),
        (s.sharpe - ret / vol).abs(),
        (s.final_value - INITIAL_VALUE * 0.008f64.exp()).abs() / INITIAL_VALUE,
        (summary.mad - 0.012).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    verdict(
        10,
        "annualised return, volatility and Sharpe match hand computation",
        worst < 1e-12,
        format!("return {:.6}, vol {:.6}, sharpe {:.6}, max err {worst:.1e}", s.annual_return, s.annual_volatility, s.sharpe),
    );
}
