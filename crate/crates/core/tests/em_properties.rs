mod oracles;

use nalgebra::{DMatrix, DVector};
use oracles::{exact_gau_stats, exact_skt_stats, random_correlation, rng, row_layout, skt_param_change, TinyCase};
use rand::Rng;
use skt_spatial::gaussian::{gau_mstep, GauParams, GauRegionParams};
use skt_spatial::mcem::{
    fit, gibbs_estep, initial_params, mstep, q_gradient, q_value, EmTrace, FitConfig, GibbsConfig, InitConfig,
    MStepConfig, RegionStats, SufficientStats,
};
use skt_spatial::model::{complete_data_loglik, simulate, CorrelationModel, Dataset, LatentState, RegionParams, SktParams, ZetaMode};
use skt_spatial::presets::{appendix_layout, appendix_params};
use skt_spatial::SpatialLayout;
use statrs::function::gamma::{digamma, ln_gamma};

fn matern(range: f64) -> CorrelationModel {
    CorrelationModel::matern(range, 1.5).unwrap()
}

fn six_site_params() -> (SpatialLayout, SktParams) {
    let layout = row_layout(&[3, 3]);
    let params = SktParams {
        regions: vec![
            RegionParams { delta: vec![0.5, 0.6, 0.7], zeta: vec![0.3; 3], nu: 3.5, psi: matern(70.0) },
            RegionParams { delta: vec![-0.2, 0.4, 0.1], zeta: vec![0.5; 3], nu: 7.0, psi: matern(110.0) },
        ],
        sigma: CorrelationModel::free(&oracles::corr2(0.6)),
        zeta_mode: ZetaMode::Tied,
    };
    (layout, params)
}

#[test]
fn skt_mstep_has_the_truth_as_fixed_point() {
    let tiny = TinyCase { zeta: [0.6, 0.5], delta: [0.7, -0.4], nu: [4.0, 6.0], rho: 0.6 };
    let (six_layout, six) = six_site_params();
    let cases = [
        ("tiny", tiny.layout(), tiny.params()),
        ("six sites", six_layout, six),
        ("appendix", appendix_layout(), appendix_params().unwrap()),
    ];
    for (name, layout, truth) in cases {
        let model = truth.compile(&layout).unwrap();
        let stats = exact_skt_stats(&model, 1000);
        let out = mstep(&stats, &truth, &layout, &MStepConfig::default()).unwrap();
        let (change, which) = skt_param_change(&out.params, &truth);
        assert!(change < 1e-4, "{name}: {which} moved by {change}");
    }
}

#[test]
fn gau_mstep_has_the_truth_as_fixed_point() {
    let cases = [
        (
            row_layout(&[1, 1]),
            GauParams {
                regions: vec![
                    GauRegionParams { zeta: 0.6, psi: CorrelationModel::free(&DMatrix::identity(1, 1)) },
                    GauRegionParams { zeta: -0.3, psi: CorrelationModel::free(&DMatrix::identity(1, 1)) },
                ],
                sigma: CorrelationModel::free(&oracles::corr2(0.5)),
            },
        ),
        (
            row_layout(&[3, 4]),
            GauParams {
                regions: vec![
                    GauRegionParams { zeta: 0.4, psi: matern(80.0) },
                    GauRegionParams { zeta: 0.2, psi: matern(120.0) },
                ],
                sigma: CorrelationModel::free(&oracles::corr2(0.8)),
            },
        ),
    ];
    for (layout, truth) in cases {
        let model = truth.compile(&layout).unwrap();
        let stats = exact_gau_stats(&model, 1000);
        let out = gau_mstep(&stats, &truth, &layout, &MStepConfig::default()).unwrap();
        let (change, which) = oracles::gau_param_change(&out.params, &truth);
        assert!(change < 1e-4, "{which} moved by {change}");
    }
}

#[test]
fn nonparametric_psi_at_zero_skewness_is_the_sample_covariance() {
    let layout = row_layout(&[3, 2]);
    let free = |d: usize| CorrelationModel::free(&DMatrix::identity(d, d));
    let params = SktParams {
        regions: vec![
            RegionParams { delta: vec![0.0; 3], zeta: vec![0.0; 3], nu: 1e6, psi: matern(90.0) },
            RegionParams { delta: vec![0.0; 2], zeta: vec![0.0; 2], nu: 1e6, psi: matern(90.0) },
        ],
        sigma: CorrelationModel::free(&DMatrix::identity(2, 2)),
        zeta_mode: ZetaMode::Tied,
    };
    let sim = simulate(&params, &layout, 400, 31).unwrap();
    let current = SktParams {
        regions: params.regions.iter().map(|r| RegionParams { psi: free(r.zeta.len()), ..r.clone() }).collect(),
        ..params.clone()
    };
    // exact conditional moments in this limit: Z = 1, eta0 and eta1 carry no data
    let tf = 400.0;
    let h = (2.0 / std::f64::consts::PI).sqrt();
    let regions: Vec<RegionStats> = (0..2)
        .map(|r| {
            let d = layout.region_size(r);
            let mut s_yy = DMatrix::zeros(d, d);
            let mut sum_y = DVector::zeros(d);
            for t in 0..400 {
                let y = sim.data.region_block(t, r);
                s_yy += &y * y.transpose();
                sum_y += y;
            }
            RegionStats {
                s_yy,
                s_y0: DVector::zeros(d),
                s_y1: sum_y * h,
                s00: tf,
                s01: 0.0,
                s11: tf,
                sum_z: tf,
                sum_log_z: tf * (digamma(5e5) - 5e5f64.ln()),
            }
        })
        .collect();
    let stats = SufficientStats { n_times: 400, regions, cross_sum: DMatrix::identity(2, 2) * tf };
    let out = mstep(&stats, &current, &layout, &MStepConfig::default()).unwrap();
    for r in 0..2 {
        let d = layout.region_size(r);
        let mut cov = DMatrix::zeros(d, d);
        for t in 0..400 {
            let y = sim.data.region_block(t, r);
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += y[i] * y[j] / tf;
                }
            }
        }
        let CorrelationModel::Free { matrix } = &out.params.regions[r].psi else { panic!("expected free psi") };
        let got = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
        assert!((&got - &cov).abs().max() < 1e-12);
        assert_eq!(got, got.transpose());
        assert!(got.symmetric_eigenvalues().min() > 0.0);
    }
}

fn stats_from_gibbs(data: &Dataset, params: &SktParams, sweeps: usize, seed: u64) -> SufficientStats {
    let model = params.compile(data.layout()).unwrap();
    let m = gibbs_estep(data, &model, sweeps, sweeps / 5, seed, 0).unwrap();
    SufficientStats::from_moments(data, &m).unwrap()
}

#[test]
fn each_update_does_not_decrease_its_part_of_q() {
    let layout = appendix_layout();
    let truth = appendix_params().unwrap();
    for seed in [1u64, 2, 3] {
        let sim = simulate(&truth, &layout, 150, seed).unwrap();
        let mut current = truth.clone();
        for r in &mut current.regions {
            r.nu = 6.0;
            r.zeta = vec![0.35; 9];
            r.delta = vec![0.3; 9];
            r.psi = matern(55.0);
        }
        current.sigma = CorrelationModel::free(&oracles::corr2(0.4));
        let stats = stats_from_gibbs(&sim.data, &current, 150, seed);
        let out = mstep(&stats, &current, &layout, &MStepConfig::default()).unwrap().params;
        let q = |p: &SktParams| q_value(&stats, &p.compile(&layout).unwrap());
        let mut p = current.clone();
        let mut before = q(&p);
        let steps: [(&str, &dyn Fn(&mut SktParams)); 5] = [
            ("nu", &|p| p.regions.iter_mut().zip(&out.regions).for_each(|(a, b)| a.nu = b.nu)),
            ("psi", &|p| p.regions.iter_mut().zip(&out.regions).for_each(|(a, b)| a.psi = b.psi.clone())),
            ("zeta", &|p| p.regions.iter_mut().zip(&out.regions).for_each(|(a, b)| a.zeta = b.zeta.clone())),
            ("delta", &|p| p.regions.iter_mut().zip(&out.regions).for_each(|(a, b)| a.delta = b.delta.clone())),
            ("sigma", &|p| p.sigma = out.sigma.clone()),
        ];
        for (name, apply) in steps {
            apply(&mut p);
            let after = q(&p);
            assert!(after >= before - 1e-9 * before.abs(), "seed {seed}, {name}: Q {before} -> {after}");
            before = after;
        }
        assert_eq!(p, out);
    }
}

fn free_zeta_case(seed: u64) -> (SpatialLayout, SktParams, Dataset, Vec<LatentState>) {
    let layout = row_layout(&[3, 3]);
    let mut g = rng(seed);
    let region = |g: &mut rand_chacha::ChaCha8Rng| RegionParams {
        delta: (0..3).map(|_| g.random_range(-0.8..0.8)).collect(),
        zeta: (0..3).map(|_| g.random_range(-0.6..0.6)).collect(),
        nu: g.random_range(2.5..12.0),
        psi: matern(g.random_range(50.0..150.0)),
    };
    let truth = SktParams {
        regions: vec![region(&mut g), region(&mut g)],
        sigma: CorrelationModel::free(&oracles::corr2(g.random_range(-0.7..0.7))),
        zeta_mode: ZetaMode::Free,
    };
    let sim = simulate(&truth, &layout, 40, seed).unwrap();
    // evaluate away from the truth
    let theta = SktParams {
        regions: vec![region(&mut g), region(&mut g)],
        sigma: truth.sigma.clone(),
        zeta_mode: ZetaMode::Free,
    };
    (layout, theta, sim.data, sim.latents)
}

#[test]
fn analytic_partials_match_finite_differences() {
    for seed in [11u64, 12, 13] {
        let (layout, theta, data, latents) = free_zeta_case(seed);
        let stats = SufficientStats::from_latents(&data, &latents).unwrap();
        let grad = q_gradient(&stats, &theta.compile(&layout).unwrap());
        let ell = |p: &SktParams| complete_data_loglik(&data, &latents, &p.compile(&layout).unwrap()).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, set: &dyn Fn(&mut SktParams, f64), name: String| {
            let mut up = theta.clone();
            let mut down = theta.clone();
            set(&mut up, h);
            set(&mut down, -h);
            let fd = (ell(&up) - ell(&down)) / (2.0 * h);
            let err = (fd - analytic).abs() / analytic.abs().max(1.0);
            assert!(err < 1e-5, "seed {seed} {name}: fd {fd} analytic {analytic}");
        };
        for r in 0..2 {
            check(grad.nu[r], &|p, e| p.regions[r].nu += e, format!("nu[{r}]"));
            for i in 0..3 {
                check(grad.zeta[r][i], &|p, e| p.regions[r].zeta[i] += e, format!("zeta[{r}][{i}]"));
                check(grad.delta[r][i], &|p, e| p.regions[r].delta[i] += e, format!("delta[{r}][{i}]"));
            }
        }
        // Q from latent statistics differs from the complete-data value by a constant
        let other = free_zeta_case(seed + 100).1;
        let diff = |p: &SktParams| q_value(&stats, &p.compile(&layout).unwrap()) - ell(p);
        assert!((diff(&theta) - diff(&other)).abs() < 1e-8 * ell(&theta).abs());
    }
}

/// The complete-data log-likelihood written out term by term: per region
/// `T nu/2 log(nu/2) - T log Gamma(nu/2) - T/2 sum log(1-zeta^2)
/// - T/2 sum log(1-delta^2) - T/2 log|Psi| + (nu+d)/2 sum log Z
/// - 1/2 sum Z [x' D^-1 Psi^-1 D^-1 x + eta1^2 + nu]`, plus
/// `-T/2 log|Sigma| - 1/2 sum eta0' Dz^-1 Sigma^-1 Dz^-1 eta0`.
fn literal_complete_loglik(
    y: &DMatrix<f64>,
    ranges: &[std::ops::Range<usize>],
    latents: &[LatentState],
    zeta: &[Vec<f64>],
    delta: &[Vec<f64>],
    nu: &[f64],
    psi: &[DMatrix<f64>],
    sigma: &DMatrix<f64>,
) -> f64 {
    let tf = y.nrows() as f64;
    let mut total = 0.0;
    for r in 0..ranges.len() {
        let d = ranges[r].len();
        let mut lr = tf * nu[r] / 2.0 * (nu[r] / 2.0).ln() - tf * ln_gamma(nu[r] / 2.0);
        lr -= tf / 2.0 * zeta[r].iter().map(|z| (1.0 - z * z).ln()).sum::<f64>();
        lr -= tf / 2.0 * delta[r].iter().map(|v| (1.0 - v * v).ln()).sum::<f64>();
        lr -= tf / 2.0 * psi[r].determinant().ln();
        let psi_inv = psi[r].clone().try_inverse().unwrap();
        let dinv = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0 / ((1.0 - zeta[r][i] * zeta[r][i]).sqrt() * (1.0 - delta[r][i] * delta[r][i]).sqrt())
            } else {
                0.0
            }
        });
        let m = &dinv * psi_inv * &dinv;
        for (t, lat) in latents.iter().enumerate() {
            let x = DVector::from_fn(d, |i, _| {
                let s = ranges[r].start + i;
                let dz = (1.0 - zeta[r][i] * zeta[r][i]).sqrt();
                y[(t, s)] - zeta[r][i] * lat.eta0[r] - dz * delta[r][i] * lat.eta1[r]
            });
            let z = lat.z[r];
            lr += (nu[r] + d as f64) / 2.0 * z.ln();
            lr -= 0.5 * z * ((x.transpose() * &m * &x)[(0, 0)] + lat.eta1[r] * lat.eta1[r] + nu[r]);
        }
        total += lr;
    }
    total -= tf / 2.0 * sigma.determinant().ln();
    let sigma_inv = sigma.clone().try_inverse().unwrap();
    let n = sigma.nrows();
    for lat in latents {
        let dz = DMatrix::from_fn(n, n, |i, j| if i == j { lat.z[i].sqrt() } else { 0.0 });
        let e = DVector::from_column_slice(&lat.eta0);
        total -= 0.5 * (e.transpose() * &dz * &sigma_inv * &dz * &e)[(0, 0)];
    }
    total
}

#[test]
fn complete_loglik_matches_a_term_by_term_transcription() {
    let layout = row_layout(&[4, 4]);
    for seed in 0..6u64 {
        let mut g = rng(100 + seed);
        let psi: Vec<DMatrix<f64>> = (0..2).map(|_| random_correlation(4, &mut g)).collect();
        let sigma = oracles::corr2(g.random_range(-0.8..0.8));
        let regions: Vec<RegionParams> = (0..2)
            .map(|r| RegionParams {
                delta: (0..4).map(|_| g.random_range(-0.9..0.9)).collect(),
                zeta: (0..4).map(|_| g.random_range(-0.9..0.9)).collect(),
                nu: g.random_range(1.0..20.0),
                psi: CorrelationModel::free(&psi[r]),
            })
            .collect();
        let params = SktParams { regions, sigma: CorrelationModel::free(&sigma), zeta_mode: ZetaMode::Free };
        let sim = simulate(&params, &layout, 10, seed).unwrap();
        let model = params.compile(&layout).unwrap();
        let lib = complete_data_loglik(&sim.data, &sim.latents, &model).unwrap();
        let zeta: Vec<Vec<f64>> = params.regions.iter().map(|r| r.zeta.clone()).collect();
        let delta: Vec<Vec<f64>> = params.regions.iter().map(|r| r.delta.clone()).collect();
        let nu: Vec<f64> = params.regions.iter().map(|r| r.nu).collect();
        let ranges = [0..4, 4..8];
        let reference = literal_complete_loglik(sim.data.values(), &ranges, &sim.latents, &zeta, &delta, &nu, &psi, &sigma);
        assert!((lib - reference).abs() < 1e-9 * reference.abs(), "seed {seed}: {lib} vs {reference}");
    }
}

fn quick_fit_config(growth: f64) -> FitConfig {
    FitConfig {
        gibbs: GibbsConfig { m0: 60, growth, m_max: 200, burn_in_fraction: 0.2, seed: 5 },
        max_iterations: 4,
        loglik_draws: 300,
        ..FitConfig::default()
    }
}

#[test]
fn fit_is_deterministic_and_its_trace_round_trips() {
    let layout = appendix_layout();
    let sim = simulate(&appendix_params().unwrap(), &layout, 80, 21).unwrap();
    let init = initial_params(&sim.data, &InitConfig::default()).unwrap();
    let cfg = quick_fit_config(1.0);
    let a = fit(&sim.data, &init, &cfg, None).unwrap();
    let mut seen = Vec::new();
    let mut cb = |it: &skt_spatial::mcem::EmIteration| seen.push(it.iteration);
    let b = fit(&sim.data, &init, &cfg, Some(&mut cb)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.status, b.status);
    assert_eq!(seen, (0..a.trace.iterations.len()).collect::<Vec<_>>());
    assert!(a.trace.iterations.iter().skip(1).all(|it| it.sweeps == 60));

    let json = serde_json::to_string(&a.trace).unwrap();
    let back: EmTrace = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a.trace);
    let fields = EmTrace::CSV_HEADER.split(',').count();
    for it in &a.trace.iterations {
        assert_eq!(EmTrace::csv_line(it).split(',').count(), fields);
        assert!(it.acceptance.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
    assert!(a.trace.iterations.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
}

#[test]
fn smoothed_likelihood_trend_is_non_decreasing() {
    let layout = appendix_layout();
    let sim = simulate(&appendix_params().unwrap(), &layout, 300, 8).unwrap();
    let init = initial_params(&sim.data, &InitConfig::default()).unwrap();
    let cfg = FitConfig { max_iterations: 10, loglik_draws: 1000, ..quick_fit_config(1.1) };
    let out = fit(&sim.data, &init, &cfg, None).unwrap();
    let its = &out.trace.iterations;
    let median3 = |k: usize| {
        let mut v = [its[k - 1].loglik, its[k].loglik, its[k + 1].loglik];
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[1]
    };
    for k in 1..its.len() - 2 {
        let (m0, m1) = (median3(k), median3(k + 1));
        let se = its[k].loglik_se.max(its[k + 1].loglik_se);
        assert!(m1 >= m0 - 2.0 * se, "window median fell from {m0} to {m1} (se {se})");
    }
    assert!(its.last().unwrap().loglik > its[0].loglik);
}
