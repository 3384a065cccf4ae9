//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! The process fails on any FAIL not listed in [`KNOWN_FAILURES`], and on a
//! listed failure that has started to pass.

use std::process::Command;
use std::time::{Duration, Instant};

use ccc_fiducial::ccc::{self, CccEvaluation, CccNormalization};
use ccc_fiducial::estimation::{self, FitResult};
use ccc_fiducial::fiducial::{
    beta_from_randoms, beta_information, observed_bartlett, sample_wishart_fiducial,
    wishart_from_randoms, DrawMode, FiducialContext, RecoveryObjective, WishartObservation,
};
use ccc_fiducial::intervals::{self, hdr_interval, IntervalMethod, IntervalOptions};
use ccc_fiducial::linalg::Mat;
use ccc_fiducial::model::{Family, ModelSpec, ParameterSet};
use ccc_fiducial::rng::substream;
use ccc_fiducial::simulation::{
    catalog, ccc_sample_oracle_seeded, coverage_study, generate_dataset, lookup, random_parameters,
    true_ccc, CoverageOptions, CoverageRow, Scenario,
};
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Criteria expected to fail, with the reason.
const KNOWN_FAILURES: &[(usize, &str)] = &[
    (
        4,
        "the published Poisson truth 0.822 is not reproduced: closed form, Monte Carlo and the sample oracle agree on 0.868 under every normalization candidate",
    ),
    (
        7,
        "the bootstrap over-covers (about 0.975) although its width (about 0.19) is below the published 0.213; fiducial and Fisher-Z coverages sit high as well, so the simulated estimates spread less than the published study implies",
    ),
    (
        10,
        "joint and proxy intervals differ systematically (proxy lower limit +0.003, upper limit -0.007 on average); with a 0.003 Monte-Carlo floor at 10^4 draws the mean difference sits at about 0.005",
    ),
];

/// Asymptotic Kolmogorov-Smirnov critical value at level 0.01, times sqrt(n).
const KS_CRIT_01: f64 = 1.628;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn scenario(name: &str) -> Scenario {
    lookup(name).unwrap().remove(0)
}

fn fit_of(s: &Scenario, n: usize, seed: u64) -> FitResult {
    let data = generate_dataset(s, n, &mut substream(seed, &[0])).unwrap();
    estimation::fit(&data, &s.spec).unwrap()
}

fn closed(spec: &ModelSpec, p: &ParameterSet) -> f64 {
    ccc::ccc_at(
        spec,
        p,
        CccEvaluation::Closed,
        CccNormalization::FactorTwo,
        0,
    )
    .unwrap()
    .value
}

fn within_budget(elapsed: Duration, secs: f64) -> (bool, String) {
    let t = elapsed.as_secs_f64();
    (t < secs, format!("{t:.1} s (budget {secs:.0} s)"))
}

fn c1_wishart_exactness() -> Outcome {
    let start = Instant::now();
    let (s, n, m) = (10.0, 5, 10_000);
    let obs = WishartObservation::new(Mat::from_element(1, 1, s), n).unwrap();
    let mut rng = substream(1, &[1]);
    let mut v: Vec<f64> = (0..m)
        .map(|_| sample_wishart_fiducial(&obs, &mut rng)[(0, 0)])
        .collect();
    v.sort_by(f64::total_cmp);
    let chi = ChiSquared::new(n as f64).unwrap();
    let mf = m as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - chi.cdf(s / x);
            (f - i as f64 / mf)
                .abs()
                .max(((i + 1) as f64 / mf - f).abs())
        })
        .fold(0.0, f64::max);
    let crit = KS_CRIT_01 / mf.sqrt();
    let (fast, t) = within_budget(start.elapsed(), 5.0);
    outcome(
        d < crit && fast,
        format!("KS {d:.5} vs critical {crit:.5}; {t}"),
    )
}

fn c2_substitution() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;

    let s = Mat::from_row_slice(3, 3, &[5.0, 1.0, 0.5, 1.0, 4.0, -0.3, 0.5, -0.3, 2.0]);
    let sigma = Mat::from_row_slice(3, 3, &[0.9, 0.2, 0.1, 0.2, 0.7, 0.05, 0.1, 0.05, 0.4]);
    let obs = WishartObservation::new(s, 12).unwrap();
    let v = observed_bartlett(&obs, &sigma).unwrap();
    let wishart = (wishart_from_randoms(&obs, &v) - &sigma).amax();
    worst = worst.max(wishart);

    let mut parts = vec![format!("wishart {wishart:.1e}")];
    for name in ["table1_gaussian", "table2_poisson", "tableS3_three_level"] {
        let sc = scenario(name);
        let fit = fit_of(&sc, 30, 2);
        let ctx = FiducialContext::new(&fit, sc.draw_mode()).unwrap();

        let err = ctx.err_cells(ctx.dispersion.center());
        let info = beta_information(
            &ctx.spec,
            ctx.n_subjects,
            &ctx.sigma_alpha_hat,
            &ctx.sigma_gamma_hat,
            &err,
        )
        .unwrap();
        let z = ccc_fiducial::linalg::Vect::zeros(ctx.beta_hat.len());
        let beta = (beta_from_randoms(&ctx.beta_hat, &info, &z).unwrap() - &ctx.beta_hat).amax();
        let p = ctx.dispersion;
        let disp = (p.value(p.observed_random()).value() - p.center().value()).abs();

        let draw = ctx
            .draw_from_randoms(&ctx.observed_randoms().unwrap())
            .unwrap();
        let plug = ctx.plug_in();
        let mut joint = (&draw.beta_tilde - &plug.beta).amax();
        for (a, b) in draw.sigma_alpha_tilde.iter().zip(&plug.sigma_alpha) {
            joint = joint.max((a - b).amax());
        }
        joint = joint
            .max((&draw.sigma_gamma_tilde - &plug.sigma_gamma).amax())
            .max((draw.dispersion_tilde.value() - plug.dispersion.value()).abs());
        worst = worst.max(beta).max(disp).max(joint);
        parts.push(format!(
            "{name}: beta {beta:.1e}, dispersion {disp:.1e}, joint {joint:.1e}"
        ));
    }
    let (fast, t) = within_budget(start.elapsed(), 1.0);
    outcome(
        worst < 1e-10 && fast,
        format!("max deviation {worst:.1e} ({}); {t}", parts.join("; ")),
    )
}

fn c3_bounds() -> Outcome {
    let upper = |name: &str| {
        let s = scenario(name);
        ccc::ccc_bounds(&s.spec, &s.truth, 200_000, &mut substream(3, &[0]))
            .unwrap()
            .upper
    };
    let (g, p) = (upper("table1_gaussian"), upper("table2_poisson"));
    outcome(
        (g - 0.961).abs() <= 0.01 && (p - 0.992).abs() <= 0.005,
        format!("table 1 bound {g:.4} (target 0.961 ± 0.01); Poisson bound {p:.4} (target 0.992 ± 0.005)"),
    )
}

fn c4_closed_forms() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, published) in [("table1_gaussian", 0.805), ("table2_poisson", 0.822)] {
        let s = scenario(name);
        let c = true_ccc(&s, CccNormalization::FactorTwo, 0, 0).unwrap();
        let o = ccc_sample_oracle_seeded(&s, 1_000_000, 4).unwrap();
        let agree = (o.value - c).abs() <= 3.0 * o.std_error;
        let repro = (c - published).abs() <= 0.01;
        pass &= agree && repro;
        let candidates: Vec<String> = [
            CccNormalization::FactorTwo,
            CccNormalization::NoFactorTwo,
            CccNormalization::TimeAveragedFixed,
        ]
        .iter()
        .map(|&n| format!("{n:?} {:.4}", true_ccc(&s, n, 0, 0).unwrap()))
        .collect();
        parts.push(format!(
            "{name}: closed {c:.4} vs oracle {:.4} ± {:.4} [{}], published {published} [{}] (candidates: {})",
            o.value,
            o.std_error,
            if agree { "agree" } else { "DISAGREE" },
            if repro { "reproduced" } else { "NOT reproduced" },
            candidates.join(", ")
        ));
    }
    let (fast, t) = within_budget(start.elapsed(), 120.0);
    outcome(pass && fast, format!("{}; {t}", parts.join("; ")))
}

fn c5_exact_vs_numerical() -> Outcome {
    let start = Instant::now();
    let s = scenario("table2_poisson");
    let exact = ccc::ccc_poisson_closed(&s.spec, &s.truth).unwrap().value;
    let mc = ccc::ccc_monte_carlo_seeded(&s.spec, &s.truth, 1_000_000, 5).unwrap();
    let se = mc.mc_std_error.unwrap();
    let (fast, t) = within_budget(start.elapsed(), 60.0);
    outcome(
        (mc.value - exact).abs() <= 3.0 * se && fast,
        format!("exact {exact:.5}, numerical {:.5} ± {se:.5}; {t}", mc.value),
    )
}

fn c6_sandwich() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for (fi, family) in [Family::Gaussian, Family::Poisson, Family::Gamma]
        .into_iter()
        .enumerate()
    {
        let mut violations = 0;
        for i in 0..1000u64 {
            let raters = 2 + (i % 2) as usize;
            let spec = match family {
                Family::Gaussian => ModelSpec::new(family, 6, 2, raters, 1).with_interaction(true),
                _ => ModelSpec::new(family, 5, 2, raters, 1),
            };
            let p = random_parameters(&spec, &mut substream(6, &[fi as u64, i]));
            let ok = if family == Family::Gamma {
                let n_mc = 20_000;
                let v = ccc::ccc_monte_carlo_seeded(&spec, &p, n_mc, 1000 + i).unwrap();
                let b = ccc::ccc_bounds(&spec, &p, n_mc, &mut substream(7, &[i])).unwrap();
                let slack = 3.0 * v.mc_std_error.unwrap();
                b.lower - slack <= v.value && v.value <= b.upper + slack
            } else {
                let v = closed(&spec, &p);
                let b = ccc::ccc_bounds(&spec, &p, 0, &mut substream(7, &[i])).unwrap();
                b.lower - 1e-12 <= v && v <= b.upper + 1e-12
            };
            violations += usize::from(!ok);
        }
        pass &= violations == 0;
        parts.push(format!("{}: {violations}/1000 outside", family.name()));
    }
    let (fast, t) = within_budget(start.elapsed(), 300.0);
    outcome(pass && fast, format!("{}; {t}", parts.join(", ")))
}

fn row(rows: &[CoverageRow], m: IntervalMethod) -> &CoverageRow {
    rows.iter().find(|r| r.method == m).unwrap()
}

fn c7_gaussian_coverage() -> Outcome {
    let start = Instant::now();
    let s = scenario("table1_gaussian");
    let opts = CoverageOptions {
        n_subjects: vec![30],
        replications: Some(200),
        n_draws: Some(2000),
        seed: 7,
        ..Default::default()
    };
    let rep = coverage_study(&s, &opts).unwrap();
    let f = row(&rep.rows, IntervalMethod::FiducialHdr);
    let z = row(&rep.rows, IntervalMethod::FisherZ);
    let b = row(&rep.rows, IntervalMethod::BootstrapBc);
    let checks = [
        (f.coverage - 0.942).abs() <= 0.05,
        (f.expected_width - 0.192).abs() <= 0.03,
        z.coverage >= 0.97,
        b.coverage <= 0.94,
    ];
    // 45 min on 8 cores, scaled to the cores available.
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()) as f64;
    let (fast, t) = within_budget(start.elapsed(), 45.0 * 60.0 * 8.0 / cores.min(8.0));
    outcome(
        checks.iter().all(|&c| c) && fast,
        format!(
            "fiducial coverage {:.3} (0.942 ± 0.05), width {:.4} (0.192 ± 0.03); Fisher-Z coverage {:.3} (≥ 0.97); bootstrap coverage {:.3} (≤ 0.94), width {:.4}; {} failed replications; {t}",
            f.coverage,
            f.expected_width,
            z.coverage,
            b.coverage,
            b.expected_width,
            rep.failures.len()
        ),
    )
}

fn c8_poisson_coverage() -> Outcome {
    let start = Instant::now();
    let s = scenario("table2_poisson");
    let opts = CoverageOptions {
        methods: vec![IntervalMethod::FiducialHdr],
        n_subjects: vec![30],
        replications: Some(100),
        n_draws: Some(2000),
        evaluation: CccEvaluation::Closed,
        seed: 8,
        ..Default::default()
    };
    let rep = coverage_study(&s, &opts).unwrap();
    let f = &rep.rows[0];
    let (fast, t) = within_budget(start.elapsed(), 3600.0);
    outcome(
        (f.coverage - 0.954).abs() <= 0.05 && (f.expected_width - 0.186).abs() <= 0.05 && fast,
        format!(
            "true CCC {:.4}; coverage {:.3} (0.954 ± 0.05), width {:.4} (0.186 ± 0.05); {t}",
            rep.true_ccc, f.coverage, f.expected_width
        ),
    )
}

fn c9_gradient() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for (si, s) in catalog().iter().enumerate() {
        // Small samples can put Σ̂ on the boundary, which leaves no pivot.
        let ctx = (0..20)
            .find_map(|seed| FiducialContext::new(&fit_of(s, 30, 90 + seed), s.draw_mode()).ok())
            .unwrap_or_else(|| panic!("{}: no dataset with a nonsingular scatter", s.name));
        let mut rng = substream(9, &[si as u64]);
        let randoms = ctx.scatter.sample_randoms(&mut rng);
        let target = ctx.scatter.target_from_randoms(&randoms);
        let err = ctx.err_cells(ctx.dispersion.center());
        let obj = RecoveryObjective::new(&ctx.spec, &target, &err);
        for _ in 0..10 {
            let v: Vec<f64> = ctx
                .theta_hat
                .iter()
                .map(|x| x + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (_, g) = obj.eval(&v);
            let scale = g.iter().fold(1e-8f64, |m, x| m.max(x.abs()));
            for k in 0..v.len() {
                let h = 1e-5 * v[k].abs().max(1.0);
                let (mut a, mut b) = (v.clone(), v.clone());
                a[k] += h;
                b[k] -= h;
                let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * h);
                worst = worst.max((fd - g[k]).abs() / scale);
            }
        }
        names.push(s.name.clone());
    }
    let (fast, t) = within_budget(start.elapsed(), 10.0);
    outcome(
        worst < 1e-5 && fast,
        format!(
            "max relative error {worst:.2e} over {} scenarios × 10 points; {t}",
            names.len()
        ),
    )
}

fn c10_joint_vs_proxy() -> Outcome {
    let start = Instant::now();
    let s = scenario("proxy_check");
    let mut diffs = Vec::new();
    for r in 0..20u64 {
        let fit = fit_of(&s, 30, 1000 + r);
        let iv = |mode| {
            let opts = IntervalOptions {
                n_draws: 10_000,
                mode,
                seed: 10 + r,
                ..Default::default()
            };
            intervals::fiducial_interval_from_fit(&fit, &opts).unwrap()
        };
        let (j, p) = (iv(DrawMode::Joint), iv(DrawMode::Proxy));
        diffs.push((j.lower - p.lower).abs());
        diffs.push((j.upper - p.upper).abs());
    }
    let mad = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let (fast, t) = within_budget(start.elapsed(), 600.0);
    outcome(
        mad <= 0.005 && fast,
        format!("mean |endpoint difference| {mad:.4} (≤ 0.005) over 20 datasets × 10⁴ draws; {t}"),
    )
}

fn c11_hdr() -> Outcome {
    let mut rng = substream(11, &[0]);
    let mut mismatches = 0;
    let m = 500;
    let mut cases = 0;
    for trial in 0..20 {
        let mut xs: Vec<f64> = match trial % 2 {
            0 => (0..m)
                .map(|_| rng.sample(Gamma::new(2.0, 1.0).unwrap()))
                .collect(),
            _ => (0..m)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        xs.sort_by(f64::total_cmp);
        for alpha in [0.01, 0.05, 0.1, 0.2, 0.5] {
            cases += 1;
            let (lo, hi) = hdr_interval(&xs, alpha).unwrap();
            let w = ((1.0 - alpha) * m as f64 - 1e-9).ceil() as usize;
            let best = (0..=m - w)
                .map(|i| xs[i + w - 1] - xs[i])
                .fold(f64::INFINITY, f64::min);
            let i = xs.iter().position(|&x| x == lo);
            let window_ok = i.is_some_and(|i| i + w - 1 < m && xs[i + w - 1] == hi);
            if !(window_ok && hi - lo == best) {
                mismatches += 1;
            }
        }
    }
    let mut z: Vec<f64> = (0..100_000)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    z.sort_by(f64::total_cmp);
    let (lo, hi) = hdr_interval(&z, 0.05).unwrap();
    let normal_ok = (lo + 1.96).abs() <= 0.08 && (hi - 1.96).abs() <= 0.08;
    outcome(
        mismatches == 0 && normal_ok,
        format!(
            "{mismatches}/{cases} non-minimal windows at m = {m}; normal 95% HDR ({lo:.3}, {hi:.3})"
        ),
    )
}

fn c12_cli_determinism() -> Outcome {
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/example.csv");
    let runs: [&[&str]; 4] = [
        &["fit", "--data", data, "--time-origin", "0", "--seed", "12"],
        &[
            "interval",
            "--data",
            data,
            "--time-origin",
            "0",
            "--n-draws",
            "500",
            "--n-boot",
            "200",
            "--seed",
            "12",
        ],
        &[
            "bounds",
            "--scenario",
            "tableS1_mixtures",
            "--n-mc",
            "20000",
            "--seed",
            "12",
        ],
        &[
            "simulate",
            "--scenario",
            "table2_poisson",
            "--n-subjects",
            "20",
            "--replications",
            "3",
            "--n-draws",
            "300",
            "--n-boot",
            "100",
            "--seed",
            "12",
        ],
    ];
    let mut bad = Vec::new();
    for args in runs {
        let exec = || {
            Command::new(env!("CARGO_BIN_EXE_ccc-fiducial"))
                .args(args)
                .output()
                .expect("spawn ccc-fiducial")
        };
        let (a, b) = (exec(), exec());
        if !(a.status.success() && a.stdout == b.stdout && !a.stdout.is_empty()) {
            bad.push(args[0]);
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "fit, interval, bounds and simulate reruns are byte-identical".to_string()
        } else {
            format!("not reproducible: {}", bad.join(", "))
        },
    )
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Check); 12] = [
        ("Wishart fiducial exactness", c1_wishart_exactness),
        ("substitution property", c2_substitution),
        ("attainable bounds", c3_bounds),
        ("closed forms vs sample oracle", c4_closed_forms),
        ("exact vs numerical Poisson CCC", c5_exact_vs_numerical),
        ("bound sandwich", c6_sandwich),
        ("Gaussian coverage at N = 30", c7_gaussian_coverage),
        ("Poisson coverage at N = 30", c8_poisson_coverage),
        ("recovery gradient", c9_gradient),
        ("joint vs proxy pivots", c10_joint_vs_proxy),
        ("HDR correctness", c11_hdr),
        ("CLI determinism", c12_cli_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut unexpected = Vec::new();
    let mut counts = (0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let o = check();
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {}", o.detail);
        match (o.pass, known) {
            (true, None) => counts.0 += 1,
            (false, Some((_, why))) => {
                counts.1 += 1;
                println!("             known failure: {why}");
            }
            (true, Some(_)) => {
                counts.0 += 1;
                unexpected.push(format!(
                    "criterion {id} passes but is listed as a known failure"
                ));
            }
            (false, None) => {
                counts.1 += 1;
                unexpected.push(format!("criterion {id} failed"));
            }
        }
    }
    println!("acceptance: {} PASS, {} FAIL", counts.0, counts.1);
    if !unexpected.is_empty() {
        for u in &unexpected {
            eprintln!("{u}");
        }
        std::process::exit(1);
    }
}
