//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Correctness criteria (1, 2, 3, 9) and the stability half of 8 are hard
//! assertions. The empirical trend criteria (4 to 8) print their verdict and
//! measured numbers; set `TDSA_ACCEPTANCE_STRICT=1` to make a trend FAIL
//! fail the test as well.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use tdsa_core::config::RunConfig;
use tdsa_core::datagen::{self, SyntheticData};
use tdsa_core::experiment::{self, RunOutcome};
use tdsa_core::resample::UpsampleMethod;
use tdsa_core::selftest::{self, SelftestOptions, SuiteReport};
use tdsa_core::trainer::TrainConfig;

const PROFILE: &str = include_str!("../../../configs/acceptance.cfg");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    hard: bool,
    detail: String,
}

impl Verdict {
    fn line(&self) -> String {
        format!(
            "criterion {} ({}): {}  {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

/// Writes straight to stderr so the lines survive the harness's output
/// capture and show up in a plain `cargo test` log.
fn say(line: &str) {
    let _ = writeln!(io::stderr(), "{line}");
}

fn report(v: Verdict, all: &mut Vec<Verdict>) {
    say(&v.line());
    all.push(v);
}

fn suites_pass(reports: &[SuiteReport]) -> (bool, String) {
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let worst: Vec<String> = reports.iter().map(|r| format!("{} {:.1e}", r.name, r.worst)).collect();
    (failed.is_empty(), format!("{}; failing: [{}]", worst.join(", "), failed.join(", ")))
}

fn profile() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(PROFILE).expect("acceptance profile parses");
    cfg.validate().expect("acceptance profile is valid");
    cfg
}

/// Seed-ordered outcomes of one configuration family.
type Family = Vec<RunOutcome>;

struct Runs {
    data: SyntheticData,
    cache: BTreeMap<String, Family>,
    seconds: BTreeMap<String, f64>,
}

impl Runs {
    fn family(&mut self, key: &str, base: &TrainConfig) -> Result<&Family, String> {
        if !self.cache.contains_key(key) {
            let start = Instant::now();
            let configs = experiment::seed_sweep(base, &SEEDS);
            let results = experiment::run_configs(&self.data.train, &self.data.test, &configs);
            let mut out = Vec::new();
            for (seed, r) in SEEDS.iter().zip(results) {
                out.push(r.map_err(|e| format!("{key} seed {seed}: {e}"))?);
            }
            self.seconds.insert(key.to_string(), start.elapsed().as_secs_f64());
            let accs: Vec<String> = out.iter().map(|o| format!("{:.3}", o.eval.accuracy)).collect();
            say(&format!("  runs {key}: accuracy per seed [{}] ({:.0} s)", accs.join(", "), self.seconds[key]));
            self.cache.insert(key.to_string(), out);
        }
        Ok(&self.cache[key])
    }
}

fn accuracies(f: &Family) -> Vec<f64> {
    f.iter().map(|o| o.eval.accuracy).collect()
}

fn pts(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Runs each CLI invocation in two fresh output directories and compares
/// every produced file byte for byte.
fn determinism() -> (bool, String) {
    let bin = env!("CARGO_BIN_EXE_tdsa");
    let small = [
        "--set", "image_size=16", "--set", "widths=4,6,6", "--set", "classes=4", "--set", "global_vocab=2",
        "--set", "train_per_class=4", "--set", "test_per_class=2", "--set", "epochs=2", "--set", "milestones=1",
        "--set", "batch_size=8", "--seed", "3",
    ];
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let commands: [&[&str]; 6] = [
        &["selftest"],
        &["gradcheck"],
        &["gen-data"],
        &["train"],
        &["eval", "--checkpoint", "{train}/checkpoint"],
        &["visualize", "--checkpoint", "{train}/checkpoint", "--class", "1", "--limit", "2", "--raw"],
    ];
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for cmd in commands {
        for root in &roots {
            let train_dir = root.path().join("train");
            let out = root.path().join(cmd[0]);
            let args: Vec<String> = cmd
                .iter()
                .map(|a| a.replace("{train}", &train_dir.to_string_lossy()))
                .chain(small.iter().map(|s| s.to_string()))
                .chain(["--out".to_string(), out.to_string_lossy().into_owned()])
                .collect();
            let status = Command::new(bin).args(&args).output().unwrap();
            assert!(status.status.success(), "tdsa {args:?} failed: {}", String::from_utf8_lossy(&status.stderr));
        }
        let (a, b) = (roots[0].path().join(cmd[0]), roots[1].path().join(cmd[0]));
        let (fa, fb) = (files_under(&a), files_under(&b));
        if fa != fb || fa.is_empty() {
            mismatches.push(format!("{}: file lists differ", cmd[0]));
            continue;
        }
        for f in fa {
            compared += 1;
            if fs::read(a.join(&f)).unwrap() != fs::read(b.join(&f)).unwrap() {
                mismatches.push(format!("{}/{}", cmd[0], f.display()));
            }
        }
    }
    (
        mismatches.is_empty() && compared > 0,
        format!("{compared} files compared across 6 commands; differing: [{}]", mismatches.join(", ")),
    )
}

#[test]
fn acceptance_criteria() {
    let strict = std::env::var("TDSA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let opts = SelftestOptions::default();
    let mut all = Vec::new();

    let t = Instant::now();
    let eq = selftest::oracle_equivalence(&opts, 50).unwrap();
    let secs = t.elapsed().as_secs_f64();
    report(
        Verdict {
            id: 1,
            name: "oracle equivalence",
            passed: eq.passed && eq.worst <= 1e-9 && secs < 10.0,
            hard: true,
            detail: format!("50 cases, worst relative error {:.2e} (≤ 1e-9), {secs:.2} s (< 10 s)", eq.worst),
        },
        &mut all,
    );

    let t = Instant::now();
    let grads = [
        selftest::loss_gradcheck(&opts, 20).unwrap(),
        selftest::backbone_gradcheck(0, &selftest::tiny_backbone(), &profile().train.loss).unwrap(),
    ];
    let secs = t.elapsed().as_secs_f64();
    let (ok, detail) = suites_pass(&grads);
    report(
        Verdict {
            id: 2,
            name: "gradient fidelity",
            passed: ok && grads.iter().all(|r| r.worst <= 1e-4) && secs < 120.0,
            hard: true,
            detail: format!("{detail}; {} backbone params; {secs:.1} s (< 120 s)", grads[1].cases),
        },
        &mut all,
    );

    let invariants = [
        selftest::mask_counts(&opts),
        selftest::diversity_bounds(&opts, 200).unwrap(),
        selftest::softmax(&opts, 100).unwrap(),
        selftest::gate(&opts, 40).unwrap(),
        selftest::identities(&opts, 50).unwrap(),
    ];
    let (ok, detail) = suites_pass(&invariants);
    report(Verdict { id: 3, name: "analytic invariants", passed: ok, hard: true, detail }, &mut all);

    let cfg = profile();
    let mut runs = Runs {
        data: datagen::generate(&cfg.data).unwrap(),
        cache: BTreeMap::new(),
        seconds: BTreeMap::new(),
    };
    let tdsa = cfg.train.clone();
    let mut ce = tdsa.clone();
    ce.loss.mu = 0.0;

    let t = Instant::now();
    let fam_tdsa = runs.family("tdsa", &tdsa).unwrap().clone();
    let fam_ce = runs.family("ce", &ce).unwrap().clone();
    let secs = t.elapsed().as_secs_f64();
    let (a_t, a_c) = (accuracies(&fam_tdsa), accuracies(&fam_ce));
    let gap = experiment::mean(&a_t) - experiment::mean(&a_c);
    let worst_seed = a_t.iter().zip(&a_c).map(|(t, c)| t - c).fold(f64::INFINITY, f64::min);
    report(
        Verdict {
            id: 4,
            name: "directional trend",
            passed: gap >= 0.03 && worst_seed >= -0.01 && secs < 1800.0,
            hard: false,
            detail: format!(
                "mean accuracy TDSA {} vs CE {} (gap {} pts, need ≥ 3); worst seed {} pts (need ≥ -1); {secs:.0} s (< 1800 s)",
                pts(experiment::mean(&a_t)),
                pts(experiment::mean(&a_c)),
                pts(gap),
                pts(worst_seed)
            ),
        },
        &mut all,
    );

    let chance = 1.0 / cfg.train.backbone.num_classes as f64;
    let align_t = experiment::mean(&fam_tdsa.iter().map(|o| o.eval.alignment_accuracy).collect::<Vec<_>>());
    let align_c = experiment::mean(&fam_ce.iter().map(|o| o.eval.alignment_accuracy).collect::<Vec<_>>());
    let mean_t = experiment::mean(&a_t);
    report(
        Verdict {
            id: 5,
            name: "channel alignment",
            passed: align_t >= mean_t - 0.10 && align_c < 2.0 * chance,
            hard: false,
            detail: format!(
                "TDSA alignment {} vs logits {} (need within 10 pts); CE alignment {} (need < {})",
                pts(align_t),
                pts(mean_t),
                pts(align_c),
                pts(2.0 * chance)
            ),
        },
        &mut all,
    );

    let contain = |f: &Family| experiment::mean(&f.iter().map(|o| o.eval.containment.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let (c_t, c_c) = (contain(&fam_tdsa), contain(&fam_ce));
    report(
        Verdict {
            id: 6,
            name: "attention containment",
            passed: c_t - c_c >= 0.15,
            hard: false,
            detail: format!("TDSA {c_t:.3} vs CE {c_c:.3} (difference {:.3}, need ≥ 0.15)", c_t - c_c),
        },
        &mut all,
    );

    let mut by_method = Vec::new();
    for m in UpsampleMethod::ALL {
        let mut c = tdsa.clone();
        c.loss.upsample = m;
        let key = if m == tdsa.loss.upsample { "tdsa".to_string() } else { format!("upsample-{m}") };
        let fam = runs.family(&key, &c).unwrap();
        by_method.push((m, experiment::mean(&accuracies(fam))));
    }
    let spread = experiment::spread(&by_method.iter().map(|(_, a)| *a).collect::<Vec<_>>());
    report(
        Verdict {
            id: 7,
            name: "upsample insensitivity",
            passed: spread <= 0.03,
            hard: false,
            detail: format!(
                "{}; spread {} pts (need ≤ 3)",
                by_method.iter().map(|(m, a)| format!("{m} {}", pts(*a))).collect::<Vec<_>>().join(", "),
                pts(spread)
            ),
        },
        &mut all,
    );

    let mut by_xi = Vec::new();
    let mut unstable = Vec::new();
    for xi in 1..=4 {
        let mut c = tdsa.clone();
        c.backbone.xi_mult = xi;
        let key = if xi == tdsa.backbone.xi_mult { "tdsa".to_string() } else { format!("xi-{xi}") };
        match runs.family(&key, &c) {
            Ok(fam) => by_xi.push((xi, experiment::mean(&accuracies(fam)))),
            Err(e) => unstable.push(e),
        }
    }
    let base = by_xi.iter().find(|(x, _)| *x == 1).map(|(_, a)| *a);
    let best = by_xi.iter().filter(|(x, _)| *x > 1).map(|(_, a)| *a).fold(f64::NEG_INFINITY, f64::max);
    let trend = base.is_some_and(|b| best - b >= 0.01);
    report(
        Verdict {
            id: 8,
            name: "xi sweep",
            passed: unstable.is_empty() && trend,
            hard: false,
            detail: format!(
                "{}; best of 2..4 minus 1 = {} pts (need ≥ 1); aborted runs: [{}]",
                by_xi.iter().map(|(x, a)| format!("ξ_mult={x} {}", pts(*a))).collect::<Vec<_>>().join(", "),
                base.map(|b| pts(best - b)).unwrap_or_else(|| "n/a".into()),
                unstable.join("; ")
            ),
        },
        &mut all,
    );
    assert!(unstable.is_empty(), "ξ sweep aborted: {unstable:?}");

    let (ok, detail) = determinism();
    report(Verdict { id: 9, name: "determinism", passed: ok, hard: true, detail }, &mut all);

    say("\nacceptance summary");
    for v in &all {
        say(&v.line());
    }
    let hard_failures: Vec<usize> = all.iter().filter(|v| v.hard && !v.passed).map(|v| v.id).collect();
    assert!(hard_failures.is_empty(), "correctness criteria failed: {hard_failures:?}");
    if strict {
        let failures: Vec<usize> = all.iter().filter(|v| !v.passed).map(|v| v.id).collect();
        assert!(failures.is_empty(), "criteria failed: {failures:?}");
    }
}
