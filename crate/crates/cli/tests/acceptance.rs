//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Criteria that cannot be met in the current environment (the Frappe run
//! needs the dataset on disk) are still executed and reported as failures.
//! The process exits non-zero on any failure only when
//! `FINALMLP_ACCEPTANCE_STRICT=1`, so the workspace test run stays usable
//! without the external data.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use finalmlp::config::{prepare_data, Prepared};
use finalmlp::fusion::{BilinearFusion, Fusion, FusionLayer, LinearFusion, LinearMode};
use finalmlp::metrics::{auc_fraction, count_parameters};
use finalmlp::model::StreamConfig;
use finalmlp::run::{gradcheck_run, matched_mlp_config, train_prepared, TrainRun};
use finalmlp::{FieldInfo, FusionSpec, Model, ModelConfig, ModelContainer, RunConfig, Variant};
use finalmlp_cli::{cmd_train, Common};

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn report(id: &'static str, title: &'static str, passed: bool, detail: String) -> Outcome {
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {id} {title}: {detail}");
    Outcome {
        id,
        title,
        passed,
        detail,
    }
}

fn workspace() -> PathBuf {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    p.canonicalize().unwrap_or(p)
}

fn config(name: &str) -> RunConfig {
    RunConfig::load(&workspace().join("configs").join(name)).expect("bundled config loads")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------- 1

fn gradient_check() -> Outcome {
    let cfg = config("gradcheck.toml");
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut failed = Vec::new();
    let mut err = None;
    for v in Variant::ALL {
        let mut mc = cfg.model_config();
        mc.variant = v;
        match gradcheck_run(&cfg, &mc, false) {
            Ok(r) => {
                if !r.passed {
                    failed.push(v.name());
                }
                if r.max_rel_err() > worst.1 {
                    worst = (format!("{v} {}", r.worst().map(|t| t.name.as_str()).unwrap_or("")), r.max_rel_err());
                }
            }
            Err(e) => err = Some(format!("{v}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = failed.is_empty() && err.is_none() && secs < 60.0 && worst.1 < cfg.gradcheck.threshold;
    report(
        "1",
        "gradient check, 7 variants, batch 32, eps 1e-5",
        passed,
        match err {
            Some(e) => format!("error {e}"),
            None => format!(
                "max rel err {:.2e} ({}) < {:e}, failed {:?}, {secs:.1}s < 60s",
                worst.1, worst.0, cfg.gradcheck.threshold, failed
            ),
        },
    )
}

// ---------------------------------------------------------------- 2

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn logits(f: &Fusion, o1: &Array2<f64>, o2: &Array2<f64>) -> Array1<f64> {
    f.forward(o1.view(), Some(o2.view())).expect("valid fusion").0
}

fn max_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A uniformly chosen divisor of `n`.
fn random_divisor(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let ds: Vec<usize> = (1..=n).filter(|k| n % k == 0).collect();
    ds[rng.random_range(0..ds.len())]
}

fn fusion_identities() -> Outcome {
    const TRIALS: usize = 200;
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    for _ in 0..TRIALS {
        let batch = rng.random_range(1..6);

        // (a) k heads against one head holding the block-diagonal embedding.
        let k = rng.random_range(1..7);
        let (p, q) = (rng.random_range(1..5), rng.random_range(1..5));
        let (d1, d2) = (k * p, k * q);
        let heads = BilinearFusion {
            bias: Array1::from_shape_simple_fn(k, || rng.random_range(-1.0..1.0)),
            w1: uniform(&mut rng, (k, p)),
            w2: uniform(&mut rng, (k, q)),
            w3: Array3::from_shape_simple_fn((k, p, q), || rng.random_range(-1.0..1.0)),
        };
        let mut block = Array3::zeros((1, d1, d2));
        for j in 0..k {
            block
                .slice_mut(s![0, j * p..(j + 1) * p, j * q..(j + 1) * q])
                .assign(&heads.w3.slice(s![j, .., ..]));
        }
        let full = BilinearFusion {
            bias: Array1::from_elem(1, heads.bias.sum()),
            w1: heads.w1.clone().into_shape_with_order((1, d1)).unwrap(),
            w2: heads.w2.clone().into_shape_with_order((1, d2)).unwrap(),
            w3: block,
        };
        let (o1, o2) = (uniform(&mut rng, (batch, d1)), uniform(&mut rng, (batch, d2)));
        let a = logits(&Fusion::from_layer(FusionLayer::Bilinear(heads), d1, d2).unwrap(), &o1, &o2);
        let b = logits(&Fusion::from_layer(FusionLayer::Bilinear(full), d1, d2).unwrap(), &o1, &o2);
        worst[0] = worst[0].max(max_diff(&a, &b));

        // (b) W3 = 0 against concat-linear with the stacked weights.
        let (d1, d2) = (rng.random_range(1..12), rng.random_range(1..12));
        let k = random_divisor(&mut rng, gcd(d1, d2));
        let w1 = uniform(&mut rng, (k, d1 / k));
        let w2 = uniform(&mut rng, (k, d2 / k));
        let bias = Array1::from_shape_simple_fn(k, || rng.random_range(-1.0..1.0));
        let mut weight = Array1::zeros(d1 + d2);
        weight.slice_mut(s![..d1]).assign(&w1.iter().copied().collect::<Array1<f64>>());
        weight.slice_mut(s![d1..]).assign(&w2.iter().copied().collect::<Array1<f64>>());
        let concat = LinearFusion {
            mode: LinearMode::Concat,
            weight,
            bias: Array1::from_elem(1, bias.sum()),
        };
        let zero_w3 = BilinearFusion {
            bias,
            w1,
            w2,
            w3: Array3::zeros((k, d1 / k, d2 / k)),
        };
        let (o1, o2) = (uniform(&mut rng, (batch, d1)), uniform(&mut rng, (batch, d2)));
        let a = logits(&Fusion::from_layer(FusionLayer::Bilinear(zero_w3), d1, d2).unwrap(), &o1, &o2);
        let b = logits(&Fusion::from_layer(FusionLayer::Linear(concat), d1, d2).unwrap(), &o1, &o2);
        worst[1] = worst[1].max(max_diff(&a, &b));

        // (c) k = d1 = d2 with unit scalar heads against a scalar loop.
        let d = rng.random_range(1..16);
        let unit = BilinearFusion {
            bias: Array1::zeros(d),
            w1: Array2::zeros((d, 1)),
            w2: Array2::zeros((d, 1)),
            w3: Array3::ones((d, 1, 1)),
        };
        let (o1, o2) = (uniform(&mut rng, (batch, d)), uniform(&mut rng, (batch, d)));
        let a = logits(&Fusion::from_layer(FusionLayer::Bilinear(unit), d, d).unwrap(), &o1, &o2);
        let oracle: Array1<f64> = (0..batch)
            .map(|r| (0..d).map(|i| o1[[r, i]] * o2[[r, i]]).sum())
            .collect();
        worst[2] = worst[2].max(max_diff(&a, &oracle));

        // (d) one head, W3 = I, w = b = 0 against the dot product.
        let d = rng.random_range(1..16);
        let mut eye = Array3::zeros((1, d, d));
        for i in 0..d {
            eye[[0, i, i]] = 1.0;
        }
        let dot = BilinearFusion {
            bias: Array1::zeros(1),
            w1: Array2::zeros((1, d)),
            w2: Array2::zeros((1, d)),
            w3: eye,
        };
        let (o1, o2) = (uniform(&mut rng, (batch, d)), uniform(&mut rng, (batch, d)));
        let a = logits(&Fusion::from_layer(FusionLayer::Bilinear(dot), d, d).unwrap(), &o1, &o2);
        let oracle: Array1<f64> = (0..batch).map(|r| o1.row(r).dot(&o2.row(r))).collect();
        worst[3] = worst[3].max(max_diff(&a, &oracle));
    }
    report(
        "2",
        "fusion degenerate cases",
        worst.iter().all(|&w| w < TOL),
        format!(
            "{TRIALS} random cases each; max abs diff block-diagonal {:.1e}, W3=0 vs concat {:.1e}, unit heads vs ewp {:.1e}, identity vs dot {:.1e} (tol {TOL:e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ---------------------------------------------------------------- 3

fn factor_of_k() -> Outcome {
    let d = 1000;
    let mut lines = Vec::new();
    let mut ok = true;
    for k in [1, 2, 4, 5, 8, 10, 50] {
        let cfg = ModelConfig {
            variant: Variant::NoFs,
            embedding_dim: 2,
            stream1: StreamConfig::new(vec![d]),
            stream2: StreamConfig::new(vec![d]),
            fusion: FusionSpec::bilinear(k),
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, &FieldInfo::from_sizes(&[3, 3]), 1).expect("valid config");
        let fusion = count_parameters(&model).get("fusion");
        let matrix = fusion - k - 2 * d;
        let want = 1_000_000 / k;
        ok &= matrix == want && matrix * k == 1_000_000;
        lines.push(format!("k={k}:{matrix}"));
    }
    report(
        "3",
        "bilinear matrix parameters at d1=d2=1000",
        ok,
        format!("{} (expected 1,000,000/k)", lines.join(" ")),
    )
}

// ---------------------------------------------------------------- 4

/// `(2·ordered + ties, 2·n_pos·n_neg)` by enumerating every pair.
fn pairwise(scores: &[f64], labels: &[u8]) -> (u64, u64) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&s, _)| s).collect();
    let mut num = 0u64;
    for &p in &pos {
        for &n in &neg {
            num += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    (num, 2 * pos.len() as u64 * neg.len() as u64)
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut mismatches, mut monotone, mut swap, mut cases) = (0, 0, 0, 0);
    while cases < 1000 {
        let n = rng.random_range(2..=2000);
        // Dyadic scores on a coarse grid so ties are common and the monotone
        // maps below are exact in floating point.
        let levels = if rng.random_bool(0.5) { 16 } else { 1024 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 1024.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        if labels.iter().all(|&y| y == labels[0]) {
            continue;
        }
        cases += 1;
        let rank = auc_fraction(&scores, &labels).unwrap();
        let oracle = pairwise(&scores, &labels);
        mismatches += usize::from(rank != oracle);

        let cubed: Vec<f64> = scores.iter().map(|x| x * x * x + 5.0 * x - 3.0).collect();
        monotone += usize::from(auc_fraction(&cubed, &labels).unwrap() != rank);

        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let (u, d) = auc_fraction(&scores, &flipped).unwrap();
        swap += usize::from(d != rank.1 || u != rank.1 - rank.0);
    }
    report(
        "4",
        "rank AUC equals pairwise AUC",
        mismatches + monotone + swap == 0,
        format!(
            "{cases} random cases, n <= 2000, exact rational comparison: {mismatches} pairwise mismatches, {monotone} monotone-transform mismatches, {swap} label-swap mismatches"
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

struct SeedRuns {
    seeds: Vec<u64>,
    /// Per variant name, test AUC per seed.
    test_auc: Vec<(String, Vec<f64>)>,
    first_over_95: Vec<Option<usize>>,
    params: Vec<(String, usize)>,
    kept: Option<TrainRun>,
}

fn synthetic_runs() -> finalmlp::Result<SeedRuns> {
    let cfg = config("synthetic.toml");
    let prepared: Prepared = prepare_data(&cfg.data, &cfg.split)?;
    let fields = prepared.fields();
    let base = cfg.model_config();
    let mlp = matched_mlp_config(&base, &fields)?;
    let seeds = cfg.ablate.seeds.clone();
    let mut out = SeedRuns {
        seeds: seeds.clone(),
        test_auc: Vec::new(),
        first_over_95: Vec::new(),
        params: Vec::new(),
        kept: None,
    };
    let variants = [Variant::FinalMlp, Variant::Mlp, Variant::Sum, Variant::Concat, Variant::Ewp];
    for v in variants {
        let mc = if v == Variant::Mlp {
            mlp.clone()
        } else {
            ModelConfig { variant: v, ..base.clone() }
        };
        let mut aucs = Vec::new();
        for &seed in &seeds {
            let run = train_prepared(&RunConfig { seed, ..cfg.clone() }, &mc, prepared.clone())?;
            aucs.push(run.test.auc);
            if v == Variant::FinalMlp {
                out.first_over_95
                    .push(run.history.iter().position(|e| e.val_auc > 0.95).map(|i| i + 1));
                if out.kept.is_none() {
                    out.kept = Some(run.clone());
                }
            }
            if seed == seeds[0] {
                out.params.push((v.name().to_owned(), run.test.n_parameters));
            }
        }
        out.test_auc.push((v.name().to_owned(), aucs));
    }
    Ok(out)
}

fn aucs<'a>(runs: &'a SeedRuns, name: &str) -> &'a [f64] {
    &runs.test_auc.iter().find(|(n, _)| n == name).expect("variant was run").1
}

fn synthetic_task(runs: &SeedRuns) -> Outcome {
    let fin = aucs(runs, "FinalMLP");
    let mlp = aucs(runs, "MLP");
    let reached = runs.first_over_95.iter().all(|e| e.is_some_and(|e| e <= 20));
    let params = |n: &str| runs.params.iter().find(|(v, _)| v == n).map_or(0, |p| p.1);
    report(
        "5",
        "synthetic interaction task, 50k instances, M=8, d=10",
        reached && mean(fin) > mean(mlp),
        format!(
            "first epoch with val AUC > 0.95 per seed {:?} (limit 20); mean test AUC FinalMLP {:.4} ({} params) vs matched MLP {:.4} ({} params) over {} seeds",
            runs.first_over_95.iter().map(|e| e.unwrap_or(0)).collect::<Vec<_>>(),
            mean(fin),
            params("FinalMLP"),
            mean(mlp),
            params("MLP"),
            runs.seeds.len()
        ),
    )
}

fn ablation_order(runs: &SeedRuns) -> Outcome {
    println!("      per-seed test AUC:");
    print!("      {:<16}", "variant");
    for s in &runs.seeds {
        print!(" seed {s:<3}");
    }
    println!("   mean");
    for (name, xs) in &runs.test_auc {
        print!("      {name:<16}");
        for x in xs {
            print!(" {x:.5} ");
        }
        println!(" {:.5}", mean(xs));
    }
    let fin = mean(aucs(runs, "FinalMLP"));
    let mut parts = Vec::new();
    let mut ok = true;
    for other in ["FinalMLP-sum", "FinalMLP-concat", "FinalMLP-ewp"] {
        let m = mean(aucs(runs, other));
        ok &= fin >= m;
        parts.push(format!("{} {other} {m:.4}", if fin >= m { ">=" } else { "<" }));
    }
    report(
        "6",
        "bilinear fusion mean AUC vs sum, concat, ewp",
        ok,
        format!("bilinear {fin:.4} {}", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 7

fn frappe() -> Outcome {
    const TITLE: &str = "Frappe test AUC >= 98.0 within 30 minutes";
    let dir = std::env::var_os("FINALMLP_FRAPPE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/frappe"));
    let files = ["train.csv", "valid.csv", "test.csv"].map(|f| dir.join(f));
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return report(
            "7",
            TITLE,
            false,
            format!("dataset not available ({} missing); set FINALMLP_FRAPPE_DIR", missing.display()),
        );
    }
    let mut cfg = config("frappe.toml");
    let [train, valid, test] = files;
    cfg.data.train = Some(train);
    cfg.data.valid = Some(valid);
    cfg.data.test = Some(test);
    let start = Instant::now();
    let result = prepare_data(&cfg.data, &cfg.split).and_then(|p| {
        let stats = (
            p.train.len() + p.valid.len() + p.test.len(),
            p.schema.num_fields(),
            p.schema.feature_count(),
        );
        train_prepared(&cfg, &cfg.model_config(), p).map(|r| (stats, r))
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(((n, m, features), run)) => report(
            "7",
            TITLE,
            run.test.auc >= 0.980 && secs < 1800.0,
            format!(
                "test AUC {:.2} (reference 98.61, floor 98.00), {n} instances, {m} fields, {features} features, {secs:.0}s",
                100.0 * run.test.auc
            ),
        ),
        Err(e) => report("7", TITLE, false, format!("run failed: {e}")),
    }
}

// ---------------------------------------------------------------- 8

fn persistence(runs: &SeedRuns) -> Outcome {
    const TITLE: &str = "save and load give bit-identical predictions on 10k instances";
    let Some(run) = &runs.kept else {
        return report("8", TITLE, false, "no trained model".into());
    };
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("m.fmlp");
    let result = run.container.save(&path).and_then(|_| ModelContainer::load(&path));
    let loaded = match result {
        Ok(c) => c,
        Err(e) => return report("8", TITLE, false, format!("round trip failed: {e}")),
    };
    let sizes = run.container.schema.field_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids = Array2::from_shape_fn((10_000, sizes.len()), |(_, j)| rng.random_range(0..sizes[j] as u32));
    let before = run.container.model.predict(ids.view()).unwrap();
    let after = loaded.model.predict(ids.view()).unwrap();
    let differing = before.iter().zip(&after).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    report(
        "8",
        TITLE,
        differing == 0 && before.len() == 10_000,
        format!("{differing} of {} predictions differ in any bit", before.len()),
    )
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    const TITLE: &str = "two train runs give byte-identical model and metrics files";
    let dir = tempfile::tempdir().expect("temp dir");
    let common = |out: &str| Common {
        config: Some(workspace().join("configs/synthetic.toml")),
        out_dir: Some(dir.path().join(out)),
        ..Common::default()
    };
    let runs = cmd_train(&common("a"), &mut std::io::sink()).and_then(|a| Ok((a, cmd_train(&common("b"), &mut std::io::sink())?)));
    match runs {
        Ok((a, b)) => {
            let same = |x: &Path, y: &Path| std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
            let model = same(&a.model, &b.model);
            let metrics = same(&a.metrics, &b.metrics);
            report(
                "9",
                TITLE,
                model && metrics,
                format!(
                    "model files identical: {model} ({} bytes), metrics CSVs identical: {metrics}",
                    std::fs::metadata(&a.model).map(|m| m.len()).unwrap_or(0)
                ),
            )
        }
        Err(e) => report("9", TITLE, false, format!("train failed: {e:#}")),
    }
}

fn main() {
    let start = Instant::now();
    let mut outcomes = vec![gradient_check(), fusion_identities(), factor_of_k(), auc_oracle()];
    match synthetic_runs() {
        Ok(runs) => {
            outcomes.push(synthetic_task(&runs));
            outcomes.push(ablation_order(&runs));
            outcomes.push(frappe());
            outcomes.push(persistence(&runs));
        }
        Err(e) => {
            for (id, title) in [("5", "synthetic interaction task"), ("6", "fusion ablation order")] {
                outcomes.push(report(id, title, false, format!("synthetic runs failed: {e}")));
            }
            outcomes.push(frappe());
            outcomes.push(report("8", "persistence round trip", false, "no trained model".into()));
        }
    }
    outcomes.push(determinism());

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.0}s",
        outcomes.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    for o in &failed {
        println!("  failed {} {}: {}", o.id, o.title, o.detail);
    }
    let strict = std::env::var("FINALMLP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
